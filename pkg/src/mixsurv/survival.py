"""Retrieval-aware mixture survival head, censored likelihood and two-phase training."""
from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .dataio import Cohort
from .fusion import FusionEncoder
from .numerics import DTYPE, Adam, AdamW, NumericalError, SeededRng, grad_of
from .omics import OmicsEncoder

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# batches and grids

@dataclass
class Batch:
    clinical: torch.Tensor
    paraclinical: torch.Tensor
    demographic: torch.Tensor
    omics: list
    omics_present: list
    time: torch.Tensor
    event: torch.Tensor
    treatment: torch.Tensor

    @classmethod
    def from_cohort(cls, cohort: Cohort) -> "Batch":
        n = len(cohort)

        def block(name):
            if name in cohort.blocks:
                return torch.as_tensor(cohort.blocks[name], dtype=DTYPE)
            return torch.zeros(n, 0, dtype=DTYPE)

        for name in ("clinical", "paraclinical"):
            if cohort.dims.get(name, 0) == 0:
                raise ValueError(f"cohort has no {name} features")
        if not cohort.omics_names:
            raise ValueError("cohort has no omics blocks")
        for name, values in cohort.blocks.items():
            if np.isnan(values).any():
                raise ValueError(f"block {name!r} still holds missing values; preprocess the cohort first")
        return cls(block("clinical"), block("paraclinical"), block("demographic"),
                   [block(s) for s in cohort.omics_names],
                   [torch.as_tensor(cohort.present[s]) for s in cohort.omics_names],
                   torch.as_tensor(cohort.time, dtype=DTYPE),
                   torch.as_tensor(cohort.event.astype(np.float64), dtype=DTYPE),
                   torch.as_tensor(cohort.treatment.astype(np.float64), dtype=DTYPE))

    def __len__(self) -> int:
        return self.time.shape[0]

    def take(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Batch(self.clinical[idx], self.paraclinical[idx], self.demographic[idx],
                     [o[idx] for o in self.omics], [p[idx] for p in self.omics_present],
                     self.time[idx], self.event[idx], self.treatment[idx])

    def with_treatment(self, a: int) -> "Batch":
        b = copy.copy(self)
        b.treatment = torch.full_like(self.treatment, float(a))
        return b


def make_grid(time, event, n_bins: int = 20) -> np.ndarray:
    """Bin edges ``0 = t_0 < t_1 < ... < t_B``: interior edges at event-time
    quantiles, last edge at the largest observed time."""
    time = np.asarray(time, float)
    event = np.asarray(event, bool)
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    if not event.any():
        raise ValueError("cannot build a time grid without events")
    t_max = float(time.max())
    inner = np.quantile(time[event], np.arange(1, n_bins) / n_bins)
    edges = np.unique(np.concatenate([[0.0], inner[inner > 0], [t_max]]))
    if edges.size < 3:
        raise ValueError("observed times too degenerate for a grid with >= 2 bins")
    return edges


def _softplus_inv(y: float) -> float:
    return y + math.log(-math.expm1(-y))


# ---------------------------------------------------------------------------
# survival head

@dataclass
class GateDistributions:
    baseline: torch.Tensor   # P(Z=k|x), N x K
    response: torch.Tensor   # P(Phi=m|x), N x M
    joint: torch.Tensor      # N x K x M
    v: torch.Tensor          # baseline gate logits
    u: torch.Tensor          # response gate logits


@dataclass
class SurvivalCurve:
    times: np.ndarray
    values: np.ndarray
    treatment: np.ndarray


def _mlp(d_in, hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, hidden, dtype=DTYPE), nn.ReLU(), nn.Linear(hidden, d_out, dtype=DTYPE))


class MixtureSurvivalHead(nn.Module):
    """Mixture of K x M proportional-hazards kernels with piecewise-constant
    baseline hazards on a fixed grid.

    ``risk_input`` selects what the hazard network sees: ``"logits"`` (the
    baseline gate logits), ``"x"`` (the representation) or ``"none"`` (h = 0).
    """

    def __init__(self, d_x: int, n_baseline: int, n_response: int, edges, gate_hidden: int = 64,
                 hazard_hidden: int = 32, risk_input: str = "logits", init_rate: float = 0.1):
        super().__init__()
        if n_baseline < 1 or n_response < 1:
            raise ValueError("K and M must be >= 1")
        if risk_input not in ("logits", "x", "none"):
            raise ValueError(f"unknown risk_input {risk_input!r}")
        edges = torch.as_tensor(np.asarray(edges, float), dtype=DTYPE)
        if edges.ndim != 1 or edges.numel() < 3 or edges[0] != 0 or bool((edges.diff() <= 0).any()):
            raise ValueError("edges must start at 0, increase strictly and define >= 2 bins")
        self.K, self.M, self.risk_input = n_baseline, n_response, risk_input
        self.register_buffer("edges", edges)
        self.gate_k = _mlp(d_x, gate_hidden, n_baseline)
        self.gate_m = _mlp(d_x, gate_hidden, n_response)
        if risk_input != "none":
            self.hazard_net = _mlp(n_baseline if risk_input == "logits" else d_x, hazard_hidden, n_baseline)
        else:
            self.hazard_net = None
        n_bins = edges.numel() - 1
        self.rho = nn.Parameter(torch.full((n_baseline, n_response, n_bins), _softplus_inv(init_rate), dtype=DTYPE))
        self.omega = nn.Parameter(torch.zeros(n_response, dtype=DTYPE))

    @property
    def n_bins(self) -> int:
        return self.edges.numel() - 1

    @property
    def widths(self) -> torch.Tensor:
        return self.edges.diff()

    def gates(self, x) -> GateDistributions:
        v, u = self.gate_k(x), self.gate_m(x)
        pk, pm = torch.softmax(v, -1), torch.softmax(u, -1)
        return GateDistributions(pk, pm, pk.unsqueeze(-1) * pm.unsqueeze(-2), v, u)

    def risk(self, x, v) -> torch.Tensor:
        if self.hazard_net is None:
            return v.new_zeros(v.shape[0], self.K)
        return self.hazard_net(v if self.risk_input == "logits" else x)

    def bin_hazards(self) -> torch.Tensor:
        return nn.functional.softplus(self.rho)

    def cumulative_hazard_edges(self) -> torch.Tensor:
        """K x M x (B+1) cumulative baseline hazard at every edge, starting at 0."""
        inc = self.bin_hazards() * self.widths
        return torch.cat([inc.new_zeros(self.K, self.M, 1), inc.cumsum(-1)], dim=-1)

    def bin_index(self, t: torch.Tensor) -> torch.Tensor:
        """1-based bin b with t_{b-1} < t <= t_b (t = 0 maps to bin 1)."""
        b = torch.searchsorted(self.edges, t.contiguous(), right=False)
        return b.clamp(1, self.n_bins)

    def clamp_times(self, t: torch.Tensor) -> torch.Tensor:
        t_max = self.edges[-1]
        if bool((t > t_max).any()):
            warnings.warn(f"{int((t > t_max).sum())} times beyond the grid end {float(t_max):.4g}; clamped",
                          stacklevel=3)
        return t.clamp(0.0, float(t_max))

    def cumulative_hazard_at(self, t: torch.Tensor) -> torch.Tensor:
        """Exact piecewise-linear cumulative hazard at per-patient times, N x K x M."""
        t = self.clamp_times(t)
        b = self.bin_index(t)
        H = self.cumulative_hazard_edges()
        lam = self.bin_hazards()
        start = H[:, :, b - 1].permute(2, 0, 1)
        rate = lam[:, :, b - 1].permute(2, 0, 1)
        return start + rate * (t - self.edges[b - 1]).reshape(-1, 1, 1)

    def exponent(self, x, treatment, gates: GateDistributions | None = None) -> torch.Tensor:
        """Log of the kernel exponent, h_k(x) + a * omega_m, as N x K x M."""
        g = gates or self.gates(x)
        h = self.risk(x, g.v)
        return h.unsqueeze(-1) + treatment.reshape(-1, 1, 1) * self.omega.reshape(1, 1, -1)

    def survival_edges(self, x, treatment) -> torch.Tensor:
        """Mixture survival at every grid edge, N x (B+1)."""
        g = self.gates(x)
        scale = torch.exp(self.exponent(x, treatment, g))
        H = self.cumulative_hazard_edges()
        kern = torch.exp(-H.unsqueeze(0) * scale.unsqueeze(-1))
        return torch.einsum("nkm,nkmb->nb", g.joint, kern)

    def survival_at(self, x, treatment, t) -> torch.Tensor:
        g = self.gates(x)
        scale = torch.exp(self.exponent(x, treatment, g))
        kern = torch.exp(-self.cumulative_hazard_at(t) * scale)
        return torch.einsum("nkm,nkm->n", g.joint, kern)

    def cumulative_hazard_grid(self, times: torch.Tensor) -> torch.Tensor:
        """Cumulative baseline hazard at shared times, T x K x M."""
        t = self.clamp_times(times)
        b = self.bin_index(t)
        H = self.cumulative_hazard_edges()[:, :, b - 1].permute(2, 0, 1)
        lam = self.bin_hazards()[:, :, b - 1].permute(2, 0, 1)
        return H + lam * (t - self.edges[b - 1]).reshape(-1, 1, 1)

    def survival_grid(self, x, treatment, times, chunk: int = 256) -> torch.Tensor:
        """Mixture survival of every patient at shared times, N x T."""
        g = self.gates(x)
        scale = torch.exp(self.exponent(x, treatment, g))
        H = self.cumulative_hazard_grid(torch.as_tensor(times, dtype=DTYPE))
        parts = [torch.einsum("nkm,ntkm->nt", g.joint, torch.exp(-H[i:i + chunk].unsqueeze(0) * scale.unsqueeze(1)))
                 for i in range(0, H.shape[0], chunk)]
        return torch.cat(parts, dim=1) if parts else x.new_zeros(x.shape[0], 0)

    def log_likelihood_terms(self, x, time, event, treatment) -> torch.Tensor:
        """Per-patient log-likelihood: log density on the event bin for events,
        log survival at the observed time for censored patients."""
        time = self.clamp_times(time)
        g = self.gates(x)
        scale = torch.exp(self.exponent(x, treatment, g))
        H = self.cumulative_hazard_edges()
        b = self.bin_index(time)
        h_prev = H[:, :, b - 1].permute(2, 0, 1)
        inc = (self.bin_hazards() * self.widths)[:, :, b - 1].permute(2, 0, 1)
        # S(t_{b-1}) - S(t_b) per kernel, via expm1 to avoid cancellation
        drop = torch.exp(-h_prev * scale) * -torch.expm1(-inc * scale)
        density = torch.einsum("nkm,nkm->n", g.joint, drop) / self.widths[b - 1]
        surv = torch.einsum("nkm,nkm->n", g.joint, torch.exp(-self.cumulative_hazard_at(time) * scale))
        log_f = torch.log(density.clamp_min(LOG_FLOOR))
        log_s = torch.log(surv.clamp_min(LOG_FLOOR))
        return event * log_f + (1.0 - event) * log_s

    def nll(self, x, time, event, treatment) -> torch.Tensor:
        return -self.log_likelihood_terms(x, time, event, treatment).mean()


# module-level operations over a fitted head -------------------------------

def gate_distributions(x, head: MixtureSurvivalHead) -> GateDistributions:
    return head.gates(torch.as_tensor(x, dtype=DTYPE).reshape(-1, head.gate_k[0].in_features))


def base_hazard(v, head: MixtureSurvivalHead, x=None) -> torch.Tensor:
    v = torch.as_tensor(v, dtype=DTYPE).reshape(-1, head.K)
    return head.risk(x, v)


def baseline_survival(k: int, m: int, head: MixtureSurvivalHead) -> torch.Tensor:
    """S_k^m on every grid edge (0-based k, m)."""
    return torch.exp(-head.cumulative_hazard_edges()[k, m])


def survival_kernel(t_index, k: int, m: int, x, a: int, head: MixtureSurvivalHead) -> torch.Tensor:
    """S_k^m(t)^exp(h_k(x) + a * omega_m) at grid edge(s) ``t_index`` (0-based k, m).

    An integer index gives one value per patient; a slice or index list gives
    an N x T array.
    """
    if a not in (0, 1):
        raise ValueError("treatment must be 0 or 1")
    x = torch.as_tensor(x, dtype=DTYPE).reshape(-1, head.gate_k[0].in_features)
    expo = head.exponent(x, torch.full((x.shape[0],), float(a), dtype=DTYPE))[:, k, m]
    H = head.cumulative_hazard_edges()[k, m][t_index]
    if H.ndim == 0:
        return torch.exp(-H * torch.exp(expo))
    return torch.exp(-H.unsqueeze(0) * torch.exp(expo).unsqueeze(1))


def predict_survival(x, a, head: MixtureSurvivalHead) -> SurvivalCurve:
    x = torch.as_tensor(x, dtype=DTYPE).reshape(-1, head.gate_k[0].in_features)
    a_t = torch.as_tensor(np.broadcast_to(np.asarray(a, float), (x.shape[0],)).copy(), dtype=DTYPE)
    if bool(((a_t != 0) & (a_t != 1)).any()):
        raise ValueError("treatment must be 0 or 1")
    with torch.no_grad():
        values = head.survival_edges(x, a_t).numpy()
    return SurvivalCurve(head.edges.numpy().copy(), values, a_t.numpy().astype(int))


def cox_partial_nll(eta: torch.Tensor, time: torch.Tensor, event: torch.Tensor) -> torch.Tensor:
    """Breslow negative partial log-likelihood averaged over events."""
    n_events = event.sum()
    if float(n_events) == 0:
        return eta.new_zeros(()) * eta.sum()
    order = torch.argsort(time, stable=True)
    t_sorted, e_sorted = time[order], event[order]
    eta_sorted = eta[order]
    # log-sum-exp over the suffix j >= first index with t_j == t_i (risk set with ties)
    rev = torch.logcumsumexp(eta_sorted.flip(0), dim=0).flip(0)
    first = torch.searchsorted(t_sorted.contiguous(), t_sorted.contiguous(), right=False)
    log_risk = rev[first]
    return -((eta_sorted - log_risk) * e_sorted).sum() / n_events


# ---------------------------------------------------------------------------
# full model

class CoxHead(nn.Module):
    """Linear risk with a treatment interaction: w.x + a * (c + g.x)."""

    def __init__(self, d_x: int):
        super().__init__()
        self.main = nn.Linear(d_x, 1, bias=False, dtype=DTYPE)
        self.treat = nn.Linear(d_x, 1, dtype=DTYPE)

    def forward(self, x, treatment):
        return self.main(x).squeeze(-1) + treatment * self.treat(x).squeeze(-1)


class MixtureSurvivalModel(nn.Module):
    def __init__(self, dims: dict, edges, d_pre: int = 256, n_experts: int = 4, top_k: int = 2,
                 embed_dim: int = 64, n_heads: int = 4, n_baseline: int = 2, n_response: int = 2,
                 dropout: float = 0.1, risk_input: str = "logits", init_rate: float = 0.1,
                 gate_hidden: int = 64, hazard_hidden: int = 32):
        super().__init__()
        self.dims = dict(dims)
        omics = [dims[n] for n in sorted((n for n in dims if n.startswith("omics_")), key=_omics_sort)]
        self.omics = OmicsEncoder(omics, d_pre, n_experts, top_k, dropout)
        self.fusion = FusionEncoder(dims["clinical"], dims["paraclinical"], self.omics.out_dim,
                                    embed_dim, n_heads, dropout=dropout)
        self.d_x = embed_dim + dims.get("demographic", 0)
        self.cox = CoxHead(self.d_x)
        self.head = MixtureSurvivalHead(self.d_x, n_baseline, n_response, edges, gate_hidden,
                                        hazard_hidden, risk_input, init_rate)

    def encoder_parameters(self):
        return list(self.omics.parameters()) + list(self.fusion.parameters())

    def represent(self, batch: Batch):
        """Patient representation X and the summed MoE auxiliary loss."""
        zs, aux = self.omics(batch.omics, batch.omics_present)
        x = self.fusion(batch.clinical, batch.paraclinical, torch.cat(zs, dim=-1), batch.demographic)
        return x, aux


def _omics_sort(name: str):
    tail = name[len("omics_"):]
    return (0, int(tail), "") if tail.isdigit() else (1, 0, tail)


def negative_log_likelihood(batch: Batch, model: MixtureSurvivalModel, lambda_aux: float = 0.01) -> torch.Tensor:
    """End-to-end censored mixture NLL plus the weighted MoE auxiliary loss."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    x, aux = model.represent(batch)
    return model.head.nll(x, batch.time, batch.event, batch.treatment) + lambda_aux * aux


def cox_loss(batch: Batch, model: MixtureSurvivalModel, lambda_aux: float = 0.01) -> torch.Tensor:
    x, aux = model.represent(batch)
    return cox_partial_nll(model.cox(x, batch.treatment), batch.time, batch.event) + lambda_aux * aux


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lambda_aux: float = 0.01
    phase1_lr: float = 5e-4
    phase1_weight_decay: float = 1e-5
    phase1_batch_size: int | None = 128
    phase1_epochs: int = 200
    patience: int = 10
    phase2_lr: float = 0.01
    phase2_epochs: int = 20
    phase2_batch_size: int | None = 100
    phase2_restore_best: bool = True
    seed: int = 0


@dataclass
class TrainHistory:
    phase1_train: list = field(default_factory=list)
    phase1_val: list = field(default_factory=list)
    phase2_train: list = field(default_factory=list)
    phase2_val: list = field(default_factory=list)
    best_epoch: int = 0
    phase2_best_epoch: int = 0

    def rows(self):
        for phase, tr, va in (("1", self.phase1_train, self.phase1_val), ("2", self.phase2_train, self.phase2_val)):
            for i, loss in enumerate(tr):
                yield phase, i + 1, loss, va[i] if i < len(va) else float("nan")


def _batches(n: int, size, gen: np.random.Generator):
    order = gen.permutation(n)
    size = n if not size else int(size)
    return [order[i:i + size] for i in range(0, n, size)]


def _check(loss: torch.Tensor, where: str):
    if not bool(torch.isfinite(loss)):
        raise DivergenceError(f"non-finite loss during {where}")


def train_model(model: MixtureSurvivalModel, train: Batch, val: Batch | None = None,
                config: TrainConfig | None = None) -> TrainHistory:
    """Phase 1 fits the encoder against a Cox partial-likelihood head (AdamW,
    early stopping on validation loss); phase 2 freezes the encoder and fits the
    mixture head by censored likelihood (Adam)."""
    cfg = config or TrainConfig()
    if float(train.event.sum()) == 0:
        raise ValueError("training split has no events")
    hist = TrainHistory()
    root = SeededRng(cfg.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(root.child("dropout").int_seed())
        _phase1(model, train, val, cfg, root.child("phase1").generator, hist)
        _phase2(model, train, val, cfg, root.child("phase2").generator, hist)
    return hist


def _phase1(model, train, val, cfg, gen, hist):
    if cfg.phase1_epochs <= 0:
        return
    params = model.encoder_parameters() + list(model.cox.parameters())
    opt = AdamW(params, lr=cfg.phase1_lr, weight_decay=cfg.phase1_weight_decay)
    best, best_state, stale = math.inf, None, 0
    monitor = val if val is not None and len(val) and float(val.event.sum()) > 0 else train
    for epoch in range(cfg.phase1_epochs):
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(train), cfg.phase1_batch_size, gen):
            b = train.take(idx)
            loss = cox_loss(b, model, cfg.lambda_aux)
            _check(loss, f"phase 1 epoch {epoch + 1}")
            opt.step(grad_of(loss, params))
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        hist.phase1_train.append(total / count)
        model.eval()
        with torch.no_grad():
            vloss = float(cox_loss(monitor, model, cfg.lambda_aux))
        _check(torch.tensor(vloss), f"phase 1 validation epoch {epoch + 1}")
        hist.phase1_val.append(vloss)
        if vloss < best - 1e-12:
            best, stale, hist.best_epoch = vloss, 0, epoch + 1
            best_state = copy.deepcopy({k: v.detach().clone() for k, v in model.state_dict().items()})
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("phase 1 early stop at epoch %d (best %d)", epoch + 1, hist.best_epoch)
                break
    if best_state is not None:
        model.load_state_dict(best_state)


def _phase2(model, train, val, cfg, gen, hist):
    model.eval()
    with torch.no_grad():
        x_train, _ = model.represent(train)
        x_val = model.represent(val)[0] if val is not None and len(val) else None
    head = model.head
    params = list(head.parameters())
    opt = Adam(params, lr=cfg.phase2_lr)
    best, best_state = math.inf, None
    for epoch in range(cfg.phase2_epochs):
        for idx in _batches(len(train), cfg.phase2_batch_size, gen):
            idx_t = torch.as_tensor(idx)
            loss = head.nll(x_train[idx_t], train.time[idx_t], train.event[idx_t], train.treatment[idx_t])
            _check(loss, f"phase 2 epoch {epoch + 1}")
            opt.step(grad_of(loss, params))
        with torch.no_grad():
            hist.phase2_train.append(float(head.nll(x_train, train.time, train.event, train.treatment)))
            if x_val is not None:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    hist.phase2_val.append(float(head.nll(x_val, val.time, val.event, val.treatment)))
        _check(torch.tensor(hist.phase2_train[-1]), f"phase 2 epoch {epoch + 1}")
        if cfg.phase2_restore_best and hist.phase2_val and hist.phase2_val[-1] < best:
            best, hist.phase2_best_epoch = hist.phase2_val[-1], epoch + 1
            best_state = {k: v.detach().clone() for k, v in head.state_dict().items()}
    if best_state is not None:
        head.load_state_dict(best_state)
