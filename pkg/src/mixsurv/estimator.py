"""scikit-learn style estimator around the two-phase mixture survival model."""
from __future__ import annotations

import math
import warnings

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataio import Cohort
from .metrics import ctd_index
from .numerics import SeededRng
from .survival import (Batch, MixtureSurvivalModel, SurvivalCurve, TrainConfig, make_grid,
                       train_model)


def check_cohort(cohort, dims: dict | None = None) -> Cohort:
    """Validate that ``cohort`` is a preprocessed :class:`Cohort`, optionally
    against the block dimensions seen at fit time."""
    if not isinstance(cohort, Cohort):
        raise TypeError(f"expected a Cohort, got {type(cohort).__name__}")
    if len(cohort) == 0:
        raise ValueError("cohort is empty")
    if dims is not None:
        got = cohort.dims
        for name, d in dims.items():
            if name not in got:
                raise ValueError(f"cohort lacks modality {name!r} (expected {d} features)")
            if got[name] != d:
                raise ValueError(f"modality {name!r} has {got[name]} features, model expects {d}")
        extra = sorted(set(got) - set(dims))
        if extra:
            raise ValueError(f"cohort has modalities unknown to the model: {extra}")
    return cohort


class MixtureSurvival(BaseEstimator):
    """Multimodal encoder plus a K x M latent mixture of proportional-hazards
    survival kernels with subgroup-specific treatment effects.

    ``fit`` takes a preprocessed :class:`~mixsurv.dataio.Cohort` (outcomes are read
    from it) and an optional validation cohort used for early stopping.
    """

    def __init__(self, n_baseline=2, n_response=2, n_bins=20, d_pre=256, n_experts=4, top_k=2,
                 embed_dim=64, n_heads=4, dropout=0.1, lambda_aux=0.01, risk_input="logits",
                 phase1_lr=5e-4, phase1_weight_decay=1e-5, phase1_batch_size=128, phase1_epochs=200,
                 patience=10, phase2_lr=0.01, phase2_epochs=20, phase2_batch_size=100, phase2_restore_best=True,
                 random_state=0):
        self.n_baseline = n_baseline
        self.n_response = n_response
        self.n_bins = n_bins
        self.d_pre = d_pre
        self.n_experts = n_experts
        self.top_k = top_k
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.dropout = dropout
        self.lambda_aux = lambda_aux
        self.risk_input = risk_input
        self.phase1_lr = phase1_lr
        self.phase1_weight_decay = phase1_weight_decay
        self.phase1_batch_size = phase1_batch_size
        self.phase1_epochs = phase1_epochs
        self.patience = patience
        self.phase2_lr = phase2_lr
        self.phase2_epochs = phase2_epochs
        self.phase2_batch_size = phase2_batch_size
        self.phase2_restore_best = phase2_restore_best
        self.random_state = random_state

    # -- construction -----------------------------------------------------
    def _build(self, dims: dict, edges, init_rate: float) -> MixtureSurvivalModel:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(SeededRng(int(self.random_state)).child("init").int_seed())
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                return MixtureSurvivalModel(
                    dims, edges, d_pre=self.d_pre, n_experts=self.n_experts, top_k=self.top_k,
                    embed_dim=self.embed_dim, n_heads=self.n_heads, n_baseline=self.n_baseline,
                    n_response=self.n_response, dropout=self.dropout, risk_input=self.risk_input,
                    init_rate=init_rate)

    def _restore(self, dims: dict, edges, init_rate: float, state: dict) -> "MixtureSurvival":
        self.dims_ = dict(dims)
        self.edges_ = np.asarray(edges, float)
        self.init_rate_ = float(init_rate)
        self.model_ = self._build(self.dims_, self.edges_, self.init_rate_)
        self.model_.load_state_dict(state)
        self.model_.eval()
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda_aux=self.lambda_aux, phase1_lr=self.phase1_lr,
            phase1_weight_decay=self.phase1_weight_decay, phase1_batch_size=self.phase1_batch_size,
            phase1_epochs=self.phase1_epochs, patience=self.patience, phase2_lr=self.phase2_lr,
            phase2_epochs=self.phase2_epochs, phase2_batch_size=self.phase2_batch_size,
            phase2_restore_best=self.phase2_restore_best,
            seed=int(self.random_state))

    # -- fitting ----------------------------------------------------------
    def fit(self, X: Cohort, y=None, X_val: Cohort | None = None):
        if y is not None:
            raise ValueError("outcomes are read from the cohort; pass y=None")
        cohort = check_cohort(X)
        if not cohort.event.any():
            raise ValueError("training cohort has no events")
        self.dims_ = cohort.dims
        self.edges_ = make_grid(cohort.time, cohort.event, self.n_bins)
        self.init_rate_ = float(cohort.event.sum() / cohort.time.sum())
        self.model_ = self._build(self.dims_, self.edges_, self.init_rate_)
        val = Batch.from_cohort(check_cohort(X_val, self.dims_)) if X_val is not None else None
        self.history_ = train_model(self.model_, Batch.from_cohort(cohort), val, self.train_config())
        self.model_.eval()
        return self

    # -- inference --------------------------------------------------------
    def _batch(self, cohort, treatment=None) -> Batch:
        check_is_fitted(self, "model_")
        batch = Batch.from_cohort(check_cohort(cohort, self.dims_))
        if treatment is not None:
            if treatment not in (0, 1):
                raise ValueError("treatment override must be 0 or 1")
            batch = batch.with_treatment(treatment)
        return batch

    def transform(self, X: Cohort) -> np.ndarray:
        """Patient representation (fused embedding followed by demographics)."""
        batch = self._batch(X)
        with torch.no_grad():
            return self.model_.represent(batch)[0].numpy()

    def gate_logits(self, X: Cohort):
        """Baseline-gate logits v (n x K) and response-gate logits u (n x M)."""
        batch = self._batch(X)
        with torch.no_grad():
            g = self.model_.head.gates(self.model_.represent(batch)[0])
        return g.v.numpy(), g.u.numpy()

    def gate_distributions(self, X: Cohort):
        batch = self._batch(X)
        with torch.no_grad():
            g = self.model_.head.gates(self.model_.represent(batch)[0])
        return g.baseline.numpy(), g.response.numpy()

    def predict_survival_function(self, X: Cohort, times=None, treatment=None) -> np.ndarray:
        """Survival probabilities, shape (n_patients, n_times). ``times`` defaults
        to the model grid; ``treatment`` forces every patient onto one arm."""
        batch = self._batch(X, treatment)
        head = self.model_.head
        with torch.no_grad():
            x, _ = self.model_.represent(batch)
            if times is None:
                s = head.survival_edges(x, batch.treatment).numpy()
            else:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    s = head.survival_grid(x, batch.treatment, np.asarray(times, float).ravel()).numpy()
        # mixture weights sum to 1 only up to rounding
        return np.clip(s, 0.0, 1.0)

    def predict_curve(self, X: Cohort, treatment=None) -> SurvivalCurve:
        batch = self._batch(X, treatment)
        return SurvivalCurve(self.edges_.copy(), self.predict_survival_function(X, treatment=treatment),
                             batch.treatment.numpy().astype(int))

    def predict(self, X: Cohort) -> np.ndarray:
        """Restricted mean survival time up to the grid end under the factual arm."""
        curves = self.predict_survival_function(X)
        return np.trapezoid(curves, self.edges_, axis=1)

    def negative_log_likelihood(self, X: Cohort) -> float:
        batch = self._batch(X)
        with torch.no_grad(), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            x, _ = self.model_.represent(batch)
            return float(self.model_.head.nll(x, batch.time, batch.event, batch.treatment))

    def evaluation_curves(self, X: Cohort):
        """Curves on the sorted unique observed times of ``X``, so step lookups at
        each patient's time are exact."""
        grid = np.unique(np.asarray(X.time, float))
        return self.predict_survival_function(X, times=grid), grid

    def score(self, X: Cohort, y=None) -> float:
        curves, grid = self.evaluation_curves(X)
        return ctd_index(curves, grid, X.time, X.event)


def search_groups(train: Cohort, val: Cohort, k_values=range(1, 6), m_values=(2, 3), **params):
    """Fit one model per (K, M) and keep the one with the lowest validation NLL."""
    best, best_nll, table = None, math.inf, []
    for k in k_values:
        for m in m_values:
            est = MixtureSurvival(n_baseline=k, n_response=m, **params).fit(train, X_val=val)
            nll = est.negative_log_likelihood(val)
            table.append((k, m, nll))
            if nll < best_nll:
                best, best_nll = est, nll
    return best, table
