"""Subgroup assignment, per-subgroup treatment effects, Hopkins statistic and PCA export."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .dataio import Cohort
from .numerics import SeededRng

HOPKINS_CONVENTION = "H near 1: clustered; H near 0.5: uniformly random; H near 0: regularly spaced"


def hard_assign(logits) -> np.ndarray:
    """1-based argmax per row; ties resolve to the lower index."""
    logits = np.atleast_2d(np.asarray(logits, float))
    return np.argmax(logits, axis=1) + 1


def assign_subgroups(cohort: Cohort, model):
    """Hard (k_hat, m_hat) assignments, 1-based, from the two gate logit vectors."""
    v, u = model.gate_logits(cohort)
    return hard_assign(v), hard_assign(u)


def default_horizon(cohort: Cohort) -> float:
    return float(np.percentile(cohort.time, 95))


def integration_times(edges, horizon: float, n_points: int = 4001) -> np.ndarray:
    edges = np.asarray(edges, float)
    if not 0 < horizon <= edges[-1]:
        raise ValueError(f"horizon {horizon} must lie in (0, {edges[-1]}]")
    return np.unique(np.concatenate([np.linspace(0.0, horizon, n_points), edges[edges <= horizon]]))


def rmst_difference(model, cohort: Cohort, horizon: float, n_points: int = 4001) -> np.ndarray:
    """Per-patient trapezoidal integral over [0, horizon] of S(t|x,1) - S(t|x,0)."""
    t = integration_times(model.edges_, horizon, n_points)
    s1 = model.predict_survival_function(cohort, times=t, treatment=1)
    s0 = model.predict_survival_function(cohort, times=t, treatment=0)
    return np.trapezoid(s1 - s0, t, axis=1)


def subgroup_effect(cohort: Cohort, model, m: int, horizon: float | None = None,
                    assignments=None) -> float:
    """Mean restricted-mean-survival difference (treated minus control) over
    patients whose response gate picks subgroup ``m`` (1-based)."""
    horizon = default_horizon(cohort) if horizon is None else float(horizon)
    m_hat = assign_subgroups(cohort, model)[1] if assignments is None else np.asarray(assignments)
    members = m_hat == m
    if not members.any():
        raise ValueError(f"subgroup {m} is empty")
    return float(rmst_difference(model, cohort.subset(members), horizon).mean())


TIER_NAMES = {1: ["all"], 2: ["low", "high"], 3: ["low", "moderate", "high"]}


def _tiers(magnitudes: np.ndarray, suffix: str) -> tuple[list, bool]:
    n = magnitudes.size
    scale = max(float(np.max(np.abs(magnitudes))), 1e-300)
    if n > 1 and np.ptp(magnitudes) <= 1e-9 * scale:
        return [f"tied {suffix}"] * n, True
    names = TIER_NAMES.get(n) or ["low"] + [f"moderate-{i}" for i in range(1, n - 1)] + ["high"]
    ranks = np.argsort(np.argsort(magnitudes, kind="stable"), kind="stable")
    return [f"{names[r]} {suffix}" for r in ranks], False


@dataclass
class SubgroupProfile:
    index: int
    ids: list
    count: int
    effect: float              # Omega, in time units
    risk_diff_mean: float      # mean of (risk under control) - (risk under treatment)
    risk_diff_sd: float
    tier: str


@dataclass
class EffectReport:
    horizon: float
    response: list = field(default_factory=list)
    baseline: list = field(default_factory=list)
    tiers_indistinguishable: bool = False
    k_hat: np.ndarray | None = None
    m_hat: np.ndarray | None = None
    risk_diff: np.ndarray | None = None

    def to_dict(self) -> dict:
        def prof(p: SubgroupProfile, kind):
            return {"subgroup": p.index, "count": p.count, kind: p.effect,
                    "mean": p.risk_diff_mean, "sd": p.risk_diff_sd, "tier": p.tier}
        return {"horizon": self.horizon,
                "response_subgroups": [prof(p, "omega") for p in self.response],
                "baseline_strata": [prof(p, "mean_risk") for p in self.baseline],
                "tiers_indistinguishable": self.tiers_indistinguishable}


def profile_subgroups(cohort: Cohort, model, horizon: float | None = None) -> EffectReport:
    """Response profiles per m (Omega and risk difference at the horizon) and
    baseline-risk strata per k (control-arm risk 1 - S(horizon))."""
    horizon = default_horizon(cohort) if horizon is None else float(horizon)
    k_hat, m_hat = assign_subgroups(cohort, model)
    rmst = rmst_difference(model, cohort, horizon)
    s = {a: model.predict_survival_function(cohort, times=[horizon], treatment=a)[:, 0] for a in (0, 1)}
    risk_diff = s[1] - s[0]        # (1 - S0) - (1 - S1)
    risk0 = 1.0 - s[0]
    ids = np.asarray(cohort.ids)

    response = []
    for m in range(1, model.n_response + 1):
        sel = m_hat == m
        if sel.any():
            response.append(SubgroupProfile(m, ids[sel].tolist(), int(sel.sum()), float(rmst[sel].mean()),
                                            float(risk_diff[sel].mean()), float(risk_diff[sel].std()), ""))
    tiers, tied = _tiers(np.abs([p.effect for p in response]), "responders")
    for p, t in zip(response, tiers):
        p.tier = t

    baseline = []
    for k in range(1, model.n_baseline + 1):
        sel = k_hat == k
        if sel.any():
            baseline.append(SubgroupProfile(k, ids[sel].tolist(), int(sel.sum()), float(risk0[sel].mean()),
                                            float(risk0[sel].mean()), float(risk0[sel].std()), ""))
    btiers, _ = _tiers(np.asarray([p.effect for p in baseline]), "risk")
    for p, t in zip(baseline, btiers):
        p.tier = t
    return EffectReport(horizon, response, baseline, tied, k_hat, m_hat, risk_diff)


def hopkins(points, sample_fraction: float = 0.1, seed: int = 0) -> float:
    """Hopkins statistic sum(u) / (sum(u) + sum(w)), Euclidean distances.

    u: nearest-data distances of uniform pseudo-points in the bounding box;
    w: nearest-other-point distances of sampled data points.
    """
    X = np.asarray(points, float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n < 10 or d < 1:
        raise ValueError("hopkins needs at least 10 points")
    lo, hi = X.min(axis=0), X.max(axis=0)
    if np.all(hi - lo == 0):
        raise ValueError("all points are identical")
    m = max(1, int(round(sample_fraction * n)))
    gen = SeededRng(seed).child("hopkins").generator
    tree = cKDTree(X)
    sample = gen.choice(n, size=m, replace=False)
    w = tree.query(X[sample], k=2)[0][:, 1]
    u = tree.query(gen.uniform(lo, hi, size=(m, d)), k=1)[0]
    return float(u.sum() / (u.sum() + w.sum()))


def _top_eigenpair(C: np.ndarray, tol: float, max_iter: int):
    d = C.shape[0]
    v = np.ones(d) / np.sqrt(d) + np.arange(d) * 1e-3
    v /= np.linalg.norm(v)
    lam = float(v @ C @ v)
    for _ in range(max_iter):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        lam = float(w @ C @ w)
        # the eigenvalue settles long before the vector, so stop on the vector
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return lam, v


def pca_project(points, tol: float = 1e-10, max_iter: int = 10000):
    """Top-two principal components by power iteration with deflation.

    Returns ``(coords (n x 2), explained_variance_fraction (2,))``. Each axis is
    oriented so its largest-magnitude loading is positive.
    """
    X = np.asarray(points, float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n < 2:
        raise ValueError("pca_project needs at least two points")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / n
    total = float(np.trace(C))
    if total <= 0:
        raise ValueError("data have zero variance")
    comps, lams = [], []
    R = C.copy()
    for _ in range(2):
        if len(comps) == d:
            comps.append(np.zeros(d))
            lams.append(0.0)
            continue
        lam, v = _top_eigenpair(R, tol, max_iter)
        if lam <= tol * total:
            # remaining spectrum is null: pick any unit vector orthogonal to the found ones
            basis = np.eye(d)
            for c in comps:
                basis -= np.outer(basis @ c, c)
            v = basis[np.argmax(np.linalg.norm(basis, axis=1))]
            v /= np.linalg.norm(v)
            lam = 0.0
        v = v * (1.0 if v[np.argmax(np.abs(v))] >= 0 else -1.0)
        comps.append(v)
        lams.append(max(lam, 0.0))
        R = R - lam * np.outer(v, v)
    W = np.column_stack(comps)
    return Xc @ W, np.asarray(lams) / total


@dataclass
class LatentExport:
    space: str
    coords: np.ndarray
    projection: np.ndarray
    explained: np.ndarray
    hopkins: float


def latent_exports(cohort: Cohort, model, sample_fraction: float = 0.1, seed: int = 0) -> list[LatentExport]:
    """PCA projections and Hopkins statistics for the representation X and the
    two gate-logit spaces."""
    v, u = model.gate_logits(cohort)
    spaces = {"X": model.transform(cohort), "Z-logits": v, "Phi-logits": u}
    out = []
    for name, pts in spaces.items():
        proj, expl = pca_project(pts)
        out.append(LatentExport(name, pts, proj, expl, hopkins(pts, sample_fraction, seed)))
    return out
