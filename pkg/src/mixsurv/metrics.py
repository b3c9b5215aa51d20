"""Kaplan-Meier, time-dependent concordance and IPCW Brier / integrated Brier scores.

Predicted curves are passed as an ``(n_patients, n_grid)`` array of survival
probabilities on a shared, increasing time grid and are read as right-continuous
step functions (value at the last grid point <= t, and 1 before the first).
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class KaplanMeierCurve:
    times: np.ndarray      # distinct event times
    survival: np.ndarray   # S just after each time
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        idx = np.searchsorted(self.times, t, side="right")
        return np.concatenate([[1.0], self.survival])[idx]

    def left_limit(self, t) -> np.ndarray:
        """S(t-), the value just before t."""
        t = np.asarray(t, float)
        idx = np.searchsorted(self.times, t, side="left")
        return np.concatenate([[1.0], self.survival])[idx]


def kaplan_meier(times, events) -> KaplanMeierCurve:
    """Product-limit estimator. Subjects censored at an event time count as at risk there."""
    times = np.asarray(times, float)
    events = np.asarray(events).astype(bool)
    if times.size == 0:
        raise ValueError("kaplan_meier needs at least one observation")
    if np.any(times < 0):
        raise ValueError("times must be nonnegative")
    ev_times = np.unique(times[events])
    sorted_t = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_t, ev_times, side="left")
    d = np.array([np.count_nonzero(events & (times == t)) for t in ev_times], dtype=np.int64)
    surv = np.cumprod(1.0 - d / at_risk) if ev_times.size else np.zeros(0)
    return KaplanMeierCurve(ev_times, surv, at_risk.astype(np.int64), d)


def step_eval(curves, grid, t) -> np.ndarray:
    """Evaluate step curves at times ``t`` (scalar or one time per patient)."""
    curves = np.atleast_2d(np.asarray(curves, float))
    grid = np.asarray(grid, float)
    t = np.asarray(t, float)
    padded = np.concatenate([np.ones((curves.shape[0], 1)), curves], axis=1)
    idx = np.searchsorted(grid, t, side="right")
    if t.ndim == 0:
        return padded[:, idx]
    if t.shape[0] == curves.shape[0]:
        return padded[np.arange(curves.shape[0]), idx]
    raise ValueError("t must be a scalar or hold one time per patient")


def _concordance_counts(curves, grid, times, events):
    times = np.asarray(times, float)
    events = np.asarray(events).astype(bool)
    curves = np.atleast_2d(np.asarray(curves, float))
    twice_conc = 0
    pairs = 0
    for i in np.flatnonzero(events):
        later = times > times[i]
        if not later.any():
            continue
        s_at = step_eval(curves, grid, times[i])
        si, sj = s_at[i], s_at[later]
        twice_conc += 2 * int(np.count_nonzero(si < sj)) + int(np.count_nonzero(si == sj))
        pairs += int(later.sum())
    return twice_conc, pairs


def ctd_index(curves, grid, times, events) -> float:
    """Antolini's time-dependent concordance over comparable pairs
    (Y_i < Y_j, i had the event); prediction ties earn half credit."""
    twice_conc, pairs = _concordance_counts(curves, grid, times, events)
    if pairs == 0:
        raise ValueError("no comparable pairs")
    return twice_conc / (2 * pairs)


def brier_terms(t: float, s_t, times, events, censor_km: KaplanMeierCurve):
    """Per-patient IPCW Brier contributions at ``t`` and the number of terms
    dropped because the censoring survival was zero."""
    s_t = np.asarray(s_t, float)
    times = np.asarray(times, float)
    events = np.asarray(events).astype(bool)
    out = np.zeros(times.size)
    dropped = 0
    died = (times <= t) & events
    alive = times > t
    g_prev = censor_km.left_limit(times)
    ok = died & (g_prev > 0)
    out[ok] = s_t[ok] ** 2 / g_prev[ok]
    dropped += int(np.count_nonzero(died & (g_prev <= 0)))
    g_t = float(censor_km(t))
    if g_t > 0:
        out[alive] = (1.0 - s_t[alive]) ** 2 / g_t
    else:
        dropped += int(np.count_nonzero(alive))
    return out, dropped


def brier_at(t: float, s_t, times, events, censor_km: KaplanMeierCurve | None = None) -> float:
    if censor_km is None:
        censor_km = kaplan_meier(times, 1 - np.asarray(events).astype(int))
    terms, dropped = brier_terms(t, s_t, times, events, censor_km)
    if dropped:
        warnings.warn(f"{dropped} Brier terms dropped at t={t:g}: censoring survival is zero", stacklevel=2)
    return float(terms.sum() / terms.size)


def default_eval_grid(times, n_points: int = 100) -> np.ndarray:
    lo, hi = np.percentile(np.asarray(times, float), [5, 95])
    return np.linspace(lo, hi, n_points)


def brier_curve(curves, grid, times, events, eval_grid):
    censor_km = kaplan_meier(times, 1 - np.asarray(events).astype(int))
    scores, dropped = [], 0
    for t in eval_grid:
        terms, d = brier_terms(float(t), step_eval(curves, grid, t), times, events, censor_km)
        scores.append(terms.sum() / terms.size)
        dropped += d
    return np.asarray(scores), dropped


def integrated_brier(curves, grid, times, events, eval_grid=None) -> float:
    """Trapezoidal integral of the Brier score over ``eval_grid`` divided by its span."""
    eval_grid = default_eval_grid(times) if eval_grid is None else np.asarray(eval_grid, float)
    if eval_grid.size < 2 or eval_grid[-1] <= eval_grid[0]:
        raise ValueError("integration grid needs at least two distinct points")
    scores, dropped = brier_curve(curves, grid, times, events, eval_grid)
    if dropped:
        warnings.warn(f"{dropped} Brier terms dropped (zero censoring survival)", stacklevel=2)
    return float(np.trapezoid(scores, eval_grid) / (eval_grid[-1] - eval_grid[0]))


@dataclass
class EvaluationReport:
    ctd: float
    ibs: float
    n_comparable: int
    eval_grid: list
    brier: list
    n_dropped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(curves, grid, times, events, eval_grid=None) -> EvaluationReport:
    eval_grid = default_eval_grid(times) if eval_grid is None else np.asarray(eval_grid, float)
    twice_conc, pairs = _concordance_counts(curves, grid, times, events)
    if pairs == 0:
        raise ValueError("no comparable pairs")
    scores, dropped = brier_curve(curves, grid, times, events, eval_grid)
    ibs = float(np.trapezoid(scores, eval_grid) / (eval_grid[-1] - eval_grid[0]))
    return EvaluationReport(twice_conc / (2 * pairs), ibs, pairs, eval_grid.tolist(), scores.tolist(), dropped)
