"""Cohort data model, CSV I/O, preprocessing, splitting and the synthetic simulator."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, brentq, milp

from .numerics import SeededRng

log = logging.getLogger(__name__)

BASE_MODALITIES = ("clinical", "paraclinical", "demographic")
MANDATORY = ("id", "time", "event", "treatment")


class DataError(ValueError):
    """Malformed cohort input (bad values, duplicate ids, schema mismatch)."""


def is_omics(name: str) -> bool:
    return name.startswith("omics_")


@dataclass(frozen=True)
class PatientRecord:
    id: str
    observed_time: float
    event: bool
    treatment: int
    features: dict
    present: dict


@dataclass
class Cohort:
    """Column-oriented cohort. Missing cells are NaN; ``present[block]`` flags
    patients for whom the whole block was available."""

    ids: np.ndarray
    time: np.ndarray
    event: np.ndarray
    treatment: np.ndarray
    blocks: dict
    schemas: dict
    present: dict = field(default_factory=dict)
    time_unit: str = "months"

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=object)
        self.time = np.asarray(self.time, dtype=np.float64)
        self.event = np.asarray(self.event).astype(bool)
        self.treatment = np.asarray(self.treatment).astype(np.int64)
        n = len(self.ids)
        if len(set(self.ids.tolist())) != n:
            raise DataError("patient ids are not unique")
        if self.time.shape != (n,) or self.event.shape != (n,) or self.treatment.shape != (n,):
            raise DataError("outcome columns must have one entry per patient")
        if np.any(~np.isfinite(self.time)) or np.any(self.time < 0):
            raise DataError("observed times must be finite and nonnegative")
        if np.any((self.treatment != 0) & (self.treatment != 1)):
            raise DataError("treatment must be 0 or 1")
        for name, values in list(self.blocks.items()):
            values = np.asarray(values, dtype=np.float64).reshape(n, -1)
            self.blocks[name] = values
            if values.shape[1] != len(self.schemas[name]):
                raise DataError(f"block {name!r} has {values.shape[1]} columns, schema lists {len(self.schemas[name])}")
            if name not in self.present:
                self.present[name] = ~np.all(np.isnan(values), axis=1) if values.shape[1] else np.ones(n, bool)
            self.present[name] = np.asarray(self.present[name], dtype=bool)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def omics_names(self) -> list[str]:
        return sorted((b for b in self.blocks if is_omics(b)), key=_omics_key)

    @property
    def dims(self) -> dict:
        return {name: v.shape[1] for name, v in self.blocks.items()}

    def record(self, i: int) -> PatientRecord:
        return PatientRecord(
            id=str(self.ids[i]), observed_time=float(self.time[i]), event=bool(self.event[i]),
            treatment=int(self.treatment[i]),
            features={b: v[i].copy() for b, v in self.blocks.items()},
            present={b: bool(p[i]) for b, p in self.present.items()},
        )

    def subset(self, mask) -> "Cohort":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return Cohort(self.ids[idx], self.time[idx], self.event[idx], self.treatment[idx],
                      {b: v[idx] for b, v in self.blocks.items()}, dict(self.schemas),
                      {b: p[idx] for b, p in self.present.items()}, self.time_unit)

    def with_treatment(self, a: int) -> "Cohort":
        c = self.subset(np.arange(len(self)))
        c.treatment = np.full(len(self), int(a), dtype=np.int64)
        return c


def _omics_key(name: str):
    tail = name[len("omics_"):]
    return (0, int(tail), "") if tail.isdigit() else (1, 0, tail)


# ---------------------------------------------------------------------------
# CSV I/O

def _parse_float(cell: str, path, row: int, col: str) -> float:
    if cell.strip() == "":
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"{path}: row {row}, column {col!r}: cannot parse {cell!r} as a number") from None


def _parse_flag(cell: str, path, row: int, col: str) -> int:
    v = _parse_float(cell, path, row, col)
    if v not in (0.0, 1.0):
        raise DataError(f"{path}: row {row}, column {col!r}: value {cell!r} must be 0 or 1")
    return int(v)


def _read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        rows = [r for r in reader if r]
    if not header or header[0] != "id":
        raise DataError(f"{path}: first column must be 'id'")
    return header, rows


def _resolve_paths(paths) -> dict:
    if isinstance(paths, (str, os.PathLike)):
        root = Path(paths)
        found = {p.stem: p for p in sorted(root.glob("*.csv"))
                 if p.stem in BASE_MODALITIES or is_omics(p.stem)}
        if "clinical" not in found:
            raise DataError(f"{root}: no clinical.csv found")
        return found
    return {k: Path(v) for k, v in paths.items()}


def load_cohort(paths, time_unit: str = "months") -> Cohort:
    """Load a cohort from a directory (or ``{modality: path}`` mapping) of CSV files.

    ``clinical.csv`` carries ``id,time,event,treatment`` plus clinical features;
    every other file is ``id,<features>`` and is left-joined on id.
    """
    paths = _resolve_paths(paths)
    cpath = paths["clinical"]
    header, rows = _read_table(cpath)
    for col in MANDATORY:
        if col not in header:
            raise DataError(f"{cpath}: mandatory column {col!r} missing")
    pos = {c: header.index(c) for c in MANDATORY}
    feat_cols = [i for i, c in enumerate(header) if c not in MANDATORY]
    ids, time, event, treat, clin = [], [], [], [], []
    seen = set()
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{cpath}: row {r} has {len(row)} cells, header has {len(header)}")
        pid = row[pos["id"]]
        if pid in seen:
            raise DataError(f"{cpath}: duplicate id {pid!r} at row {r}")
        seen.add(pid)
        t = _parse_float(row[pos["time"]], cpath, r, "time")
        if math.isnan(t) or t < 0:
            raise DataError(f"{cpath}: row {r}, column 'time': time must be a nonnegative number")
        ids.append(pid)
        time.append(t)
        event.append(_parse_flag(row[pos["event"]], cpath, r, "event"))
        treat.append(_parse_flag(row[pos["treatment"]], cpath, r, "treatment"))
        clin.append([_parse_float(row[i], cpath, r, header[i]) for i in feat_cols])
    n = len(ids)
    blocks = {"clinical": np.asarray(clin, dtype=np.float64).reshape(n, len(feat_cols))}
    schemas = {"clinical": [header[i] for i in feat_cols]}
    index = {pid: i for i, pid in enumerate(ids)}
    for name in sorted(paths, key=lambda b: (is_omics(b), _omics_key(b) if is_omics(b) else b)):
        if name == "clinical":
            continue
        mheader, mrows = _read_table(paths[name])
        values = np.full((n, len(mheader) - 1), np.nan)
        mseen = set()
        for r, row in enumerate(mrows, start=2):
            if len(row) != len(mheader):
                raise DataError(f"{paths[name]}: row {r} has {len(row)} cells, header has {len(mheader)}")
            pid = row[0]
            if pid in mseen:
                raise DataError(f"{paths[name]}: duplicate id {pid!r} at row {r}")
            mseen.add(pid)
            if pid not in index:
                log.warning("%s: id %r not in clinical file; row ignored", paths[name], pid)
                continue
            values[index[pid]] = [_parse_float(c, paths[name], r, mheader[j + 1]) for j, c in enumerate(row[1:])]
        blocks[name] = values
        schemas[name] = mheader[1:]
    return Cohort(np.asarray(ids, dtype=object), time, event, treat, blocks, schemas, time_unit=time_unit)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_cohort(cohort: Cohort, directory) -> list[Path]:
    """Write the per-modality CSV layout read by :func:`load_cohort`."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, values in cohort.blocks.items():
        path = out / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if name == "clinical":
                w.writerow(list(MANDATORY) + list(cohort.schemas[name]))
            else:
                w.writerow(["id"] + list(cohort.schemas[name]))
            for i in range(len(cohort)):
                cells = [_fmt(v) for v in values[i]]
                if name == "clinical":
                    head = [cohort.ids[i], _fmt(cohort.time[i]), str(int(cohort.event[i])), str(int(cohort.treatment[i]))]
                else:
                    head = [cohort.ids[i]]
                w.writerow(head + cells)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Preprocessing

TRANSFORMS = ("zscore", "log1p_zscore", "onehot", "passthrough")


@dataclass
class PreprocessSpec:
    """Per-feature transforms. ``transforms`` keys are ``"block:feature"`` or
    ``"block"``; anything unlisted uses ``default``."""

    transforms: dict = field(default_factory=dict)
    default: str = "zscore"
    variance_threshold: float = 1e-8
    rare_min_count: int = 5

    def __post_init__(self):
        for t in list(self.transforms.values()) + [self.default]:
            if t not in TRANSFORMS:
                raise ValueError(f"unknown transform {t!r}; expected one of {TRANSFORMS}")

    def transform_for(self, block: str, feature: str) -> str:
        return self.transforms.get(f"{block}:{feature}", self.transforms.get(block, self.default))


@dataclass
class _ColumnPlan:
    source: str
    kind: str
    mean: float = 0.0
    scale: float = 1.0
    levels: tuple = ()
    indicator: bool = False


class CohortPreprocessor:
    """Fit per-column statistics on a training mask, then transform any cohort."""

    def __init__(self, spec: PreprocessSpec | None = None):
        self.spec = spec or PreprocessSpec()

    def fit(self, cohort: Cohort, train_mask=None):
        mask = np.ones(len(cohort), bool) if train_mask is None else np.asarray(train_mask, bool)
        if not mask.any():
            raise DataError("training mask is empty")
        self.plans_ = {}
        self.dropped_ = []
        for name, values in cohort.blocks.items():
            rows = mask & cohort.present[name] if is_omics(name) else mask
            plans = []
            for j, feat in enumerate(cohort.schemas[name]):
                kind = self.spec.transform_for(name, feat)
                col = values[rows, j]
                obs = col[~np.isnan(col)]
                if obs.size == 0:
                    raise DataError(f"column {name}:{feat} has no observed training values")
                indicator = bool(np.isnan(col).any())
                if kind == "onehot":
                    lv, counts = np.unique(obs, return_counts=True)
                    keep = tuple(float(v) for v, c in zip(lv, counts) if c >= self.spec.rare_min_count)
                    plans.append(_ColumnPlan(feat, kind, levels=keep, indicator=indicator))
                    continue
                if kind == "log1p_zscore":
                    if np.any(obs <= -1):
                        raise DataError(f"column {name}:{feat} has values <= -1; log1p undefined")
                    obs = np.log1p(obs)
                mean, var = float(obs.mean()), float(obs.var())
                if var < self.spec.variance_threshold:
                    warnings.warn(f"dropping low-variance column {name}:{feat} (var={var:.3g})", stacklevel=2)
                    self.dropped_.append(f"{name}:{feat}")
                    continue
                # passthrough keeps the mean only for imputation
                scale = 1.0 if kind == "passthrough" else math.sqrt(var)
                plans.append(_ColumnPlan(feat, kind, mean=mean, scale=scale, indicator=indicator))
            self.plans_[name] = plans
        return self

    def _transform_block(self, name, values, schema):
        pos = {f: j for j, f in enumerate(schema)}
        cols, names = [], []
        for p in self.plans_[name]:
            if p.source not in pos:
                raise DataError(f"block {name!r} lacks fitted column {p.source!r}")
            x = values[:, pos[p.source]]
            miss = np.isnan(x)
            if p.kind == "onehot":
                for lv in p.levels:
                    cols.append(np.where(miss, 0.0, (x == lv).astype(float)))
                    names.append(f"{p.source}={lv:g}")
                other = ~miss & ~np.isin(x, p.levels)
                cols.append(other.astype(float))
                names.append(f"{p.source}=other")
            else:
                y = np.log1p(x) if p.kind == "log1p_zscore" else x
                y = np.where(miss, p.mean, y)
                if p.kind != "passthrough":
                    y = (y - p.mean) / p.scale
                cols.append(y)
                names.append(p.source)
            if p.indicator:
                cols.append(miss.astype(float))
                names.append(f"{p.source}__missing")
        n = values.shape[0]
        out = np.column_stack(cols) if cols else np.zeros((n, 0))
        return out, names

    def transform(self, cohort: Cohort) -> Cohort:
        if not hasattr(self, "plans_"):
            raise RuntimeError("preprocessor is not fitted")
        blocks, schemas = {}, {}
        for name in self.plans_:
            if name not in cohort.blocks:
                raise DataError(f"cohort lacks block {name!r}")
            out, names = self._transform_block(name, cohort.blocks[name], cohort.schemas[name])
            if is_omics(name):
                out[~cohort.present[name]] = 0.0
            blocks[name], schemas[name] = out, names
        return Cohort(cohort.ids, cohort.time, cohort.event, cohort.treatment, blocks, schemas,
                      {b: cohort.present[b].copy() for b in blocks}, cohort.time_unit)

    def fit_transform(self, cohort: Cohort, train_mask=None) -> Cohort:
        return self.fit(cohort, train_mask).transform(cohort)

    def to_dict(self) -> dict:
        return {name: [vars(p) | {"levels": list(p.levels)} for p in plans] for name, plans in self.plans_.items()}

    @classmethod
    def from_dict(cls, data: dict, spec: PreprocessSpec | None = None) -> "CohortPreprocessor":
        obj = cls(spec)
        obj.plans_ = {name: [_ColumnPlan(**(p | {"levels": tuple(p["levels"])})) for p in plans]
                      for name, plans in data.items()}
        obj.dropped_ = []
        return obj


def fit_apply_preprocess(cohort: Cohort, spec: PreprocessSpec, train_mask):
    """Fit on ``train_mask`` rows and transform the whole cohort."""
    pre = CohortPreprocessor(spec).fit(cohort, train_mask)
    return pre.transform(cohort), pre


# ---------------------------------------------------------------------------
# Splitting

def _largest_remainder(total: int, fr: np.ndarray) -> np.ndarray:
    want = fr * total
    counts = np.floor(want).astype(int)
    order = np.argsort(-(want - counts), kind="stable")
    counts[order[:total - counts.sum()]] += 1
    return counts


def _allocation(sizes: np.ndarray, fr: np.ndarray) -> np.ndarray:
    """Integer (split x stratum) counts with exact split sizes and stratum totals,
    keeping each split's event and treated counts as close as possible to
    their proportional targets (strata are indexed event * 2 + treatment)."""
    J, S = fr.size, sizes.size
    n = int(sizes.sum())
    split_n = _largest_remainder(n, fr)
    n_cells = J * S
    # variables: cells, then |event dev|, |treated dev| per split, then |cell dev|
    n_var = n_cells + 2 * J + n_cells
    # deviations are priced as rates, so small splits are matched first
    cost = np.concatenate([np.zeros(n_cells), np.repeat(1.0 / np.maximum(split_n, 1), 2), np.full(n_cells, 1e-6)])
    rows, lo, hi = [], [], []

    def add(coef, lb, ub):
        rows.append(coef)
        lo.append(lb)
        hi.append(ub)

    for j in range(J):
        coef = np.zeros(n_var)
        coef[j * S:(j + 1) * S] = 1
        add(coef, split_n[j], split_n[j])
    for s in range(S):
        coef = np.zeros(n_var)
        coef[s:n_cells:S] = 1
        add(coef, sizes[s], sizes[s])
    for j in range(J):
        for d, members in enumerate(((2, 3), (1, 3))):
            target = split_n[j] * sizes[list(members)].sum() / n
            coef = np.zeros(n_var)
            coef[[j * S + s for s in members]] = 1
            for sign in (1, -1):
                c = sign * coef
                c[n_cells + 2 * j + d] = -1
                add(c, -np.inf, sign * target)
        for s in range(S):
            for sign in (1, -1):
                c = np.zeros(n_var)
                c[j * S + s] = sign
                c[n_cells + 2 * J + j * S + s] = -1
                add(c, -np.inf, sign * split_n[j] * sizes[s] / n)
    integrality = np.concatenate([np.ones(n_cells), np.zeros(n_var - n_cells)])
    res = milp(cost, constraints=LinearConstraint(np.array(rows), lo, hi), integrality=integrality,
               bounds=Bounds(0, np.inf))
    if not res.success:
        raise RuntimeError(f"split allocation failed: {res.message}")
    return np.rint(res.x[:n_cells]).astype(int).reshape(J, S)


def split_cohort(cohort: Cohort, fractions: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0) -> list[np.ndarray]:
    """Disjoint masks stratified on (event, treatment).

    Split sizes follow largest-remainder rounding; within that, per-split event
    and treated counts are matched to their proportional targets.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or fr.size == 0 or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    n = len(cohort)
    rng = SeededRng(seed).child("split").generator
    strata = cohort.event.astype(int) * 2 + cohort.treatment
    sizes = np.bincount(strata, minlength=4)
    counts = _allocation(sizes, fr)
    assign = np.empty(n, dtype=np.int64)
    for s in range(4):
        idx = rng.permutation(np.flatnonzero(strata == s))
        assign[idx] = np.repeat(np.arange(fr.size), counts[:, s])
    masks = [assign == j for j in range(fr.size)]
    for j, m in enumerate(masks):
        if not cohort.event[m].any():
            raise DataError(f"split {j} has no events; cohort too small for fractions {tuple(fractions)}")
    return masks


# ---------------------------------------------------------------------------
# Simulation

@dataclass
class SimulationConfig:
    n: int = 2000
    k_groups: int = 2
    m_groups: int = 2
    baseline_rates: list = field(default_factory=lambda: [0.1, 0.4])
    effect_betas: list = field(default_factory=lambda: [1.0, -1.0])
    censor_rate: float = 0.3
    noise_sd: float = 0.5
    seed: int = 0
    dims: dict = field(default_factory=lambda: {"clinical": 8, "paraclinical": 8, "demographic": 3,
                                                "omics": [16, 16]})
    treat_prob: float = 0.5

    def __post_init__(self):
        if self.n < 1 or self.k_groups < 1 or self.m_groups < 1:
            raise ValueError("n, k_groups and m_groups must be >= 1")
        if len(self.baseline_rates) != self.k_groups or any(r <= 0 for r in self.baseline_rates):
            raise ValueError("baseline_rates must hold k_groups positive values")
        if len(self.effect_betas) != self.m_groups:
            raise ValueError("effect_betas must hold m_groups values")
        if not 0.0 <= self.censor_rate < 1.0:
            raise ValueError("censor_rate must lie in [0, 1)")
        if self.noise_sd < 0 or not 0.0 <= self.treat_prob <= 1.0:
            raise ValueError("noise_sd must be >= 0 and treat_prob in [0, 1]")
        unknown = set(self.dims) - {"clinical", "paraclinical", "demographic", "omics"}
        if unknown:
            raise ValueError(f"unknown modality in dims: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "SimulationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown simulator config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "SimulationConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SyntheticTruth:
    ids: np.ndarray
    true_time: np.ndarray
    censor_time: np.ndarray
    true_k: np.ndarray  # 1-based
    true_m: np.ndarray  # 1-based
    effect_sign: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "true_time", "censor_time", "true_k", "true_m"])
            for row in zip(self.ids, self.true_time, self.censor_time, self.true_k, self.true_m):
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), int(row[3]), int(row[4])])

    @classmethod
    def from_csv(cls, path) -> "SyntheticTruth":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([r["id"] for r in rows], dtype=object),
                   np.array([float(r["true_time"]) for r in rows]),
                   np.array([float(r["censor_time"]) for r in rows]),
                   np.array([int(r["true_k"]) for r in rows]),
                   np.array([int(r["true_m"]) for r in rows]),
                   np.zeros(len(rows)))


def _calibrate_censoring(rates: np.ndarray, target: float) -> float:
    # expected censored fraction for exponential T and C is mean(lc / (lc + rate))
    if target <= 0:
        return 0.0
    f = lambda lc: float(np.mean(lc / (lc + rates))) - target
    hi = float(rates.max())
    while f(hi) < 0:
        hi *= 2.0
    return brentq(f, 0.0, hi, xtol=1e-14)


def simulate_cohort(config: SimulationConfig):
    """Draw a cohort with planted baseline (k) and response (m) subgroups.

    Event times are exponential with rate ``baseline_rates[k] * exp(a * effect_betas[m])``.
    Each modality is a noisy random linear image of the concatenated one-hot codes.
    """
    cfg = config
    root = SeededRng(cfg.seed)
    g_groups = root.child("groups").generator
    k = g_groups.integers(0, cfg.k_groups, cfg.n)
    m = g_groups.integers(0, cfg.m_groups, cfg.n)
    a = (root.child("treatment").generator.random(cfg.n) < cfg.treat_prob).astype(np.int64)
    rates = np.asarray(cfg.baseline_rates, float)[k] * np.exp(a * np.asarray(cfg.effect_betas, float)[m])
    T = root.child("event_time").generator.exponential(1.0 / rates)
    lc = _calibrate_censoring(rates, cfg.censor_rate)
    if lc > 0:
        C = root.child("censor_time").generator.exponential(1.0 / lc, cfg.n)
    else:
        C = np.full(cfg.n, np.inf)
    Y = np.minimum(T, C)
    delta = T <= C

    code = np.concatenate([np.eye(cfg.k_groups)[k], np.eye(cfg.m_groups)[m]], axis=1)
    g_feat = root.child("features").generator
    blocks, schemas = {}, {}
    layout = [(name, cfg.dims.get(name, 0)) for name in BASE_MODALITIES]
    layout += [(f"omics_{s + 1}", d) for s, d in enumerate(cfg.dims.get("omics", []))]
    for name, d in layout:
        if name != "clinical" and d <= 0:
            continue
        loading = g_feat.normal(size=(code.shape[1], d))
        blocks[name] = code @ loading + cfg.noise_sd * g_feat.normal(size=(cfg.n, d))
        prefix = name[:4] if not is_omics(name) else name
        schemas[name] = [f"{prefix}_{j + 1}" for j in range(d)]
    width = len(str(cfg.n - 1))
    ids = np.array([f"p{i:0{width}d}" for i in range(cfg.n)], dtype=object)
    cohort = Cohort(ids, Y, delta, a, blocks, schemas)
    truth = SyntheticTruth(ids, T, C, k + 1, m + 1, np.sign(np.asarray(cfg.effect_betas, float)[m]))
    return cohort, truth
