"""Command-line entry point: simulate, train, eval, predict, phenotype, embed.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import effects
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, estimator_params, load_config
from .dataio import (CohortPreprocessor, DataError, PreprocessSpec, SimulationConfig, load_cohort,
                     simulate_cohort, split_cohort, write_cohort)
from .estimator import MixtureSurvival
from .metrics import default_eval_grid, evaluate
from .numerics import NumericalError

log = logging.getLogger("mixsurv")

SPLIT_NAMES = ("train", "val", "test")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


# ---------------------------------------------------------------------------

def _data_dir(cfg, args) -> Path:
    d = getattr(args, "data", None) or cfg["data"]["dir"]
    if d is None or not Path(d).is_dir():
        raise ConfigError(f"data directory {d!r} does not exist (set data.dir or --data)")
    return Path(d)


def _split_masks(cohort, cfg):
    return split_cohort(cohort, cfg["split"]["fractions"], cfg["seed"])


def _select(cohort, cfg, which: str):
    if which == "all":
        return cohort
    masks = _split_masks(cohort, cfg)
    names = SPLIT_NAMES[:len(masks)]
    if which not in names:
        raise ConfigError(f"split {which!r} not defined by split.fractions")
    return cohort.subset(masks[names.index(which)])


def _report(est: MixtureSurvival, cohort, cfg):
    curves, grid = est.evaluation_curves(cohort)
    eval_grid = default_eval_grid(cohort.time, cfg["eval"]["grid_points"])
    return evaluate(curves, grid, cohort.time, cohort.event, eval_grid)


def cmd_simulate(cfg, args) -> int:
    sim = dict(cfg["simulate"])
    if sim["seed"] is None:
        sim["seed"] = cfg["seed"]
    try:
        sc = SimulationConfig.from_dict(sim)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid simulator config: {exc}") from exc
    cohort, truth = simulate_cohort(sc)
    out = Path(cfg["out"])
    write_cohort(cohort, out / "cohort")
    truth.to_csv(out / "truth.csv")
    summary = {"n": len(cohort), "events": int(cohort.event.sum()),
               "event_rate": float(cohort.event.mean()), "censoring_rate": float(1 - cohort.event.mean())}
    write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(cfg, args) -> int:
    raw = load_cohort(_data_dir(cfg, args), cfg["data"]["time_unit"])
    masks = _split_masks(raw, cfg)
    pre = CohortPreprocessor(PreprocessSpec(**cfg["preprocess"]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        cohort = pre.fit_transform(raw, masks[0])
    train = cohort.subset(masks[0])
    val = cohort.subset(masks[1]) if len(masks) > 1 else None
    est = MixtureSurvival(**estimator_params(cfg)).fit(train, X_val=val)
    out = Path(cfg["out"])
    # the output location is not part of the model
    save_checkpoint(out / "checkpoint.zip", est, pre, {k: v for k, v in cfg.items() if k != "out"})
    h = est.history_
    write_csv(out / "loss_curve.csv", ["phase", "epoch", "train_loss", "val_loss"], h.rows())
    names = SPLIT_NAMES[:len(masks)]
    labels = np.empty(len(raw), dtype=object)
    for name, m in zip(names, masks):
        labels[m] = name
    write_csv(out / "split.csv", ["id", "split"], zip(raw.ids, labels))
    metrics = {"phase1_epochs_run": len(h.phase1_train), "phase1_best_epoch": h.best_epoch,
               "phase2_best_epoch": h.phase2_best_epoch, "n_train": len(train)}
    target = val if val is not None else train
    metrics["evaluated_on"] = "val" if val is not None else "train"
    rep = _report(est, target, cfg)
    metrics.update({"ctd": rep.ctd, "ibs": rep.ibs, "n_comparable": rep.n_comparable})
    write_json(out / "metrics.json", metrics)
    print(json.dumps({"ctd": rep.ctd, "ibs": rep.ibs}, sort_keys=True))
    return 0


def _load_for_inference(cfg, args):
    ckpt = Path(args.checkpoint or Path(cfg["out"]) / "checkpoint.zip")
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {str(ckpt)!r} not found")
    est, pre, manifest = load_checkpoint(ckpt)
    raw = load_cohort(_data_dir(cfg, args), cfg["data"]["time_unit"])
    cohort = pre.transform(raw) if pre is not None else raw
    return est, cohort, manifest


def cmd_eval(cfg, args) -> int:
    est, cohort, manifest = _load_for_inference(cfg, args)
    if manifest.get("config"):
        cfg = dict(cfg, split=manifest["config"]["split"], seed=manifest["config"]["seed"])
    cohort = _select(cohort, cfg, args.split)
    rep = _report(est, cohort, cfg)
    out = Path(cfg["out"])
    write_json(out / "report.json", rep.to_dict() | {"split": args.split, "n": len(cohort)})
    write_csv(out / "brier.csv", ["t", "brier"], zip(rep.eval_grid, rep.brier))
    curves = est.predict_survival_function(cohort)
    rows = ((pid, t, s) for pid, row in zip(cohort.ids, curves) for t, s in zip(est.edges_, row))
    write_csv(out / "curves.csv", ["id", "t", "S_hat"], rows)
    print(json.dumps({"ctd": rep.ctd, "ibs": rep.ibs}, sort_keys=True))
    return 0


def cmd_predict(cfg, args) -> int:
    est, cohort, _ = _load_for_inference(cfg, args)
    arms = [None] if args.treatment is None else [None, args.treatment]
    rows = []
    for arm in arms:
        curves = est.predict_survival_function(cohort, treatment=arm)
        a = cohort.treatment if arm is None else np.full(len(cohort), arm)
        for pid, ai, row in zip(cohort.ids, a, curves):
            rows.extend((pid, int(ai), t, s) for t, s in zip(est.edges_, row))
    write_csv(Path(cfg["out"]) / "predictions.csv", ["id", "a", "t", "S_hat"], rows)
    return 0


def cmd_phenotype(cfg, args) -> int:
    est, cohort, _ = _load_for_inference(cfg, args)
    horizon = args.horizon if args.horizon is not None else cfg["effects"]["horizon"]
    rep = effects.profile_subgroups(cohort, est, horizon)
    out = Path(cfg["out"])
    write_json(out / "phenotype.json", rep.to_dict())
    write_csv(out / "phenotype.csv", ["id", "k_hat", "m_hat", "risk_diff"],
              zip(cohort.ids, rep.k_hat, rep.m_hat, rep.risk_diff))
    return 0


def cmd_embed(cfg, args) -> int:
    est, cohort, _ = _load_for_inference(cfg, args)
    exports = effects.latent_exports(cohort, est, cfg["effects"]["hopkins_fraction"], cfg["seed"])
    rows = [(pid, e.space, p[0], p[1]) for e in exports for pid, p in zip(cohort.ids, e.projection)]
    out = Path(cfg["out"])
    write_csv(out / "embed.csv", ["id", "space", "pc1", "pc2"], rows)
    write_json(out / "embed.json", {
        "hopkins_convention": effects.HOPKINS_CONVENTION,
        "spaces": {e.space: {"hopkins": e.hopkins, "explained_variance": e.explained.tolist(),
                             "dim": int(np.atleast_2d(e.coords).shape[1])} for e in exports}})
    return 0


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "phenotype": cmd_phenotype, "embed": cmd_embed}


def _global_flags(p: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=d, help="root seed (unsigned 64-bit)")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=argparse.SUPPRESS if suppress else [],
                   metavar="PATH=VALUE", help="override a config value, e.g. --set phase2.epochs=5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixsurv", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        _global_flags(sp, suppress=True)
        if name != "simulate":
            sp.add_argument("--data", help="cohort directory (overrides data.dir)")
        if name not in ("simulate", "train"):
            sp.add_argument("--checkpoint", help="checkpoint archive (default <out>/checkpoint.zip)")
        if name == "eval":
            sp.add_argument("--split", default="all", choices=("all",) + SPLIT_NAMES)
        if name == "predict":
            sp.add_argument("--treatment", type=int, choices=(0, 1), help="counterfactual arm to add")
        if name == "phenotype":
            sp.add_argument("--horizon", type=float, help="integration horizon (default: 95th percentile)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.out)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 4
    except (DataError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
