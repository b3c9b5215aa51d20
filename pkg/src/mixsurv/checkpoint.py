"""Checkpoint archive: JSON manifest plus raw little-endian float64 parameter blobs."""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .dataio import CohortPreprocessor, PreprocessSpec
from .estimator import MixtureSurvival
from .numerics import DTYPE

FORMAT = "mixsurv-checkpoint"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def config_hash(config: dict | None) -> str:
    blob = json.dumps(config or {}, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _write(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, estimator: MixtureSurvival, preprocessor: CohortPreprocessor | None = None,
                    config: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = estimator.model_.state_dict()
    entries = []
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f8", copy=False)
            fname = f"params/{name}.f64"
            _write(zf, fname, np.ascontiguousarray(arr).tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "file": fname})
        manifest = {
            "format": FORMAT,
            "format_version": FORMAT_VERSION,
            "package_version": __version__,
            "estimator_params": estimator.get_params(),
            "dims": estimator.dims_,
            "grid": estimator.edges_.tolist(),
            "init_rate": estimator.init_rate_,
            "seed": int(estimator.random_state),
            "config_hash": config_hash(config),
            "config": config,
            "preprocess": None if preprocessor is None else {
                "spec": {"transforms": preprocessor.spec.transforms, "default": preprocessor.spec.default,
                         "variance_threshold": preprocessor.spec.variance_threshold,
                         "rare_min_count": preprocessor.spec.rare_min_count},
                "plans": preprocessor.to_dict()},
            "parameters": entries,
            "extra": extra or {},
        }
        _write(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=2).encode())
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path):
    """Returns ``(estimator, preprocessor_or_None, manifest)``."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{path}: not a {FORMAT} archive")
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
        state = {}
        for e in manifest["parameters"]:
            arr = np.frombuffer(zf.read(e["file"]), dtype="<f8").reshape(e["shape"])
            state[e["name"]] = torch.as_tensor(arr.copy(), dtype=DTYPE)
    est = MixtureSurvival(**manifest["estimator_params"])
    est._restore(manifest["dims"], manifest["grid"], manifest["init_rate"], state)
    pre = None
    if manifest.get("preprocess"):
        spec = PreprocessSpec(**manifest["preprocess"]["spec"])
        pre = CohortPreprocessor.from_dict(manifest["preprocess"]["plans"], spec)
    return est, pre, manifest
