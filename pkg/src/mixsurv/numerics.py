"""Numerical substrate: float64 tensors, reverse-mode gradients, Adam/AdamW, seeded RNG.

Autodiff is delegated to ``torch.autograd`` running in float64; this module adds
the contracts the rest of the package relies on (finite checks, zero gradients
for untouched leaves, deterministic sub-streams).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64


class NumericalError(ArithmeticError):
    """Raised when a loss, gradient or tensor leaves the finite range."""


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def check_finite(x, what: str = "tensor") -> None:
    if isinstance(x, torch.Tensor):
        ok = bool(torch.isfinite(x).all())
    else:
        ok = bool(np.all(np.isfinite(x)))
    if not ok:
        raise NumericalError(f"{what} contains non-finite values")


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax of a 1-D real vector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("softmax expects a non-empty 1-D vector")
    check_finite(z, "logits")
    e = np.exp(z - z.max())
    return e / e.sum()


def grad_of(loss: torch.Tensor, params: Sequence[torch.Tensor] | Mapping[str, torch.Tensor]):
    """Gradient of a scalar ``loss`` with respect to each parameter.

    Parameters the loss does not depend on get an exact zero gradient. Returns a
    list when ``params`` is a sequence and a dict when it is a mapping.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ValueError("loss must be a scalar tensor")
    if loss.grad_fn is None and not loss.requires_grad:
        raise ValueError("loss was not computed from any tracked parameter (empty tape)")
    check_finite(loss, "loss")
    names = None
    if isinstance(params, Mapping):
        names = list(params)
        params = [params[k] for k in names]
    params = list(params)
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    out = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    return dict(zip(names, out)) if names is not None else out


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters. ``decoupled`` selects AdamW-style decay."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = True
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(state: OptimizerState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]):
    """Apply one Adam/AdamW update to ``params`` in place and return ``(params, state)``."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [torch.zeros_like(p, dtype=DTYPE) for p in params]
        state.v = [torch.zeros_like(p, dtype=DTYPE) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)} grad {tuple(g.shape)}")
        check_finite(g, "gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if state.weight_decay:
                if state.decoupled:
                    p.mul_(1.0 - state.lr * state.weight_decay)
                else:
                    g = g + state.weight_decay * p
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)
    return params, state


class Optimizer:
    """Stateful wrapper: ``opt.step(grads)`` updates the bound parameters."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float, weight_decay: float = 0.0,
                 decoupled: bool = True, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, beta1=betas[0],
                                    beta2=betas[1], eps=eps, decoupled=decoupled)

    def step(self, grads: Sequence[torch.Tensor]) -> None:
        optimizer_step(self.state, self.params, grads)


def AdamW(params, lr=5e-4, weight_decay=1e-5) -> Optimizer:
    return Optimizer(params, lr, weight_decay, decoupled=True)


def Adam(params, lr=0.01, weight_decay=0.0) -> Optimizer:
    return Optimizer(params, lr, weight_decay, decoupled=False)


class SeededRng:
    """Splittable generator on numpy's counter-based Philox bit generator.

    ``child("init")`` derives an independent stream from the root seed and a
    label, so adding draws to one stream never perturbs another.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(path)
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        for label in self.path:
            digest = hashlib.sha256(label.encode()).digest()
            words.extend(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, label: str) -> "SeededRng":
        return SeededRng(self.seed, self.path + (label,))

    def int_seed(self) -> int:
        """A 63-bit integer for seeding other libraries (e.g. torch)."""
        return int(self.generator.integers(0, 2**63 - 1))

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.int_seed())
        return g
