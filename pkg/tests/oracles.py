"""Independent reference implementations used as test oracles.

Everything here is plain numpy/python loops written from the definitions, with
no calls into the package, so agreement is evidence rather than tautology.
"""
from __future__ import annotations

import math

import numpy as np
import torch


def km_oracle(times, events):
    """Product-limit estimate as a list of (event_time, S just after it)."""
    times = [float(t) for t in times]
    events = [bool(e) for e in events]
    out, s = [], 1.0
    for t in sorted({t for t, e in zip(times, events) if e}):
        at_risk = sum(1 for u in times if u >= t)
        d = sum(1 for u, e in zip(times, events) if e and u == t)
        s *= 1.0 - d / at_risk
        out.append((t, s))
    return out


def km_eval(steps, t, left=False):
    s = 1.0
    for u, v in steps:
        if u < t or (u == t and not left):
            s = v
    return s


def step_value(curve, grid, t):
    """Right-continuous step lookup: value at the last grid point <= t, else 1."""
    s = 1.0
    for g, v in zip(grid, curve):
        if g <= t:
            s = v
    return s


def ctd_oracle(curves, grid, times, events):
    """Exhaustive pair enumeration; returns (concordant mass x 2, comparable pairs)."""
    n = len(times)
    twice, pairs = 0, 0
    for i in range(n):
        if not events[i]:
            continue
        si = step_value(curves[i], grid, times[i])
        for j in range(n):
            if times[j] > times[i]:
                sj = step_value(curves[j], grid, times[i])
                pairs += 1
                twice += 2 if si < sj else (1 if si == sj else 0)
    return twice, pairs


def brier_oracle(t, s_t, times, events):
    """IPCW Brier score by direct formula, censoring KM built from scratch."""
    cens = km_oracle(times, [not e for e in events])
    total = 0.0
    for s, y, d in zip(s_t, times, events):
        if y <= t and d:
            g = km_eval(cens, y, left=True)
            if g > 0:
                total += s**2 / g
        elif y > t:
            g = km_eval(cens, t)
            if g > 0:
                total += (1 - s) ** 2 / g
    return total / len(times)


def trapezoid(y, x):
    return sum((x[i + 1] - x[i]) * (y[i] + y[i + 1]) / 2 for i in range(len(x) - 1))


# -- forward oracles ---------------------------------------------------------

def np_params(module):
    return {k: v.detach().numpy().copy() for k, v in module.state_dict().items()}


def linear(p, prefix, x):
    return x @ p[prefix + ".weight"].T + p[prefix + ".bias"]


def layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def relu(x):
    return np.maximum(x, 0.0)


def softmax_rows(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def head_oracle(p, edges, x, a, risk_input="logits"):
    """Mixture survival at every edge plus the pieces needed for the likelihood."""
    v = linear(p, "gate_k.2", relu(linear(p, "gate_k.0", x)))
    u = linear(p, "gate_m.2", relu(linear(p, "gate_m.0", x)))
    pk, pm = softmax_rows(v), softmax_rows(u)
    if risk_input == "none":
        h = np.zeros_like(v)
    else:
        inp = v if risk_input == "logits" else x
        h = linear(p, "hazard_net.2", relu(linear(p, "hazard_net.0", inp)))
    lam = softplus(p["rho"])
    widths = np.diff(edges)
    return dict(v=v, u=u, pk=pk, pm=pm, h=h, lam=lam, widths=widths, omega=p["omega"])


def survival_oracle(parts, edges, a, t):
    """S(t | x_i, a_i) for each patient i at its own time t_i, by explicit loops."""
    n = parts["pk"].shape[0]
    K, M, B = parts["lam"].shape
    out = np.zeros(n)
    for i in range(n):
        ti = min(float(t[i]), edges[-1])
        for k in range(K):
            for m in range(M):
                H = 0.0
                for b in range(B):
                    lo, hi = edges[b], edges[b + 1]
                    H += parts["lam"][k, m, b] * max(0.0, min(ti, hi) - lo)
                c = math.exp(parts["h"][i, k] + a[i] * parts["omega"][m])
                out[i] += parts["pk"][i, k] * parts["pm"][i, m] * math.exp(-H * c)
    return out


def nll_oracle(parts, edges, time, event, a, floor=1e-12):
    n = len(time)
    terms = []
    for i in range(n):
        ti = min(float(time[i]), edges[-1])
        if event[i]:
            b = max(1, int(np.searchsorted(edges, ti, side="left")))
            one = np.array([i])
            s_lo = survival_oracle({k: (v[one] if k in ("pk", "pm", "h") else v) for k, v in parts.items()},
                                   edges, [a[i]], [edges[b - 1]])[0]
            s_hi = survival_oracle({k: (v[one] if k in ("pk", "pm", "h") else v) for k, v in parts.items()},
                                   edges, [a[i]], [edges[b]])[0]
            terms.append(math.log(max((s_lo - s_hi) / (edges[b] - edges[b - 1]), floor)))
        else:
            one = np.array([i])
            s = survival_oracle({k: (v[one] if k in ("pk", "pm", "h") else v) for k, v in parts.items()},
                                edges, [a[i]], [ti])[0]
            terms.append(math.log(max(s, floor)))
    return -sum(terms) / n


# -- finite differences ------------------------------------------------------

def fd_directional(fn, params, direction, step=1e-5):
    """Central difference of ``fn`` along ``direction`` (a list matching params)."""
    with torch.no_grad():
        for p, d in zip(params, direction):
            p.add_(step * d)
        up = float(fn())
        for p, d in zip(params, direction):
            p.sub_(2 * step * d)
        down = float(fn())
        for p, d in zip(params, direction):
            p.add_(step * d)
    return (up - down) / (2 * step)


def _richardson(fn, params, direction, h):
    coarse = fd_directional(fn, params, direction, h)
    fine = fd_directional(fn, params, direction, h / 2)
    return (4 * fine - coarse) / 3


def fd_piecewise(fn, params, direction, steps=(1e-3, 1e-4, 1e-5, 1e-6, 1e-7), rel=1e-6, roundoff=1e-14):
    """Directional derivative of a piecewise-smooth ``fn`` (ReLU, top-k routing).

    Richardson-extrapolated central differences at steps h and h/10 must agree
    to ``rel`` plus a roundoff allowance ``roundoff / (h/10)``; a kink inside the
    wider stencil breaks the agreement and the step shrinks. Returns
    ``(estimate, step_used)``. The analytic gradient plays no part in the choice.
    """
    prev = _richardson(fn, params, direction, steps[0])
    for h, finer in zip(steps, steps[1:]):
        nxt = _richardson(fn, params, direction, finer)
        if abs(prev - nxt) <= rel * abs(nxt) + roundoff / finer:
            return prev, h
        prev = nxt
    return prev, steps[-1]


def fd_elementwise(fn, param, step=1e-5):
    g = torch.zeros_like(param)
    flat = param.detach().view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + step
            up = float(fn())
            flat[i] = old - step
            down = float(fn())
            flat[i] = old
            g.view(-1)[i] = (up - down) / (2 * step)
    return g


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
