"""Central finite-difference checks of every differentiable layer, in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .layers import Conv2D, Conv3D, LossHyperParams, Linear, eq1_loss, global_avg_pool
from .model import ModelConfig, build_model, mask_residual
from .tensor import Tape, Tensor

LAYER_TOL = 1e-3
END_TO_END_TOL = 1e-2
STEP = 1e-3
# ReLU kinks: a 1e-3 bias nudge moves a whole channel, some units cross zero
END_TO_END_STEP = 1e-6


@dataclass
class CheckRow:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def numeric_grad(f: Callable[[], float], t: Tensor, h: float = STEP,
                 indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries of ``t`` (mutated in place, restored)."""
    flat = t.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[k] = (fp - fm) / (2 * h)
    return out


def check(name: str, build: Callable[[], Tensor], wrt: Sequence[Tensor], tol: float = LAYER_TOL,
          max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None,
          h: float = STEP) -> CheckRow:
    """Compare tape gradients of ``build()`` (a scalar) against finite differences."""
    for t in wrt:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        loss = build()
    tape.backward(loss)

    def f():
        return float(build().data)

    worst = 0.0
    for t in wrt:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        idx = None
        if max_entries is not None and t.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(t.size, max_entries, replace=False))
        numeric = numeric_grad(f, t, h=h, indices=idx)
        a = analytic.reshape(-1) if idx is None else analytic.reshape(-1)[idx]
        worst = max(worst, relative_error(a, numeric))
    return CheckRow(name, worst, tol)


def _readout(x: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    # fixed random projection makes every output element matter
    w = Tensor(rng.standard_normal(x.shape), dtype=np.float64)
    return lambda y: T.sum(T.mul(y, w))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return Tensor(x, dtype=np.float64)


def run_all(seed: int = 0) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    f64 = np.float64
    rows = []

    conv2 = Conv2D(2, 3, 3, stride=2, padding=1, rng=rng, dtype=f64)
    conv2.bias.data[:] = rng.standard_normal(3)
    x2 = Tensor(rng.standard_normal((2, 2, 7, 6)), dtype=f64)
    proj = _readout(conv2(x2), rng)
    rows.append(check("conv2d", lambda: proj(conv2(x2)), [x2, conv2.weight, conv2.bias]))

    conv3 = Conv3D(2, 3, 3, stride=1, padding=1, rng=rng, dtype=f64)
    conv3.bias.data[:] = rng.standard_normal(3)
    x3 = Tensor(rng.standard_normal((1, 2, 4, 5, 5)), dtype=f64)
    proj3 = _readout(conv3(x3), rng)
    rows.append(check("conv3d", lambda: proj3(conv3(x3)), [x3, conv3.weight, conv3.bias]))

    fc = Linear(6, 5, rng=rng, dtype=f64)
    fc.bias.data[:] = rng.standard_normal(5)
    xf = Tensor(rng.standard_normal((4, 6)), dtype=f64)
    projf = _readout(fc(xf), rng)
    rows.append(check("fc", lambda: projf(fc(xf)), [xf, fc.weight, fc.bias]))

    xg = Tensor(rng.standard_normal((2, 3, 4, 4, 4)), dtype=f64)
    pg_s = _readout(global_avg_pool(xg, "spatial"), rng)
    pg_t = _readout(global_avg_pool(xg, "spatiotemporal"), rng)
    rows.append(check("gap", lambda: T.add(pg_s(global_avg_pool(xg, "spatial")),
                                           pg_t(global_avg_pool(xg, "spatiotemporal"))), [xg]))

    xa = _away_from_zero(rng, (4, 32))
    pa = _readout(xa, rng)
    rows.append(check("relu", lambda: pa(T.relu(xa)), [xa]))
    rows.append(check("sigmoid", lambda: pa(T.sigmoid(T.mul(xa, 3.0))), [xa]))

    res = _away_from_zero(rng, (1, 1, 2, 8, 8))
    thr = Tensor(rng.uniform(0.1, 0.9, (1, 1, 2, 2, 2)), dtype=f64)
    pm = _readout(thr, rng)
    rows.append(check("mask", lambda: pm(mask_residual(res, thr)), [res, thr]))

    pred = Tensor(rng.standard_normal(6), dtype=f64)
    labels = rng.standard_normal(6)
    wl = [Tensor(rng.standard_normal((3, 4)), dtype=f64), Tensor(rng.standard_normal((2, 2, 3)), dtype=f64)]
    hp = LossHyperParams(0.7, 0.05)
    rows.append(check("loss", lambda: eq1_loss(pred, labels, wl, hp), [pred] + wl))

    rows.append(end_to_end(seed))
    return rows


def end_to_end(seed: int = 0, variant: str = "c3d", per_tensor: int = 6) -> CheckRow:
    """d(score)/d(weights) on a tiny float64 model (D=4, H=W=16)."""
    rng = np.random.default_rng(seed + 1)
    cfg = ModelConfig(frames=4, patch=16, fc_hidden=8, variant=variant)
    model = build_model(cfg, seed=seed, dtype=np.float64)
    for p in model.parameters():
        if p.ndim == 1:
            p.data[:] = 0.1 * rng.standard_normal(p.shape)
    dist = Tensor(rng.uniform(0, 1, (1, 4, 16, 16)), dtype=np.float64)
    resid = Tensor(rng.uniform(-0.5, 0.5, (1, 4, 16, 16)), dtype=np.float64)
    params = model.parameters()
    return check("end_to_end", lambda: model(dist, resid).score, params,
                 tol=END_TO_END_TOL, max_entries=per_tensor, rng=rng, h=END_TO_END_STEP)


def format_table(rows: Sequence[CheckRow]) -> str:
    lines = [f"{'layer':<12} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in rows:
        lines.append(f"{r.name:<12} {r.max_rel_error:>12.3e} {r.tol:>8.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
