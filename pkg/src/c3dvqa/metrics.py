"""Correlation criteria, logistic remapping, PSNR and repeat aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import RawVideo


def _pairs(pred, subj, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(subj, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} predicted vs {y.size} subjective")
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} score pairs, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("scores must be finite")
    return x, y


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    den = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if den == 0:
        raise ValueError("correlation undefined for a constant list")
    return float(np.clip((xc @ yc) / den, -1.0, 1.0))


def srocc(pred, subj) -> float:
    """Spearman rank-order correlation; ties take their average rank."""
    x, y = _pairs(pred, subj, 3)
    return pearson(rankdata(x), rankdata(y))


def plcc(pred, subj) -> float:
    x, y = _pairs(pred, subj, 3)
    return pearson(x, y)


# ---------------------------------------------------------------------------
# 4-parameter logistic


def logistic4(x, beta) -> np.ndarray:
    b1, b2, b3, b4 = beta
    z = (np.asarray(x, dtype=np.float64) - b3) / abs(b4)
    return (b1 - b2) * 0.5 * (np.tanh(0.5 * z) + 1.0) + b2


def _logistic_jacobian(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    b1, b2, b3, b4 = beta
    s = abs(b4)
    z = (x - b3) / s
    sig = 0.5 * (np.tanh(0.5 * z) + 1.0)
    dsig = sig * (1.0 - sig)
    amp = b1 - b2
    return np.column_stack([
        sig,
        1.0 - sig,
        -amp * dsig / s,
        -amp * dsig * z / s * np.sign(b4),
    ])


@dataclass
class LogisticFit:
    beta: tuple
    converged: bool
    iterations: int
    fallback: bool = False  # True when the affine fit replaced a diverged logistic
    affine: Optional[tuple] = None  # (slope, intercept) when fallback

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.fallback:
            slope, intercept = self.affine
            return slope * x + intercept
        return logistic4(x, self.beta)


def fit_logistic(pred, subj, max_iter: int = 200, tol: float = 1e-8) -> LogisticFit:
    """Least-squares 4-parameter logistic fit by damped Gauss-Newton.

    Damping is Marquardt-scaled (proportional to the normal-matrix diagonal),
    so the iterates are equivariant under affine rescaling of the inputs.
    """
    x, y = _pairs(pred, subj, 5)
    beta = np.array([y.max(), y.min(), float(np.median(x)), float(x.std()) or 1.0])
    # decreasing relation: start from the mirrored curve
    if x.std() > 0 and y.std() > 0 and np.corrcoef(x, y)[0, 1] < 0:
        beta[0], beta[1] = beta[1], beta[0]

    def sse(b):
        r = y - logistic4(x, b)
        return float(r @ r)

    cost = sse(beta)
    mu = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = _logistic_jacobian(x, beta)
        r = y - logistic4(x, beta)
        A = J.T @ J
        g = J.T @ r
        diag = np.maximum(np.diag(A), 1e-12 * max(np.diag(A).max(), 1e-300))
        accepted = False
        while mu < 1e16:
            try:
                step = np.linalg.solve(A + mu * np.diag(diag), g)
            except np.linalg.LinAlgError:
                mu *= 4.0
                continue
            trial = beta + step
            if trial[3] == 0 or not np.all(np.isfinite(trial)):
                mu *= 4.0
                continue
            c = sse(trial)
            if c <= cost:
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            converged = True  # no descent direction left: at a (local) minimum
            break
        rel = np.linalg.norm(step) / (np.linalg.norm(beta) + 1e-300)
        beta, cost = trial, c
        mu = max(mu / 3.0, 1e-12)
        if rel < tol:
            converged = True
            break

    if not np.all(np.isfinite(beta)) or not math.isfinite(cost):
        slope, intercept = np.polyfit(x, y, 1)
        return LogisticFit(tuple(float(b) for b in beta), False, it, True, (float(slope), float(intercept)))
    return LogisticFit(tuple(float(b) for b in beta), converged, it)


def plcc_after_logistic(pred, subj) -> tuple[float, LogisticFit]:
    """Pearson correlation between logistic-remapped predictions and subjective scores."""
    x, y = _pairs(pred, subj, 5)
    fit = fit_logistic(x, y)
    mapped = fit(x)
    try:
        return pearson(mapped, y), fit
    except ValueError:
        # a saturated logistic can flatten the predictions; use the affine map instead
        slope, intercept = np.polyfit(x, y, 1)
        fit = LogisticFit(fit.beta, fit.converged, fit.iterations, True, (float(slope), float(intercept)))
        return pearson(fit(x), y), fit


# ---------------------------------------------------------------------------
# PSNR


def psnr_video(ref, dist, peak: float = 255.0) -> float:
    """10 log10(peak^2 / mean per-frame MSE); ``inf`` for identical videos."""
    a = ref.luma if isinstance(ref, RawVideo) else np.asarray(ref)
    b = dist.luma if isinstance(dist, RawVideo) else np.asarray(dist)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    diff = a.astype(np.float64) - b.astype(np.float64)
    frame_mse = np.mean(diff * diff, axis=(1, 2))
    mse = float(np.mean(frame_mse))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# repeat aggregation and reports


@dataclass
class RunResult:
    seed: int
    plcc: float
    srocc: float
    beta: tuple = (math.nan,) * 4
    fit_fallback: bool = False
    n_videos: int = 0
    predicted: list = field(default_factory=list)
    subjective: list = field(default_factory=list)


@dataclass
class EvalReport:
    runs: list
    median_plcc: float
    median_srocc: float

    CSV_COLUMNS = ("run", "seed", "plcc", "srocc", "beta1", "beta2", "beta3", "beta4",
                   "fit_fallback", "n_videos")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for i, r in enumerate(self.runs):
            w.writerow([i, r.seed, _fmt(r.plcc), _fmt(r.srocc), *(_fmt(b) for b in r.beta),
                        int(r.fit_fallback), r.n_videos])
        w.writerow(["median", "", _fmt(self.median_plcc), _fmt(self.median_srocc), "", "", "", "", "", ""])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "median_plcc": self.median_plcc,
            "median_srocc": self.median_srocc,
            "runs": [asdict(r) for r in self.runs],
        }, indent=2)

    def write(self, stem) -> None:
        with open(f"{stem}.csv", "w") as fh:
            fh.write(self.to_csv())
        with open(f"{stem}.json", "w") as fh:
            fh.write(self.to_json())


def _fmt(v: float) -> str:
    return repr(float(v))


def median(values: Sequence[float]) -> float:
    """Median with midpoint averaging for even counts."""
    if not values:
        raise ValueError("median of no values")
    return float(statistics.median(values))


def aggregate_runs(runs: Sequence[RunResult]) -> EvalReport:
    runs = list(runs)
    return EvalReport(runs, median([r.plcc for r in runs]), median([r.srocc for r in runs]))


def score_run(seed: int, predicted, subjective) -> RunResult:
    """SROCC and logistic PLCC for one split's test videos."""
    predicted = [float(p) for p in predicted]
    subjective = [float(s) for s in subjective]
    rho = srocc(predicted, subjective)
    if len(predicted) >= 5:
        r, fit = plcc_after_logistic(predicted, subjective)
        beta, fallback = fit.beta, fit.fallback
    else:
        r, beta, fallback = plcc(predicted, subjective), (math.nan,) * 4, True
    return RunResult(seed, r, rho, tuple(beta), fallback, len(predicted), predicted, subjective)
