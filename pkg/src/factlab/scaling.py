"""Capacity search and the three scaling-law fitters.

Capacity of a (model size, epoch budget) cell is located by geometric
bracketing plus bisection on the training-set size, aiming for the band
where the memorization rate sits in [phi, phi+1] percent. Each probe trains
a fresh model. The fitters are plain least squares: ordinary for the linear
law, log-log for the power law, and damped Gauss-Newton for the negative
exponential saturation law.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ArityError,
    DomainError,
    FitFailureError,
    RangeError,
    SearchFailureError,
    UnreachableTargetError,
)

LAW_LINEAR = "linear"
LAW_NEGEXP = "negexp"
LAW_POWERLAW = "powerlaw"


class ExtrapolationWarning(UserWarning):
    """Evaluation far outside the fitted range."""


@dataclass
class CapacityPoint:
    non_embed: int
    epochs: int
    dataset_size: int
    mr: float
    effective_capacity: float = 0.0
    band_miss: bool = False
    warning: str | None = None

    def __post_init__(self):
        if not self.effective_capacity:
            self.effective_capacity = self.dataset_size * self.mr

    def as_row(self) -> dict:
        return {
            "non_embed": self.non_embed, "epochs": self.epochs,
            "dataset_size": self.dataset_size, "mr": self.mr,
            "effective_capacity": self.effective_capacity,
            "band_miss": int(self.band_miss), "warning": self.warning or "",
        }


@dataclass
class FitResult:
    law: str
    parameters: dict[str, float]
    residual: float            # root mean square
    r_squared: float           # clamped to [0, 1]; raw value kept in aux
    points_used: int
    x_range: tuple[float, float]
    aux: dict = field(default_factory=dict)

    def predict(self, x: float) -> float:
        p = self.parameters
        if self.law == LAW_LINEAR:
            return p["slope"] * x + p["intercept"]
        if self.law == LAW_NEGEXP:
            return p["c_star"] - p["alpha"] * math.exp(-p["beta"] * x)
        if self.law == LAW_POWERLAW:
            return p["d_c"] * x ** p["alpha"]
        raise ValueError(f"unknown law {self.law!r}")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)


# --------------------------------------------------------------------------
# capacity band search

@dataclass
class Probe:
    dataset_size: int
    mr: float


def band_search(
    probe: Callable[[int], float],
    corpus_size: int,
    phi: float = 95.0,
    band_width: float = 1.0,
    budget: int = 10,
    initial_guess: int | None = None,
    min_size: int = 1,
    granularity: int = 1,
) -> tuple[Probe, list[Probe], str | None]:
    """Find |D| with MR in [phi, phi+band_width] percent.

    Returns (chosen probe, trace, warning). A warning is set when the band is
    missed (nearest probe returned) or when MR fails to decrease with |D| by
    more than the 2-point noise margin.
    """
    if not 0.0 < phi < 100.0:
        raise RangeError("phi must be in (0, 100)")
    if budget < 3:
        raise RangeError("need a budget of >= 3 probes")
    lo_mr = phi / 100.0
    hi_mr = (phi + band_width) / 100.0

    def snap(n: int) -> int:
        n = max(min_size, min(corpus_size, n))
        return max(min_size, granularity * max(1, round(n / granularity)))

    trace: list[Probe] = []

    def run(n: int) -> Probe:
        pr = Probe(n, float(probe(n)))
        trace.append(pr)
        return pr

    size = snap(initial_guess or max(min_size, corpus_size // 8))
    current = run(size)

    # bracket: inner (MR >= lo_mr) and outer (MR < lo_mr)
    inner: Probe | None = current if current.mr >= lo_mr else None
    outer: Probe | None = current if current.mr < lo_mr else None
    while (inner is None or outer is None) and len(trace) < budget:
        if outer is None:
            if current.dataset_size >= corpus_size:
                # memorizes everything available: saturation edge
                return current, trace, "band-miss: corpus exhausted above the band"
            current = run(snap(current.dataset_size * 2))
        else:
            if current.dataset_size <= min_size:
                break
            current = run(snap(max(min_size, current.dataset_size // 2)))
        if current.mr >= lo_mr:
            if inner is None or current.dataset_size > inner.dataset_size:
                inner = current
        else:
            if outer is None or current.dataset_size < outer.dataset_size:
                outer = current

    def in_band(pr: Probe) -> bool:
        return lo_mr <= pr.mr <= hi_mr

    hit = next((pr for pr in trace if in_band(pr)), None)
    if inner is None or outer is None:
        if hit is not None:
            return hit, trace, _monotonicity_warning(trace)
        raise SearchFailureError(
            f"budget {budget} exhausted without bracketing MR {phi}%", trace=trace
        )

    while hit is None and len(trace) < budget:
        mid = snap((inner.dataset_size + outer.dataset_size) // 2)
        if mid in (inner.dataset_size, outer.dataset_size):
            break
        current = run(mid)
        if in_band(current):
            hit = current
            break
        if current.mr >= lo_mr:
            inner = current
        else:
            outer = current

    warning = _monotonicity_warning(trace)
    if hit is not None:
        return hit, trace, warning
    # nearest to the band among all probes
    def dist(pr: Probe) -> float:
        if pr.mr < lo_mr:
            return lo_mr - pr.mr
        return pr.mr - hi_mr
    nearest = min(trace, key=dist)
    miss = f"band-miss: nearest MR {nearest.mr:.3f} at |D|={nearest.dataset_size}"
    return nearest, trace, miss if warning is None else f"{miss}; {warning}"


def _monotonicity_warning(trace: list[Probe], margin: float = 0.02) -> str | None:
    by_size = sorted(trace, key=lambda p: p.dataset_size)
    for small, big in zip(by_size, by_size[1:]):
        if big.mr > small.mr + margin:
            return (
                f"non-monotonic MR: |D|={big.dataset_size} scored {big.mr:.3f} "
                f"> {small.mr:.3f} at |D|={small.dataset_size}"
            )
    return None


def find_capacity(
    model_cfg,
    epochs: int,
    phi: float,
    corpus,
    search_budget: int = 10,
    train_cfg=None,
    seed: int = 0,
    initial_guess: int | None = None,
    probe: Callable[[int], float] | None = None,
) -> CapacityPoint:
    """Capacity of one (model size, epoch budget) cell; every probe retrains from scratch."""
    from . import factgen
    from .evaluator import memorization_rate
    from .model import count_params, init_model
    from .trainer import EncodedDataset, TrainConfig, train

    non_embed = count_params(model_cfg)[1]
    keys = corpus.keys()
    attrs_per_key = max(1, len(corpus) // max(1, len(keys)))

    if probe is None:
        if train_cfg is None:
            raise RangeError("need train_cfg when probing with real training")

        def probe(size: int) -> float:
            num_keys = max(1, min(len(keys), round(size / attrs_per_key)))
            sample = factgen.sample_facts(corpus, num_keys, seed=seed + 7919 * num_keys)
            data = EncodedDataset.from_facts(sample)
            cfg = TrainConfig(**{**asdict(train_cfg), "epochs": epochs,
                                 "seed": seed + 104729 * num_keys})
            state = init_model(model_cfg, seed=seed + 15485863 * num_keys)
            train(state, data, cfg)
            return memorization_rate(state, data).overall_mr

    chosen, trace, warning = band_search(
        probe, corpus_size=len(corpus), phi=phi, budget=search_budget,
        initial_guess=initial_guess, min_size=attrs_per_key, granularity=attrs_per_key,
    )
    return CapacityPoint(
        non_embed=non_embed, epochs=epochs, dataset_size=chosen.dataset_size,
        mr=chosen.mr, band_miss=warning is not None and "band-miss" in warning,
        warning=warning,
    )


def capacity_by_first_epoch(
    model_cfg,
    dataset_sizes: Sequence[int],
    max_epochs: int,
    phi: float,
    corpus,
    train_cfg,
    seed: int = 0,
    eval_every: int = 10,
) -> list[CapacityPoint]:
    """Early-stop protocol: one run per |D|, capacity dated at the first epoch with MR > phi.

    Cheaper than band search per epoch point; the two protocols are
    alternatives for the capacity-vs-epoch curve.
    """
    from . import factgen
    from .model import count_params, init_model
    from .trainer import EncodedDataset, TrainConfig, train

    non_embed = count_params(model_cfg)[1]
    keys = corpus.keys()
    attrs_per_key = max(1, len(corpus) // max(1, len(keys)))
    points: list[CapacityPoint] = []
    for size in dataset_sizes:
        num_keys = max(1, min(len(keys), round(size / attrs_per_key)))
        sample = factgen.sample_facts(corpus, num_keys, seed=seed + 7919 * num_keys)
        data = EncodedDataset.from_facts(sample)
        cfg = TrainConfig(**{**asdict(train_cfg), "epochs": max_epochs,
                             "seed": seed + 104729 * num_keys,
                             "eval_every": eval_every, "stop_at_mr": phi / 100.0})
        state = init_model(model_cfg, seed=seed + 15485863 * num_keys)
        report = train(state, data, cfg)
        crossing = next(((ep, mr) for ep, mr in report.mr_snapshots if mr > phi / 100.0), None)
        if crossing is None:
            points.append(CapacityPoint(
                non_embed=non_embed, epochs=max_epochs, dataset_size=len(data),
                mr=report.mr_snapshots[-1][1] if report.mr_snapshots else 0.0,
                band_miss=True, warning=f"never crossed {phi}% within {max_epochs} epochs",
            ))
        else:
            ep, mr = crossing
            points.append(CapacityPoint(
                non_embed=non_embed, epochs=ep, dataset_size=len(data), mr=mr,
            ))
    return points


# --------------------------------------------------------------------------
# fitters

def _as_xy(points) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ArityError("points must be (x, y) pairs")
    return arr[:, 0], arr[:, 1]


def _diag(y: np.ndarray, pred: np.ndarray) -> tuple[float, float, float]:
    resid = y - pred
    rms = float(np.sqrt(np.mean(resid**2)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    raw_r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return rms, max(0.0, min(1.0, raw_r2)), raw_r2


def fit_linear(points) -> FitResult:
    """OLS with intercept; a through-origin slope is reported alongside."""
    x, y = _as_xy(points)
    if len(np.unique(x)) < 2:
        raise ArityError("need >= 2 distinct x values")
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = slope * x + intercept
    rms, r2, raw = _diag(y, pred)
    origin_slope = float(np.sum(x * y) / np.sum(x * x))
    origin_pred = origin_slope * x
    origin_rms = float(np.sqrt(np.mean((y - origin_pred) ** 2)))
    return FitResult(
        law=LAW_LINEAR,
        parameters={"slope": float(slope), "intercept": float(intercept)},
        residual=rms, r_squared=r2, points_used=len(x),
        x_range=(float(x.min()), float(x.max())),
        aux={"raw_r_squared": raw, "origin_slope": origin_slope, "origin_residual": origin_rms},
    )


def fit_negexp(points, max_iter: int = 200, tol: float = 1e-10) -> FitResult:
    """Damped Gauss-Newton fit of y = c_star - alpha * exp(-beta * x)."""
    x, y = _as_xy(points)
    if len(x) < 4:
        raise ArityError("need >= 4 points")
    if x.max() < 4 * x.min():
        raise ArityError("epoch grid must span >= 4x")
    flags = []
    if np.any(np.diff(y[np.argsort(x)]) < 0):
        flags.append("capacity decreases somewhere on the grid")

    # init: c0 slightly above max, beta from a log-linear fit of (c0 - y)
    c0 = 1.05 * float(y.max())
    gap = np.maximum(c0 - y, 1e-12)
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, np.log(gap), rcond=None)
    beta = max(-float(slope), 1e-12)
    alpha = c0 - float(y.min())
    theta = np.array([c0, alpha, beta], dtype=np.float64)

    def residuals(t):
        return y - (t[0] - t[1] * np.exp(-t[2] * x))

    lam = 1e-3
    r = residuals(theta)
    cost = float(r @ r)
    trace = [cost]
    for _ in range(max_iter):
        e = np.exp(-theta[2] * x)
        J = np.stack([np.ones_like(x), -e, theta[1] * x * e], axis=1)
        JtJ = J.T @ J
        g = J.T @ r
        stepped = False
        for _ in range(24):
            try:
                delta = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = theta + delta
            rc = residuals(cand)
            cc = float(rc @ rc)
            if math.isfinite(cc) and cc <= cost:
                theta, r = cand, rc
                improved = cost - cc
                cost = cc
                lam = max(lam / 3, 1e-12)
                stepped = True
                break
            lam *= 10
        trace.append(cost)
        if not stepped:
            break
        if improved <= tol * max(cost, 1e-300):
            break
    else:
        if cost > tol:
            raise FitFailureError("no convergence in max_iter", trace=trace)

    c_star, alpha, beta = (float(v) for v in theta)
    if abs(beta) * float(x.max()) < 1e-6:
        # beta ~ 0 makes (c_star, alpha) non-identifiable; canonicalize to a constant
        c_star, alpha, beta = c_star - alpha, 0.0, 0.0
    pred = c_star - alpha * np.exp(-beta * x)
    rms, r2, raw = _diag(y, pred)
    if c_star < y.max():
        flags.append("fitted saturation below the largest observed capacity")
    return FitResult(
        law=LAW_NEGEXP,
        parameters={"c_star": c_star, "alpha": alpha, "beta": beta},
        residual=rms, r_squared=r2, points_used=len(x),
        x_range=(float(x.min()), float(x.max())),
        aux={"raw_r_squared": raw, "flags": flags, "cost_trace_len": len(trace)},
    )


def fit_powerlaw(points) -> FitResult:
    """OLS in log-log space for y = d_c * x ** alpha."""
    x, y = _as_xy(points)
    if len(np.unique(x)) < 3:
        raise ArityError("need >= 3 distinct x values")
    if np.any(y <= 0) or np.any(x <= 0):
        raise DomainError("power-law fit needs positive x and y")
    lx, ly = np.log(x), np.log(y)
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (alpha, logc), *_ = np.linalg.lstsq(A, ly, rcond=None)
    pred_log = alpha * lx + logc
    rms, r2, raw = _diag(ly, pred_log)
    return FitResult(
        law=LAW_POWERLAW,
        parameters={"d_c": float(np.exp(logc)), "alpha": float(alpha)},
        residual=rms, r_squared=r2, points_used=len(x),
        x_range=(float(x.min()), float(x.max())),
        aux={"raw_r_squared": raw, "log_space_residual": rms},
    )


def extrapolate(fit: FitResult, x: float) -> float:
    """Evaluate the law at x; warns beyond 10x the fitted range."""
    lo, hi = fit.x_range
    if x > 10 * hi or (lo > 0 and x < lo / 10):
        warnings.warn(
            f"x={x:g} is beyond 10x the fitted range [{lo:g}, {hi:g}]",
            ExtrapolationWarning, stacklevel=2,
        )
    return fit.predict(x)


def invert(fit: FitResult, y: float) -> float:
    """Solve law(x) = y; raises when the law can never reach y."""
    p = fit.parameters
    if fit.law == LAW_LINEAR:
        if p["slope"] == 0:
            raise UnreachableTargetError("flat line cannot be inverted")
        return (y - p["intercept"]) / p["slope"]
    if fit.law == LAW_NEGEXP:
        if y >= p["c_star"]:
            raise UnreachableTargetError(
                f"target {y:g} is at or above the saturation capacity {p['c_star']:g}"
            )
        if p["alpha"] <= 0 or p["beta"] <= 0:
            raise UnreachableTargetError("degenerate saturation fit cannot be inverted")
        return -math.log((p["c_star"] - y) / p["alpha"]) / p["beta"]
    if fit.law == LAW_POWERLAW:
        if y <= 0 or p["alpha"] == 0:
            raise UnreachableTargetError("power law cannot reach non-positive targets")
        return (y / p["d_c"]) ** (1.0 / p["alpha"])
    raise ValueError(f"unknown law {fit.law!r}")


# --------------------------------------------------------------------------
# serialization

def write_points_csv(points: Sequence[CapacityPoint], path) -> None:
    fields = ["non_embed", "epochs", "dataset_size", "mr", "effective_capacity", "band_miss", "warning"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for pt in points:
            w.writerow(pt.as_row())


def read_points_csv(path) -> list[CapacityPoint]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(CapacityPoint(
                non_embed=int(row["non_embed"]), epochs=int(row["epochs"]),
                dataset_size=int(row["dataset_size"]), mr=float(row["mr"]),
                effective_capacity=float(row["effective_capacity"]),
                band_miss=bool(int(row["band_miss"])), warning=row["warning"] or None,
            ))
    return out
