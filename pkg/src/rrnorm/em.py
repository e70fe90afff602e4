"""Stochastic EM over the change-noise mixture, plus the two unweighted baselines."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import mappers
from .mappers import Mapping
from .noise_model import (
    GAUSSIAN,
    LAPLACE,
    SCALE_FLOOR,
    MixtureParams,
    m_step_mixture,
    mean_log_likelihood,
    posterior,
    single_component,
)
from .raster import RasterPair

log = logging.getLogger(__name__)

L_RRN = "L-RRN"
HM_RRN = "HM-RRN"
L_RRN_MOG = "L-RRN-MoG"
HM_RRN_MOL = "HM-RRN-MoL"
HM_RRN_MOG = "HM-RRN-MoG"
METHODS = (L_RRN, HM_RRN, L_RRN_MOG, HM_RRN_MOL, HM_RRN_MOG)

ALIASES = {
    "l": L_RRN, "hm": HM_RRN, "l-mog": L_RRN_MOG, "hm-mol": HM_RRN_MOL, "hm-mog": HM_RRN_MOG,
    "linear-rrn": L_RRN, "linear-rrn-mog": L_RRN_MOG,
}

FAMILY = {L_RRN: GAUSSIAN, HM_RRN: LAPLACE, L_RRN_MOG: GAUSSIAN,
          HM_RRN_MOL: LAPLACE, HM_RRN_MOG: GAUSSIAN}
LINEAR = {L_RRN, L_RRN_MOG}
BASELINES = {L_RRN, HM_RRN}

MIN_PIXELS = 100


def canonical_method(name: str) -> str:
    for m in METHODS:
        if name == m or name.lower() == m.lower():
            return m
    try:
        return ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; expected one of {METHODS}") from None


@dataclass(frozen=True)
class EmConfig:
    method: str = HM_RRN_MOG
    delta: float = 1e-4
    max_iters: int = 10
    subsample_size: Union[int, str] = 100_000
    seed: int = 0
    gamma_threshold: float = 0.5
    T: int = 255
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0 < self.gamma_threshold < 1:
            raise ValueError("gamma_threshold must lie in (0, 1)")
        if self.subsample_size != "full" and not (
                isinstance(self.subsample_size, int) and self.subsample_size >= 1000):
            raise ValueError("subsample_size must be an int >= 1000 or 'full'")


@dataclass(frozen=True)
class NoChangeMask:
    mask: np.ndarray
    ncr: float


@dataclass
class FitResult:
    method: str
    mapping: Mapping
    params: MixtureParams
    gammas: np.ndarray          # (|Omega|, 2), final full-batch pass
    nc_mask: NoChangeMask       # (height, width) over the pair grid
    mll: float
    trace: list = field(default_factory=list)
    initial_mll: float = float("nan")
    iterations: int = 0
    wall_time: float = 0.0
    underflow: int = 0
    config: EmConfig | None = None

    def report(self) -> dict:
        return {
            "method": self.method,
            "mll": self.mll,
            "ncr": self.nc_mask.ncr,
            "pi": self.params.pi.tolist(),
            "scales": self.params.scales.tolist(),
            "family": self.params.family,
            "iterations": self.iterations,
            "trace": list(self.trace),
            "wall_time_s": self.wall_time,
            "gamma_threshold": self.config.gamma_threshold if self.config else None,
            "seed": self.config.seed if self.config else None,
        }


def extract_nc_mask(gammas, threshold: float = 0.5, valid_mask=None) -> NoChangeMask:
    """Pixels whose no-change responsibility reaches ``threshold``.

    With ``valid_mask`` the per-pixel decisions are scattered back onto the raster grid.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    g1 = np.asarray(gammas)
    g1 = g1[:, 0] if g1.ndim == 2 else g1
    keep = g1 >= threshold
    ncr = float(keep.mean()) if keep.size else 0.0
    if valid_mask is not None:
        grid = np.zeros(valid_mask.shape, dtype=bool)
        grid[valid_mask] = keep
        keep = grid
    return NoChangeMask(keep, ncr)


def _residuals(mapping: Mapping, x, y):
    return y.astype(np.float64) - mappers.predict(mapping, x)


def _fit_mapping(method, x, y, weights, T):
    if method in LINEAR:
        return mappers.fit_affine(x, y, weights)
    return mappers.fit_luts(x, y, weights, T)


def _refit_weights(method, gammas, params):
    fn = {L_RRN_MOG: mappers.case1_weights, HM_RRN_MOL: mappers.case2_weights,
          HM_RRN_MOG: mappers.case3_weights}[method]
    return np.stack([fn(gammas, params, c) for c in range(params.bands)], axis=1)


def _moment(r, family, axis=0):
    return np.mean(r * r if family == GAUSSIAN else np.abs(r), axis=axis)


def initialize(x, y, config: EmConfig) -> tuple[Mapping, MixtureParams]:
    """Unweighted mapping fit and a median split of its residuals into two components."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] < MIN_PIXELS:
        raise ValueError(f"need at least {MIN_PIXELS} pixels to fit a mixture, got {x.shape[0]}")
    mapping = _fit_mapping(config.method, x, y, None, config.T)
    r = _residuals(mapping, x, y)
    family = FAMILY[config.method]
    stat = r * r if family == GAUSSIAN else np.abs(r)
    a = np.abs(r)
    med = np.median(a, axis=0)
    scales = np.empty((r.shape[1], 2))
    for c in range(r.shape[1]):
        lo = a[:, c] <= med[c]
        hi = ~lo
        scales[c, 0] = stat[lo, c].mean()
        scales[c, 1] = stat[hi, c].mean() if hi.any() else scales[c, 0]
    scales = np.maximum(scales, SCALE_FLOOR)
    return mapping, MixtureParams(family, np.array([0.5, 0.5]), scales)


def _baseline(pair_x, pair_y, config, valid_mask, t0):
    mapping = _fit_mapping(config.method, pair_x, pair_y, None, config.T)
    r = _residuals(mapping, pair_x, pair_y)
    params = single_component(FAMILY[config.method], _moment(r, FAMILY[config.method]))
    mll = mean_log_likelihood(r, params, config.threads)
    gammas = np.zeros((r.shape[0], 2))
    gammas[:, 0] = 1.0
    return FitResult(
        method=config.method, mapping=mapping, params=params, gammas=gammas,
        nc_mask=extract_nc_mask(gammas, config.gamma_threshold, valid_mask),
        mll=mll, trace=[mll], initial_mll=mll, iterations=1,
        wall_time=time.perf_counter() - t0, config=config)


def fit(x, y, config: EmConfig, valid_mask=None) -> FitResult:
    """Run one method on (n, C) source/target codes over the overlap set."""
    t0 = time.perf_counter()
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("x and y must be matching (n, C) arrays")
    if config.method in BASELINES:
        return _baseline(x, y, config, valid_mask, t0)

    method, threads = config.method, config.threads
    n = x.shape[0]
    mapping, params = initialize(x, y, config)
    sub = n if config.subsample_size == "full" else min(int(config.subsample_size), n)
    stochastic = sub < n
    rng = np.random.default_rng(config.seed)

    def em_iteration(xb, yb, mapping, params):
        r = _residuals(mapping, xb, yb)
        gam, lognorm, _ = posterior(r, params, threads)
        old = float(np.sum(lognorm) / r.shape[0])
        params, gam = m_step_mixture(r, gam, params.family, strict=True)
        mapping = _fit_mapping(method, xb, yb, _refit_weights(method, gam, params), config.T)
        new = mean_log_likelihood(_residuals(mapping, xb, yb), params, threads)
        if not (np.isfinite(old) and np.isfinite(new)):
            raise FloatingPointError(f"non-finite log-likelihood in {method} iteration")
        return mapping, params, old, new

    initial = mean_log_likelihood(_residuals(mapping, x, y), params, threads)
    trace = []
    for it in range(config.max_iters):
        if stochastic:
            idx = np.sort(rng.choice(n, size=sub, replace=False))
            xb, yb = x[idx], y[idx]
        else:
            xb, yb = x, y
        mapping, params, old, new = em_iteration(xb, yb, mapping, params)
        trace.append(new)
        log.debug("%s iter %d: mll %.6f -> %.6f", method, it + 1, old, new)
        if abs(new - old) < config.delta:
            break
    if stochastic:
        mapping, params, _, _ = em_iteration(x, y, mapping, params)

    r = _residuals(mapping, x, y)
    gammas, lognorm, underflow = posterior(r, params, threads)
    mll = float(np.sum(lognorm) / n)
    if not np.isfinite(mll):
        raise FloatingPointError(f"final log-likelihood of {method} is not finite")
    return FitResult(
        method=method, mapping=mapping, params=params, gammas=gammas,
        nc_mask=extract_nc_mask(gammas, config.gamma_threshold, valid_mask),
        mll=mll, trace=trace, initial_mll=initial, iterations=len(trace),
        wall_time=time.perf_counter() - t0, underflow=underflow, config=config)


def run(pair: RasterPair, config: EmConfig) -> FitResult:
    """Fit ``config.method`` on a pair of code rasters (already quantized to 0..T)."""
    x, y = pair.pixels()
    return fit(x, y, config, pair.valid_mask)
