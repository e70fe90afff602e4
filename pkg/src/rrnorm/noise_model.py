"""Two-component zero-mean noise mixtures over per-band residuals.

Component 0 is always the no-change (small scale) component; component 1
absorbs changed pixels. Residual arrays are (n, C), responsibilities (n, 2).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

GAUSSIAN = "gaussian"
LAPLACE = "laplace"
FAMILIES = (GAUSSIAN, LAPLACE)

SCALE_FLOOR = 1e-4
PI_FLOOR = 1e-6
CHUNK = 1 << 16

_LOG_2PI = math.log(2.0 * math.pi)


class MixtureCollapseError(ArithmeticError):
    """A mixture component received zero responsibility mass."""


@dataclass(frozen=True)
class MixtureParams:
    family: str
    pi: np.ndarray       # (2,)
    scales: np.ndarray   # (C, 2): variance for gaussian, beta for laplace

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        pi = np.asarray(self.pi, dtype=np.float64).reshape(2)
        scales = np.asarray(self.scales, dtype=np.float64)
        if scales.ndim != 2 or scales.shape[1] != 2:
            raise ValueError(f"scales must be (bands, 2), got {scales.shape}")
        if not np.all(pi > 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixing weights must be positive and sum to 1, got {pi}")
        if not np.all(scales > 0) or not np.all(np.isfinite(scales)):
            raise ValueError("scales must be finite and positive")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "scales", scales)

    @property
    def bands(self) -> int:
        return self.scales.shape[0]

    def to_json(self) -> dict:
        return {"family": self.family, "pi": self.pi.tolist(), "scales": self.scales.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "MixtureParams":
        return cls(d["family"], np.asarray(d["pi"]), np.asarray(d["scales"]))

    def swapped(self) -> "MixtureParams":
        return MixtureParams(self.family, self.pi[::-1].copy(), self.scales[:, ::-1].copy())


def single_component(family: str, scales) -> MixtureParams:
    """A degenerate mixture equal to one zero-mean density (both components share ``scales``)."""
    s = np.maximum(np.asarray(scales, dtype=np.float64), SCALE_FLOOR)
    return MixtureParams(family, np.array([1.0 - PI_FLOOR, PI_FLOOR]), np.stack([s, s], axis=1))


def _logpdf(r, scale, family):
    if family == GAUSSIAN:
        return -0.5 * (_LOG_2PI + np.log(scale)) - r * r / (2.0 * scale)
    return -np.log(2.0 * scale) - np.abs(r) / scale


def log_density(residual, component: int, band: int, params: MixtureParams):
    """log p(residual | component, band) for the params' family."""
    r = np.asarray(residual, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("residual must be finite")
    return _logpdf(r, params.scales[band, component], params.family)


def _joint_chunk(r, params):
    # (n, 2) array of log pi_k + sum_c log p(r_c | k, c)
    out = np.empty((r.shape[0], 2))
    for k in range(2):
        out[:, k] = math.log(params.pi[k]) + _logpdf(r, params.scales[:, k], params.family).sum(axis=1)
    return out


def _posterior_chunk(r, params):
    joint = _joint_chunk(r, params)
    m = joint.max(axis=1)
    finite = np.isfinite(m)
    ms = np.where(finite, m, 0.0)
    e = np.exp(joint - ms[:, None])
    e[~finite] = 1.0
    s = e.sum(axis=1)
    gam = e / s[:, None]
    lognorm = np.where(finite, ms + np.log(s), -np.inf)
    return gam, lognorm, int((~finite).sum())


def _check_residuals(residuals, params):
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    if r.shape[1] != params.bands:
        raise ValueError(f"residuals have {r.shape[1]} bands, params have {params.bands}")
    if not np.all(np.isfinite(r)):
        raise ValueError("residual field contains non-finite values")
    return r


def posterior(residuals, params: MixtureParams, threads: int = 1):
    """Responsibilities, per-pixel log marginal likelihood and underflow count.

    Work is split into fixed-size pixel chunks; results do not depend on ``threads``.
    """
    r = _check_residuals(residuals, params)
    n = r.shape[0]
    bounds = [(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda b: _posterior_chunk(r[b[0]:b[1]], params), bounds))
    else:
        parts = [_posterior_chunk(r[a:b], params) for a, b in bounds]
    if not parts:
        return np.empty((0, 2)), np.empty(0), 0
    gam = np.concatenate([p[0] for p in parts])
    lognorm = np.concatenate([p[1] for p in parts])
    return gam, lognorm, sum(p[2] for p in parts)


def e_step(residuals, params: MixtureParams, threads: int = 1) -> np.ndarray:
    """(n, 2) posterior responsibilities computed in log space.

    Pixels where both components underflow get (0.5, 0.5); see :func:`posterior`
    for the count.
    """
    return posterior(residuals, params, threads)[0]


def mean_log_likelihood(residuals, params: MixtureParams, threads: int = 1) -> float:
    r = _check_residuals(residuals, params)
    if r.shape[0] == 0:
        raise ValueError("cannot average log-likelihood over an empty pixel set")
    lognorm = posterior(r, params, threads)[1]
    if not np.all(np.isfinite(lognorm)):
        raise FloatingPointError("log-likelihood is not finite")
    return float(np.sum(lognorm) / r.shape[0])


def reorder(params: MixtureParams, gammas=None):
    """Put the component with the smaller mean scale first; gammas follow the relabelling."""
    if params.scales[:, 0].mean() > params.scales[:, 1].mean():
        params = params.swapped()
        if gammas is not None:
            gammas = gammas[:, ::-1]
    return params, gammas


def m_step_mixture(residuals, gammas, family: str, strict: bool = True):
    """Closed-form mixing weights and per-band scales given responsibilities.

    Returns ``(params, gammas)`` with components reordered so the first has the
    smaller mean scale. With ``strict`` an empty component raises
    :class:`MixtureCollapseError`; otherwise it keeps the pi floor and copies the
    scales of the populated component.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    g = np.asarray(gammas, dtype=np.float64)
    if g.shape != (r.shape[0], 2):
        raise ValueError(f"gammas shape {g.shape} does not match {r.shape[0]} pixels")
    stat = r * r if family == GAUSSIAN else np.abs(r)
    nk = g.sum(axis=0)
    empty = nk <= 0
    if empty.all():
        raise MixtureCollapseError("no responsibility mass at all")
    if empty.any() and strict:
        raise MixtureCollapseError(
            f"component {int(np.argmax(empty)) + 1} is empty; re-initialize the mixture")
    scales = np.empty((r.shape[1], 2))
    for k in range(2):
        if not empty[k]:
            scales[:, k] = (g[:, k] @ stat) / nk[k]
    if empty.any():
        k = int(np.argmax(empty))
        scales[:, k] = scales[:, 1 - k]
    scales = np.maximum(scales, SCALE_FLOOR)
    pi = np.maximum(nk / r.shape[0], PI_FLOOR)
    pi = pi / pi.sum()
    return reorder(MixtureParams(family, pi, scales), g)
