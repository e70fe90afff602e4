"""Per-band normalization mappings: weighted affine fits and weighted histogram matching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .noise_model import GAUSSIAN, LAPLACE, MixtureParams
from .raster import Raster, code_dtype

# relative slack when comparing cumulative profiles; absorbs summation-order rounding
CP_TOL = 1e-9


class SingularFitError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class AffineMapping:
    params: np.ndarray  # (C, 2) rows of (w, b)

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "params", p)

    variant = "affine"

    @property
    def bands(self) -> int:
        return self.params.shape[0]

    def evaluate(self, codes: np.ndarray, band: int) -> np.ndarray:
        """Real-valued f_c(x), used for residuals during fitting."""
        w, b = self.params[band]
        return w * np.asarray(codes, dtype=np.float64) + b

    def to_json(self) -> dict:
        return {"variant": "affine", "params": self.params.tolist()}


@dataclass(frozen=True)
class LutMapping:
    tables: np.ndarray  # (C, T+1) integer codes

    def __post_init__(self):
        t = np.asarray(self.tables)
        if t.ndim == 1:
            t = t[None]
        t = t.astype(np.int64)
        if np.any(np.diff(t, axis=1) < 0):
            raise ValueError("lookup tables must be non-decreasing")
        if t.min() < 0 or t.max() > t.shape[1] - 1:
            raise ValueError("lookup table values must lie in 0..T")
        object.__setattr__(self, "tables", t)

    variant = "lut"

    @property
    def bands(self) -> int:
        return self.tables.shape[0]

    @property
    def T(self) -> int:
        return self.tables.shape[1] - 1

    def evaluate(self, codes: np.ndarray, band: int) -> np.ndarray:
        return self.tables[band][np.asarray(codes, dtype=np.int64)].astype(np.float64)

    def to_json(self) -> dict:
        return {"variant": "lut", "tables": self.tables.tolist()}


Mapping = AffineMapping | LutMapping


def mapping_from_json(d: dict) -> Mapping:
    if d["variant"] == "affine":
        return AffineMapping(np.asarray(d["params"], dtype=np.float64))
    if d["variant"] == "lut":
        return LutMapping(np.asarray(d["tables"], dtype=np.int64))
    raise ValueError(f"unknown mapping variant {d['variant']!r}")


def predict(mapping: Mapping, x: np.ndarray) -> np.ndarray:
    """(n, C) real-valued mapped codes for (n, C) source codes."""
    x = np.asarray(x)
    if x.shape[1] != mapping.bands:
        raise ValueError(f"mapping has {mapping.bands} bands, data has {x.shape[1]}")
    return np.stack([mapping.evaluate(x[:, c], c) for c in range(x.shape[1])], axis=1)


def apply_mapping(mapping: Mapping, source_codes: Raster, T: int = 255) -> Raster:
    """Map a code raster band by band; affine outputs are rounded and clamped to [0, T]."""
    if source_codes.bands != mapping.bands:
        raise ValueError(f"mapping has {mapping.bands} bands, raster has {source_codes.bands}")
    if isinstance(mapping, LutMapping):
        T = mapping.T
    data = source_codes.data
    if data.size and int(data.max()) > T:
        raise ValueError(f"source codes exceed T={T}")
    out = np.empty(data.shape, dtype=code_dtype(T))
    for c in range(mapping.bands):
        if isinstance(mapping, LutMapping):
            out[c] = mapping.tables[c][data[c].astype(np.int64)]
        else:
            v = np.floor(mapping.evaluate(data[c], c) + 0.5)
            out[c] = np.clip(v, 0, T)
    return Raster(out)


# ---------------- affine ----------------

def fit_affine_wls(x, y, weights=None) -> tuple[float, float]:
    """Weighted least squares line y ~ w x + b via the 2x2 normal equations."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    g = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(g < 0):
        raise ValueError("weights must be non-negative")
    sw = g.sum()
    if np.count_nonzero(g) < 2 or sw <= 0:
        raise SingularFitError("need at least two positively weighted pixels")
    # centred form of the normal equations, better conditioned than raw sums
    mx = (g @ x) / sw
    my = (g @ y) / sw
    dx = x - mx
    sxx = g @ (dx * dx)
    if not sxx > 1e-12 * max(sw, 1.0) * max(1.0, mx * mx):
        raise SingularFitError(
            "weighted x is constant; fall back to b = weighted mean(y - x) with w = 1")
    w = (g @ (dx * (y - my))) / sxx
    return float(w), float(my - w * mx)


def fit_affine(x, y, weights=None) -> AffineMapping:
    """Per-band WLS over (n, C) arrays; ``weights`` is (n, C) or None."""
    x = np.asarray(x)
    y = np.asarray(y)
    params = []
    for c in range(x.shape[1]):
        g = None if weights is None else weights[:, c]
        params.append(fit_affine_wls(x[:, c], y[:, c], g))
    return AffineMapping(np.asarray(params))


# ---------------- histograms ----------------

@dataclass(frozen=True)
class WeightedHistogram:
    bins: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=np.float64)
        if b.ndim != 1 or np.any(b < 0):
            raise ValueError("bins must be a 1-D array of non-negative weights")
        object.__setattr__(self, "bins", b)

    @property
    def T(self) -> int:
        return self.bins.size - 1

    @property
    def total(self) -> float:
        return float(self.bins.sum())

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.bins)

    def profile(self) -> np.ndarray:
        """Cumulative profile normalized so the last entry is exactly 1."""
        cp = self.cumulative() / self.total
        cp[-1] = 1.0
        return cp


def build_weighted_histogram(values, weights=None, T: int = 255) -> WeightedHistogram:
    v = np.asarray(values).ravel()
    g = np.ones(v.shape) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    if v.size and (v.min() < 0 or v.max() > T):
        raise ValueError(f"values must lie in 0..{T}")
    if np.any(g < 0):
        raise ValueError("weights must be non-negative")
    if not g.sum() > 0:
        raise ValueError("histogram weights sum to zero")
    return WeightedHistogram(np.bincount(v.astype(np.int64), weights=g, minlength=T + 1))


def match_distance(h_f: WeightedHistogram, h_y: WeightedHistogram) -> float:
    """L1 distance between cumulative histograms."""
    if h_f.bins.size != h_y.bins.size:
        raise ValueError("histograms differ in length")
    return float(np.abs(h_f.cumulative() - h_y.cumulative()).sum())


def fit_monotone_lut(h_x: WeightedHistogram, h_y: WeightedHistogram) -> np.ndarray:
    """Histogram-matching lookup table of length T+1.

    Each source code t maps to the smallest target code i whose cumulative
    profile reaches CP_x(t), restricted to populated target codes. Codes with
    no source mass inherit the value of the nearest populated lower code.
    """
    if h_x.bins.size != h_y.bins.size:
        raise ValueError("histograms differ in length")
    if not (h_x.total > 0 and h_y.total > 0):
        raise ValueError("both histograms need positive mass")
    T = h_x.T
    # lower profiles P(t) = mass <= t and upper tails Q(t) = mass > t, both normalized;
    # comparisons use whichever side is small so low-weight tails keep full precision
    px, qx = _profiles(h_x)
    py, qy = _profiles(h_y)
    lut = np.empty(T + 1, dtype=np.int64)
    i = int(np.argmax(h_y.bins > 0))
    # forward two-pointer sweep; every profile is monotone in t
    for t in range(T + 1):
        if px[t] <= qx[t]:
            while i < T and py[i] < px[t] * (1.0 - CP_TOL):
                i += 1
        else:
            while i < T and qy[i] > qx[t] * (1.0 + CP_TOL):
                i += 1
        lut[t] = i
    return lut


def _profiles(h: WeightedHistogram):
    b = h.bins / h.total
    lower = np.cumsum(b)
    upper = np.concatenate([np.cumsum(b[::-1])[::-1][1:], [0.0]])
    return lower, upper


def fit_luts(x, y, weights=None, T: int = 255) -> LutMapping:
    """Per-band weighted histogram matching over (n, C) code arrays."""
    x = np.asarray(x)
    y = np.asarray(y)
    tables = []
    for c in range(x.shape[1]):
        g = None if weights is None else weights[:, c]
        hx = build_weighted_histogram(x[:, c], g, T)
        hy = build_weighted_histogram(y[:, c], g, T)
        tables.append(fit_monotone_lut(hx, hy))
    return LutMapping(np.asarray(tables))


# ---------------- EM refit weights ----------------

def case1_weights(gammas, params: MixtureParams, band: int) -> np.ndarray:
    """sum_k gamma_k / (2 sigma^2_ck), the WLS weights for the affine case."""
    if params.family != GAUSSIAN:
        raise ValueError("case 1 weights need a gaussian mixture")
    g = np.asarray(gammas)
    return g @ (1.0 / (2.0 * params.scales[band]))


def case2_weights(gammas, params: MixtureParams, band: int) -> np.ndarray:
    """sum_k gamma_k / beta_ck."""
    if params.family != LAPLACE:
        raise ValueError("case 2 weights need a laplace mixture")
    g = np.asarray(gammas)
    return g @ (1.0 / params.scales[band])


def case3_weights(gammas, params: MixtureParams, band: int) -> np.ndarray:
    """gamma_1 / sigma^2_c1: only the no-change component weights the histograms."""
    if params.family != GAUSSIAN:
        raise ValueError("case 3 weights need a gaussian mixture")
    g = np.asarray(gammas)
    return g[:, 0] / params.scales[band, 0]
