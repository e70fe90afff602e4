"""Synthetic bitemporal scenes and brute-force oracles for the fitting routines."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import mpmath
import numpy as np
from scipy import ndimage

from .mappers import LutMapping
from .raster import Raster, RasterPair, code_dtype

CHANGE_KINDS = ("cloud_blobs", "random_replacement", "landcover_patches")


@dataclass(frozen=True)
class SceneSpec:
    size: int = 256
    bands: int = 3
    mapping: str = "gamma"                       # "gamma" or "affine"
    gammas: tuple = (0.7, 0.85, 1.3)
    gains: tuple = (0.9, 1.0, 0.95)
    offsets: tuple = (10.0, 0.0, 5.0)
    change_fraction: float = 0.25
    change_kind: str = "cloud_blobs"
    noise_sigma_nc: float = 2.0
    noise_sigma_change: float = 20.0
    seed: int = 0
    T: int = 255

    def __post_init__(self):
        if not 0 <= self.change_fraction < 1:
            raise ValueError("change_fraction must lie in [0, 1)")
        if not self.noise_sigma_nc < self.noise_sigma_change:
            raise ValueError("noise_sigma_nc must be smaller than noise_sigma_change")
        if self.change_kind not in CHANGE_KINDS:
            raise ValueError(f"change_kind must be one of {CHANGE_KINDS}")
        if self.mapping not in ("gamma", "affine"):
            raise ValueError("mapping must be 'gamma' or 'affine'")
        if self.size < 8 or self.bands < 1:
            raise ValueError("size must be >= 8 and bands >= 1")

    def band_params(self, c: int) -> tuple[float, float, float]:
        def pick(seq, default):
            return float(seq[c % len(seq)]) if seq else default
        gamma = pick(self.gammas, 1.0) if self.mapping == "gamma" else 1.0
        return gamma, pick(self.gains, 1.0), pick(self.offsets, 0.0)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SceneTruth:
    nc_mask: np.ndarray
    mapping: LutMapping
    extra: dict = field(default_factory=dict)


def forward(x, gamma, gain, offset, T):
    """True source -> target curve offset + gain T (x/T)^gamma."""
    return offset + gain * T * np.power(np.clip(x, 0, T) / T, gamma)


def inverse(y, gamma, gain, offset, T):
    u = np.clip((np.asarray(y, dtype=np.float64) - offset) / (gain * T), 0.0, 1.0)
    return T * np.power(u, 1.0 / gamma)


def value_noise(rng, size, octaves=(4, 8, 16, 32)) -> np.ndarray:
    """Smooth multi-octave noise in [0, 1]."""
    out = np.zeros((size, size))
    amp = 1.0
    for cells in octaves:
        grid = rng.random((cells + 1, cells + 1))
        up = ndimage.zoom(grid, size / (cells + 1), order=1, mode="nearest")[:size, :size]
        if up.shape != (size, size):
            up = np.pad(up, ((0, size - up.shape[0]), (0, size - up.shape[1])), mode="edge")
        out += amp * up
        amp *= 0.6
    out -= out.min()
    return out / max(out.max(), 1e-12)


def base_texture(rng, size, bands, lo, hi) -> np.ndarray:
    common = value_noise(rng, size)
    tex = np.empty((bands, size, size))
    for c in range(bands):
        b = 0.65 * common + 0.35 * value_noise(rng, size)
        b = (b - b.min()) / max(b.max() - b.min(), 1e-12)
        tex[c] = lo + (hi - lo) * b
    return tex


def _top_k(score, k, rng):
    # exactly k pixels with the highest score; random jitter breaks ties
    flat = score.ravel() + 1e-9 * rng.random(score.size)
    mask = np.zeros(score.size, dtype=bool)
    if k > 0:
        mask[np.argpartition(-flat, k - 1)[:k]] = True
    return mask.reshape(score.shape)


def _cloud_field(rng, size, k):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    alpha = np.zeros((size, size))
    while (alpha > 0.05).sum() < max(k, 1) * 1.3:
        cy, cx = rng.random(2) * size
        sy, sx = (0.04 + 0.12 * rng.random(2)) * size
        th = rng.random() * np.pi
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(th) + dy * np.sin(th)) / sx
        v = (-dx * np.sin(th) + dy * np.cos(th)) / sy
        alpha = np.maximum(alpha, np.exp(-0.5 * (u * u + v * v)))
    return alpha


def _patch_field(rng, size, k):
    prio = np.zeros((size, size))
    covered = 0
    level = 1.0
    while covered < k:
        h, w = (rng.integers(size // 16, size // 4 + 1, size=2)).tolist()
        r0 = int(rng.integers(0, size - h + 1))
        c0 = int(rng.integers(0, size - w + 1))
        block = prio[r0:r0 + h, c0:c0 + w]
        block[block == 0] = level
        level *= 0.999
        covered = int((prio > 0).sum())
    # within a rectangle keep raster order so a partially used patch stays contiguous
    order = np.arange(size * size, dtype=np.float64).reshape(size, size) / (size * size)
    return np.where(prio > 0, prio * 10 - order * 1e-3, 0.0)


def truth_lut(spec: SceneSpec) -> LutMapping:
    t = np.arange(spec.T + 1, dtype=np.float64)
    tables = [np.clip(np.floor(forward(t, *spec.band_params(c), spec.T) + 0.5), 0, spec.T)
              for c in range(spec.bands)]
    return LutMapping(np.asarray(tables, dtype=np.int64))


def generate(spec: SceneSpec) -> tuple[RasterPair, SceneTruth]:
    """Target texture, source = inverse curve of target plus noise, then injected change."""
    rng = np.random.default_rng(spec.seed)
    T, n = spec.T, spec.size
    lo, hi = 0.08 * T, 0.9 * T
    target = base_texture(rng, n, spec.bands, lo, hi)
    clean = np.stack([inverse(target[c], *spec.band_params(c), T) for c in range(spec.bands)])
    source = clean + rng.normal(0.0, spec.noise_sigma_nc, clean.shape) if spec.noise_sigma_nc > 0 else clean

    k = int(round(spec.change_fraction * n * n))
    change = np.zeros((n, n), dtype=bool)
    if k > 0:
        if spec.change_kind == "random_replacement":
            change = _top_k(np.zeros((n, n)), k, rng)
            repl = rng.uniform(0, T, (spec.bands, k))
            source[:, change] = repl + rng.normal(0.0, spec.noise_sigma_change, repl.shape)
        elif spec.change_kind == "cloud_blobs":
            alpha = _cloud_field(rng, n, k)
            change = _top_k(alpha, k, rng)
            a = np.clip(0.4 + alpha[change], 0.4, 1.0)
            cloud = T * (0.93 + 0.05 * rng.random(spec.bands))[:, None]
            source[:, change] = ((1 - a) * source[:, change] + a * cloud
                                 + rng.normal(0.0, spec.noise_sigma_change, (spec.bands, k)))
        else:
            change = _top_k(_patch_field(rng, n, k), k, rng)
            other = base_texture(rng, n, spec.bands, lo, hi)
            other = np.stack([inverse(other[c], *spec.band_params(c), T) for c in range(spec.bands)])
            source[:, change] = other[:, change] + rng.normal(
                0.0, spec.noise_sigma_change, (spec.bands, k))

    dt = code_dtype(T)
    src = np.clip(np.floor(source + 0.5), 0, T).astype(dt)
    tgt = np.clip(np.floor(target + 0.5), 0, T).astype(dt)
    pair = RasterPair(Raster(src), Raster(tgt), np.ones((n, n), dtype=bool))
    return pair, SceneTruth(~change, truth_lut(spec), {"clean_source": clean})


def generate_changedet_scene(seed: int, size: int = 128, change_fraction: float = 0.12,
                             n_buildings: int = 10, n_pseudo: int = 4):
    """Radiometric pair plus building predictions carrying pseudo-change.

    Real building changes sit on the radiometrically changed patches. Predictions
    add boundary jitter and hallucinated buildings in unchanged terrain.
    """
    spec = SceneSpec(size=size, change_kind="landcover_patches",
                     change_fraction=change_fraction, seed=seed)
    pair, truth = generate(spec)
    rng = np.random.default_rng(seed + 10_000)
    changed = ~truth.nc_mask
    stable = np.zeros((size, size), dtype=bool)
    for _ in range(n_buildings):
        h, w = rng.integers(size // 20, size // 8 + 1, size=2)
        r0, c0 = rng.integers(0, size - h), rng.integers(0, size - w)
        stable[r0:r0 + h, c0:c0 + w] = True
    stable &= ~ndimage.binary_dilation(changed, iterations=2)
    src_truth = stable.copy()
    tgt_truth = stable | changed

    def jitter(m):
        m = m.copy()
        grow = ndimage.binary_dilation(m) & (rng.random(m.shape) < 0.3)
        shrink = m & ~ndimage.binary_erosion(m) & (rng.random(m.shape) < 0.3)
        return (m | grow) & ~shrink

    src_pred, tgt_pred = jitter(src_truth), jitter(tgt_truth)
    pseudo = np.zeros((size, size), dtype=bool)
    for i in range(n_pseudo):
        h, w = rng.integers(size // 16, size // 8 + 1, size=2)
        r0, c0 = rng.integers(0, size - h), rng.integers(0, size - w)
        block = np.zeros_like(pseudo)
        block[r0:r0 + h, c0:c0 + w] = True
        block &= truth.nc_mask
        pseudo |= block
        if i % 2:
            src_pred |= block
        else:
            tgt_pred |= block
    return {
        "pair": pair,
        "truth": truth,
        "source_pred": src_pred,
        "target_pred": tgt_pred,
        "truth_change": src_truth ^ tgt_truth,
        "pseudo_change": pseudo,
    }


# ---------------- oracles ----------------

MAX_ORACLE_T = 8


def weighted_l1(lut, x, y, weights) -> float:
    lut = np.asarray(lut)
    return float(np.sum(np.asarray(weights, dtype=np.float64)
                        * np.abs(np.asarray(y) - lut[np.asarray(x)])))


def oracle_monotone_lut(x, y, weights, T: int):
    """Exhaustive search over every non-decreasing map {0..T} -> {0..T}."""
    if T > MAX_ORACLE_T:
        raise ValueError(f"oracle enumeration limited to T <= {MAX_ORACLE_T}")
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    g = np.asarray(weights, dtype=np.float64)
    cost = np.zeros((T + 1, T + 1))
    for t in range(T + 1):
        sel = x == t
        for v in range(T + 1):
            cost[t, v] = np.sum(g[sel] * np.abs(y[sel] - v))
    rows = np.arange(T + 1)
    best, best_lut = np.inf, None
    # sorted tuples with repetition are exactly the monotone maps (stars and bars)
    for lut in itertools.combinations_with_replacement(range(T + 1), T + 1):
        obj = cost[rows, lut].sum()
        if obj < best:
            best, best_lut = obj, lut
    return float(best), np.asarray(best_lut, dtype=np.int64)


def oracle_wls(x, y, weights, dps: int = 50) -> tuple[float, float]:
    """Weighted normal equations solved by Cramer's rule in extended precision."""
    with mpmath.workdps(dps):
        sw = sx = sy = sxx = sxy = mpmath.mpf(0)
        for xi, yi, gi in zip(np.asarray(x, float), np.asarray(y, float), np.asarray(weights, float)):
            xi, yi, gi = mpmath.mpf(xi), mpmath.mpf(yi), mpmath.mpf(gi)
            sw += gi
            sx += gi * xi
            sy += gi * yi
            sxx += gi * xi * xi
            sxy += gi * xi * yi
        det = sxx * sw - sx * sx
        if det == 0 or abs(det) < mpmath.mpf(10) ** (-dps // 2) * (sxx * sw):
            raise ZeroDivisionError("singular weighted normal equations")
        w = (sxy * sw - sx * sy) / det
        b = (sxx * sy - sx * sxy) / det
        return float(w), float(b)


def oracle_match_distance(values_f, values_y, weights, T: int, check_sorted: bool = True) -> float:
    """sum g |y - f| over co-sorted sequences."""
    f = np.asarray(values_f, dtype=np.int64)
    y = np.asarray(values_y, dtype=np.int64)
    g = np.asarray(weights, dtype=np.float64)
    if check_sorted and (np.any(np.diff(f) < 0) or np.any(np.diff(y) < 0)):
        raise ValueError("sequences must both be non-decreasing (colour sort assumption)")
    if f.size and (min(f.min(), y.min()) < 0 or max(f.max(), y.max()) > T):
        raise ValueError(f"values must lie in 0..{T}")
    return float(np.sum(g * np.abs(y - f)))


def sort_assumption_instance(rng, T: int, n: int, weight_denominator: int | None = None):
    """Random (x, y, g) whose y is a monotone function of x.

    With ``weight_denominator`` weights are multiples of 1/denominator so sums are exact.
    """
    x = rng.integers(0, T + 1, size=n)
    m = np.sort(rng.integers(0, T + 1, size=T + 1))
    y = m[x]
    if weight_denominator:
        g = rng.integers(1, 4 * weight_denominator + 1, size=n) / weight_denominator
    else:
        g = rng.uniform(0.05, 5.0, size=n)
    return x, y, g
