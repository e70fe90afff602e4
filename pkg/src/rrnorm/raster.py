"""Multi-band rasters, 0..T quantization and the RRNR container format."""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

MAGIC = b"RRNR"

DTYPES = {
    "u8": np.dtype("<u1"),
    "u16": np.dtype("<u2"),
    "f32": np.dtype("<f4"),
}


class RasterFormatError(ValueError):
    """Base class for RRNR decoding problems."""


class BadMagic(RasterFormatError):
    pass


class TruncatedPayload(RasterFormatError):
    pass


class HeaderMismatch(RasterFormatError):
    pass


class InvalidHeader(RasterFormatError):
    pass


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, dt in DTYPES.items():
        if dtype == dt or dtype == dt.newbyteorder("="):
            return name
    raise ValueError(f"unsupported raster dtype {dtype}")


@dataclass(frozen=True)
class Raster:
    """Band-sequential sample array of shape (bands, height, width)."""

    data: np.ndarray
    nodata: Optional[float] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(f"raster data must be 3-D (bands, height, width), got shape {data.shape}")
        dtype_name(data.dtype)
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def dtype(self) -> str:
        return dtype_name(self.data.dtype)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def nodata_mask(self) -> np.ndarray:
        """(height, width) mask of pixels holding the nodata sentinel in any band."""
        if self.nodata is None:
            return np.zeros((self.height, self.width), dtype=bool)
        if isinstance(self.nodata, float) and math.isnan(self.nodata):
            return np.isnan(self.data).any(axis=0)
        return (self.data == self.data.dtype.type(self.nodata)).any(axis=0)


@dataclass(frozen=True)
class RasterPair:
    source: Raster
    target: Raster
    valid_mask: np.ndarray

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ValueError(f"source {self.source.shape} and target {self.target.shape} differ in shape")
        mask = np.asarray(self.valid_mask, dtype=bool)
        if mask.shape != self.source.shape[1:]:
            raise ValueError("valid_mask must be (height, width)")
        if not mask.any():
            raise ValueError("overlap set is empty")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "valid_mask", mask)

    @classmethod
    def from_rasters(cls, source: Raster, target: Raster, valid_mask=None) -> "RasterPair":
        """Build the pair with the overlap set excluding nodata (and NaN) pixels of either raster."""
        if source.shape != target.shape:
            raise ValueError(f"source {source.shape} and target {target.shape} differ in shape")
        mask = ~(source.nodata_mask() | target.nodata_mask())
        for r in (source, target):
            if r.data.dtype.kind == "f":
                mask &= np.isfinite(r.data).all(axis=0)
        if valid_mask is not None:
            mask &= np.asarray(valid_mask, dtype=bool)
        return cls(source, target, mask)

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())

    def swapped(self) -> "RasterPair":
        return RasterPair(self.target, self.source, self.valid_mask)

    def pixels(self) -> tuple[np.ndarray, np.ndarray]:
        """(n, C) source and target samples over the overlap set, row-major pixel order."""
        m = self.valid_mask
        return self.source.data[:, m].T, self.target.data[:, m].T


@dataclass(frozen=True)
class QuantizationSpec:
    mins: tuple
    maxs: tuple
    T: int = 255

    def __post_init__(self):
        if len(self.mins) != len(self.maxs):
            raise ValueError("mins and maxs must have one entry per band")
        if not 1 <= self.T <= 65535:
            raise ValueError("T must lie in 1..65535")

    @property
    def bands(self) -> int:
        return len(self.mins)

    @property
    def constant_bands(self) -> list[int]:
        return [c for c, (lo, hi) in enumerate(zip(self.mins, self.maxs)) if not hi > lo]

    @classmethod
    def from_raster(cls, raster: Raster, mask=None, T: int = 255) -> "QuantizationSpec":
        """Per-band min/max over the masked pixels (the overlap set when given)."""
        if mask is None:
            mask = ~raster.nodata_mask()
        vals = raster.data[:, np.asarray(mask, dtype=bool)].astype(np.float64)
        if vals.shape[1] == 0:
            raise ValueError("no pixels to derive a quantization range from")
        return cls(tuple(float(v) for v in vals.min(axis=1)),
                   tuple(float(v) for v in vals.max(axis=1)), T)

    def to_json(self) -> dict:
        return {"mins": list(self.mins), "maxs": list(self.maxs), "T": self.T}

    @classmethod
    def from_json(cls, d: dict) -> "QuantizationSpec":
        return cls(tuple(d["mins"]), tuple(d["maxs"]), int(d["T"]))


def code_dtype(T: int):
    return np.uint8 if T <= 255 else np.uint16


def quantize(raster: Raster, spec: QuantizationSpec, mask=None) -> Raster:
    """Map samples to integer codes round(T (x - min) / (max - min)) clamped to [0, T].

    Pixels outside ``mask`` (nodata) get code 0; callers keep the mask alongside.
    Constant bands become all-zero codes and raise a ``RuntimeWarning``.
    """
    if spec.bands != raster.bands:
        raise ValueError(f"spec covers {spec.bands} bands, raster has {raster.bands}")
    if mask is None:
        mask = ~raster.nodata_mask()
    mask = np.asarray(mask, dtype=bool)
    x = raster.data.astype(np.float64)
    bad = np.isnan(x) & mask[None]
    if bad.any():
        c, i, j = (int(v[0]) for v in np.nonzero(bad))
        raise ValueError(f"NaN sample at band {c}, row {i}, col {j}")
    codes = np.zeros(raster.shape, dtype=code_dtype(spec.T))
    for c in range(raster.bands):
        lo, hi = spec.mins[c], spec.maxs[c]
        if not hi > lo:
            warnings.warn(f"band {c} is constant; coded as all zeros", RuntimeWarning, stacklevel=2)
            continue
        v = np.floor(spec.T * (x[c] - lo) / (hi - lo) + 0.5)
        v = np.clip(np.where(mask, v, 0.0), 0, spec.T)
        codes[c] = v.astype(codes.dtype)
    return Raster(codes)


def dequantize(codes: Raster, spec: QuantizationSpec, dtype=np.float32) -> Raster:
    """Inverse of :func:`quantize`: min + code (max - min) / T."""
    if spec.bands != codes.bands:
        raise ValueError(f"spec covers {spec.bands} bands, codes have {codes.bands}")
    if codes.data.size and codes.data.max() > spec.T:
        raise ValueError(f"code {int(codes.data.max())} exceeds T={spec.T}")
    lo = np.asarray(spec.mins, dtype=np.float64)[:, None, None]
    hi = np.asarray(spec.maxs, dtype=np.float64)[:, None, None]
    vals = lo + codes.data.astype(np.float64) * (hi - lo) / spec.T
    return Raster(vals.astype(dtype))


def cast_like(values: Raster, dtype: str, nodata=None, mask=None) -> Raster:
    """Round/clip a floating raster into an integer dtype (or pass through f32)."""
    dt = DTYPES[dtype]
    x = values.data.astype(np.float64)
    if dt.kind == "u":
        info = np.iinfo(dt)
        x = np.clip(np.floor(x + 0.5), info.min, info.max)
    out = x.astype(dt)
    if mask is not None and nodata is not None:
        out = np.where(np.asarray(mask, dtype=bool)[None], out, dt.type(nodata))
    return Raster(out, nodata=nodata if mask is not None else None)


def mask_to_raster(mask: np.ndarray) -> Raster:
    return Raster(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)[None])


def raster_to_mask(raster: Raster) -> np.ndarray:
    if raster.bands != 1:
        raise ValueError(f"mask raster must have one band, got {raster.bands}")
    return raster.data[0] > 0


# ---------------- RRNR container ----------------

def encode_raster(raster: Raster) -> bytes:
    header = {
        "width": raster.width,
        "height": raster.height,
        "bands": raster.bands,
        "dtype": raster.dtype,
    }
    if raster.nodata is not None:
        header["nodata"] = raster.nodata
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = raster.data.astype(DTYPES[raster.dtype], copy=False).tobytes(order="C")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload


def decode_raster(buf: bytes) -> Raster:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {bytes(buf[:4])!r}")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise TruncatedPayload(f"header declares {hlen} bytes, only {len(buf) - 8} present")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidHeader(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise InvalidHeader("header must be a JSON object")
    missing = {"width", "height", "bands", "dtype"} - header.keys()
    if missing:
        raise InvalidHeader(f"header missing keys {sorted(missing)}")
    if header["dtype"] not in DTYPES:
        raise InvalidHeader(f"unknown dtype {header['dtype']!r}")
    w, h, c = header["width"], header["height"], header["bands"]
    if not all(isinstance(v, int) and v > 0 for v in (w, h, c)):
        raise InvalidHeader("width, height and bands must be positive integers")
    dt = DTYPES[header["dtype"]]
    expected = w * h * c * dt.itemsize
    payload = buf[8 + hlen:]
    if len(payload) < expected:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, header requires {expected}")
    if len(payload) > expected:
        raise HeaderMismatch(f"payload has {len(payload)} bytes, header requires {expected}")
    data = np.frombuffer(payload, dtype=dt).reshape(c, h, w).astype(dt.newbyteorder("="))
    nodata = header.get("nodata")
    if nodata is not None and dt.kind == "f":
        nodata = float(nodata)
    return Raster(data, nodata=nodata)


def read_raster(path) -> Raster:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != MAGIC:
            raise BadMagic(f"{path}: not an RRNR file")
        return decode_raster(head + fh.read())


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_raster(raster: Raster, path) -> None:
    atomic_write_bytes(path, encode_raster(raster))


def quantize_pair(pair: RasterPair, T: int = 255):
    """Quantize both rasters with ranges taken over the overlap set.

    Returns ``(codes_pair, source_spec, target_spec)``.
    """
    qs = QuantizationSpec.from_raster(pair.source, pair.valid_mask, T)
    qt = QuantizationSpec.from_raster(pair.target, pair.valid_mask, T)
    codes = RasterPair(quantize(pair.source, qs, pair.valid_mask),
                       quantize(pair.target, qt, pair.valid_mask), pair.valid_mask)
    return codes, qs, qt
