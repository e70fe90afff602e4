"""No-change-set RMSE and spectral index consistency."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .raster import Raster

ROLES = ("B", "G", "R", "N")
INDICES = ("NDVI", "NDWI")


def nc_rmse(a, b, mask) -> float:
    """sqrt(mean over masked pixels of (a - b)^2)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or a.shape != m.shape:
        raise ValueError(f"misaligned inputs {a.shape}, {b.shape}, mask {m.shape}")
    count = int(m.sum())
    if count == 0:
        raise ValueError("no-change mask is empty")
    d = a[m] - b[m]
    return float(np.sqrt(np.dot(d, d) / count))


def normalized_difference(a, b):
    """(a - b) / (a + b) with zero-denominator pixels set to 0 and flagged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = a + b
    degenerate = den == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        idx = np.where(degenerate, 0.0, (a - b) / np.where(degenerate, 1.0, den))
    return idx, degenerate


def ndvi(nir, red):
    return normalized_difference(nir, red)


def ndwi(green, nir):
    return normalized_difference(green, nir)


def parse_roles(text: str | None, bands: int) -> dict:
    """'B=0,G=1,R=2,N=3' -> {'B': 0, ...}; default is B,G,R[,N] in band order."""
    if not text:
        return {r: i for i, r in enumerate(ROLES[:bands])}
    roles = {}
    for part in text.split(","):
        key, _, val = part.partition("=")
        key = key.strip().upper()
        if key not in ROLES or not val.strip().isdigit():
            raise ValueError(f"bad band role {part!r}; expected e.g. B=0,G=1,R=2,N=3")
        roles[key] = int(val)
    for k, v in roles.items():
        if v >= bands:
            raise ValueError(f"role {k} names band {v} but raster has {bands} bands")
    if len(set(roles.values())) != len(roles):
        raise ValueError("band roles must name distinct bands")
    return roles


@dataclass
class EvalReport:
    method: str = ""
    mll: float | None = None
    ncr: float | None = None
    rmse_before: dict = field(default_factory=dict)
    rmse_after: dict = field(default_factory=dict)
    pixel_counts: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "mll": self.mll,
            "ncr": self.ncr,
            "rmse_before": self.rmse_before,
            "rmse_after": self.rmse_after,
            "pixel_counts": self.pixel_counts,
            "notes": self.notes,
        }

    def csv_row(self) -> dict:
        row = {"method": self.method, "mll": self.mll, "ncr": self.ncr}
        for name in ROLES + INDICES:
            row[f"rmse_{name}_before"] = self.rmse_before.get(name)
            row[f"rmse_{name}_after"] = self.rmse_after.get(name)
        return row


CSV_COLUMNS = ["method", "mll", "ncr"] + [
    f"rmse_{name}_{when}" for name in ROLES + INDICES for when in ("before", "after")]


def to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: ("" if v is None else v) for k, v in r.csv_row().items()})
    return buf.getvalue()


def _index_rmse(src, tgt, roles, kind, mask):
    if kind == "NDVI":
        a, da = ndvi(src[roles["N"]], src[roles["R"]])
        b, db = ndvi(tgt[roles["N"]], tgt[roles["R"]])
    else:
        a, da = ndwi(src[roles["G"]], src[roles["N"]])
        b, db = ndwi(tgt[roles["G"]], tgt[roles["N"]])
    ok = mask & ~da & ~db
    return nc_rmse(a, b, ok), int((mask & (da | db)).sum())


def evaluate_pair(source: Raster, target: Raster, normalized: Raster, mask, roles=None,
                  method: str = "", mll=None, ncr=None) -> EvalReport:
    """Before/after RMSE per band role and per index over the no-change mask."""
    mask = np.asarray(mask, dtype=bool)
    if not (source.shape == target.shape == normalized.shape):
        raise ValueError("source, target and normalized rasters must share a shape")
    if roles is None:
        roles = parse_roles(None, source.bands)
    rep = EvalReport(method=method, mll=mll, ncr=ncr)
    rep.pixel_counts["nc"] = int(mask.sum())
    src = source.data.astype(np.float64)
    nrm = normalized.data.astype(np.float64)
    tgt = target.data.astype(np.float64)
    for name, c in roles.items():
        rep.rmse_before[name] = nc_rmse(src[c], tgt[c], mask)
        rep.rmse_after[name] = nc_rmse(nrm[c], tgt[c], mask)
    for kind, need in (("NDVI", ("N", "R")), ("NDWI", ("G", "N"))):
        if not all(k in roles for k in need):
            rep.notes.append(f"{kind} omitted: needs bands {'+'.join(need)}")
            continue
        rep.rmse_before[kind], deg_b = _index_rmse(src, tgt, roles, kind, mask)
        rep.rmse_after[kind], deg_a = _index_rmse(nrm, tgt, roles, kind, mask)
        rep.pixel_counts[f"{kind}_degenerate_before"] = deg_b
        rep.pixel_counts[f"{kind}_degenerate_after"] = deg_a
    return rep
