"""Fusing a radiometric no-change mask with per-image class predictions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

DIRECT = "diff"
EXCLUDE = "diff-excl"
COMPONENT = "component-vote"
WINDOW = "window-vote"
MODES = (DIRECT, EXCLUDE, COMPONENT, WINDOW)

_STRUCTURE = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass
class ChangeResult:
    change_mask: np.ndarray
    strategy: str
    scores: Optional[dict] = None
    extra: dict = field(default_factory=dict)


def _aligned(*masks):
    arrs = [np.asarray(m, dtype=bool) for m in masks]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ValueError(f"mask size mismatch: {shape} vs {a.shape}")
    return arrs


def direct_difference(source_pred, target_pred) -> ChangeResult:
    s, t = _aligned(source_pred, target_pred)
    return ChangeResult(s ^ t, DIRECT)


def difference_excluding_nc(source_pred, target_pred, nc) -> ChangeResult:
    s, t, nc = _aligned(source_pred, target_pred, nc)
    return ChangeResult((s ^ t) & ~nc, EXCLUDE)


def label_components(mask, connectivity: int = 4):
    if connectivity not in _STRUCTURE:
        raise ValueError("connectivity must be 4 or 8")
    return ndimage.label(mask, structure=_STRUCTURE[connectivity])


def component_vote(source_pred, target_pred, nc, ratio_threshold: float = 0.8,
                   connectivity: int = 4) -> ChangeResult:
    """Drop each connected change component whose no-change fraction exceeds the threshold."""
    s, t, nc = _aligned(source_pred, target_pred, nc)
    xor = s ^ t
    labels, n = label_components(xor, connectivity)
    if n == 0:
        return ChangeResult(xor, COMPONENT, extra={"components": 0, "deleted": 0})
    size = np.bincount(labels.ravel(), minlength=n + 1)
    hits = np.bincount(labels.ravel(), weights=nc.ravel(), minlength=n + 1)
    frac = hits[1:] / size[1:]
    drop = np.concatenate([[True], frac > ratio_threshold])
    return ChangeResult(xor & ~drop[labels], COMPONENT,
                        extra={"components": int(n), "deleted": int(drop[1:].sum())})


def box_sum(a: np.ndarray, window) -> np.ndarray:
    """Sum of ``a`` over a clipped (wh, ww) window centred at each pixel, via a summed-area table."""
    wh, ww = window
    h, w = a.shape
    sat = np.zeros((h + 1, w + 1), dtype=np.int64 if a.dtype.kind in "bui" else np.float64)
    sat[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    ry, rx = wh // 2, ww // 2
    r0 = np.clip(np.arange(h) - ry, 0, h)
    r1 = np.clip(np.arange(h) + ry + 1, 0, h)
    c0 = np.clip(np.arange(w) - rx, 0, w)
    c1 = np.clip(np.arange(w) + rx + 1, 0, w)
    return (sat[np.ix_(r1, c1)] - sat[np.ix_(r0, c1)]
            - sat[np.ix_(r1, c0)] + sat[np.ix_(r0, c0)])


def refine_nc(nc, window=(31, 31), vote_threshold: float = 0.7, valid=None) -> np.ndarray:
    """Keep a no-change pixel only if more than ``vote_threshold`` of the valid pixels
    in its (clipped) window are no-change."""
    wh, ww = window
    if wh % 2 == 0 or ww % 2 == 0 or wh < 1 or ww < 1:
        raise ValueError(f"window dimensions must be odd, got {window}")
    nc = np.asarray(nc, dtype=bool)
    valid = np.ones_like(nc) if valid is None else np.asarray(valid, dtype=bool)
    hits = box_sum((nc & valid).astype(np.int64), window)
    total = box_sum(valid.astype(np.int64), window)
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(total > 0, hits / np.maximum(total, 1), 0.0)
    return nc & (frac > vote_threshold)


def windowed_vote_difference(source_pred, target_pred, nc, window=(31, 31),
                             vote_threshold: float = 0.7, valid=None) -> ChangeResult:
    s, t, nc = _aligned(source_pred, target_pred, nc)
    refined = refine_nc(nc, window, vote_threshold, valid)
    return ChangeResult((s ^ t) & ~refined, WINDOW, extra={"refined_nc": refined})


def score(change, truth) -> dict:
    change, truth = _aligned(change, truth)
    tp = int((change & truth).sum())
    fp = int((change & ~truth).sum())
    fn = int((~change & truth).sum())
    tn = int((~change & ~truth).sum())
    n = tp + fp + fn + tn

    def ratio(a, b):
        return a / b if b else 0.0

    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    return {
        "accuracy": ratio(tp + tn, n),
        "recall": recall,
        "precision": precision,
        "f1": ratio(2 * precision * recall, precision + recall),
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
    }


def run_strategy(mode: str, source_pred, target_pred, nc=None, truth=None, *,
                 ratio_threshold=0.8, window=(31, 31), vote_threshold=0.7,
                 connectivity=4, valid=None) -> ChangeResult:
    if mode == DIRECT:
        res = direct_difference(source_pred, target_pred)
    else:
        if nc is None:
            raise ValueError(f"mode {mode!r} needs a no-change mask")
        if mode == EXCLUDE:
            res = difference_excluding_nc(source_pred, target_pred, nc)
        elif mode == COMPONENT:
            res = component_vote(source_pred, target_pred, nc, ratio_threshold, connectivity)
        elif mode == WINDOW:
            res = windowed_vote_difference(source_pred, target_pred, nc, window, vote_threshold, valid)
        else:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if truth is not None:
        res.scores = score(res.change_mask, truth)
    return res
