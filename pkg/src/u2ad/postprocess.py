"""Map postprocessing shared by detection and the AU-exclusion masking stage."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError


@dataclass(frozen=True)
class ConnectedComponent:
    rows: np.ndarray
    cols: np.ndarray
    score: float
    bbox: tuple[int, int, int, int]  # row0, col0, row1 (excl), col1 (excl)

    @property
    def size(self) -> int:
        return int(self.rows.size)

    def mask(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        out[self.rows, self.cols] = True
        return out


def quantile_threshold(values: np.ndarray, q: float) -> float:
    """Order-statistic threshold: the value at 0-based rank floor(q * n).

    Zeroing everything strictly below it removes the bottom floor(q * n) values
    unless ties straddle the cut.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise DegenerateInputError("quantile of an empty set")
    k = min(int(math.floor(q * v.size + 1e-9)), v.size - 1)
    return float(v[k])


def percentile_filter(ano_map: np.ndarray, roi_mask: np.ndarray, q: float = 0.20) -> np.ndarray:
    roi = np.asarray(roi_mask, dtype=bool)
    if not roi.any():
        raise DegenerateInputError("percentile_filter needs a nonempty ROI")
    out = np.array(ano_map, dtype=np.float64, copy=True)
    thr = quantile_threshold(out[roi], q)
    out[roi & (out < thr)] = 0.0
    return out


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def cc_label(values: np.ndarray, connectivity: int = 8) -> list[ConnectedComponent]:
    """Connected components of ``values > 0`` scored by their pixel sums."""
    values = np.asarray(values, dtype=np.float64)
    labels, n = ndimage.label(values > 0, structure=_structure(connectivity))
    if n == 0:
        return []
    slices = ndimage.find_objects(labels)
    out = []
    for lab, sl in enumerate(slices, start=1):
        local = labels[sl] == lab
        r, c = np.nonzero(local)
        r = r + sl[0].start
        c = c + sl[1].start
        out.append(
            ConnectedComponent(
                rows=r,
                cols=c,
                score=float(values[r, c].sum()),
                bbox=(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop),
            )
        )
    return out


def retain_top_ccs(ccs: list[ConnectedComponent], k: int = 3) -> list[ConnectedComponent]:
    """Top-k by score, descending; ties go to the smaller bounding-box origin."""
    ranked = sorted(ccs, key=lambda cc: (-cc.score, cc.bbox[0], cc.bbox[1]))
    return ranked[:k]


def components_to_map(values: np.ndarray, ccs: list[ConnectedComponent]) -> np.ndarray:
    out = np.zeros_like(np.asarray(values, dtype=np.float64))
    for cc in ccs:
        out[cc.rows, cc.cols] = values[cc.rows, cc.cols]
    return out
