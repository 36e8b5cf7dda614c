"""ROI patch grid and mask plans (random, EU-guided, AU-exclusion)."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError
from .postprocess import cc_label, percentile_filter, retain_top_ccs


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    origins: np.ndarray  # (N, 2) row0, col0 in row-major order
    image_shape: tuple[int, int]
    roi_mask: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return int(self.origins.shape[0])

    @property
    def lattice_shape(self) -> tuple[int, int]:
        H, W = self.image_shape
        return H // self.patch_size, W // self.patch_size

    @property
    def positions(self) -> np.ndarray:
        """Flat lattice index of every grid patch (used for positional encodings)."""
        P = self.patch_size
        return (self.origins[:, 0] // P) * self.lattice_shape[1] + self.origins[:, 1] // P

    def extract(self, image: np.ndarray) -> np.ndarray:
        """(N, P*P) patch vectors of ``image``."""
        P = self.patch_size
        gh, gw = self.lattice_shape
        blocks = np.asarray(image).reshape(gh, P, gw, P).transpose(0, 2, 1, 3)
        r, c = self.origins[:, 0] // P, self.origins[:, 1] // P
        return blocks[r, c].reshape(self.n, P * P)

    def roi_patches(self) -> np.ndarray:
        return self.extract(self.roi_mask.astype(np.float64)) > 0

    def scatter(self, patches: np.ndarray, indices, base: np.ndarray) -> np.ndarray:
        """Write ``patches`` (len(indices), P*P) into a copy of ``base``."""
        P = self.patch_size
        out = np.array(base, copy=True)
        for vec, i in zip(patches, np.asarray(indices, dtype=int)):
            r0, c0 = self.origins[i]
            out[r0:r0 + P, c0:c0 + P] = np.asarray(vec).reshape(P, P)
        return out

    def patch_sums(self, values: np.ndarray) -> np.ndarray:
        """Sum of ``values`` over ROI pixels of every patch."""
        masked = np.where(self.roi_mask > 0, np.asarray(values, dtype=np.float64), 0.0)
        return self.extract(masked).sum(axis=1)

    def patches_touching(self, pixel_mask: np.ndarray) -> np.ndarray:
        return np.flatnonzero(self.extract(np.asarray(pixel_mask, dtype=np.float64)).any(axis=1))


@dataclass(frozen=True)
class MaskPlan:
    masked: np.ndarray
    visible: np.ndarray
    mask_ratio: float
    forced_visible: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def digest(self) -> str:
        return hashlib.sha1(np.asarray(self.masked, dtype=np.int64).tobytes()).hexdigest()[:16]

    def to_log(self) -> dict:
        return {
            "masked": self.masked.tolist(),
            "forced_visible": self.forced_visible.tolist(),
            "digest": self.digest(),
        }


def build_patch_grid(roi_mask: np.ndarray, patch_size: int = 8) -> PatchGrid:
    roi = np.asarray(roi_mask) > 0
    H, W = roi.shape
    P = patch_size
    if H % P or W % P:
        raise ValueError(f"patch size {P} does not tile a {H}x{W} image")
    if not roi.any():
        raise DegenerateInputError("empty ROI: no patches to build")
    hit = roi.reshape(H // P, P, W // P, P).any(axis=(1, 3))
    r, c = np.nonzero(hit)
    origins = np.stack([r * P, c * P], axis=1)
    return PatchGrid(P, origins, (H, W), roi.astype(np.uint8))


def mask_count(n: int, ratio: float) -> int:
    return int(math.floor(ratio * n + 1e-9))


def _top(scores: np.ndarray, m: int, eligible: np.ndarray | None = None) -> np.ndarray:
    """Indices of the m largest scores; ties broken by ascending index."""
    idx = np.arange(scores.size)
    if eligible is not None:
        idx = idx[eligible]
    order = idx[np.lexsort((idx, -scores[idx]))]
    return np.sort(order[:m])


def _plan(n: int, masked: np.ndarray, ratio: float, forced=None) -> MaskPlan:
    vis = np.setdiff1d(np.arange(n), masked)
    forced = np.zeros(0, dtype=int) if forced is None else np.asarray(forced, dtype=int)
    return MaskPlan(masked.astype(int), vis.astype(int), ratio, forced)


def random_mask_plan(grid: PatchGrid, ratio: float, rng: np.random.Generator) -> MaskPlan:
    base = rng.random(grid.n)
    return _plan(grid.n, _top(base, mask_count(grid.n, ratio)), ratio)


def patch_eu_sum(eu_map: np.ndarray, grid: PatchGrid, i: int) -> float:
    if not 0 <= i < grid.n:
        raise IndexError(f"patch index {i} out of range for grid of {grid.n}")
    return float(grid.patch_sums(eu_map)[i])


def eu_weights(eu_sums: np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(eu_sums, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def eu_guided_plan(
    grid: PatchGrid, eu_map: np.ndarray, temperature: float, ratio: float, rng: np.random.Generator
) -> MaskPlan:
    w = eu_weights(grid.patch_sums(eu_map), temperature)
    base = rng.random(grid.n)
    return _plan(grid.n, _top(w * base, mask_count(grid.n, ratio)), ratio)


def au_candidates(
    grid: PatchGrid, au_map: np.ndarray, top_k: int = 3, connectivity: int = 8, quantile: float = 0.20
) -> tuple[np.ndarray, list]:
    """Patches touching the ``top_k`` highest-scoring AU components."""
    if top_k == 0 or not np.any(au_map > 0):
        return np.zeros(0, dtype=int), []
    filtered = percentile_filter(au_map, grid.roi_mask, quantile)
    top = retain_top_ccs(cc_label(filtered, connectivity), top_k)
    if not top:
        return np.zeros(0, dtype=int), []
    union = np.zeros(grid.image_shape, dtype=bool)
    for cc in top:
        union[cc.rows, cc.cols] = True
    return grid.patches_touching(union), top


def au_exclusion_plan(
    grid: PatchGrid,
    au_map: np.ndarray,
    ratio: float,
    rng: np.random.Generator,
    top_k: int = 3,
    connectivity: int = 8,
    quantile: float = 0.20,
) -> MaskPlan:
    forced, _ = au_candidates(grid, au_map, top_k, connectivity, quantile)
    base = rng.random(grid.n)
    eligible = np.ones(grid.n, dtype=bool)
    eligible[forced] = False
    m = min(mask_count(grid.n, ratio), int(eligible.sum()))
    return _plan(grid.n, _top(base, m, eligible), ratio, forced)
