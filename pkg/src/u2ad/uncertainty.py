"""Monte-Carlo masked reconstruction: aleatoric (AU) and epistemic (EU) maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import IncompleteEnsembleError, RunawaySamplingError
from .patching import MaskPlan, PatchGrid, mask_count, random_mask_plan

# predictor(patches (N, P*P), positions (N,), plans) -> list of (len(plan.masked), P*P) arrays
Predictor = Callable[[np.ndarray, np.ndarray, Sequence[MaskPlan]], list]


@dataclass
class McEnsemble:
    samples: list[list[np.ndarray]]  # samples[i] = reconstructions of patch i
    counts: np.ndarray
    K: int
    passes: int
    plans: list[MaskPlan] = field(default_factory=list, repr=False)


@dataclass
class UncertaintyMaps:
    au: np.ndarray
    eu: np.ndarray
    mean: np.ndarray
    passes: int = 0


class ModelPredictor:
    """Wraps a MaskedReconstructor for batched no-grad inference."""

    def __init__(self, model, batch_size: int = 128):
        self.model = model
        self.batch_size = batch_size

    def predict_many(self, jobs):
        """jobs: list of (patches, positions, plan); returns pixel predictions per job."""
        out = []
        was_training = self.model.training
        self.model.eval()
        with torch.no_grad():
            for s in range(0, len(jobs), self.batch_size):
                pix, _ = self.model.reconstruct_batch(jobs[s:s + self.batch_size])
                out.extend(p.detach().cpu().double().numpy() for p in pix)
        self.model.train(was_training)
        return out

    def __call__(self, patches, positions, plans):
        return self.predict_many([(patches, positions, p) for p in plans])


def as_predictor(obj) -> Predictor:
    if isinstance(obj, torch.nn.Module):
        return ModelPredictor(obj)
    return obj


def model_input(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """ROI-masked patch vectors fed to the reconstructor."""
    return grid.extract(np.where(grid.roi_mask > 0, image, 0.0))


def draw_plans(grid: PatchGrid, ratio: float, K: int, rng: np.random.Generator) -> list[MaskPlan]:
    """Random plans until every patch has been masked at least K times."""
    cap = int(math.ceil(100 * K / ratio))
    counts = np.zeros(grid.n, dtype=int)
    plans = []
    if mask_count(grid.n, ratio) == 0:
        raise RunawaySamplingError(f"mask ratio {ratio} masks no patch of a {grid.n}-patch grid")
    while counts.min() < K:
        if len(plans) >= cap:
            raise RunawaySamplingError(f"coverage K={K} not reached within {cap} passes")
        plan = random_mask_plan(grid, ratio, rng)
        counts[plan.masked] += 1
        plans.append(plan)
    return plans


def _collect(grid: PatchGrid, plans, preds, K) -> McEnsemble:
    samples: list[list[np.ndarray]] = [[] for _ in range(grid.n)]
    for plan, pred in zip(plans, preds):
        pred = np.asarray(pred, dtype=np.float64)
        for row, i in enumerate(plan.masked):
            samples[i].append(pred[row])
    counts = np.array([len(s) for s in samples])
    return McEnsemble(samples, counts, K, len(plans), plans)


def mc_sample(predictor, image, grid: PatchGrid, ratio: float, K: int, rng: np.random.Generator) -> McEnsemble:
    if K < 2:
        raise ValueError("K must be >= 2 to estimate a variance")
    predictor = as_predictor(predictor)
    plans = draw_plans(grid, ratio, K, rng)
    preds = predictor(model_input(image, grid), grid.positions, plans)
    return _collect(grid, plans, preds, K)


def mc_sample_many(model, images, grids, ratio: float, K: int, rngs) -> list[McEnsemble]:
    """mc_sample over several images with forward passes batched across them."""
    if K < 2:
        raise ValueError("K must be >= 2 to estimate a variance")
    predictor = as_predictor(model)
    all_plans = [draw_plans(g, ratio, K, r) for g, r in zip(grids, rngs)]
    inputs = [model_input(im, g) for im, g in zip(images, grids)]
    if hasattr(predictor, "predict_many"):
        jobs = [(inp, g.positions, p) for inp, g, plans in zip(inputs, grids, all_plans) for p in plans]
        flat = predictor.predict_many(jobs)
    else:
        flat = [y for inp, g, plans in zip(inputs, grids, all_plans) for y in predictor(inp, g.positions, plans)]
    out, pos = [], 0
    for g, plans in zip(grids, all_plans):
        out.append(_collect(g, plans, flat[pos:pos + len(plans)], K))
        pos += len(plans)
    return out


def _subsample(ens: McEnsemble, K: int, rng: np.random.Generator) -> np.ndarray:
    """(N, K, P*P) array of K randomly chosen reconstructions per patch."""
    if ens.counts.min(initial=K) < K:
        raise IncompleteEnsembleError(
            f"patch {int(np.argmin(ens.counts))} has {int(ens.counts.min())} < K={K} reconstructions"
        )
    chosen = []
    for s in ens.samples:
        pick = rng.choice(len(s), size=K, replace=False)
        chosen.append(np.stack([s[j] for j in pick]))
    return np.stack(chosen)


def _maps_from(chosen: np.ndarray, x: np.ndarray, grid: PatchGrid) -> UncertaintyMaps:
    mu = chosen.mean(axis=1)
    var = chosen.var(axis=1, ddof=1)
    roi = grid.roi_mask > 0
    zero = np.zeros(grid.image_shape)
    mean_img = grid.scatter(mu, np.arange(grid.n), zero)
    var_img = grid.scatter(var, np.arange(grid.n), zero)
    x = np.asarray(x, dtype=np.float64)
    au = np.where(roi, np.abs(x - mean_img), 0.0)
    eu = np.where(roi, var_img, 0.0)
    return UncertaintyMaps(au=au, eu=eu, mean=mean_img)


def estimate_maps(ens: McEnsemble, x, grid: PatchGrid, K: int, rng: np.random.Generator) -> UncertaintyMaps:
    maps = _maps_from(_subsample(ens, K, rng), x, grid)
    maps.passes = ens.passes
    return maps


def mean_reconstruction(ens: McEnsemble, grid: PatchGrid, K: int, rng: np.random.Generator) -> np.ndarray:
    chosen = _subsample(ens, K, rng)
    return grid.scatter(chosen.mean(axis=1), np.arange(grid.n), np.zeros(grid.image_shape))


def uncertainty_maps(model, images, grids, ratio: float, K: int, rng: np.random.Generator) -> list[UncertaintyMaps]:
    """Convenience: MC sampling plus map estimation for a list of images."""
    rngs = spawn(rng, len(images))
    ensembles = mc_sample_many(model, images, grids, ratio, K, rngs)
    return [estimate_maps(e, im, g, K, r) for e, im, g, r in zip(ensembles, images, grids, rngs)]


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return [np.random.default_rng(int(s)) for s in seeds]
