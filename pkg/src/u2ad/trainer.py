"""Pretraining, two-stage uncertainty-guided adaptation, dataset strategies."""

from __future__ import annotations

import copy
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .config import RunConfig, ScheduleConfig
from .errors import ConfigError, TrainingDivergence
from .model import MaskedReconstructor, init_model, patch_edge_targets, recon_loss
from .patching import (
    MaskPlan,
    PatchGrid,
    au_exclusion_plan,
    build_patch_grid,
    eu_guided_plan,
    random_mask_plan,
)
from .phantom import CaseRecord, augment
from .uncertainty import UncertaintyMaps, model_input, uncertainty_maps

log = logging.getLogger(__name__)


class Strategy(enum.IntEnum):
    PRETRAIN_ONLY = 1
    ADAPT_ONLY = 2
    PRETRAIN_ADAPT = 3


@dataclass
class History:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def losses(self, phase: str | None = None) -> list[float]:
        return [r["loss"] for r in self.records if r.get("kind") == "epoch" and phase in (None, r["phase"])]

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r.get("kind") == kind]


def lr_at(schedule: ScheduleConfig, epoch: int) -> float:
    return schedule.lr * schedule.lr_gamma ** (epoch // schedule.lr_step)


def make_optimizer(model: torch.nn.Module, schedule: ScheduleConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=schedule.lr, betas=tuple(schedule.betas))


def train_step(model: MaskedReconstructor, optimizer, items, edge_weight: float, target_hook=None) -> float:
    """One Adam update on the dual loss over the masked patches of ``items``.

    items: list of (input patches (N, P*P), positions (N,), plan).
    target_hook, if given, receives the target tensor before the loss (used to
    audit which pixels carry gradient).
    """
    items = [it for it in items if len(it[2].masked) and len(it[2].visible)]
    if not items:
        return 0.0
    P = model.cfg.patch_size
    pix, edge = model.reconstruct_batch(items)
    targets = np.concatenate([p[plan.masked] for p, _, plan in items])
    edges = patch_edge_targets(targets, P)
    tgt = torch.as_tensor(targets, dtype=model.dtype, device=model.device)
    etgt = torch.as_tensor(edges, dtype=model.dtype, device=model.device)
    if target_hook is not None:
        tgt = target_hook(tgt, items)
    loss = recon_loss(tgt, torch.cat(pix), etgt, torch.cat(edge), model.cfg.edge_weight if edge_weight is None else edge_weight)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergence(f"non-finite loss {value}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return value


def _training_image(case: CaseRecord, schedule: ScheduleConfig, use_aug: bool, rng) -> np.ndarray:
    if use_aug:
        return augment(case.image, rng, noise_variance=schedule.augment_noise_variance)
    return case.image


def _run_epoch(model, optimizer, cases, grids, plans, schedule, use_aug, rng, target_hook=None) -> float:
    order = rng.permutation(len(cases))
    losses, weights = [], []
    for s in range(0, len(order), schedule.batch_size):
        idx = order[s:s + schedule.batch_size]
        items = []
        for i in idx:
            img = _training_image(cases[i], schedule, use_aug, rng)
            items.append((model_input(img, grids[i]), grids[i].positions, plans[i]))
        losses.append(train_step(model, optimizer, items, model.cfg.edge_weight, target_hook))
        weights.append(len(idx))
    return float(np.average(losses, weights=weights)) if losses else 0.0


def pretrain(
    cases: list[CaseRecord],
    cfg: RunConfig,
    rng: np.random.Generator,
    model: MaskedReconstructor | None = None,
    history: History | None = None,
    init_rng: np.random.Generator | None = None,
) -> tuple[MaskedReconstructor, History]:
    """Random-masking pretraining on healthy cases."""
    if not cases:
        raise ConfigError("pretraining needs a nonempty healthy dataset")
    if any(c.is_anomalous for c in cases):
        raise ConfigError("pretraining data must be healthy")
    sched, unc = cfg.schedule, cfg.uncertainty
    history = history or History()
    if model is None:
        model = init_model(cfg.model, init_rng or rng, cases[0].image.shape)
    optimizer = make_optimizer(model, sched)
    grids = [build_patch_grid(c.roi_mask, cfg.model.patch_size) for c in cases]
    model.train()
    for epoch in range(sched.pretrain_epochs):
        lr = lr_at(sched, epoch)
        for g in optimizer.param_groups:
            g["lr"] = lr
        plans = [random_mask_plan(g, unc.mask_ratio, rng) for g in grids]
        loss = _run_epoch(model, optimizer, cases, grids, plans, sched, sched.augment, rng)
        history.append({"kind": "epoch", "phase": "pretrain", "epoch": epoch, "lr": lr, "loss": loss})
        log.info("pretrain epoch %d loss %.5f", epoch, loss)
    return model, history


@dataclass
class AdaptHooks:
    """Optional callbacks used by the CLI for persistence."""

    on_refresh: Callable[[int, str, list[UncertaintyMaps]], None] | None = None
    on_checkpoint: Callable[[int, MaskedReconstructor, object, np.random.Generator], None] | None = None
    on_record: Callable[[dict], None] | None = None
    checkpoint_epochs: set[int] | None = None
    # receives (target tensor, items, stage) inside every adaptation step
    target_hook: Callable | None = None


def _roi_stats(case: CaseRecord, maps: UncertaintyMaps) -> dict:
    roi = case.roi_mask > 0
    out = {"eu_roi": float(maps.eu[roi].mean()), "au_roi": float(maps.au[roi].mean())}
    if case.anomaly_mask is not None and case.anomaly_mask.any():
        inside = case.anomaly_mask > 0
        outside = roi & ~inside
        out["au_in"] = float(maps.au[inside].mean())
        out["au_out"] = float(maps.au[outside].mean())
    return out


def _refresh_record(epoch, stage, cases, maps) -> dict:
    stats = [_roi_stats(c, m) for c, m in zip(cases, maps)]
    rec = {
        "kind": "refresh",
        "phase": "adapt",
        "epoch": epoch,
        "stage": stage,
        "mean_eu": float(np.mean([s["eu_roi"] for s in stats])),
        "mean_au": float(np.mean([s["au_roi"] for s in stats])),
    }
    anom = [s for s in stats if "au_in" in s]
    if anom:
        rec["au_in"] = float(np.mean([s["au_in"] for s in anom]))
        rec["au_out"] = float(np.mean([s["au_out"] for s in anom]))
        rec["au_ratio"] = rec["au_in"] / rec["au_out"] if rec["au_out"] > 0 else float("inf")
    return rec


def adapt(
    model: MaskedReconstructor,
    cases: list[CaseRecord],
    cfg: RunConfig,
    rng: np.random.Generator,
    history: History | None = None,
    hooks: AdaptHooks | None = None,
    start_epoch: int = 0,
    optimizer=None,
    eu_stub: Callable | None = None,
) -> tuple[MaskedReconstructor, History]:
    """Stage 1 EU-guided masking, then stage 2 AU-exclusion masking.

    Maps are refreshed at stage entry and every ``refresh_interval`` epochs
    within a stage, always on the un-augmented images.  ``start_epoch`` with a
    restored optimizer and rng resumes at a refresh epoch.
    """
    if not cases:
        raise ConfigError("adaptation needs a nonempty target dataset")
    sched, unc, det = cfg.schedule, cfg.uncertainty, cfg.detection
    history = history or History()
    hooks = hooks or AdaptHooks()
    optimizer = optimizer or make_optimizer(model, sched)
    grids = [build_patch_grid(c.roi_mask, cfg.model.patch_size) for c in cases]
    clean = [c.image for c in cases]
    Q = unc.refresh_interval
    s1 = sched.stage1_epochs
    maps: list[UncertaintyMaps] | None = None

    def record(rec):
        history.append(rec)
        if hooks.on_record:
            hooks.on_record(rec)

    def refresh(epoch, stage):
        nonlocal maps
        if eu_stub is not None:
            maps = [eu_stub(c, g) for c, g in zip(cases, grids)]
        else:
            maps = uncertainty_maps(model, clean, grids, unc.mask_ratio, unc.mc_samples, rng)
        record(_refresh_record(epoch, stage, cases, maps))
        if hooks.on_refresh:
            hooks.on_refresh(epoch, stage, maps)

    model.train()
    for epoch in range(start_epoch, sched.adapt_epochs):
        stage = 1 if epoch < s1 else 2
        rel = epoch if stage == 1 else epoch - s1
        if rel % Q == 0 or maps is None:
            if hooks.on_checkpoint and (hooks.checkpoint_epochs is None or epoch in hooks.checkpoint_epochs):
                hooks.on_checkpoint(epoch, model, optimizer, rng)
            refresh(epoch, stage)
        lr = lr_at(sched, epoch)
        for g in optimizer.param_groups:
            g["lr"] = lr
        if stage == 1:
            plans = [eu_guided_plan(g, m.eu, unc.temperature, unc.mask_ratio, rng) for g, m in zip(grids, maps)]
        else:
            plans = [
                au_exclusion_plan(
                    g, m.au, unc.mask_ratio, rng, unc.top_k, det.connectivity, unc.exclusion_quantile
                )
                for g, m in zip(grids, maps)
            ]
        hook = None
        if hooks.target_hook is not None:
            hook = lambda tgt, items, _s=stage: hooks.target_hook(tgt, items, _s)  # noqa: E731
        loss = _run_epoch(model, optimizer, cases, grids, plans, sched, sched.adapt_augment, rng, hook)
        rec = {"kind": "epoch", "phase": "adapt", "epoch": epoch, "stage": stage, "lr": lr, "loss": loss}
        if stage == 2:
            rec["plans"] = [p.to_log() for p in plans]
        else:
            rec["plan_digests"] = [p.digest() for p in plans]
        record(rec)
        log.info("adapt epoch %d stage %d loss %.5f", epoch, stage, loss)

    if hooks.on_checkpoint and (hooks.checkpoint_epochs is None or sched.adapt_epochs in hooks.checkpoint_epochs):
        hooks.on_checkpoint(sched.adapt_epochs, model, optimizer, rng)
    # audit maps of the final parameters (not used for training)
    refresh(sched.adapt_epochs, "final")
    return model, history


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "pretrain", "adapt", "detect")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def run_strategy(
    strategy: Strategy | int,
    healthy: list[CaseRecord] | None,
    target: list[CaseRecord] | None,
    cfg: RunConfig,
    seed: int,
    hooks: AdaptHooks | None = None,
    history: History | None = None,
    pretrained: MaskedReconstructor | None = None,
) -> tuple[MaskedReconstructor, History]:
    """Train per strategy; ``pretrained`` skips pretraining (it must come from the same seed)."""
    try:
        strategy = Strategy(int(strategy))
    except ValueError as exc:
        raise ConfigError(f"unknown strategy {strategy!r}") from exc
    streams = rng_streams(seed)
    history = history or History()
    if strategy in (Strategy.PRETRAIN_ONLY, Strategy.PRETRAIN_ADAPT) and not healthy and pretrained is None:
        raise ConfigError(f"strategy {int(strategy)} needs the healthy dataset")
    if strategy in (Strategy.ADAPT_ONLY, Strategy.PRETRAIN_ADAPT) and not target:
        raise ConfigError(f"strategy {int(strategy)} needs the target dataset")
    if strategy is Strategy.ADAPT_ONLY:
        model = init_model(cfg.model, streams["init"], target[0].image.shape)
    elif pretrained is not None:
        model = copy.deepcopy(pretrained)
    else:
        model, history = pretrain(healthy, cfg, streams["pretrain"], history=history, init_rng=streams["init"])
    if strategy is not Strategy.PRETRAIN_ONLY:
        model, history = adapt(model, target, cfg, streams["adapt"], history=history, hooks=hooks)
    return model, history
