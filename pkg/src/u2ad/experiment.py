"""Desk-scale end-to-end experiment: three strategies, training trends and sweeps."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation, storage
from .config import RunConfig
from .detection import detect_cases, scores_table
from .phantom import generate_corpus
from .trainer import AdaptHooks, History, Strategy, pretrain, rng_streams, run_strategy

log = logging.getLogger(__name__)


@dataclass
class StrategyResult:
    strategy: int
    table: str
    patient: dict
    segment: dict
    localization: float
    train_seconds: float
    refresh: list[dict] = field(default_factory=list)


@dataclass
class ExperimentResult:
    strategies: dict[int, StrategyResult]
    k_sweep: list[evaluation.SweepRow]
    robustness: list[evaluation.SweepRow]
    stage1_eu: list[float]
    anomap_ratio_stage1_end: float
    anomap_ratio_final: float
    seconds: float

    def summary(self) -> dict:
        return {
            "strategies": {
                str(k): {
                    "patient": v.patient,
                    "segment": v.segment,
                    "localization": v.localization,
                    "train_seconds": v.train_seconds,
                }
                for k, v in sorted(self.strategies.items())
            },
            "stage1_mean_eu": self.stage1_eu,
            "anomap_ratio_stage1_end": self.anomap_ratio_stage1_end,
            "anomap_ratio_final": self.anomap_ratio_final,
            "k_sweep": [_row(r) for r in self.k_sweep],
            "robustness": [_row(r) for r in self.robustness],
            "seconds": self.seconds,
        }


def _row(r: evaluation.SweepRow) -> dict:
    return {
        "parameter": r.parameter,
        "value": r.value,
        "patient_f1": r.patient["f1_mean"],
        "segment_f1": r.segment["f1_mean"],
        "localization": r.localization,
        "seconds_per_image": r.seconds_per_image,
    }


def detect_and_score(model, cases, cfg: RunConfig, seed: int) -> tuple[str, dict, dict, float]:
    unc = cfg.uncertainty
    rng = rng_streams(seed)["detect"]
    reports = detect_cases(model, cases, cfg.detection, unc.mc_samples, unc.mask_ratio, cfg.model.patch_size, rng)
    table = scores_table(cases, reports)
    pat, seg, loc = evaluation.evaluate_table(table, cfg, seed)
    return table, pat, seg, loc


def run_desk_experiment(
    cfg: RunConfig, out_dir=None, sweeps: bool = True, hooks: AdaptHooks | None = None
) -> ExperimentResult:
    """``hooks`` observe the strategy-3 adaptation."""
    t_start = time.perf_counter()
    seed = cfg.io.seed
    healthy, target = generate_corpus(cfg.phantom, seed)
    streams = rng_streams(seed)

    t0 = time.perf_counter()
    base_model, base_hist = pretrain(healthy, cfg, streams["pretrain"], init_rng=streams["init"])
    pre_seconds = time.perf_counter() - t0

    results: dict[int, StrategyResult] = {}
    models = {}
    for strategy in (Strategy.PRETRAIN_ONLY, Strategy.ADAPT_ONLY, Strategy.PRETRAIN_ADAPT):
        t0 = time.perf_counter()
        if strategy is Strategy.PRETRAIN_ONLY:
            model, hist = base_model, base_hist
        else:
            model, hist = run_strategy(
                strategy, healthy, target, cfg, seed, history=History(), pretrained=base_model,
                hooks=hooks if strategy is Strategy.PRETRAIN_ADAPT else None,
            )
        seconds = time.perf_counter() - t0 + (pre_seconds if strategy is not Strategy.ADAPT_ONLY else 0.0)
        table, pat, seg, loc = detect_and_score(model, target, cfg, seed)
        results[int(strategy)] = StrategyResult(int(strategy), table, pat, seg, loc, seconds, hist.of_kind("refresh"))
        models[int(strategy)] = model
        log.info("strategy %d: patient F1 %.3f, localization %.3f", strategy, pat["f1_mean"], loc)

    refresh = results[3].refresh
    stage1 = [r["mean_eu"] for r in refresh if r["stage"] == 1]
    s1 = cfg.schedule.stage1_epochs
    at_s1 = [r for r in refresh if r["epoch"] == s1]
    final = [r for r in refresh if r["stage"] == "final"]
    ratio_s1 = at_s1[0].get("au_ratio", float("nan")) if at_s1 else float("nan")
    ratio_final = final[0].get("au_ratio", float("nan")) if final else float("nan")

    k_rows, rob_rows = [], []
    if sweeps:
        k_rows = evaluation.detection_sweep(models[3], target, cfg, "mc_samples", cfg.eval.k_values, seed)
        rob_rows = evaluation.robustness_sweep(models[3], target, cfg, seed)

    result = ExperimentResult(
        results, k_rows, rob_rows, stage1, ratio_s1, ratio_final, time.perf_counter() - t_start
    )
    if out_dir is not None:
        write_outputs(result, Path(out_dir))
    return result


def write_outputs(result: ExperimentResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for k, v in result.strategies.items():
        storage.atomic_write_text(out / f"scores_strategy{k}.csv", v.table)
        storage.atomic_write_text(
            out / f"refresh_strategy{k}.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in v.refresh)
        )
    if result.k_sweep:
        storage.atomic_write_text(out / "sweep_mc_samples.csv", evaluation.sweep_table(result.k_sweep))
    if result.robustness:
        storage.atomic_write_text(out / "sweep_robustness.csv", evaluation.sweep_table(result.robustness))
    storage.atomic_write_text(out / "summary.json", json.dumps(result.summary(), indent=2, sort_keys=True, default=float) + "\n")


def stage1_eu_decreases(values: list[float]) -> bool:
    """Mean EU at the last stage-1 refresh is below its value at stage entry."""
    return len(values) >= 2 and values[-1] < values[0]


def k_sweep_shape(rows, tolerance: float = 0.05) -> dict:
    f1 = {int(r.value): r.patient["f1_mean"] for r in rows}
    sec = [r.seconds_per_image for r in sorted(rows, key=lambda r: r.value)]
    ks = sorted(f1)
    lo, mid, hi = ks[0], ks[len(ks) // 2], ks[-1]
    return {
        "f1": f1,
        "non_degrading": f1[mid] >= f1[lo] - tolerance,
        "flat": abs(f1[hi] - f1[mid]) <= tolerance,
        "time_monotone": bool(np.all(np.diff(sec) > 0)),
    }
