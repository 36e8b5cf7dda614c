"""Batch command-line interface.

    u2ad gen-data | pretrain | adapt | detect | eval | sweep | plot

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import evaluation, plots, storage
from .config import RunConfig, load_config
from .detection import anomaly_curve, detect_cases, parse_scores_table, postprocess, scores_table
from .errors import PreconditionError, U2adError
from .model import init_model, load_checkpoint, save_checkpoint
from .phantom import generate_corpus
from .trainer import AdaptHooks, History, Strategy, adapt, make_optimizer, pretrain, rng_streams

log = logging.getLogger("u2ad")

COMMANDS = ("gen-data", "pretrain", "adapt", "detect", "eval", "sweep", "plot")
SWEEP_PARAMS = ("mc_samples", "mask_ratio", "temperature", "robustness")


# run directory ---------------------------------------------------------------


class RunDir:
    def __init__(self, root, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def history(self) -> Path:
        return self.path("history.jsonl")

    def checkpoint(self, name: str) -> Path:
        return self.path("checkpoints", f"{name}.ckpt")

    def epoch_checkpoint(self, epoch: int) -> Path:
        return self.checkpoint(f"epoch_{epoch:04d}")

    def write_snapshot(self, command: str) -> None:
        storage.atomic_write_text(self.path("config.json"), self.cfg.snapshot())
        storage.dump_json(self.path("snapshots", f"{command}.json"), {"seed": self.cfg.io.seed, "config": self.cfg.to_dict()})

    def read_history(self) -> list[dict]:
        if not self.history.exists():
            return []
        return [json.loads(line) for line in self.history.read_text().splitlines() if line.strip()]

    def write_history(self, records: list[dict]) -> None:
        storage.atomic_write_text(self.history, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))

    def append_history(self, rec: dict) -> None:
        with open(self.history, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def training_digest(cfg: RunConfig, strategy: int | None) -> str:
    """Identity of everything that determines trained parameters."""
    d = cfg.to_dict()
    keys = ("phantom", "model", "schedule", "uncertainty")
    return _digest({"sections": {k: d[k] for k in keys}, "seed": cfg.io.seed, "strategy": strategy})


def pretrain_digest(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    return _digest({"phantom": d["phantom"], "model": d["model"], "schedule": d["schedule"], "seed": cfg.io.seed})


def resolve_device(name: str) -> torch.device:
    if name == "cpu":
        return torch.device("cpu")
    if torch.cuda.is_available():
        return torch.device("cuda")
    if getattr(torch.backends, "mps", None) is not None and torch.backends.mps.is_available():
        return torch.device("mps")
    raise PreconditionError("--device accelerator requested but no accelerator is available")


def _meta_of(path: Path) -> dict | None:
    if not path.exists():
        return None
    return load_checkpoint(path)[1]


def _corpus(cfg: RunConfig, split: str):
    return storage.read_corpus(cfg.io.data_dir, split)


# commands ----------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out_dir=None) -> Path:
    out = Path(out_dir or cfg.io.data_dir)
    healthy, target = generate_corpus(cfg.phantom, cfg.io.seed)
    index = storage.write_corpus(
        out,
        healthy,
        target,
        extra={"seed": cfg.io.seed, "prevalence": cfg.phantom.prevalence, "phantom": cfg.to_dict()["phantom"]},
    )
    log.info("wrote %d healthy and %d target cases to %s", len(healthy), len(target), out)
    return index


def cmd_pretrain(cfg: RunConfig, run: RunDir, device) -> Path:
    path = run.checkpoint("pretrain")
    digest = pretrain_digest(cfg)
    meta = _meta_of(path)
    if meta and meta.get("digest") == digest:
        log.info("pretrained checkpoint up to date: %s", path)
        return path
    healthy = _corpus(cfg, "healthy")
    streams = rng_streams(cfg.io.seed)
    model = init_model(cfg.model, streams["init"], healthy[0].image.shape).to(device)
    model, hist = pretrain(healthy, cfg, streams["pretrain"], model=model)
    kept = [r for r in run.read_history() if r.get("phase") != "pretrain"]
    run.write_history(hist.records + kept)
    save_checkpoint(path, model.cpu(), {"kind": "pretrain", "digest": digest})
    return path


def _latest_resume_point(run: RunDir, digest: str, adapt_epochs: int):
    ckdir = run.path("checkpoints")
    best = None
    for p in sorted(ckdir.glob("epoch_*.ckpt")) if ckdir.exists() else []:
        meta = load_checkpoint(p)[1]
        if meta.get("digest") == digest and meta.get("epoch", -1) < adapt_epochs:
            if best is None or meta["epoch"] > best[1]["epoch"]:
                best = (p, meta)
    return best


def cmd_adapt(cfg: RunConfig, run: RunDir, strategy: int, device) -> Path:
    strategy = Strategy(int(strategy))
    final = run.checkpoint("final")
    digest = training_digest(cfg, int(strategy))
    meta = _meta_of(final)
    if meta and meta.get("digest") == digest:
        log.info("adapted checkpoint up to date: %s", final)
        return final

    if strategy is not Strategy.ADAPT_ONLY:
        pre = run.checkpoint("pretrain")
        pmeta = _meta_of(pre)
        if pmeta is None:
            raise PreconditionError(f"missing pretrained checkpoint {pre} (run pretrain first)")
        if pmeta.get("digest") != pretrain_digest(cfg):
            raise PreconditionError(f"pretrained checkpoint {pre} was built with a different configuration")

    if strategy is Strategy.PRETRAIN_ONLY:
        model = load_checkpoint(pre)[0]
        save_checkpoint(final, model, {"kind": "final", "digest": digest, "strategy": int(strategy)})
        return final

    target = _corpus(cfg, "target")
    sched = cfg.schedule
    streams = rng_streams(cfg.io.seed)
    rng = streams["adapt"]
    start, optimizer = 0, None
    resume = _latest_resume_point(run, digest, sched.adapt_epochs)
    if resume is not None:
        path, rmeta = resume
        model, _, optimizer = load_checkpoint(path, optimizer_factory=lambda m: make_optimizer(m, sched), device=device)
        rng.bit_generator.state = rmeta["rng_state"]
        start = int(rmeta["epoch"])
        log.info("resuming adaptation at epoch %d from %s", start, path)
    elif strategy is Strategy.ADAPT_ONLY:
        model = init_model(cfg.model, streams["init"], target[0].image.shape)
    else:
        model = load_checkpoint(pre)[0]
    model = model.to(device)
    if optimizer is not None:
        # moving the model keeps parameter identity, so optimizer state stays attached
        for st in optimizer.state.values():
            for k, v in st.items():
                if torch.is_tensor(v):
                    st[k] = v.to(device)

    keep = [
        r for r in run.read_history()
        if r.get("phase") == "pretrain" or (r.get("phase") == "adapt" and r.get("epoch", 0) < start and resume)
    ]
    run.write_history(keep)
    history = History([r for r in keep if r.get("phase") == "adapt"])

    def on_checkpoint(epoch, m, opt, r):
        state = r.bit_generator.state
        was = next(m.parameters()).device
        save_checkpoint(
            run.epoch_checkpoint(epoch),
            m.cpu(),
            {"kind": "adapt", "digest": digest, "epoch": epoch, "strategy": int(strategy), "rng_state": state},
            opt,
        )
        m.to(was)

    def on_refresh(epoch, stage, maps):
        base = run.path("maps", f"epoch_{epoch:04d}")
        for case, mp in zip(target, maps):
            d = base / case.case_id
            d.mkdir(parents=True, exist_ok=True)
            storage.write_raster(d / "au.f32", mp.au, "f4")
            storage.write_raster(d / "eu.f32", mp.eu, "f4")
            storage.dump_json(
                d / "manifest.json",
                {"K": cfg.uncertainty.mc_samples, "r": cfg.uncertainty.mask_ratio, "seed": cfg.io.seed,
                 "passes": mp.passes, "stage": stage, "epoch": epoch},
            )

    hooks = AdaptHooks(
        on_refresh=on_refresh,
        on_checkpoint=on_checkpoint,
        on_record=run.append_history,
        checkpoint_epochs={0, sched.stage1_epochs, sched.adapt_epochs},
    )
    model, _ = adapt(model, target, cfg, rng, history=history, hooks=hooks, start_epoch=start, optimizer=optimizer)
    save_checkpoint(final, model.cpu(), {"kind": "final", "digest": digest, "strategy": int(strategy)})
    return final


def _final_model(run: RunDir, device):
    final = run.checkpoint("final")
    if not final.exists():
        raise PreconditionError(f"missing adapted checkpoint {final} (run adapt first)")
    model, meta, _ = load_checkpoint(final, device=device)
    return model, meta


def cmd_detect(cfg: RunConfig, run: RunDir, device, split: str = "target") -> Path:
    model, _ = _final_model(run, device)
    cases = _corpus(cfg, split)
    unc = cfg.uncertainty
    rng = rng_streams(cfg.io.seed)["detect"]
    reports = detect_cases(model, cases, cfg.detection, unc.mc_samples, unc.mask_ratio, cfg.model.patch_size, rng)
    out = run.path("reports")
    out.mkdir(parents=True, exist_ok=True)
    for case, rep in zip(cases, reports):
        d = out / "cases" / case.case_id
        d.mkdir(parents=True, exist_ok=True)
        storage.write_raster(d / "ano_map.f32", rep.ano_map, "f4")
        summary = rep.summary()
        summary["recon"] = evaluation.recon_metrics(case.image, rep.maps.mean, case.roi_mask, rep.maps.eu).__dict__
        storage.dump_json(d / "report.json", summary)
    storage.atomic_write_text(out / "scores.csv", scores_table(cases, reports))
    return out / "scores.csv"


def _scores(run: RunDir) -> str:
    path = run.path("reports", "scores.csv")
    if not path.exists():
        raise PreconditionError(f"missing score table {path} (run detect first)")
    return path.read_text()


def cmd_eval(cfg: RunConfig, run: RunDir) -> Path:
    rows = parse_scores_table(_scores(run))
    plan = evaluation.make_cv_plan(
        [r.case_id for r in rows], [r.is_anomalous for r in rows], cfg.eval.folds, cfg.eval.repeats, cfg.io.seed
    )
    out = run.path("reports")
    results = {}
    for level in ("patient", "segment"):
        res = evaluation.cross_validate(rows, plan, level, cfg.eval.target_sensitivity)
        results[level] = res.summary()
        storage.atomic_write_text(
            out / f"cv_{level}.jsonl",
            "".join(json.dumps(f, sort_keys=True) + "\n" for f in res.folds + res.skipped),
        )
    results["localization"] = evaluation.localization_accuracy(rows)
    results["n_cases"] = len(rows)
    recon = []
    for r in rows:
        rp = out / "cases" / r.case_id / "report.json"
        if rp.exists():
            recon.append(json.loads(rp.read_text())["recon"])
    if recon:
        results["recon"] = {k: float(np.mean([x[k] for x in recon])) for k in ("mse", "psnr", "ssim", "variance")}
    storage.atomic_write_text(out / "metrics.json", json.dumps(results, indent=2, sort_keys=True) + "\n")
    return out / "metrics.json"


def cmd_sweep(cfg: RunConfig, run: RunDir, param: str, device) -> Path:
    cases = _corpus(cfg, "target")
    out = run.path("reports", f"sweep_{param}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    if param == "robustness":
        model, _ = _final_model(run, device)
        rows = evaluation.robustness_sweep(model, cases, cfg, cfg.io.seed)
    elif param in ("mc_samples", "mask_ratio"):
        model, _ = _final_model(run, device)
        values = cfg.eval.k_values if param == "mc_samples" else cfg.eval.mask_ratios
        rows = evaluation.detection_sweep(model, cases, cfg, param, values, cfg.io.seed)
    elif param == "temperature":
        rows = _temperature_sweep(cfg, run, cases, device)
    else:
        raise PreconditionError(f"unknown sweep parameter {param!r}")
    storage.atomic_write_text(out, evaluation.sweep_table(rows))
    return out


def _temperature_sweep(cfg, run: RunDir, cases, device):
    """Re-adapt from the pretrained checkpoint once per temperature, then detect and evaluate."""
    pre = run.checkpoint("pretrain")
    if not pre.exists():
        raise PreconditionError(f"missing pretrained checkpoint {pre} (run pretrain first)")
    rows = []
    for tau in cfg.eval.temperatures:
        sub = dataclasses.replace(cfg, uncertainty=dataclasses.replace(cfg.uncertainty, temperature=float(tau)))
        model = load_checkpoint(pre)[0].to(device)
        model, _ = adapt(model, cases, sub, rng_streams(cfg.io.seed)["adapt"])
        rows.extend(evaluation.detection_sweep(model, cases, sub, "mc_samples", [sub.uncertainty.mc_samples], cfg.io.seed))
        rows[-1].parameter, rows[-1].value = "temperature", float(tau)
    return rows


def cmd_plot(cfg: RunConfig, run: RunDir) -> list[Path]:
    rows = parse_scores_table(_scores(run))
    by_id = {c.case_id: c for c in _corpus(cfg, None)}
    out = run.path("plots")
    written = []
    for r in rows:
        case = by_id.get(r.case_id)
        raster = run.path("reports", "cases", r.case_id, "ano_map.f32")
        if case is None or not raster.exists():
            raise PreconditionError(f"missing report for {r.case_id}")
        ano = storage.read_raster(raster, case.image.shape, "f4")
        kept, retained = postprocess(ano, case.roi_mask, cfg.detection)
        source = kept if cfg.detection.curve_source == "postprocessed" else ano
        title = f"{r.case_id} score {r.patient_score:.3f}"
        written.append(plots.overlay(case.image, kept, retained, out / "overlays" / f"{r.case_id}.png", title))
        curve = anomaly_curve(source, case.roi_mask, cfg.detection.axis)
        written.append(plots.curve_plot(curve, case.segment_labels, out / "curves" / f"{r.case_id}.png", title))
    hist = run.read_history()
    if hist:
        written.append(plots.trend_plot(hist, out / "trends.png"))
    for table in sorted(run.path("reports").glob("sweep_*.csv")):
        srows = list(csv.DictReader(table.read_text().splitlines()))
        if srows:
            written.append(plots.sweep_plot(srows, srows[0]["parameter"], out / f"{table.stem}.png"))
    for level in ("patient", "segment"):
        cv = run.path("reports", f"cv_{level}.jsonl")
        if cv.exists():
            folds = [json.loads(line) for line in cv.read_text().splitlines() if line.strip()]
            folds = [f for f in folds if "metrics" in f]
            if folds:
                metrics = {m: [f["metrics"][m] for f in folds] for m in ("accuracy", "f1", "recall", "specificity")}
                written.append(plots.cv_boxplot(metrics, out / f"cv_{level}.png", f"{level} level"))
    return written


# entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="u2ad", description="Uncertainty-guided anomaly detection on spinal-cord phantoms.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides io.seed")
    p.add_argument("--run-dir", help="overrides io.run_dir")
    p.add_argument("--data-dir", help="overrides io.data_dir")
    p.add_argument("--strategy", type=int, choices=(1, 2, 3), default=3)
    p.add_argument("--device", choices=("cpu", "accelerator"))
    p.add_argument("--param", choices=SWEEP_PARAMS, default="mc_samples", help="sweep parameter")
    p.add_argument("--split", choices=("target", "healthy"), default="target", help="corpus split for detect")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    io = {}
    if args.seed is not None:
        io["seed"] = args.seed
    if args.run_dir is not None:
        io["run_dir"] = args.run_dir
    if args.data_dir is not None:
        io["data_dir"] = args.data_dir
    if args.device is not None:
        io["device"] = args.device
    return {"io": io} if io else {}


def run_command(args, environ=None) -> object:
    cfg = load_config(args.config, _overrides(args), environ)
    if args.command == "gen-data":
        return cmd_gen_data(cfg)
    device = resolve_device(cfg.io.device)
    run = RunDir(cfg.io.run_dir, cfg)
    run.root.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run.path(".lock")), timeout=0)
    try:
        lock.acquire()
    except Timeout as exc:
        raise PreconditionError(f"run directory {run.root} is locked by another process") from exc
    try:
        run.write_snapshot(args.command)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, run, device)
        if args.command == "adapt":
            return cmd_adapt(cfg, run, args.strategy, device)
        if args.command == "detect":
            return cmd_detect(cfg, run, device, args.split)
        if args.command == "eval":
            return cmd_eval(cfg, run)
        if args.command == "sweep":
            return cmd_sweep(cfg, run, args.param, device)
        return cmd_plot(cfg, run)
    finally:
        lock.release()


def main(argv=None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = run_command(args, environ)
    except U2adError as exc:
        print(f"u2ad: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"u2ad: I/O error: {exc}", file=sys.stderr)
        return 1
    if result is not None and not isinstance(result, list):
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
