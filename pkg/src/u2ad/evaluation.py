"""Detection metrics, threshold policies, cross-validation and perturbation sweeps."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from skimage.metrics import structural_similarity
from skimage.transform import resize

from .detection import ScoreRow, detect_cases, parse_scores_table, scores_table
from .phantom import N_SEGMENTS

log = logging.getLogger(__name__)

PSNR_IDENTICAL = math.inf  # sentinel reported when mse == 0


@dataclass(frozen=True)
class DetectionMetrics:
    accuracy: float
    f1: float
    recall: float
    specificity: float
    precision: float
    tp: int
    fp: int
    fn: int
    tn: int

    def as_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def detection_metrics(predictions, labels) -> DetectionMetrics:
    """Confusion-matrix metrics with anomalous as the positive class.

    Recall or specificity of an absent class is reported as 0.
    """
    p = np.asarray(predictions, dtype=bool).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if p.size == 0 or p.size != y.size:
        raise ValueError("predictions and labels must be nonempty and equally long")
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    fn = int(np.sum(~p & y))
    tn = int(np.sum(~p & ~y))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    # count form: equal F1 values compare equal as floats
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return DetectionMetrics(
        accuracy=(tp + tn) / p.size,
        f1=f1,
        recall=recall,
        specificity=_ratio(tn, tn + fp),
        precision=precision,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
    )


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if s.size != y.size:
        raise ValueError("scores and labels differ in length")
    return s, y


def threshold_for_sensitivity(scores, labels, target: float = 0.90) -> float:
    """Largest t with sensitivity(score > t) >= target.

    The m-th highest positive score must stay strictly above t, where m is the
    smallest positive count meeting the target; the largest such t is the
    float immediately below that score.  Ties are handled automatically since
    every positive tied with it is also counted.
    """
    s, y = _scores_labels(scores, labels)
    pos = np.sort(s[y])[::-1]
    if pos.size == 0:
        raise ValueError("threshold_for_sensitivity needs at least one positive label")
    if not 0.0 < target <= 1.0:
        raise ValueError("target sensitivity must lie in (0, 1]")
    m = max(1, math.ceil(target * pos.size - 1e-9))
    return float(np.nextafter(pos[m - 1], -np.inf))


def f1_at(scores, labels, threshold: float) -> float:
    s, y = _scores_labels(scores, labels)
    return detection_metrics(s > threshold, y).f1


def threshold_candidates(scores) -> np.ndarray:
    """Midpoints of sorted unique scores plus one threshold below all of them."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    below = np.nextafter(u[0], -np.inf)
    return np.concatenate([[below], (u[:-1] + u[1:]) / 2.0])


def threshold_for_f1(scores, labels) -> float:
    """Exhaustive scan; the largest threshold wins among F1 ties."""
    s, y = _scores_labels(scores, labels)
    if y.all() or not y.any():
        raise ValueError("threshold_for_f1 needs both classes")
    best_t, best_f = -np.inf, -1.0
    for t in threshold_candidates(s):
        f = f1_at(s, y, t)
        if f >= best_f:
            best_t, best_f = float(t), f
    return best_t


# reconstruction quality -------------------------------------------------------


@dataclass(frozen=True)
class ReconMetrics:
    psnr: float
    ssim: float
    mse: float
    variance: float


def ssim_map(x, y) -> np.ndarray:
    """Per-pixel SSIM, 11x11 Gaussian window (sigma 1.5), unit dynamic range."""
    _, full = structural_similarity(
        np.asarray(x, dtype=np.float64),
        np.asarray(y, dtype=np.float64),
        data_range=1.0,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        full=True,
    )
    return full


def recon_metrics(x, x_hat, roi_mask, eu_map=None) -> ReconMetrics:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError("x and x_hat must share a shape")
    roi = np.asarray(roi_mask) > 0
    if not roi.any():
        raise ValueError("empty ROI")
    mse = float(np.mean((x[roi] - x_hat[roi]) ** 2))
    psnr = PSNR_IDENTICAL if mse == 0 else float(10.0 * np.log10(1.0 / mse))
    ssim = float(ssim_map(x, x_hat)[roi].mean())
    variance = 0.0 if eu_map is None else float(np.asarray(eu_map, dtype=np.float64)[roi].mean())
    return ReconMetrics(psnr=psnr, ssim=ssim, mse=mse, variance=variance)


# cross-validation -------------------------------------------------------------


@dataclass
class CvPlan:
    """Stratified fold assignments; ``assignments[r][case_id]`` is the test fold."""

    folds: int
    repeats: int
    seed: int
    assignments: list[dict[str, int]]

    def test_ids(self, repeat: int, fold: int) -> list[str]:
        return sorted(c for c, f in self.assignments[repeat].items() if f == fold)

    def fit_ids(self, repeat: int, fold: int) -> list[str]:
        return sorted(c for c, f in self.assignments[repeat].items() if f != fold)


def make_cv_plan(case_ids, labels, folds: int = 5, repeats: int = 20, seed: int = 0) -> CvPlan:
    """Per repeat, shuffle each class and deal it round-robin across folds.

    Case ids are sorted first so the plan does not depend on input order.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    pairs = sorted(zip(case_ids, (bool(v) for v in labels)))
    if len({c for c, _ in pairs}) != len(pairs):
        raise ValueError("duplicate case ids")
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(repeats)]
    assignments = []
    for rng in rngs:
        fold_of: dict[str, int] = {}
        offset = 0
        for cls in (True, False):
            ids = [c for c, y in pairs if y is cls]
            for j, k in enumerate(rng.permutation(len(ids))):
                fold_of[ids[k]] = (offset + j) % folds
            offset += len(ids)
        assignments.append(fold_of)
    return CvPlan(folds, repeats, seed, assignments)


def _items(rows: list[ScoreRow], level: str):
    """(case_id, score, label) items for patient or segment level."""
    if level == "patient":
        return [(r.case_id, r.patient_score, r.is_anomalous) for r in rows]
    if level == "segment":
        return [
            (r.case_id, r.segment_scores[s], s in r.gt_segments)
            for r in rows
            for s in range(1, N_SEGMENTS + 1)
        ]
    raise ValueError(f"unknown level {level!r}")


@dataclass
class CvResult:
    level: str
    folds: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        return np.array([f["metrics"][metric] for f in self.folds], dtype=np.float64)

    def mean(self, metric: str) -> float:
        v = self.values(metric)
        return float(v.mean()) if v.size else float("nan")

    def std(self, metric: str) -> float:
        v = self.values(metric)
        return float(v.std()) if v.size else float("nan")

    def summary(self) -> dict:
        names = ("accuracy", "f1", "recall", "specificity")
        return {
            "level": self.level,
            "n_folds": len(self.folds),
            "n_skipped": len(self.skipped),
            **{f"{m}_mean": self.mean(m) for m in names},
            **{f"{m}_std": self.std(m) for m in names},
        }


def cross_validate(
    rows: list[ScoreRow], plan: CvPlan, level: str = "patient", target_sensitivity: float = 0.90
) -> CvResult:
    """Fit a threshold on the other folds, evaluate on the held-out one.

    Patient level uses the sensitivity rule, segment level the F1 rule.
    A fit split holding a single class is skipped and recorded.
    """
    items = _items(rows, level)
    result = CvResult(level)
    for rep in range(plan.repeats):
        fold_of = plan.assignments[rep]
        missing = {c for c, _, _ in items} - set(fold_of)
        if missing:
            raise ValueError(f"cases missing from the plan: {sorted(missing)[:3]}")
        for fold in range(plan.folds):
            fit = [(s, y) for c, s, y in items if fold_of[c] != fold]
            test = [(s, y) for c, s, y in items if fold_of[c] == fold]
            entry = {"repeat": rep, "fold": fold, "fit_ids": plan.fit_ids(rep, fold), "test_ids": plan.test_ids(rep, fold)}
            fs, fy = (np.array(v) for v in zip(*fit)) if fit else (np.zeros(0), np.zeros(0, bool))
            if not test or fy.all() or not fy.any():
                entry["reason"] = "single-class fit split" if test else "empty test fold"
                log.warning("skipping repeat %d fold %d: %s", rep, fold, entry["reason"])
                result.skipped.append(entry)
                continue
            if level == "patient":
                t = threshold_for_sensitivity(fs, fy, target_sensitivity)
            else:
                t = threshold_for_f1(fs, fy)
            ts, ty = (np.array(v) for v in zip(*test))
            entry["threshold"] = t
            entry["metrics"] = detection_metrics(ts > t, ty).as_dict()
            result.folds.append(entry)
    return result


def localization_accuracy(rows: list[ScoreRow]) -> float:
    """Fraction of anomalous cases whose top segment holds a ground-truth anomaly."""
    anom = [r for r in rows if r.is_anomalous]
    return float(np.mean([r.localized for r in anom])) if anom else float("nan")


# perturbations and sweeps -----------------------------------------------------


def add_noise(image, variance: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if variance == 0:
        return x.astype(np.float32)
    noisy = x + rng.normal(0.0, math.sqrt(variance), size=x.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def degrade_resolution(image, factor: int) -> np.ndarray:
    """Downsample by ``factor`` then bilinearly upsample back to the original grid."""
    x = np.asarray(image, dtype=np.float64)
    if factor == 1:
        return x.astype(np.float32)
    H, W = x.shape
    small = resize(x, (max(1, H // factor), max(1, W // factor)), order=1, anti_aliasing=True, mode="edge")
    back = resize(small, (H, W), order=1, anti_aliasing=False, mode="edge")
    return np.clip(back, 0.0, 1.0).astype(np.float32)


@dataclass
class SweepRow:
    parameter: str
    value: float
    patient: dict
    segment: dict
    localization: float
    seconds_per_image: float
    table: str = field(repr=False, default="")


def evaluate_table(table: str, cfg, seed: int) -> tuple[dict, dict, float]:
    rows = parse_scores_table(table)
    plan = make_cv_plan([r.case_id for r in rows], [r.is_anomalous for r in rows], cfg.eval.folds, cfg.eval.repeats, seed)
    pat = cross_validate(rows, plan, "patient", cfg.eval.target_sensitivity).summary()
    seg = cross_validate(rows, plan, "segment").summary()
    return pat, seg, localization_accuracy(rows)


def _detect_table(model, cases, cfg, K, ratio, detect_seed, images=None) -> tuple[str, float]:
    rng = np.random.default_rng(detect_seed)
    t0 = time.perf_counter()
    reports = detect_cases(model, cases, cfg.detection, K, ratio, cfg.model.patch_size, rng, images=images)
    elapsed = time.perf_counter() - t0
    return scores_table(cases, reports), elapsed / max(1, len(cases))


def robustness_sweep(model, cases, cfg, seed: int = 0) -> list[SweepRow]:
    """Noise levels then resolution factors; each level re-runs detection and CV.

    Detection always starts from the same rng state, so the zero-noise,
    factor-1 rows reproduce the unperturbed run exactly.
    """
    unc = cfg.uncertainty
    ss = np.random.SeedSequence(seed)
    detect_seed, noise_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    out = []
    for var in cfg.eval.noise_variances:
        rng = np.random.default_rng([noise_seed, int(round(var * 1e6))])
        images = [add_noise(c.image, var, rng) for c in cases]
        table, sec = _detect_table(model, cases, cfg, unc.mc_samples, unc.mask_ratio, detect_seed, images)
        pat, seg, loc = evaluate_table(table, cfg, seed)
        out.append(SweepRow("noise_variance", float(var), pat, seg, loc, sec, table))
    for f in cfg.eval.downsample_factors:
        images = [degrade_resolution(c.image, f) for c in cases]
        table, sec = _detect_table(model, cases, cfg, unc.mc_samples, unc.mask_ratio, detect_seed, images)
        pat, seg, loc = evaluate_table(table, cfg, seed)
        out.append(SweepRow("downsample_factor", float(f), pat, seg, loc, sec, table))
    return out


def detection_sweep(model, cases, cfg, parameter: str, values, seed: int = 0) -> list[SweepRow]:
    """Vary K ("mc_samples") or the inference mask ratio ("mask_ratio") on a fixed model."""
    if parameter not in ("mc_samples", "mask_ratio"):
        raise ValueError(f"detection sweeps support mc_samples or mask_ratio, not {parameter!r}")
    detect_seed = int(np.random.SeedSequence(seed).spawn(1)[0].generate_state(1)[0])
    out = []
    for v in values:
        K = int(v) if parameter == "mc_samples" else cfg.uncertainty.mc_samples
        r = float(v) if parameter == "mask_ratio" else cfg.uncertainty.mask_ratio
        table, sec = _detect_table(model, cases, cfg, K, r, detect_seed)
        pat, seg, loc = evaluate_table(table, cfg, seed)
        out.append(SweepRow(parameter, float(v), pat, seg, loc, sec, table))
    return out


SWEEP_COLUMNS = [
    "parameter", "value", "patient_f1_mean", "patient_f1_std", "patient_accuracy_mean",
    "patient_specificity_mean", "segment_f1_mean", "localization", "seconds_per_image",
]


def sweep_table(rows: list[SweepRow]) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    for r in rows:
        vals = [
            r.parameter, repr(r.value), repr(r.patient["f1_mean"]), repr(r.patient["f1_std"]),
            repr(r.patient["accuracy_mean"]), repr(r.patient["specificity_mean"]),
            repr(r.segment["f1_mean"]), repr(r.localization), f"{r.seconds_per_image:.6f}",
        ]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
