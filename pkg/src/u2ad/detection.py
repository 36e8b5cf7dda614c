"""Anomaly maps, postprocessing, AnoCurve and segment/patient scores."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .config import DetectionConfig
from .patching import PatchGrid, build_patch_grid
from .phantom import N_SEGMENTS, CaseRecord
from .postprocess import (  # noqa: F401  (re-exported)
    ConnectedComponent,
    cc_label,
    components_to_map,
    percentile_filter,
    quantile_threshold,
    retain_top_ccs,
)
from .uncertainty import UncertaintyMaps, estimate_maps, mc_sample, mc_sample_many, spawn


@dataclass
class AnomalyReport:
    case_id: str
    ano_map: np.ndarray
    retained: list[ConnectedComponent]
    curve: np.ndarray
    segment_scores: dict[int, float]
    patient_score: float
    segment_flags: dict[int, bool] = field(default_factory=dict)
    patient_flag: bool | None = None
    passes: int = 0
    maps: UncertaintyMaps | None = field(default=None, repr=False)

    @property
    def top_segment(self) -> int:
        """Segment with the highest score (lowest index on ties); 0 if none."""
        if not self.segment_scores:
            return 0
        return max(sorted(self.segment_scores), key=lambda s: self.segment_scores[s])

    def summary(self) -> dict:
        return {
            "case_id": self.case_id,
            "patient_score": self.patient_score,
            "segment_scores": {str(k): v for k, v in sorted(self.segment_scores.items())},
            "top_segment": self.top_segment,
            "patient_flag": self.patient_flag,
            "segment_flags": {str(k): v for k, v in sorted(self.segment_flags.items())},
            "mc_passes": self.passes,
            "components": [
                {"score": cc.score, "size": cc.size, "bbox": list(cc.bbox)} for cc in self.retained
            ],
        }


def anomaly_map(model, image, grid: PatchGrid, K: int, ratio: float, rng) -> np.ndarray:
    """|x - mean of K masked reconstructions| on ROI pixels."""
    ens = mc_sample(model, image, grid, ratio, K, rng)
    return estimate_maps(ens, image, grid, K, rng).au


def anomaly_curve(values: np.ndarray, roi_mask: np.ndarray, axis: int = 0) -> np.ndarray:
    """Per-position mean over the ROI width; positions without ROI give 0."""
    v = np.asarray(values, dtype=np.float64)
    roi = np.asarray(roi_mask) > 0
    if axis == 1:
        v, roi = v.T, roi.T
    width = roi.sum(axis=1)
    total = np.where(roi, v, 0.0).sum(axis=1)
    return np.divide(total, width, out=np.zeros_like(total), where=width > 0)


def segment_positions(segment_labels: np.ndarray, axis: int = 0) -> dict[int, np.ndarray]:
    seg = np.asarray(segment_labels)
    if axis == 1:
        seg = seg.T
    return {s: np.flatnonzero((seg == s).any(axis=1)) for s in range(1, N_SEGMENTS + 1)}


def segment_scores(curve: np.ndarray, segment_labels: np.ndarray, axis: int = 0) -> dict[int, float]:
    out = {}
    for s, rows in segment_positions(segment_labels, axis).items():
        out[s] = float(curve[rows].max()) if rows.size else 0.0
    return out


def score_and_decide(curve, segment_labels, patient_threshold=None, segment_threshold=None, axis: int = 0):
    """Segment and patient scores plus threshold flags.

    Returns (segment_scores, patient_score, segment_flags, patient_flag).
    Segments without ROI rows score 0 and are never flagged.
    """
    seg = segment_scores(curve, segment_labels, axis)
    present = {s for s, rows in segment_positions(segment_labels, axis).items() if rows.size}
    patient = float(np.max(curve)) if np.size(curve) else 0.0
    seg_flags = {}
    if segment_threshold is not None:
        seg_flags = {s: bool(s in present and v > segment_threshold) for s, v in seg.items()}
    flag = None if patient_threshold is None else bool(patient > patient_threshold)
    return seg, patient, seg_flags, flag


def postprocess(ano_map: np.ndarray, roi_mask: np.ndarray, cfg: DetectionConfig):
    """Percentile filter, component labeling and top-k retention."""
    filtered = percentile_filter(ano_map, roi_mask, cfg.percentile)
    retained = retain_top_ccs(cc_label(filtered, cfg.connectivity), cfg.top_k)
    return components_to_map(filtered, retained), retained


def report_from_map(case: CaseRecord, ano_map: np.ndarray, cfg: DetectionConfig, passes: int = 0) -> AnomalyReport:
    kept_map, retained = postprocess(ano_map, case.roi_mask, cfg)
    source = kept_map if cfg.curve_source == "postprocessed" else ano_map
    curve = anomaly_curve(source, case.roi_mask, cfg.axis)
    seg, patient, _, _ = score_and_decide(curve, case.segment_labels, axis=cfg.axis)
    return AnomalyReport(case.case_id, ano_map, retained, curve, seg, patient, passes=passes)


def detect_cases(model, cases, cfg: DetectionConfig, K: int, ratio: float, patch_size: int, rng, images=None):
    """Full detection for a list of cases; ``images`` optionally replaces the case images."""
    images = [c.image for c in cases] if images is None else images
    if not cases:
        return []
    grids = [build_patch_grid(c.roi_mask, patch_size) for c in cases]
    rngs = spawn(rng, len(cases))
    ensembles = mc_sample_many(model, images, grids, ratio, K, rngs)
    reports = []
    for case, im, g, ens, r in zip(cases, images, grids, ensembles, rngs):
        maps: UncertaintyMaps = estimate_maps(ens, im, g, K, r)
        rep = report_from_map(case, maps.au, cfg, ens.passes)
        rep.maps = maps
        reports.append(rep)
    return reports


def apply_thresholds(report: AnomalyReport, roi_segments, patient_threshold, segment_threshold) -> AnomalyReport:
    seg, patient, seg_flags, flag = score_and_decide(
        report.curve, roi_segments, patient_threshold, segment_threshold
    )
    report.segment_flags, report.patient_flag = seg_flags, flag
    return report


SCORE_COLUMNS = ["case_id", "is_anomalous", "gt_segments", "patient_score", "top_segment"] + [
    f"seg_{s}" for s in range(1, N_SEGMENTS + 1)
]


def _fmt(v: float) -> str:
    return repr(float(v))


def scores_table(cases, reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    for case, rep in zip(cases, reports):
        w.writerow(
            [
                case.case_id,
                int(case.is_anomalous),
                ";".join(str(s) for s in case.anomaly_segments),
                _fmt(rep.patient_score),
                rep.top_segment,
            ]
            + [_fmt(rep.segment_scores[s]) for s in range(1, N_SEGMENTS + 1)]
        )
    return buf.getvalue()


@dataclass
class ScoreRow:
    case_id: str
    is_anomalous: bool
    gt_segments: list[int]
    patient_score: float
    top_segment: int
    segment_scores: dict[int, float]

    @property
    def top_segment_score(self) -> float:
        return self.segment_scores.get(self.top_segment, 0.0)

    @property
    def localized(self) -> bool:
        return self.top_segment in self.gt_segments


def parse_scores_table(text: str) -> list[ScoreRow]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append(
            ScoreRow(
                case_id=r["case_id"],
                is_anomalous=bool(int(r["is_anomalous"])),
                gt_segments=[int(s) for s in r["gt_segments"].split(";") if s],
                patient_score=float(r["patient_score"]),
                top_segment=int(r["top_segment"]),
                segment_scores={s: float(r[f"seg_{s}"]) for s in range(1, N_SEGMENTS + 1)},
            )
        )
    return rows
