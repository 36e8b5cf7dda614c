"""Synthetic sagittal spinal-cord phantoms with elliptical pseudo-anomalies.

The phantom is a vertical spinal-cord (SC) band flanked by cerebrospinal fluid
(CSF) on a dark background.  Rows between ``vertical_margin`` and
``height - vertical_margin`` form the region of interest and are split into six
vertebral segments, C2-3 through C7-T1.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import CorpusConfig, PhantomConfig
from .errors import DegenerateInputError

SEGMENT_NAMES = ("C2-3", "C3-4", "C4-5", "C5-6", "C6-7", "C7-T1")
N_SEGMENTS = len(SEGMENT_NAMES)

BACKGROUND, SC, CSF = 0, 1, 2

AUGMENT_NOISE_VARIANCE = 0.02
AUGMENT_RANGE = (0.8, 1.2)


@dataclass
class RegionStats:
    sc_mean: float
    sc_var: float
    csf_mean: float
    csf_var: float


@dataclass
class AnomalySpec:
    center: tuple[int, int]
    ellipse_width: float
    ellipse_length: float
    signal_mean: float
    signal_var: float
    local_width: float = 0.0


@dataclass
class CaseRecord:
    image: np.ndarray
    roi_mask: np.ndarray
    tissue_labels: np.ndarray
    segment_labels: np.ndarray
    seed: int
    anomaly_mask: np.ndarray | None = None
    is_anomalous: bool = False
    anomaly_segments: list[int] = field(default_factory=list)
    anomalies: list[AnomalySpec] = field(default_factory=list)
    case_id: str = ""
    site: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def segment_rows(self) -> dict[int, np.ndarray]:
        """Row indices covered by each segment."""
        rows = {}
        for s in range(1, N_SEGMENTS + 1):
            rows[s] = np.flatnonzero((self.segment_labels == s).any(axis=1))
        return rows


def normalize(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if not hi > lo:
        raise DegenerateInputError("cannot min-max normalize a constant image")
    out = (image - lo) / (hi - lo)
    # guard against 1 ulp overshoot
    return np.clip(out, 0.0, 1.0)


def _segment_bounds(cfg: PhantomConfig) -> np.ndarray:
    top, bottom = cfg.vertical_margin, cfg.height - cfg.vertical_margin
    return np.round(np.linspace(top, bottom, N_SEGMENTS + 1)).astype(int)


def generate_phantom(seed: int, cfg: PhantomConfig | None = None) -> CaseRecord:
    """Healthy phantom, a pure function of ``(seed, cfg)``."""
    cfg = cfg or PhantomConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    H, W = cfg.height, cfg.width
    y = np.arange(H, dtype=np.float64)[:, None]
    x = np.arange(W, dtype=np.float64)[None, :]

    freq = rng.uniform(0.5, 1.0)
    phase = rng.uniform(0, 2 * np.pi)
    center = (W - 1) / 2 + cfg.curvature * np.sin(2 * np.pi * freq * y / H + phase)

    sc_w0 = rng.uniform(*cfg.sc_width)
    margin0 = rng.uniform(*cfg.csf_margin)
    ripple = 1 + 0.08 * np.sin(2 * np.pi * rng.uniform(1.0, 2.0) * y / H + rng.uniform(0, 2 * np.pi))
    sc_w = sc_w0 * ripple
    margin = np.full_like(y, margin0)

    bounds = _segment_bounds(cfg)
    if cfg.stenosis > 0:
        seg_len = (bounds[-1] - bounds[0]) / N_SEGMENTS
        sigma = seg_len / 6
        bump = np.zeros_like(y)
        for b in bounds[1:-1]:
            depth = cfg.stenosis * rng.uniform(0.5, 1.0)
            bump = np.maximum(bump, depth * np.exp(-0.5 * ((y - b) / sigma) ** 2))
        sc_w = sc_w * (1 - 0.5 * bump)
        margin = margin * (1 - bump)

    dist = np.abs(x - center)
    sc = dist <= sc_w / 2
    csf = (~sc) & (dist <= sc_w / 2 + margin)

    tissue = np.zeros((H, W), dtype=np.uint8)
    tissue[sc] = SC
    tissue[csf] = CSF

    levels = np.array([cfg.background_intensity, cfg.sc_intensity, cfg.csf_intensity])
    levels = levels * rng.uniform(0.95, 1.05, size=3)
    noise = np.array([cfg.background_noise, cfg.sc_noise, cfg.csf_noise])
    img = levels[tissue] + noise[tissue] * rng.standard_normal((H, W))

    # central gray-matter stripe inside the cord
    if cfg.gray_matter:
        stripe = sc & (dist <= 0.2 * sc_w)
        img = img + cfg.gray_matter * stripe

    bias = 1 + cfg.modulation * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * y / H + rng.uniform(0, 2 * np.pi))
    img = normalize(img * bias)

    rows = np.arange(H)
    seg_of_row = np.zeros(H, dtype=np.uint8)
    for s in range(N_SEGMENTS):
        seg_of_row[(rows >= bounds[s]) & (rows < bounds[s + 1])] = s + 1
    roi = sc & (seg_of_row[:, None] > 0)
    segments = np.where(roi, seg_of_row[:, None], 0).astype(np.uint8)

    return CaseRecord(
        image=img.astype(np.float32),
        roi_mask=roi.astype(np.uint8),
        tissue_labels=tissue,
        segment_labels=segments,
        seed=int(seed),
    )


def region_stats(image: np.ndarray, tissue_labels: np.ndarray) -> RegionStats:
    image = np.asarray(image, dtype=np.float64)
    sc = image[tissue_labels == SC]
    csf = image[tissue_labels == CSF]
    if sc.size == 0 or csf.size == 0:
        raise DegenerateInputError("region_stats needs nonempty SC and CSF regions")
    return RegionStats(float(sc.mean()), float(sc.var()), float(csf.mean()), float(csf.var()))


def ellipse_mask(shape, center, width, length) -> np.ndarray:
    """Axis-aligned ellipse with its long axis along the rows."""
    H, W = shape
    yy, xx = np.ogrid[:H, :W]
    cy, cx = center
    a = max(length / 2, 0.5)
    b = max(width / 2, 0.5)
    return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0


def sample_anomaly(
    rng: np.random.Generator,
    case: CaseRecord,
    stats: RegionStats,
    min_inside: float = 0.75,
    max_tries: int = 200,
) -> AnomalySpec:
    roi = case.roi_mask.astype(bool)
    ys, xs = np.nonzero(roi)
    if ys.size == 0:
        raise DegenerateInputError("case has an empty spinal-cord ROI")
    row_width = roi.sum(axis=1)
    lo_m, hi_m = sorted((stats.sc_mean, stats.csf_mean))
    lo_v, hi_v = sorted((stats.sc_var, stats.csf_var))
    for _ in range(max_tries):
        k = rng.integers(ys.size)
        cy, cx = int(ys[k]), int(xs[k])
        local = float(row_width[cy])
        width = rng.uniform(0.7, 1.0) * local
        length = rng.uniform(1.0, 4.0) * width
        mean = rng.uniform(lo_m, hi_m)
        var = rng.uniform(lo_v, hi_v)
        if not lo_m < mean < hi_m:
            continue
        ell = ellipse_mask(roi.shape, (cy, cx), width, length)
        n = ell.sum()
        if n and (ell & roi).sum() >= min_inside * n:
            return AnomalySpec((cy, cx), float(width), float(length), float(mean), float(var), local)
    raise DegenerateInputError(f"no feasible anomaly placement after {max_tries} tries")


def segment_of(case: CaseRecord, mask: np.ndarray) -> int:
    """Segment containing the centroid row of ``mask``."""
    ys = np.nonzero(mask)[0]
    row = int(np.round(ys.mean()))
    per_row = case.segment_labels.max(axis=1)
    if per_row[row] == 0:
        # centroid row outside the labeled span: use the nearest labeled row
        labeled = np.flatnonzero(per_row)
        row = int(labeled[np.argmin(np.abs(labeled - row))])
    return int(per_row[row])


def embed_anomalies(case: CaseRecord, n_anomalies: int, rng: np.random.Generator) -> CaseRecord:
    if not 1 <= n_anomalies <= 3:
        raise ValueError(f"n_anomalies must lie in [1, 3], got {n_anomalies}")
    if case.is_anomalous:
        raise ValueError("case already carries anomalies")
    stats = region_stats(case.image, case.tissue_labels)
    roi = case.roi_mask.astype(bool)
    image = case.image.copy()
    union = np.zeros_like(roi)
    specs, segs = [], set()
    for _ in range(n_anomalies):
        spec = sample_anomaly(rng, case, stats)
        region = ellipse_mask(roi.shape, spec.center, spec.ellipse_width, spec.ellipse_length) & roi
        values = rng.normal(spec.signal_mean, np.sqrt(spec.signal_var), size=int(region.sum()))
        image[region] = np.clip(values, 0.0, 1.0).astype(image.dtype)
        union |= region
        specs.append(spec)
        segs.add(segment_of(case, region))
    return replace(
        case,
        image=image,
        anomaly_mask=union.astype(np.uint8),
        is_anomalous=True,
        anomaly_segments=sorted(segs),
        anomalies=specs,
    )


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    noise_variance: float = AUGMENT_NOISE_VARIANCE,
    factor_range: tuple[float, float] = AUGMENT_RANGE,
) -> np.ndarray:
    """Training-time augmentation: Gaussian noise, brightness, contrast, re-normalize."""
    image = np.asarray(image, dtype=np.float64)
    noisy = image + np.sqrt(noise_variance) * rng.standard_normal(image.shape)
    brightness = rng.uniform(*factor_range)
    contrast = rng.uniform(*factor_range)
    out = noisy * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    if out.max() > out.min():
        return normalize(out)
    return np.clip(out, 0.0, 1.0)


def case_seed(corpus_seed: int, split: str, index: int) -> int:
    code = {"healthy": 0, "target": 1}[split]
    return int(np.random.SeedSequence([corpus_seed, code, index]).generate_state(1)[0])


def generate_corpus(cfg: CorpusConfig, seed: int) -> tuple[list[CaseRecord], list[CaseRecord]]:
    """Healthy pretraining cases and a target set with ``prevalence`` anomalous cases."""
    cfg.validate()
    healthy = []
    for i in range(cfg.n_healthy):
        rec = generate_phantom(case_seed(seed, "healthy", i), cfg.healthy)
        rec.case_id, rec.site = f"healthy_{i:04d}", "healthy"
        healthy.append(rec)

    n_anom = int(round(cfg.prevalence * cfg.n_target))
    pick_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    anomalous = set(pick_rng.permutation(cfg.n_target)[:n_anom].tolist())
    target = []
    for i in range(cfg.n_target):
        s = case_seed(seed, "target", i)
        rec = generate_phantom(s, cfg.target)
        if i in anomalous:
            arng = np.random.default_rng(np.random.SeedSequence([seed, 3, i]))
            rec = embed_anomalies(rec, int(arng.integers(1, cfg.max_anomalies + 1)), arng)
        rec.case_id, rec.site = f"target_{i:04d}", "target"
        target.append(rec)
    return healthy, target
