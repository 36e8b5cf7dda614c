"""On-disk formats: raw rasters, case directories, corpus index."""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from .errors import PreconditionError
from .phantom import AnomalySpec, CaseRecord

INDEX_NAME = "corpus.json"


def write_raster(path, array: np.ndarray, dtype: str) -> None:
    """Raw little-endian, row-major raster."""
    arr = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
    Path(path).write_bytes(arr.tobytes(order="C"))


def read_raster(path, shape, dtype: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"))
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {np.prod(shape)} values, found {arr.size}")
    return arr.reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def dump_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_case(case_dir, case: CaseRecord) -> None:
    d = Path(case_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_raster(d / "image.f32", case.image, "f4")
    write_raster(d / "roi.u8", case.roi_mask, "u1")
    write_raster(d / "tissue.u8", case.tissue_labels, "u1")
    write_raster(d / "segments.u8", case.segment_labels, "u1")
    if case.anomaly_mask is not None:
        write_raster(d / "anomaly.u8", case.anomaly_mask, "u1")
    H, W = case.image.shape
    dump_json(
        d / "manifest.json",
        {
            "case_id": case.case_id,
            "site": case.site,
            "height": H,
            "width": W,
            "seed": case.seed,
            "is_anomalous": case.is_anomalous,
            "anomaly_segments": list(case.anomaly_segments),
            "anomalies": [dataclasses.asdict(a) for a in case.anomalies],
        },
    )


def read_case(case_dir) -> CaseRecord:
    d = Path(case_dir)
    meta = json.loads((d / "manifest.json").read_text())
    shape = (meta["height"], meta["width"])
    anomaly = read_raster(d / "anomaly.u8", shape, "u1") if (d / "anomaly.u8").exists() else None
    return CaseRecord(
        image=read_raster(d / "image.f32", shape, "f4"),
        roi_mask=read_raster(d / "roi.u8", shape, "u1"),
        tissue_labels=read_raster(d / "tissue.u8", shape, "u1"),
        segment_labels=read_raster(d / "segments.u8", shape, "u1"),
        seed=int(meta["seed"]),
        anomaly_mask=anomaly,
        is_anomalous=bool(meta["is_anomalous"]),
        anomaly_segments=list(meta["anomaly_segments"]),
        anomalies=[
            AnomalySpec(**{**a, "center": tuple(a["center"])}) for a in meta.get("anomalies", [])
        ],
        case_id=meta.get("case_id", d.name),
        site=meta.get("site", ""),
    )


def write_corpus(out_dir, healthy, target, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, cases in (("healthy", healthy), ("target", target)):
        for c in cases:
            write_case(out / c.case_id, c)
            entries.append(
                {
                    "case_id": c.case_id,
                    "dir": c.case_id,
                    "split": split,
                    "is_anomalous": c.is_anomalous,
                    "anomaly_segments": list(c.anomaly_segments),
                }
            )
    index = {"cases": entries, **(extra or {})}
    dump_json(out / INDEX_NAME, index)
    return out / INDEX_NAME


def read_corpus(data_dir, split: str | None = None) -> list[CaseRecord]:
    root = Path(data_dir)
    index_path = root / INDEX_NAME
    if not index_path.exists():
        raise PreconditionError(f"missing corpus index {index_path} (run gen-data first)")
    index = json.loads(index_path.read_text())
    return [
        read_case(root / e["dir"])
        for e in index["cases"]
        if split is None or e["split"] == split
    ]


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
