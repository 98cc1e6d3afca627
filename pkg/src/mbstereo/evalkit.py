"""Evaluation: end-point error, >k px outlier rates, D1, with OCC/NOC/ALL
region splits taken from ground-truth occlusion masks, plus report files.

Only the teacher network performs inference.  Evaluation pairs are the
adjacent leftmost views (reference = view 0, target = view 1), fixed across
runs so ablation rows stay comparable.  Aggregation is a deterministic fold
in frame-index order; the ALL row is assembled from the OCC and NOC
accumulators, so it equals their pixel-count-weighted combination exactly.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import stereonet
from .dataio import Dataset, read_dataset

log = logging.getLogger(__name__)

REGIONS = ("OCC", "NOC", "ALL")


# ---------------------------------------------------------------------------
# metric primitives
# ---------------------------------------------------------------------------

def _check_inputs(pred, gt, valid):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or pred.shape != valid.shape:
        raise ValueError("pred, gt and valid must share a shape")
    if not valid.any():
        raise ValueError("empty valid set")
    return pred, gt, valid


def epe(pred, gt, valid) -> float:
    """Mean absolute disparity error over valid pixels."""
    pred, gt, valid = _check_inputs(pred, gt, valid)
    return float(np.abs(pred - gt)[valid].mean())


def outlier_rate(pred, gt, valid, k: float) -> float:
    """Percentage of valid pixels with absolute error greater than k."""
    if k <= 0:
        raise ValueError("outlier threshold k must be positive")
    pred, gt, valid = _check_inputs(pred, gt, valid)
    err = np.abs(pred - gt)[valid]
    return float(100.0 * np.count_nonzero(err > k) / err.size)


def d1_rate(pred, gt, valid) -> float:
    """Percentage of valid pixels whose error exceeds both 3 px absolute and
    5% of the ground truth."""
    pred, gt, valid = _check_inputs(pred, gt, valid)
    gt_v = gt[valid]
    if np.any(gt_v <= 0):
        raise ValueError("d1_rate needs positive ground-truth disparity on valid pixels")
    err = np.abs(pred - gt)[valid]
    bad = (err > 3.0) & (err > 0.05 * gt_v)
    return float(100.0 * np.count_nonzero(bad) / err.size)


def region_split(metric_fn, pred, gt, occ_mask, valid=None) -> dict:
    """Apply a metric per region; empty regions come back as None, not zero."""
    occ_mask = np.asarray(occ_mask, dtype=bool)
    if valid is None:
        valid = np.isfinite(np.asarray(gt, dtype=np.float64))
    masks = {"OCC": valid & occ_mask, "NOC": valid & ~occ_mask, "ALL": valid}
    out = {}
    for region, mask in masks.items():
        n = int(np.count_nonzero(mask))
        out[region] = None if n == 0 else (metric_fn(pred, gt, mask), n)
    return out


# ---------------------------------------------------------------------------
# aggregated rows
# ---------------------------------------------------------------------------

@dataclass
class MetricRow:
    region: str
    epe: float
    outlier_rate: float
    k: float
    d1: float
    n_pixels: int


@dataclass
class _Accum:
    n: int = 0
    abs_err_sum: float = 0.0
    outlier_count: int = 0
    d1_count: int = 0

    def add(self, err: np.ndarray, gt: np.ndarray, k: float) -> None:
        self.n += err.size
        self.abs_err_sum += float(err.sum())
        self.outlier_count += int(np.count_nonzero(err > k))
        self.d1_count += int(np.count_nonzero((err > 3.0) & (err > 0.05 * gt)))

    def row(self, region: str, k: float) -> MetricRow | None:
        if self.n == 0:
            return None
        return MetricRow(region=region, epe=self.abs_err_sum / self.n,
                         outlier_rate=100.0 * self.outlier_count / self.n, k=k,
                         d1=100.0 * self.d1_count / self.n, n_pixels=self.n)


def _combine(occ: _Accum, noc: _Accum) -> _Accum:
    return _Accum(n=occ.n + noc.n,
                  abs_err_sum=occ.abs_err_sum + noc.abs_err_sum,
                  outlier_count=occ.outlier_count + noc.outlier_count,
                  d1_count=occ.d1_count + noc.d1_count)


def metric_rows(pred, gt, occ_mask, k: float = 3.0, valid=None) -> dict:
    """OCC/NOC/ALL MetricRows; ALL is the exact pixel-weighted combination."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    occ_mask = np.asarray(occ_mask, dtype=bool)
    if valid is None:
        valid = np.isfinite(gt)
    acc = {"OCC": _Accum(), "NOC": _Accum()}
    err = np.abs(pred - gt)
    for region, mask in (("OCC", valid & occ_mask), ("NOC", valid & ~occ_mask)):
        if mask.any():
            acc[region].add(err[mask], gt[mask], k)
    rows = {r: acc[r].row(r, k) for r in ("OCC", "NOC")}
    rows["ALL"] = _combine(acc["OCC"], acc["NOC"]).row("ALL", k)
    return rows


# ---------------------------------------------------------------------------
# checkpoint evaluation
# ---------------------------------------------------------------------------

def teacher_predictor(checkpoint: dict):
    """Inference closure over the checkpoint's teacher parameters."""
    teacher = checkpoint.get("teacher")
    if teacher is None:
        raise ValueError("checkpoint is missing teacher parameters")

    def predict(ref: np.ndarray, tgt: np.ndarray) -> np.ndarray:
        rt = torch.from_numpy(np.ascontiguousarray(ref.transpose(2, 0, 1))).float()
        tt = torch.from_numpy(np.ascontiguousarray(tgt.transpose(2, 0, 1))).float()
        with torch.no_grad():
            out = stereonet.forward(teacher, rt, tt)
        return out.disparity.numpy().astype(np.float64)

    return predict


def evaluate_dataset(dataset: Dataset, predict=None, *, oracle: str | None = None,
                     k: float = 3.0) -> dict:
    """Run the predictor over every frame's (view 0, view 1) pair.

    Returns {"rows": aggregate MetricRows, "per_frame": [...]}; the fold over
    frames is in index order and purely additive, so repeated evaluation of
    the same inputs is identical.
    """
    if (predict is None) == (oracle is None):
        raise ValueError("pass exactly one of predict or oracle")
    agg = {"OCC": _Accum(), "NOC": _Accum()}
    per_frame = []
    heat = []
    for idx in range(len(dataset)):
        frame = dataset.load(idx)
        gt = frame.gt_disparity(0, 1).values
        occ = frame.gt_occlusion(0, 1)
        valid = np.isfinite(gt)
        if oracle == "gt":
            pred = gt.copy()
        elif oracle == "zero":
            pred = np.zeros_like(gt)
        elif oracle is not None:
            raise ValueError(f"unknown oracle {oracle!r}")
        else:
            pred = predict(frame.views[0], frame.views[1])
        err = np.abs(pred - gt)
        for region, mask in (("OCC", valid & occ), ("NOC", valid & ~occ)):
            if mask.any():
                agg[region].add(err[mask], gt[mask], k)
        rows = metric_rows(pred, gt, occ, k=k, valid=valid)
        per_frame.append({
            "frame": dataset.frame_names[idx],
            "rows": {r: (asdict(row) if row else None) for r, row in rows.items()},
        })
        heat.append(err)
    rows = {r: agg[r].row(r, k) for r in ("OCC", "NOC")}
    rows["ALL"] = _combine(agg["OCC"], agg["NOC"]).row("ALL", k)
    return {"rows": rows, "per_frame": per_frame, "error_maps": heat}


def evaluate_checkpoint(checkpoint_path, dataset_path, *, out_dir=None, k: float = 3.0,
                        oracle: str | None = None, save_heatmaps: bool = False) -> dict:
    """Evaluate a checkpoint's teacher over a dataset and emit JSON + CSV."""
    dataset = read_dataset(dataset_path)
    checkpoint_id = "oracle:" + oracle if oracle else Path(checkpoint_path).name
    cfg_hash = ""
    if oracle:
        result = evaluate_dataset(dataset, oracle=oracle, k=k)
    else:
        ckpt = stereonet.load_checkpoint(checkpoint_path)
        cfg_hash = ckpt.get("config_hash", "")
        ckpt_seed = _training_dataset_seed(ckpt)
        if ckpt_seed is not None and ckpt_seed == dataset.manifest.get("dataset_seed"):
            log.warning("evaluation dataset shares the training dataset seed %s", ckpt_seed)
        result = evaluate_dataset(dataset, teacher_predictor(ckpt), k=k)

    report = {
        "config_hash": cfg_hash,
        "checkpoint_id": checkpoint_id,
        "dataset": str(dataset_path),
        "k": k,
        "rows": [asdict(r) for r in result["rows"].values() if r is not None],
        "per_frame": result["per_frame"],
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["region", "epe", "outlier_rate", "k", "d1", "n_pixels"])
            for row in report["rows"]:
                w.writerow([row["region"], f"{row['epe']:.6f}", f"{row['outlier_rate']:.6f}",
                            row["k"], f"{row['d1']:.6f}", row["n_pixels"]])
        if save_heatmaps:
            hm = out / "heatmaps"
            hm.mkdir(exist_ok=True)
            for name, err in zip(dataset.frame_names, result["error_maps"]):
                np.savez_compressed(hm / f"{name}.npz", abs_error=err.astype(np.float32))
    return report


def _training_dataset_seed(ckpt: dict):
    try:
        return json.loads(ckpt.get("config_json", "{}"))["dataset"]["seed"]
    except (KeyError, json.JSONDecodeError):
        return None


# ---------------------------------------------------------------------------
# report schema
# ---------------------------------------------------------------------------

_ROW_SCHEMA = {
    "type": "object",
    "required": ["region", "epe", "outlier_rate", "k", "d1", "n_pixels"],
    "properties": {
        "region": {"enum": list(REGIONS)},
        "epe": {"type": "number", "minimum": 0},
        "outlier_rate": {"type": "number", "minimum": 0, "maximum": 100},
        "k": {"type": "number", "exclusiveMinimum": 0},
        "d1": {"type": "number", "minimum": 0, "maximum": 100},
        "n_pixels": {"type": "integer", "minimum": 1},
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["config_hash", "checkpoint_id", "rows", "per_frame"],
    "properties": {
        "config_hash": {"type": "string"},
        "checkpoint_id": {"type": "string"},
        "rows": {"type": "array", "items": _ROW_SCHEMA},
        "per_frame": {"type": "array"},
    },
}


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)
