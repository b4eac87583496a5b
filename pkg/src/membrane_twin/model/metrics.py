"""Reconstruction error statistics, overall and per deformation-magnitude bin."""

from __future__ import annotations

import csv
import json
import math

import numpy as np

from .chamfer import chamfer_eval_mm, nn_error_map

BIN_EDGES = (0.0, 10.0, 12.5, 15.0, 17.5, 20.0, 25.0, math.inf)
STAT_FIELDS = ("count", "min", "q1", "median", "q3", "max", "mean", "std")


def bin_index(delta_z, edges=BIN_EDGES):
    """Half-open bins ``[lo, hi)``; values below the first edge go to bin 0."""
    idx = np.searchsorted(np.asarray(edges), np.asarray(delta_z, dtype=float), side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def bin_label(k, edges=BIN_EDGES):
    lo, hi = edges[k], edges[k + 1]
    return f"[{lo:.2f}, {'inf' if math.isinf(hi) else f'{hi:.2f}'})"


def describe(values) -> dict:
    """count/min/quartiles/max/mean/std; quartiles interpolate linearly, std uses n-1."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return {"count": 0, **{k: math.nan for k in STAT_FIELDS[1:]}}
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    return {
        "count": int(v.size), "min": float(v[0]), "q1": float(q1), "median": float(med),
        "q3": float(q3), "max": float(v[-1]), "mean": float(np.mean(v)),
        "std": float(np.std(v - v[0], ddof=1)) if v.size > 1 else 0.0,  # shift keeps constants exact
    }


def per_sample_errors(gt_clouds, pred_clouds) -> np.ndarray:
    if len(gt_clouds) == 0:
        raise ValueError("empty test set")
    if len(gt_clouds) != len(pred_clouds):
        raise ValueError("truth and prediction counts differ")
    return np.array([chamfer_eval_mm(g, p) for g, p in zip(gt_clouds, pred_clouds)])


def summarize(errors, delta_z, edges=BIN_EDGES, hist_bins=20) -> dict:
    """Overall statistics, Δz-binned statistics and an error histogram."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("empty test set")
    idx = bin_index(delta_z, edges)
    bins = []
    for k in range(len(edges) - 1):
        bins.append({"bin": bin_label(k, edges), "lo": edges[k], "hi": edges[k + 1],
                     **describe(errors[idx == k])})
    counts, hedges = np.histogram(errors, bins=hist_bins)
    return {
        "overall": describe(errors),
        "bins": bins,
        "histogram": {"edges": hedges.tolist(), "counts": counts.tolist()},
    }


def evaluate(gt_clouds, pred_clouds, delta_z, edges=BIN_EDGES):
    """Summary dict plus the per-sample errors it was computed from."""
    errors = per_sample_errors(gt_clouds, pred_clouds)
    return summarize(errors, delta_z, edges), errors


def max_bin_ratio(summary, min_count=1) -> float:
    """Largest per-bin mean divided by the overall mean (populated bins only)."""
    means = [b["mean"] for b in summary["bins"] if b["count"] >= min_count]
    return max(means) / summary["overall"]["mean"]


def nn_maps(gt_clouds, pred_clouds):
    """Per-point NN distances and ``nnd_max`` for every sample."""
    return [nn_error_map(g, p) for g, p in zip(gt_clouds, pred_clouds)]


def write_bins_csv(path, summary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", *STAT_FIELDS])
        for b in summary["bins"]:
            w.writerow([b["bin"], *(b[k] for k in STAT_FIELDS)])


def write_summary_json(path, summary):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, allow_nan=True)


def write_samples_csv(path, names, errors, delta_z, nnd_max):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth_file", "delta_z_mm", "cd_mm", "nnd_max_mm"])
        for row in zip(names, delta_z, errors, nnd_max):
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])
