"""Latent size x predicted point count grid search."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .metrics import per_sample_errors
from .pipeline import fit_pipeline
from .training import autoencoder_config, regressor_config

DEFAULT_LATENTS = (64, 128, 256)
DEFAULT_POINTS = (256, 1024)
CSV_FIELDS = ("L", "M_pr", "mean_mm", "std_mm", "status")


@dataclass
class SweepCell:
    L: int
    M_pr: int
    mean_mm: float = math.nan
    std_mm: float = math.nan
    status: str = "ok"

    @property
    def ok(self):
        return self.status == "ok"


def run_cell(args) -> SweepCell:
    """Train both stages for one (L, M_pr) pair and score them on the test set."""
    L, M, train, test, ae_kw, mlp_kw, seed = args
    try:
        pipe, _, _ = fit_pipeline(train, L, M, autoencoder_config(seed=seed, **ae_kw),
                                  regressor_config(seed=seed, **mlp_kw), seed=seed)
        err = per_sample_errors(test.clouds, pipe.reconstruct_raw(test.features_raw))
        return SweepCell(L, M, float(err.mean()), float(err.std(ddof=1)) if len(err) > 1 else 0.0)
    except Exception as exc:  # recorded per cell, the grid continues
        return SweepCell(L, M, status=f"failed: {type(exc).__name__}: {exc}")


def sweep(train, test, latents=DEFAULT_LATENTS, points=DEFAULT_POINTS, ae_kw=None, mlp_kw=None,
          seed=0, jobs=1):
    """Every (L, M_pr) combination, in row-major order of ``latents`` then ``points``."""
    tasks = [(L, M, train, test, ae_kw or {}, mlp_kw or {}, seed) for L in latents for M in points]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(run_cell, tasks))
    return [run_cell(t) for t in tasks]


def best_cell(cells):
    good = [c for c in cells if c.ok]
    if not good:
        return None
    return good[int(np.argmin([c.mean_mm for c in good]))]


def write_csv(path, cells):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for c in cells:
            w.writerow([c.L, c.M_pr, repr(c.mean_mm), repr(c.std_mm), c.status])
