"""Grouped SAGE attribution for the regressor and progressive feature inclusion.

Players are whole groups: one LED (all PDs read under it) or one PD (all LEDs
seen by it). Excluded features are marginalised by averaging the model output
over a fixed set of background rows drawn from the training features, which
makes ``u(S)`` a deterministic set function so every sampled permutation
telescopes to exactly ``u(full) - u(empty)``.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model.metrics import per_sample_errors
from .model.pipeline import fit_regressor_stage

LED, PD = "LED", "PD"
ORDERS = ("sage_desc", "sage_asc", "natural")


@dataclass(frozen=True)
class FeatureGroup:
    kind: str
    index: int
    members: tuple


def led_groups(n_pds, n_leds):
    """LED ``i`` owns channels ``p*i + j`` for every PD ``j`` (0-based)."""
    return [FeatureGroup(LED, i, tuple(n_pds * i + j for j in range(n_pds))) for i in range(n_leds)]


def pd_groups(n_pds, n_leds):
    return [FeatureGroup(PD, j, tuple(n_pds * i + j for i in range(n_leds))) for j in range(n_pds)]


def groups_for(kind, n_pds, n_leds):
    if kind == LED:
        return led_groups(n_pds, n_leds)
    if kind == PD:
        return pd_groups(n_pds, n_leds)
    raise ValueError(f"unknown group kind {kind!r}")


def check_partition(groups, n_features):
    seen = np.zeros(n_features, dtype=int)
    for g in groups:
        idx = np.asarray(g.members, dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= n_features):
            raise ValueError("group member outside the feature vector")
        np.add.at(seen, idx, 1)
    if not np.all(seen == 1):
        raise ValueError("groups do not partition the feature set")


def channels_of(groups):
    return np.array(sorted(m for g in groups for m in g.members), dtype=int)


# -- predictive power --------------------------------------------------------


class regressor_fn:
    """Picklable ``x -> h(x)`` wrapper so permutations can run in worker processes."""

    def __init__(self, regressor):
        self.regressor = regressor

    def __call__(self, x):
        with T.no_grad():
            return self.regressor(x).data


class PredictivePower:
    """``u(S) = loss(h_empty) - loss(h_S)`` on a fixed evaluation subset.

    Args:
        model_fn: maps feature rows ``(n, d)`` to predictions ``(n, L)``.
        x_eval, z_eval: evaluation features and latent targets.
        background: pool of feature rows for the empirical marginal.
        n_background: fixed draws from ``background`` shared by every ``u``;
            ``None`` uses every background row once.
        seed: selects the background draws.
    """

    def __init__(self, model_fn, x_eval, z_eval, background, n_background=16, seed=0):
        self.model_fn = model_fn
        self.x = np.asarray(x_eval, dtype=np.float64)
        self.z = np.asarray(z_eval, dtype=np.float64)
        if len(self.x) == 0:
            raise ValueError("empty evaluation set")
        background = np.asarray(background, dtype=np.float64)
        if n_background is None:
            self.background = background
        else:
            pick = np.random.default_rng(seed).choice(len(background), n_background,
                                                      replace=n_background > len(background))
            self.background = background[pick]
        self._cache = {}
        self.baseline_loss = self.loss(np.zeros(self.x.shape[1], dtype=bool))

    def loss(self, mask) -> float:
        """Mean squared latent error of the model restricted to ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        key = mask.tobytes()
        if key not in self._cache:
            n, nb = len(self.x), len(self.background)
            if mask.all():
                pred = self.model_fn(self.x)
            else:
                mixed = np.where(mask, self.x[:, None, :], self.background[None, :, :])
                pred = self.model_fn(mixed.reshape(n * nb, -1)).reshape(n, nb, -1).mean(axis=1)
            self._cache[key] = float(np.mean(np.sum((pred - self.z) ** 2, axis=1)))
        return self._cache[key]

    def __call__(self, mask) -> float:
        return self.baseline_loss - self.loss(mask)

    def of_groups(self, groups, chosen) -> float:
        mask = np.zeros(self.x.shape[1], dtype=bool)
        for k in chosen:
            mask[list(groups[k].members)] = True
        return self(mask)


# -- Shapley over players ----------------------------------------------------


def permutation_gains(value, n_players, perm):
    """Marginal gain of each player when added in the order ``perm``."""
    gains = np.empty(n_players)
    prefix, prev = [], value(())
    for k in perm:
        prefix.append(int(k))
        cur = value(tuple(sorted(prefix)))
        gains[k] = cur - prev
        prev = cur
    return gains


def _permutations(n_players, n_permutations, seed):
    if n_permutations is None:
        return [np.array(p) for p in itertools.permutations(range(n_players))]
    return [np.random.default_rng([seed, k]).permutation(n_players) for k in range(n_permutations)]


def shapley(value, n_players, n_permutations=None, seed=0):
    """Permutation estimate of Shapley values for a set function ``value``.

    Args:
        value: callable on a sorted tuple of player indices.
        n_permutations: number of sampled orders; ``None`` enumerates all.

    Returns:
        (phi, stderr, n_perms). ``stderr`` is the per-player standard deviation
        of the marginal gains across orders divided by ``sqrt(n_perms)``.
    """
    gains = np.array([permutation_gains(value, n_players, p)
                      for p in _permutations(n_players, n_permutations, seed)])
    n = len(gains)
    stderr = gains.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(n_players, math.nan)
    return gains.mean(axis=0), stderr, n


def exact_shapley(value, n_players):
    """Subset-weighted Shapley formula, for checking the estimator."""
    phi = np.zeros(n_players)
    for i in range(n_players):
        others = [k for k in range(n_players) if k != i]
        for r in range(n_players):
            w = math.factorial(r) * math.factorial(n_players - r - 1) / math.factorial(n_players)
            for S in itertools.combinations(others, r):
                phi[i] += w * (value(tuple(sorted(S + (i,)))) - value(tuple(sorted(S))))
    return phi


@dataclass
class SageReport:
    kind: str
    groups: list
    phi: np.ndarray
    stderr: np.ndarray
    baseline_loss: float
    u_full: float
    n_perms: int
    u_empty: float = 0.0
    extras: dict = field(default_factory=dict)

    def ranking(self, order="sage_desc"):
        """Group indices in the requested inclusion order (stable on ties)."""
        n = len(self.phi)
        if order == "sage_desc":
            return list(np.argsort(-self.phi, kind="stable"))
        if order == "sage_asc":
            return list(np.argsort(self.phi, kind="stable"))
        if order == "natural":
            return list(range(n))
        raise ValueError(f"unknown order {order!r}")

    def efficiency_gap(self):
        """``sum(phi) - (u_full - u_empty)`` and the standard error of the sum."""
        return float(self.phi.sum() - (self.u_full - self.u_empty)), float(np.sqrt(np.sum(self.stderr ** 2)))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group_kind", "group_index", "phi", "stderr"])
            for g, p, s in zip(self.groups, self.phi, self.stderr):
                w.writerow([g.kind, g.index, repr(float(p)), repr(float(s))])

    def write_layout_csv(self, path, layout):
        pos = layout.led_positions if self.kind == LED else layout.pd_positions
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group_kind", "group_index", "x_mm", "y_mm", "phi", "stderr"])
            for g, p, s in zip(self.groups, self.phi, self.stderr):
                x, y = pos[g.index]
                w.writerow([g.kind, g.index, repr(float(x)), repr(float(y)), repr(float(p)), repr(float(s))])


def _perm_chunk(args):
    power, groups, perms = args
    value = lambda S: power.of_groups(groups, S)  # noqa: E731
    return [permutation_gains(value, len(groups), p) for p in perms]


def sage(groups, power: PredictivePower, n_permutations=64, seed=0, jobs=1) -> SageReport:
    """Grouped SAGE values with groups as players.

    Permutation ``k`` is drawn from its own seed ``(seed, k)`` so results do
    not depend on ``jobs``; gains are accumulated in permutation order.
    """
    check_partition(groups, power.x.shape[1])
    n = len(groups)
    perms = _permutations(n, n_permutations, seed)
    if jobs > 1 and len(perms) > 1:
        chunks = np.array_split(np.arange(len(perms)), jobs)
        with ProcessPoolExecutor(jobs) as pool:
            parts = pool.map(_perm_chunk, [(power, groups, [perms[i] for i in c]) for c in chunks])
            gains = np.array([g for part in parts for g in part])
    else:
        gains = np.array(_perm_chunk((power, groups, perms)))
    m = len(gains)
    stderr = gains.std(axis=0, ddof=1) / math.sqrt(m) if m > 1 else np.full(n, math.nan)
    return SageReport(groups[0].kind if groups else "", list(groups), gains.mean(axis=0), stderr,
                      power.baseline_loss, power.of_groups(groups, tuple(range(n))), m)


# -- progressive inclusion ---------------------------------------------------


@dataclass
class InclusionCurve:
    order: str
    kind: str
    ks: list
    errors: list
    group_order: list

    def plateau(self, reference, tol=0.05):
        """Smallest K whose error is within ``tol`` (relative) of ``reference``."""
        for k, e in zip(self.ks, self.errors):
            if e <= reference * (1 + tol):
                return k
        return None


def progressive_inclusion(order, kind, ks, report: SageReport | None, ae, train, train_idx, val_idx,
                          test, config, stats=None):
    """Retrain a reduced regressor on the first ``K`` groups for each ``K``.

    The decoder is shared and untouched; errors are mean test Chamfer (mm).
    """
    groups = groups_for(kind, train.layout.n_pds, train.layout.n_leds)
    if order == "natural":
        ranking = list(range(len(groups)))
    else:
        if report is None or report.kind != kind:
            raise ValueError(f"{order} needs a SAGE report for {kind} groups")
        ranking = report.ranking(order)
    errors = []
    for K in ks:
        if not 1 <= K <= len(groups):
            raise ValueError(f"K={K} outside 1..{len(groups)}")
        chans = channels_of([groups[i] for i in ranking[:K]])
        pipe, _ = fit_regressor_stage(ae, train, train_idx, val_idx, config, stats=stats, channels=chans)
        errors.append(float(per_sample_errors(test.clouds, pipe.reconstruct_raw(test.features_raw)).mean()))
    return InclusionCurve(order, kind, list(ks), errors, [int(i) for i in ranking])


def write_curves_csv(path, curves, seed=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "order", "kind", "K", "mean_mm"])
        for c in curves:
            for k, e in zip(c.ks, c.errors):
                w.writerow([seed if seed is not None else "", c.order, c.kind, k, repr(e)])
