"""Two-stage training: point-cloud autoencoder, then feature-to-latent regressor."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .. import tensor as T
from .chamfer import chamfer_eval_mm, chamfer_loss
from .networks import AutoEncoder, Regressor

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 100
    optimizer: str = "adam"          # adam | sgd_momentum
    lr0: float = 1e-3
    scheduler: str = "plateau"       # plateau | cosine
    factor: float = 0.2
    patience: int = 3
    t_max: int = 100
    momentum: float = 0.9
    early_stopping: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.scheduler not in ("plateau", "cosine"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")

    def to_dict(self):
        return asdict(self)


def autoencoder_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"optimizer": "adam", "scheduler": "plateau", **overrides})


def regressor_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"optimizer": "sgd_momentum", "scheduler": "cosine", **overrides})


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    epochs_run: int = 0
    stopped_early: bool = False
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def converged_within(self, tol=0.05):
        """First epoch whose validation loss is within ``tol`` (relative) of the best."""
        for k, v in enumerate(self.val_loss):
            if v <= self.best_val * (1 + tol):
                return k
        return None


def split_indices(n, val_fraction=0.1, seed=0):
    """Shuffled train/validation split with a fixed seed."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        opt = T.Adam(params, lr=cfg.lr0)
    else:
        opt = T.SGDMomentum(params, lr=cfg.lr0, momentum=cfg.momentum)
    if cfg.scheduler == "plateau":
        sched = T.PlateauScheduler(opt, cfg.factor, cfg.patience)
    else:
        sched = T.CosineScheduler(opt, cfg.t_max)
    return opt, sched


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _fit(module, params, loss_fn, eval_fn, n_train, cfg: TrainConfig, report: TrainReport, label):
    """Shared epoch loop: shuffle, step, validate, schedule, keep the best weights."""
    rng = np.random.default_rng(cfg.seed + 1)
    opt, sched = _make_optimizer(params, cfg)
    stopper = T.EarlyStopping(cfg.early_stopping)
    best_state = [p.data.copy() for p in params]
    for epoch in range(cfg.max_epochs):
        total = 0.0
        for idx in _batches(n_train, cfg.batch_size, rng):
            opt.zero_grad()
            loss = loss_fn(idx)
            if not np.isfinite(loss.data):
                raise TrainingDivergence(f"{label}: non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        val = eval_fn()
        if not np.isfinite(val):
            raise TrainingDivergence(f"{label}: non-finite validation loss at epoch {epoch}")
        report.train_loss.append(total / n_train)
        report.val_loss.append(val)
        report.lr.append(opt.lr)
        report.epochs_run = epoch + 1
        if stopper.update(epoch, val):
            best_state = [p.data.copy() for p in params]
        log.info("%s epoch %d train %.6g val %.6g lr %.3g", label, epoch, total / n_train, val, opt.lr)
        sched.step(val)
        if stopper.should_stop:
            report.stopped_early = True
            break
    for p, a in zip(params, best_state):
        p.data = a
    report.best_epoch = stopper.best_epoch
    report.best_val = stopper.best
    return report


def _batched_loss(model_fn, clouds, trees, batch):
    total = 0.0
    with T.no_grad():
        for i in range(0, len(clouds), batch):
            pred = model_fn(clouds[i:i + batch])
            total += float(chamfer_loss(pred, clouds[i:i + batch], trees[i:i + batch]).data) * len(pred.data)
    return total / len(clouds)


def train_autoencoder(train_clouds, val_clouds, config: TrainConfig, latent, n_points):
    """Fit encoder and decoder on ground-truth clouds with the squared Chamfer loss.

    Args:
        train_clouds, val_clouds: arrays ``(N, M_gt, 3)`` in mm.
        config: optimiser and schedule settings (Adam + plateau by default).
        latent: latent size ``L``.
        n_points: predicted cloud size ``M_pr``.

    Returns:
        (autoencoder, report). The autoencoder holds the weights of the epoch
        with the lowest validation loss.
    """
    train_clouds = np.asarray(train_clouds, dtype=np.float64)
    val_clouds = np.asarray(val_clouds, dtype=np.float64)
    ae = AutoEncoder(latent, n_points, seed=config.seed)
    train_trees = [cKDTree(c) for c in train_clouds]
    val_trees = [cKDTree(c) for c in val_clouds]

    def loss_fn(idx):
        pred = ae(train_clouds[idx])
        return chamfer_loss(pred, train_clouds[idx], [train_trees[i] for i in idx])

    def eval_fn():
        return _batched_loss(ae, val_clouds, val_trees, config.batch_size)

    report = TrainReport()
    _fit(ae, ae.parameters(), loss_fn, eval_fn, len(train_clouds), config, report, "autoencoder")
    return ae, report


def encode(encoder, clouds, batch=64) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(clouds), batch):
            out.append(encoder(np.asarray(clouds[i:i + batch])).data)
    return np.concatenate(out)


def decode(decoder, latents, batch=256) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(latents), batch):
            out.append(decoder(T.Tensor(latents[i:i + batch])).data)
    return np.concatenate(out)


def latent_loss(pred: T.Tensor, target) -> T.Tensor:
    """Squared Euclidean error per sample, averaged over the batch."""
    return T.square(pred - target).sum() * (1.0 / pred.shape[0])


def predict_latents(regressor, features, batch=1024) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(features), batch):
            out.append(regressor(features[i:i + batch]).data)
    return np.concatenate(out)


def train_regressor(train_x, train_z, val_x, val_z, config: TrainConfig, frozen=None):
    """Fit the feature-to-latent MLP against fixed latent targets.

    Args:
        train_x, val_x: normalised feature rows ``(N, n_features)``.
        train_z, val_z: target latents ``E(S_gt)``.
        config: SGD with momentum and cosine annealing by default.
        frozen: optional modules that must not change; their checksums are
            compared before and after training.

    Returns:
        (regressor, report)
    """
    train_x, val_x = np.asarray(train_x, float), np.asarray(val_x, float)
    train_z, val_z = np.asarray(train_z, float), np.asarray(val_z, float)
    before = [m.checksum() for m in (frozen or [])]
    h = Regressor(train_x.shape[1], train_z.shape[1], np.random.default_rng(config.seed))

    def loss_fn(idx):
        return latent_loss(h(train_x[idx]), train_z[idx])

    def eval_fn():
        pred = predict_latents(h, val_x)
        return float(np.mean(np.sum((pred - val_z) ** 2, axis=1)))

    report = TrainReport()
    _fit(h, h.parameters(), loss_fn, eval_fn, len(train_x), config, report, "regressor")
    after = [m.checksum() for m in (frozen or [])]
    if before != after:
        raise RuntimeError("frozen autoencoder parameters changed during regressor training")
    report.extras["frozen_checksums"] = after
    return h, report


def mean_chamfer_mm(gt_clouds, pred_clouds) -> float:
    return float(np.mean([chamfer_eval_mm(g, p) for g, p in zip(gt_clouds, pred_clouds)]))
