"""Feature vector in, point cloud out: normalisation, regressor, frozen decoder."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import readout as R
from .. import tensor as T
from ..tensor import checkpoint
from .networks import AutoEncoder, Regressor, regressor_arch
from .training import (autoencoder_config, decode, encode, predict_latents, regressor_config,
                       split_indices, train_autoencoder, train_regressor)


class Pipeline:
    """Reconstruction ``S_pr = D(h(v))`` with the statistics ``h`` was trained on.

    Args:
        ae: trained autoencoder; only its decoder is used at inference.
        regressor: feature-to-latent MLP.
        stats: normalisation fitted on the training features.
        channels: optional subset of feature channels the regressor sees
            (reduced models); ``None`` means all.
    """

    def __init__(self, ae: AutoEncoder, regressor: Regressor, stats: R.NormStats, channels=None):
        self.ae = ae
        self.regressor = regressor
        self.stats = stats
        self.channels = None if channels is None else np.asarray(channels, dtype=int)

    @property
    def n_points(self):
        return self.ae.arch["n_points"]

    def normalize(self, raw_rows) -> np.ndarray:
        return R.normalize_array(raw_rows, self.stats)

    def feature_vector(self, raw_row) -> R.FeatureVector:
        return R.FeatureVector(self.normalize(raw_row)[0], self.stats.source)

    def _select(self, x):
        return x if self.channels is None else x[:, self.channels]

    def reconstruct(self, v: R.FeatureVector) -> np.ndarray:
        """One predicted cloud ``(M_pr, 3)`` from a normalised feature vector."""
        if v.norm_source != self.stats.source:
            raise R.NormSourceMismatch(
                f"features normalised with {v.norm_source!r}, model trained with {self.stats.source!r}")
        x = self._select(np.asarray(v.values, dtype=np.float64)[None, :])
        with T.no_grad():
            return self.ae.decoder(self.regressor(x)).data[0]

    def reconstruct_normalized(self, x) -> np.ndarray:
        """Batch version on already normalised rows ``(n, p*l)``."""
        return decode(self.ae.decoder, predict_latents(self.regressor, self._select(np.asarray(x))))

    def reconstruct_raw(self, raw_rows) -> np.ndarray:
        return self.reconstruct_normalized(self.normalize(raw_rows))

    # persistence -----------------------------------------------------------

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        checkpoint.save(d / "autoencoder.ckpt", self.ae, self.ae.arch)
        checkpoint.save(d / "regressor.ckpt", self.regressor, self._reg_arch())
        (d / "norm_stats.json").write_text(self.stats.to_json())
        meta = {"latent": self.ae.arch["latent"], "n_points": self.n_points,
                "n_features": self.regressor.n_features,
                "channels": None if self.channels is None else self.channels.tolist()}
        (d / "pipeline.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    def _reg_arch(self):
        return regressor_arch(self.regressor.n_features, self.ae.arch["latent"])

    @classmethod
    def load(cls, directory) -> "Pipeline":
        d = Path(directory)
        meta = json.loads((d / "pipeline.json").read_text())
        ae = load_autoencoder(d / "autoencoder.ckpt")
        h = Regressor(meta["n_features"], meta["latent"], np.random.default_rng(0))
        checkpoint.load_into(d / "regressor.ckpt", h, regressor_arch(meta["n_features"], meta["latent"]))
        stats = R.NormStats.from_json((d / "norm_stats.json").read_text())
        return cls(ae, h, stats, meta["channels"])


def load_autoencoder(path) -> AutoEncoder:
    arch, _ = checkpoint.read(path)
    ae = AutoEncoder(arch["latent"], arch["n_points"])
    checkpoint.load_into(path, ae, arch)
    return ae


def train_norm(dataset, train_idx) -> R.NormStats:
    """Channel statistics over the training split, tagged with their origin."""
    return R.fit_norm(dataset.features_raw[train_idx], source=f"{dataset.dataset_id}:train")


def fit_regressor_stage(ae, dataset, train_idx, val_idx, config, stats=None, channels=None):
    """Stage 2 on a dataset: cache ``E(S_gt)`` targets, fit ``h``, return a pipeline."""
    stats = stats or train_norm(dataset, train_idx)
    z = encode(ae.encoder, dataset.clouds)
    x = R.normalize_array(dataset.features_raw, stats)
    if channels is not None:
        x = x[:, channels]
    h, report = train_regressor(x[train_idx], z[train_idx], x[val_idx], z[val_idx], config,
                                frozen=[ae.encoder, ae.decoder])
    return Pipeline(ae, h, stats, channels), report


def fit_pipeline(dataset, latent, n_points, ae_config=None, mlp_config=None, val_fraction=0.1, seed=0):
    """Both stages on one dataset with a seeded train/validation split."""
    ae_config = ae_config or autoencoder_config(seed=seed)
    mlp_config = mlp_config or regressor_config(seed=seed)
    tr, va = split_indices(len(dataset), val_fraction, seed)
    ae, ae_report = train_autoencoder(dataset.clouds[tr], dataset.clouds[va], ae_config, latent, n_points)
    pipe, mlp_report = fit_regressor_stage(ae, dataset, tr, va, mlp_config)
    return pipe, ae_report, mlp_report
