"""Point-set encoder, grid decoder and the feature-to-latent regressor."""

from __future__ import annotations

import math

import numpy as np

from .. import tensor as T
from ..geometry import DEFAULT_WIDTH

ENCODER_WIDTHS = (64, 128, 256)
DECODER_CHANNELS = (256, 128, 64, 32)
REGRESSOR_WIDTHS = (512, 512)
# fixed input/output scaling so the networks see O(1) numbers
COORD_SCALE = np.array([DEFAULT_WIDTH / 2, DEFAULT_WIDTH / 2, 10.0])
OUTPUT_SCALE = 10.0


class PointNetEncoder(T.Module):
    """Shared point-wise MLP, max-pool over points, then a linear map to ``L``."""

    def __init__(self, latent, rng, widths=ENCODER_WIDTHS):
        super().__init__()
        self.latent = latent
        self.point_mlp = T.MLP((3, *widths), rng, final_relu=True)
        self.head = T.Linear(widths[-1], latent, rng)

    def pooled_array(self, clouds):
        """Max-pooled point features and, per channel, the first maximising point."""
        x = np.asarray(clouds, dtype=np.float64) / COORD_SCALE
        B, M, _ = x.shape
        feats = self.point_mlp.forward_array(x).reshape(B, M, -1)
        top = feats.max(axis=1)
        return top, np.argmax(feats == top[:, None, :], axis=1)

    def forward(self, clouds):
        if isinstance(clouds, T.Tensor):
            return self.head(T.global_max_pool(self.point_mlp(clouds), axis=1))
        if not T.grad_enabled():
            return self.head(T.Tensor(self.pooled_array(clouds)[0]))
        # Only the maximising points receive gradient, so the graph is built
        # on those alone: ascending order, padded by repeating the last one.
        # The pooled values and gradients equal those of the full set.
        _, arg = self.pooled_array(clouds)
        arg.sort(axis=1)
        keep = np.empty_like(arg)
        for b, row in enumerate(arg):
            u = np.unique(row)
            keep[b, : len(u)] = u
            keep[b, len(u):] = u[-1]
        x = np.asarray(clouds, dtype=np.float64)[np.arange(len(arg))[:, None], keep] / COORD_SCALE
        return self.head(T.global_max_pool(self.point_mlp(T.Tensor(x)), axis=1))


def base_grid(side, width=DEFAULT_WIDTH):
    """Cell-centred ``side x side`` lattice over the membrane at z = 0."""
    c = -width / 2 + (np.arange(side) + 0.5) * width / side
    X, Y = np.meshgrid(c, c[::-1])
    return np.stack([X.ravel(), Y.ravel(), np.zeros(side * side)], axis=1)


def upsampling_stages(side, max_stages=3):
    n = 0
    while n < max_stages and side % (2 ** (n + 1)) == 0:
        n += 1
    return n


class GridDecoder(T.Module):
    """Latent -> seed feature map -> stride-2 transposed convolutions -> xyz.

    The output image has ``side x side`` pixels, one point each. A fixed
    lattice is added to the predicted coordinates so an untrained decoder
    already emits a flat sheet.
    """

    def __init__(self, latent, n_points, rng, channels=DECODER_CHANNELS):
        super().__init__()
        side = math.isqrt(n_points)
        if side * side != n_points:
            raise ValueError(f"GridDecoder needs a square point count, got {n_points}")
        self.side = side
        self.n_stages = upsampling_stages(side)
        self.seed_side = side // 2 ** self.n_stages
        chans = channels[: self.n_stages + 1]
        self.seed_channels = chans[0]
        self.seed = T.Linear(latent, chans[0] * self.seed_side ** 2, rng)
        for k in range(self.n_stages):
            setattr(self, f"up{k}", T.ConvTranspose2d(chans[k], chans[k + 1], rng))
        self.head = T.Linear(chans[-1], 3, rng)
        self.base = base_grid(side)

    def forward(self, z):
        B = z.shape[0]
        x = T.relu(self.seed(z)).reshape(B, self.seed_channels, self.seed_side, self.seed_side)
        for k in range(self.n_stages):
            x = T.relu(getattr(self, f"up{k}")(x))
        C = x.shape[1]
        x = x.reshape(B, C, self.side * self.side).transpose(0, 2, 1)
        return self.head(x) * OUTPUT_SCALE + self.base


class FCDecoder(T.Module):
    """Fully connected fallback for point counts that are not perfect squares."""

    def __init__(self, latent, n_points, rng, widths=(512, 1024)):
        super().__init__()
        self.n_points = n_points
        self.mlp = T.MLP((latent, *widths, 3 * n_points), rng)
        side = math.ceil(math.sqrt(n_points))
        self.base = base_grid(side)[:n_points]

    def forward(self, z):
        return self.mlp(z).reshape(z.shape[0], self.n_points, 3) * OUTPUT_SCALE + self.base


def make_decoder(latent, n_points, rng):
    side = math.isqrt(n_points)
    if side * side == n_points:
        return GridDecoder(latent, n_points, rng)
    return FCDecoder(latent, n_points, rng)


class Regressor(T.Module):
    """MLP from the normalised feature vector to the latent code."""

    def __init__(self, n_features, latent, rng, widths=REGRESSOR_WIDTHS):
        super().__init__()
        self.n_features = n_features
        self.mlp = T.MLP((n_features, *widths, latent), rng)

    def forward(self, v):
        return self.mlp(T.as_tensor(v))


def autoencoder_arch(latent, n_points):
    kind = "grid" if math.isqrt(n_points) ** 2 == n_points else "fc"
    return {"model": "autoencoder", "decoder": kind, "latent": latent, "n_points": n_points,
            "encoder_widths": list(ENCODER_WIDTHS), "decoder_channels": list(DECODER_CHANNELS)}


def regressor_arch(n_features, latent):
    return {"model": "regressor", "n_features": n_features, "latent": latent,
            "widths": list(REGRESSOR_WIDTHS)}


class AutoEncoder(T.Module):
    def __init__(self, latent, n_points, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.encoder = PointNetEncoder(latent, rng)
        self.decoder = make_decoder(latent, n_points, rng)
        self.arch = autoencoder_arch(latent, n_points)

    def forward(self, clouds):
        return self.decoder(self.encoder(clouds))
