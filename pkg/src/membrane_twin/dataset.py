"""Synthetic paired dataset: indentations, emulated sensor stream, truth clouds.

Container layout (one directory per generation run)::

    layout.json       sensor layout
    params.json       optics parameters
    frames.bin        concatenated wire-format frames of the whole sensor stream
    truth/NNNNNN.ply  ground-truth cloud per truth frame
    pairs.csv         truth_file,frame_index
    samples.csv       truth_file,tag,delta_z_mm,depth_mm,x_mm,y_mm,yaw_deg
    norm_stats.json   channel statistics over every paired frame of this run
    config.json       generation settings
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from . import geometry as G
from . import optics as O
from . import readout as R

TRUTH_HZ = 30.0
SHAPE_MIX = {s: 1.0 for s in G.SHAPES}


class DataError(RuntimeError):
    pass


@dataclass
class GenConfig:
    n_samples: int = 2000
    seed: int = 0
    noise: bool = True
    g: int = G.DEFAULT_GRID
    width: float = G.DEFAULT_WIDTH
    stride: int = 2
    mix: dict = field(default_factory=lambda: dict(SHAPE_MIX))
    flat_fraction: float = 0.02
    center_box: float = 100.0
    depth_mean: float = 15.0
    depth_std: float = 5.0
    depth_max: float = 25.0

    def to_dict(self):
        return asdict(self)

    def dataset_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def sample_indenter(rng, cfg: GenConfig, shape: str) -> G.Indenter:
    """Random pose and depth; positions are redrawn until the footprint fits."""
    a = (0.0 - cfg.depth_mean) / cfg.depth_std
    b = (cfg.depth_max - cfg.depth_mean) / cfg.depth_std
    depth = float(truncnorm.rvs(a, b, loc=cfg.depth_mean, scale=cfg.depth_std, random_state=rng))
    yaw = float(rng.uniform(0.0, 360.0))
    for _ in range(1000):
        x, y = rng.uniform(-cfg.center_box / 2, cfg.center_box / 2, 2)
        ind = G.Indenter(shape, depth, float(x), float(y), yaw)
        if G.footprint_inside(ind, cfg.g, cfg.width):
            return ind
    raise DataError(f"could not place a {shape} inside the membrane")


def _draw_shape(rng, cfg: GenConfig):
    if rng.uniform() < cfg.flat_fraction:
        return "flat"
    names = sorted(cfg.mix)
    w = np.array([cfg.mix[n] for n in names], dtype=float)
    return names[int(rng.choice(len(names), p=w / w.sum()))]


def synthesize_sample(cfg: GenConfig, k: int, layout: O.SensorLayout, params: O.OpticsParams):
    """Deformation ``k`` of the run: (tag, indenter or None, cloud, analog scan)."""
    rng = np.random.default_rng([cfg.seed, 0, k])
    tag = _draw_shape(rng, cfg)
    if tag == "flat":
        ind, fld = None, G.flat_field(cfg.g, cfg.width)
    else:
        ind = sample_indenter(rng, cfg, tag)
        fld = G.indent(ind, cfg.g, cfg.width)
    cloud = G.to_pointcloud(fld, cfg.stride)
    return tag, ind, cloud, O.scan(fld, layout, params)


def _synthesize_chunk(args):
    cfg, ks, layout, params = args
    return [synthesize_sample(cfg, k, layout, params) for k in ks]


def stream_times(n_samples, n_leds):
    """Sensor frame start times and truth timestamps in microseconds.

    Each deformation is held for one truth period; the truth capture happens
    near the end of its hold.
    """
    period = R.schedule(n_leds).period_us
    hold = 1e6 / TRUTH_HZ
    n_frames = int(math.floor(n_samples * hold / period))
    sensor = np.round(np.arange(n_frames) * period).astype(np.int64)
    truth = np.round(np.arange(n_samples) * hold + 0.95 * hold).astype(np.int64)
    return sensor, truth, hold


def generate(cfg: GenConfig, out_dir, layout=None, params=None, jobs=1):
    """Write a dataset container; returns the loaded :class:`Dataset`."""
    layout = layout or O.default_layout()
    base = params or O.OpticsParams()
    params = base if cfg.noise else O.OpticsParams(**{**asdict(base), "noise": 0.0})
    out = Path(out_dir)
    try:
        (out / "truth").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc

    ks = list(range(cfg.n_samples))
    if jobs > 1:
        chunks = [ks[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_synthesize_chunk, [(cfg, c, layout, params) for c in chunks]))
        results = [None] * cfg.n_samples
        for c, part in zip(chunks, parts):
            for k, r in zip(c, part):
                results[k] = r
    else:
        results = _synthesize_chunk((cfg, ks, layout, params))

    sensor_t, truth_t, hold = stream_times(cfg.n_samples, layout.n_leds)
    with open(out / "frames.bin", "wb") as fh:
        for n, t0 in enumerate(sensor_t):
            k = min(int(t0 // hold), cfg.n_samples - 1)
            frame = R.digitize(results[k][3], params, np.random.default_rng([cfg.seed, 1, n]), n, int(t0))
            fh.write(R.encode_frame(frame))
    pairs = R.align_streams(sensor_t, truth_t)

    rows, sample_rows = [], []
    for k, n in pairs:
        tag, ind, cloud, _ = results[k]
        name = f"truth/{k:06d}.ply"
        G.write_ply(out / name, cloud)
        dz = G.delta_z(np.asarray(cloud, dtype=np.float32).astype(np.float64))
        rows.append((name, n))
        pose = (ind.depth, ind.x, ind.y, ind.yaw) if ind is not None else (0.0, 0.0, 0.0, 0.0)
        sample_rows.append((name, tag, repr(dz), *map(repr, pose)))
    with open(out / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth_file", "frame_index"])
        w.writerows(rows)
    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth_file", "tag", "delta_z_mm", "depth_mm", "x_mm", "y_mm", "yaw_deg"])
        w.writerows(sample_rows)
    (out / "layout.json").write_text(layout.to_json())
    (out / "params.json").write_text(params.to_json())
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    ds = load(out)
    stats = R.fit_norm(ds.features_raw, source=f"dataset:{cfg.dataset_id()}")
    (out / "norm_stats.json").write_text(stats.to_json())
    ds.norm_stats = stats
    return ds


@dataclass
class Dataset:
    root: Path
    layout: O.SensorLayout
    params: O.OpticsParams
    config: dict
    frame_indices: np.ndarray      # sensor frame paired with each truth sample
    features_raw: np.ndarray       # (N, p*l) preprocessed codes, LED-major
    clouds: np.ndarray             # (N, M, 3) truth clouds in mm
    delta_z: np.ndarray
    tags: list
    truth_files: list
    norm_stats: R.NormStats | None = None

    def __len__(self):
        return len(self.clouds)

    @property
    def dataset_id(self) -> str:
        return GenConfig(**self.config).dataset_id()

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.root, self.layout, self.params, self.config, self.frame_indices[idx],
                       self.features_raw[idx], self.clouds[idx], self.delta_z[idx],
                       [self.tags[i] for i in idx], [self.truth_files[i] for i in idx], self.norm_stats)


def load(root) -> Dataset:
    root = Path(root)
    try:
        layout = O.SensorLayout.from_json((root / "layout.json").read_text())
        params = O.OpticsParams.from_json((root / "params.json").read_text())
        config = json.loads((root / "config.json").read_text())
        frames = list(R.iter_frames((root / "frames.bin").read_bytes()))
        with open(root / "pairs.csv") as fh:
            pairs = list(csv.DictReader(fh))
        with open(root / "samples.csv") as fh:
            meta = {r["truth_file"]: r for r in csv.DictReader(fh)}
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read dataset at {root}: {exc}") from exc
    by_index = {f.frame_index: f for f in frames}
    files = [r["truth_file"] for r in pairs]
    fidx = np.array([int(r["frame_index"]) for r in pairs])
    feats = np.stack([R.flatten(R.preprocess(by_index[i])) for i in fidx])
    clouds = np.stack([G.read_ply(root / f) for f in files])
    dz = np.array([float(meta[f]["delta_z_mm"]) for f in files])
    tags = [meta[f]["tag"] for f in files]
    stats = None
    if (root / "norm_stats.json").exists():
        stats = R.NormStats.from_json((root / "norm_stats.json").read_text())
    return Dataset(root, layout, params, config, fidx, feats, clouds, dz, tags, files, stats)
