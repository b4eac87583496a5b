"""Command-line front door.

Every subcommand takes ``--seed``, ``--jobs``, ``--out`` and ``--config``.
The config file is JSON of the form ``{"version": 1, "<subcommand>": {...}}``
(top-level ``seed``/``jobs`` are honoured too); explicit flags win over file
values, which win over built-in defaults. Each run writes ``manifest.json``
into its output directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as D
from . import geometry as G
from . import importance as I
from . import optics as O
from .model import metrics as E
from .model import sweep as S
from .model.pipeline import Pipeline, fit_regressor_stage, load_autoencoder
from .model.training import (TrainingDivergence, autoencoder_config, encode, regressor_config,
                             split_indices, train_autoencoder)
from .readout import FrameError
from .tensor import checkpoint
from .tensor.checkpoint import CheckpointError

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("membrane_twin")


class ConfigError(ValueError):
    pass


def _ints(text):
    return [int(t) for t in str(text).split(",") if t.strip()]


def _floats(text):
    return [float(t) for t in str(text).split(",") if t.strip()]


def _mix(text):
    if isinstance(text, dict):
        return {k: float(v) for k, v in text.items()}
    out = {}
    for item in str(text).split(","):
        name, _, w = item.partition("=")
        out[name.strip()] = float(w) if w else 1.0
    return out


def _bool(text):
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name -> (type, default, help); every entry becomes ``--name`` on the subcommand
TRAIN_OPTS = {
    "epochs": (int, 100, "maximum epochs"),
    "batch_size": (int, 64, "mini-batch size"),
    "lr0": (float, 1e-3, "initial learning rate"),
    "early_stopping": (int, 10, "epochs without improvement before stopping"),
    "val_fraction": (float, 0.1, "validation share of the training set"),
}

OPTIONS = {
    "gen-data": {
        "n_samples": (int, 2000, "number of truth frames"),
        "mix": (_mix, "sphere,cylinder,cube,triangular_prism,u_shape", "indenter mix, name[=weight],..."),
        "noise": (_bool, True, "sensor noise on/off"),
        "grid": (int, G.DEFAULT_GRID, "simulation grid size g"),
        "stride": (int, 2, "truth downsampling stride"),
        "flat_fraction": (float, 0.02, "share of undeformed frames"),
    },
    "train-ae": {"data": (str, None, "dataset directory"),
                 "latent": (int, 128, "latent size L"),
                 "points": (int, 1024, "predicted points M_pr"),
                 **TRAIN_OPTS},
    "train-mlp": {"data": (str, None, "dataset directory"),
                  "ae": (str, None, "train-ae output directory"),
                  **TRAIN_OPTS},
    "eval": {"data": (str, None, "test dataset directory"),
             "model": (str, None, "train-mlp output directory"),
             "export_ply": (int, 0, "write this many predicted clouds as PLY")},
    "sweep": {"data": (str, None, "training dataset directory"),
              "test": (str, None, "test dataset directory"),
              "latents": (_ints, "64,128,256", "latent sizes"),
              "points": (_ints, "256,1024", "predicted point counts"),
              **TRAIN_OPTS},
    "sage": {"data": (str, None, "dataset for the evaluation subset and background"),
             "model": (str, None, "train-mlp output directory"),
             "kind": (str, "both", "LED, PD or both"),
             "permutations": (int, 64, "sampled permutations"),
             "background": (int, 16, "background draws for marginalisation"),
             "eval_size": (int, 256, "evaluation subset size")},
    "ablate": {"data": (str, None, "training dataset directory"),
               "test": (str, None, "test dataset directory"),
               "model": (str, None, "train-mlp output directory"),
               "sage": (str, None, "sage output directory"),
               "kind": (str, "LED", "group kind"),
               "orders": (str, "sage_desc,sage_asc,natural", "inclusion orders"),
               "k_values": (_ints, "1,2,3,4,5", "numbers of included groups"),
               "seeds": (_ints, "0,1,2,3,4", "retraining seeds"),
               **TRAIN_OPTS},
    "bend-characterize": {"angles": (_floats, "0,30,60,90,120,150", "wall angles in degrees"),
                          "grid": (int, G.DEFAULT_GRID, "simulation grid size g")},
    "export": {"data": (str, None, "dataset directory"),
               "model": (str, None, "optional train-mlp output directory"),
               "indices": (_ints, "0", "sample indices to export")},
}
REQUIRED = {
    "train-ae": ("data",), "train-mlp": ("data", "ae"), "eval": ("data", "model"),
    "sweep": ("data", "test"), "sage": ("data", "model"), "ablate": ("data", "test", "model", "sage"),
    "export": ("data",),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="membrane-twin", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--config", default=None)
        for key, (_, _, help_) in opts.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=help_)
    return parser


def resolve(args) -> dict:
    """Merge built-in defaults, the config file and command-line flags."""
    file_cfg = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if doc.get("version") != CONFIG_VERSION:
            raise ConfigError(f"config version must be {CONFIG_VERSION}")
        file_cfg = {k: doc[k] for k in ("seed", "jobs", "out") if k in doc}
        file_cfg.update(doc.get(args.command, {}))
    cfg = {}
    spec = {**OPTIONS[args.command], "seed": (int, 0, ""), "jobs": (int, 1, ""), "out": (str, None, "")}
    for key, (conv, default, _) in spec.items():
        raw = getattr(args, key, None)
        raw = file_cfg.get(key, default) if raw is None else raw
        try:
            cfg[key] = None if raw is None else conv(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    unknown = set(file_cfg) - set(spec)
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    for key in REQUIRED.get(args.command, ()):
        if cfg[key] is None:
            raise ConfigError(f"--{key.replace('_', '-')} is required")
    if cfg["out"] is None:
        raise ConfigError("--out is required")
    if cfg["jobs"] < 1:
        raise ConfigError("--jobs must be >= 1")
    return cfg


def write_manifest(out: Path, command, cfg, outputs):
    blob = json.dumps(cfg, sort_keys=True, default=str)
    manifest = {
        "command": command, "code_version": __version__, "seed": cfg["seed"],
        "config": json.loads(blob), "config_sha256": hashlib.sha256(blob.encode()).hexdigest(),
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _out(cfg) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise D.DataError(f"cannot create {out}: {exc}") from exc
    return out


def _train_kw(cfg):
    return dict(max_epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr0=cfg["lr0"],
                early_stopping=cfg["early_stopping"], seed=cfg["seed"])


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(cfg):
    out = _out(cfg)
    unknown = set(cfg["mix"]) - set(G.SHAPES)
    if unknown:
        raise ConfigError(f"unknown indenter shapes {sorted(unknown)}")
    gc = D.GenConfig(n_samples=cfg["n_samples"], seed=cfg["seed"], noise=cfg["noise"], g=cfg["grid"],
                     stride=cfg["stride"], mix=cfg["mix"], flat_fraction=cfg["flat_fraction"])
    ds = D.generate(gc, out, jobs=cfg["jobs"])
    dz = ds.delta_z
    print(f"{len(ds)} truth frames; delta_z mean {dz.mean():.3f} mm, std {dz.std(ddof=1) if len(dz) > 1 else 0:.3f} mm, "
          f"range [{dz.min():.3f}, {dz.max():.3f}] mm")
    return ["layout.json", "params.json", "frames.bin", "pairs.csv", "samples.csv", "norm_stats.json", "config.json"]


def cmd_train_ae(cfg):
    ds = D.load(cfg["data"])
    out = _out(cfg)
    tr, va = split_indices(len(ds), cfg["val_fraction"], cfg["seed"])
    ae, report = train_autoencoder(ds.clouds[tr], ds.clouds[va], autoencoder_config(**_train_kw(cfg)),
                                   cfg["latent"], cfg["points"])
    checkpoint.save(out / "autoencoder.ckpt", ae, ae.arch)
    np.save(out / "latents.npy", encode(ae.encoder, ds.clouds))
    _write_json(out / "split.json", {"dataset_id": ds.dataset_id, "train": tr.tolist(), "val": va.tolist()})
    _write_json(out / "ae_report.json", report.to_dict())
    print(f"autoencoder: best validation loss {report.best_val:.4f} mm^2 at epoch {report.best_epoch}; "
          f"within 5% of best by epoch {report.converged_within()}")
    return ["autoencoder.ckpt", "latents.npy", "split.json", "ae_report.json"]


def _split(ae_dir, ds):
    info = json.loads((Path(ae_dir) / "split.json").read_text())
    if info["dataset_id"] != ds.dataset_id:
        raise D.DataError("dataset differs from the one the autoencoder was trained on")
    return np.array(info["train"], dtype=int), np.array(info["val"], dtype=int)


def cmd_train_mlp(cfg):
    ds = D.load(cfg["data"])
    out = _out(cfg)
    ae = load_autoencoder(Path(cfg["ae"]) / "autoencoder.ckpt")
    tr, va = _split(cfg["ae"], ds)
    pipe, report = fit_regressor_stage(ae, ds, tr, va, regressor_config(**_train_kw(cfg)))
    pipe.save(out)
    _write_json(out / "mlp_report.json", report.to_dict())
    val_pred = pipe.reconstruct_raw(ds.features_raw[va])
    cd = E.per_sample_errors(ds.clouds[va], val_pred).mean()
    print(f"regressor: best validation latent MSE {report.best_val:.5g}; validation chamfer {cd:.3f} mm")
    return ["autoencoder.ckpt", "regressor.ckpt", "norm_stats.json", "pipeline.json", "mlp_report.json"]


def cmd_eval(cfg):
    ds = D.load(cfg["data"])
    pipe = Pipeline.load(cfg["model"])
    out = _out(cfg)
    pred = pipe.reconstruct_raw(ds.features_raw)
    summary, errors = E.evaluate(ds.clouds, pred, ds.delta_z)
    maps = E.nn_maps(ds.clouds, pred)
    E.write_summary_json(out / "summary.json", summary)
    E.write_bins_csv(out / "bins.csv", summary)
    E.write_samples_csv(out / "samples.csv", ds.truth_files, errors, ds.delta_z, [m[1] for m in maps])
    np.savez(out / "nn_maps.npz", predicted=pred, distance=np.stack([m[0] for m in maps]))
    outputs = ["summary.json", "bins.csv", "samples.csv", "nn_maps.npz"]
    if cfg["export_ply"]:
        (out / "pred").mkdir(exist_ok=True)
        for k in range(min(cfg["export_ply"], len(pred))):
            G.write_ply(out / "pred" / f"{k:06d}.ply", pred[k])
        outputs.append("pred/")
    o = summary["overall"]
    print(f"test chamfer: mean {o['mean']:.3f} mm, median {o['median']:.3f} mm, std {o['std']:.3f} mm "
          f"over {o['count']} samples")
    for b in summary["bins"]:
        print(f"  {b['bin']:>16}  n={b['count']:<5d} mean={b['mean']:.3f}")
    return outputs


def cmd_sweep(cfg):
    train, test = D.load(cfg["data"]), D.load(cfg["test"])
    out = _out(cfg)
    kw = dict(max_epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr0=cfg["lr0"],
              early_stopping=cfg["early_stopping"])
    cells = S.sweep(train, test, cfg["latents"], cfg["points"], kw, kw, cfg["seed"], cfg["jobs"])
    S.write_csv(out / "sweep.csv", cells)
    best = S.best_cell(cells)
    _write_json(out / "best.json", None if best is None else {"L": best.L, "M_pr": best.M_pr,
                                                              "mean_mm": best.mean_mm, "std_mm": best.std_mm})
    for c in cells:
        print(f"L={c.L:<5d} M_pr={c.M_pr:<5d} {c.mean_mm:.3f} +- {c.std_mm:.3f} mm  {c.status}")
    return ["sweep.csv", "best.json"]


def _eval_subset(ds, n, seed):
    rng = np.random.default_rng([seed, 7])
    return np.sort(rng.choice(len(ds), min(n, len(ds)), replace=False))


def cmd_sage(cfg):
    ds = D.load(cfg["data"])
    pipe = Pipeline.load(cfg["model"])
    out = _out(cfg)
    kinds = [I.LED, I.PD] if cfg["kind"].lower() == "both" else [cfg["kind"].upper()]
    if any(k not in (I.LED, I.PD) for k in kinds):
        raise ConfigError("--kind must be LED, PD or both")
    idx = _eval_subset(ds, cfg["eval_size"], cfg["seed"])
    x = pipe.normalize(ds.features_raw)
    z = encode(pipe.ae.encoder, ds.clouds[idx])
    power = I.PredictivePower(I.regressor_fn(pipe.regressor), x[idx], z, x, cfg["background"], cfg["seed"])
    outputs, summary = [], {}
    for kind in kinds:
        groups = I.groups_for(kind, ds.layout.n_pds, ds.layout.n_leds)
        rep = I.sage(groups, power, cfg["permutations"], cfg["seed"], cfg["jobs"])
        rep.write_csv(out / f"sage_{kind}.csv")
        rep.write_layout_csv(out / f"sage_{kind}_layout.csv", ds.layout)
        gap, se = rep.efficiency_gap()
        summary[kind] = {"u_full": rep.u_full, "baseline_loss": rep.baseline_loss, "sum_phi": float(rep.phi.sum()),
                         "efficiency_gap": gap, "sum_stderr": se, "n_perms": rep.n_perms,
                         "ranking_desc": [int(i) for i in rep.ranking("sage_desc")]}
        outputs += [f"sage_{kind}.csv", f"sage_{kind}_layout.csv"]
        top = ", ".join(str(i) for i in rep.ranking("sage_desc")[:5])
        print(f"{kind}: u(full) {rep.u_full:.4g}, sum phi {rep.phi.sum():.4g}; top groups {top}")
    _write_json(out / "sage_summary.json", summary)
    return outputs + ["sage_summary.json"]


def _load_sage(directory, kind):
    path = Path(directory) / f"sage_{kind}.csv"
    try:
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise D.DataError(f"cannot read {path}: {exc}") from exc
    phi = np.array([float(r["phi"]) for r in rows])
    se = np.array([float(r["stderr"]) for r in rows])
    return I.SageReport(kind, [], phi, se, float("nan"), float("nan"), 0)


def cmd_ablate(cfg):
    train, test = D.load(cfg["data"]), D.load(cfg["test"])
    pipe = Pipeline.load(cfg["model"])
    out = _out(cfg)
    kind = cfg["kind"].upper()
    orders = [o.strip() for o in cfg["orders"].split(",")]
    if any(o not in I.ORDERS for o in orders):
        raise ConfigError(f"orders must be among {I.ORDERS}")
    report = _load_sage(cfg["sage"], kind)
    tr, va = split_indices(len(train), cfg["val_fraction"], cfg["seed"])
    n_groups = len(report.phi)
    curves, per_seed = [], []
    for seed in cfg["seeds"]:
        rc = regressor_config(**{**_train_kw(cfg), "seed": seed})
        seed_curves = {o: I.progressive_inclusion(o, kind, cfg["k_values"], report, pipe.ae, train, tr, va,
                                                  test, rc, stats=pipe.stats) for o in orders}
        full = I.progressive_inclusion("natural", kind, [n_groups], None, pipe.ae, train, tr, va, test, rc,
                                       stats=pipe.stats)
        curves += [(seed, c) for c in seed_curves.values()] + [(seed, full)]
        rec = {"seed": seed, "full_mm": full.errors[0]}
        if "sage_desc" in seed_curves and "sage_asc" in seed_curves:
            d, a = seed_curves["sage_desc"], seed_curves["sage_asc"]
            rec["desc_mean"], rec["asc_mean"] = float(np.mean(d.errors)), float(np.mean(a.errors))
            rec["desc_dominates"] = rec["desc_mean"] <= rec["asc_mean"]
            rec["plateau_K_desc"] = d.plateau(full.errors[0])
        per_seed.append(rec)
        print(json.dumps(rec))
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "order", "kind", "K", "mean_mm"])
        for seed, c in curves:
            for k, e in zip(c.ks, c.errors):
                w.writerow([seed, c.order, c.kind, k, repr(e)])
    _write_json(out / "ablation_summary.json", per_seed)
    return ["curves.csv", "ablation_summary.json"]


def cmd_bend(cfg):
    out = _out(cfg)
    layout, params = O.default_layout(), O.OpticsParams()
    rows = O.bend_response(layout, params, cfg["angles"], cfg["grid"])
    with open(out / "bend.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"theta {r['theta_deg']:6.1f}  aligned {r['aligned']:.5f}  transverse {r['transverse']:.5f}")
    return ["bend.csv"]


def cmd_export(cfg):
    ds = D.load(cfg["data"])
    out = _out(cfg)
    pipe = Pipeline.load(cfg["model"]) if cfg["model"] else None
    outputs = ["layout.csv"]
    with open(out / "layout.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "index", "x_mm", "y_mm"])
        for kind, pos in (("LED", ds.layout.led_positions), ("PD", ds.layout.pd_positions)):
            for i, (x, y) in enumerate(pos):
                w.writerow([kind, i, repr(float(x)), repr(float(y))])
    for k in cfg["indices"]:
        if not 0 <= k < len(ds):
            raise D.DataError(f"sample index {k} out of range")
        G.write_ply(out / f"truth_{k:06d}.ply", ds.clouds[k])
        G.write_cloud_csv(out / f"truth_{k:06d}.csv", ds.clouds[k])
        outputs += [f"truth_{k:06d}.ply", f"truth_{k:06d}.csv"]
        if pipe is not None:
            pred = pipe.reconstruct_raw(ds.features_raw[k:k + 1])[0]
            G.write_ply(out / f"pred_{k:06d}.ply", pred)
            G.write_cloud_csv(out / f"pred_{k:06d}.csv", pred)
            outputs += [f"pred_{k:06d}.ply", f"pred_{k:06d}.csv"]
    return outputs


COMMANDS = {
    "gen-data": cmd_gen_data, "train-ae": cmd_train_ae, "train-mlp": cmd_train_mlp, "eval": cmd_eval,
    "sweep": cmd_sweep, "sage": cmd_sage, "ablate": cmd_ablate, "bend-characterize": cmd_bend,
    "export": cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        outputs = COMMANDS[args.command](cfg)
        write_manifest(Path(cfg["out"]), args.command, cfg, outputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.DataError, FrameError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
