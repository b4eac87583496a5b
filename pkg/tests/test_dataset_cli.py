import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from membrane_twin import cli
from membrane_twin import dataset as D
from membrane_twin import geometry as G
from membrane_twin import readout as R

SMALL = ["--n-samples", "12", "--grid", "40", "--stride", "4"]
AE = ["--latent", "8", "--points", "16", "--epochs", "2", "--batch-size", "8"]


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """One small end-to-end run shared by the CLI tests."""
    w = tmp_path_factory.mktemp("cli")
    assert run("gen-data", *SMALL, "--seed", 1, "--out", w / "train") == 0
    assert run("gen-data", *SMALL, "--seed", 2, "--out", w / "test") == 0
    assert run("train-ae", "--data", w / "train", *AE, "--out", w / "ae") == 0
    assert run("train-mlp", "--data", w / "train", "--ae", w / "ae", "--epochs", 3, "--batch-size", 8,
               "--out", w / "model") == 0
    return w


# -- dataset container -------------------------------------------------------


def test_dataset_contents(tmp_path):
    ds = D.generate(D.GenConfig(n_samples=10, seed=5, g=40, stride=4), tmp_path)
    assert len(ds) == 10 and ds.features_raw.shape == (10, 150) and ds.clouds.shape == (10, 100, 3)
    for cloud, dz in zip(ds.clouds, ds.delta_z):
        assert G.delta_z(cloud) == pytest.approx(dz, abs=1e-9)
    assert np.all(ds.delta_z <= 25.0 + 1e-9) and np.all(ds.delta_z >= 0)
    assert np.all(np.diff(ds.frame_indices) > 0)
    assert ds.norm_stats.source == f"dataset:{ds.dataset_id}"
    assert set(ds.tags) <= set(G.SHAPES) | {"flat"}
    back = D.load(tmp_path)
    assert np.array_equal(back.features_raw, ds.features_raw) and np.array_equal(back.clouds, ds.clouds)


def test_pairing_respects_stream_times():
    sensor, truth, hold = D.stream_times(30, 30)
    pairs = R.align_streams(sensor, truth)
    assert len(pairs) == 30
    for k, n in pairs:
        # the paired frame started during the hold of the same deformation
        assert k * hold <= sensor[n] <= truth[k]


def test_generation_independent_of_jobs(tmp_path):
    cfg = D.GenConfig(n_samples=8, seed=9, g=40, stride=4)
    D.generate(cfg, tmp_path / "a", jobs=1)
    D.generate(cfg, tmp_path / "b", jobs=2)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_noise_switch(tmp_path):
    a = D.generate(D.GenConfig(n_samples=6, seed=3, g=40, stride=4, noise=False), tmp_path / "a")
    b = D.generate(D.GenConfig(n_samples=6, seed=3, g=40, stride=4, noise=True), tmp_path / "b")
    assert np.array_equal(a.clouds, b.clouds)
    assert not np.array_equal(a.features_raw, b.features_raw)
    assert a.params.noise == 0.0


def test_load_missing_or_corrupt(tmp_path):
    with pytest.raises(D.DataError):
        D.load(tmp_path / "nothing")
    D.generate(D.GenConfig(n_samples=4, seed=3, g=40, stride=4), tmp_path / "d")
    blob = bytearray((tmp_path / "d" / "frames.bin").read_bytes())
    blob[30] ^= 0x10
    (tmp_path / "d" / "frames.bin").write_bytes(bytes(blob))
    with pytest.raises(D.DataError) as info:
        D.load(tmp_path / "d")
    assert isinstance(info.value.__cause__, R.BadCRC)


# -- command line ------------------------------------------------------------


def test_gen_data_is_byte_reproducible(work, tmp_path):
    assert run("gen-data", *SMALL, "--seed", 1, "--out", tmp_path / "again") == 0
    for name in ("frames.bin", "pairs.csv", "samples.csv", "norm_stats.json"):
        assert (tmp_path / "again" / name).read_bytes() == (work / "train" / name).read_bytes()


def test_manifest(work):
    m = json.loads((work / "ae" / "manifest.json").read_text())
    assert m["command"] == "train-ae" and m["seed"] == 0 and m["code_version"]
    assert m["config"]["latent"] == 8 and len(m["config_sha256"]) == 64
    assert "autoencoder.ckpt" in m["outputs"]
    assert "time" not in json.dumps(m).lower()


def test_training_stages_are_byte_reproducible(work, tmp_path):
    assert run("train-ae", "--data", work / "train", *AE, "--out", tmp_path / "ae") == 0
    assert run("train-mlp", "--data", work / "train", "--ae", tmp_path / "ae", "--epochs", 3, "--batch-size", 8,
               "--out", tmp_path / "model") == 0
    for name in ("autoencoder.ckpt", "latents.npy", "split.json", "ae_report.json"):
        assert (tmp_path / "ae" / name).read_bytes() == (work / "ae" / name).read_bytes()
    for name in ("regressor.ckpt", "norm_stats.json", "pipeline.json", "mlp_report.json"):
        assert (tmp_path / "model" / name).read_bytes() == (work / "model" / name).read_bytes()


def test_commands_do_not_touch_their_inputs(work, tmp_path):
    before = tree_digest(work / "train"), tree_digest(work / "model")
    assert run("eval", "--data", work / "train", "--model", work / "model", "--out", tmp_path / "e") == 0
    assert run("export", "--data", work / "train", "--model", work / "model", "--indices", "0,3",
               "--out", tmp_path / "x") == 0
    assert (tree_digest(work / "train"), tree_digest(work / "model")) == before


def test_eval_outputs(work, tmp_path):
    assert run("eval", "--data", work / "test", "--model", work / "model", "--export-ply", 2,
               "--out", tmp_path / "e") == 0
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert summary["overall"]["count"] == 12
    assert sum(b["count"] for b in summary["bins"]) == 12
    with open(tmp_path / "e" / "bins.csv") as fh:
        assert len(list(csv.reader(fh))) == 8
    maps = np.load(tmp_path / "e" / "nn_maps.npz")
    assert maps["predicted"].shape == (12, 16, 3) and maps["distance"].shape == (12, 16)
    assert G.read_ply(tmp_path / "e" / "pred" / "000001.ply").shape == (16, 3)


def test_bend_characterize_rows(tmp_path):
    assert run("bend-characterize", "--out", tmp_path) == 0
    with open(tmp_path / "bend.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["theta_deg"]) for r in rows] == [0, 30, 60, 90, 120, 150]
    aligned = [float(r["aligned"]) for r in rows]
    assert all(b < a for a, b in zip(aligned, aligned[1:]))


def test_sweep_cli(work, tmp_path):
    assert run("sweep", "--data", work / "train", "--test", work / "test", "--latents", "4,8", "--points", "16",
               "--epochs", 1, "--batch-size", 8, "--out", tmp_path) == 0
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["L"], r["M_pr"]) for r in rows] == [("4", "16"), ("8", "16")]


def test_sage_and_ablate_cli(work, tmp_path):
    assert run("sage", "--data", work / "train", "--model", work / "model", "--permutations", 4,
               "--eval-size", 8, "--background", 4, "--out", tmp_path / "s") == 0
    summary = json.loads((tmp_path / "s" / "sage_summary.json").read_text())
    for kind in ("LED", "PD"):
        s = summary[kind]
        assert abs(s["efficiency_gap"]) <= max(3 * s["sum_stderr"], 1e-9)
    with open(tmp_path / "s" / "sage_PD_layout.csv") as fh:
        assert len(list(csv.reader(fh))) == 6
    assert run("ablate", "--data", work / "train", "--test", work / "test", "--model", work / "model",
               "--sage", tmp_path / "s", "--kind", "PD", "--k-values", "1,2", "--seeds", "0,1", "--epochs", 1,
               "--batch-size", 8, "--out", tmp_path / "a") == 0
    per_seed = json.loads((tmp_path / "a" / "ablation_summary.json").read_text())
    assert [r["seed"] for r in per_seed] == [0, 1] and all("desc_dominates" in r for r in per_seed)
    with open(tmp_path / "a" / "curves.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * (3 * 2 + 1)


def test_config_file_and_flag_precedence(work, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"version": 1, "seed": 4, "gen-data": {"n_samples": 5, "grid": 40, "stride": 4}}))
    assert run("gen-data", "--config", cfg, "--n-samples", 6, "--out", tmp_path / "d") == 0
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert m["seed"] == 4 and m["config"]["n_samples"] == 6 and m["config"]["grid"] == 40


def test_exit_codes(work, tmp_path):
    assert run("train-ae", "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert run("gen-data", "--n-samples", "many", "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert run("gen-data", "--mix", "torus", "--out", tmp_path / "x") == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": 2}))
    assert run("gen-data", "--config", bad, "--out", tmp_path / "x") == cli.EXIT_CONFIG
    bad.write_text(json.dumps({"version": 1, "gen-data": {"colour": "red"}}))
    assert run("gen-data", "--config", bad, "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert run("eval", "--data", tmp_path / "missing", "--model", work / "model", "--out", tmp_path / "x") == cli.EXIT_DATA
    assert run("export", "--data", work / "train", "--indices", "99", "--out", tmp_path / "x") == cli.EXIT_DATA
    assert run("train-ae", "--data", work / "train", *AE, "--lr0", "1e200", "--out", tmp_path / "x") == \
        cli.EXIT_DIVERGED
    assert len({cli.EXIT_OK, cli.EXIT_CONFIG, cli.EXIT_DATA, cli.EXIT_DIVERGED}) == 4


def test_train_mlp_rejects_other_dataset(work, tmp_path):
    assert run("train-mlp", "--data", work / "test", "--ae", work / "ae", "--epochs", 1,
               "--out", tmp_path) == cli.EXIT_DATA
