import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from membrane_twin import geometry as G
from membrane_twin import optics as O

PARAMS = O.OpticsParams()
LAYOUT = O.default_layout()


def test_default_layout_shape():
    assert LAYOUT.n_leds == 30 and LAYOUT.n_pds == 5
    assert LAYOUT.n_leds * LAYOUT.n_pds == 150
    half = LAYOUT.width / 2
    assert np.all(half - np.abs(LAYOUT.pd_positions) >= 20.0)
    sides = [np.sum(np.isclose(LAYOUT.led_positions[:, 1], -half)),
             np.sum(np.isclose(LAYOUT.led_positions[:, 0], half)),
             np.sum(np.isclose(LAYOUT.led_positions[:, 1], half)),
             np.sum(np.isclose(LAYOUT.led_positions[:, 0], -half))]
    assert sides == [8, 7, 8, 7]
    assert np.allclose(LAYOUT.pd_positions[2], 0.0)


def test_baseline_droop():
    b = LAYOUT.led_baseline
    assert b[0] == pytest.approx(0.985)
    assert b[29] == pytest.approx(0.985 ** 30)
    assert b[29] < b[14]


def test_layout_is_mirror_symmetric():
    m = LAYOUT.mirrored()
    for pts, mpts in ((LAYOUT.led_positions, m.led_positions), (LAYOUT.pd_positions, m.pd_positions)):
        a = sorted(map(tuple, np.round(pts, 9)))
        b = sorted(map(tuple, np.round(mpts, 9)))
        assert a == b


def test_layout_validation():
    with pytest.raises(O.LayoutError):
        O.SensorLayout([[0.0, 0.0]], [[0.0, 0.0]], [1.0])
    with pytest.raises(O.LayoutError):
        O.SensorLayout([[70.0, 0.0]], [[70.0, 0.0]], [1.0])
    with pytest.raises(O.LayoutError):
        O.SensorLayout([[70.0, 0.0], [-70.0, 0.0]], [[0.0, 0.0]], [0.5, 0.9])


def test_params_validation():
    for bad in ({"alpha": 0.0}, {"beta": -1.0}, {"gamma": 0.9}, {"gamma": 1.01}, {"noise": -0.1}):
        with pytest.raises(ValueError):
            O.OpticsParams(**bad)


def test_json_round_trip():
    back = O.SensorLayout.from_json(LAYOUT.to_json())
    assert np.array_equal(back.led_positions, LAYOUT.led_positions)
    assert np.array_equal(back.pd_positions, LAYOUT.pd_positions)
    assert np.array_equal(back.led_baseline, LAYOUT.led_baseline)
    doc = json.loads(LAYOUT.to_json())
    assert doc["version"] == 1 and doc["W_mm"] == 140.0 and set(doc["leds"][0]) == {"x", "y", "b"}
    assert O.OpticsParams.from_json(PARAMS.to_json()) == PARAMS
    with pytest.raises(O.LayoutError):
        O.SensorLayout.from_json(json.dumps({**doc, "version": 2}))


def test_canonical_layout_file_loads():
    text = (Path(__file__).parents[1] / "docs" / "layout.example.json").read_text()
    assert O.SensorLayout.from_json(text).n_leds == 30


def test_flat_intensity_decreases_with_distance():
    flat = G.flat_field()
    for i in (0, 7, 19):
        I = O.intensity(flat, LAYOUT, PARAMS, i)
        d = np.linalg.norm(LAYOUT.pd_positions - LAYOUT.led_positions[i], axis=1)
        order = np.argsort(d)
        assert np.all(np.diff(I[order]) < 0)
        assert np.all(I > 0)


def test_intensity_closed_form_on_flat_field():
    flat = G.flat_field()
    I = O.intensity(flat, LAYOUT, PARAMS, 3)
    d = np.linalg.norm(LAYOUT.pd_positions - LAYOUT.led_positions[3], axis=1)
    assert np.allclose(I, LAYOUT.led_baseline[3] * np.exp(-PARAMS.alpha * d), rtol=1e-12)


def test_index_errors():
    with pytest.raises(IndexError):
        O.intensity(G.flat_field(), LAYOUT, PARAMS, 30)
    with pytest.raises(IndexError):
        O.pair_intensity(G.flat_field(), LAYOUT, PARAMS, 0, 5)


def test_scan_shape_and_columns():
    fld = G.indent(G.Indenter("cube", 12.0, 10.0, 5.0, 20.0))
    X = O.scan(fld, LAYOUT, PARAMS)
    assert X.shape == (5, 30)
    assert np.allclose(X[:, 11], O.intensity(fld, LAYOUT, PARAMS, 11), rtol=1e-14)
    assert np.array_equal(X, O.scan(fld, LAYOUT, PARAMS))


def test_permuting_leds_permutes_columns():
    flat_lay = O.default_layout(gamma=1.0)
    perm = np.random.default_rng(0).permutation(30)
    lay2 = O.SensorLayout(flat_lay.led_positions[perm], flat_lay.pd_positions, flat_lay.led_baseline)
    fld = G.indent(G.Indenter("sphere", 15.0, -10.0, 5.0))
    assert np.allclose(O.scan(fld, lay2, PARAMS), O.scan(fld, flat_lay, PARAMS)[:, perm], rtol=1e-12)


@pytest.mark.parametrize("fld", [G.indent(G.Indenter("u_shape", 14.0, 12.0, -8.0, 25.0)), G.bend(90.0)])
def test_mirror_symmetry(fld):
    a = np.sort(O.scan(fld, LAYOUT, PARAMS).ravel())
    b = np.sort(O.scan(fld.mirrored(), LAYOUT.mirrored(), PARAMS).ravel())
    assert np.allclose(a, b, rtol=1e-10)


@given(st.floats(0.0, 5.0), st.floats(1e-6, 1.0))
def test_attenuation_monotone_in_curvature(k, dk):
    a = O.transport(100.0, k, 0.9, PARAMS)
    b = O.transport(100.0, k + dk, 0.9, PARAMS)
    assert b < a


def test_bend_zero_equals_flat():
    assert np.array_equal(O.scan(G.bend(0.0), LAYOUT, PARAMS), O.scan(G.flat_field(), LAYOUT, PARAMS))


def test_bend_directional_sensitivity():
    rows = O.bend_response(LAYOUT, PARAMS)
    aligned = np.array([r["aligned"] for r in rows])
    transverse = np.array([r["transverse"] for r in rows])
    assert np.all(np.diff(aligned) < 0)
    tv = lambda v: np.sum(np.abs(np.diff(v)))  # noqa: E731
    assert tv(transverse) < 0.2 * tv(aligned)
    # slope ratio on every sampled interval
    assert np.all(np.abs(np.diff(aligned)) >= 5 * np.abs(np.diff(transverse)))


def test_bend_attenuation_near_half_at_150():
    rows = O.bend_response(LAYOUT, PARAMS, angles=(0, 150))
    ratio = rows[1]["aligned"] / rows[0]["aligned"]
    assert 0.4 < ratio < 0.6


def test_beta_for_attenuation():
    assert O.beta_for_attenuation(0.5) == pytest.approx(np.log(2) / (70 * np.radians(150) / 140))


def test_droop_non_increasing():
    prof = O.droop_profile(LAYOUT, PARAMS)
    assert prof.shape == (30,) and np.all(prof > 0)
    # with geometry divided out, the per-LED level is the chain brightness
    unit = O.droop_profile(O.default_layout(gamma=1.0), PARAMS)
    assert np.all(np.diff(prof / unit) <= 0)
    # LEDs k and k+15 are 180-degree images: same PD distances, later one dimmer
    rot = -LAYOUT.led_positions
    for k in range(15):
        assert np.allclose(rot[k], LAYOUT.led_positions[k + 15])
        assert prof[k + 15] < prof[k]
