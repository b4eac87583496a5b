"""Phenomenological light transport from edge LEDs to embedded photodiodes.

Each LED-PD pair is treated as a straight path through the waveguide. The
received intensity decays exponentially with the path's length on the
deformed surface and with the normal curvature accumulated along it, so
bends along the line of sight dim the channel while bends across it do not.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import DEFAULT_GRID, DEFAULT_WIDTH, DeformationField, bend, flat_field, path_profiles

LAYOUT_VERSION = 1


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class OpticsParams:
    alpha: float = 0.025        # 1/mm, attenuation per unit path length
    beta: float = 0.53          # 1/rad, attenuation per radian of aligned curvature
    gamma: float = 0.985        # brightness ratio between consecutive LEDs in the chain
    full_scale: float = 1.0     # analog value mapped to the top ADC code
    noise: float = 0.0035 / 3   # Gaussian sigma as a fraction of full scale
    dark: float = 0.002         # dark current as a fraction of full scale

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not 0.9 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0.9, 1]")
        if self.noise < 0 or self.dark < 0 or self.full_scale <= 0:
            raise ValueError("noise and dark must be >= 0, full_scale > 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "OpticsParams":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class SensorLayout:
    led_positions: np.ndarray
    pd_positions: np.ndarray
    led_baseline: np.ndarray
    width: float = DEFAULT_WIDTH

    def __post_init__(self):
        leds = np.asarray(self.led_positions, dtype=np.float64).reshape(-1, 2)
        pds = np.asarray(self.pd_positions, dtype=np.float64).reshape(-1, 2)
        base = np.asarray(self.led_baseline, dtype=np.float64).ravel()
        object.__setattr__(self, "led_positions", leds)
        object.__setattr__(self, "pd_positions", pds)
        object.__setattr__(self, "led_baseline", base)
        half = self.width / 2
        if len(leds) < 1 or len(pds) < 1:
            raise LayoutError("need at least one LED and one PD")
        if len(base) != len(leds):
            raise LayoutError("one baseline per LED")
        on_edge = np.isclose(np.abs(leds), half, atol=1e-9).any(axis=1) & (np.abs(leds) <= half + 1e-9).all(axis=1)
        if not on_edge.all():
            raise LayoutError("LEDs must sit on the membrane edge")
        if not (np.abs(pds) < half).all():
            raise LayoutError("PDs must be strictly interior")
        if np.any(base <= 0) or np.any(base > 1) or np.any(np.diff(base) > 0):
            raise LayoutError("baselines must be in (0, 1] and non-increasing along the chain")

    @property
    def n_leds(self) -> int:
        return len(self.led_positions)

    @property
    def n_pds(self) -> int:
        return len(self.pd_positions)

    def mirrored(self) -> "SensorLayout":
        flip = np.array([-1.0, 1.0])
        return SensorLayout(self.led_positions * flip, self.pd_positions * flip,
                            self.led_baseline, self.width)

    def to_json(self) -> str:
        doc = {
            "version": LAYOUT_VERSION,
            "W_mm": self.width,
            "leds": [{"x": float(x), "y": float(y), "b": float(b)}
                     for (x, y), b in zip(self.led_positions, self.led_baseline)],
            "pds": [{"x": float(x), "y": float(y)} for x, y in self.pd_positions],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SensorLayout":
        doc = json.loads(text)
        if doc.get("version") != LAYOUT_VERSION:
            raise LayoutError(f"unsupported layout version {doc.get('version')!r}")
        leds = [(d["x"], d["y"]) for d in doc["leds"]]
        base = [d["b"] for d in doc["leds"]]
        pds = [(d["x"], d["y"]) for d in doc["pds"]]
        return cls(np.array(leds), np.array(pds), np.array(base), float(doc["W_mm"]))


def _edge(n, width, start, direction):
    pitch = width / n
    t = (np.arange(n) + 0.5) * pitch
    return np.asarray(start) + t[:, None] * np.asarray(direction)


def default_layout(gamma: float = 0.985, width: float = DEFAULT_WIDTH) -> SensorLayout:
    """30 perimeter LEDs and 5 photodiodes in a quincunx.

    The LED chain starts at the south-west corner and runs counter-clockwise:
    8 along the south edge, 7 up the east, 8 back along the north and 7 down
    the west. LEDs sit at the centres of equal edge segments, so no LED lands
    on a corner and the layout is symmetric about both midlines. PD3 is the
    centre photodiode.
    """
    h = width / 2
    leds = np.concatenate([
        _edge(8, width, (-h, -h), (1, 0)),
        _edge(7, width, (h, -h), (0, 1)),
        _edge(8, width, (h, h), (-1, 0)),
        _edge(7, width, (-h, h), (0, -1)),
    ])
    d = 35.0 * width / DEFAULT_WIDTH
    pds = np.array([(-d, d), (d, d), (0.0, 0.0), (-d, -d), (d, -d)])
    base = gamma ** np.arange(1, len(leds) + 1)
    return SensorLayout(leds, pds, base, width)


def _pairs(layout: SensorLayout, led_indices):
    leds = layout.led_positions[led_indices]
    p = layout.n_pds
    starts = np.repeat(leds, p, axis=0)
    ends = np.tile(layout.pd_positions, (len(leds), 1))
    return starts, ends


def transport(lengths, curvature, baseline, params: OpticsParams):
    return params.full_scale * baseline * np.exp(-params.alpha * lengths) * np.exp(-params.beta * curvature)


def intensity(fld: DeformationField, layout: SensorLayout, params: OpticsParams, led: int) -> np.ndarray:
    """Analog readings of all PDs while LED ``led`` (0-based) is lit."""
    if not 0 <= led < layout.n_leds:
        raise IndexError(f"LED index {led} out of range")
    starts, ends = _pairs(layout, [led])
    lengths, curv = path_profiles(fld, starts, ends)
    return transport(lengths, curv, layout.led_baseline[led], params)


def scan(fld: DeformationField, layout: SensorLayout, params: OpticsParams) -> np.ndarray:
    """Full TDM scan as a ``(p, l)`` matrix; column ``i`` is LED ``i``."""
    starts, ends = _pairs(layout, np.arange(layout.n_leds))
    lengths, curv = path_profiles(fld, starts, ends)
    base = np.repeat(layout.led_baseline, layout.n_pds)
    values = transport(lengths, curv, base, params)
    return values.reshape(layout.n_leds, layout.n_pds).T.copy()


def pair_intensity(fld, layout, params, led: int, pd: int) -> float:
    if not 0 <= pd < layout.n_pds:
        raise IndexError(f"PD index {pd} out of range")
    return float(intensity(fld, layout, params, led)[pd])


def bend_pairs(layout: SensorLayout):
    """Pick the LED/PD pairs most parallel and most transverse to the bend.

    The bend curves paths running along ``x``. Among pairs through the centre
    photodiode, the aligned pair minimises ``|sin|`` of the path angle with
    the x axis and the transverse pair minimises ``|cos|``.
    """
    pd = int(np.argmin(np.linalg.norm(layout.pd_positions, axis=1)))
    d = layout.led_positions - layout.pd_positions[pd]
    ang = np.arctan2(d[:, 1], d[:, 0])
    aligned = int(np.argmin(np.abs(np.sin(ang)) + 1e-9 * np.arange(len(ang))))
    transverse = int(np.argmin(np.abs(np.cos(ang)) + 1e-9 * np.arange(len(ang))))
    return (aligned, pd), (transverse, pd)


def droop_profile(layout: SensorLayout, params: OpticsParams, g: int = 80) -> np.ndarray:
    """Mean flat-field intensity over PDs for each LED."""
    return scan(flat_field(g, layout.width), layout, params).mean(axis=0)


def beta_for_attenuation(fraction: float, wall_angle_deg: float = 150.0, path_mm: float = 70.0,
                         width: float = DEFAULT_WIDTH) -> float:
    """Curvature attenuation giving ``fraction`` of the flat reading on an aligned path."""
    turning = path_mm * math.radians(wall_angle_deg) / width
    return -math.log(fraction) / turning


BEND_ANGLES = (0, 30, 60, 90, 120, 150)


def bend_response(layout: SensorLayout, params: OpticsParams, angles=BEND_ANGLES, g: int = DEFAULT_GRID):
    """Noise-free intensity of the aligned and transverse pairs over a bend sweep.

    Returns a list of dicts, one per wall angle.
    """
    (la, pa), (lt, pt) = bend_pairs(layout)
    rows = []
    for theta in angles:
        fld = bend(float(theta), g, layout.width)
        rows.append({
            "theta_deg": float(theta),
            "aligned_led": la, "aligned_pd": pa,
            "aligned": pair_intensity(fld, layout, params, la, pa),
            "transverse_led": lt, "transverse_pd": pt,
            "transverse": pair_intensity(fld, layout, params, lt, pt),
        })
    return rows
