"""Membrane deformation fields, indenters and point clouds.

Heights live on a cell-centred ``g x g`` grid covering the ``W x W`` membrane,
centred on the origin. Row 0 is the northern edge (largest ``y``), column 0 the
western edge (smallest ``x``), so arrays print the way the CSV export reads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

CLAMPED_ALL = "clamped-all-sides"
CLAMPED_ONE = "clamped-one-side"

DEFAULT_WIDTH = 140.0
DEFAULT_GRID = 80
MAX_HEIGHT = 40.0
SHAPES = ("sphere", "cylinder", "cube", "triangular_prism", "u_shape")


class GeometryError(ValueError):
    pass


class SolverError(RuntimeError):
    """Raised when the obstacle relaxation does not reach tolerance."""

    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (residual={residual:.3e} mm after {iterations} sweeps)")
        self.residual = residual
        self.iterations = iterations


def grid_axes(g: int, width: float = DEFAULT_WIDTH):
    """Cell-centre coordinates: ``xs`` west to east, ``ys`` north to south."""
    h = width / g
    xs = -width / 2 + (np.arange(g) + 0.5) * h
    return xs, xs[::-1].copy()


@dataclass
class DeformationField:
    """Height field of the membrane surface.

    ``offset_x`` is an optional in-plane displacement along ``x``. It is only
    used by the kinematic bend, where the sheet folds over and a pure height
    map cannot describe it.
    """

    grid: np.ndarray
    extent: float = DEFAULT_WIDTH
    boundary: str = CLAMPED_ALL
    wall_angle: float | None = None
    offset_x: np.ndarray | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2 or self.grid.shape[0] != self.grid.shape[1]:
            raise GeometryError(f"grid must be square, got {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise GeometryError("non-finite heights in field")
        if self.boundary not in (CLAMPED_ALL, CLAMPED_ONE):
            raise GeometryError(f"unknown boundary {self.boundary!r}")
        if self.boundary == CLAMPED_ALL:
            ring = np.concatenate([self.grid[0], self.grid[-1], self.grid[:, 0], self.grid[:, -1]])
            if np.max(np.abs(ring)) >= 1e-9:
                raise GeometryError("clamped boundary cells must have z = 0")
            # the bend folds well past this bound by design; only contact fields are checked
            if np.max(np.abs(self.grid)) > MAX_HEIGHT:
                raise GeometryError(f"|z| exceeds {MAX_HEIGHT} mm")
        if self.offset_x is not None:
            self.offset_x = np.asarray(self.offset_x, dtype=np.float64)
            if self.offset_x.shape != self.grid.shape:
                raise GeometryError("offset_x must match grid shape")

    @property
    def g(self) -> int:
        return self.grid.shape[0]

    @property
    def spacing(self) -> float:
        return self.extent / self.g

    def axes(self):
        return grid_axes(self.g, self.extent)

    def positions(self) -> np.ndarray:
        """World coordinates of every grid node, shape ``(g, g, 3)``."""
        xs, ys = self.axes()
        X, Y = np.meshgrid(xs, ys)
        if self.offset_x is not None:
            X = X + self.offset_x
        return np.stack([X, Y, self.grid], axis=-1)

    def mirrored(self) -> "DeformationField":
        """Reflection about the north-south midline (x -> -x)."""
        off = None if self.offset_x is None else -self.offset_x[:, ::-1]
        return DeformationField(self.grid[:, ::-1].copy(), self.extent, self.boundary,
                                self.wall_angle, off)


def flat_field(g: int = DEFAULT_GRID, width: float = DEFAULT_WIDTH,
               boundary: str = CLAMPED_ALL) -> DeformationField:
    return DeformationField(np.zeros((g, g)), width, boundary)


# -- indenters ---------------------------------------------------------------

DEFAULT_SIZES = {
    "sphere": {"radius": 20.0},
    "cylinder": {"radius": 15.0, "length": 50.0},
    "cube": {"side": 30.0},
    "triangular_prism": {"side": 30.0, "length": 50.0},
    "u_shape": {"foot_width": 10.0, "gap": 30.0, "length": 50.0, "web_clearance": 15.0},
}


@dataclass
class Indenter:
    """Rigid indenter pressed straight down into the membrane.

    ``depth`` is the commanded travel of the lowest point of the indenter
    below the undeformed plane. Cylinders lie on their side, prisms rest on
    an edge, and the U-shape touches with two rectangular feet; ``yaw``
    rotates the long axis counter-clockwise from ``+x``.
    """

    shape: str
    depth: float
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    size: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise GeometryError(f"unknown indenter shape {self.shape!r}")
        merged = dict(DEFAULT_SIZES[self.shape])
        merged.update(self.size)
        self.size = merged
        if any(v <= 0 for v in self.size.values()):
            raise GeometryError("indenter sizes must be positive")
        if not 0.0 <= self.depth <= 25.0:
            raise GeometryError(f"depth {self.depth} outside [0, 25] mm")

    def clearance(self, x, y):
        """Height of the indenter's lower surface above its tip; ``inf`` outside."""
        c, s = math.cos(math.radians(self.yaw)), math.sin(math.radians(self.yaw))
        dx, dy = np.asarray(x) - self.x, np.asarray(y) - self.y
        u = c * dx + s * dy       # along the long axis
        v = -s * dx + c * dy      # across it
        p = self.size
        out = np.full(np.broadcast(u, v).shape, np.inf)
        if self.shape == "sphere":
            r = p["radius"]
            rho2 = dx**2 + dy**2
            inside = rho2 <= r * r
            out[inside] = r - np.sqrt(r * r - rho2[inside])
        elif self.shape == "cylinder":
            r, half = p["radius"], p["length"] / 2
            inside = (np.abs(v) <= r) & (np.abs(u) <= half)
            out[inside] = r - np.sqrt(r * r - v[inside] ** 2)
        elif self.shape == "cube":
            half = p["side"] / 2
            out[(np.abs(u) <= half) & (np.abs(v) <= half)] = 0.0
        elif self.shape == "triangular_prism":
            half, hl = p["side"] / 2, p["length"] / 2
            inside = (np.abs(v) <= half) & (np.abs(u) <= hl)
            out[inside] = math.sqrt(3.0) * np.abs(v[inside])
        else:
            w, gap, hl = p["foot_width"], p["gap"], p["length"] / 2
            span = gap / 2 + w
            inside = (np.abs(v) <= span) & (np.abs(u) <= hl)
            out[inside] = p["web_clearance"]
            out[inside & (np.abs(v) >= gap / 2)] = 0.0
        return out

    def radius(self) -> float:
        """Radius of a disc that always contains the footprint."""
        p = self.size
        if self.shape == "sphere":
            return p["radius"]
        if self.shape == "cylinder":
            return math.hypot(p["radius"], p["length"] / 2)
        if self.shape == "cube":
            return p["side"] / math.sqrt(2)
        if self.shape == "triangular_prism":
            return math.hypot(p["side"] / 2, p["length"] / 2)
        return math.hypot(p["gap"] / 2 + p["foot_width"], p["length"] / 2)


def obstacle(indenter: Indenter, g: int = DEFAULT_GRID, width: float = DEFAULT_WIDTH) -> np.ndarray:
    """Upper bound on the height field imposed by the indenter (``inf`` = free)."""
    xs, ys = grid_axes(g, width)
    X, Y = np.meshgrid(xs, ys)
    return indenter.clearance(X, Y) - indenter.depth


def footprint_inside(indenter: Indenter, g: int = DEFAULT_GRID, width: float = DEFAULT_WIDTH) -> bool:
    """True when every cell the indenter can touch is off the clamped ring."""
    psi = obstacle(indenter, g, width)
    touch = psi < 0
    return not (touch[0].any() or touch[-1].any() or touch[:, 0].any() or touch[:, -1].any())


def relax_obstacle(upper, tol=1e-6, max_iter=20000, omega=None):
    """Projected Gauss-Seidel for the discrete membrane under an upper obstacle.

    Minimises the 5-point Dirichlet energy with ``z = 0`` on the outer ring
    and ``z <= upper`` elsewhere. Sweeps are red-black ordered and optionally
    over-relaxed (``omega=None`` picks the Laplace-optimal factor; ``omega=1``
    is plain projected Gauss-Seidel).

    Returns:
        (z, residual, sweeps) where ``residual`` is the largest change a
        projected Jacobi step would still make, in mm.
    """
    upper = np.asarray(upper, dtype=np.float64)
    g = upper.shape[0]
    if omega is None:
        omega = 2.0 / (1.0 + math.sin(math.pi / (g - 1)))
    if not 0.0 < omega < 2.0:
        raise ValueError("omega must lie in (0, 2)")
    z = np.zeros_like(upper)
    cap = upper[1:-1, 1:-1]
    zi = z[1:-1, 1:-1]
    np.minimum(zi, cap, out=zi)
    ii, jj = np.indices(cap.shape)
    red = (ii + jj) % 2 == 0
    black = ~red

    def neighbour_mean():
        return 0.25 * (z[:-2, 1:-1] + z[2:, 1:-1] + z[1:-1, :-2] + z[1:-1, 2:])

    residual = math.inf
    for sweep in range(1, max_iter + 1):
        for mask in (red, black):
            target = zi + omega * (neighbour_mean() - zi)
            np.minimum(target, cap, out=target)
            zi[mask] = target[mask]
        if sweep % 10 == 0 or sweep == max_iter:
            residual = float(np.max(np.abs(np.minimum(neighbour_mean(), cap) - zi)))
            if residual < tol:
                return z, residual, sweep
    raise SolverError("obstacle relaxation did not converge", residual, max_iter)


def indent(indenter: Indenter, g: int = DEFAULT_GRID, width: float = DEFAULT_WIDTH,
           boundary: str = CLAMPED_ALL, tol=1e-6, max_iter=20000, omega=None) -> DeformationField:
    """Membrane pressed by a rigid indenter, clamped on all four sides."""
    if boundary != CLAMPED_ALL:
        raise GeometryError("indentation requires clamped-all-sides")
    if not footprint_inside(indenter, g, width):
        raise GeometryError("indenter footprint reaches the clamped boundary")
    if indenter.depth == 0.0:
        return flat_field(g, width)
    z, _, _ = relax_obstacle(obstacle(indenter, g, width), tol, max_iter, omega)
    return DeformationField(z, width, CLAMPED_ALL)


def bend(wall_angle_deg: float, g: int = DEFAULT_GRID, width: float = DEFAULT_WIDTH) -> DeformationField:
    """Inextensible cylindrical bend hanging from a clamp on the western edge.

    The sheet wraps a circular arc whose total turning is the wall angle, so
    every row keeps its material length ``width``. Bending is about the
    ``y`` axis; paths parallel to ``x`` see the curvature.
    """
    if not 0.0 <= wall_angle_deg <= 150.0:
        raise GeometryError(f"wall angle {wall_angle_deg} outside [0, 150] deg")
    xs, _ = grid_axes(g, width)
    theta = math.radians(wall_angle_deg)
    if theta == 0.0:
        return DeformationField(np.zeros((g, g)), width, CLAMPED_ONE, 0.0, np.zeros((g, g)))
    radius = width / theta
    s = xs + width / 2
    X = -width / 2 + radius * np.sin(s / radius)
    Z = -radius * (1.0 - np.cos(s / radius))
    ones = np.ones((g, 1))
    return DeformationField(ones * Z, width, CLAMPED_ONE, wall_angle_deg, ones * (X - xs))


# -- point clouds ------------------------------------------------------------


def to_pointcloud(fld: DeformationField, stride: int = 1) -> np.ndarray:
    """Every ``stride``-th grid node as an ``(M, 3)`` array, ``M = ceil(g/s)^2``."""
    if stride < 1:
        raise GeometryError("stride must be >= 1")
    if math.ceil(fld.g / stride) < 2:
        raise GeometryError(f"stride {stride} leaves fewer than 2 samples per axis")
    pts = fld.positions()[::stride, ::stride]
    return pts.reshape(-1, 3).copy()


def delta_z(cloud) -> float:
    cloud = np.asarray(cloud)
    if cloud.size == 0:
        raise GeometryError("empty point cloud")
    z = cloud[:, 2]
    return float(z.max() - z.min())


def mean_curvature(fld: DeformationField) -> float:
    """Mean absolute mean curvature over the interior nodes (1/mm)."""
    h = fld.spacing
    P = fld.positions()
    # rows run north to south, so d/dy flips sign; the magnitude is unaffected
    Pu = np.gradient(P, h, axis=1)
    Pv = np.gradient(P, h, axis=0)
    Puu = np.gradient(Pu, h, axis=1)
    Pvv = np.gradient(Pv, h, axis=0)
    Puv = np.gradient(Pu, h, axis=0)
    n = np.cross(Pu, Pv)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    E, F, G = (Pu * Pu).sum(-1), (Pu * Pv).sum(-1), (Pv * Pv).sum(-1)
    L, M, N = (Puu * n).sum(-1), (Puv * n).sum(-1), (Pvv * n).sum(-1)
    H = (E * N - 2 * F * M + G * L) / (2 * (E * G - F * F))
    return float(np.mean(np.abs(H[2:-2, 2:-2])))


def _surface_sampler(fld: DeformationField) -> RegularGridInterpolator:
    xs, ys = fld.axes()
    h = fld.spacing
    P = fld.positions()
    Pu = np.gradient(P, h, axis=1)
    Pv = -np.gradient(P, h, axis=0)  # +y points north, rows go south
    n = np.cross(Pu, Pv)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    values = np.concatenate([P, n], axis=-1)[::-1]  # ascending y for the interpolator
    return RegularGridInterpolator((ys[::-1], xs), values, bounds_error=False, fill_value=None)


def path_profiles(fld: DeformationField, starts, ends):
    """Vectorised :func:`path_profile` over many segments.

    Args:
        fld: deformation field.
        starts, ends: ``(n, 2)`` planar endpoints in material coordinates.

    Returns:
        ``(lengths, curvature_integrals)``, each of shape ``(n,)``.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    ends = np.atleast_2d(np.asarray(ends, dtype=np.float64))
    planar = np.linalg.norm(ends - starts, axis=1)
    if np.any(planar == 0):
        raise GeometryError("degenerate path: a == b")
    half = fld.extent / 2 + 1e-9
    if np.any(np.abs(starts) > half) or np.any(np.abs(ends) > half):
        raise GeometryError("path endpoints must lie on the membrane")
    counts = np.maximum(np.ceil(planar / fld.spacing).astype(int), 2) + 1
    offsets = np.concatenate([[0], np.cumsum(counts)])
    t = np.concatenate([np.linspace(0.0, 1.0, c) for c in counts])
    owner = np.repeat(np.arange(len(counts)), counts)
    pts2 = starts[owner] + t[:, None] * (ends - starts)[owner]
    sampled = _surface_sampler(fld)(pts2[:, ::-1])
    P, nrm = sampled[:, :3], sampled[:, 3:]
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)

    seg = np.diff(P, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    lengths = np.empty(len(counts))
    curv = np.empty(len(counts))
    for k in range(len(counts)):
        a, b = offsets[k], offsets[k + 1]
        sl = seg_len[a:b - 1]
        tangents = seg[a:b - 1] / sl[:, None]
        turn = np.abs(np.einsum("ij,ij->i", tangents[1:] - tangents[:-1], nrm[a + 1:b - 1]))
        # interior vertices cover midpoint-to-midpoint; extend density to both ends
        density = turn / (0.5 * (sl[1:] + sl[:-1]))
        lengths[k] = sl.sum()
        curv[k] = turn.sum() + 0.5 * (density[0] * sl[0] + density[-1] * sl[-1])
    return lengths, curv


def path_profile(fld: DeformationField, a, b):
    """3D length and integrated absolute normal curvature along segment a -> b.

    The planar segment is sampled at grid resolution, lifted onto the surface
    and the normal curvature along the path is estimated from the turning of
    consecutive chord directions projected on the surface normal.
    """
    lengths, curv = path_profiles(fld, np.asarray(a, float)[None], np.asarray(b, float)[None])
    return float(lengths[0]), float(curv[0])


# -- export ------------------------------------------------------------------


def write_ply(path, cloud) -> None:
    cloud = np.asarray(cloud, dtype=np.float32)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "w") as fh:
        fh.write(header)
        np.savetxt(fh, cloud, fmt="%.9g")


def read_ply(path) -> np.ndarray:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise GeometryError(f"{path}: not a PLY file")
        count = None
        for line in fh:
            line = line.strip()
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            if line == "end_header":
                break
        data = np.loadtxt(fh, dtype=np.float32, ndmin=2)
    if count is None or len(data) != count:
        raise GeometryError(f"{path}: vertex count mismatch")
    return data.astype(np.float64)


def write_cloud_csv(path, cloud) -> None:
    np.savetxt(path, np.asarray(cloud), fmt="%.9g", delimiter=",", header="x_mm,y_mm,z_mm", comments="")


def write_field_csv(path, fld: DeformationField) -> None:
    """Row-major heights, first row = northern edge, first column = western edge."""
    np.savetxt(Path(path), fld.grid, fmt="%.9g", delimiter=",")
