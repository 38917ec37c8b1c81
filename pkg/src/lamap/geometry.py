"""Array geometries, Fibonacci tessellations and far-field steering matrices."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

SPEED_OF_SOUND = 343.0
EM32_RADIUS = 0.042

# Eigenmike em32 capsule (colatitude, azimuth) in degrees, capsules 1..32.
_EM32_ANGLES_DEG = np.array([
    (69, 0), (90, 32), (111, 0), (90, 328), (32, 0), (55, 45), (90, 69), (125, 45),
    (148, 0), (125, 315), (90, 291), (55, 315), (21, 91), (58, 90), (121, 90), (159, 89),
    (69, 180), (90, 212), (111, 180), (90, 148), (32, 180), (55, 225), (90, 249), (125, 225),
    (148, 180), (125, 135), (90, 111), (55, 135), (21, 269), (58, 270), (122, 270), (159, 271),
], dtype=float)

# Capsules forming the tetrahedral sub-array (1-based, Eigenmike numbering).
TETRA_CHANNELS = (6, 10, 22, 26)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions in meters, one row per channel, centered on the origin."""

    positions: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(f"positions must be (M, 3), got {p.shape}")
        if p.shape[0] < 1:
            raise ValueError("geometry needs at least one microphone")
        if not np.all(np.isfinite(p)):
            raise ValueError("positions must be finite")
        p = p - p.mean(axis=0)
        object.__setattr__(self, "positions", _freeze(p))

    @property
    def n_mics(self) -> int:
        return self.positions.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ArrayGeometry):
            return NotImplemented
        return self.name == other.name and np.array_equal(self.positions, other.positions)

    def __hash__(self):
        return hash((self.name, self.positions.tobytes()))


def em32(radius: float = EM32_RADIUS) -> ArrayGeometry:
    theta, phi = np.deg2rad(_EM32_ANGLES_DEG).T
    pos = radius * np.stack([np.sin(theta) * np.cos(phi),
                             np.sin(theta) * np.sin(phi),
                             np.cos(theta)], axis=1)
    return ArrayGeometry(pos, "em32")


def tetra(radius: float = EM32_RADIUS) -> ArrayGeometry:
    """Regular tetrahedron with circumradius ``radius``."""
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    return ArrayGeometry(radius * v / np.sqrt(3.0), "tetra")


BUILTIN_GEOMETRIES = {"em32": em32, "tetra": tetra}


def get_geometry(name_or_path: str) -> ArrayGeometry:
    """Built-in geometry by name, or a geometry file path."""
    if name_or_path in BUILTIN_GEOMETRIES:
        return BUILTIN_GEOMETRIES[name_or_path]()
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        return load_geometry(path)
    raise ValueError(f"unknown geometry {name_or_path!r}; expected one of "
                     f"{sorted(BUILTIN_GEOMETRIES)} or a .json geometry file")


def subset_channels(geometry: ArrayGeometry, indices) -> ArrayGeometry:
    """Restrict ``geometry`` to 1-based channel ``indices`` (Eigenmike numbering)."""
    idx = [int(i) for i in indices]
    if len(set(idx)) != len(idx):
        raise ValueError(f"duplicate channel index in {idx}")
    bad = [i for i in idx if not 1 <= i <= geometry.n_mics]
    if bad:
        raise IndexError(f"channel index out of range 1..{geometry.n_mics}: {bad}")
    zero_based = np.asarray(idx) - 1
    return ArrayGeometry(geometry.positions[zero_based],
                         f"{geometry.name}[{','.join(map(str, idx))}]")


def save_geometry(geometry: ArrayGeometry, path) -> None:
    doc = {"name": geometry.name, "unit": "m",
           "positions": [[float(v) for v in row] for row in geometry.positions]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_geometry(path) -> ArrayGeometry:
    doc = json.loads(Path(path).read_text())
    unit = doc.get("unit", "m")
    if unit != "m":
        raise ValueError(f"unsupported geometry unit {unit!r}; only 'm'")
    return ArrayGeometry(np.asarray(doc["positions"], dtype=float), doc.get("name", "custom"))


@dataclass(frozen=True)
class Tessellation:
    """Unit vectors on the sphere with a symmetric k-nearest-neighbor graph."""

    points: np.ndarray
    neighbor_lists: tuple = field(repr=False)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def edges(self) -> np.ndarray:
        """Ordered (i, j) pairs, one per neighbor-list entry; each undirected edge appears twice."""
        pairs = [(i, j) for i, nbrs in enumerate(self.neighbor_lists) for j in nbrs]
        return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)

    def nearest(self, directions) -> np.ndarray:
        """Index of the nearest node (great-circle) for each direction row."""
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        return np.argmax(d @ self.points.T, axis=1)

    def hops_from(self, source: int) -> np.ndarray:
        """Breadth-first hop counts from ``source``; -1 where unreachable."""
        hops = np.full(self.n_points, -1, dtype=int)
        hops[source] = 0
        queue = deque([source])
        while queue:
            i = queue.popleft()
            for j in self.neighbor_lists[i]:
                if hops[j] < 0:
                    hops[j] = hops[i] + 1
                    queue.append(j)
        return hops

    def mean_spacing(self) -> float:
        """Mean great-circle distance (rad) from each node to its nearest other node."""
        cos = np.clip(self.points @ self.points.T, -1.0, 1.0)
        np.fill_diagonal(cos, -1.0)
        return float(np.mean(np.arccos(cos.max(axis=1))))


def _golden_spiral(n: int) -> np.ndarray:
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    rho = np.sqrt(1.0 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def _slow_spiral_order(points: np.ndarray) -> np.ndarray:
    """Order points along a pole-to-pole spiral whose turns are one lattice spacing apart.

    The golden-angle generation order jumps ~137 degrees between consecutive
    points; walking a slow spiral instead makes index neighbors spatial neighbors.
    """
    n = points.shape[0]
    pitch = np.sqrt(4.0 * np.pi / n)
    colat = np.arccos(np.clip(points[:, 2], -1.0, 1.0))
    az = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2.0 * np.pi)
    turn = np.round((colat - pitch * az / (2.0 * np.pi)) / pitch)
    u = az + 2.0 * np.pi * turn
    return np.lexsort((colat, u))


def fibonacci_tessellation(n_points: int = 242, k_neighbors: int = 6) -> Tessellation:
    """Fibonacci lattice of ``n_points`` unit vectors with a symmetrized kNN graph."""
    if n_points < 4:
        raise ValueError(f"n_points must be >= 4, got {n_points}")
    if not 1 <= k_neighbors < n_points:
        raise ValueError(f"k_neighbors must be in [1, {n_points - 1}], got {k_neighbors}")
    pts = _golden_spiral(n_points)
    pts = pts[_slow_spiral_order(pts)]
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)

    # chord distance is monotone in great-circle distance
    _, idx = cKDTree(pts).query(pts, k=k_neighbors + 1)
    nbrs = [set() for _ in range(n_points)]
    for i, row in enumerate(idx):
        for j in row:
            if j != i:
                nbrs[i].add(int(j))
                nbrs[int(j)].add(i)
    return Tessellation(_freeze(pts), tuple(tuple(sorted(s)) for s in nbrs))


@dataclass(frozen=True)
class SteeringMatrix:
    entries: np.ndarray
    wavelength: float
    band_hz: float

    @property
    def shape(self):
        return self.entries.shape


def steering_matrix(geometry: ArrayGeometry, tess: Tessellation, band_hz: float,
                    speed_of_sound: float = SPEED_OF_SOUND) -> SteeringMatrix:
    """Plane-wave steering matrix ``exp(-j 2pi/lambda P^T R)`` of shape (M, N)."""
    if band_hz <= 0:
        raise ValueError(f"band_hz must be positive, got {band_hz}")
    if speed_of_sound <= 0:
        raise ValueError(f"speed_of_sound must be positive, got {speed_of_sound}")
    wavelength = speed_of_sound / band_hz
    phase = (2.0 * np.pi / wavelength) * (geometry.positions @ tess.points.T)
    return SteeringMatrix(_freeze(np.exp(-1j * phase)), wavelength, float(band_hz))


def unit_vector(azimuth_deg, elevation_deg) -> np.ndarray:
    az = np.deg2rad(np.asarray(azimuth_deg, dtype=float))
    el = np.deg2rad(np.asarray(elevation_deg, dtype=float))
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def to_azel(vectors) -> tuple[np.ndarray, np.ndarray]:
    """Azimuth in [-180, 180) and elevation in [-90, 90] (degrees)."""
    v = np.asarray(vectors, dtype=float)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    az = np.rad2deg(np.arctan2(v[..., 1], v[..., 0]))
    az = np.where(az >= 180.0, az - 360.0, az)
    el = np.rad2deg(np.arcsin(np.clip(v[..., 2], -1.0, 1.0)))
    return az, el


def angular_distance(u, v) -> np.ndarray:
    """Great-circle distance in degrees between unit vectors (broadcasting)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    # atan2 form stays accurate for tiny and near-antipodal angles
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    dot = np.sum(u * v, axis=-1)
    return np.rad2deg(np.arctan2(cross, dot))
