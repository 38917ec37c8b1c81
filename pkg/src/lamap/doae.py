"""Map rasterization, weighted K-means direction extraction and LE/LR scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .beamform import minmax
from .geometry import Tessellation, angular_distance, to_azel, unit_vector

N_TOP_CELLS = 18
N_CLUSTERS = 3
MERGE_DEG = 15.0
MAX_ITER = 50
TOL_RAD = 1e-6


@dataclass(frozen=True)
class RasterMap:
    values: np.ndarray  # (F, A, E)
    azimuth: np.ndarray  # cell centers, degrees
    elevation: np.ndarray

    def cell_directions(self) -> np.ndarray:
        """(A, E, 3) unit vectors at the cell centers."""
        az, el = np.meshgrid(self.azimuth, self.elevation, indexing="ij")
        return unit_vector(az, el)


def raster_grid(a_bins: int = 72, e_bins: int = 36):
    if a_bins < 2 or e_bins < 2:
        raise ValueError("raster needs at least 2 azimuth and 2 elevation bins")
    az = -180.0 + (np.arange(a_bins) + 0.5) * 360.0 / a_bins
    el = -90.0 + (np.arange(e_bins) + 0.5) * 180.0 / e_bins
    return az, el


def raster_lookup(tess: Tessellation, a_bins: int = 72, e_bins: int = 36) -> np.ndarray:
    """(A, E) index of the great-circle nearest tessellation node for each cell center."""
    az, el = raster_grid(a_bins, e_bins)
    grid = unit_vector(*np.meshgrid(az, el, indexing="ij"))
    return tess.nearest(grid.reshape(-1, 3)).reshape(a_bins, e_bins)


def rasterize(maps, tess: Tessellation, a_bins: int = 72, e_bins: int = 36,
              lookup: np.ndarray | None = None) -> RasterMap:
    """Nearest-node equirectangular raster of per-band maps, min-max normalized per band.

    ``maps`` is a list of SphericalAcousticMap or an (F, N) array.
    """
    if not isinstance(maps, np.ndarray):
        maps = np.stack([np.asarray(getattr(m, "intensities", m), dtype=float) for m in maps])
    maps = np.atleast_2d(maps)
    if maps.shape[-1] != tess.n_points:
        raise ValueError(f"maps have {maps.shape[-1]} nodes, tessellation has {tess.n_points}")
    if lookup is None:
        lookup = raster_lookup(tess, a_bins, e_bins)
    az, el = raster_grid(*lookup.shape)
    return RasterMap(minmax(maps, axis=-1)[:, lookup], az, el)


@dataclass(frozen=True)
class DoaEstimate:
    window: int
    direction: np.ndarray
    weight: float

    def azel(self):
        az, el = to_azel(self.direction)
        return float(az), float(el)


def _kmeans_pp(points, weights, k, rng):
    centers = [points[rng.choice(len(points), p=weights / weights.sum())]]
    while len(centers) < k:
        d2 = np.min(np.sum((points[:, None, :] - np.array(centers)[None]) ** 2, axis=-1), axis=1)
        score = weights * d2
        if score.sum() <= 0:
            break
        centers.append(points[rng.choice(len(points), p=score / score.sum())])
    return np.array(centers)


def weighted_kmeans(points, weights, k=N_CLUSTERS, seed=0, max_iter=MAX_ITER, tol=TOL_RAD):
    """Spherical weighted K-means; returns (centers, cluster weights)."""
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(points, weights, k, rng)
    for _ in range(max_iter):
        label = np.argmax(points @ centers.T, axis=1)
        new = centers.copy()
        for c in range(len(centers)):
            s = (weights[label == c, None] * points[label == c]).sum(axis=0)
            if np.linalg.norm(s) > 0:
                new[c] = s / np.linalg.norm(s)
        moved = np.max(np.arccos(np.clip(np.sum(new * centers, axis=1), -1, 1)))
        centers = new
        if moved < tol:
            break
    label = np.argmax(points @ centers.T, axis=1)
    mass = np.array([weights[label == c].sum() for c in range(len(centers))])
    return centers, mass


def merge_close(centers, mass, merge_deg=MERGE_DEG):
    """Repeatedly merge the closest pair of centroids lying within ``merge_deg``."""
    centers = [np.asarray(c, dtype=float) for c in centers]
    mass = [float(m) for m in mass]
    while len(centers) > 1:
        best, pair = None, None
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                d = float(angular_distance(centers[i], centers[j]))
                if d <= merge_deg and (best is None or d < best):
                    best, pair = d, (i, j)
        if pair is None:
            break
        i, j = pair
        s = mass[i] * centers[i] + mass[j] * centers[j]
        merged = s / np.linalg.norm(s) if np.linalg.norm(s) > 0 else centers[i]
        centers[i], mass[i] = merged, mass[i] + mass[j]
        del centers[j], mass[j]
    return centers, mass


def kmeans_doae(raster: RasterMap, window: int = 0, n_top: int = N_TOP_CELLS,
                k: int = N_CLUSTERS, merge_deg: float = MERGE_DEG, seed: int = 0) -> list:
    """Directions from the ``n_top`` brightest raster cells via weighted K-means and merging."""
    sheet = raster.values.sum(axis=0).ravel()
    order = np.lexsort((np.arange(sheet.size), -sheet))[:n_top]
    order = order[sheet[order] > 0]
    if order.size == 0:
        return []
    points = raster.cell_directions().reshape(-1, 3)[order]
    weights = sheet[order]
    centers, mass = weighted_kmeans(points, weights, min(k, order.size), seed)
    keep = mass > 0
    centers, mass = merge_close(centers[keep], mass[keep], merge_deg)
    ranked = sorted(zip(mass, range(len(mass))), key=lambda t: (-t[0], t[1]))
    return [DoaEstimate(window, centers[i], m) for m, i in ranked]


def windows_to_frames(window_times, n_frames: int, label_hop: float = 0.1) -> np.ndarray:
    """Nearest window index for each label-frame center."""
    window_times = np.asarray(window_times, dtype=float)
    centers = (np.arange(n_frames) + 0.5) * label_hop
    return np.argmin(np.abs(centers[:, None] - window_times[None, :]), axis=1)


def frame_estimates(per_window: list, window_times, n_frames: int,
                    label_hop: float = 0.1) -> list:
    """Per label frame, the estimates of the nearest window."""
    if len(per_window) == 0:
        return [[] for _ in range(n_frames)]
    idx = windows_to_frames(window_times, n_frames, label_hop)
    return [[e.direction for e in per_window[i]] for i in idx]


@dataclass
class EvalResult:
    LE: float
    LR: float
    n_matched: int
    n_reference: int
    n_predicted: int
    per_frame: list = field(default_factory=list)  # (frame, n_ref, n_pred, n_matched, sum_err)

    def summary(self) -> str:
        return f"LE {self.LE:.2f} LR {self.LR:.1f}"


def match_frame(pred, ref, gate_deg=None):
    """Hungarian matching under great-circle distance; returns matched distances (deg)."""
    if len(pred) == 0 or len(ref) == 0:
        return np.zeros(0)
    cost = angular_distance(np.asarray(pred)[:, None, :], np.asarray(ref)[None, :, :])
    rows, cols = linear_sum_assignment(cost)
    d = cost[rows, cols]
    if gate_deg is not None:
        d = d[d <= gate_deg]
    return d


def evaluate(estimates: list, references: list, gate_deg: float | None = None) -> EvalResult:
    """LE (mean matched error, degrees) and LR (percent of references matched).

    With no matched pairs at all LE is reported as 180 degrees.
    """
    if len(estimates) != len(references):
        raise ValueError(f"frame count mismatch: {len(estimates)} estimate frames vs "
                         f"{len(references)} reference frames")
    errs, per_frame, n_ref, n_pred = [], [], 0, 0
    for f, (pred, ref) in enumerate(zip(estimates, references)):
        pred = [np.asarray(getattr(p, "direction", p), dtype=float) for p in pred]
        ref = [np.asarray(r[1] if isinstance(r, tuple) and len(r) == 2 else r, dtype=float)
               for r in ref]
        d = match_frame(pred, ref, gate_deg)
        errs.append(d)
        n_ref += len(ref)
        n_pred += len(pred)
        per_frame.append((f, len(ref), len(pred), len(d), float(d.sum())))
    all_err = np.concatenate(errs) if errs else np.zeros(0)
    n_match = int(all_err.size)
    le = float(all_err.mean()) if n_match else 180.0
    lr = 100.0 * n_match / n_ref if n_ref else 100.0
    return EvalResult(le, lr, n_match, n_ref, n_pred, per_frame)


# --- files -----------------------------------------------------------------

def write_estimates_csv(frames: list, path) -> None:
    """``frames[f]`` is a list of DoaEstimate (or (direction, weight)) for label frame f."""
    lines = ["frame_index,azimuth_deg,elevation_deg,weight"]
    for f, ests in enumerate(frames):
        for e in ests:
            d, w = (e.direction, e.weight) if isinstance(e, DoaEstimate) else e
            az, el = to_azel(d)
            lines.append(f"{f},{float(az):.6f},{float(el):.6f},{float(w):.6f}")
    _write(path, "\n".join(lines) + "\n")


def read_estimates_csv(path) -> dict:
    out: dict[int, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = unit_vector(float(row["azimuth_deg"]), float(row["elevation_deg"]))
            out.setdefault(int(row["frame_index"]), []).append(d)
    return out


def write_eval_report(result: EvalResult, summary_path, detail_path=None) -> None:
    import json

    doc = {"LE_deg": round(result.LE, 6), "LR_percent": round(result.LR, 6),
           "n_matched": result.n_matched, "n_reference": result.n_reference,
           "n_predicted": result.n_predicted, "display": result.summary()}
    _write(summary_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if detail_path is not None:
        lines = ["frame_index,n_reference,n_predicted,n_matched,sum_error_deg"]
        lines += [f"{f},{r},{p},{m},{s:.6f}" for f, r, p, m, s in result.per_frame]
        _write(detail_path, "\n".join(lines) + "\n")


def _write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
