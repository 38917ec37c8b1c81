import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lamap.doae import (DoaEstimate, RasterMap, evaluate, kmeans_doae, merge_close,
                        raster_grid, raster_lookup, rasterize, read_estimates_csv,
                        weighted_kmeans, windows_to_frames, write_estimates_csv)
from lamap.geometry import angular_distance, fibonacci_tessellation, to_azel, unit_vector


@pytest.fixture(scope="module")
def tess():
    return fibonacci_tessellation(242)


def _raster(sheet):
    az, el = raster_grid(*sheet.shape)
    return RasterMap(sheet[None], az, el)


def _blob(center_az, center_el, width_deg=4.0, shape=(72, 36)):
    r = _raster(np.zeros(shape))
    d = angular_distance(r.cell_directions(), unit_vector(center_az, center_el))
    return np.exp(-0.5 * (d / width_deg) ** 2)


# --- rasterize -------------------------------------------------------------

def test_one_hot_map_lands_in_node_cell(tess):
    for n in (0, 17, 120, 241):
        m = np.zeros(242)
        m[n] = 1.0
        r = rasterize(m[None], tess)
        a, e = np.unravel_index(np.argmax(r.values[0]), r.values[0].shape)
        cell = r.cell_directions()[a, e]
        # the brightest cells form node n's Voronoi region, which contains the cell
        assert r.values[0, a, e] == 1.0
        assert tess.nearest(cell[None])[0] == n


def test_constant_map_rasterizes_to_zero(tess):
    r = rasterize(np.full((2, 242), 3.7), tess)
    assert r.values.shape == (2, 72, 36)
    assert np.all(r.values == 0)


def test_nearest_node_audit(tess):
    # every cell's source node lies within the lattice's largest nearest-neighbor gap
    lookup = raster_lookup(tess)
    cells = _raster(np.zeros((72, 36))).cell_directions()
    d = angular_distance(cells, tess.points[lookup])
    nn = angular_distance(tess.points[:, None], tess.points[None])
    np.fill_diagonal(nn, np.inf)
    assert d.max() <= nn.min(axis=1).max()
    # brute force check of the lookup itself on a subset
    flat = cells.reshape(-1, 3)[::37]
    brute = np.argmax(flat @ tess.points.T, axis=1)
    np.testing.assert_array_equal(lookup.reshape(-1)[::37], brute)


def test_rasterize_rejects_node_mismatch(tess):
    with pytest.raises(ValueError):
        rasterize(np.zeros((1, 100)), tess)


def test_raster_grid_centers():
    az, el = raster_grid(72, 36)
    assert az[0] == -177.5 and az[-1] == 177.5
    assert el[0] == -87.5 and el[-1] == 87.5


# --- K-means head --------------------------------------------------------------

def test_single_cell_gives_one_estimate():
    sheet = np.zeros((72, 36))
    sheet[10, 20] = 1.0
    r = _raster(sheet)
    est = kmeans_doae(r)
    assert len(est) == 1
    np.testing.assert_allclose(est[0].direction, r.cell_directions()[10, 20], atol=1e-12)


def test_empty_raster_gives_no_estimate():
    assert kmeans_doae(_raster(np.zeros((72, 36)))) == []


def test_blobs_40_deg_apart_give_two():
    sheet = _blob(-20, 0) + _blob(20, 0)
    est = kmeans_doae(_raster(sheet))
    assert len(est) == 2
    found = sorted(to_azel(e.direction)[0] for e in est)
    assert found[0] == pytest.approx(-20, abs=5)
    assert found[1] == pytest.approx(20, abs=5)


def test_blobs_10_deg_apart_merge():
    sheet = _blob(-5, 10) + _blob(5, 10)
    est = kmeans_doae(_raster(sheet))
    assert len(est) == 1
    az, el = est[0].azel()
    assert abs(az) < 5 and el == pytest.approx(10, abs=5)


def test_only_top_cells_matter():
    # a dim broad floor outside the brightest 18 cells is clipped
    base = _blob(60, 30)
    sheet = base + 1e-3 * _blob(-120, -40, width_deg=30)
    a = kmeans_doae(_raster(base))
    b = kmeans_doae(_raster(sheet))
    assert len(a) == len(b) == 1
    np.testing.assert_allclose(a[0].direction, b[0].direction, atol=1e-12)


def test_weights_pull_centroid():
    pts = unit_vector(np.array([0.0, 10.0]), np.array([0.0, 0.0]))
    c, mass = weighted_kmeans(pts, np.array([3.0, 1.0]), k=1)
    az, _ = to_azel(c[0])
    # weighted mean of the two unit vectors, renormalized
    expect = 3 * pts[0] + pts[1]
    expect /= np.linalg.norm(expect)
    np.testing.assert_allclose(c[0], expect, atol=1e-12)
    assert mass[0] == 4.0
    assert 0 < az < 5


def test_merge_examples():
    a, b, c = unit_vector(0, 0), unit_vector(10, 0), unit_vector(90, 0)
    centers, mass = merge_close([a, b, c], [1.0, 1.0, 2.0])
    assert len(centers) == 2
    assert mass == [2.0, 2.0]
    assert to_azel(centers[0])[0] == pytest.approx(5.0)
    # chained merge: 0 and 10 fuse at 5, which is then 14 deg from 19
    centers, _ = merge_close([unit_vector(0, 0), unit_vector(10, 0), unit_vector(19, 0)], [1, 1, 1])
    assert len(centers) == 1
    # 0 and 12 fuse at 6, leaving 24 at 18 deg: two survive
    centers, _ = merge_close([unit_vector(0, 0), unit_vector(12, 0), unit_vector(24, 0)], [1, 1, 1])
    assert len(centers) == 2


@given(st.lists(st.tuples(st.floats(-180, 180), st.floats(-80, 80), st.floats(0.1, 5)),
                min_size=1, max_size=6))
def test_merge_idempotent(items):
    centers = [unit_vector(a, e) for a, e, _ in items]
    mass = [w for _, _, w in items]
    c1, m1 = merge_close(centers, mass)
    for i, j in itertools.combinations(range(len(c1)), 2):
        assert angular_distance(c1[i], c1[j]) > 15.0
    c2, m2 = merge_close(c1, m1)
    assert len(c2) == len(c1)
    np.testing.assert_allclose(np.array(c2), np.array(c1))
    assert sum(m1) == pytest.approx(sum(mass))


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_kmeans_head_properties(seed):
    rng = np.random.default_rng(seed)
    sheet = np.zeros((72, 36))
    for _ in range(rng.integers(1, 5)):
        sheet += rng.uniform(0.2, 1) * _blob(rng.uniform(-180, 180), rng.uniform(-70, 70),
                                             rng.uniform(2, 10))
    est = kmeans_doae(_raster(sheet))
    assert 1 <= len(est) <= 3
    for e in est:
        assert np.linalg.norm(e.direction) == pytest.approx(1.0)
        assert e.weight > 0
    for i, j in itertools.combinations(range(len(est)), 2):
        assert angular_distance(est[i].direction, est[j].direction) > 15.0
    assert [e.weight for e in est] == sorted((e.weight for e in est), reverse=True)


def test_kmeans_deterministic():
    sheet = _blob(-100, 20) + 0.7 * _blob(50, -30)
    a = kmeans_doae(_raster(sheet), seed=5)
    b = kmeans_doae(_raster(sheet), seed=5)
    assert [e.direction.tolist() for e in a] == [e.direction.tolist() for e in b]


# --- evaluation ------------------------------------------------------------------

def _brute_force(pred, ref):
    """Min-sum assignment by enumerating injections of the smaller side."""
    if not pred or not ref:
        return np.zeros(0)
    best = None
    small, large, flip = (pred, ref, False) if len(pred) <= len(ref) else (ref, pred, True)
    for perm in itertools.permutations(range(len(large)), len(small)):
        d = np.array([float(angular_distance(small[i], large[j])) for i, j in enumerate(perm)])
        if best is None or d.sum() < best.sum() - 1e-12:
            best = d
    return best


def test_evaluate_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        frames_p, frames_r, errs, n_ref = [], [], [], 0
        for _ in range(3):
            npred, nref = rng.integers(0, 5), rng.integers(0, 5)
            pred = list(unit_vector(rng.uniform(-180, 180, npred), rng.uniform(-90, 90, npred)))
            ref = list(unit_vector(rng.uniform(-180, 180, nref), rng.uniform(-90, 90, nref)))
            frames_p.append(pred)
            frames_r.append(ref)
            errs.append(_brute_force(pred, ref))
            n_ref += nref
        res = evaluate(frames_p, frames_r)
        all_err = np.concatenate(errs)
        le = all_err.mean() if all_err.size else 180.0
        lr = 100.0 * all_err.size / n_ref if n_ref else 100.0
        assert res.LE == pytest.approx(le, abs=1e-9)
        assert res.LR == pytest.approx(lr)


def test_evaluate_constructed_offsets():
    ref = [[unit_vector(30, 10)]]
    assert evaluate([[unit_vector(30, 10)]], ref).LE == pytest.approx(0.0, abs=1e-6)
    assert evaluate([[unit_vector(35, 0)]], [[unit_vector(30, 0)]]).LE == pytest.approx(5.0)
    assert evaluate([[unit_vector(0, 90)]], [[unit_vector(77, 0)]]).LE == pytest.approx(90.0)
    res = evaluate([[unit_vector(0, 0)], []], [[unit_vector(0, 0)], [unit_vector(90, 0)]])
    assert res.LR == 50.0 and res.summary() == "LE 0.00 LR 50.0"


def test_evaluate_nothing_matched():
    res = evaluate([[], []], [[unit_vector(0, 0)], []])
    assert res.LE == 180.0 and res.LR == 0.0


def test_evaluate_frame_mismatch():
    with pytest.raises(ValueError, match="frame count mismatch"):
        evaluate([[]], [[], []])


def test_evaluate_gate():
    res = evaluate([[unit_vector(0, 0)]], [[unit_vector(40, 0)]], gate_deg=20)
    assert res.n_matched == 0 and res.LR == 0.0


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_evaluate_rotation_invariant(seed):
    from scipy.spatial.transform import Rotation

    rng = np.random.default_rng(seed)
    R = Rotation.random(random_state=seed).as_matrix()
    pred = [list(unit_vector(rng.uniform(-180, 180, 3), rng.uniform(-90, 90, 3)))]
    ref = [list(unit_vector(rng.uniform(-180, 180, 2), rng.uniform(-90, 90, 2)))]
    a = evaluate(pred, ref)
    b = evaluate([[R @ p for p in pred[0]]], [[R @ r for r in ref[0]]])
    assert a.LE == pytest.approx(b.LE, abs=1e-9)
    assert a.LR == b.LR


def test_windows_to_frames():
    idx = windows_to_frames([0.0, 0.2, 0.4], 5, 0.1)
    # frame centers 0.05, 0.15, ..., 0.45
    np.testing.assert_array_equal(idx, [0, 1, 1, 2, 2])


def test_estimates_csv_roundtrip(tmp_path):
    frames = [[DoaEstimate(0, unit_vector(45, 10), 0.5)], [],
              [(unit_vector(-90, -20), 1.0), (unit_vector(170, 60), 0.25)]]
    path = tmp_path / "est.csv"
    write_estimates_csv(frames, path)
    text = path.read_text().splitlines()
    assert text[0] == "frame_index,azimuth_deg,elevation_deg,weight"
    assert len(text) == 4
    back = read_estimates_csv(path)
    assert sorted(back) == [0, 2]
    np.testing.assert_allclose(back[0][0], unit_vector(45, 10), atol=1e-6)
    np.testing.assert_allclose(back[2][1], unit_vector(170, 60), atol=1e-6)
