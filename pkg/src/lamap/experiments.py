"""Desk-scale synthetic experiments shared by the acceptance suite and ``scripts/``."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .beamform import das_intensities, fuse_bands, music_intensities
from .dsp import BandConfig, CsmSequence, LearnedUpsampler, csm_sequence, normalize_csm
from .doae import evaluate, frame_estimates, kmeans_doae, match_frame, raster_lookup, rasterize
from .geometry import (ArrayGeometry, angular_distance, em32, fibonacci_tessellation,
                       steering_matrix, unit_vector)
from .lam import LamModel, decode, loss_terms
from .simulator import (SceneDistribution, SceneSpec, SourceTrajectory, render_scene,
                        sample_scene, scene_seed, white_noise)
from .train import TrainConfig, train


def simulate_split(n: int, dist: SceneDistribution, geometry: ArrayGeometry, bands: BandConfig,
                   seed: int):
    """``n`` rendered scenes as (CSM sequences, ground truths)."""
    seqs, truths = [], []
    for i in range(n):
        audio, gt = render_scene(sample_scene(dist, geometry, scene_seed(seed, i)))
        seqs.append(csm_sequence(audio, bands=bands))
        truths.append(gt)
    return seqs, truths


def kmeans_le(map_fn, seqs, truths, tess, band_index=None):
    """LE/LR of the K-means head over whole scenes; ``map_fn(seq)`` gives (W, F, N) maps."""
    lookup = raster_lookup(tess)
    ests, refs = [], []
    for seq, gt in zip(seqs, truths):
        maps = map_fn(seq)
        if band_index is not None:
            maps = maps[:, band_index]
        per_window = [kmeans_doae(rasterize(maps[w], tess, lookup=lookup), w)
                      for w in range(seq.n_windows)]
        ests += frame_estimates(per_window, seq.timestamps, gt.n_frames)
        refs += gt.frames
    return evaluate(ests, refs)


def das_maps(model: LamModel, seq: CsmSequence) -> np.ndarray:
    C = model.prepare(seq.entries)
    return np.stack([das_intensities(C[:, f], model.steering[f].entries)
                     for f in range(seq.n_bands)], axis=1)


def reconstruction_mse(model: LamModel, seq: CsmSequence) -> np.ndarray:
    """Per-band mean ``||C - C_hat||^2 / M^2`` on normalized CSMs."""
    C = model.prepare(seq.entries)
    x = model.forward(seq)
    out = []
    for f in range(model.n_bands):
        C_hat = decode(x[:, f], model.steering[f].entries)
        out.append(np.mean(loss_terms(C[:, f], C_hat, x[:, f], 1.0, np.zeros((0, 2), int))["mse"]))
    return np.array(out)


# --- self-supervised smoke training ----------------------------------------------

@dataclass
class SmokeConfig:
    n_train: int = 48
    n_val: int = 12
    n_test: int = 20
    duration: float = 1.0
    # training scenes sweep their source across the sphere so 48 scenes cover many directions
    train_moving_probability: float = 1.0
    speed_deg_s: tuple = (45.0, 90.0)
    bands: BandConfig = field(default_factory=lambda: BandConfig(1500.0, 4500.0, 2))
    n_points: int = 242
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=1e-3, gamma=0.05, batch_size=32, max_epochs=200, patience=20))
    seed: int = 100


@dataclass
class SmokeResult:
    model: LamModel
    trained: LamModel
    val_mse_init: np.ndarray
    val_mse_final: np.ndarray
    val_objective_init: np.ndarray
    val_objective_best: np.ndarray
    das: object  # EvalResult
    lam: object
    mean_spacing_deg: float
    train_seconds: float
    best_epoch: dict


def smoke_training(cfg: SmokeConfig = SmokeConfig(), geometry: ArrayGeometry | None = None,
                   threads: int = 1) -> SmokeResult:
    geometry = geometry or em32()
    moving = SceneDistribution(duration=cfg.duration,
                               moving_probability=cfg.train_moving_probability,
                               speed_deg_s=cfg.speed_deg_s)
    static = SceneDistribution(duration=cfg.duration)
    tr, _ = simulate_split(cfg.n_train, moving, geometry, cfg.bands, cfg.seed + 1)
    va, _ = simulate_split(cfg.n_val, moving, geometry, cfg.bands, cfg.seed + 2)
    te, te_truth = simulate_split(cfg.n_test, static, geometry, cfg.bands, cfg.seed + 3)
    tr_seq, va_seq = CsmSequence.concat(tr), CsmSequence.concat(va)

    model = LamModel.initialize(geometry, tr_seq.band_freqs, cfg.n_points, seed=cfg.seed)
    tcfg = TrainConfig(**{**cfg.train.__dict__, "threads": threads})
    tic = time.perf_counter()
    trained, report = train(model, tr_seq, va_seq, tcfg)
    seconds = time.perf_counter() - tic

    tess = model.tessellation
    return SmokeResult(
        model, trained,
        reconstruction_mse(model, va_seq), reconstruction_mse(trained, va_seq),
        np.array([report.curve(f)[0] for f in range(model.n_bands)]),
        np.array([report.curve(f)[report.best_epoch[f]] for f in range(model.n_bands)]),
        kmeans_le(lambda s: das_maps(model, s), te, te_truth, tess),
        kmeans_le(trained.forward, te, te_truth, tess),
        float(np.degrees(tess.mean_spacing())), seconds, dict(report.best_epoch))


# --- DAS / MUSIC peak accuracy --------------------------------------------------------

def baseline_peak_errors(n_scenes: int = 12, n_points: int = 642, snr_db: float = 30.0,
                         duration: float = 1.0, bands: BandConfig = BandConfig(),
                         seed: int = 0, geometry: ArrayGeometry | None = None):
    """Per-window great-circle error (deg) of the fused DAS and MUSIC peaks, single static source."""
    geometry = geometry or em32()
    tess = fibonacci_tessellation(n_points)
    rng = np.random.default_rng(seed)
    A = None
    das_err, music_err = [], []
    for i in range(n_scenes):
        fs = 48000.0
        d = unit_vector(rng.uniform(-180, 180), np.degrees(np.arcsin(rng.uniform(-1, 1))))
        src = SourceTrajectory.static(white_noise(int(duration * fs), fs, rng), fs, d, 0.2)
        audio, _ = render_scene(SceneSpec([src], duration, snr_db, geometry, seed=seed + i))
        seq = csm_sequence(audio, bands=bands)
        if A is None:
            A = [steering_matrix(geometry, tess, f).entries for f in seq.band_freqs]
        C = normalize_csm(seq.entries)
        das = np.stack([das_intensities(C[:, f], A[f]) for f in range(seq.n_bands)], 1)
        mus = np.stack([music_intensities(C[:, f], A[f], 1) for f in range(seq.n_bands)], 1)
        for maps, errs in ((das, das_err), (mus, music_err)):
            peaks = tess.points[np.argmax(fuse_bands(maps), axis=-1)]
            errs.extend(np.atleast_1d(angular_distance(peaks, d)))
    return np.array(das_err), np.array(music_err)


# --- closely spaced pair ------------------------------------------------------------

@dataclass
class PairResult:
    separation_deg: float
    n_windows: int
    lam_resolved: int
    music_resolved: int
    music_detected: int
    music_bias_deg: float


def _resolved(ests, refs, tol):
    if len(ests) < 2:
        return False
    d = match_frame([e.direction for e in ests], refs)
    return len(d) == 2 and np.all(d <= tol)


def two_source_resolution(model: LamModel, separation_deg: float = 8.0, n_scenes: int = 6,
                          duration: float = 1.0, snr_db: float = 30.0, seed: int = 7) -> PairResult:
    """Windows where each head reports both sources of a closely spaced static pair.

    A pair is resolved when two estimates match the two truths, each within half the
    separation. MUSIC runs with the (wrong) source count 1.
    """
    rng = np.random.default_rng(seed)
    tess = model.tessellation
    lookup = raster_lookup(tess)
    fs = 48000.0
    n_win = lam_ok = mus_ok = mus_det = 0
    bias = []
    for i in range(n_scenes):
        az, el = rng.uniform(-180, 180), rng.uniform(-30, 30)
        dirs = [unit_vector(az - separation_deg / 2, el), unit_vector(az + separation_deg / 2, el)]
        srcs = [SourceTrajectory.static(white_noise(int(duration * fs), fs, rng), fs, d, 0.2)
                for d in dirs]
        audio, _ = render_scene(SceneSpec(srcs, duration, snr_db, model.geometry, seed=seed + i))
        seq = csm_sequence(audio, bands=BandConfig(float(model.band_freqs[0]),
                                                   float(model.band_freqs[-1]), model.n_bands))
        lam = model.forward(seq)
        C = model.prepare(seq.entries)
        mus = np.stack([music_intensities(C[:, f], model.steering[f].entries, 1)
                        for f in range(model.n_bands)], 1)
        mid = dirs[0] + dirs[1]
        mid /= np.linalg.norm(mid)
        for w in range(seq.n_windows):
            n_win += 1
            le = kmeans_doae(rasterize(lam[w], tess, lookup=lookup), w)
            me = kmeans_doae(rasterize(mus[w], tess, lookup=lookup), w)
            lam_ok += _resolved(le, dirs, separation_deg / 2)
            mus_ok += _resolved(me, dirs, separation_deg / 2)
            if me:
                mus_det += 1
                bias.append(float(angular_distance(me[0].direction, mid)))
    return PairResult(separation_deg, n_win, lam_ok, mus_ok, mus_det,
                      float(np.mean(bias)) if bias else float("nan"))


# --- upsampler stand-in -------------------------------------------------------------------

@dataclass
class UpsamplerResult:
    rel_frobenius: float
    hop_hits: int
    n_windows: int


def upsampler_experiment(n_train: int = 500, n_test_scenes: int = 10,
                         low_channels=(6, 10, 22, 26), band_hz: float = 3000.0,
                         n_points: int = 242, seed: int = 0, max_hops: int = 2) -> UpsamplerResult:
    """Fit the 4 -> 32 channel CSM map on paired synthetic windows and test it downstream.

    Training pairs are single-window CSMs of static white-noise sources at random
    directions. The downstream check feeds upsampled CSMs to an initialized LAM and
    measures how often the argmax lies within ``max_hops`` neighbor hops of the truth.
    """
    geometry = em32()
    idx = [c - 1 for c in low_channels]
    band = BandConfig(band_hz, band_hz, 1)
    fs, dur = 48000.0, 0.12  # one CSM window of 10 frames
    rng = np.random.default_rng(seed)

    def pairs(n, sub_seed):
        r = np.random.default_rng(sub_seed)
        high, truth = [], []
        while len(high) < n:
            d = unit_vector(r.uniform(-180, 180), np.degrees(np.arcsin(r.uniform(-1, 1))))
            src = SourceTrajectory.static(white_noise(int(dur * fs), fs, r), fs, d, 0.2)
            audio, _ = render_scene(SceneSpec([src], dur, float(r.uniform(20, 30)), geometry,
                                              seed=int(r.integers(2 ** 31))))
            seq = csm_sequence(audio, bands=band)
            for w in range(seq.n_windows):
                high.append(normalize_csm(seq.entries[w]))
                truth.append(d)
        return np.array(high[:n]), np.array(truth[:n])

    high_tr, _ = pairs(n_train, int(rng.integers(2 ** 31)))
    up = LearnedUpsampler.fit(high_tr[:, :, idx][:, :, :, idx], high_tr, [band_hz])
    high_te, truth = pairs(n_test_scenes * 10, int(rng.integers(2 ** 31)))
    pred = up.apply(high_te[:, 0][:, idx][:, :, idx], 0)
    err = np.linalg.norm(pred - high_te[:, 0], axis=(-2, -1)) / np.linalg.norm(high_te[:, 0],
                                                                               axis=(-2, -1))
    model = LamModel.initialize(geometry, [band_hz], n_points)
    seq = CsmSequence(pred[:, None], np.array([band_hz]), np.arange(len(pred), dtype=float), fs)
    x = model.forward(seq)[:, 0]
    tess = model.tessellation
    hits = 0
    for w in range(len(pred)):
        hops = tess.hops_from(int(tess.nearest(truth[w][None])[0]))
        hits += hops[int(np.argmax(x[w]))] <= max_hops
    return UpsamplerResult(float(np.mean(err)), int(hits), len(pred))
