"""``lamap`` command line: simulate, csm, train, check-grads, map, doae, eval, upsample-train.

Exit codes: 0 ok, 2 config/usage error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .beamform import das_intensities, music_intensities
from .config import ConfigError, ExperimentConfig
from .dsp import (CsmSequence, LearnedUpsampler, csm_sequence, read_csm_store, read_wav,
                  write_csm_store)
from .geometry import (BUILTIN_GEOMETRIES, ArrayGeometry, fibonacci_tessellation, get_geometry,
                       load_geometry, steering_matrix, subset_channels, to_azel)
from .lam import LamModel, load_checkpoint, save_checkpoint
from .simulator import GroundTruth, load_manifest, make_dataset, manifest_scenes
from .train import NumericalError, TrainConfig, check_gradients, train
from .doae import (evaluate, kmeans_doae, rasterize, raster_lookup, read_estimates_csv,
                   windows_to_frames, write_estimates_csv, write_eval_report)

log = logging.getLogger("lamap")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    """Bad arguments or inconsistent inputs (exit 2)."""


# --- shared helpers ----------------------------------------------------------

def resolve_geometry(cfg: ExperimentConfig) -> ArrayGeometry:
    if cfg.geometry in BUILTIN_GEOMETRIES:
        geo = get_geometry(cfg.geometry)
    else:
        geo = load_geometry(cfg.geometry)
    if cfg.channels:
        geo = subset_channels(geo, cfg.channels)
    return geo


def _write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _write_text(path: Path, text: str) -> None:
    _write_bytes(path, text.encode())


def _load_scene_csms(manifest: dict, split: str) -> list[CsmSequence]:
    return [read_csm_store(s["csm"]) for s in manifest_scenes(manifest, split)]


def _concat(seqs: list[CsmSequence]) -> CsmSequence | None:
    return CsmSequence.concat(seqs) if seqs else None


def pick_bands(n_available: int, count: int | None, indices: str | None) -> list[int] | None:
    """Band indices from ``--band-index i,j`` or an evenly spread ``--bands count``."""
    if indices:
        idx = [int(t) for t in indices.split(",")]
        bad = [i for i in idx if not 0 <= i < n_available]
        if bad:
            raise UsageError(f"band index {bad[0]} out of range [0, {n_available})")
        return idx
    if count is None:
        return None
    if not 1 <= count <= n_available:
        raise UsageError(f"--bands must be in [1, {n_available}], got {count}")
    return sorted(set(int(round(v)) for v in np.linspace(0, n_available - 1, count)))


def method_maps(args, cfg: ExperimentConfig, seq: CsmSequence):
    """(W, F, N) maps and their tessellation from a checkpoint or a DAS/MUSIC baseline."""
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        if seq.n_mics != model.geometry.n_mics:
            raise UsageError(f"CSM store has {seq.n_mics} channels, model expects "
                             f"{model.geometry.n_mics}")
        seq = _match_bands(seq, model.band_freqs)
        return model.forward(seq), model.tessellation, model.band_freqs
    if args.method not in ("das", "music"):
        raise UsageError(f"unknown method {args.method!r} (expected das or music)")
    geo = resolve_geometry(cfg)
    if seq.n_mics != geo.n_mics:
        raise UsageError(f"CSM store has {seq.n_mics} channels, geometry {geo.name} has "
                         f"{geo.n_mics}")
    n = cfg.tessellation.eval_n_points or cfg.tessellation.n_points
    tess = fibonacci_tessellation(n, cfg.tessellation.k_neighbors)
    maps = np.zeros((seq.n_windows, seq.n_bands, n))
    for f, hz in enumerate(seq.band_freqs):
        A = steering_matrix(geo, tess, hz, cfg.model.speed_of_sound).entries
        if args.method == "das":
            maps[:, f] = das_intensities(seq.entries[:, f], A)
        else:
            k = args.sources if args.sources is not None else cfg.doae.music_sources
            maps[:, f] = music_intensities(seq.entries[:, f], A, k)
    return maps, tess, np.asarray(seq.band_freqs)


def _match_bands(seq: CsmSequence, freqs) -> CsmSequence:
    """Restrict ``seq`` to the bands in ``freqs`` (a model may use a subset of a store's bands)."""
    idx = []
    for hz in freqs:
        hit = np.flatnonzero(np.abs(np.asarray(seq.band_freqs) - hz) < 1e-6)
        if hit.size == 0:
            raise UsageError(f"band mismatch: model band {hz:g} Hz not in CSM store "
                             f"{list(np.asarray(seq.band_freqs))}")
        idx.append(int(hit[0]))
    return seq if idx == list(range(seq.n_bands)) else seq.select_bands(idx)


def grayscale_pgm(values: np.ndarray) -> bytes:
    """Binary PGM of an (E, A) array, min-max scaled to 0..255."""
    v = np.asarray(values, dtype=float)
    span = v.max() - v.min()
    img = np.zeros_like(v) if span <= 0 else (v - v.min()) / span
    pix = np.round(img * 255).astype(np.uint8)
    return f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode() + pix.tobytes()


# --- commands ------------------------------------------------------------------

def cmd_simulate(args, cfg: ExperimentConfig, out: Path) -> int:
    geo = resolve_geometry(cfg)
    manifest = make_dataset(args.n_scenes, cfg.simulate, out, geo, cfg.csm, cfg.seed)
    n_val = sum(s["split"] == "validation" for s in manifest["scenes"])
    print(f"wrote {len(manifest['scenes'])} scenes ({len(manifest['scenes']) - n_val} train, "
          f"{n_val} validation) to {out}")
    return EXIT_OK


def cmd_csm(args, cfg: ExperimentConfig, out: Path) -> int:
    audio = read_wav(args.audio)
    seq = csm_sequence(audio, cfg.csm.window_len, cfg.csm.hop, cfg.csm.frames_per_csm,
                       cfg.csm.bands, cfg.csm.bin_halfwidth)
    dest = out / (Path(args.audio).stem + ".lamc")
    write_csm_store(seq, dest)
    print(f"wrote {seq.n_windows} windows x {seq.n_bands} bands to {dest}")
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig, out: Path) -> int:
    manifest = load_manifest(args.manifest)
    tr = _concat(_load_scene_csms(manifest, "train"))
    va = _concat(_load_scene_csms(manifest, "validation"))
    if tr is None:
        raise UsageError("manifest has no training scenes")
    bands = pick_bands(tr.n_bands, args.bands, args.band_index)
    if bands is not None:
        tr = tr.select_bands(bands)
        va = va.select_bands(bands) if va is not None else None
    geo = resolve_geometry(cfg)
    if tr.n_mics != geo.n_mics:
        raise UsageError(f"dataset has {tr.n_mics} channels, geometry has {geo.n_mics}")
    tcfg = cfg.train
    overrides = {k: v for k, v in (("learning_rate", args.lr), ("max_epochs", args.epochs))
                 if v is not None}
    if overrides:
        tcfg = TrainConfig(**{**cfgmod.to_dict(tcfg), **overrides})
    model = LamModel.initialize(geo, tr.band_freqs, cfg.tessellation.n_points,
                                cfg.tessellation.k_neighbors, cfg.model.speed_of_sound,
                                tcfg.seed, cfg.model.input_gain, cfg.model.csm_normalization)

    def on_epoch(band, epoch, train_loss, val_loss):
        print(f"epoch {epoch:4d} band {band} train {train_loss:.6e} val {val_loss:.6e}")

    trained, report = train(model, tr, va, tcfg, on_epoch)
    save_checkpoint(trained, out / "model.lamm")
    _write_text(out / "train_report.csv", report.to_csv())
    log.info("training wall time %.1f s, best epochs %s", report.wall_time, report.best_epoch)
    print(f"wrote checkpoint {out / 'model.lamm'} (bands {trained.band_freqs.tolist()})")
    return EXIT_OK


def cmd_check_grads(args, cfg: ExperimentConfig, out: Path) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        freqs = cfg.csm.bands
        model = LamModel.initialize(resolve_geometry(cfg), _band_centers(freqs),
                                    cfg.tessellation.n_points, cfg.tessellation.k_neighbors,
                                    cfg.model.speed_of_sound, cfg.seed, cfg.model.input_gain)
    rng = np.random.default_rng(cfg.seed)
    M = model.geometry.n_mics
    if args.csm:
        seq = _match_bands(read_csm_store(args.csm), model.band_freqs)
        pool = model.prepare(seq.entries)
    else:
        X = rng.standard_normal((args.pairs, M, 4)) + 1j * rng.standard_normal((args.pairs, M, 4))
        pool = model.prepare(np.repeat((X @ np.conj(np.swapaxes(X, 1, 2)))[:, None],
                                       model.n_bands, axis=1))
    failed = 0
    for p in range(args.pairs):
        w = int(rng.integers(len(pool)))
        f = int(rng.integers(model.n_bands))
        rep = check_gradients(model.per_band[f], model.steering[f].entries, pool[w, f],
                              cfg.train.gamma, model.edges(), seed=cfg.seed + p)
        failed += not rep.passed
        print(f"pair {p:3d} window {w} band {f}: {rep.summary()}")
    print(f"{args.pairs - failed}/{args.pairs} pairs passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def _band_centers(bands) -> np.ndarray:
    return np.linspace(bands.f_lo, bands.f_hi, bands.n_bands)


def cmd_map(args, cfg: ExperimentConfig, out: Path) -> int:
    seq = read_csm_store(args.csm)
    if not 0 <= args.window < seq.n_windows:
        raise UsageError(f"window {args.window} out of range [0, {seq.n_windows})")
    one = CsmSequence(seq.entries[args.window:args.window + 1], seq.band_freqs,
                      seq.timestamps[args.window:args.window + 1], seq.sample_rate,
                      seq.n_frames_averaged)
    maps, tess, freqs = method_maps(args, cfg, one)
    maps = maps[0]
    az, el = to_azel(tess.points)
    cols = [f"band_{hz:g}hz" for hz in freqs]
    lines = ["node,azimuth_deg,elevation_deg," + ",".join(cols) + ",sum"]
    for n in range(tess.n_points):
        vals = ",".join(f"{v:.9e}" for v in maps[:, n])
        lines.append(f"{n},{az[n]:.6f},{el[n]:.6f},{vals},{maps[:, n].sum():.9e}")
    stem = args.name or "map"
    _write_text(out / f"{stem}.csv", "\n".join(lines) + "\n")
    raster = rasterize(maps, tess, cfg.doae.a_bins, cfg.doae.e_bins)
    sheets = list(raster.values) + [raster.values.sum(axis=0)]
    for label, sheet in zip(cols + ["sum"], sheets):
        # raster is (A, E) with elevation ascending; images put +90 on top
        _write_bytes(out / f"{stem}_{label}.pgm", grayscale_pgm(sheet.T[::-1]))
    print(f"wrote {stem}.csv and {len(sheets)} heatmaps to {out}")
    return EXIT_OK


def cmd_doae(args, cfg: ExperimentConfig, out: Path) -> int:
    seq = read_csm_store(args.csm)
    maps, tess, _ = method_maps(args, cfg, seq)
    d = cfg.doae
    lookup = raster_lookup(tess, d.a_bins, d.e_bins)
    per_window = [kmeans_doae(rasterize(maps[w], tess, lookup=lookup), w, d.n_top, d.k,
                              d.merge_deg, d.seed) for w in range(seq.n_windows)]
    if args.truth:
        n_frames = GroundTruth.read_csv(args.truth).n_frames
    elif args.n_frames is not None:
        n_frames = args.n_frames
    else:
        t_last = float(seq.timestamps[-1]) if seq.n_windows else 0.0
        n_frames = int(math.floor(t_last / d.label_hop)) + 1 if seq.n_windows else 0
    idx = _frame_windows(seq.timestamps, n_frames, d.label_hop)
    frames = [per_window[i] for i in idx]
    dest = out / (args.name or "estimates.csv")
    write_estimates_csv(frames, dest)
    n_est = sum(len(f) for f in frames)
    print(f"wrote {n_est} estimates over {n_frames} frames to {dest}")
    return EXIT_OK


def _frame_windows(times, n_frames, hop):
    if n_frames == 0 or len(times) == 0:
        return []
    return list(windows_to_frames(times, n_frames, hop))


def cmd_eval(args, cfg: ExperimentConfig, out: Path) -> int:
    truth = GroundTruth.read_csv(args.truth, args.n_frames)
    est = read_estimates_csv(args.estimates)
    n = truth.n_frames
    late = [f for f in est if f >= n or f < 0]
    if late:
        raise UsageError(f"frame misalignment: estimate frame {min(late)} outside the "
                         f"{n} ground-truth frames")
    result = evaluate([est.get(f, []) for f in range(n)], truth.frames, cfg.doae.gate_deg)
    write_eval_report(result, out / "eval.json", out / "eval_frames.csv")
    print(result.summary())
    return EXIT_OK


def cmd_upsample_train(args, cfg: ExperimentConfig, out: Path) -> int:
    manifest = load_manifest(args.manifest)
    seqs = [read_csm_store(s["csm"]) for s in manifest_scenes(manifest)]
    if not seqs:
        raise UsageError("manifest lists no scenes")
    high = CsmSequence.concat(seqs)
    chans = [int(c) for c in args.low_channels.split(",")]
    low = high.select_channels([c - 1 for c in chans])
    up = LearnedUpsampler.fit(low.entries, high.entries, high.band_freqs)
    up.save(out / "upsampler.npz")
    print(f"fit upsampler {len(chans)}->{high.n_mics} channels on {high.n_windows} windows")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "csm": cmd_csm, "train": cmd_train,
            "check-grads": cmd_check_grads, "map": cmd_map, "doae": cmd_doae,
            "eval": cmd_eval, "upsample-train": cmd_upsample_train}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lamap", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="override the config seeds")
    p.add_argument("--threads", type=int, help="worker threads for per-band training")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic dataset")
    s.add_argument("--n-scenes", type=int, required=True)

    s = sub.add_parser("csm", help="compute a CSM store from a WAV file")
    s.add_argument("--audio", required=True)

    s = sub.add_parser("train", help="train a LAM on a simulated dataset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--bands", type=int, help="number of bands, spread over the available ones")
    s.add_argument("--band-index", help="explicit comma-separated band indices")
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("check-grads", help="finite-difference gradient check")
    s.add_argument("--checkpoint")
    s.add_argument("--csm", help="draw CSMs from this store instead of random ones")
    s.add_argument("--pairs", type=int, default=20)

    for name, helptext in (("map", "export acoustic maps for one window"),
                           ("doae", "K-means direction estimates per label frame")):
        s = sub.add_parser(name, help=helptext)
        src = s.add_mutually_exclusive_group(required=True)
        src.add_argument("--checkpoint")
        src.add_argument("--method", help="das or music")
        s.add_argument("--csm", required=True)
        s.add_argument("--sources", type=int, help="MUSIC source count")
        s.add_argument("--name", help="output file name (stem for map)")
        if name == "map":
            s.add_argument("--window", type=int, default=0)
        else:
            s.add_argument("--truth", help="ground-truth CSV fixing the label frame count")
            s.add_argument("--n-frames", type=int)

    s = sub.add_parser("eval", help="LE/LR of estimates against ground truth")
    s.add_argument("--estimates", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--n-frames", type=int)

    s = sub.add_parser("upsample-train", help="fit the low-to-high channel CSM upsampler")
    s.add_argument("--manifest", required=True)
    s.add_argument("--low-channels", default="6,10,22,26")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed", "must be non-negative")
        cfg.seed = cfg.train.seed = cfg.doae.seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        cfg.train.threads = args.threads
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    # timestamps and timings go to the sidecar log, never into the artifacts
    handler = logging.FileHandler(out / f"lamap-{args.command}.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    log.info("command %s args %s", args.command, vars(args))
    tic = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        code = EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    finally:
        log.info("finished in %.2f s", time.perf_counter() - tic)
        root.removeHandler(handler)
        handler.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
