"""Free-field plane-wave scene rendering with exact direction-of-arrival ground truth."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import BandConfig, MultichannelAudio, csm_sequence, write_csm_store, write_wav
from .geometry import SPEED_OF_SOUND, ArrayGeometry, to_azel, unit_vector

log = logging.getLogger(__name__)

LABEL_HOP = 0.1
CROSSFADE = 0.01


# --- waveforms -------------------------------------------------------------

def _unit_rms(x):
    rms = np.sqrt(np.mean(x ** 2))
    return x / rms if rms > 0 else x


def white_noise(n, fs, rng):
    return _unit_rms(rng.standard_normal(n))


def speech_shaped_noise(n, fs, rng, corner_hz=500.0):
    """White noise through a one-pole lowpass (-6 dB/octave above ``corner_hz``)."""
    a = math.exp(-2.0 * math.pi * corner_hz / fs)
    return _unit_rms(lfilter([1.0], [1.0, -a], rng.standard_normal(n)))


def am_tones(n, fs, rng, f_lo=1500.0, f_hi=4500.0, n_tones=3):
    t = np.arange(n) / fs
    out = np.zeros(n)
    for _ in range(n_tones):
        f = rng.uniform(f_lo, f_hi)
        fm = rng.uniform(2.0, 8.0)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        out += (1.0 + 0.8 * np.sin(2 * np.pi * fm * t + ph[0])) * np.sin(2 * np.pi * f * t + ph[1])
    return _unit_rms(out)


def tone(n, fs, rng=None, freq=1500.0):
    return _unit_rms(np.sin(2 * np.pi * freq * np.arange(n) / fs))


WAVEFORMS = {"white": white_noise, "speech": speech_shaped_noise, "am": am_tones}


# --- scene types -----------------------------------------------------------

@dataclass
class SourceTrajectory:
    """Mono waveform plus (time, unit direction) breakpoints, interpolated along great circles."""

    waveform: np.ndarray
    sample_rate: float
    direction_track: list
    gain: float = 1.0

    def __post_init__(self):
        if not self.direction_track:
            raise ValueError("direction track needs at least one breakpoint")
        times = np.array([float(t) for t, _ in self.direction_track])
        if np.any(np.diff(times) <= 0):
            raise ValueError("breakpoint times must be strictly increasing")
        dirs = np.array([np.asarray(d, dtype=float) for _, d in self.direction_track])
        if np.any(np.abs(np.linalg.norm(dirs, axis=1) - 1.0) > 1e-9):
            raise ValueError("track directions must be unit vectors")
        self._times, self._dirs = times, dirs

    @classmethod
    def static(cls, waveform, sample_rate, direction, gain=1.0):
        d = np.asarray(direction, dtype=float)
        return cls(waveform, sample_rate, [(0.0, d / np.linalg.norm(d))], gain)

    def direction_at(self, t: float) -> np.ndarray:
        times, dirs = self._times, self._dirs
        if t <= times[0] or len(times) == 1:
            return dirs[0]
        if t >= times[-1]:
            return dirs[-1]
        i = int(np.searchsorted(times, t, side="right")) - 1
        frac = (t - times[i]) / (times[i + 1] - times[i])
        return _slerp(dirs[i], dirs[i + 1], frac)


def _slerp(u, v, frac):
    omega = math.acos(float(np.clip(u @ v, -1.0, 1.0)))
    if omega < 1e-12:
        return u
    out = (math.sin((1 - frac) * omega) * u + math.sin(frac * omega) * v) / math.sin(omega)
    return out / np.linalg.norm(out)


@dataclass
class SceneSpec:
    sources: list
    duration: float
    snr_db: float
    geometry: ArrayGeometry
    seed: int = 0
    sample_rate: float = 48000.0
    speed_of_sound: float = SPEED_OF_SOUND
    # overrides the SNR-derived noise power when set
    noise_power: float | None = None

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 1 <= len(self.sources) <= 8:
            raise ValueError(f"scenes hold 1..8 sources, got {len(self.sources)}")


@dataclass
class GroundTruth:
    """Active (source_id, unit direction) pairs per label frame."""

    frames: list
    label_hop: float = LABEL_HOP

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def write_csv(self, path) -> None:
        rows = []
        for f, active in enumerate(self.frames):
            for sid, d in active:
                az, el = to_azel(d)
                rows.append(f"{f},{sid},{float(az):.6f},{float(el):.6f}\n")
        _write_text(path, "frame_index,source_id,azimuth_deg,elevation_deg\n" + "".join(rows))

    @classmethod
    def read_csv(cls, path, n_frames: int | None = None) -> "GroundTruth":
        per_frame: dict[int, list] = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                d = unit_vector(float(row["azimuth_deg"]), float(row["elevation_deg"]))
                per_frame.setdefault(int(row["frame_index"]), []).append((int(row["source_id"]), d))
        n = n_frames if n_frames is not None else (max(per_frame) + 1 if per_frame else 0)
        return cls([per_frame.get(f, []) for f in range(n)])


def _frame_count(duration: float, hop: float = LABEL_HOP) -> int:
    return int(math.ceil(duration / hop - 1e-9))


def _crossfade_envelopes(bounds, n_samples, fs):
    """Envelopes for segments [bounds[i], bounds[i+1]) summing to one, with linear crossfades."""
    t = np.arange(n_samples) / fs
    h = CROSSFADE / 2
    envs = []
    for i in range(len(bounds) - 1):
        a, b = bounds[i], bounds[i + 1]
        rise = np.ones(n_samples) if i == 0 else np.clip((t - (a - h)) / (2 * h), 0, 1)
        fall = np.ones(n_samples) if i == len(bounds) - 2 else np.clip(((b + h) - t) / (2 * h), 0, 1)
        envs.append(rise * fall)
    return envs


def _delayed(spectrum, freqs, delays, n):
    """Band-limited circular delay of one spectrum by each delay in ``delays`` (seconds)."""
    return np.fft.irfft(spectrum[None, :] * np.exp(-2j * np.pi * freqs[None, :] * delays[:, None]),
                        n=n, axis=1)


def render_scene(spec: SceneSpec) -> tuple[MultichannelAudio, GroundTruth]:
    """Render all sources as far-field plane waves and add white noise at ``snr_db``.

    Channel m receives each source delayed by ``-(p_m . r) / c``. Directions are held
    constant per label frame and crossfaded at changes. If the mix exceeds full
    scale it is scaled down as a whole, which preserves the SNR.
    """
    fs = spec.sample_rate
    n = int(round(spec.duration * fs))
    n_frames = _frame_count(spec.duration)
    P = spec.geometry.positions
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    mix = np.zeros((spec.geometry.n_mics, n))
    frames: list[list] = [[] for _ in range(n_frames)]

    for sid, src in enumerate(spec.sources):
        if src.direction_track[0][0] > 1e-12:
            raise ValueError(f"source {sid}: direction track starts after t=0")
        if abs(src.sample_rate - fs) > 1e-9:
            raise ValueError(f"source {sid}: sample rate {src.sample_rate} != scene {fs}")
        wave = np.asarray(src.waveform, dtype=float)
        if wave.size < n:
            raise ValueError(f"source {sid}: waveform shorter than scene ({wave.size} < {n})")
        dirs = [src.direction_at((f + 0.5) * LABEL_HOP) for f in range(n_frames)]
        if src.gain > 0:
            for f in range(n_frames):
                frames[f].append((sid, dirs[f]))

        # merge runs of identical per-frame directions into segments
        bounds, seg_dirs = [0.0], [dirs[0]]
        for f in range(1, n_frames):
            if not np.array_equal(dirs[f], seg_dirs[-1]):
                bounds.append(f * LABEL_HOP)
                seg_dirs.append(dirs[f])
        bounds.append(max(spec.duration, n_frames * LABEL_HOP))

        spectrum = np.fft.rfft(src.gain * wave[:n])
        envs = _crossfade_envelopes(bounds, n, fs)
        for d, env in zip(seg_dirs, envs):
            delays = -(P @ d) / spec.speed_of_sound
            mix += env[None, :] * _delayed(spectrum, freqs, delays, n)

    rng = np.random.default_rng(spec.seed)
    if spec.noise_power is not None:
        noise_power = spec.noise_power
    elif math.isinf(spec.snr_db):
        noise_power = 0.0
    else:
        signal_power = float(np.mean(mix ** 2))
        reference = signal_power if signal_power > 0 else 1.0
        noise_power = reference / 10.0 ** (spec.snr_db / 10.0)
    if noise_power > 0:
        mix = mix + math.sqrt(noise_power) * rng.standard_normal(mix.shape)

    peak = float(np.max(np.abs(mix))) if mix.size else 0.0
    if peak > 1.0:
        mix = mix / peak
    return MultichannelAudio(mix, fs), GroundTruth(frames)


# --- datasets --------------------------------------------------------------

@dataclass
class SceneDistribution:
    """Sampling ranges for random scenes."""

    duration: float = 1.0
    n_sources: tuple = (1, 1)
    snr_db: tuple = (20.0, 30.0)
    waveforms: tuple = ("white", "speech")
    elevation_deg: tuple = (-60.0, 60.0)
    moving_probability: float = 0.0
    # angular speed of moving sources, degrees per second
    speed_deg_s: tuple = (10.0, 40.0)
    min_separation_deg: float = 30.0
    sample_rate: float = 48000.0


@dataclass
class CsmConfig:
    window_len: int = 1024
    hop: int = 512
    frames_per_csm: int = 10
    f_lo: float = 1500.0
    f_hi: float = 4500.0
    n_bands: int = 9
    bin_halfwidth: int = 0

    @property
    def bands(self) -> BandConfig:
        return BandConfig(self.f_lo, self.f_hi, self.n_bands)


def scene_seed(global_seed: int, index: int) -> int:
    """Per-scene seed derived from the global seed and scene index (order independent)."""
    return int(np.random.SeedSequence([int(global_seed), int(index)]).generate_state(1)[0])


def _random_direction(rng, el_range):
    az = rng.uniform(-180.0, 180.0)
    s_lo, s_hi = np.sin(np.deg2rad(el_range))
    el = np.rad2deg(np.arcsin(rng.uniform(s_lo, s_hi)))
    return unit_vector(az, el)


def sample_scene(dist: SceneDistribution, geometry: ArrayGeometry, seed: int) -> SceneSpec:
    rng = np.random.default_rng(seed)
    fs = dist.sample_rate
    n = int(round(dist.duration * fs))
    n_src = int(rng.integers(dist.n_sources[0], dist.n_sources[1] + 1))
    starts = []
    while len(starts) < n_src:
        d = _random_direction(rng, dist.elevation_deg)
        if all(np.degrees(np.arccos(np.clip(d @ s, -1, 1))) >= dist.min_separation_deg
               for s in starts):
            starts.append(d)
    sources = []
    for d in starts:
        kind = dist.waveforms[int(rng.integers(len(dist.waveforms)))]
        wave = WAVEFORMS[kind](n, fs, rng)
        track = [(0.0, d)]
        if rng.random() < dist.moving_probability:
            axis = np.cross(d, _random_direction(rng, (-90.0, 90.0)))
            axis /= np.linalg.norm(axis)
            angle = np.deg2rad(rng.uniform(*dist.speed_deg_s) * dist.duration)
            end = d * math.cos(angle) + np.cross(axis, d) * math.sin(angle)
            track.append((dist.duration, end / np.linalg.norm(end)))
        sources.append(SourceTrajectory(wave, fs, track, 1.0))
    return SceneSpec(sources, dist.duration, float(rng.uniform(*dist.snr_db)), geometry,
                     seed=int(rng.integers(2 ** 31)), sample_rate=fs)


def split_scenes(n_scenes: int, seed: int, val_fraction: float = 0.2) -> list[str]:
    """Seeded train/validation tags per scene index."""
    n_val = int(math.floor(val_fraction * n_scenes + 0.5))
    if n_val == 0:
        log.warning("%d scene(s): validation split is empty", n_scenes)
    order = np.random.default_rng(seed).permutation(n_scenes)
    tags = ["train"] * n_scenes
    for i in order[:n_val]:
        tags[int(i)] = "validation"
    return tags


def make_dataset(n_scenes: int, dist: SceneDistribution, output_dir, geometry: ArrayGeometry,
                 csm_config: CsmConfig = CsmConfig(), seed: int = 0) -> dict:
    """Render scenes, write WAV + CSM store + ground truth per scene, and a manifest."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tags = split_scenes(n_scenes, seed)
    scenes = []
    for i in range(n_scenes):
        s_seed = scene_seed(seed, i)
        spec = sample_scene(dist, geometry, s_seed)
        audio, truth = render_scene(spec)
        seq = csm_sequence(audio, csm_config.window_len, csm_config.hop,
                           csm_config.frames_per_csm, csm_config.bands, csm_config.bin_halfwidth)
        sid = f"scene_{i:04d}"
        files = {"audio": f"{sid}.wav", "csm": f"{sid}.lamc", "ground_truth": f"{sid}.csv"}
        write_wav(audio, out / files["audio"])
        write_csm_store(seq, out / files["csm"])
        truth.write_csv(out / files["ground_truth"])
        scenes.append({"id": sid, "split": tags[i], "seed": s_seed, "duration": spec.duration,
                       "n_label_frames": truth.n_frames, **files,
                       "sha256": {k: _sha256(out / v) for k, v in files.items()}})
    manifest = {"version": 1, "seed": int(seed), "geometry": geometry.name,
                "distribution": _jsonable(asdict(dist)), "csm": asdict(csm_config),
                "scenes": scenes}
    _write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    manifest["root"] = str(path.parent)
    return manifest


def manifest_scenes(manifest: dict, split: str | None = None) -> list[dict]:
    root = Path(manifest.get("root", "."))
    out = []
    for s in manifest["scenes"]:
        if split is None or s["split"] == split:
            out.append({**s, **{k: str(root / s[k]) for k in ("audio", "csm", "ground_truth")}})
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
