"""STFT, band selection, cross-spectral matrices and the CSM channel upsampler."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MultichannelAudio:
    samples: np.ndarray  # (M, T), amplitude in [-1, 1]
    sample_rate: float

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if y.size == 0:
            raise ValueError("audio must have at least one channel and one sample")
        if not np.all(np.isfinite(y)):
            raise ValueError("audio samples must be finite")
        object.__setattr__(self, "samples", y)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.sample_rate


@dataclass(frozen=True)
class StftTensor:
    values: np.ndarray  # (M, frames, bins) complex
    frame_times: np.ndarray
    bin_freqs: np.ndarray
    window_len: int
    hop: int
    sample_rate: float


def stft(audio: MultichannelAudio, window_len: int = 1024, hop: int = 512) -> StftTensor:
    """Hann-windowed STFT; frame ``n`` covers samples ``[n*hop, n*hop + window_len)``.

    Uses the positive-exponent kernel ``sum_t w[t] y[t] exp(+2j pi k t / L)``
    (the complex conjugate of ``numpy.fft.rfft``). Under this convention a
    plane wave from direction ``r`` produces the phase pattern of the
    steering vector ``exp(-j 2pi/lambda p.r)``.
    """
    y = audio.samples
    n_samples = y.shape[1]
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if window_len > n_samples:
        raise ValueError(f"audio ({n_samples} samples) is shorter than one window ({window_len})")
    n_frames = 1 + (n_samples - window_len) // hop
    window = get_window("hann", window_len)
    starts = np.arange(n_frames) * hop
    frames = np.lib.stride_tricks.sliding_window_view(y, window_len, axis=1)[:, starts]
    values = np.conj(np.fft.rfft(frames * window, axis=-1))
    fs = float(audio.sample_rate)
    return StftTensor(values, (starts + window_len / 2) / fs,
                      np.fft.rfftfreq(window_len, 1.0 / fs), window_len, hop, fs)


def band_bins(bin_freqs, f_lo: float = 1500.0, f_hi: float = 4500.0, n_bands: int = 9) -> np.ndarray:
    """Nearest STFT bin for each of ``n_bands`` linearly spaced targets in [f_lo, f_hi]."""
    bin_freqs = np.asarray(bin_freqs, dtype=float)
    nyquist = bin_freqs[-1]
    if n_bands < 1:
        raise ValueError("n_bands must be >= 1")
    if f_hi > nyquist + 1e-9:
        raise ValueError(f"f_hi={f_hi} Hz is above Nyquist ({nyquist} Hz)")
    if n_bands > 1 and not f_lo < f_hi:
        raise ValueError(f"need f_lo < f_hi, got {f_lo}, {f_hi}")
    targets = np.linspace(f_lo, f_hi, n_bands) if n_bands > 1 else np.array([f_lo])
    bins = np.argmin(np.abs(bin_freqs[None, :] - targets[:, None]), axis=1)
    if len(set(bins.tolist())) < len(bins):
        log.warning("band targets %s map to duplicate bins %s", targets.tolist(), bins.tolist())
    return bins


@dataclass(frozen=True)
class CrossSpectralMatrix:
    entries: np.ndarray  # (M, M) complex
    band_hz: float
    n_frames_averaged: int = 1
    timestamp: float = 0.0

    @property
    def n_mics(self) -> int:
        return self.entries.shape[0]


def csm(tensor: StftTensor, bin: int, frame_range, bin_halfwidth: int = 0) -> CrossSpectralMatrix:
    """Average of ``Y(n,k) Y(n,k)^H`` over the frames in ``frame_range = (n0, n1)``.

    With ``bin_halfwidth > 0`` the per-bin CSMs of bins ``k-b..k+b`` are averaged too.
    """
    n0, n1 = int(frame_range[0]), int(frame_range[1])
    n_total = tensor.values.shape[1]
    if n1 <= n0:
        raise ValueError(f"empty frame range [{n0}, {n1})")
    if n0 < 0 or n1 > n_total:
        raise ValueError(f"frame range [{n0}, {n1}) outside tensor with {n_total} frames")
    lo, hi = max(bin - bin_halfwidth, 0), min(bin + bin_halfwidth + 1, tensor.values.shape[2])
    Y = tensor.values[:, n0:n1, lo:hi]  # (M, N, b)
    C = np.einsum("mnb,knb->mk", Y, Y.conj()) / (Y.shape[1] * Y.shape[2])
    t0 = n0 * tensor.hop
    t1 = (n1 - 1) * tensor.hop + tensor.window_len
    return CrossSpectralMatrix(C, float(tensor.bin_freqs[bin]), n1 - n0,
                               0.5 * (t0 + t1) / tensor.sample_rate)


@dataclass(frozen=True)
class BandConfig:
    f_lo: float = 1500.0
    f_hi: float = 4500.0
    n_bands: int = 9


@dataclass
class CsmSequence:
    """CSMs for W windows and F bands, stored as a (W, F, M, M) complex array."""

    entries: np.ndarray
    band_freqs: np.ndarray
    timestamps: np.ndarray
    sample_rate: float
    n_frames_averaged: int = 1

    @property
    def n_windows(self) -> int:
        return self.entries.shape[0]

    @property
    def n_bands(self) -> int:
        return self.entries.shape[1]

    @property
    def n_mics(self) -> int:
        return self.entries.shape[2]

    def get(self, window: int, band: int) -> CrossSpectralMatrix:
        return CrossSpectralMatrix(self.entries[window, band], float(self.band_freqs[band]),
                                   self.n_frames_averaged, float(self.timestamps[window]))

    def select_bands(self, bands) -> "CsmSequence":
        bands = list(bands)
        return CsmSequence(self.entries[:, bands], self.band_freqs[bands], self.timestamps,
                           self.sample_rate, self.n_frames_averaged)

    def select_channels(self, zero_based) -> "CsmSequence":
        idx = np.asarray(zero_based)
        return CsmSequence(self.entries[:, :, idx[:, None], idx[None, :]], self.band_freqs,
                           self.timestamps, self.sample_rate, self.n_frames_averaged)

    @staticmethod
    def concat(seqs, time_offsets=None) -> "CsmSequence":
        seqs = list(seqs)
        if not seqs:
            raise ValueError("nothing to concatenate")
        first = seqs[0]
        for s in seqs[1:]:
            if s.n_mics != first.n_mics or not np.allclose(s.band_freqs, first.band_freqs):
                raise ValueError("sequences disagree on channels or bands")
        offsets = time_offsets if time_offsets is not None else [0.0] * len(seqs)
        return CsmSequence(np.concatenate([s.entries for s in seqs]), first.band_freqs,
                           np.concatenate([s.timestamps + o for s, o in zip(seqs, offsets)]),
                           first.sample_rate, first.n_frames_averaged)


def csm_sequence(audio: MultichannelAudio, window_len: int = 1024, hop: int = 512,
                 frames_per_csm: int = 10, bands: BandConfig = BandConfig(),
                 bin_halfwidth: int = 0) -> CsmSequence:
    """Tile the recording into windows of ``frames_per_csm`` STFT frames, one CSM per band each.

    A trailing partial window is dropped.
    """
    tensor = stft(audio, window_len, hop)
    bins = band_bins(tensor.bin_freqs, bands.f_lo, bands.f_hi, bands.n_bands)
    n_windows = tensor.values.shape[1] // frames_per_csm
    M = audio.n_channels
    out = np.zeros((n_windows, len(bins), M, M), dtype=np.complex128)
    stamps = np.zeros(n_windows)
    for w in range(n_windows):
        rng = (w * frames_per_csm, (w + 1) * frames_per_csm)
        for f, k in enumerate(bins):
            c = csm(tensor, int(k), rng, bin_halfwidth)
            out[w, f] = c.entries
            stamps[w] = c.timestamp
    return CsmSequence(out, tensor.bin_freqs[bins].copy(), stamps, tensor.sample_rate,
                       frames_per_csm)


def normalize_csm(entries: np.ndarray) -> np.ndarray:
    """Scale each CSM in ``entries[..., M, M]`` to trace M; all-zero CSMs stay zero."""
    M = entries.shape[-1]
    tr = np.real(np.trace(entries, axis1=-2, axis2=-1))
    scale = np.where(tr > 0, M / np.where(tr > 0, tr, 1.0), 0.0)
    return entries * scale[..., None, None]


def hermitian_psd_project(C: np.ndarray) -> np.ndarray:
    """Hermitian-symmetrize then clip negative eigenvalues at zero (batched)."""
    H = 0.5 * (C + np.conj(np.swapaxes(C, -1, -2)))
    w, V = np.linalg.eigh(H)
    P = (V * np.clip(w, 0.0, None)[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2))
    return 0.5 * (P + np.conj(np.swapaxes(P, -1, -2)))


class LearnedUpsampler:
    """Per-band complex linear map from a low-channel CSM to a high-channel CSM.

    Stand-in for a learned super-resolution network: ``vec(C_hi) ~ W^T vec(C_lo)``,
    fitted by least squares on paired CSMs recorded from identical scenes.
    """

    def __init__(self, band_freqs, weights, m_low: int, m_high: int):
        self.band_freqs = np.asarray(band_freqs, dtype=float)
        self.weights = np.asarray(weights, dtype=np.complex128)  # (F, m_low^2, m_high^2)
        self.m_low = m_low
        self.m_high = m_high

    @classmethod
    def untrained(cls, band_freqs, m_low: int = 4, m_high: int = 32) -> "LearnedUpsampler":
        F = len(band_freqs)
        return cls(band_freqs, np.zeros((F, m_low ** 2, m_high ** 2), complex), m_low, m_high)

    @classmethod
    def fit(cls, low: np.ndarray, high: np.ndarray, band_freqs) -> "LearnedUpsampler":
        """Least-squares fit from paired ``low`` (n, F, m, m) and ``high`` (n, F, M, M) CSMs."""
        n, F, m, _ = low.shape
        M = high.shape[-1]
        if high.shape[:2] != (n, F):
            raise ValueError("low and high CSM batches must pair up")
        weights = np.zeros((F, m * m, M * M), dtype=np.complex128)
        for f in range(F):
            X = low[:, f].reshape(n, m * m)
            Y = high[:, f].reshape(n, M * M)
            weights[f] = np.linalg.lstsq(X, Y, rcond=None)[0]
        return cls(band_freqs, weights, m, M)

    def band_index(self, band_hz: float) -> int:
        hit = np.flatnonzero(np.isclose(self.band_freqs, band_hz, rtol=0, atol=1e-6))
        if hit.size == 0:
            raise ValueError(f"upsampler has no band at {band_hz} Hz "
                             f"(bands: {self.band_freqs.tolist()})")
        return int(hit[0])

    def apply(self, entries: np.ndarray, band: int) -> np.ndarray:
        """Upsample a batch ``(..., m, m)`` of CSMs for band index ``band``."""
        m, M = self.m_low, self.m_high
        if entries.shape[-2:] != (m, m):
            raise ValueError(f"expected {m}x{m} CSMs, got {entries.shape[-2:]}")
        lead = entries.shape[:-2]
        out = entries.reshape(-1, m * m) @ self.weights[band]
        return hermitian_psd_project(out.reshape(*lead, M, M))

    def upsample_sequence(self, seq: CsmSequence) -> CsmSequence:
        out = np.stack([self.apply(seq.entries[:, f], self.band_index(fz))
                        for f, fz in enumerate(seq.band_freqs)], axis=1)
        return CsmSequence(out, seq.band_freqs, seq.timestamps, seq.sample_rate,
                           seq.n_frames_averaged)

    def save(self, path) -> None:
        np.savez(path, band_freqs=self.band_freqs, weights=self.weights,
                 m_low=self.m_low, m_high=self.m_high)

    @classmethod
    def load(cls, path) -> "LearnedUpsampler":
        with np.load(path) as z:
            return cls(z["band_freqs"], z["weights"], int(z["m_low"]), int(z["m_high"]))


def upsample_csm(low: CrossSpectralMatrix, upsampler: LearnedUpsampler) -> CrossSpectralMatrix:
    band = upsampler.band_index(low.band_hz)
    return CrossSpectralMatrix(upsampler.apply(low.entries, band), low.band_hz,
                               low.n_frames_averaged, low.timestamp)


# --- CSM store -------------------------------------------------------------

_CSM_MAGIC = b"LAMC"
_CSM_VERSION = 1


def write_csm_store(seq: CsmSequence, path) -> None:
    W, F, M, _ = seq.entries.shape
    parts = [_CSM_MAGIC, struct.pack("<HHHId", _CSM_VERSION, M, F, W, float(seq.sample_rate)),
             np.asarray(seq.band_freqs, "<f8").tobytes()]
    for w in range(W):
        for f in range(F):
            parts.append(struct.pack("<d", float(seq.timestamps[w])))
            parts.append(np.ascontiguousarray(seq.entries[w, f], dtype="<c8").tobytes())
    _atomic_write(path, b"".join(parts))


def read_csm_store(path) -> CsmSequence:
    data = Path(path).read_bytes()
    if data[:4] != _CSM_MAGIC:
        raise ValueError(f"{path}: not a CSM store (bad magic)")
    version, M, F, W, fs = struct.unpack_from("<HHHId", data, 4)
    if version != _CSM_VERSION:
        raise ValueError(f"{path}: unsupported CSM store version {version}")
    off = 4 + struct.calcsize("<HHHId")
    band_freqs = np.frombuffer(data, "<f8", F, off).copy()
    off += 8 * F
    rec = np.dtype([("t", "<f8"), ("c", "<c8", (M, M))])
    expected = off + rec.itemsize * W * F
    if len(data) != expected:
        raise ValueError(f"{path}: truncated or oversized CSM store "
                         f"({len(data)} bytes, expected {expected})")
    recs = np.frombuffer(data, rec, W * F, off).reshape(W, F)
    entries = recs["c"].astype(np.complex128)
    timestamps = recs["t"][:, 0].copy() if F else np.zeros(W)
    return CsmSequence(entries, band_freqs, timestamps, fs)


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


# --- WAV I/O ---------------------------------------------------------------

def read_wav(path) -> MultichannelAudio:
    from scipy.io import wavfile

    fs, data = wavfile.read(path)
    if data.dtype == np.uint8:
        y = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype.kind == "i":
        y = data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    else:
        y = data.astype(np.float64)
    y = y.reshape(len(y), -1).T
    return MultichannelAudio(y, float(fs))


def write_wav(audio: MultichannelAudio, path) -> None:
    """Write 32-bit float WAV."""
    from scipy.io import wavfile

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        wavfile.write(fh, int(round(audio.sample_rate)), audio.samples.T.astype(np.float32))
    tmp.replace(path)
