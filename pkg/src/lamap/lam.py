"""LAM autoencoder: learnable back-projection, 1-D denoising stack and steering decoder.

Shapes: ``C`` is (..., M, M) complex, ``B`` and ``A`` are (M, N) complex, latent maps
are (..., N) real. All leading axes are batch axes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .beamform import quadratic_forms
from .dsp import CsmSequence, normalize_csm
from .geometry import (ArrayGeometry, SteeringMatrix, Tessellation, fibonacci_tessellation,
                       steering_matrix)

KERNEL_SIZES = (3, 5, 7, 9)
N_STEPS = len(KERNEL_SIZES)


# --- building blocks -------------------------------------------------------

def encode(C: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Back-projection ``x0_n = b_n^H C b_n`` (the Khatri-Rao form, column-major vec)."""
    if C.shape[-1] != B.shape[0] or C.shape[-2] != B.shape[0]:
        raise ValueError(f"CSM {C.shape[-2:]} does not match B with {B.shape[0]} rows")
    z = np.sum(B.conj() * (C @ B), axis=-2)
    scale = np.abs(z.real) + 1.0
    if np.any(np.abs(z.imag) > 1e-9 * scale):
        raise ValueError("back-projection is not real; is the CSM Hermitian?")
    return z.real


def conv_same(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation along the last axis (odd kernel length)."""
    k = len(kernel)
    h = k // 2
    n = x.shape[-1]
    pad = np.zeros(x.shape[:-1] + (n + 2 * h,))
    pad[..., h:h + n] = x
    out = np.zeros_like(x, dtype=float)
    for j in range(k):
        out += kernel[j] * pad[..., j:j + n]
    return out


def _conv_kernel_grad(x, gz, k):
    h = k // 2
    n = x.shape[-1]
    pad = np.zeros(x.shape[:-1] + (n + 2 * h,))
    pad[..., h:h + n] = x
    return np.array([np.sum(gz * pad[..., j:j + n]) for j in range(k)])


def _conv_input_grad(gz, kernel):
    k = len(kernel)
    h = k // 2
    n = gz.shape[-1]
    acc = np.zeros(gz.shape[:-1] + (n + 2 * h,))
    for j in range(k):
        acc[..., j:j + n] += kernel[j] * gz
    return acc[..., h:h + n]


@dataclass
class LatentTrace:
    x: list  # x0..x4
    z: list = field(default_factory=list, repr=False)  # pre-activations of steps 1..4

    @property
    def x4(self) -> np.ndarray:
        return self.x[-1]


def denoise(x0: np.ndarray, kernels, biases) -> LatentTrace:
    """``x_t = ReLU(conv(k_t, x_{t-1}) + x0 + bias_t)`` for t = 1..4."""
    xs, zs = [x0], []
    for k, b in zip(kernels, biases):
        z = conv_same(xs[-1], k) + x0 + b
        zs.append(z)
        xs.append(np.maximum(z, 0.0))
    return LatentTrace(xs, zs)


def decode(x4: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``A diag(x4) A^H``."""
    if np.any(x4 < -1e-9):
        raise ValueError("latent map has negative entries")
    return (A * x4[..., None, :]) @ A.conj().T


def loss_terms(C, C_hat, x4, gamma, edges) -> dict:
    """Per-sample loss parts: ``mse``, ``l1``, ``tv`` and their combination ``total``."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    M = C.shape[-1]
    mse = np.sum(np.abs(C - C_hat) ** 2, axis=(-2, -1)) / M ** 2
    l1 = np.sum(np.abs(x4), axis=-1)
    if len(edges):
        tv = np.sum(np.abs(x4[..., edges[:, 0]] - x4[..., edges[:, 1]]), axis=-1)
    else:
        tv = np.zeros_like(l1)
    return {"mse": mse, "l1": l1, "tv": tv, "total": mse + gamma * (l1 + tv)}


def loss(C, C_hat, x4, gamma, edges) -> float:
    """Mean over the batch of ``MSE + gamma (||x4||_1 + sum_i sum_{j in N_i} |x4_i - x4_j|)``."""
    return float(np.mean(loss_terms(C, C_hat, x4, gamma, edges)["total"]))


# --- model -----------------------------------------------------------------

class LamBandModel:
    """Learnable parameters for one frequency band."""

    def __init__(self, B, kernels, biases, band_hz: float, input_gain: float = 1.0):
        self.B = np.array(B, dtype=np.complex128)
        # fixed (not learned) scale applied to the CSM before back-projection
        self.input_gain = float(input_gain)
        self.kernels = [np.array(k, dtype=float) for k in kernels]
        self.biases = np.array(biases, dtype=float)
        self.band_hz = float(band_hz)
        if tuple(len(k) for k in self.kernels) != KERNEL_SIZES:
            raise ValueError(f"kernel lengths must be {KERNEL_SIZES}")
        if self.biases.shape != (N_STEPS,):
            raise ValueError(f"need {N_STEPS} biases")

    @classmethod
    def from_steering(cls, A: SteeringMatrix, rng=None, input_gain: float | None = None,
                      kernel_noise: float = 0.01) -> "LamBandModel":
        """Initialize ``B = A`` and kernels as near-identity impulses.

        ``input_gain=None`` picks the gain that best reconstructs unit point
        sources placed on the tessellation nodes (see ``point_source_gain``).
        """
        rng = rng if rng is not None else np.random.default_rng(0)
        kernels = []
        for k in KERNEL_SIZES:
            w = rng.uniform(-kernel_noise, kernel_noise, size=k) if kernel_noise else np.zeros(k)
            w[k // 2] += 1.0
            kernels.append(w)
        model = cls(A.entries, kernels, np.zeros(N_STEPS), A.band_hz)
        model.input_gain = point_source_gain(model, A.entries) if input_gain is None else input_gain
        return model

    @property
    def n_mics(self) -> int:
        return self.B.shape[0]

    @property
    def n_points(self) -> int:
        return self.B.shape[1]

    def parameter_count(self) -> int:
        return 2 * self.B.size + sum(len(k) for k in self.kernels) + self.biases.size

    def params(self) -> dict:
        """Live references to the parameter arrays, keyed for the optimizer."""
        out = {"B": self.B, "bias": self.biases}
        out.update({f"k{t}": k for t, k in enumerate(self.kernels)})
        return out

    def copy(self) -> "LamBandModel":
        return LamBandModel(self.B.copy(), [k.copy() for k in self.kernels],
                            self.biases.copy(), self.band_hz, self.input_gain)

    def encode(self, C):
        return encode(self.input_gain * C, self.B)

    def latent(self, C) -> LatentTrace:
        return denoise(self.encode(C), self.kernels, self.biases)


def point_source_gain(model: "LamBandModel", A: np.ndarray) -> float:
    """Least-squares scalar g minimizing sum_n ||C_n - g C_hat_n||^2 for C_n = a_n a_n^H.

    ``C_hat_n`` is the reconstruction at unit input gain. With zero biases the
    model is positively homogeneous in C, so an input gain g scales every
    reconstruction by exactly g.
    """
    C = np.einsum("mn,kn->nmk", A, A.conj())
    C_hat = decode(denoise(encode(C, model.B), model.kernels, model.biases).x4, A)
    num = np.sum(np.real(np.conj(C_hat) * C))
    den = np.sum(np.abs(C_hat) ** 2)
    return float(num / den) if den > 0 else 1.0


def forward_backward(model: LamBandModel, A: np.ndarray, C: np.ndarray, gamma: float,
                     edges: np.ndarray, need_grad: bool = True):
    """Batch-mean loss and its gradient for every parameter.

    ``C`` is (batch, M, M). Complex gradients are returned as ``dL/dRe + 1j dL/dIm``.
    ReLU and |.| use derivative 0 at 0.
    """
    C = np.asarray(C)
    if C.ndim == 2:
        C = C[None]
    nb, M = C.shape[0], C.shape[-1]
    C_h = 0.5 * (C + np.conj(np.swapaxes(C, -1, -2)))
    trace = model.latent(C_h)
    x4 = trace.x4
    C_hat = decode(x4, A)
    terms = loss_terms(C, C_hat, x4, gamma, edges)
    value = float(np.mean(terms["total"]))
    if not need_grad:
        return value, None

    D = C_hat - C
    g = (2.0 / M ** 2) * quadratic_forms(D, A)
    g += gamma * np.sign(x4)
    if len(edges):
        s = np.sign(x4[:, edges[:, 0]] - x4[:, edges[:, 1]])
        tv_grad = np.zeros_like(x4)
        np.add.at(tv_grad.T, edges[:, 0], s.T)
        np.add.at(tv_grad.T, edges[:, 1], -s.T)
        g += gamma * tv_grad
    g /= nb

    grads = {"bias": np.zeros(N_STEPS)}
    g0 = np.zeros_like(g)
    for t in reversed(range(N_STEPS)):
        gz = g * (trace.z[t] > 0)
        grads["bias"][t] = gz.sum()
        grads[f"k{t}"] = _conv_kernel_grad(trace.x[t], gz, KERNEL_SIZES[t])
        g0 += gz
        g = _conv_input_grad(gz, model.kernels[t])
    g0 += g  # step 1 convolves x0 itself
    grads["B"] = 2.0 * model.input_gain * np.sum((C_h @ model.B) * g0[:, None, :], axis=0)
    return value, grads


@dataclass
class LamModel:
    """Per-band LAM parameters plus the fixed steering matrices they decode with."""

    per_band: list
    steering: list
    geometry: ArrayGeometry
    tessellation: Tessellation
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.per_band) != len(self.steering):
            raise ValueError("per-band models and steering matrices disagree on band count")
        for m, A in zip(self.per_band, self.steering):
            if m.B.shape != A.entries.shape:
                raise ValueError("B and steering matrix shapes differ")

    @classmethod
    def initialize(cls, geometry: ArrayGeometry, band_freqs, n_points: int = 242,
                   k_neighbors: int = 6, speed_of_sound: float = 343.0, seed: int = 0,
                   input_gain: float | None = None, csm_normalization: str = "trace"
                   ) -> "LamModel":
        tess = fibonacci_tessellation(n_points, k_neighbors)
        steer = [steering_matrix(geometry, tess, f, speed_of_sound) for f in band_freqs]
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(steer))]
        bands = [LamBandModel.from_steering(A, rng, input_gain) for A, rng in zip(steer, rngs)]
        config = {"n_points": n_points, "k_neighbors": k_neighbors,
                  "speed_of_sound": speed_of_sound, "csm_normalization": csm_normalization,
                  "seed": seed}
        return cls(bands, steer, geometry, tess, config)

    @property
    def band_freqs(self) -> np.ndarray:
        return np.array([m.band_hz for m in self.per_band])

    @property
    def n_bands(self) -> int:
        return len(self.per_band)

    def edges(self) -> np.ndarray:
        return self.tessellation.edges()

    def prepare(self, entries: np.ndarray) -> np.ndarray:
        if self.config.get("csm_normalization", "trace") == "trace":
            return normalize_csm(entries)
        return entries

    def check_bands(self, band_freqs) -> None:
        band_freqs = np.asarray(band_freqs, dtype=float)
        if band_freqs.shape != self.band_freqs.shape or not np.allclose(
                band_freqs, self.band_freqs, rtol=0, atol=1e-6):
            raise ValueError(f"band mismatch: model {self.band_freqs.tolist()} vs "
                             f"data {band_freqs.tolist()}")

    def forward(self, seq: CsmSequence, return_trace: bool = False, dtype=np.float64):
        """Denoised maps x4 as a (W, F, N) array, optionally with per-band LatentTraces."""
        self.check_bands(seq.band_freqs)
        entries = self.prepare(seq.entries)
        cdtype = np.complex64 if dtype == np.float32 else np.complex128
        maps = np.zeros((seq.n_windows, self.n_bands, self.per_band[0].n_points), dtype=dtype)
        traces = []
        for f, m in enumerate(self.per_band):
            C = entries[:, f].astype(cdtype)
            x0 = encode(m.input_gain * C, m.B.astype(cdtype)).astype(dtype)
            tr = denoise(x0, [k.astype(dtype) for k in m.kernels], m.biases.astype(dtype))
            maps[:, f] = tr.x4
            traces.append(tr)
        return (maps, traces) if return_trace else maps

    def copy(self) -> "LamModel":
        return LamModel([m.copy() for m in self.per_band], list(self.steering), self.geometry,
                        self.tessellation, dict(self.config))


# --- checkpoint ------------------------------------------------------------

_CKPT_MAGIC = b"LAMM"
_CKPT_VERSION = 1


def save_checkpoint(model: LamModel, path) -> None:
    M, N = model.per_band[0].B.shape
    F = model.n_bands
    parts = [_CKPT_MAGIC, struct.pack("<HHHH", _CKPT_VERSION, M, N, F),
             np.asarray(model.band_freqs, "<f8").tobytes()]
    for m in model.per_band:
        parts.append(np.ascontiguousarray(m.B).view(np.float64).astype("<f8").tobytes())
        parts.append(np.concatenate(m.kernels).astype("<f8").tobytes())
        parts.append(m.biases.astype("<f8").tobytes())
    cfg = dict(model.config)
    cfg["input_gains"] = [m.input_gain for m in model.per_band]
    cfg["geometry"] = {"name": model.geometry.name,
                       "positions": model.geometry.positions.tolist()}
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> LamModel:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a LAM checkpoint (bad magic)")
    version, M, N, F = struct.unpack_from("<HHHH", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    freqs = np.frombuffer(data, "<f8", F, off)
    off += 8 * F
    n_k = sum(KERNEL_SIZES)
    if len(data) < off + F * 8 * (2 * M * N + n_k + N_STEPS):
        raise ValueError(f"{path}: truncated checkpoint")
    raw = []
    for _ in range(F):
        B = np.frombuffer(data, "<f8", 2 * M * N, off).copy().view(np.complex128).reshape(M, N)
        off += 16 * M * N
        kflat = np.frombuffer(data, "<f8", n_k, off).copy()
        off += 8 * n_k
        biases = np.frombuffer(data, "<f8", N_STEPS, off).copy()
        off += 8 * N_STEPS
        raw.append((B, np.split(kflat, np.cumsum(KERNEL_SIZES)[:-1]), biases))
    if len(data) < off + 4:
        raise ValueError(f"{path}: truncated checkpoint")
    (length,) = struct.unpack_from("<I", data, off)
    if len(data) != off + 4 + length:
        raise ValueError(f"{path}: truncated or oversized checkpoint")
    cfg = json.loads(data[off + 4: off + 4 + length].decode("utf-8"))
    geo = cfg.pop("geometry")
    gains = cfg.pop("input_gains", [1.0] * F)
    geometry = ArrayGeometry(np.asarray(geo["positions"]), geo["name"])
    tess = fibonacci_tessellation(cfg["n_points"], cfg["k_neighbors"])
    if tess.n_points != N:
        raise ValueError(f"{path}: config tessellation size {tess.n_points} != stored N={N}")
    steer = [steering_matrix(geometry, tess, f, cfg["speed_of_sound"]) for f in freqs]
    bands = [LamBandModel(B, ks, b, f, gain) for (B, ks, b), f, gain in zip(raw, freqs, gains)]
    return LamModel(bands, steer, geometry, tess, cfg)
