"""Self-supervised training: Adam, the per-band training loop and a gradient checker."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dsp import CsmSequence
from .lam import LamBandModel, LamModel, forward_backward

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite loss or gradient."""


class DivergenceError(NumericalError):
    """Training loss exceeded the divergence threshold."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-6
    gamma: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    threads: int = 1
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# --- Adam ------------------------------------------------------------------

def _real(a: np.ndarray) -> np.ndarray:
    return a.view(np.float64) if np.iscomplexobj(a) else a


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One Adam update applied in place; complex arrays are updated as (re, im) pairs."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient for {name!r} ({bad} entries) "
                                 f"at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = _real(np.ascontiguousarray(grads[name]))
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        _real(p)[...] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --- training --------------------------------------------------------------

@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # (epoch, band, train_loss, val_loss)
    best_epoch: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def curve(self, band: int, column: str = "val_loss") -> np.ndarray:
        col = {"train_loss": 2, "val_loss": 3}[column]
        return np.array([r[col] for r in self.rows if r[1] == band])

    def to_csv(self) -> str:
        lines = ["epoch,band,train_loss,val_loss"]
        lines += [f"{e},{b},{tr:.10e},{va:.10e}" for e, b, tr, va in self.rows]
        return "\n".join(lines) + "\n"


def _eval_loss(model, A, C, gamma, edges, batch=256):
    if len(C) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(C), batch):
        part = C[i:i + batch]
        total += forward_backward(model, A, part, gamma, edges, need_grad=False)[0] * len(part)
    return total / len(C)


def train_band(model: LamBandModel, A: np.ndarray, edges: np.ndarray, train_C: np.ndarray,
               val_C: np.ndarray, cfg: TrainConfig, seed, band: int = 0, on_epoch=None):
    """Train one band in place-free fashion; returns (best model, [(epoch, train, val)])."""
    if len(train_C) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    model = model.copy()
    use_val = len(val_C) > 0
    if not use_val:
        log.warning("band %d: no validation windows, selecting on training loss", band)

    init_train = _eval_loss(model, A, train_C, cfg.gamma, edges)
    init_val = _eval_loss(model, A, val_C, cfg.gamma, edges) if use_val else init_train
    curve = [(0, init_train, init_val)]
    if on_epoch:
        on_epoch(band, *curve[-1])
    best, best_val, best_epoch, stale = model.copy(), init_val, 0, 0
    state = AdamState()
    limit = cfg.divergence_factor * max(init_train, np.finfo(float).tiny)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_C))
        losses = []
        for b, i in enumerate(range(0, len(order), cfg.batch_size)):
            value, grads = forward_backward(model, A, train_C[order[i:i + cfg.batch_size]],
                                            cfg.gamma, edges)
            if not np.isfinite(value):
                raise NumericalError(f"band {band} epoch {epoch} batch {b}: loss is {value}")
            if value > limit:
                raise DivergenceError(f"band {band} epoch {epoch} batch {b}: loss {value:.4g} "
                                      f"exceeds {cfg.divergence_factor:g}x initial {init_train:.4g}")
            try:
                adam_step(model.params(), grads, state, cfg.learning_rate)
            except NumericalError as exc:
                raise NumericalError(f"band {band} epoch {epoch} batch {b}: {exc}") from exc
            losses.append(value * len(order[i:i + cfg.batch_size]))
        tr = float(np.sum(losses) / len(order))
        va = _eval_loss(model, A, val_C, cfg.gamma, edges) if use_val else tr
        curve.append((epoch, tr, va))
        if on_epoch:
            on_epoch(band, epoch, tr, va)
        if va < best_val:
            best, best_val, best_epoch, stale = model.copy(), va, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, curve, best_epoch


def band_seeds(seed: int, n_bands: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence([seed, 1]).spawn(n_bands)]


def train(model: LamModel, train_seq: CsmSequence, val_seq: CsmSequence | None,
          cfg: TrainConfig, on_epoch=None) -> tuple[LamModel, TrainReport]:
    """Minimize the batch-mean loss per band; keep each band's best-validation parameters."""
    if train_seq is None or train_seq.n_windows == 0:
        raise ValueError("empty training set")
    model.check_bands(train_seq.band_freqs)
    if val_seq is not None and val_seq.n_windows:
        model.check_bands(val_seq.band_freqs)
    tic = time.perf_counter()
    edges = model.edges()
    train_all = model.prepare(train_seq.entries)
    val_all = model.prepare(val_seq.entries) if val_seq is not None else None
    seeds = band_seeds(cfg.seed, model.n_bands)

    def job(f):
        val = val_all[:, f] if val_all is not None else np.zeros((0,) + train_all.shape[2:])
        return train_band(model.per_band[f], model.steering[f].entries, edges,
                          train_all[:, f], val, cfg, seeds[f], f, on_epoch)

    if cfg.threads > 1 and model.n_bands > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(job, range(model.n_bands)))
    else:
        results = [job(f) for f in range(model.n_bands)]

    trained = model.copy()
    report = TrainReport()
    for f, (best, curve, best_epoch) in enumerate(results):
        trained.per_band[f] = best
        report.best_epoch[f] = best_epoch
        report.rows.extend((e, f, tr, va) for e, tr, va in curve)
    report.rows.sort(key=lambda r: (r[0], r[1]))
    report.wall_time = time.perf_counter() - tic
    return trained, report


# --- gradient verification -------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    tolerance: float
    worst: str = ""
    n_unresolved: int = 0
    # both gradients exactly zero (e.g. a fully inactive map); not counted as checked
    n_zero: int = 0

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} tolerance={self.tolerance:g} "
                f"checked={self.n_checked} excluded_kinks={self.n_excluded} "
                f"below_roundoff={self.n_unresolved} zero={self.n_zero} worst={self.worst}")


def _kink_signature(model, C, edges):
    tr = model.latent(C)
    parts = [z > 0 for z in tr.z]
    x4 = tr.x4
    parts.append(np.sign(x4))
    if len(edges):
        parts.append(np.sign(x4[..., edges[:, 0]] - x4[..., edges[:, 1]]))
    return np.concatenate([np.ravel(p).astype(np.int8) for p in parts])


def _param_slots(model: LamBandModel):
    """(name, flat index, direction) for every real degree of freedom."""
    slots = []
    for name, arr in model.params().items():
        for i in range(arr.size):
            if np.iscomplexobj(arr):
                slots.append((name, i, 1.0))
                slots.append((name, i, 1j))
            else:
                slots.append((name, i, 1.0))
    return slots


def check_gradients(model: LamBandModel, A: np.ndarray, C: np.ndarray, gamma: float = 1e-4,
                    edges: np.ndarray | None = None, tolerance: float = 1e-4,
                    n_params: int = 200, h: float = 1e-5, seed: int = 0,
                    kink_probe: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients with central differences on a random parameter subset.

    Kernel taps and biases are always checked; B components fill the rest up to
    ``n_params``. A parameter whose +-``kink_probe`` perturbation flips any
    ReLU, |x4| or TV sign is counted as kink-adjacent and excluded.

    Components whose gradient is so small that the central difference cannot
    resolve it to ``tolerance`` (roundoff ``~4 eps |L| / h``) are skipped and
    counted in ``n_unresolved``.
    """
    edges = np.zeros((0, 2), int) if edges is None else edges
    model = model.copy()
    C = np.asarray(C)
    if C.ndim == 2:
        C = C[None]
    C_h = 0.5 * (C + np.conj(np.swapaxes(C, -1, -2)))
    L0, grads = forward_backward(model, A, C, gamma, edges)
    floor = 4 * np.finfo(float).eps * abs(L0) / h / tolerance if tolerance > 0 else np.inf
    base_sig = _kink_signature(model, C_h, edges)

    slots = _param_slots(model)
    fixed = [s for s in slots if s[0] != "B"]
    b_slots = [s for s in slots if s[0] == "B"]
    rng = np.random.default_rng(seed)
    n_b = min(len(b_slots), max(n_params - len(fixed), 0))
    chosen = fixed + [b_slots[i] for i in sorted(rng.choice(len(b_slots), n_b, replace=False))]

    params = model.params()
    worst, worst_name, checked, excluded, unresolved, zero = 0.0, "", 0, 0, 0, 0
    for name, idx, direction in chosen:
        flat = params[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + kink_probe * direction
        sig_p = _kink_signature(model, C_h, edges)
        flat[idx] = orig - kink_probe * direction
        sig_m = _kink_signature(model, C_h, edges)
        if not (np.array_equal(sig_p, base_sig) and np.array_equal(sig_m, base_sig)):
            flat[idx] = orig
            excluded += 1
            continue
        flat[idx] = orig + h * direction
        lp, _ = forward_backward(model, A, C, gamma, edges, need_grad=False)
        flat[idx] = orig - h * direction
        lm, _ = forward_backward(model, A, C, gamma, edges, need_grad=False)
        flat[idx] = orig
        fd = (lp - lm) / (2 * h)
        an = float(np.real(grads[name].reshape(-1)[idx] * np.conj(direction)))
        denom = max(abs(fd), abs(an))
        if denom == 0:
            zero += 1
            continue
        if denom < floor:
            unresolved += 1
            continue
        rel = abs(fd - an) / denom
        checked += 1
        if rel > worst or not np.isfinite(rel):
            worst = rel
            worst_name = f"{name}[{idx}]{'.imag' if direction == 1j else ''}"
    return GradCheckReport(worst, checked, excluded, tolerance, worst_name, unresolved, zero)


def mean_l1(model: LamModel, seq: CsmSequence) -> float:
    """Mean ||x4||_1 over windows and bands."""
    return float(np.mean(np.sum(model.forward(seq), axis=-1)))
