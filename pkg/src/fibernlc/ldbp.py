"""Learned digital backpropagation.

The model alternates symmetric FIR filters (one per polarization) with fixed
Kerr phase rotations::

    L1 N1 L2 N2 ... N_K L_{K+1}

Gradients are computed by an explicit reverse-mode pass. For a complex
quantity ``z`` the gradient of the real loss is stored as
``dL/dRe(z) + 1j * dL/dIm(z)``; a complex-linear map ``y = A x`` then
back-propagates as ``g_x = A^H g_y``.

The received signal is expected at launch power. Filters carry dispersion
only; the span power profile is folded into the nonlinear coefficients
``c_n = gamma * f * L_eff(h_n) * exp(-a z_n)`` where ``z_n`` is the start of
the forward step inside its span.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft as sp_fft

from .cdfir import FirFilter, ls_cd_filter
from .channel import FiberParams, LinkConfig, alpha_linear, effective_length, step_plan
from .signal import DualPolSignal, NonFiniteError, SymbolFrame, dbm_to_watt, rrc_spectrum

logger = logging.getLogger(__name__)

SHORT_LAYER_FRACTION = 22 / 61


# ---------------------------------------------------------------------------
# Model

@dataclass(eq=False)
class LdbpModel:
    """Layer stack ``L1 N1 ... N_K L_{K+1}``.

    ``layers[i]`` is the ``(x, y)`` filter pair of linear layer ``i`` and
    ``nl_coeffs[i]`` the rotation coefficient (rad/W) applied after it as
    ``exp(-j c (|x|^2 + |y|^2))``.
    """

    layers: list
    nl_coeffs: np.ndarray
    sample_rate: float
    layer_distance_km: np.ndarray | None = None
    quant_bits: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nl_coeffs = np.asarray(self.nl_coeffs, dtype=float)
        if len(self.layers) != self.nl_coeffs.size + 1:
            raise ValueError("need exactly one more linear layer than nonlinear steps")
        if not np.isfinite(self.nl_coeffs).all():
            raise ValueError("nonlinear coefficients must be finite")
        for pair in self.layers:
            if len(pair) != 2:
                raise ValueError("each linear layer needs an (x, y) filter pair")
            if pair[0].n_taps != pair[1].n_taps or not np.array_equal(pair[0].mask, pair[1].mask):
                raise ValueError("x and y filters of a layer must share length and mask")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def copy(self) -> "LdbpModel":
        return replace(self, layers=[(a.copy(), b.copy()) for a, b in self.layers],
                       nl_coeffs=self.nl_coeffs.copy(), meta=dict(self.meta))

    def active_lengths(self) -> list[int]:
        return [pair[0].active_length for pair in self.layers]


def merged_layer_distances(step_sizes, n_spans: int) -> np.ndarray:
    """CD length (km) of each linear layer after merging adjacent half-steps.

    Steps are taken in reverse link order; the first and last layers carry a
    single half-step.
    """
    rev = np.tile(np.asarray(step_sizes, dtype=float)[::-1], n_spans)
    inner = 0.5 * (rev[:-1] + rev[1:])
    return np.concatenate([[rev[0] / 2], inner, [rev[-1] / 2]])


def build_model(link: LinkConfig, stps: int, init_lengths, fiber: FiberParams | None = None,
                sample_rate: float = 50e9, step_mode: str = "logarithmic",
                passband_fraction: float = 0.6, oob_weight: float = 1e-4) -> LdbpModel:
    """LDBP initialized from least-squares inverse-CD filters.

    ``fiber`` holds the receiver's parameter estimates (defaults to the link's
    fiber). ``init_lengths`` is one odd length for every layer or a sequence
    with ``n_spans * stps + 1`` entries.
    """
    if stps < 1:
        raise ValueError("stps must be >= 1")
    fib = link.fiber if fiber is None else fiber
    n_nl = link.n_spans * stps
    if np.isscalar(init_lengths):
        init_lengths = [int(init_lengths)] * (n_nl + 1)
    init_lengths = list(init_lengths)
    if len(init_lengths) != n_nl + 1:
        raise ValueError(f"expected {n_nl + 1} initial lengths, got {len(init_lengths)}")
    plan = step_plan(fib.span_length_km, fib.alpha_db_per_km, stps, step_mode)
    dist = merged_layer_distances(plan.step_sizes, link.n_spans)
    a = alpha_linear(fib.alpha_db_per_km)
    starts = plan.boundaries[:-1]
    per_span = np.array([
        fib.gamma_per_w_km * fib.manakov_factor * effective_length(h, fib.alpha_db_per_km) * math.exp(-a * z)
        for h, z in zip(plan.step_sizes, starts)
    ])
    coeffs = np.tile(per_span[::-1], link.n_spans)
    cache: dict = {}
    layers = []
    for d, n in zip(dist, init_lengths):
        key = (round(float(d), 12), int(n))
        if key not in cache:
            cache[key] = ls_cd_filter(fib.beta2_ps2_per_km, d, sample_rate, int(n),
                                      passband_fraction, oob_weight)
        f = cache[key]
        layers.append((f.copy(), f.copy()))
    return LdbpModel(layers, coeffs, sample_rate, dist,
                     meta={"stps": stps, "n_spans": link.n_spans, "step_mode": step_mode,
                           "gamma": fib.gamma_per_w_km, "beta2": fib.beta2_ps2_per_km})


# ---------------------------------------------------------------------------
# Quantization

def quantize_taps(taps: np.ndarray, bits: int, scale: float | None = None) -> np.ndarray:
    """Uniform symmetric mid-rise quantizer over ``[-m, m]`` on Re and Im parts.

    ``m`` defaults to the largest real or imaginary magnitude in ``taps``.
    Values exactly between two levels round up.
    """
    if bits < 2:
        raise ValueError("bits must be >= 2")
    taps = np.asarray(taps)
    m = scale if scale is not None else max(np.abs(taps.real).max(initial=0.0),
                                            np.abs(taps.imag).max(initial=0.0))
    if m == 0:
        return np.zeros_like(taps)
    step = 2 * m / 2 ** bits
    top = (2 ** bits - 1) * step / 2

    def q(v):
        return np.clip(step * (np.floor(v / step) + 0.5), -top, top)

    if np.iscomplexobj(taps):
        return q(taps.real) + 1j * q(taps.imag)
    return q(taps)


def fake_quantize(model: LdbpModel, bits: int) -> LdbpModel:
    """Copy of ``model`` whose forward pass uses ``bits``-bit taps.

    Master taps stay in floating point; gradients pass straight through.
    """
    if bits < 2:
        raise ValueError("bits must be >= 2")
    out = model.copy()
    out.quant_bits = int(bits)
    return out


def layer_taps(model: LdbpModel, i: int) -> np.ndarray:
    """Effective taps of layer ``i`` as a ``(2, n_taps)`` array."""
    fx, fy = model.layers[i]
    taps = np.stack([fx.taps, fy.taps])
    if model.quant_bits is not None:
        taps = quantize_taps(taps, model.quant_bits) * fx.mask
    return taps


# ---------------------------------------------------------------------------
# Forward / backward

def _offsets(mask: np.ndarray) -> np.ndarray:
    return np.flatnonzero(mask)


def _pad(x: np.ndarray, half: int) -> np.ndarray:
    """Circular padding by ``half`` samples on both ends of the last axis."""
    if half == 0:
        return x
    return np.concatenate([x[..., -half:], x, x[..., :half]], axis=-1)


def _conv(x: np.ndarray, taps: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Circular ``y[n] = sum_k t[k] x[n - k]`` for the unmasked lags ``idx``."""
    half = taps.shape[-1] // 2
    n = x.shape[-1]
    xp = _pad(x, half)
    out = np.zeros_like(x)
    for i in idx:
        # lag k = i - half reads x[n - k] = xp[n - k + half]
        s = 2 * half - i
        out += taps[:, i, None] * xp[..., s:s + n]
    return out


def _nl(x: np.ndarray, kappa: float) -> np.ndarray:
    p = np.abs(x[..., 0, :]) ** 2 + np.abs(x[..., 1, :]) ** 2
    return x * np.exp(1j * kappa * p)[..., None, :]


@dataclass
class ForwardCache:
    lin_in: list
    nl_in: list
    taps: list


def ldbp_forward(model: LdbpModel, field: np.ndarray, keep_cache: bool = True):
    """Run the layer stack on ``field`` of shape ``(..., 2, n)``.

    Returns ``(output, cache)``; the cache feeds :func:`ldbp_backward`.
    """
    x = np.asarray(field, dtype=np.complex128)
    if x.shape[-2] != 2:
        raise ValueError("field must have a polarization axis of size 2")
    cache = ForwardCache([], [], []) if keep_cache else None
    n_nl = model.nl_coeffs.size
    for i in range(model.n_layers):
        taps = layer_taps(model, i)
        if keep_cache:
            cache.lin_in.append(x)
            cache.taps.append(taps)
        x = _conv(x, taps, _offsets(model.layers[i][0].mask))
        if i < n_nl:
            if keep_cache:
                cache.nl_in.append(x)
            x = _nl(x, -model.nl_coeffs[i])
    return x, cache


def ldbp_apply(model: LdbpModel, sig: DualPolSignal) -> DualPolSignal:
    if not math.isclose(sig.sample_rate, model.sample_rate, rel_tol=1e-9):
        raise ValueError(f"model expects {model.sample_rate} Hz, signal is {sig.sample_rate} Hz")
    out, _ = ldbp_forward(model, sig.field, keep_cache=False)
    return sig.with_field(out)


def parameter_index(model: LdbpModel) -> list[tuple[int, int, int]]:
    """``(layer, pol, lag)`` of every free complex parameter, in packing order.

    Symmetric filters share one parameter per lag pair ``(+k, -k)``; masked
    lags have no parameter.
    """
    idx = []
    for i, (fx, _) in enumerate(model.layers):
        c = fx.n_taps // 2
        lags = [k for k in range(c + 1) if fx.mask[c + k]]
        for p in range(2):
            idx.extend((i, p, k) for k in lags)
    return idx


def pack_params(model: LdbpModel) -> np.ndarray:
    """Free parameters as a real vector ``[re0, im0, re1, im1, ...]``."""
    vals = [model.layers[i][p].taps[model.layers[i][p].n_taps // 2 + k]
            for i, p, k in parameter_index(model)]
    vals = np.asarray(vals, dtype=np.complex128)
    out = np.empty(2 * vals.size)
    out[0::2] = vals.real
    out[1::2] = vals.imag
    return out


def unpack_params(model: LdbpModel, vec: np.ndarray) -> LdbpModel:
    """Write a packed vector back into (a copy of) ``model``; masks re-applied."""
    out = model.copy()
    vals = np.asarray(vec[0::2]) + 1j * np.asarray(vec[1::2])
    for v, (i, p, k) in zip(vals, parameter_index(model)):
        f = out.layers[i][p]
        c = f.n_taps // 2
        f.taps[c + k] = v
        f.taps[c - k] = v
    for pair in out.layers:
        for f in pair:
            f.taps[~f.mask] = 0
    return out


def ldbp_backward(model: LdbpModel, cache: ForwardCache | None, grad_out: np.ndarray,
                  return_input_grad: bool = False):
    """Reverse-mode pass; returns the packed gradient of the free parameters.

    ``grad_out`` is the loss gradient with respect to the model output in the
    ``dRe + 1j dIm`` convention. Paired symmetric taps sum into their shared
    parameter.
    """
    if cache is None or not cache.lin_in:
        raise ValueError("forward cache is missing; run ldbp_forward with keep_cache=True")
    g = np.asarray(grad_out, dtype=np.complex128)
    n_nl = model.nl_coeffs.size
    tap_grads = [None] * model.n_layers
    for i in range(model.n_layers - 1, -1, -1):
        if i < n_nl:
            x = cache.nl_in[i]
            kappa = -model.nl_coeffs[i]
            p = np.abs(x[..., 0, :]) ** 2 + np.abs(x[..., 1, :]) ** 2
            e = np.exp(1j * kappa * p)[..., None, :]
            y = x * e
            s = -np.sum((np.conj(g) * y).imag, axis=-2, keepdims=True)
            g = np.conj(e) * g + 2 * kappa * s * x
        x = cache.lin_in[i]
        taps = cache.taps[i]
        half = taps.shape[-1] // 2
        idx = _offsets(model.layers[i][0].mask)
        n = x.shape[-1]
        xp = np.conj(_pad(x, half))
        gp = _pad(g, half)
        gt = np.zeros(taps.shape, dtype=np.complex128)
        gx = np.zeros_like(g)
        batch_axes = tuple(range(g.ndim - 2))
        for j in idx:
            s = 2 * half - j
            gt[:, j] = np.sum(g * xp[..., s:s + n], axis=batch_axes + (-1,))
            gx += np.conj(taps[:, j, None]) * gp[..., j:j + n]
        tap_grads[i] = gt
        g = gx
    vals = []
    for i, p, k in parameter_index(model):
        c = model.layers[i][p].n_taps // 2
        v = tap_grads[i][p, c + k]
        if k:
            v = v + tap_grads[i][p, c - k]
        vals.append(v)
    vals = np.asarray(vals, dtype=np.complex128)
    out = np.empty(2 * vals.size)
    out[0::2] = vals.real
    out[1::2] = vals.imag
    if return_input_grad:
        return out, g
    return out


# ---------------------------------------------------------------------------
# Loss

def mse_loss(estimated, reference) -> float:
    """``sum_p ||y_p - yhat_p||^2 / 2`` divided by the symbols per polarization."""
    est = np.asarray(estimated, dtype=np.complex128)
    ref = np.asarray(reference.symbols if isinstance(reference, SymbolFrame) else reference,
                     dtype=np.complex128)
    if est.shape != ref.shape:
        raise ValueError("estimated and reference shapes differ")
    return float(np.sum(np.abs(ref - est) ** 2) / 2 / ref.shape[-1])


@dataclass
class Receiver:
    """Fixed receiver tail after LDBP: matched filter, decimation, scaling."""

    n_samples: int
    sps: int
    rolloff: float
    scale: float
    window: slice = slice(None)

    def __post_init__(self):
        self.h = rrc_spectrum(self.n_samples, self.sps, self.rolloff)

    def symbols(self, out: np.ndarray) -> np.ndarray:
        mf = sp_fft.ifft(sp_fft.fft(out, axis=-1) * self.h, axis=-1)
        return mf[..., ::self.sps][..., self.window] * self.scale

    def adjoint(self, g_sym: np.ndarray) -> np.ndarray:
        n_sym = self.n_samples // self.sps
        full = np.zeros(g_sym.shape[:-1] + (n_sym,), dtype=np.complex128)
        full[..., self.window] = g_sym * self.scale
        up = np.zeros(g_sym.shape[:-1] + (self.n_samples,), dtype=np.complex128)
        up[..., ::self.sps] = full
        return sp_fft.ifft(sp_fft.fft(up, axis=-1) * self.h, axis=-1)


def loss_and_grad(model: LdbpModel, rx: np.ndarray, tx: np.ndarray, receiver: Receiver,
                  need_grad: bool = True):
    """Batch-mean loss and its gradient.

    ``rx`` has shape ``(B, 2, n)`` at launch power; ``tx`` holds the reference
    symbols of the scored window, shape ``(B, 2, m)``. The phase-offset angle
    is treated as a constant, which is exact to first order because it
    minimizes the loss.
    """
    out, cache = ldbp_forward(model, rx, keep_cache=need_grad)
    sym = receiver.symbols(out)
    inner = np.sum(np.conj(sym) * tx, axis=-1, keepdims=True)
    rot = np.exp(1j * np.angle(inner))
    est = sym * rot
    b = rx.shape[0] if rx.ndim == 3 else 1
    m = tx.shape[-1]
    loss = float(np.sum(np.abs(est - tx) ** 2) / (2 * m * b))
    if not need_grad:
        return loss, None
    g_est = (est - tx) / (m * b)
    g_out = receiver.adjoint(np.conj(rot) * g_est)
    return loss, ldbp_backward(model, cache, g_out)


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 7e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)

    def select(self, keep: np.ndarray) -> "AdamState":
        return replace(self, m=self.m[keep], v=self.v[keep])


def adam_step(state: AdamState, grads: np.ndarray, params: np.ndarray):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    grads = np.asarray(grads, dtype=float)
    params = np.asarray(params, dtype=float)
    if not (grads.shape == params.shape == state.m.shape):
        raise ValueError(f"shape mismatch: grads {grads.shape}, params {params.shape}, "
                         f"state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads ** 2
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# Pruning

@dataclass(frozen=True)
class PruneSchedule:
    """Ordered ``(iteration, per-layer target length)`` events.

    With ``taper > 0`` the taps an event will remove are scaled down linearly
    over the ``taper`` iterations before it, reaching zero one iteration
    before the mask is applied, so the remaining taps adapt gradually.
    """

    events: tuple
    taper: int = 0

    def __post_init__(self):
        if self.taper < 0:
            raise ValueError("taper must be >= 0")
        its = [it for it, _ in self.events]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError("prune iterations must be strictly increasing")
        for _, tgt in self.events:
            if any(int(t) % 2 == 0 or int(t) < 1 for t in tgt):
                raise ValueError("target lengths must be odd and positive")
        for (_, a), (_, b) in zip(self.events, self.events[1:]):
            if any(tb > ta for ta, tb in zip(a, b)):
                raise ValueError("target lengths must not grow over time")

    def at(self, iteration: int):
        for it, tgt in self.events:
            if it == iteration:
                return tgt
        return None

    def taper_at(self, iteration: int):
        """``(factor, targets)`` for a tapering iteration, else ``None``.

        Multiplying the doomed taps by ``factor`` at every iteration of the
        window brings them from their current value to zero along a ramp.
        """
        for it, tgt in self.events:
            left = it - iteration
            if 0 < left <= self.taper:
                return (left - 1) / left, tgt
        return None


def assign_target_lengths(layer_distance_km, n_short: int, short: int = 7, long: int = 9) -> list[int]:
    """Give the ``n_short`` layers with the least dispersion the shorter length.

    Ties go to the layers nearest the receiver (lowest layer index).
    """
    d = np.asarray(layer_distance_km, dtype=float)
    order = sorted(range(d.size), key=lambda i: (round(d[i], 9), i))
    out = [long] * d.size
    for i in order[:n_short]:
        out[i] = short
    return out


def scaled_target_lengths(model: LdbpModel, short: int = 7, long: int = 9) -> list[int]:
    """The 22-of-61 short/long split, scaled to the model's layer count."""
    n_short = int(round(SHORT_LAYER_FRACTION * model.n_layers))
    return assign_target_lengths(model.layer_distance_km, n_short, short, long)


def make_prune_schedule(init_lengths, target_lengths, n_iterations: int,
                        fraction: float = 0.6, taper: float = 0.0) -> PruneSchedule:
    """Remove one tap pair per layer per event, events evenly spread over the
    first ``fraction`` of training.

    ``taper`` is the fraction of the event spacing over which the removed
    taps are ramped down before each event (0 removes them abruptly).
    """
    if not 0 <= taper <= 1:
        raise ValueError("taper must lie in [0, 1]")
    init = np.asarray(init_lengths, dtype=int)
    tgt = np.asarray(target_lengths, dtype=int)
    if np.any(tgt > init):
        raise ValueError("targets must not exceed initial lengths")
    n_events = int(np.max((init - tgt) // 2, initial=0))
    events = []
    for e in range(1, n_events + 1):
        it = int(round(e * fraction * n_iterations / n_events))
        events.append((it, tuple(int(v) for v in np.maximum(tgt, init - 2 * e))))
    # collapse duplicate iterations (short trainings) onto the last target
    merged: dict[int, tuple] = {}
    for it, t in events:
        merged[it] = t
    spacing = fraction * n_iterations / n_events if n_events else 0
    return PruneSchedule(tuple(sorted(merged.items())), int(taper * spacing))


def prune_to(model: LdbpModel, targets) -> LdbpModel:
    out = model.copy()
    for pair, L in zip(out.layers, targets):
        L = int(L)
        if L > pair[0].active_length:
            raise ValueError(f"target length {L} exceeds active length {pair[0].active_length}")
        c = pair[0].n_taps // 2
        keep = np.zeros(pair[0].n_taps, dtype=bool)
        keep[c - L // 2: c + L // 2 + 1] = True
        for f in pair:
            f.mask = f.mask & keep
            f.taps[~f.mask] = 0
    return out


def taper_outer(model: LdbpModel, targets, factor: float) -> LdbpModel:
    """Scale the active taps outside each layer's ``targets`` length by ``factor``."""
    out = model.copy()
    for pair, L in zip(out.layers, targets):
        c = pair[0].n_taps // 2
        outer = np.ones(pair[0].n_taps, dtype=bool)
        outer[c - int(L) // 2: c + int(L) // 2 + 1] = False
        for f in pair:
            f.taps[outer & f.mask] *= factor
    return out


def apply_prune(model: LdbpModel, schedule: PruneSchedule | None, iteration: int) -> LdbpModel:
    """Mask outer taps when ``iteration`` is a scheduled event; otherwise no-op."""
    tgt = None if schedule is None else schedule.at(iteration)
    if tgt is None:
        return model
    return prune_to(model, tgt)


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainConfig:
    learning_rate: float = 7e-4
    batch_size: int = 50
    n_iterations: int = 50000
    power_set_dbm: tuple = (1.0, 1.5, 2.0, 2.5, 3.0)
    seed: int = 0
    prune_schedule: PruneSchedule | None = None
    segment_symbols: int | None = 1024
    guard_symbols: int = 256
    quant_bits: int | None = None
    rolloff: float = 0.01
    baud_rate: float = 25e9
    loss: str = "mse"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not len(self.power_set_dbm):
            raise ValueError("power set must not be empty")
        if self.loss != "mse":
            raise ValueError(f"unknown loss {self.loss!r}")


class DataExhaustedError(RuntimeError):
    pass


def _prepare(data, cfg: TrainConfig, sample_rate: float):
    prepared = {}
    for p in cfg.power_set_dbm:
        traces = data.get(p) if hasattr(data, "get") else None
        if not traces:
            raise DataExhaustedError(f"no training traces for launch power {p} dBm")
        items = []
        for sig, frame in traces:
            if not math.isclose(sig.sample_rate, sample_rate, rel_tol=1e-9):
                raise ValueError("training trace sample rate does not match the model")
            sps = int(round(sig.sample_rate / frame.baud_rate))
            f = sig.field * math.sqrt(dbm_to_watt(p) / sig.power())
            items.append((f, frame.symbols, sps))
        prepared[p] = items
    return prepared


def _batch(items, cfg: TrainConfig, rng: np.random.Generator, p_w: float):
    sps = items[0][2]
    n_sym = items[0][1].shape[-1]
    seg = cfg.segment_symbols
    if seg is None or seg + 2 * cfg.guard_symbols >= n_sym:
        picks = rng.integers(len(items), size=cfg.batch_size)
        rx = np.stack([items[k][0] for k in picks])
        tx = np.stack([items[k][1] for k in picks])
        rec = Receiver(rx.shape[-1], sps, cfg.rolloff, 1 / math.sqrt(p_w))
        return rx, tx, rec
    g = cfg.guard_symbols
    tot = seg + 2 * g
    rxs, txs = [], []
    for _ in range(cfg.batch_size):
        k = int(rng.integers(len(items)))
        start = int(rng.integers(n_sym))
        f, s, _ = items[k]
        sym_idx = (start - g + np.arange(tot)) % n_sym
        samp_idx = ((start - g) * sps + np.arange(tot * sps)) % (n_sym * sps)
        rxs.append(f[:, samp_idx])
        txs.append(s[:, sym_idx[g:g + seg]])
    rec = Receiver(tot * sps, sps, cfg.rolloff, 1 / math.sqrt(p_w), slice(g, g + seg))
    return np.stack(rxs), np.stack(txs), rec


def train(model: LdbpModel, config: TrainConfig, data, callback=None):
    """Train the filters of ``model`` with Adam.

    ``data`` maps each launch power (dBm) in ``config.power_set_dbm`` to a
    sequence of ``(received DualPolSignal, SymbolFrame)`` pairs at the model's
    sample rate. Each iteration draws one power uniformly, assembles a batch of
    circular segments (the whole trace when ``segment_symbols`` is ``None``),
    and takes one Adam step. Scheduled pruning happens before the step of the
    matching iteration; tapering, if
    scheduled, scales the doomed taps before each step of its window.

    Returns ``(trained_model, history)`` where history is a list of dicts with
    ``iteration, loss, power_dbm, active_taps``.
    """
    prepared = _prepare(data, config, model.sample_rate)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    if config.quant_bits is not None:
        model = fake_quantize(model, config.quant_bits)
    else:
        model = model.copy()
    params = pack_params(model)
    state = AdamState.zeros(params.size, lr=config.learning_rate)
    history = []
    powers = list(config.power_set_dbm)
    for it in range(config.n_iterations):
        pruned = apply_prune(model, config.prune_schedule, it)
        if pruned is not model:
            old = parameter_index(model)
            new = set(parameter_index(pruned))
            keep = np.repeat([t in new for t in old], 2)
            state = state.select(keep)
            model = pruned
            params = pack_params(model)
        taper = None if config.prune_schedule is None else config.prune_schedule.taper_at(it)
        if taper is not None:
            model = taper_outer(model, taper[1], taper[0])
            params = pack_params(model)
        p = powers[int(rng.integers(len(powers)))]
        rx, tx, rec = _batch(prepared[p], config, rng, dbm_to_watt(p))
        loss, grad = loss_and_grad(model, rx, tx, rec)
        if not np.isfinite(loss) or not np.isfinite(grad).all():
            raise NonFiniteError(f"non-finite loss or gradient at iteration {it}")
        params, state = adam_step(state, grad, params)
        model = unpack_params(model, params)
        rec_ = {"iteration": it, "loss": loss, "power_dbm": p,
                "active_taps": int(sum(model.active_lengths()))}
        history.append(rec_)
        if callback is not None:
            callback(rec_, model)
    return model, history
