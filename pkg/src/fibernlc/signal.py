"""Sampled dual-polarization signals and the DSP primitives shared by all stages.

Fourier convention
------------------
Every frequency-domain operation in the package uses ``numpy``/``scipy`` FFT
ordering. Fields are treated as analytic signals expanding as
``E(t) = sum_k E_k exp(-j w_k t)``, so the angular frequency attached to FFT bin
``k`` is ``w_k = -2*pi*fftfreq(n, 1/fs)[k]`` (see :func:`angular_frequency`).
With this choice the chromatic-dispersion multiplier is ``exp(j w^2 beta2 h / 2)``
and a positive group delay ``beta2 * w0 * h`` delays the pulse.

All block processing is circular: a signal is one period of a periodic
waveform.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft as sp_fft

logger = logging.getLogger(__name__)

GENERATOR_NAME = "PCG64 (PCG XSL RR 128/64)"
SNR_CAP_DB = 100.0


def angular_frequency(n: int, sample_rate: float) -> np.ndarray:
    """Angular frequency (rad/s) of each FFT bin under the e^{-jwt} convention."""
    return -2.0 * np.pi * sp_fft.fftfreq(n, d=1.0 / sample_rate)


def dbm_to_watt(p_dbm):
    return 1e-3 * 10.0 ** (np.asarray(p_dbm, dtype=float) / 10.0)


def watt_to_dbm(p_w):
    return 10.0 * np.log10(np.asarray(p_w, dtype=float) / 1e-3)


class NonFiniteError(ValueError, FloatingPointError):
    """A signal or intermediate result contains NaN or infinity."""


@dataclass(frozen=True, eq=False)
class DualPolSignal:
    """Uniformly sampled complex baseband field in two polarizations.

    ``field`` has shape ``(2, n)``; row 0 is x, row 1 is y, in sqrt(W).
    ``launch_power_dbm`` is optional metadata carried from the transmitter so
    receivers can restore absolute power.
    """

    field: np.ndarray
    sample_rate: float
    launch_power_dbm: float | None = None

    def __post_init__(self):
        f = np.asarray(self.field, dtype=np.complex128)
        if f.ndim != 2 or f.shape[0] != 2:
            raise ValueError(f"field must have shape (2, n), got {f.shape}")
        if f.shape[1] < 1:
            raise ValueError("signal must contain at least one sample")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if not np.isfinite(f).all():
            raise NonFiniteError("signal contains non-finite samples")
        object.__setattr__(self, "field", f)

    @classmethod
    def from_xy(cls, x, y, sample_rate, launch_power_dbm=None):
        x = np.asarray(x, dtype=np.complex128)
        y = np.asarray(y, dtype=np.complex128)
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError("x and y must be 1-D and of equal length")
        return cls(np.stack([x, y]), sample_rate, launch_power_dbm)

    @property
    def x(self) -> np.ndarray:
        return self.field[0]

    @property
    def y(self) -> np.ndarray:
        return self.field[1]

    @property
    def n_samples(self) -> int:
        return self.field.shape[1]

    @property
    def omega(self) -> np.ndarray:
        return angular_frequency(self.n_samples, self.sample_rate)

    def power(self) -> float:
        """Total mean power ``mean(|x|^2 + |y|^2)`` in W."""
        return float(np.sum(np.abs(self.field) ** 2) / self.n_samples)

    def with_field(self, new_field, sample_rate=None) -> "DualPolSignal":
        return replace(
            self,
            field=new_field,
            sample_rate=self.sample_rate if sample_rate is None else sample_rate,
        )


@dataclass(frozen=True, eq=False)
class SymbolFrame:
    """Transmitted constellation symbols, shape ``(2, n_symbols)``."""

    symbols: np.ndarray
    baud_rate: float
    constellation: str
    seed: int | None = None
    generator: str = GENERATOR_NAME

    def __post_init__(self):
        s = np.asarray(self.symbols, dtype=np.complex128)
        if s.ndim != 2 or s.shape[0] != 2:
            raise ValueError(f"symbols must have shape (2, n), got {s.shape}")
        object.__setattr__(self, "symbols", s)

    @property
    def n_symbols(self) -> int:
        return self.symbols.shape[1]


@dataclass(frozen=True, eq=False)
class RealFirTaps:
    taps: np.ndarray
    normalization: str = "unit-energy"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.taps, dtype=float)
        if t.ndim != 1 or t.size % 2 == 0:
            raise ValueError("real FIR taps must be a 1-D odd-length sequence")
        if self.normalization not in ("unit-energy", "unit-gain"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        object.__setattr__(self, "taps", t)


# ---------------------------------------------------------------------------
# Symbols

def _gray_pam4():
    # bits (b0 b1) -> level, adjacent levels differ in one bit
    return {0b00: -3.0, 0b01: -1.0, 0b11: 1.0, 0b10: 3.0}


def constellation_points(name: str) -> np.ndarray:
    """Unit-average-energy constellation, indexed by Gray label."""
    key = name.upper().replace("-", "")
    if key == "QPSK":
        # bit 0 flips the in-phase sign, bit 1 the quadrature sign
        return np.array([1 + 1j, -1 + 1j, 1 - 1j, -1 - 1j]) / np.sqrt(2.0)
    if key == "16QAM":
        pam = _gray_pam4()
        pts = np.empty(16, dtype=np.complex128)
        for label in range(16):
            pts[label] = pam[label >> 2] + 1j * pam[label & 0b11]
        return pts / np.sqrt(10.0)
    raise ValueError(f"unknown constellation {name!r}; expected 'QPSK' or '16QAM'")


def gen_symbol_frame(seed: int, n_symbols: int, constellation: str = "16QAM",
                     baud_rate: float = 25e9) -> SymbolFrame:
    """Draw an equiprobable symbol frame for both polarizations.

    Each polarization uses its own PCG64 stream spawned from ``seed``. Labels
    are balanced: every constellation point appears ``n // M`` times (the
    remaining ``n % M`` labels are drawn without replacement), then shuffled.
    This keeps every symbol on the constellation while making the empirical
    mean energy equal to the constellation energy whenever ``M`` divides ``n``.
    """
    if n_symbols < 1:
        raise ValueError("n_symbols must be >= 1")
    pts = constellation_points(constellation)
    m = pts.size
    streams = np.random.SeedSequence(seed).spawn(2)
    rows = []
    for ss in streams:
        rng = np.random.Generator(np.random.PCG64(ss))
        reps, rem = divmod(n_symbols, m)
        labels = np.concatenate([np.tile(np.arange(m), reps),
                                 rng.choice(m, size=rem, replace=False)])
        rng.shuffle(labels)
        rows.append(pts[labels])
    name = "QPSK" if pts.size == 4 else "16QAM"
    return SymbolFrame(np.stack(rows), baud_rate, name, seed)


# ---------------------------------------------------------------------------
# Pulse shaping

def rrc_taps(rolloff: float, span: int, sps: int) -> RealFirTaps:
    """Unit-energy root-raised-cosine taps covering ``span`` symbols.

    The number of taps is ``span * sps + 1``. The singular points ``t = 0`` and
    ``|t| = T / (4 * rolloff)`` use their analytic limits.
    """
    if not 0 < rolloff <= 1:
        raise ValueError("rolloff must lie in (0, 1]")
    n = span * sps + 1
    if n % 2 == 0:
        raise ValueError("span * sps must be even so that a center tap exists")
    b = rolloff
    t = (np.arange(n) - n // 2) / sps  # in symbol periods
    h = np.empty(n)
    for i, ti in enumerate(t):
        if ti == 0.0:
            h[i] = 1.0 - b + 4.0 * b / np.pi
        elif math.isclose(abs(ti), 1.0 / (4.0 * b), rel_tol=0, abs_tol=1e-12):
            h[i] = (b / np.sqrt(2.0)) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                                         + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
        else:
            num = np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))
            den = np.pi * ti * (1 - (4 * b * ti) ** 2)
            h[i] = num / den
    h = 0.5 * (h + h[::-1])
    h /= np.sqrt(np.sum(h * h))
    return RealFirTaps(h, "unit-energy", {"rolloff": rolloff, "span": span, "sps": sps})


def rrc_spectrum(n: int, sps: int, rolloff: float) -> np.ndarray:
    """Root-raised-cosine response on the ``n``-bin FFT grid at ``sps`` samples/symbol.

    Scaled so that shaping followed by matched filtering and decimation returns
    the original symbols exactly (the aliased raised-cosine sum equals ``sps``).
    """
    f = np.abs(sp_fft.fftfreq(n, d=1.0 / sps))  # in units of the baud rate
    lo, hi = (1 - rolloff) / 2, (1 + rolloff) / 2
    rc = np.zeros(n)
    rc[f <= lo] = 1.0
    band = (f > lo) & (f <= hi)
    if rolloff > 0:
        rc[band] = 0.5 * (1 + np.cos(np.pi / rolloff * (f[band] - lo)))
    return np.sqrt(sps * rc)


def upsample(symbols: np.ndarray, sps: int) -> np.ndarray:
    out = np.zeros(symbols.shape[:-1] + (symbols.shape[-1] * sps,), dtype=np.complex128)
    out[..., ::sps] = symbols
    return out


def shape_pulses(frame: SymbolFrame, taps: RealFirTaps, sps: int) -> DualPolSignal:
    """Upsample by ``sps`` and circularly convolve with ``taps``."""
    if sps < 2:
        raise ValueError("sps must be >= 2")
    up = upsample(frame.symbols, sps)
    sig = DualPolSignal(up, frame.baud_rate * sps)
    return fir_convolve_circular(sig, taps.taps, taps.taps)


def shape_pulses_periodic(frame: SymbolFrame, rolloff: float, sps: int) -> DualPolSignal:
    """Exact periodic RRC shaping (frequency-domain), zero inter-symbol interference."""
    if sps < 2:
        raise ValueError("sps must be >= 2")
    up = upsample(frame.symbols, sps)
    h = rrc_spectrum(up.shape[-1], sps, rolloff)
    out = sp_fft.ifft(sp_fft.fft(up, axis=-1) * h, axis=-1)
    return DualPolSignal(out, frame.baud_rate * sps)


def matched_filter(sig: DualPolSignal, rolloff: float, baud_rate: float) -> DualPolSignal:
    """Periodic RRC matched filter; the adjoint of :func:`shape_pulses_periodic`."""
    sps = sig.sample_rate / baud_rate
    if abs(sps - round(sps)) > 1e-9:
        raise ValueError("matched filter needs an integer number of samples per symbol")
    h = rrc_spectrum(sig.n_samples, int(round(sps)), rolloff)
    return sig.with_field(sp_fft.ifft(sp_fft.fft(sig.field, axis=-1) * h, axis=-1))


def downsample(sig: DualPolSignal, factor: int, offset: int = 0) -> np.ndarray:
    return sig.field[:, offset::factor]


# ---------------------------------------------------------------------------
# Filtering

def circular_convolve(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Zero-delay circular convolution along the last axis.

    ``y[n] = sum_k taps[k] x[n - k]`` for ``k`` in ``-(L//2) .. L//2``. Direct
    summation in tap order, so results are bit-reproducible.
    """
    taps = np.asarray(taps)
    L = taps.shape[-1]
    if L % 2 == 0:
        raise ValueError("tap count must be odd")
    if L > x.shape[-1]:
        raise ValueError("more taps than signal samples")
    half = L // 2
    out = np.zeros(np.broadcast_shapes(x.shape), dtype=np.result_type(x, taps, np.complex128))
    for i in range(L):
        t = taps[..., i]
        if np.all(t == 0):
            continue
        k = i - half
        out += (t[..., None] if np.ndim(t) else t) * np.roll(x, k, axis=-1)
    return out


def fir_convolve_circular(sig: DualPolSignal, filt_x, filt_y) -> DualPolSignal:
    fx = np.asarray(filt_x)
    fy = np.asarray(filt_y)
    for f in (fx, fy):
        if f.ndim != 1 or f.size % 2 == 0:
            raise ValueError("filters must be 1-D with an odd number of taps")
        if f.size > sig.n_samples:
            raise ValueError("filter longer than signal")
    out = np.stack([circular_convolve(sig.x, fx), circular_convolve(sig.y, fy)])
    return sig.with_field(out)


def resample_rational(sig: DualPolSignal, up: int, down: int) -> DualPolSignal:
    """Resample one period by ``up/down`` through spectral zero-padding/truncation.

    Bins are kept at their signed frequencies; when the output is shorter only
    the bins inside the new Nyquist band survive (ideal anti-aliasing). The
    most negative bin of an even-length input is carried as a negative
    frequency. Sample values of band-limited signals are preserved.
    """
    if up < 1 or down < 1:
        raise ValueError("up and down must be >= 1")
    if math.gcd(up, down) != 1:
        raise ValueError("up and down must be coprime")
    n = sig.n_samples
    if (n * up) % down:
        raise ValueError(f"{n} samples cannot be resampled by {up}/{down} to an integer length")
    m = n * up // down
    if m == n:
        return sig
    spec = sp_fft.fft(sig.field, axis=-1)
    out = np.zeros((2, m), dtype=np.complex128)
    k = min(n, m)
    pos = (k + 1) // 2  # bins 0 .. pos-1
    neg = k // 2        # bins -neg .. -1
    out[:, :pos] = spec[:, :pos]
    if neg:
        out[:, m - neg:] = spec[:, n - neg:]
    res = sp_fft.ifft(out, axis=-1) * (m / n)
    return sig.with_field(res, sample_rate=sig.sample_rate * up / down)


def lowpass(sig: DualPolSignal, cutoff: float) -> DualPolSignal:
    """Ideal brick-wall low-pass: zero every bin with ``|f| > cutoff``."""
    if not 0 < cutoff <= sig.sample_rate / 2:
        raise ValueError("cutoff must lie in (0, sample_rate/2]")
    f = np.abs(sp_fft.fftfreq(sig.n_samples, d=1.0 / sig.sample_rate))
    keep = f <= cutoff
    if keep.all():
        return sig
    spec = sp_fft.fft(sig.field, axis=-1)
    spec[:, ~keep] = 0
    return sig.with_field(sp_fft.ifft(spec, axis=-1))


def normalize_to_power(sig: DualPolSignal, power: float) -> DualPolSignal:
    """Scale so that ``mean(|x|^2 + |y|^2) == power`` (W)."""
    if not power > 0:
        raise ValueError("power must be positive")
    p = sig.power()
    if p == 0:
        raise ValueError("cannot normalize an all-zero signal")
    return sig.with_field(sig.field * np.sqrt(power / p))


# ---------------------------------------------------------------------------
# Synchronization and figures of merit

def phase_offset_correct(rx, ref):
    """Rotate ``rx`` by the angle that best aligns it with ``ref``.

    Returns ``(corrected, theta)`` with ``theta = arg(sum(conj(rx) * ref))``.
    Works on 1-D sequences or row-wise on ``(2, n)`` arrays (one angle per row).
    """
    rx = np.asarray(rx, dtype=np.complex128)
    ref = np.asarray(ref, dtype=np.complex128)
    if rx.shape != ref.shape or rx.shape[-1] < 1:
        raise ValueError("rx and ref must have equal non-empty shapes")
    inner = np.sum(np.conj(rx) * ref, axis=-1)
    if np.any(inner == 0):
        logger.warning("zero inner product in phase-offset correction; using theta=0")
    theta = np.angle(inner)
    theta = np.where(inner == 0, 0.0, theta)
    corrected = rx * np.exp(1j * np.asarray(theta))[..., None] if rx.ndim > 1 \
        else rx * np.exp(1j * float(theta))
    return corrected, (theta if rx.ndim > 1 else float(theta))


def effective_snr(rx, tx) -> float:
    """Data-aided effective SNR in dB, capped at :data:`SNR_CAP_DB`.

    Each polarization is first scaled by its least-squares complex gain
    ``c_p = sum(conj(rx) tx) / sum(|rx|^2)``.
    """
    rx = np.atleast_2d(np.asarray(rx, dtype=np.complex128))
    tx = np.atleast_2d(np.asarray(tx.symbols if isinstance(tx, SymbolFrame) else tx,
                                  dtype=np.complex128))
    if rx.shape != tx.shape:
        raise ValueError(f"rx shape {rx.shape} does not match tx shape {tx.shape}")
    sig_pow = 0.0
    err_pow = 0.0
    for r, t in zip(rx, tx):
        rr = np.sum(np.abs(r) ** 2)
        c = np.sum(np.conj(r) * t) / rr if rr > 0 else 0.0
        sig_pow += np.sum(np.abs(t) ** 2)
        err_pow += np.sum(np.abs(t - c * r) ** 2)
    if err_pow <= 0 or 10 * np.log10(sig_pow / err_pow) > SNR_CAP_DB:
        return SNR_CAP_DB
    return float(10 * np.log10(sig_pow / err_pow))


def align_circular(rx, tx) -> int:
    """Circular shift ``s`` maximizing ``|sum_n rx[n] conj(tx[n - s])|``.

    Ties resolve to the smallest non-negative shift.
    """
    rx = np.asarray(rx, dtype=np.complex128)
    tx = np.asarray(tx, dtype=np.complex128)
    if rx.shape != tx.shape:
        raise ValueError("rx and tx must have equal length")
    corr = np.abs(sp_fft.ifft(sp_fft.fft(rx) * np.conj(sp_fft.fft(tx))))
    peak = corr.max()
    # FFT roundoff can split exact ties; treat near-equal peaks as tied
    return int(np.flatnonzero(corr >= peak * (1 - 1e-12))[0])


def nmse_db(estimate, reference) -> float:
    """Normalized mean-square error ``10 log10(||e - r||^2 / ||r||^2)``."""
    e = np.asarray(estimate)
    r = np.asarray(reference)
    num = np.sum(np.abs(e - r) ** 2)
    den = np.sum(np.abs(r) ** 2)
    if num == 0:
        return -np.inf
    return float(10 * np.log10(num / den))
