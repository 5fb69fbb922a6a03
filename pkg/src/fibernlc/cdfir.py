"""Short symmetric FIR filters approximating (inverse) chromatic dispersion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import PS2


class SingularDesignError(np.linalg.LinAlgError):
    """The weighted least-squares design problem is rank deficient."""


@dataclass(eq=False)
class FirFilter:
    """Complex FIR filter with centered taps and a keep-mask.

    ``taps[len // 2]`` is lag zero. Masked taps are held at exactly zero.
    """

    taps: np.ndarray
    symmetric: bool = True
    mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.array(self.taps, dtype=np.complex128)
        if t.ndim != 1 or t.size % 2 == 0:
            raise ValueError("FIR filters need an odd number of taps")
        m = np.ones(t.size, dtype=bool) if self.mask is None else np.array(self.mask, dtype=bool)
        if m.shape != t.shape:
            raise ValueError("mask shape does not match taps")
        if self.symmetric and not np.array_equal(t, t[::-1]):
            raise ValueError("taps are not symmetric")
        t[~m] = 0
        self.taps = t
        self.mask = m

    @property
    def n_taps(self) -> int:
        return self.taps.size

    @property
    def active_length(self) -> int:
        """Length of the centered window spanned by unmasked taps."""
        idx = np.flatnonzero(self.mask)
        if idx.size == 0:
            return 0
        c = self.n_taps // 2
        return 2 * int(max(c - idx[0], idx[-1] - c)) + 1

    def active_taps(self) -> np.ndarray:
        L = self.active_length
        c = self.n_taps // 2
        return self.taps[c - L // 2: c + L // 2 + 1]

    def copy(self) -> "FirFilter":
        return FirFilter(self.taps.copy(), self.symmetric, self.mask.copy(), dict(self.meta))

    @classmethod
    def delta(cls, n_taps: int = 1) -> "FirFilter":
        t = np.zeros(n_taps, dtype=np.complex128)
        t[n_taps // 2] = 1
        return cls(t)


def design_grid(n_taps: int, sample_rate: float) -> np.ndarray:
    """Dense symmetric frequency grid (Hz) with ``16 * n_taps + 1`` points."""
    return np.linspace(-sample_rate / 2, sample_rate / 2, 16 * n_taps + 1)


def inverse_cd_target(freqs, beta2: float, distance: float) -> np.ndarray:
    """Back-propagation CD response ``exp(-j w^2 beta2 d / 2)``."""
    w = 2 * np.pi * np.asarray(freqs)
    return np.exp(-0.5j * beta2 * PS2 * distance * w ** 2)


def _cos_basis(freqs, n_taps, sample_rate):
    half = n_taps // 2
    k = np.arange(half + 1)
    basis = np.cos(2 * np.pi * np.outer(freqs, k) / sample_rate)
    basis[:, 1:] *= 2.0
    return basis


def _expand_symmetric(c: np.ndarray) -> np.ndarray:
    return np.concatenate([c[:0:-1], c])


def ls_objective(taps, beta2, distance, sample_rate, passband_fraction=0.8, oob_weight=1.0):
    """Weighted LS cost minimized by :func:`ls_cd_filter`."""
    taps = np.asarray(taps)
    f = design_grid(taps.size, sample_rate)
    inband = np.abs(f) <= passband_fraction * sample_rate / 2
    H = frequency_response(taps, f, sample_rate)
    T = inverse_cd_target(f, beta2, distance)
    return float(np.sum(np.abs(H[inband] - T[inband]) ** 2) + oob_weight * np.sum(np.abs(H[~inband]) ** 2))


def ls_cd_filter(beta2: float, distance: float, sample_rate: float, n_taps: int,
                 passband_fraction: float = 0.8, oob_weight: float = 1.0) -> FirFilter:
    """Least-squares inverse-CD filter with an out-of-band gain penalty.

    Minimizes ``sum_in |H - T|^2 + oob_weight * sum_out |H|^2`` over the dense
    grid, where ``T`` is the back-propagation response for ``distance`` km and
    in-band means ``|f| <= passband_fraction * fs / 2``. The symmetric taps are
    the unknowns, so ``H`` is a cosine series with complex coefficients.
    """
    if n_taps < 1 or n_taps % 2 == 0:
        raise ValueError("n_taps must be odd and >= 1")
    if not 0 < passband_fraction <= 1:
        raise ValueError("passband_fraction must lie in (0, 1]")
    if oob_weight < 0:
        raise ValueError("oob_weight must be >= 0")
    f = design_grid(n_taps, sample_rate)
    inband = np.abs(f) <= passband_fraction * sample_rate / 2
    w = np.where(inband, 1.0, np.sqrt(oob_weight))
    A = _cos_basis(f, n_taps, sample_rate) * w[:, None]
    T = np.where(inband, inverse_cd_target(f, beta2, distance), 0.0) * w
    rhs = np.stack([T.real, T.imag], axis=1)
    sol, _, rank, _ = np.linalg.lstsq(A, rhs, rcond=None)
    if rank < A.shape[1]:
        raise SingularDesignError(
            f"design matrix has rank {rank} < {A.shape[1]}; increase oob_weight or passband")
    c = sol[:, 0] + 1j * sol[:, 1]
    return FirFilter(_expand_symmetric(c), symmetric=True,
                     meta={"beta2": beta2, "distance_km": distance, "sample_rate": sample_rate,
                           "passband_fraction": passband_fraction, "oob_weight": oob_weight})


def frequency_response(filt, freqs, sample_rate: float) -> np.ndarray:
    """``H(f) = sum_k taps[k] exp(-j 2 pi f k / fs)`` with ``k`` centered on zero."""
    taps = filt.taps if isinstance(filt, FirFilter) else np.asarray(filt)
    k = np.arange(taps.size) - taps.size // 2
    return np.exp(-2j * np.pi * np.outer(np.asarray(freqs, dtype=float), k) / sample_rate) @ taps


def passband_error(filt, beta2, distance, sample_rate, passband_fraction=0.8,
                   n_grid: int = 4097) -> float:
    """RMS deviation from the inverse-CD target over the passband.

    Uses a fixed ``n_grid``-point grid so filters of different lengths are
    compared on the same frequencies.
    """
    taps = filt.taps if isinstance(filt, FirFilter) else np.asarray(filt)
    f = np.linspace(-sample_rate / 2, sample_rate / 2, n_grid)
    f = f[np.abs(f) <= passband_fraction * sample_rate / 2]
    err = frequency_response(taps, f, sample_rate) - inverse_cd_target(f, beta2, distance)
    return float(np.sqrt(np.mean(np.abs(err) ** 2)))
