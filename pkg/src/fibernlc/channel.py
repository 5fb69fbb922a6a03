"""Multi-span fiber channel: symmetric split-step propagation, EDFA noise, PMD.

Units follow the usual fiber-optics conventions: lengths in km, ``beta2`` in
ps^2/km, ``gamma`` in 1/(W km), attenuation in dB/km, time in s.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import fft as sp_fft

from .signal import DualPolSignal, angular_frequency

PLANCK = 6.62607015e-34
CARRIER_HZ = 193.4e12
PS2 = 1e-24  # ps^2 -> s^2
MANAKOV = 8.0 / 9.0


def alpha_linear(alpha_db_per_km: float) -> float:
    """Power attenuation coefficient in 1/km."""
    return alpha_db_per_km * math.log(10.0) / 10.0


@dataclass(frozen=True)
class FiberParams:
    alpha_db_per_km: float = 0.2
    beta2_ps2_per_km: float = -20.87
    gamma_per_w_km: float = 1.3
    span_length_km: float = 75.484
    manakov_factor: float = MANAKOV

    def __post_init__(self):
        if self.alpha_db_per_km < 0:
            raise ValueError("alpha must be >= 0")
        if not self.span_length_km > 0:
            raise ValueError("span length must be > 0")
        if self.gamma_per_w_km < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.manakov_factor <= 1:
            raise ValueError("manakov_factor must lie in (0, 1]")

    @property
    def span_loss_db(self) -> float:
        return self.alpha_db_per_km * self.span_length_km


@dataclass(frozen=True)
class StepPlan:
    step_sizes: np.ndarray
    mode: str = "uniform"

    def __post_init__(self):
        s = np.asarray(self.step_sizes, dtype=float)
        if s.ndim != 1 or s.size == 0 or np.any(s <= 0):
            raise ValueError("step sizes must be a non-empty list of positive values")
        object.__setattr__(self, "step_sizes", s)

    @property
    def boundaries(self) -> np.ndarray:
        """Step start positions (km) followed by the span end."""
        return np.concatenate([[0.0], np.cumsum(self.step_sizes)])

    def __len__(self):
        return self.step_sizes.size


@dataclass(frozen=True)
class EdfaConfig:
    """Lumped amplifier. ``gain_db=None`` compensates the span loss exactly."""

    gain_db: float | None = None
    noise_figure_db: float = 5.0
    photon_energy: float = PLANCK * CARRIER_HZ
    enabled: bool = True

    def __post_init__(self):
        if self.gain_db is not None and self.gain_db < 0:
            raise ValueError("gain_db must be >= 0")
        if self.enabled and self.noise_figure_db < 3.0:
            raise ValueError("a physical amplifier has noise figure >= 3 dB")


@dataclass(frozen=True)
class PmdSection:
    rotation: np.ndarray
    dgd_s: float

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.complex128)
        if r.shape != (2, 2):
            raise ValueError("rotation must be 2x2")
        if np.linalg.norm(r.conj().T @ r - np.eye(2)) > 1e-12:
            raise ValueError("rotation must be unitary")
        if self.dgd_s < 0:
            raise ValueError("dgd must be >= 0")
        object.__setattr__(self, "rotation", r)


@dataclass(frozen=True)
class PmdConfig:
    sections_per_span: int = 10
    pmd_coeff_ps_per_sqrt_km: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class LinkConfig:
    fiber: FiberParams = field(default_factory=FiberParams)
    n_spans: int = 20
    forward_stps: int = 300
    step_mode: str = "logarithmic"
    edfa: EdfaConfig = field(default_factory=EdfaConfig)
    pmd: PmdConfig | None = None
    sample_rate_hz: float | None = None

    def __post_init__(self):
        if self.n_spans < 1:
            raise ValueError("n_spans must be >= 1")
        if self.forward_stps < 1:
            raise ValueError("forward_stps must be >= 1")
        if self.step_mode not in ("uniform", "logarithmic"):
            raise ValueError(f"unknown step mode {self.step_mode!r}")

    @property
    def total_length_km(self) -> float:
        return self.n_spans * self.fiber.span_length_km

    @property
    def edfa_gain_db(self) -> float:
        return self.fiber.span_loss_db if self.edfa.gain_db is None else self.edfa.gain_db

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Step plans and operator pieces

def step_plan(span_length: float, alpha: float, K: int, mode: str = "logarithmic") -> StepPlan:
    """Partition a span into ``K`` steps.

    In logarithmic mode the boundaries are
    ``z_k = -ln(1 - (k/K)(1 - exp(-a L))) / a`` so every step accumulates the
    same effective length. With zero loss this degenerates to uniform steps.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if mode not in ("uniform", "logarithmic"):
        raise ValueError(f"unknown step mode {mode!r}")
    a = alpha_linear(alpha)
    if mode == "uniform" or a == 0:
        return StepPlan(np.full(K, span_length / K), mode)
    k = np.arange(K + 1) / K
    z = -np.log1p(-k * (-np.expm1(-a * span_length))) / a
    z[-1] = span_length
    return StepPlan(np.diff(z), mode)


def effective_length(h, alpha: float):
    """Effective length ``(1 - exp(-a h)) / a`` in km; ``h`` when lossless."""
    a = alpha_linear(alpha)
    h = np.asarray(h, dtype=float)
    if a == 0:
        return h if h.ndim else float(h)
    out = -np.expm1(-a * h) / a
    return out if out.ndim else float(out)


def cd_response(beta2: float, h: float, alpha: float, omega: np.ndarray) -> np.ndarray:
    """Linear-step multiplier ``exp(-a h / 2) exp(j w^2 beta2 h / 2)`` per FFT bin."""
    a = alpha_linear(alpha)
    return np.exp(-0.5 * a * h + 0.5j * beta2 * PS2 * h * np.asarray(omega) ** 2)


def _rotate(field: np.ndarray, coeff: float) -> np.ndarray:
    """Multiply both polarizations by ``exp(j coeff (|x|^2 + |y|^2))``."""
    power = np.abs(field[..., 0, :]) ** 2 + np.abs(field[..., 1, :]) ** 2
    return field * np.exp(1j * coeff * power)[..., None, :]


def nonlinear_rotation(sig: DualPolSignal, gamma: float, l_eff: float, sign: int = 1,
                       manakov_factor: float = MANAKOV) -> DualPolSignal:
    if l_eff < 0:
        raise ValueError("l_eff must be >= 0")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    return sig.with_field(_rotate(sig.field, sign * gamma * manakov_factor * l_eff))


def edfa_noise_variance(gain_db: float, cfg: EdfaConfig, bandwidth: float) -> float:
    """ASE variance per polarization over ``bandwidth`` Hz."""
    if not cfg.enabled:
        return 0.0
    g = 10.0 ** (gain_db / 10.0)
    n_sp = 10.0 ** (cfg.noise_figure_db / 10.0) / 2.0
    return n_sp * cfg.photon_energy * (g - 1.0) * bandwidth


def _edfa_field(field, gain_db, cfg, rng, bandwidth):
    out = field * 10.0 ** (gain_db / 20.0)
    var = edfa_noise_variance(gain_db, cfg, bandwidth)
    if var > 0:
        noise = rng.standard_normal((2,) + out.shape) * math.sqrt(var / 2.0)
        out = out + noise[0] + 1j * noise[1]
    return out


def edfa_amplify(sig: DualPolSignal, cfg: EdfaConfig, seed=None) -> DualPolSignal:
    """Amplify by ``cfg.gain_db`` and add circular Gaussian ASE noise.

    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    gain_db = 0.0 if cfg.gain_db is None else cfg.gain_db
    rng = np.random.default_rng(seed)
    return sig.with_field(_edfa_field(sig.field, gain_db, cfg, rng, sig.sample_rate))


# ---------------------------------------------------------------------------
# PMD

def haar_su2(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    a, b, c, d = q / np.linalg.norm(q)
    r = np.array([[a + 1j * b, c + 1j * d], [-c + 1j * d, a - 1j * b]])
    # re-orthonormalize so the unitarity bound holds to machine precision
    u, _, vh = np.linalg.svd(r)
    return u @ vh


def draw_pmd_sections(n_sections: int, pmd_coeff: float, section_length: float,
                      seed=None) -> list[PmdSection]:
    """Haar-random rotations with equal per-section DGD.

    ``tau = pmd_coeff * sqrt(section_length) * sqrt(3 pi / 8)`` so that, for
    many sections, the Maxwellian mean link DGD is ``pmd_coeff * sqrt(L)``.
    """
    if n_sections < 1:
        raise ValueError("n_sections must be >= 1")
    rng = np.random.default_rng(seed)
    tau = pmd_coeff * 1e-12 * math.sqrt(section_length) * math.sqrt(3 * math.pi / 8)
    return [PmdSection(haar_su2(rng), tau) for _ in range(n_sections)]


def dgd_matrix(section: PmdSection, omega: np.ndarray) -> np.ndarray:
    """Diagonal of ``T(w)``: shape ``(2, n)``."""
    half = 0.5 * section.dgd_s * np.asarray(omega)
    return np.stack([np.exp(-1j * half), np.exp(1j * half)])


def section_jones(section: PmdSection, omega: float) -> np.ndarray:
    """``J = R T(w)`` for one section at a single frequency."""
    t = dgd_matrix(section, np.atleast_1d(omega))[:, 0]
    return section.rotation @ np.diag(t)


def _pmd_spectrum(spec: np.ndarray, section: PmdSection, omega: np.ndarray) -> np.ndarray:
    # the rotation is frequency independent, so both factors act on the spectrum
    spec = spec * dgd_matrix(section, omega)
    return section.rotation @ spec


def pmd_section_apply(sig: DualPolSignal, section: PmdSection) -> DualPolSignal:
    """Apply ``J(w) = R T(w)``: differential delay first, then the rotation."""
    spec = sp_fft.fft(sig.field, axis=-1)
    spec = _pmd_spectrum(spec, section, sig.omega)
    return sig.with_field(sp_fft.ifft(spec, axis=-1))


# ---------------------------------------------------------------------------
# Propagation

def nonlinear_step_coeff(fiber: FiberParams, h: float, gamma: float | None = None) -> float:
    """Coefficient applied to the mid-step field of a symmetric step of size ``h``.

    The field is referenced to the step entry: the mid-step power is
    ``exp(-a h / 2)`` times the entry power, which the factor ``exp(a h / 2)``
    undoes, so the accumulated phase is ``gamma * f * P_entry * L_eff(h)``.
    """
    g = fiber.gamma_per_w_km if gamma is None else gamma
    a = alpha_linear(fiber.alpha_db_per_km)
    return g * fiber.manakov_factor * effective_length(h, fiber.alpha_db_per_km) * math.exp(0.5 * a * h)


def _pmd_plan(link: LinkConfig, plan: StepPlan):
    """Sections per span, keyed by the step after whose first half they act."""
    if link.pmd is None:
        return None
    cfg = link.pmd
    K = len(plan)
    rng = np.random.default_rng(cfg.seed)
    per_span = []
    for _ in range(link.n_spans):
        secs = draw_pmd_sections(cfg.sections_per_span, cfg.pmd_coeff_ps_per_sqrt_km,
                                 link.fiber.span_length_km / cfg.sections_per_span, rng)
        by_step: dict[int, list[PmdSection]] = {}
        for i, s in enumerate(secs):
            by_step.setdefault(i * K // cfg.sections_per_span, []).append(s)
        per_span.append(by_step)
    return per_span


def propagate(sig: DualPolSignal, link: LinkConfig, seed=None,
              record: list | None = None) -> DualPolSignal:
    """Propagate through ``link.n_spans`` amplified spans.

    Each step is symmetric: half linear (CD and loss), PMD sections assigned to
    the step, nonlinear rotation, half linear. An EDFA closes every span. When
    ``record`` is a list, the operator sequence is appended to it as
    JSON-friendly dicts (see :func:`invert_operators`).
    """
    if link.sample_rate_hz is not None and not math.isclose(sig.sample_rate, link.sample_rate_hz, rel_tol=1e-12):
        raise ValueError(f"signal sample rate {sig.sample_rate} does not match link "
                         f"simulation bandwidth {link.sample_rate_hz}")
    fiber = link.fiber
    plan = step_plan(fiber.span_length_km, fiber.alpha_db_per_km, link.forward_stps, link.step_mode)
    omega = sig.omega
    a = alpha_linear(fiber.alpha_db_per_km)
    b2 = fiber.beta2_ps2_per_km * PS2
    w2 = omega ** 2
    gain_db = link.edfa_gain_db
    rng = np.random.default_rng(seed)
    pmd = _pmd_plan(link, plan)
    coeffs = [nonlinear_step_coeff(fiber, h) for h in plan.step_sizes]

    spec = sp_fft.fft(sig.field, axis=-1)
    for span in range(link.n_spans):
        pending = 0.0  # linear length not yet applied to spec
        for k, h in enumerate(plan.step_sizes):
            pending += h / 2
            if record is not None:
                record.append({"op": "linear", "h_km": h / 2, "span": span, "step": k})
            if pmd is not None and k in pmd[span]:
                spec = spec * np.exp(-0.5 * a * pending + 0.5j * b2 * pending * w2)
                pending = 0.0
                for sec in pmd[span][k]:
                    spec = _pmd_spectrum(spec, sec, omega)
                    if record is not None:
                        record.append({"op": "pmd", "dgd_s": sec.dgd_s,
                                       "rotation": [[[z.real, z.imag] for z in row] for row in sec.rotation]})
            if coeffs[k] != 0:
                spec = spec * np.exp(-0.5 * a * pending + 0.5j * b2 * pending * w2)
                pending = 0.0
                field_t = _rotate(sp_fft.ifft(spec, axis=-1), coeffs[k])
                spec = sp_fft.fft(field_t, axis=-1)
            if record is not None:
                record.append({"op": "nonlinear", "coeff": coeffs[k], "span": span, "step": k})
            pending += h / 2
            if record is not None:
                record.append({"op": "linear", "h_km": h / 2, "span": span, "step": k})
        spec = spec * np.exp(-0.5 * a * pending + 0.5j * b2 * pending * w2)
        field_t = sp_fft.ifft(spec, axis=-1)
        field_t = _edfa_field(field_t, gain_db, link.edfa, rng, sig.sample_rate)
        if record is not None:
            record.append({"op": "gain", "gain_db": gain_db, "noise": link.edfa.enabled, "span": span})
        spec = sp_fft.fft(field_t, axis=-1)
    return sig.with_field(sp_fft.ifft(spec, axis=-1))


def invert_operators(sig: DualPolSignal, ops: list[dict], fiber: FiberParams) -> DualPolSignal:
    """Apply a recorded operator sequence in reverse with every operator inverted.

    Noise cannot be undone; a recorded noisy gain is inverted as a plain
    attenuation.
    """
    omega = sig.omega
    field_t = sig.field
    for op in reversed(ops):
        kind = op["op"]
        if kind == "linear":
            h = op["h_km"]
            inv = np.conj(cd_response(fiber.beta2_ps2_per_km, h, 0.0, omega)) \
                * math.exp(0.5 * alpha_linear(fiber.alpha_db_per_km) * h)
            field_t = sp_fft.ifft(sp_fft.fft(field_t, axis=-1) * inv, axis=-1)
        elif kind == "nonlinear":
            field_t = _rotate(field_t, -op["coeff"])
        elif kind == "gain":
            field_t = field_t * 10.0 ** (-op["gain_db"] / 20.0)
        elif kind == "pmd":
            r = np.array([[complex(*z) for z in row] for row in op["rotation"]])
            spec = r.conj().T @ sp_fft.fft(field_t, axis=-1)
            half = 0.5 * op["dgd_s"] * omega
            spec = spec * np.stack([np.exp(1j * half), np.exp(-1j * half)])
            field_t = sp_fft.ifft(spec, axis=-1)
        else:
            raise ValueError(f"unknown operator {kind!r}")
    return sig.with_field(field_t)
