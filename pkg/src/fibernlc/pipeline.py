"""Transmitter, receiver front end and symbol recovery shared by all equalizers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import LinkConfig, propagate
from .signal import (DualPolSignal, SymbolFrame, align_circular, dbm_to_watt, downsample,
                     effective_snr, gen_symbol_frame, lowpass, matched_filter, normalize_to_power,
                     phase_offset_correct, resample_rational, shape_pulses_periodic)


@dataclass(frozen=True)
class TransmitterConfig:
    baud_rate: float = 25e9
    rolloff: float = 0.01
    constellation: str = "16QAM"
    n_symbols: int = 2 ** 16
    sim_sps: int = 4

    def __post_init__(self):
        if self.baud_rate <= 0 or not 0 < self.rolloff <= 1:
            raise ValueError("baud_rate must be > 0 and rolloff in (0, 1]")
        if self.n_symbols < 1 or self.sim_sps < 2:
            raise ValueError("n_symbols must be >= 1 and sim_sps >= 2")


@dataclass(frozen=True)
class ReceiverConfig:
    lowpass_hz: float = 30e9
    rx_sps: int = 2

    def __post_init__(self):
        if self.lowpass_hz <= 0 or self.rx_sps < 1:
            raise ValueError("lowpass_hz must be > 0 and rx_sps >= 1")


def trace_seeds(seed: int, power_dbm: float, trace: int) -> tuple[int, int]:
    """Independent (symbol, noise) seeds for one sweep point."""
    ss = np.random.SeedSequence([int(seed), int(round(power_dbm * 1000)) & 0xFFFFFFFF, int(trace)])
    a, b = ss.generate_state(2, dtype=np.uint64)
    return int(a), int(b)


def transmit(frame: SymbolFrame, tx: TransmitterConfig, power_dbm: float) -> DualPolSignal:
    sig = shape_pulses_periodic(frame, tx.rolloff, tx.sim_sps)
    sig = normalize_to_power(sig, dbm_to_watt(power_dbm))
    return DualPolSignal(sig.field, sig.sample_rate, power_dbm)


def receive(sig: DualPolSignal, tx: TransmitterConfig, rx: ReceiverConfig) -> DualPolSignal:
    """Brick-wall low-pass then resample to ``rx.rx_sps`` samples per symbol."""
    cutoff = min(rx.lowpass_hz, sig.sample_rate / 2)
    out = lowpass(sig, cutoff)
    g = math.gcd(rx.rx_sps, tx.sim_sps)
    return resample_rational(out, rx.rx_sps // g, tx.sim_sps // g)


def simulate_trace(link: LinkConfig, tx: TransmitterConfig, rx: ReceiverConfig,
                   power_dbm: float, seed: int, trace: int = 0):
    """One received trace at the receiver rate and its transmitted frame."""
    sym_seed, noise_seed = trace_seeds(seed, power_dbm, trace)
    frame = gen_symbol_frame(sym_seed, tx.n_symbols, tx.constellation, tx.baud_rate)
    sig = transmit(frame, tx, power_dbm)
    out = propagate(sig, link, seed=noise_seed)
    return receive(out, tx, rx), frame


def recover_symbols(sig: DualPolSignal, rolloff: float, baud_rate: float,
                    launch_power_dbm: float | None = None) -> np.ndarray:
    """Matched filter, decimate to one sample per symbol, scale to unit energy."""
    sps = int(round(sig.sample_rate / baud_rate))
    mf = matched_filter(sig, rolloff, baud_rate)
    sym = downsample(mf, sps, 0)
    p = sig.launch_power_dbm if launch_power_dbm is None else launch_power_dbm
    if p is None:
        return sym / math.sqrt(np.sum(np.abs(sym) ** 2) / sym.shape[1] / 2)
    return sym / math.sqrt(dbm_to_watt(p))


def score_symbols(sym: np.ndarray, frame: SymbolFrame) -> float:
    """Align, remove the common phase per polarization and return effective SNR (dB)."""
    shift = align_circular(sym[0], frame.symbols[0])
    sym = np.roll(sym, -shift, axis=-1)
    sym, _ = phase_offset_correct(sym, frame.symbols)
    return effective_snr(sym, frame.symbols)
