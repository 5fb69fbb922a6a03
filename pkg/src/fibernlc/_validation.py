"""Input checks shared by the estimator classes."""
from __future__ import annotations

import numpy as np

from .signal import DualPolSignal, SymbolFrame


def check_signals(X, sample_rate: float | None = None) -> tuple[list[DualPolSignal], bool]:
    """Normalize ``X`` to a list of signals; also report whether it was a single one."""
    single = isinstance(X, DualPolSignal)
    sigs = [X] if single else list(X)
    if not sigs:
        raise ValueError("expected at least one signal")
    for s in sigs:
        if not isinstance(s, DualPolSignal):
            raise TypeError(f"expected DualPolSignal, got {type(s).__name__}")
        if sample_rate is not None and not np.isclose(s.sample_rate, sample_rate, rtol=1e-9):
            raise ValueError(f"signal sampled at {s.sample_rate} Hz, expected {sample_rate} Hz")
    return sigs, single


def check_frames(y, n: int) -> list[SymbolFrame]:
    frames = [y] if isinstance(y, SymbolFrame) else list(y)
    if len(frames) != n:
        raise ValueError(f"got {len(frames)} symbol frames for {n} signals")
    for f in frames:
        if not isinstance(f, SymbolFrame):
            raise TypeError(f"expected SymbolFrame, got {type(f).__name__}")
    return frames


def check_launch_power(sigs) -> None:
    if any(s.launch_power_dbm is None for s in sigs):
        raise ValueError("signals must carry launch_power_dbm for power-aware equalization")
