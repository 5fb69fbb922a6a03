"""scikit-learn style wrappers around the three equalizers.

``X`` is a :class:`DualPolSignal` or a sequence of them (received traces at
the receiver rate, carrying ``launch_power_dbm``); ``y`` the matching
:class:`SymbolFrame` objects. ``transform`` returns equalized signals,
``predict`` recovered symbols and ``score`` the mean effective SNR in dB.
"""
from __future__ import annotations

import math
from collections import defaultdict

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frames, check_launch_power, check_signals
from .channel import FiberParams, LinkConfig
from .dbp import dbp_fd, edc, grid_search
from .ldbp import (LdbpModel, TrainConfig, build_model, ldbp_apply, make_prune_schedule,
                   scaled_target_lengths, train)
from .pipeline import recover_symbols, score_symbols
from .signal import dbm_to_watt


def _at_launch_power(sig):
    if sig.launch_power_dbm is None:
        return sig
    return sig.with_field(sig.field * math.sqrt(dbm_to_watt(sig.launch_power_dbm) / sig.power()))


class _Equalizer(TransformerMixin, BaseEstimator):
    def _equalize(self, sig):
        raise NotImplementedError

    def fit(self, X, y=None):
        check_signals(X)
        self.is_fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self)
        sigs, single = check_signals(X)
        out = [self._equalize(_at_launch_power(s)) for s in sigs]
        return out[0] if single else out

    def predict(self, X):
        """Unit-energy symbol estimates (matched filter and decimation applied)."""
        eq = self.transform(X)
        single = not isinstance(eq, list)
        syms = [recover_symbols(s, self.rolloff, self.baud_rate) for s in ([eq] if single else eq)]
        return syms[0] if single else syms

    def score(self, X, y):
        """Mean effective SNR (dB) after alignment and phase correction."""
        syms = self.predict(X)
        syms = [syms] if isinstance(syms, np.ndarray) and syms.ndim == 2 else syms
        frames = check_frames(y, len(syms))
        return float(np.mean([score_symbols(s, f) for s, f in zip(syms, frames)]))


class EDCEqualizer(_Equalizer):
    """Single-tap-per-bin dispersion compensation over the whole link."""

    def __init__(self, beta2=-20.87, total_length_km=754.84, rolloff=0.01, baud_rate=25e9):
        self.beta2 = beta2
        self.total_length_km = total_length_km
        self.rolloff = rolloff
        self.baud_rate = baud_rate

    def _equalize(self, sig):
        return edc(sig, self.beta2, self.total_length_km)


class DBPEqualizer(_Equalizer):
    """Frequency-domain DBP; ``fit`` optionally grid-searches gamma and beta2."""

    def __init__(self, gamma=1.3, beta2=-20.87, alpha_db_per_km=0.2, span_length_km=75.484,
                 n_spans=10, stps=3, step_mode="logarithmic", gamma_grid=None, beta2_grid=None,
                 rolloff=0.01, baud_rate=25e9):
        self.gamma = gamma
        self.beta2 = beta2
        self.alpha_db_per_km = alpha_db_per_km
        self.span_length_km = span_length_km
        self.n_spans = n_spans
        self.stps = stps
        self.step_mode = step_mode
        self.gamma_grid = gamma_grid
        self.beta2_grid = beta2_grid
        self.rolloff = rolloff
        self.baud_rate = baud_rate

    def _fiber(self, gamma, beta2):
        return FiberParams(self.alpha_db_per_km, beta2, gamma, self.span_length_km)

    def _run(self, sig, gamma, beta2):
        return dbp_fd(sig, self._fiber(gamma, beta2), self.n_spans, self.stps, self.step_mode)

    def fit(self, X, y=None):
        sigs, _ = check_signals(X)
        check_launch_power(sigs)
        self.gamma_, self.beta2_ = self.gamma, self.beta2
        self.score_table_ = None
        if self.gamma_grid is not None or self.beta2_grid is not None:
            if y is None:
                raise ValueError("grid search needs reference frames y")
            frames = check_frames(y, len(sigs))

            def evaluate(rx, frame, g, b):
                out = self._run(_at_launch_power(rx), g, b)
                return score_symbols(recover_symbols(out, self.rolloff, self.baud_rate), frame)

            res = grid_search(list(zip(sigs, frames)),
                              self.gamma_grid if self.gamma_grid is not None else [self.gamma],
                              self.beta2_grid if self.beta2_grid is not None else [self.beta2],
                              evaluate)
            self.gamma_, self.beta2_ = res.gamma, res.beta2
            self.score_table_ = res
        return self

    def _equalize(self, sig):
        return self._run(sig, self.gamma_, self.beta2_)


class LDBPEqualizer(_Equalizer):
    """Learned DBP trained on the signals passed to ``fit``.

    Training powers are the distinct launch powers of the fit signals. With
    ``target_lengths="scaled"`` filters are pruned to the 7/9-tap split
    scaled to the layer count; ``None`` disables pruning. ``prune_taper`` is
    the fraction of the spacing between pruning events over which the removed
    taps are ramped to zero.
    """

    def __init__(self, gamma=1.3, beta2=-20.87, alpha_db_per_km=0.2, span_length_km=75.484,
                 n_spans=10, stps=3, step_mode="logarithmic", init_length=15,
                 target_lengths="scaled", n_iterations=10000, batch_size=8, learning_rate=7e-4,
                 segment_symbols=512, guard_symbols=128, prune_fraction=0.6, prune_taper=1.0,
                 quant_bits=None,
                 passband_fraction=0.6, oob_weight=1e-4, seed=0, rolloff=0.01, baud_rate=25e9):
        self.gamma = gamma
        self.beta2 = beta2
        self.alpha_db_per_km = alpha_db_per_km
        self.span_length_km = span_length_km
        self.n_spans = n_spans
        self.stps = stps
        self.step_mode = step_mode
        self.init_length = init_length
        self.target_lengths = target_lengths
        self.n_iterations = n_iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.segment_symbols = segment_symbols
        self.guard_symbols = guard_symbols
        self.prune_fraction = prune_fraction
        self.prune_taper = prune_taper
        self.quant_bits = quant_bits
        self.passband_fraction = passband_fraction
        self.oob_weight = oob_weight
        self.seed = seed
        self.rolloff = rolloff
        self.baud_rate = baud_rate

    def initial_model(self, sample_rate: float) -> LdbpModel:
        fiber = FiberParams(self.alpha_db_per_km, self.beta2, self.gamma, self.span_length_km)
        link = LinkConfig(fiber=fiber, n_spans=self.n_spans)
        return build_model(link, self.stps, self.init_length, fiber, sample_rate, self.step_mode,
                           self.passband_fraction, self.oob_weight)

    def _targets(self, model):
        if self.target_lengths is None:
            return None
        if isinstance(self.target_lengths, str):
            if self.target_lengths != "scaled":
                raise ValueError(f"unknown target_lengths {self.target_lengths!r}")
            return scaled_target_lengths(model)
        return list(self.target_lengths)

    def fit(self, X, y=None, callback=None):
        sigs, _ = check_signals(X)
        check_launch_power(sigs)
        if y is None:
            raise ValueError("LDBP training needs reference frames y")
        frames = check_frames(y, len(sigs))
        if len({s.sample_rate for s in sigs}) != 1:
            raise ValueError("all training signals must share one sample rate")
        data = defaultdict(list)
        for s, f in zip(sigs, frames):
            data[s.launch_power_dbm].append((s, f))
        model = self.initial_model(sigs[0].sample_rate)
        targets = self._targets(model)
        schedule = None
        if targets is not None:
            schedule = make_prune_schedule([p[0].n_taps for p in model.layers], targets,
                                           self.n_iterations, self.prune_fraction,
                                           self.prune_taper)
        cfg = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                          n_iterations=self.n_iterations, power_set_dbm=tuple(sorted(data)),
                          seed=self.seed, prune_schedule=schedule,
                          segment_symbols=self.segment_symbols, guard_symbols=self.guard_symbols,
                          quant_bits=self.quant_bits, rolloff=self.rolloff, baud_rate=self.baud_rate)
        self.model_, self.history_ = train(model, cfg, dict(data), callback)
        return self

    def _equalize(self, sig):
        return ldbp_apply(self.model_, sig)
