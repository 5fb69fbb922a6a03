"""Fiber nonlinearity compensation toolkit.

Simulates dual-polarization transmission over amplified fiber links and
equalizes it with linear dispersion compensation, frequency-domain digital
backpropagation, or learned backpropagation built from short trainable FIR
filters.
"""
from .channel import EdfaConfig, FiberParams, LinkConfig, PmdConfig, propagate
from .dbp import dbp_fd, edc, grid_search
from .estimators import DBPEqualizer, EDCEqualizer, LDBPEqualizer
from .ldbp import LdbpModel, TrainConfig, build_model, ldbp_forward, train
from .signal import DualPolSignal, SymbolFrame, gen_symbol_frame

__version__ = "0.1.0"
