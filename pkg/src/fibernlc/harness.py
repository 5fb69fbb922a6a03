"""Experiment configuration, launch-power sweeps and reporting."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cdfir import FirFilter
from .channel import EdfaConfig, FiberParams, LinkConfig, PmdConfig
from .estimators import DBPEqualizer, EDCEqualizer, LDBPEqualizer
from .io import config_hash, load_checkpoint, save_checkpoint, write_history
from .ldbp import LdbpModel, Receiver, build_model, loss_and_grad, pack_params, unpack_params
from .pipeline import ReceiverConfig, TransmitterConfig, simulate_trace
from .signal import GENERATOR_NAME, NonFiniteError

logger = logging.getLogger(__name__)

EQUALIZERS = ("edc", "dbp", "ldbp")
TRAIN_TRACE_OFFSET = 1_000_000  # trace indices of training data never collide with test traces


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class NumericalFailure(RuntimeError):
    def __init__(self, stage: str, detail: str):
        super().__init__(f"non-finite values in stage '{stage}': {detail}")
        self.stage = stage


@contextmanager
def stage(name: str):
    """Re-raise NaN/inf failures with the pipeline stage attached."""
    try:
        yield
    except (FloatingPointError, NonFiniteError) as exc:
        raise NumericalFailure(name, str(exc)) from exc


# ---------------------------------------------------------------------------
# Configuration

@dataclass(frozen=True)
class PowerSweep:
    start_dbm: float = -2.0
    stop_dbm: float = 6.0
    step_db: float = 1.0

    def __post_init__(self):
        if not self.step_db > 0:
            raise ConfigError("power step must be > 0")
        if self.stop_dbm < self.start_dbm:
            raise ConfigError("stop_dbm must not be below start_dbm")

    def powers(self) -> list[float]:
        n = int(math.floor((self.stop_dbm - self.start_dbm) / self.step_db + 1e-9)) + 1
        return [round(self.start_dbm + i * self.step_db, 9) for i in range(n)]


@dataclass(frozen=True)
class DbpSettings:
    stps: int = 3
    step_mode: str = "logarithmic"
    gamma_grid: tuple | None = None
    beta2_grid: tuple | None = None
    grid_powers: tuple = (4.0,)
    grid_traces: int = 1


@dataclass(frozen=True)
class LdbpSettings:
    stps: int = 3
    step_mode: str = "logarithmic"
    init_length: int = 15
    target_lengths: str | tuple | None = "scaled"
    n_iterations: int = 10000
    batch_size: int = 8
    learning_rate: float = 7e-4
    segment_symbols: int = 512
    guard_symbols: int = 128
    prune_fraction: float = 0.6
    prune_taper: float = 1.0
    quant_bits: int | None = None
    passband_fraction: float = 0.6
    oob_weight: float = 1e-4
    train_powers: tuple = (3.0, 3.5, 4.0, 4.5, 5.0)
    train_traces: int = 1
    use_dbp_estimate: bool = True
    gamma: float | None = None
    beta2: float | None = None


@dataclass(frozen=True)
class EqualizerConfig:
    names: tuple = EQUALIZERS
    dbp: DbpSettings = field(default_factory=DbpSettings)
    ldbp: LdbpSettings = field(default_factory=LdbpSettings)

    def __post_init__(self):
        bad = [n for n in self.names if n not in EQUALIZERS]
        if bad or not self.names:
            raise ConfigError(f"unknown equalizer(s) {bad}; choose from {EQUALIZERS}")


@dataclass(frozen=True)
class ExperimentConfig:
    link: LinkConfig = field(default_factory=lambda: LinkConfig(n_spans=10, forward_stps=100))
    transmitter: TransmitterConfig = field(default_factory=TransmitterConfig)
    receiver: ReceiverConfig = field(default_factory=ReceiverConfig)
    equalizers: EqualizerConfig = field(default_factory=EqualizerConfig)
    sweep: PowerSweep = field(default_factory=PowerSweep)
    seed: int = 1
    traces_per_power: int = 4
    output_dir: str = "results"

    def __post_init__(self):
        if self.traces_per_power < 1:
            raise ConfigError("traces_per_power must be >= 1")
        if self.receiver.lowpass_hz > self.transmitter.baud_rate * self.transmitter.sim_sps / 2:
            raise ConfigError("receiver low-pass exceeds the simulation bandwidth")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)
        return config_hash(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return _build(cls, d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(d)


_NESTED = {
    ExperimentConfig: {"link": LinkConfig, "transmitter": TransmitterConfig,
                       "receiver": ReceiverConfig, "equalizers": EqualizerConfig,
                       "sweep": PowerSweep},
    LinkConfig: {"fiber": FiberParams, "edfa": EdfaConfig, "pmd": PmdConfig},
    EqualizerConfig: {"dbp": DbpSettings, "ldbp": LdbpSettings},
}


def _build(cls, d):
    if d is None:
        return None
    if not isinstance(d, dict):
        raise ConfigError(f"{cls.__name__} section must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {cls.__name__}: {', '.join(sorted(unknown))}")
    kw = {}
    for k, v in d.items():
        sub = _NESTED.get(cls, {}).get(k)
        if sub is not None:
            kw[k] = _build(sub, v)
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    return cls(**kw)


# ---------------------------------------------------------------------------
# Sweep

def _train_data(cfg: ExperimentConfig, powers, n_traces):
    X, Y = [], []
    for p in powers:
        for t in range(n_traces):
            with stage("simulate"):
                r, f = simulate_trace(cfg.link, cfg.transmitter, cfg.receiver, p, cfg.seed,
                                      TRAIN_TRACE_OFFSET + t)
            X.append(r)
            Y.append(f)
    return X, Y


def fit_equalizers(cfg: ExperimentConfig, names=None, ldbp_model: LdbpModel | None = None,
                   callback=None) -> dict:
    """Fit the selected equalizers on training traces drawn with dedicated seeds."""
    names = tuple(names or cfg.equalizers.names)
    link, tx = cfg.link, cfg.transmitter
    fib = link.fiber
    common = dict(alpha_db_per_km=fib.alpha_db_per_km, span_length_km=fib.span_length_km,
                  n_spans=link.n_spans, rolloff=tx.rolloff, baud_rate=tx.baud_rate)
    out = {}
    if "edc" in names:
        edc = EDCEqualizer(fib.beta2_ps2_per_km, link.total_length_km, tx.rolloff, tx.baud_rate)
        edc.is_fitted_ = True  # nothing to learn
        out["edc"] = edc
    d = cfg.equalizers.dbp
    dbp = None
    if "dbp" in names or ("ldbp" in names and cfg.equalizers.ldbp.use_dbp_estimate):
        dbp = DBPEqualizer(gamma=fib.gamma_per_w_km, beta2=fib.beta2_ps2_per_km, stps=d.stps,
                           step_mode=d.step_mode,
                           gamma_grid=None if d.gamma_grid is None else list(d.gamma_grid),
                           beta2_grid=None if d.beta2_grid is None else list(d.beta2_grid),
                           **common)
        if d.gamma_grid is not None or d.beta2_grid is not None:
            X, Y = _train_data(cfg, d.grid_powers, d.grid_traces)
            with stage("gridsearch"):
                dbp.fit(X, Y)
        else:
            dbp.gamma_, dbp.beta2_, dbp.score_table_ = dbp.gamma, dbp.beta2, None
        if "dbp" in names:
            out["dbp"] = dbp
    if "ldbp" in names:
        s = cfg.equalizers.ldbp
        gamma = s.gamma if s.gamma is not None else (
            dbp.gamma_ if dbp is not None else fib.gamma_per_w_km)
        beta2 = s.beta2 if s.beta2 is not None else (
            dbp.beta2_ if dbp is not None else fib.beta2_ps2_per_km)
        est = LDBPEqualizer(gamma=gamma, beta2=beta2, stps=s.stps, step_mode=s.step_mode,
                            init_length=s.init_length, target_lengths=s.target_lengths,
                            n_iterations=s.n_iterations, batch_size=s.batch_size,
                            learning_rate=s.learning_rate, segment_symbols=s.segment_symbols,
                            guard_symbols=s.guard_symbols, prune_fraction=s.prune_fraction,
                            prune_taper=s.prune_taper,
                            quant_bits=s.quant_bits, passband_fraction=s.passband_fraction,
                            oob_weight=s.oob_weight, seed=cfg.seed, **common)
        if ldbp_model is not None:
            est.model_, est.history_ = ldbp_model, []
        else:
            X, Y = _train_data(cfg, s.train_powers, s.train_traces)
            with stage("train"):
                est.fit(X, Y, callback=callback)
        out["ldbp"] = est
    return out


def _evaluate_point(args):
    cfg, eqs, power, trace = args
    with stage("simulate"):
        rx, frame = simulate_trace(cfg.link, cfg.transmitter, cfg.receiver, power, cfg.seed, trace)
    row = {"power_dbm": power, "trace": trace}
    for name, est in eqs.items():
        with stage(f"equalize:{name}"):
            snr = est.score(rx, frame)
        if not math.isfinite(snr):
            raise NumericalFailure(f"equalize:{name}", "effective SNR is not finite")
        row[name] = snr
    return row


@dataclass
class SweepResult:
    """Per-trace SNR table plus aggregates derived from it."""

    equalizers: tuple
    rows: list
    config_hash: str = ""
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self.compute_aggregates()

    def compute_aggregates(self) -> dict:
        powers = sorted({r["power_dbm"] for r in self.rows})
        agg = {}
        for eq in self.equalizers:
            means = []
            for p in powers:
                vals = [r[eq] for r in self.rows if r["power_dbm"] == p]
                means.append(float(np.mean(vals)))
            k = int(np.argmax(means))
            agg[eq] = {"powers_dbm": powers, "mean_snr_db": means,
                       "peak_snr_db": means[k], "optimal_power_dbm": powers[k]}
        if "edc" in agg:
            for eq in self.equalizers:
                agg[eq]["peak_gain_over_edc_db"] = agg[eq]["peak_snr_db"] - agg["edc"]["peak_snr_db"]
        return agg

    def check(self) -> None:
        if self.aggregates != self.compute_aggregates():
            raise ValueError("stored aggregates disagree with the per-trace table")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["power_dbm", "trace"] + [f"snr_{e}_db" for e in self.equalizers])
        for r in self.rows:
            w.writerow([repr(r["power_dbm"]), r["trace"]] + [repr(r[e]) for e in self.equalizers])
        return buf.getvalue()

    def plot_data(self) -> dict:
        return {"x_label": "launch power (dBm)", "y_label": "effective SNR (dB)",
                "config_hash": self.config_hash,
                "series": [{"name": e, "x": self.aggregates[e]["powers_dbm"],
                            "y": self.aggregates[e]["mean_snr_db"]} for e in self.equalizers]}

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(self.to_csv())
        summary = {"config_hash": self.config_hash, "generator": GENERATOR_NAME,
                   "equalizers": list(self.equalizers), "aggregates": self.aggregates}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        (out / "plot_data.json").write_text(json.dumps(self.plot_data(), indent=2))
        return out

    @classmethod
    def read(cls, out_dir) -> "SweepResult":
        out = Path(out_dir)
        summary = json.loads((out / "summary.json").read_text())
        eqs = tuple(summary["equalizers"])
        rows = []
        with (out / "sweep.csv").open() as fh:
            for rec in csv.DictReader(fh):
                row = {"power_dbm": float(rec["power_dbm"]), "trace": int(rec["trace"])}
                row.update({e: float(rec[f"snr_{e}_db"]) for e in eqs})
                rows.append(row)
        res = cls(eqs, rows, summary["config_hash"], summary["aggregates"])
        res.check()
        return res


def run_sweep(cfg: ExperimentConfig, equalizers=None, threads: int = 1,
              fitted: dict | None = None, callback=None) -> SweepResult:
    """Fit equalizers, then score every (power, trace) point.

    Points run in worker processes when ``threads > 1``; results are merged in
    (power, trace) order so output is independent of scheduling.
    """
    names = tuple(equalizers or cfg.equalizers.names)
    eqs = fitted if fitted is not None else fit_equalizers(cfg, names, callback=callback)
    eqs = {n: eqs[n] for n in names}
    jobs = [(cfg, eqs, p, t) for p in cfg.sweep.powers() for t in range(cfg.traces_per_power)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_evaluate_point, jobs))
    else:
        rows = [_evaluate_point(j) for j in jobs]
    rows.sort(key=lambda r: (r["power_dbm"], r["trace"]))
    return SweepResult(names, rows, cfg.hash)


# ---------------------------------------------------------------------------
# Reports

def overall_length(lengths) -> int:
    """Impulse-response length of a cascade of filters with the given lengths."""
    lengths = list(lengths)
    if not lengths:
        return 0
    return int(sum(int(L) - 1 for L in lengths)) + 1


def grouped_overall_length(groups) -> int:
    """``groups`` is a sequence of ``(count, taps)`` pairs, e.g. ``[(22, 7), (39, 9)]``."""
    return overall_length([L for n, L in groups for _ in range(int(n))])


def complexity_report(model: LdbpModel) -> dict:
    lengths = model.active_lengths()
    counts: dict[int, int] = {}
    for L in lengths:
        counts[L] = counts.get(L, 0) + 1
    return {
        "n_layers": model.n_layers,
        "n_nonlinear_steps": int(model.nl_coeffs.size),
        "per_layer_taps": lengths,
        "tap_histogram": {str(k): v for k, v in sorted(counts.items())},
        "overall_impulse_length": overall_length(lengths),
        "active_taps_per_pol": int(sum(lengths)),
        "active_taps_total": int(2 * sum(lengths)),
    }


def cd_memory_estimate(beta2: float, total_length: float, delta_f: float, sample_period: float) -> int:
    """Dispersion memory in samples, ``round(2 pi |beta2| df L / T)``.

    ``beta2`` in ps^2/km, ``total_length`` in km, ``delta_f`` in Hz and
    ``sample_period`` in s.
    """
    if total_length < 0 or delta_f < 0 or not sample_period > 0:
        raise ValueError("arguments must be non-negative and the sample period positive")
    return int(round(2 * math.pi * abs(beta2) * 1e-24 * delta_f * total_length / sample_period))


def random_toy_model(seed: int, n_spans: int = 2, stps: int = 3, n_taps: int = 5,
                     sample_rate: float = 50e9, perturb: float = 0.05,
                     delta_filters: bool = False) -> LdbpModel:
    link = LinkConfig(n_spans=n_spans, forward_stps=1)
    if delta_filters:
        n_nl = n_spans * stps
        layers = [(FirFilter.delta(n_taps), FirFilter.delta(n_taps)) for _ in range(n_nl + 1)]
        return LdbpModel(layers, np.zeros(n_nl), sample_rate)
    model = build_model(link, stps, n_taps, sample_rate=sample_rate,
                        passband_fraction=0.8, oob_weight=1.0)
    rng = np.random.default_rng(seed)
    p = pack_params(model)
    return unpack_params(model, p + perturb * rng.standard_normal(p.size))


def gradcheck(model: LdbpModel, seed: int = 0, n_probes: int = 10, fd_step: float = 1e-6,
              n_samples: int = 256, sps: int = 2, power_w: float = 2e-3,
              rolloff: float = 0.01) -> dict:
    """Analytic gradient vs. central finite differences on random probes.

    The relative error of a probe is ``|a - fd| / max(|a|, |fd|, floor)`` with
    ``floor = 1e-6 * max|gradient|``, so parameters whose gradient vanishes
    are judged against the gradient scale instead of against zero.
    """
    rng = np.random.default_rng(seed)
    x = (rng.standard_normal((1, 2, n_samples)) + 1j * rng.standard_normal((1, 2, n_samples)))
    x *= math.sqrt(power_w / 4)
    tx = rng.standard_normal((1, 2, n_samples // sps)) + 1j * rng.standard_normal((1, 2, n_samples // sps))
    rec = Receiver(n_samples, sps, rolloff, 1 / math.sqrt(power_w))
    _, grad = loss_and_grad(model, x, tx, rec)
    p0 = pack_params(model)
    probes = rng.choice(p0.size, size=min(n_probes, p0.size), replace=False)
    floor = 1e-6 * float(np.max(np.abs(grad), initial=0.0))
    rows = []
    for i in probes:
        pp = p0.copy()
        pp[i] += fd_step
        lp, _ = loss_and_grad(unpack_params(model, pp), x, tx, rec, need_grad=False)
        pp[i] -= 2 * fd_step
        lm, _ = loss_and_grad(unpack_params(model, pp), x, tx, rec, need_grad=False)
        fd = (lp - lm) / (2 * fd_step)
        denom = max(abs(fd), abs(grad[i]), floor)
        rel = 0.0 if denom == 0 else abs(fd - grad[i]) / denom
        rows.append({"param": int(i), "analytic": float(grad[i]), "finite_difference": float(fd),
                     "rel_error": float(rel)})
    return {"fd_step": fd_step, "n_params": int(p0.size), "probes": rows, "floor": floor,
            "max_rel_error": max((r["rel_error"] for r in rows), default=0.0)}


def fd_convergence(model: LdbpModel, steps=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8), **kw) -> list:
    """Max relative gradient error for a range of finite-difference steps."""
    return [{"fd_step": h, "max_rel_error": gradcheck(model, fd_step=h, **kw)["max_rel_error"]}
            for h in steps]


__all__ = [
    "ConfigError", "NumericalFailure", "ExperimentConfig", "PowerSweep", "DbpSettings",
    "LdbpSettings", "EqualizerConfig", "SweepResult", "run_sweep", "fit_equalizers",
    "complexity_report", "overall_length", "grouped_overall_length", "cd_memory_estimate",
    "gradcheck", "fd_convergence", "random_toy_model", "save_checkpoint", "load_checkpoint",
    "write_history",
]
