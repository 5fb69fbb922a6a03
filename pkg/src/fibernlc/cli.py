"""Command-line entry point: ``fibernlc <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness
from .harness import ConfigError, ExperimentConfig, NumericalFailure
from .io import load_checkpoint, save_checkpoint, write_frame, write_history, write_trace
from .ldbp import build_model
from .pipeline import simulate_trace

logger = logging.getLogger("fibernlc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "equalizers", None):
        names = tuple(n.strip() for n in args.equalizers.split(",") if n.strip())
        try:
            eqc = dataclasses.replace(cfg.equalizers, names=names)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg = dataclasses.replace(cfg, equalizers=eqc)
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg) / "traces"
    for p in cfg.sweep.powers():
        for t in range(cfg.traces_per_power):
            with harness.stage("simulate"):
                rx, frame = simulate_trace(cfg.link, cfg.transmitter, cfg.receiver, p, cfg.seed, t)
            stem = out / f"p{p:+.2f}_t{t}"
            extra = {"config_hash": cfg.hash, "trace": t}
            write_trace(stem.with_name(stem.name + "_rx"), rx, cfg.transmitter.baud_rate,
                        frame.seed, frame.constellation, extra=extra)
            write_frame(stem.with_name(stem.name + "_tx"), frame, p, extra=extra)
    print(f"wrote traces to {out}")
    return EXIT_OK


def _initial_model(cfg):
    s = cfg.equalizers.ldbp
    fib = cfg.link.fiber
    if s.gamma is not None or s.beta2 is not None:
        fib = dataclasses.replace(fib, gamma_per_w_km=s.gamma if s.gamma is not None else fib.gamma_per_w_km,
                                  beta2_ps2_per_km=s.beta2 if s.beta2 is not None else fib.beta2_ps2_per_km)
    rate = cfg.transmitter.baud_rate * cfg.receiver.rx_sps
    return build_model(cfg.link, s.stps, s.init_length, fib, rate, s.step_mode,
                       s.passband_fraction, s.oob_weight)


def cmd_design_filters(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    model = _initial_model(cfg)
    save_checkpoint(out / "ldbp_init", model, cfg.hash, 0)
    rep = harness.complexity_report(model)
    rep["config_hash"] = cfg.hash
    _write_json(out / "design_report.json", rep)
    print(f"{model.n_layers} linear layers, overall impulse length {rep['overall_impulse_length']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)

    def progress(rec, _model):
        if rec["iteration"] % 500 == 0:
            logger.info("iteration %d loss %.6g", rec["iteration"], rec["loss"])

    eqs = harness.fit_equalizers(cfg, ("ldbp",), callback=progress)
    est = eqs["ldbp"]
    save_checkpoint(out / "ldbp_trained", est.model_, cfg.hash, len(est.history_))
    write_history(out / "loss_history.csv", est.history_)
    _write_json(out / "complexity.json", harness.complexity_report(est.model_))
    print(f"trained for {len(est.history_)} iterations; final loss {est.history_[-1]['loss']:.6g}"
          if est.history_ else "no iterations run")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    names = cfg.equalizers.names
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    fitted = harness.fit_equalizers(cfg, names, ldbp_model=model)
    res = harness.run_sweep(cfg, names, threads=args.threads, fitted=fitted)
    res.write(out)
    for eq in names:
        a = res.aggregates[eq]
        print(f"{eq}: peak SNR {a['peak_snr_db']:.2f} dB at {a['optimal_power_dbm']:+.1f} dBm")
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    d = cfg.equalizers.dbp
    if d.gamma_grid is None and d.beta2_grid is None:
        raise ConfigError("gridsearch needs equalizers.dbp.gamma_grid and/or beta2_grid")
    eqs = harness.fit_equalizers(cfg, ("dbp",))
    table = eqs["dbp"].score_table_
    (out / "gridsearch.csv").write_text(table.to_csv())
    _write_json(out / "gridsearch.json", {"gamma": table.gamma, "beta2": table.beta2,
                                          "config_hash": cfg.hash})
    print(f"best gamma {table.gamma} 1/(W km), beta2 {table.beta2} ps^2/km")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    model = harness.random_toy_model(args.seed or 0, args.spans, args.stps, args.taps,
                                     delta_filters=args.delta)
    rep = harness.gradcheck(model, seed=args.seed or 0, n_probes=args.probes, fd_step=args.fd_step)
    rep["fd_convergence"] = harness.fd_convergence(model, seed=args.seed or 0, n_probes=args.probes)
    _write_json(out / "gradcheck.json", rep)
    print(f"max relative error {rep['max_rel_error']:.3e} over {len(rep['probes'])} probes")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = _initial_model(_load_config(args))
    rep = harness.complexity_report(model)
    _write_json(out / "complexity.json", rep)
    print(f"overall impulse length {rep['overall_impulse_length']}, "
          f"taps per polarization {rep['active_taps_per_pol']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fibernlc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, equalizers=False, threads=False):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if equalizers:
            sp.add_argument("--equalizers", help="comma-separated subset of edc,dbp,ldbp")
        if threads:
            sp.add_argument("--threads", type=int, default=1, help="worker processes")
        return sp

    common(sub.add_parser("simulate", help="write received traces for the sweep")).set_defaults(func=cmd_simulate)
    common(sub.add_parser("design-filters", help="LS-initialized LDBP model")).set_defaults(func=cmd_design_filters)
    common(sub.add_parser("train", help="train LDBP")).set_defaults(func=cmd_train)
    ev = common(sub.add_parser("evaluate", help="launch-power sweep"), equalizers=True, threads=True)
    ev.add_argument("--checkpoint", help="trained LDBP checkpoint (skips training)")
    ev.set_defaults(func=cmd_evaluate)
    common(sub.add_parser("gridsearch", help="DBP gamma/beta2 grid search")).set_defaults(func=cmd_gridsearch)
    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--out")
    gc.add_argument("--seed", type=int)
    gc.add_argument("--spans", type=int, default=2)
    gc.add_argument("--stps", type=int, default=3)
    gc.add_argument("--taps", type=int, default=5)
    gc.add_argument("--probes", type=int, default=10)
    gc.add_argument("--fd-step", type=float, default=1e-6)
    gc.add_argument("--delta", action="store_true", help="delta filters, no nonlinearity")
    gc.set_defaults(func=cmd_gradcheck)
    rp = common(sub.add_parser("report", help="complexity report"))
    rp.add_argument("--checkpoint")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
