import dataclasses
import json

import numpy as np
import pytest

from fibernlc import cli
from fibernlc.cdfir import FirFilter
from fibernlc.channel import EdfaConfig, FiberParams, LinkConfig
from fibernlc.harness import (ConfigError, DbpSettings, EqualizerConfig, ExperimentConfig,
                              LdbpSettings, NumericalFailure, PowerSweep, SweepResult,
                              cd_memory_estimate, complexity_report, fd_convergence, gradcheck,
                              grouped_overall_length, overall_length, random_toy_model, run_sweep,
                              stage)
from fibernlc.ldbp import LdbpModel, build_model, prune_to
from fibernlc.pipeline import TransmitterConfig


def _tiny(**kw):
    base = dict(link=LinkConfig(n_spans=2, forward_stps=4),
                transmitter=TransmitterConfig(n_symbols=2 ** 10),
                equalizers=EqualizerConfig(names=("edc", "dbp")),
                sweep=PowerSweep(0.0, 4.0, 2.0), traces_per_power=2, seed=5)
    base.update(kw)
    return ExperimentConfig(**base)


# --- configuration ------------------------------------------------------------------

def test_power_sweep():
    assert PowerSweep().powers() == [-2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    assert PowerSweep(0, 1, 0.25).powers() == [0, 0.25, 0.5, 0.75, 1.0]
    with pytest.raises(ConfigError):
        PowerSweep(0, 1, 0)
    with pytest.raises(ConfigError):
        PowerSweep(2, 1, 1)


def test_config_validation():
    with pytest.raises(ConfigError):
        EqualizerConfig(names=("edc", "magic"))
    with pytest.raises(ConfigError):
        ExperimentConfig(traces_per_power=0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"sweep": {"step": 1}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"link": {"n_spans": 0}})


def test_config_roundtrip_and_hash(tmp_path):
    cfg = _tiny(equalizers=EqualizerConfig(dbp=DbpSettings(gamma_grid=(1.2, 1.3))))
    d = cfg.to_dict()
    again = ExperimentConfig.from_dict(d)
    assert again == cfg and again.hash == cfg.hash
    p = tmp_path / "c.json"
    p.write_text(json.dumps(d))
    assert ExperimentConfig.from_json(p) == cfg
    assert dataclasses.replace(cfg, output_dir="elsewhere").hash == cfg.hash
    assert dataclasses.replace(cfg, seed=6).hash != cfg.hash
    assert ExperimentConfig.from_dict({}) == ExperimentConfig()


def test_stage_maps_numeric_errors():
    with pytest.raises(NumericalFailure) as exc:
        with stage("propagate"):
            raise FloatingPointError("nan")
    assert exc.value.stage == "propagate"


# --- sweeps -------------------------------------------------------------------------

def test_sweep_deterministic_and_threads_agree(tmp_path):
    cfg = _tiny()
    a = run_sweep(cfg)
    b = run_sweep(cfg)
    c = run_sweep(cfg, threads=2)
    assert a.to_csv() == b.to_csv() == c.to_csv()
    a.write(tmp_path / "a")
    b.write(tmp_path / "b")
    for name in ("sweep.csv", "summary.json", "plot_data.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert [(r["power_dbm"], r["trace"]) for r in a.rows] == [(p, t) for p in (0, 2, 4) for t in (0, 1)]


def test_sweep_aggregates_recomputed(tmp_path):
    res = run_sweep(_tiny())
    for eq in res.equalizers:
        agg = res.aggregates[eq]
        for p, m in zip(agg["powers_dbm"], agg["mean_snr_db"]):
            vals = [r[eq] for r in res.rows if r["power_dbm"] == p]
            assert m == float(np.mean(vals))
        assert agg["peak_snr_db"] == max(agg["mean_snr_db"])
    res.write(tmp_path)
    back = SweepResult.read(tmp_path)
    assert back.to_csv() == res.to_csv() and back.aggregates == res.aggregates
    summary = json.loads((tmp_path / "summary.json").read_text())
    summary["aggregates"]["edc"]["peak_snr_db"] += 1
    (tmp_path / "summary.json").write_text(json.dumps(summary))
    with pytest.raises(ValueError):
        SweepResult.read(tmp_path)


def test_linear_noiseless_link_is_inverted_exactly():
    fiber = FiberParams(gamma_per_w_km=0.0)
    cfg = _tiny(link=LinkConfig(fiber=fiber, n_spans=2, forward_stps=2, edfa=EdfaConfig(enabled=False)),
                receiver=dataclasses.replace(ExperimentConfig().receiver, lowpass_hz=50e9))
    res = run_sweep(cfg)
    for r in res.rows:
        assert r["edc"] == 100.0 and r["dbp"] == 100.0


@pytest.mark.slow
def test_edc_curve_is_unimodal():
    cfg = _tiny(link=LinkConfig(n_spans=10, forward_stps=20), equalizers=EqualizerConfig(names=("edc",)),
                transmitter=TransmitterConfig(n_symbols=2 ** 12),
                sweep=PowerSweep(-6.0, 6.0, 2.0), traces_per_power=1)
    res = run_sweep(cfg)
    means = res.aggregates["edc"]["mean_snr_db"]
    k = int(np.argmax(means))
    print("EDC curve", means)
    assert 0 < k < len(means) - 1
    assert all(b >= a - 0.2 for a, b in zip(means[:k], means[1:k + 1]))
    assert all(b <= a + 0.2 for a, b in zip(means[k:], means[k + 1:]))


def test_ldbp_with_given_model_in_sweep():
    cfg = _tiny(equalizers=EqualizerConfig(names=("edc", "ldbp")), sweep=PowerSweep(2, 2, 1),
                traces_per_power=1)
    model = build_model(cfg.link, 3, 25, sample_rate=50e9)
    from fibernlc.harness import fit_equalizers
    eqs = fit_equalizers(cfg, ldbp_model=model)
    res = run_sweep(cfg, fitted=eqs)
    assert res.rows[0]["ldbp"] > res.rows[0]["edc"] - 1


# --- complexity ---------------------------------------------------------------------

@pytest.mark.parametrize("groups,expected", [([(22, 7), (39, 9)], 445), ([(12, 23), (9, 21)], 445),
                                             ([(22, 5), (39, 7)], 323)])
def test_overall_length_grouped(groups, expected):
    assert grouped_overall_length(groups) == expected
    # the grouped form 2 * sum n_i (L_i - 1) / 2 + 1
    assert 2 * sum(n * (L - 1) // 2 for n, L in groups) + 1 == expected


def test_complexity_matches_convolution_oracle():
    rng = np.random.default_rng(2)
    m = build_model(LinkConfig(n_spans=2), 3, 11)
    m = prune_to(m, [7, 9, 5, 11, 3, 9, 7])
    composed = np.ones(1)
    for L in m.active_lengths():
        t = rng.uniform(0.5, 1.0, L)
        composed = np.convolve(composed, t + t[::-1])
    rep = complexity_report(m)
    assert rep["overall_impulse_length"] == composed.size == overall_length(m.active_lengths())
    assert rep["active_taps_per_pol"] == 51
    assert rep["tap_histogram"] == {"3": 1, "5": 1, "7": 2, "9": 2, "11": 1}


def test_cd_memory_estimate():
    # independent evaluation of round(2 pi |b2| df L / T)
    assert cd_memory_estimate(-20.87, 1510, 0.51 * 50e9, 20e-12) == 252
    assert cd_memory_estimate(20.87, 1510, 0.77 * 50e9, 20e-12) == 381
    assert cd_memory_estimate(20.87, 1510, 0.0, 20e-12) == 0
    with pytest.raises(ValueError):
        cd_memory_estimate(20.87, 1510, 1e9, 0.0)


# --- gradient check -----------------------------------------------------------------

def test_gradcheck_delta_linear_model():
    rep = gradcheck(random_toy_model(0, delta_filters=True), seed=1, fd_step=1e-5)
    assert rep["max_rel_error"] < 1e-8 and len(rep["probes"]) == 10


def test_fd_convergence_curve():
    curve = fd_convergence(random_toy_model(4), seed=4, steps=(1e-2, 1e-3, 1e-4, 1e-6))
    errs = [c["max_rel_error"] for c in curve]
    assert errs[1] < errs[0] and errs[2] < errs[1]
    assert errs[3] < 1e-6


# --- command line -------------------------------------------------------------------

def _write_cfg(path, cfg):
    path.write_text(json.dumps(cfg.to_dict()))
    return str(path)


def test_cli_gradcheck_and_report(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path), "--probes", "4"]) == 0
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    assert rep["max_rel_error"] < 1e-6 and rep["fd_convergence"]
    cfg = _write_cfg(tmp_path / "c.json", _tiny())
    assert cli.main(["report", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "complexity.json").read_text())["n_layers"] == 7


def test_cli_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sweep": {"step_db": -1}}))
    assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["evaluate", "--equalizers", "edc,nope", "--out", str(tmp_path)]) == 2
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_numerical_failure(tmp_path, capsys):
    cfg = _tiny(link=LinkConfig(fiber=FiberParams(gamma_per_w_km=1e300), n_spans=1, forward_stps=2),
                sweep=PowerSweep(400, 400, 1), traces_per_power=1)
    with np.errstate(all="ignore"):
        code = cli.main(["simulate", "--config", _write_cfg(tmp_path / "c.json", cfg), "--out", str(tmp_path)])
    assert code == 3
    assert "simulate" in capsys.readouterr().err


def test_cli_simulate_evaluate_gridsearch(tmp_path):
    cfg = _tiny(equalizers=EqualizerConfig(names=("edc", "dbp"),
                                           dbp=DbpSettings(gamma_grid=(1.0, 1.3), grid_powers=(4.0,))),
                sweep=PowerSweep(0, 2, 2), traces_per_power=1)
    path = _write_cfg(tmp_path / "c.json", cfg)
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "traces" / "p+0.00_t0_rx.json").exists()
    assert cli.main(["gridsearch", "--config", path, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "gridsearch.csv").read_text().startswith("gamma,beta2,mean_snr_db")
    assert cli.main(["evaluate", "--config", path, "--out", str(tmp_path), "--threads", "2"]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["config_hash"] == cfg.hash


def test_cli_train_design_and_evaluate_checkpoint(tmp_path):
    cfg = _tiny(equalizers=EqualizerConfig(
        names=("edc", "ldbp"),
        ldbp=LdbpSettings(init_length=9, n_iterations=6, batch_size=2, segment_symbols=128,
                          guard_symbols=32, train_powers=(2.0,))),
        sweep=PowerSweep(2, 2, 1), traces_per_power=1)
    path = _write_cfg(tmp_path / "c.json", cfg)
    assert cli.main(["design-filters", "--config", path, "--out", str(tmp_path)]) == 0
    assert cli.main(["train", "--config", path, "--out", str(tmp_path)]) == 0
    hist = (tmp_path / "loss_history.csv").read_text().splitlines()
    assert hist[0] == "iteration,loss,power_dbm,active_taps" and len(hist) == 7
    assert cli.main(["evaluate", "--config", path, "--out", str(tmp_path / "ev"),
                     "--checkpoint", str(tmp_path / "ldbp_trained")]) == 0
    assert cli.main(["report", "--checkpoint", str(tmp_path / "ldbp_trained"), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "complexity.json").read_text())
    assert rep["n_layers"] == 7
