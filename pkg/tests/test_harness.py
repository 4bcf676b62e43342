import csv
import json

import numpy as np
import pytest

from tdmr_lab import harness
from tdmr_lab.harness import ber_estimate, sign_test, user_bits_per_grain
from tdmr_lab.pipeline import PipelineConfig

GPB = 3.491


@pytest.mark.parametrize("rate, five, ug", [(0.6600, 0.18906, "0.1891"), (0.7050, 0.20195, "0.2020"),
                                            (0.6683, 0.19144, "0.1914")])
def test_user_bits_per_grain(rate, five, ug):
    assert user_bits_per_grain(rate, GPB) == rate / GPB
    assert round(user_bits_per_grain(rate, GPB), 5) == five
    assert harness.report_value(user_bits_per_grain(rate, GPB)) == ug


def test_report_value_rounds_half_up():
    assert harness.report_value(0.12345) == "0.1235"
    assert harness.report_value(0.123444) == "0.1234"
    assert harness.report_value(0.123449) == "0.1235"   # 0.12345 at five places
    assert harness.report_value(0.5, 2) == "0.50"


@pytest.mark.parametrize("N, bound", [(2_553_191, "1.1750e-06"), (7_659_574, "3.9167e-07"),
                                      (100, "3.0000e-02"), (300, "1.0000e-02")])
def test_zero_error_bound(N, bound):
    assert f"{ber_estimate(0, N):.4e}" == bound


def test_ber_estimate_counts_and_errors():
    assert ber_estimate(5, 1000) == 0.005
    for e, n in ((-1, 10), (11, 10), (0, 0)):
        with pytest.raises(ValueError):
            ber_estimate(e, n)


def test_sign_test():
    wins, n, p = sign_test([0.1] * 30, [0.2] * 30)
    assert (wins, n) == (30, 30) and p == pytest.approx(0.5 ** 30)
    # a detector against itself: every pair tied, no evidence either way
    x = np.linspace(0.1, 0.2, 30)
    assert sign_test(x, x) == (0, 0, 1.0)
    _, _, p = sign_test([0.2] * 30, [0.1] * 30)
    assert p == pytest.approx(1.0)


def test_config_round_trip(tmp_path):
    cfg = PipelineConfig(w1=(0.3, 0.6, 0.3), w2=0.9, rate=0.3, boundary_mode="threshold", k=777)
    path = tmp_path / "run.cfg"
    path.write_text("# comment line\n" + harness.format_config(cfg))
    assert harness.load_config(path) == cfg
    assert harness.load_config(path, {"clip": 5.0}).clip == 5.0


def test_config_parse_errors():
    with pytest.raises(ValueError):
        harness.parse_config("w1 0.5")
    with pytest.raises(KeyError):
        harness.parse_config("colour = blue")
    assert harness.parse_config("self-loops = 3  # fewer") == {"self_loops": 3}


@pytest.fixture(scope="module")
def small_result(tiny_detectors):
    cfg = PipelineConfig(k=600)
    return cfg, harness.run_experiment(cfg, tiny_detectors, 2, root_seed=4, workers=1)


def test_experiment_bookkeeping(small_result):
    cfg, res = small_result
    assert res.trials == 2 and len(res.per_trial) == 2
    for stage, (e, n) in res.errors.items():
        assert 0 <= e <= n
    assert res.errors["final"][1] == 2 * 3 * cfg.k
    assert res.user_bits_per_grain == res.achieved_rate / res.grains_per_bit
    assert np.mean(res.stage_series("raw")) == pytest.approx(res.errors["raw"][0] / res.errors["raw"][1])
    assert res.fer("final") >= 0


def test_experiment_is_deterministic(tiny_detectors, small_result):
    cfg, res = small_result
    again = harness.run_experiment(cfg, tiny_detectors, 2, root_seed=4, workers=2)
    assert again.per_trial == res.per_trial
    assert again.errors == res.errors
    other = harness.run_experiment(cfg, tiny_detectors, 1, root_seed=5, workers=1)
    assert other.per_trial[0] != res.per_trial[0]


def test_write_results(tmp_path, small_result):
    cfg, res = small_result
    harness.write_results(tmp_path, res, cfg, curve=[(0.3, 1e-3)])
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["config_hash"] == harness.config_hash(cfg)
    assert summary["ber"]["final"] == res.ber("final")
    rows = list(csv.DictReader(open(tmp_path / "results.csv")))
    assert len(rows) == sum(len(t) for t in res.per_trial)
    assert (tmp_path / "ber_curve.csv").exists()


def test_rate_search(tiny_detectors, tmp_path):
    cfg = PipelineConfig(k=600)
    best, curve = harness.rate_search(cfg, tiny_detectors, [0.34, 0.36], 1, target_ber=1.0, root_seed=1)
    assert best == pytest.approx(curve[-1][0])
    none, _ = harness.rate_search(cfg, tiny_detectors, [0.34], 1, target_ber=0.0, root_seed=1)
    assert none is None
    with pytest.raises(ValueError):
        harness.rate_search(cfg, tiny_detectors, [0.36, 0.34], 1)
    harness.write_curve(tmp_path, curve, best, GPB, cfg)
    assert json.loads((tmp_path / "summary.json").read_text())["rate"] == best


def test_threads_env(monkeypatch):
    monkeypatch.setenv("TDMR_LAB_THREADS", "3")
    assert harness.threads() == 3
    monkeypatch.delenv("TDMR_LAB_THREADS")
    assert harness.threads() == 1
