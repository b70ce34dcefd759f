import json

import numpy as np
import pytest

from sirw.cli import main
from sirw.defaults import THRESHOLDS
from sirw.experiments import (
    ConfigError,
    ExperimentConfig,
    fit_exponent,
    good_event_flags,
    run_experiment,
)
from sirw.walk import run
from sirw.weights import WeightSpec

from conftest import CONSTANT, PL

PL_JSON = '{"family": "power_law", "p": 0.5, "B": 0.2}'
CONST_JSON = '{"family": "constant"}'


def cfg(experiment, spec=PL, **kw):
    base = dict(n=100, reps=20, t=1.0, seed=1, out=None, format="csv", params={})
    base.update(kw)
    return ExperimentConfig(experiment, spec, base.pop("n"), base.pop("reps"), base.pop("t"),
                            base.pop("seed"), base.pop("out"), base.pop("format"), base.pop("params"))


@pytest.mark.parametrize("bad", [dict(reps=0), dict(n=0), dict(t=0.0), dict(format="xml"),
                                 dict(seed=-1), dict(params={"nope": 1})])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        run_experiment(cfg("qv", **bad))


def test_unknown_experiment():
    with pytest.raises(ConfigError):
        run_experiment(cfg("teleport"))


def test_rayknight_variant_validated():
    with pytest.raises(ConfigError):
        run_experiment(cfg("rayknight", params={"variant": "sideways"}))


def test_config_round_trip():
    c = cfg("flt", params={"dt": 0.01})
    back = ExperimentConfig.from_dict(json.loads(json.dumps(c.to_dict())))
    assert back.to_dict() == c.to_dict()


def test_cli_gamma_constant(capsys):
    assert main(["gamma", "--spec", CONST_JSON, "--n", "50", "--reps", "2000", "--seed", "3", "--workers", "1"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["gamma"] == 0.0
    assert summary["mc_pos_within"] and summary["mc_neg_within"]
    assert abs(summary["dp_pos"]) < 1e-10


def test_cli_toth(capsys, tmp_path):
    out = tmp_path / "toth"
    assert main(["toth", "--spec", PL_JSON, "--out", str(out), "--workers", "1"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["max_gap"] < 1e-8 and summary["passed"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["experiment"] == "toth"
    assert set(manifest["files"]) == {"result.csv", "summary.json"}
    assert "wall_time_s" in manifest["runtime"]
    assert WeightSpec.from_dict(manifest["config"]["spec"]) == PL


def test_spec_from_file(tmp_path, capsys):
    f = tmp_path / "spec.json"
    f.write_text(CONST_JSON)
    assert main(["qv", "--spec", str(f), "--n", "100", "--reps", "3", "--workers", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["median_qv"] == 0.0


def test_invalid_spec_exit_code(capsys):
    assert main(["qv", "--spec", '{"family": "power_law", "p": 0.5, "B": -1}']) == 2
    assert "error" in capsys.readouterr().err


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["qv", "--spec", PL_JSON, "--n", "10", "--reps", "2", "--out", str(blocker / "sub")]) == 2
    assert "not writable" in capsys.readouterr().err


def test_threshold_override(capsys):
    assert main(["toth", "--spec", CONST_JSON, "--dp-gap", "1e-30", "--param", "ms=[1]",
                 "--param", "lambdas=[0.25]"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["cells"] == 3
    assert THRESHOLDS.dp_gap == 1e-8


def test_json_format(tmp_path):
    res = run_experiment(cfg("qv", out=str(tmp_path), format="json"))
    body = json.loads((tmp_path / "result.json").read_text())
    assert body["columns"] == ["replica", "qv"] and len(body["rows"]) == 20
    assert res.summary == body["summary"]


def test_rerun_byte_identical(tmp_path):
    for name in ("a", "b"):
        run_experiment(cfg("driftrange", n=2000, reps=30, out=str(tmp_path / name)))
    for f in ("result.csv", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    for m in (ma, mb):
        m.pop("runtime")
        m["config"].pop("out")
    assert ma == mb


def test_worker_count_invariance(tmp_path):
    for w in (1, 3):
        run_experiment(cfg("flt", n=500, reps=60, t=1.0, out=str(tmp_path / str(w)),
                           params={"dt": 0.01, "ref_reps": 200}), workers=w)
    for f in ("result.csv", "summary.json"):
        assert (tmp_path / "1" / f).read_bytes() == (tmp_path / "3" / f).read_bytes()


def test_worker_env(monkeypatch, tmp_path):
    monkeypatch.setenv("SIRW_WORKERS", "2")
    run_experiment(cfg("qv", out=str(tmp_path / "env")))
    run_experiment(cfg("qv", out=str(tmp_path / "one")), workers=1)
    assert (tmp_path / "env" / "result.csv").read_bytes() == (tmp_path / "one" / "result.csv").read_bytes()
    assert json.loads((tmp_path / "env" / "manifest.json").read_text())["runtime"]["workers"] == 2


def test_goodevent_vacuous_and_monotone():
    n = 1000
    res = run_experiment(cfg("goodevent", n=n, reps=100, t=1.0, params={"K": [1, 2, 4, 8, n]}))
    freq = res.summary["frequencies"]
    assert freq[str(n)] == [1.0, 1.0, 1.0, 1.0]
    for clause in (0, 1):
        seq = [freq[str(K)][clause] for K in (1, 2, 4, 8, n)]
        assert all(a <= b for a, b in zip(seq, seq[1:]))
    for vals in freq.values():
        assert all(0.0 <= v <= 1.0 for v in vals)


def test_good_event_flags_nested_per_path():
    rng = np.random.default_rng(4)
    for _ in range(50):
        tr = run(PL, 1000, rng)
        flags = good_event_flags(tr.positions, 1000, [1, 2, 4, 8])
        for c in (0, 1):
            col = [f[c] for f in flags]
            assert all(a <= b for a, b in zip(col, col[1:]))


@pytest.mark.parametrize("n", [1000, 10000])
def test_goodevent_extrema_typical(n):
    res = run_experiment(cfg("goodevent", n=n, reps=300, params={"K": [10]}))
    assert res.summary["frequencies"]["10"][0] > 0.99


def test_lipschitz_constant_zero():
    res = run_experiment(cfg("lipschitz", spec=CONSTANT, reps=20, params={"ns": [200, 400]}))
    assert all(v == 0.0 for v in res.summary["median_max_delta"].values())
    assert "exponent" not in res.summary


def test_lipschitz_empty_flag():
    res = run_experiment(cfg("lipschitz", reps=5, params={"ns": [200, 400], "K": 1e-9}))
    assert res.summary["empty"]


def test_fit_exponent_exact():
    ns = [10.0, 100.0, 1000.0]
    assert fit_exponent(ns, [n**0.3 for n in ns]) == pytest.approx(0.3, abs=1e-12)
    assert fit_exponent(ns, [n**-0.1 * np.log(n) ** 4 for n in ns], 4) == pytest.approx(-0.1, abs=1e-12)


def test_urnlaw_small():
    res = run_experiment(cfg("urnlaw", spec=CONSTANT, reps=2000, params={"x": 2, "m": 3}))
    assert res.summary["walks"] == 2000
    assert 0.0 <= res.summary["min_p_adjusted"] <= 1.0


def test_rayknight_cli(capsys):
    assert main(["rayknight", "--spec", CONST_JSON, "--n", "200", "--reps", "2000", "--t", "0.25",
                 "--param", "ref_reps=20000", "--workers", "1"]) == 0
    s = json.loads(capsys.readouterr().out)
    assert s["ks"] < 0.06 and s["reference"] == "exact"
