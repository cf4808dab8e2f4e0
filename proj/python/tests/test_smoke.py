import math

import pytest

import cover_decode as cd

TOY = {"V": 8, "order": 1, "L": 4, "head_tokens": [0, 1, 2], "tail_tokens": [3, 4, 5, 6, 7],
       "tail_mass": 0.15, "noise": 0.5, "seed": 12, "terminator": 0}


def test_quantile_convention():
    values = [float(i) for i in range(1, 101)]
    assert cd.quantile(0.1, values) == 10.0
    assert math.isinf(cd.quantile(0.5, []))
    assert cd.split_cp_threshold(values, 0.1) == 10.0


def test_pac_helpers():
    assert cd.empirical_bernstein(0.0, 0.0, 100, 0.05) == pytest.approx(3 * math.log(60) / 100)
    assert cd.hoeffding_upper(0.99, 2, 0.05) == 1.0
    assert cd.beta_quantile(0.3, 1.0, 1.0) == pytest.approx(0.3, abs=1e-9)


def test_pipeline():
    cal = cd.simulate(TOY, 1500, seed=1)
    ev = [dict(t, id="e" + t["id"]) for t in cd.simulate(TOY, 600, seed=2)]
    assert len(cal) == 1500
    assert all(len(t["tokens"]) == len(t["prefix_scores"]) for t in cal)

    model = cd.calibrate(cal, alpha=0.1, clusters=2, budget=200, seed=3)
    assert model["kind"] == "cover"
    again = cd.calibrate(cal, alpha=0.1, clusters=2, budget=200, seed=3)
    assert again == model

    report = cd.evaluate(model, ev, tail_tokens=TOY["tail_tokens"], ar_model=cd.longtail_model(TOY))
    assert 0.0 <= report["coverage"] <= 1.0
    assert report["coverage"] >= 0.9 - 3 * math.sqrt(0.09 / 600)
    assert report["expanded_nodes"] > 0

    dcbs = cd.dcbs_calibrate(cal, alpha=0.05)
    assert dcbs["kind"] == "dcbs"
    assert 0.0 < cd.evaluate(dcbs, ev)["coverage"] <= 1.0

    b = cd.bounds(model, ev)
    assert b["aggregate"] >= b["base"]
    assert b["aggregate_clipped"] <= 1.0


def test_run_experiment_is_deterministic():
    cfg = {"method": "dcbs", "model": TOY, "n_cal": 500, "n_eval": 300, "alpha": 0.1, "seed": 4}
    a = cd.run_experiment(cfg)
    b = cd.run_experiment(cfg)
    a.pop("runtime_seconds", None)
    b.pop("runtime_seconds", None)
    assert a == b
    assert a["method"] == "dcbs"


def test_errors():
    with pytest.raises(cd.ValidationError):
        cd.quantile(0.5, [1.0, float("nan")])
    cal = cd.simulate(TOY, 300, seed=1)
    with pytest.raises(cd.InfeasibleError):
        cd.calibrate(cal, alpha=1e-5, clusters=2, budget=10)
    with pytest.raises(cd.ValidationError):
        cd.evaluate({"kind": "nope"}, cal)
    assert issubclass(cd.ValidationError, cd.CoverError)
