"""Smoke test for the `btm` Python extension.

Build and install first, e.g. `maturin develop --release -m crates/py/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import json
import math
import pathlib
import tempfile

import btm

ROOT = pathlib.Path(__file__).resolve().parents[1]


def check_metrics():
    x = [0.1, 0.9]
    assert abs(btm.generalized_mean(x, 1.0) - 0.5) < 1e-12
    assert abs(btm.geometric_mean(x) - 0.3) < 1e-12
    assert abs(btm.harmonic_mean(x) - 0.18) < 1e-12
    assert btm.generalized_mean(x, -math.inf) == 0.1
    assert btm.per_class_recall([0, 1, 1, 2], [0, 1, 2, 2], 3) == [1.0, 1.0, 0.5]
    clean, substituted = btm.sanitize_recalls([0.0, 0.5])
    assert clean == [btm.DEFAULT_RECALL_FLOOR, 0.5] and substituted
    try:
        btm.harmonic_mean([0.0, 1.0])
    except ValueError as e:
        assert "sanitize" in str(e)
    else:
        raise AssertionError("zero recall accepted")
    counts = btm.pareto_longtail_counts(20, 500, 100.0)
    assert counts[0] == 500 and counts[-1] == 5


def check_pipeline():
    train, test = btm.Dataset.synthetic(classes=5, dim=4, max_count=60, imbalance_ratio=10.0, test_per_class=20, seed=3)
    assert train.class_counts[0] == 60 and len(test) == 100
    plan = json.loads((ROOT / "configs" / "quick.json").read_text())["plan"]
    out = btm.run_experiment(train, test, seed=3, plan=json.dumps(plan))
    ckpts = out["checkpoints"]
    record = out["record"]
    assert out["summary_csv"].startswith("name,arm,stage_tag,hash,h_mean")
    assert record["merged"]["hash"] == ckpts["btm_merge"].hash

    a, b = ckpts["btm_ft_00"], ckpts["btm_ft_01"]
    assert btm.interpolate(a, b, 1.0).params == a.params
    assert btm.interpolate(a, b, 0.0).params == b.params
    curve = btm.lambda_sweep(a, b, test, grid=5)
    assert [lam for lam, _ in curve] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert curve[-1][1] == btm.evaluate(a, test)

    avg = btm.average_merge([a, b])
    assert avg.parent_hash == a.hash
    report = avg.evaluate(test)
    assert list(report)[:3] == ["h_mean", "g_mean", "a_mean"]
    assert report["h_mean"] <= report["g_mean"] <= report["a_mean"] + 1e-12

    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "avg.ckpt"
        avg.save(path)
        assert btm.Checkpoint.load(path).hash == avg.hash
        dpath = pathlib.Path(d) / "test.btmd"
        test.save(dpath)
        assert btm.Dataset.load(dpath).features == test.features


def check_schema():
    try:
        import jsonschema
    except ImportError:
        return
    schema = json.loads((ROOT / "configs" / "run_config.schema.json").read_text())
    for name in ("default.json", "quick.json"):
        jsonschema.validate(json.loads((ROOT / "configs" / name).read_text()), schema)


if __name__ == "__main__":
    check_metrics()
    check_pipeline()
    check_schema()
    print("smoke test ok")
