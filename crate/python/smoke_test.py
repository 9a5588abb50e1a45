"""Smoke test for the asymoe Python bindings.

Build and install first:

    pip install maturin
    pip install --no-build-isolation ./crates/py
    python3 python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import asymoe

SMALL = [
    "model.d_model=16",
    "model.n_layers=2",
    "asymoe.d_ff=16",
    "train.steps=4",
    "train.batch_size=4",
    "train.eval_interval=2",
    "data.n_train=16",
    "data.n_eval=8",
]


def check_hyperbolic():
    v = [0.3, -1.2, 2.0]
    x = asymoe.exp_map_origin(v)
    assert len(x) == 4
    assert abs(-x[0] ** 2 + sum(c * c for c in x[1:]) + 1.0) < 1e-9
    back = asymoe.log_map_origin(x)
    assert all(abs(a - b) < 1e-9 for a, b in zip(v, back))
    origin = [1.0, 0.0, 0.0, 0.0]
    norm = math.sqrt(sum(c * c for c in v))
    assert abs(asymoe.distance(origin, x) - norm) < 1e-9


def check_errors():
    try:
        asymoe.Model(overrides=["model.depth=3"])
    except ValueError as e:
        assert "model.depth" in str(e)
    else:
        raise AssertionError("unknown key accepted")


def check_train_eval(tmp: Path):
    model = asymoe.Model(overrides=SMALL)
    assert model.num_parameters > 0
    report = model.train()
    assert len(report["steps"]) == 4
    data = tmp / "data"
    paths = asymoe.generate_data(str(data), config=model.config)
    assert len(paths) == 3
    ck = tmp / "ck.json"
    model.save(str(ck))
    loaded = asymoe.Model.load(str(ck))
    assert loaded.evaluate(str(data)) == model.evaluate(str(data))
    for split, r in report["final_eval"].items():
        assert loaded.evaluate(str(data))[split] == r


def check_grad():
    r = asymoe.grad_check(overrides=SMALL)
    assert r["passed"], r["worst_rel_err"]


def main():
    print(asymoe.default_config().splitlines()[0])
    check_hyperbolic()
    check_errors()
    with tempfile.TemporaryDirectory() as tmp:
        check_train_eval(Path(tmp))
    check_grad()
    print("smoke test passed")


if __name__ == "__main__":
    main()
