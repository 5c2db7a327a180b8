import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tailsink import LossSpec, load_instance, random_problem, save_instance, surrogate_gradient
from tailsink.problem import rng


def test_instances_are_reproducible_from_seed():
    a, b = random_problem(16, 3, seed=42), random_problem(16, 3, seed=42)
    np.testing.assert_array_equal(a.Q, b.Q)
    np.testing.assert_array_equal(a.loss.weight, b.loss.weight)
    assert not np.array_equal(a.Q, random_problem(16, 3, seed=43).Q)


def test_generator_draw_order():
    g = rng(5)
    Q = g.standard_normal((8, 4))
    K = g.standard_normal((8, 4))
    V = g.standard_normal((8, 4))
    G = g.standard_normal((8, 4))
    p = random_problem(8, 2, d=4, seed=5)
    for x, y in [(Q, p.Q), (K, p.K), (V, p.V), (G, p.loss.weight)]:
        np.testing.assert_array_equal(x, y)


def test_float32_instance_is_rounded_float64_instance():
    a, b = random_problem(10, 2, seed=1), random_problem(10, 2, seed=1, dtype="float32")
    np.testing.assert_array_equal(a.Q.astype(np.float32), b.Q)


@pytest.mark.parametrize("loss", ["linear", "frobenius", "supervised"])
@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_instance_roundtrip(tmp_path, loss, dtype):
    rows = np.ones(20, bool)
    rows[4] = False
    p = random_problem(20, 4, d=4, T=5, R=2, seed=3, loss=loss, dtype=dtype, block=8,
                       schedule=[(2.0, 2), (1.0, 3)], row_mask=rows)
    path = save_instance(p, tmp_path / "inst.json")
    header = json.loads(path.read_text())
    assert header["format"] == "tailsink-instance" and header["version"] == 1
    assert (tmp_path / "inst.bin").exists()
    q = load_instance(path)
    for k in ("Q", "K", "V"):
        np.testing.assert_array_equal(getattr(p, k), getattr(q, k))
        assert getattr(q, k).dtype == np.dtype(dtype)
    np.testing.assert_array_equal(p.support.dense(), q.support.dense())
    assert (q.T, q.R, q.epsilon, q.schedule, q.seed) == (p.T, p.R, p.epsilon, p.schedule, p.seed)
    np.testing.assert_array_equal(surrogate_gradient(p).Q, surrogate_gradient(q).Q)


def test_bad_instance_header(tmp_path):
    f = tmp_path / "x.json"
    f.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        load_instance(f)


def test_loss_requires_its_field():
    with pytest.raises(ValueError):
        LossSpec("frobenius")
    with pytest.raises(ValueError):
        LossSpec("hinge", weight=np.ones(1))


@given(n=st.integers(1, 6), d=st.integers(1, 4), seed=st.integers(0, 1000))
def test_loss_gradients_match_differences(n, d, seed):
    g = np.random.default_rng(seed)
    O, V = g.standard_normal((n, d)), g.standard_normal((n + 1, d))
    cols = g.integers(-1, n + 1, size=n)
    for spec in (LossSpec.linear(g.standard_normal((n, d))), LossSpec.frobenius(g.standard_normal((n, d))),
                 LossSpec.supervised(cols)):
        _, G, Vd = spec.value_and_grad(O, V)
        h = 1e-6
        for idx in np.ndindex(O.shape):
            e = np.zeros_like(O)
            e[idx] = h
            fd = (spec.value_and_grad(O + e, V)[0] - spec.value_and_grad(O - e, V)[0]) / (2 * h)
            assert abs(fd - G[idx]) <= 1e-6
        if Vd is not None:
            for idx in np.ndindex(V.shape):
                e = np.zeros_like(V)
                e[idx] = h
                fd = (spec.value_and_grad(O, V + e)[0] - spec.value_and_grad(O, V - e)[0]) / (2 * h)
                assert abs(fd - Vd[idx]) <= 1e-6


def test_supervised_loss_skips_unannotated_rows():
    O = np.ones((3, 2))
    V = np.zeros((3, 2))
    value, G, _ = LossSpec.supervised([0, -1, 2]).value_and_grad(O, V)
    assert value == pytest.approx(1.0)
    assert not G[1].any()


def test_with_depth_drops_mismatched_schedule():
    p = random_problem(12, 2, T=4, R=2, seed=0, schedule=[(2.0, 2), (1.0, 2)])
    assert p.with_depth(R=3).schedule is p.schedule
    assert p.with_depth(T=6).schedule is None
