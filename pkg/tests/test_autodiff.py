import math

import numpy as np
import pytest

from holovae import autodiff as ad
from holovae.exceptions import NumericError, ShapeError, ValidationError
from holovae.so3 import Rotation, default_cg_cache
from holovae.steerable import Signature, SteerableTensor, split_blocks

from helpers import CASES, model_gradient_errors, primitive_gradient_error, tiny_config


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_vjp_matches_finite_differences(name):
    assert primitive_gradient_error(name) < 1e-4


def test_add_gives_unit_gradients():
    tape = ad.Tape()
    x, y = tape.leaf(2.0), tape.leaf(-1.0)
    g = tape.backward(x + y)
    assert float(g[x]) == 1.0 and float(g[y]) == 1.0


def test_sum_of_squares(rng):
    v = rng.normal(size=7)
    tape = ad.Tape()
    x = tape.leaf(v)
    np.testing.assert_allclose(tape.backward(ad.sum_(x * x))[x], 2 * v)


def test_non_scalar_loss():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ValidationError):
        tape.backward(x * 2.0)


def test_shape_mismatch_and_unknown_op():
    tape = ad.Tape()
    a, b = tape.leaf(np.ones(3)), tape.leaf(np.ones(4))
    with pytest.raises(ShapeError):
        a + b
    with pytest.raises(ValidationError):
        tape.record("nope", a)


def test_plain_arrays_bypass_the_tape():
    out = ad.einsum("i,i->", np.ones(3), np.arange(3.0))
    assert not isinstance(out, ad.Var) and float(out) == 3.0


def test_constants_get_no_gradient():
    tape = ad.Tape()
    x = tape.leaf(np.ones(2))
    c = tape.leaf(np.full(2, 3.0), requires_grad=False)
    g = tape.backward(ad.sum_(x * c))
    assert c not in g
    np.testing.assert_array_equal(g[x], [3.0, 3.0])


def test_recording_is_deterministic(rng):
    v = rng.normal(size=(3, 3))

    def program():
        tape = ad.Tape()
        x = tape.leaf(v)
        loss = ad.sum_(ad.exp(ad.einsum("ij,jk->ik", x, x)))
        return tape, loss

    (t1, l1), (t2, l2) = program(), program()
    assert [n.op for n in t1.nodes] == [n.op for n in t2.nodes]
    assert [n.inputs for n in t1.nodes] == [n.inputs for n in t2.nodes]
    assert float(l1.value) == float(l2.value)
    assert all(n.inputs == () or max(r for r in n.inputs if r is not None) < i for i, n in enumerate(t1.nodes))


def test_tiny_model_gradients():
    errors = model_gradient_errors(tiny_config())
    assert max(errors.values()) < 1e-4, errors


# ---- losses built from taped ops ---------------------------------------------

SIG = Signature.parse("2x0 + 2x1 + 1x2")


def taped_dot(x, y, cache):
    acc = 0.0
    for l in x:
        acc = acc + ad.einsum("ca,cb,ab->", x[l], y[l], cache[(l, l, 0)][:, :, 0])
    return acc


def taped_cosine(x, y, cache):
    return 1.0 - taped_dot(x, y, cache) / ad.sqrt(taped_dot(x, x, cache) * taped_dot(y, y, cache))


def taped_mse(x, y):
    acc = 0.0
    for l in x:
        d = x[l] - y[l]
        acc = acc + ad.sum_(d * d)
    return acc * (1.0 / SIG.size)


def grad_wrt_x(loss_fn, xv, yv):
    tape = ad.Tape()
    x = tape.leaf(xv)
    blocks = {l: ad.reshape(x[SIG.offsets[l]], (c, 2 * l + 1)) for l, c in SIG}
    yb = split_blocks(yv, SIG)
    return tape.backward(loss_fn(blocks, yb))[x]


def test_cosine_stationary_at_match(rng):
    cache = default_cg_cache(2)
    v = rng.normal(size=SIG.size)
    g = grad_wrt_x(lambda a, b: taped_cosine(a, b, cache), v, v)
    assert np.abs(g).max() < 1e-12


@pytest.mark.parametrize("which", ["mse", "cosine"])
def test_gradients_are_equivariant(rng, which):
    cache = default_cg_cache(2)
    fn = taped_mse if which == "mse" else (lambda a, b: taped_cosine(a, b, cache))
    for _ in range(10):
        x, y = SteerableTensor.random(SIG, rng), SteerableTensor.random(SIG, rng)
        R = Rotation.random(rng)
        g = grad_wrt_x(fn, x.data, y.data)
        g_rot = grad_wrt_x(fn, x.rotate(R).data, y.rotate(R).data)
        np.testing.assert_allclose(g_rot, SteerableTensor(SIG, g).rotate(R).data, atol=1e-8)


# ---- optimizer ----------------------------------------------------------------


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    new, state = ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState.zeros_like(p), lr=0.1)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert state.t == 1


def test_adam_first_step_is_signed_lr(rng):
    g = rng.normal(size=10)
    p = {"w": np.zeros(10)}
    new, _ = ad.adam_step(p, {"w": g}, ad.AdamState.zeros_like(p), lr=0.01)
    np.testing.assert_allclose(new["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(new["w"], -0.01 * np.sign(g), rtol=1e-6)


def test_adam_rejects_non_finite():
    p = {"w": np.zeros(2)}
    with pytest.raises(NumericError, match="'w'"):
        ad.adam_step(p, {"w": np.array([1.0, math.nan])}, ad.AdamState.zeros_like(p), lr=0.1)


def test_adam_is_deterministic(rng):
    target = rng.normal(size=5)

    def run():
        p = {"w": np.zeros(5)}
        state = ad.AdamState.zeros_like(p)
        for _ in range(30):
            p, state = ad.adam_step(p, {"w": 2 * (p["w"] - target)}, state, lr=0.05)
        return p["w"]

    assert run().tobytes() == run().tobytes()


def test_exponential_lr():
    assert ad.exponential_lr(0, 1e-3, 1.0, 25) == 1e-3
    assert ad.exponential_lr(25, 1e-3, 1.0, 25) == pytest.approx(1e-4)
    assert ad.exponential_lr(50, 1e-3, 1.0, 25) == pytest.approx(1e-5)
