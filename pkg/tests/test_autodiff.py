import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panoground.autodiff import (
    Adam,
    AutodiffError,
    CheckpointError,
    MemoryTracker,
    NumericFault,
    ShapeError,
    Tensor,
    backward,
    corrupt_adjoint,
    grad_check,
    load_checkpoint,
    no_grad,
    ops,
    save_checkpoint,
    tape,
)
from panoground.checks import PRIMITIVES, primitive_gradcheck, primitive_inputs

from .helpers import fd_grad, rel_err


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    fn = PRIMITIVES[name][0]
    inputs = primitive_inputs(name, seed=3)
    probe = np.random.default_rng(7).normal(size=fn(*inputs).shape)
    backward(ops.sum(fn(*inputs) * probe))
    for t in inputs:
        with no_grad():
            numeric = fd_grad(lambda: float((fn(*inputs).data * probe).sum()), t.data)
        assert rel_err(t.grad, numeric) < 1e-6


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_library_gradcheck_agrees(name):
    report = primitive_gradcheck(name)
    assert report.passed, report.lines()


def test_gradcheck_catches_corrupted_adjoint():
    x = Tensor(np.linspace(-1, 1, 6), requires_grad=True)

    def build():
        with corrupt_adjoint("tanh", 1.01):
            return ops.sum(ops.tanh(x) * 2.0)

    report = grad_check(build, {"x": x}, h=1e-5, tol=1e-4)
    assert not report.passed
    assert report.worst == pytest.approx(0.01 / 1.01, rel=1e-3)


def test_gradcheck_restores_parameters():
    x = Tensor(np.arange(4, dtype=np.float32), requires_grad=True)
    grad_check(lambda: ops.sum(x * x), {"x": x})
    assert x.dtype == np.float32
    np.testing.assert_array_equal(x.data, np.arange(4))
    np.testing.assert_array_equal(x.grad, 0)


def test_fan_out_accumulates():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = x * x + x * 3.0 + x
    backward(ops.sum(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 4.0)


def test_grad_accumulates_across_backward_calls():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    backward(ops.sum(x * 2.0))
    backward(ops.sum(x * 3.0))
    np.testing.assert_allclose(x.grad, [5.0, 5.0])


def test_tape_order_visits_consumers_first():
    x = Tensor(np.ones(3), requires_grad=True)
    a = ops.tanh(x)
    b = a * 2.0
    c = ops.sum(b + a)
    ids = [n._id for n in tape(c)]
    assert ids == sorted(ids, reverse=True)
    assert ids[0] == c._id


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(AutodiffError):
        backward(x * 2.0)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert exc.value.op == "matmul"
    assert (2, 3) in exc.value.shapes


def test_numeric_fault_on_log_of_zero():
    with np.errstate(divide="ignore"):
        with pytest.raises(NumericFault) as exc:
            ops.log(Tensor(np.array([1.0, 0.0])))
    assert exc.value.op == "log"


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._backward is None


def test_numpy_left_operand_stays_in_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    y = np.array([1.0, 2.0, 3.0]) * x
    assert isinstance(y, Tensor)
    backward(ops.sum(y))
    np.testing.assert_allclose(x.grad, [1.0, 2.0, 3.0])


def test_python_scalars_do_not_promote_float32():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = 0.8 * x - 1e-6
    assert y.dtype == np.float32


def test_softmax_is_shift_invariant():
    z = np.array([[1.0, 2.0, 3.0]])
    a = ops.softmax(Tensor(z)).data
    b = ops.softmax(Tensor(z + 1000.0)).data
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_sigmoid_stable_at_extremes():
    out = ops.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_log_softmax_normalises(vals):
    lp = ops.log_softmax(Tensor(np.array(vals))).data
    assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-12)


def test_conv_wrap_is_shift_equivariant(rng):
    x = rng.normal(size=(1, 8, 16, 2))
    w = Tensor(rng.normal(size=(3, 3, 2, 3)))
    out = ops.conv2d(Tensor(x), w, stride=2, pad=1, wrap_width=True).data
    out_shifted = ops.conv2d(Tensor(np.roll(x, -4, axis=2)), w, stride=2, pad=1, wrap_width=True).data
    np.testing.assert_array_equal(np.roll(out, -2, axis=2), out_shifted)


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(1, 5, 6, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 3, 3, 4))
    for i in range(3):
        for j in range(3):
            patch = xp[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            ref[0, i, j] = np.tensordot(patch, w, axes=([0, 1, 2], [0, 1, 2])) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


# -- Adam ------------------------------------------------------------------

def test_adam_first_step_closed_form():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    g = np.array([0.3, -0.1, 0.0])
    p.grad = g.copy()
    Adam({"p": p}, lr=1e-3).step()
    # m_hat = g, v_hat = g^2 after bias correction
    expected = np.array([1.0, -2.0, 0.5]) - 1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    np.testing.assert_array_equal(p.grad, 0)


def test_adam_two_steps_match_reference():
    p = Tensor(np.array([0.7]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    m = v = 0.0
    theta = 0.7
    for t, g in enumerate([0.5, -0.25], start=1):
        p.grad = np.array([g])
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert p.data[0] == pytest.approx(theta, rel=1e-12)


def test_adam_rejects_missing_gradient():
    p = Tensor(np.ones(2))
    with pytest.raises(AutodiffError):
        Adam({"p": p}).step()


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5), "c": np.arange(6).reshape(2, 3)}
    meta = {"epoch": 3, "note": "x"}
    save_checkpoint(tmp_path / "m.ckpt", tensors, meta)
    loaded, meta2 = load_checkpoint(tmp_path / "m.ckpt")
    assert meta2 == meta
    for k, v in tensors.items():
        assert loaded[k].dtype == v.dtype
        np.testing.assert_array_equal(loaded[k], v)
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_checkpoint_bytes_are_deterministic(tmp_path):
    t = {"z": np.ones(3, dtype=np.float32), "a": np.zeros(2)}
    save_checkpoint(tmp_path / "1.ckpt", t, {"k": 1})
    save_checkpoint(tmp_path / "2.ckpt", dict(reversed(list(t.items()))), {"k": 1})
    load1, _ = load_checkpoint(tmp_path / "1.ckpt")
    assert (tmp_path / "1.ckpt").read_bytes()[:4] == b"PGCK"
    assert set(load1) == {"z", "a"}


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"nope" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.ckpt", {"s": np.array(["a"])})


# -- memory accounting ---------------------------------------------------------

def test_memory_tracker_peak_and_release():
    tracker = MemoryTracker()
    with tracker.track():
        a = Tensor(np.zeros(1000, dtype=np.float32))
        b = Tensor(np.zeros(500, dtype=np.float32))
        assert tracker.current == 6000
        del a, b
    assert tracker.peak == 6000
    assert tracker.current == 0
