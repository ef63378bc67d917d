import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from qwt import compensation
from qwt.compensation import (CompensationModule, compute_r2, gate, insert_sequential, round_fp16, solve_blockdiagonal,
                              solve_dense, solve_module, to_storage_precision)
from qwt.errors import ConfigError, ShapeError, SingularSystemError, StateError
from qwt.netgraph import CalibrationCapture, Mode, capture_block, forward
from qwt.pipeline import quantize_model
from qwt.quantizer import QuantScheme

from conftest import SMALL_ARCHS
from oracles import lstsq_gd


def cap_from_residual(Xz, R, Yz=None):
    Yz = np.zeros_like(R) if Yz is None else Yz
    return CalibrationCapture(0, np.asarray(Xz, float), Yz + R, Yz)


def random_capture(r, d_in, d_out, n):
    Xz = r.standard_normal((d_in, n))
    Yz = r.standard_normal((d_out, n))
    Y = Yz + r.standard_normal((d_out, d_in)) @ Xz + 0.3 * r.standard_normal((d_out, n)) + 0.5
    return CalibrationCapture(0, Xz, Y, Yz)


# -- dense solve --------------------------------------------------------------

def test_exact_linear_residual():
    W, b, r2 = solve_dense(cap_from_residual([[1.0, 2.0, 3.0]], np.array([[2.0, 4.0, 6.0]])))
    assert W[0, 0] == pytest.approx(2.0, abs=1e-12) and b[0] == pytest.approx(0.0, abs=1e-12)
    assert r2 == pytest.approx(1.0, abs=1e-12)


def test_two_point_hand_solve():
    # normal equations [[2, 0], [0, 2]] [w, b] = [-1, 3]
    W, b, _ = solve_dense(cap_from_residual([[1.0, -1.0]], np.array([[1.0, 2.0]])))
    assert W[0, 0] == pytest.approx(-0.5, abs=1e-12) and b[0] == pytest.approx(1.5, abs=1e-12)


def test_small_instance_matches_gd_oracle(rng):
    cap = random_capture(rng, 3, 2, 50)
    W, b, _ = solve_dense(cap)
    Wg, bg, gn = lstsq_gd(cap.Xz, cap.Y - cap.Yz)
    assert gn < 1e-10
    np.testing.assert_allclose(W, Wg, atol=1e-4)
    np.testing.assert_allclose(b, bg, atol=1e-4)


@settings(max_examples=30)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**31))
def test_least_squares_never_worse_than_zero(d_in, d_out, seed):
    r = np.random.default_rng(seed)
    cap = random_capture(r, d_in, d_out, r.integers(d_in + 2, 120))
    W, b, r2 = solve_dense(cap)
    R = cap.Y - cap.Yz
    assert np.sum((R - W @ cap.Xz - b[:, None]) ** 2) <= np.sum(R ** 2) * (1 + 1e-12)
    assert r2 <= 1.0


def test_underdetermined_warns_but_solves(rng, caplog):
    cap = random_capture(rng, 10, 2, 5)
    W, b, r2 = solve_dense(cap)
    assert "calibration columns" in caplog.text
    assert np.all(np.isfinite(W)) and r2 <= 1.0


def test_singular_gram_gives_gated_zero(monkeypatch, rng):
    def boom(a, rhs):
        raise SingularSystemError("forced")

    monkeypatch.setattr(compensation.tensor_core, "spd_solve", boom)
    cap = random_capture(rng, 3, 2, 20)
    W, b, r2 = solve_dense(cap)
    assert not W.any() and not b.any() and r2 == -math.inf
    solved, stored = solve_module(cap)
    assert solved.gated and stored.is_zero()


def test_sample_order_invariance(rng):
    cap = random_capture(rng, 6, 4, 80)
    perm = rng.permutation(80)
    capp = CalibrationCapture(0, cap.Xz[:, perm], cap.Y[:, perm], cap.Yz[:, perm])
    W1, b1, _ = solve_dense(cap)
    W2, b2, _ = solve_dense(capp)
    np.testing.assert_allclose(W1, W2, atol=1e-9)
    np.testing.assert_allclose(b1, b2, atol=1e-9)


# -- R^2 ----------------------------------------------------------------------

def test_r2_examples(rng):
    Y = rng.standard_normal((3, 20))
    assert compute_r2(Y, Y) == 1.0
    means = np.repeat(Y.mean(axis=1, keepdims=True), 20, axis=1)
    assert compute_r2(Y, means) == pytest.approx(0.0, abs=1e-12)


def test_r2_negative_for_offset_prediction():
    Y = np.array([[0.0, 1.0, 2.0, 3.0]])
    Yz = Y + 10.0
    # SST = 5, SSE = 4 * 100
    assert compute_r2(Y, Yz) == pytest.approx(1 - 400 / 5)


def test_r2_constant_targets():
    Y = np.ones((2, 3))
    assert compute_r2(Y, Y) == 1.0
    assert compute_r2(Y, Y + 1e-3) == -math.inf


def test_r2_shape_mismatch():
    with pytest.raises(ShapeError):
        compute_r2(np.ones((2, 3)), np.ones((3, 2)))


@given(st.integers(0, 2**31))
def test_r2_one_iff_exact(seed):
    r = np.random.default_rng(seed)
    Y = r.standard_normal((2, 10))
    assert compute_r2(Y, Y + 1e-6 * r.standard_normal(Y.shape)) < 1.0


# -- gating -------------------------------------------------------------------

@pytest.mark.parametrize("r2,gated", [(-0.2, True), (0.0, True), (0.9, False)])
def test_gate_strict(r2, gated, rng):
    m = CompensationModule(rng.standard_normal((3, 3)), rng.standard_normal(3))
    g = gate(m, r2)
    assert g.gated is gated
    assert g.is_zero() is gated
    assert g.r2 == r2


def test_gated_module_must_be_zero():
    m = CompensationModule.zeros(4, 4, r2=-1.0)
    assert m.gated and m.is_zero()


# -- block-diagonal -----------------------------------------------------------

def test_single_group_equals_dense(rng):
    cap = random_capture(rng, 8, 8, 60)
    Wd, bd, rd = solve_dense(cap)
    Wg, bg, rg = solve_blockdiagonal(cap, 8)
    np.testing.assert_allclose(Wg, Wd, atol=1e-10)
    np.testing.assert_allclose(bg, bd, atol=1e-10)
    assert rg == pytest.approx(rd, abs=1e-10)


def test_two_groups_hand_solve(rng):
    x = rng.standard_normal((2, 30))
    R = np.vstack([2 * x[0], -3 * x[1]])
    W, b, r2 = solve_blockdiagonal(cap_from_residual(x, R), 1)
    np.testing.assert_allclose(W, np.diag([2.0, -3.0]), atol=1e-10)
    np.testing.assert_allclose(b, 0, atol=1e-10)


def test_cross_group_residual_gives_zero_weights():
    # group inputs orthogonal and zero-mean, residual of each group driven by the other group's input
    t = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    x = np.vstack([np.sin(t), np.cos(t), np.sin(2 * t), np.cos(2 * t)])
    R = np.vstack([x[2], x[3], x[0], x[1]])
    cap = cap_from_residual(x, R)
    W, b, _ = solve_blockdiagonal(cap, 2)
    mask = np.kron(np.eye(2), np.ones((2, 2)))
    Wg, bg, gn = lstsq_gd(cap.Xz, R, mask=mask)
    assert gn < 1e-10
    assert np.all(W[mask == 0] == 0)
    np.testing.assert_allclose(W, 0, atol=1e-10)
    np.testing.assert_allclose(W, Wg, atol=1e-4)


def test_blockdiagonal_errors(rng):
    with pytest.raises(ConfigError):
        solve_blockdiagonal(random_capture(rng, 8, 8, 30), 3)
    with pytest.raises(ConfigError):
        solve_blockdiagonal(random_capture(rng, 8, 4, 30), 4)
    with pytest.raises(ConfigError):
        CompensationModule(np.zeros((6, 6)), np.zeros(6), structure="block_diagonal", group_size=4)


def test_blockdiagonal_param_count():
    m = CompensationModule.zeros(128, 128, "block_diagonal", 64)
    assert m.n_params == 128 * 64 + 128
    assert CompensationModule.zeros(768, 768).n_params == 768 * 768 + 768


# -- storage precision --------------------------------------------------------

def test_fp16_rounding_examples():
    assert round_fp16(np.array([0.5]))[0] == 0.5
    assert round_fp16(np.array([1.0 + 2.0**-12]))[0] == 1.0
    assert round_fp16(np.array([1e6, -1e6])).tolist() == [65504.0, -65504.0]
    # ties to even: 1 + 2^-11 sits halfway between 1 and 1 + 2^-10
    assert round_fp16(np.array([1.0 + 2.0**-11]))[0] == 1.0


@given(st.floats(6.2e-5, 65000) | st.floats(-65000, -6.2e-5))
def test_fp16_relative_error(v):
    assert abs(round_fp16(np.array([v]))[0] - v) <= 2.0**-11 * abs(v)


def test_storage_precision_keeps_flags(rng):
    m = CompensationModule(rng.standard_normal((4, 4)), rng.standard_normal(4), False, 0.5)
    s = to_storage_precision(m)
    assert s.r2 == 0.5 and not s.gated
    assert np.array_equal(s.weight, s.weight.astype(np.float16).astype(np.float64))


# -- sequential insertion -----------------------------------------------------

@pytest.mark.parametrize("arch", list(SMALL_ARCHS))
def test_insert_sequential_per_block_optimality(arch, quantized_small, small_data):
    calib = small_data.x_train[:128]
    structure = "block_diagonal" if arch == "conv1x1_resnet" else "dense"
    net, rep = insert_sequential(quantized_small[arch].clone(), calib, structure, group_size=8)
    assert net.state is Mode.QUANT_QWT
    assert len(rep.blocks) == net.depth
    for b in rep.blocks:
        assert b.mse_after <= b.mse_before
    for m in net.compensation:
        assert np.array_equal(m.weight, round_fp16(m.weight))
        if structure == "block_diagonal":
            mask = np.kron(np.eye(2), np.ones((8, 8)))
            assert np.all(m.weight[mask == 0] == 0)


def test_insert_sequential_uses_earlier_modules(quantized_small, small_data):
    """The capture for block i sees the rounded module already attached to block i-1."""
    calib = small_data.x_train[:128]
    net, _ = insert_sequential(quantized_small["mlp"].clone(), calib)
    cap = capture_block(net, calib, 1)
    solved, stored = solve_module(cap)
    np.testing.assert_array_equal(stored.weight, net.compensation[1].weight)


def test_insert_without_quantization_is_noop(trained_small, small_data):
    calib = small_data.x_train[:64]
    q = quantize_model(trained_small["mlp"], QuantScheme(32, 32), calib)
    net, rep = insert_sequential(q.clone(), calib)
    x = small_data.x_test[:50]
    assert all(m.gated or m.is_zero() for m in net.compensation)
    assert torch.equal(forward(net, x, Mode.QUANT_QWT).logits, forward(q, x, Mode.QUANT).logits)


def test_insert_requires_quant_state(trained_small, small_data):
    with pytest.raises(StateError):
        insert_sequential(trained_small["mlp"], small_data.x_train[:8])


def test_insert_fp_model_target(quantized_small, small_data):
    net, rep = insert_sequential(quantized_small["mlp"].clone(), small_data.x_train[:128], target="fp_model")
    assert all(b.mse_after <= b.mse_before for b in rep.blocks)
    with pytest.raises(ConfigError):
        insert_sequential(quantized_small["mlp"].clone(), small_data.x_train[:8], target="teacher")
