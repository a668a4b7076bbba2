from __future__ import annotations

import numpy as np
import pytest

from geofed.errors import DegenerateVectorError, EvaluationError, ShapeError
from geofed.numerics import (
    GradCheckReport,
    Matrix,
    Param,
    Tape,
    column_norms,
    cosine,
    grad_check,
    matmul,
    mean_pool,
)
from geofed.rng import Rng


def _loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Independent triple-loop oracle."""
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


# ---------------------------------------------------------------------------
# Matrix type
# ---------------------------------------------------------------------------


def test_matrix_data_is_row_major_flat():
    m = Matrix([[1.0, 2.0], [3.0, 4.0]])
    assert m.rows == 2 and m.cols == 2
    assert list(m.data) == [1.0, 2.0, 3.0, 4.0]
    assert len(m.data) == m.rows * m.cols


def test_matrix_rejects_non_finite():
    with pytest.raises(EvaluationError):
        Matrix([[1.0, float("nan")]])
    with pytest.raises(EvaluationError):
        Matrix([[float("inf")]])


def test_matrix_rejects_higher_rank():
    with pytest.raises(ShapeError):
        Matrix(np.zeros((2, 2, 2)))


def test_matrix_is_immutable():
    m = Matrix([[1.0, 2.0]])
    with pytest.raises(ValueError):
        m.array()[0, 0] = 5.0


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    m = Matrix([[1.5, -2.0], [0.25, 3.0]])
    assert matmul(Matrix.eye(2), m) == m


def test_matmul_hand_case():
    out = matmul(Matrix([[1.0, 2.0], [3.0, 4.0]]), Matrix([[0.0], [1.0]]))
    assert out.to_list() == [[2.0], [4.0]]
    oracle = _loop_matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    assert np.array_equal(out.array(), oracle)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match="2x3.*2x3"):
        matmul(Matrix(np.zeros((2, 3))), Matrix(np.zeros((2, 3))))


def test_matmul_matches_loop_oracle_random():
    rng = Rng(3, "mm")
    for _ in range(5):
        a, b = rng.normal(4, 6), rng.normal(6, 3)
        assert np.allclose(matmul(Matrix(a), Matrix(b)).array(), _loop_matmul(a, b), atol=1e-12)


def test_matmul_associativity():
    rng = Rng(11, "assoc")
    for _ in range(20):
        a = rng.uniform(3, 5) * 4 - 2
        b = rng.uniform(5, 4) * 4 - 2
        c = rng.uniform(4, 6) * 4 - 2
        left = matmul(matmul(Matrix(a), Matrix(b)), Matrix(c)).array()
        right = matmul(Matrix(a), matmul(Matrix(b), Matrix(c))).array()
        assert np.abs(left - right).max() < 1e-10


# ---------------------------------------------------------------------------
# cosine / column_norms / mean_pool
# ---------------------------------------------------------------------------


def test_cosine_self_similarity():
    rng = Rng(5, "cos")
    for _ in range(10):
        v = rng.normal(7)
        assert cosine(v, v) == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal_and_derived():
    assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine([1.0, 1.0], [1.0, 0.0]) == pytest.approx(np.sqrt(0.5), abs=1e-12)


def test_cosine_zero_norm_raises():
    with pytest.raises(DegenerateVectorError):
        cosine([0.0, 0.0], [1.0, 0.0])


def test_cosine_always_clamped():
    rng = Rng(9, "clamp")
    for _ in range(200):
        u, v = rng.normal(4), rng.normal(4)
        assert -1.0 <= cosine(u, v) <= 1.0


def test_column_norms_cases():
    assert np.array_equal(column_norms(Matrix.eye(3)), np.ones(3))
    assert column_norms(Matrix([[3.0], [4.0]]))[0] == 5.0
    assert np.array_equal(column_norms(Matrix.zeros(2, 2)), np.zeros(2))


def test_mean_pool_cases():
    row = np.array([[0.5, -1.0, 2.0]])
    assert np.array_equal(mean_pool(Matrix(row)), row[0])
    assert np.array_equal(mean_pool(Matrix([[1.0, 0.0], [0.0, 1.0]])), np.array([0.5, 0.5]))
    rng = Rng(2, "pool")
    tokens = rng.normal(8, 32)
    oracle = np.array([sum(tokens[i, j] for i in range(8)) / 8.0 for j in range(32)])
    assert np.allclose(mean_pool(Matrix(tokens)), oracle, atol=1e-12)


def test_mean_pool_empty_raises():
    with pytest.raises(ShapeError):
        mean_pool(Matrix.from_array(np.zeros((0, 3))))


# ---------------------------------------------------------------------------
# Tape mechanics
# ---------------------------------------------------------------------------


def test_tape_replay_is_bit_exact():
    rng = Rng(8, "replay")
    p = Param("p", Matrix(rng.normal(4, 4)))
    tape = Tape()
    x = tape.leaf(p)
    y = tape.softmax_rows(tape.matmul(x, tape.transpose(x)))
    z = tape.sum(tape.tanh(y))
    tape.backward(z)
    assert tape.replay()


def test_tape_backward_is_single_use():
    p = Param("p", Matrix([[2.0]]))
    tape = Tape()
    out = tape.sum(tape.leaf(p))
    tape.backward(out)
    with pytest.raises(EvaluationError):
        tape.backward(out)


def test_non_recording_tape_refuses_backward():
    tape = Tape(record=False)
    out = tape.sum(tape.const(np.ones((2, 2))))
    with pytest.raises(EvaluationError):
        tape.backward(out)


def test_backward_requires_scalar():
    p = Param("p", Matrix([[1.0, 2.0]]))
    tape = Tape()
    node = tape.leaf(p)
    with pytest.raises(ShapeError):
        tape.backward(node)


def test_param_reuse_in_one_tape_accumulates_once_per_path():
    p = Param("p", Matrix([[3.0]]))
    tape = Tape()
    x = tape.leaf(p)
    out = tape.sum(tape.mul(x, x))  # d(x^2)/dx = 2x = 6
    tape.backward(out)
    assert p.grad.array()[0, 0] == 6.0


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------


def test_grad_check_quadratic():
    p = Param("x", Matrix([[3.0]]))

    def f(tape: Tape):
        x = tape.leaf(p)
        return tape.sum(tape.mul(x, x))

    report = grad_check(f, [p])
    assert isinstance(report, GradCheckReport)
    assert report.passed and report.n_checked == 1
    assert p.grad.array()[0, 0] == 6.0
    assert report.max_rel_error < 1e-6


def test_grad_check_frozen_param_reports_zero():
    frozen = Param("frozen", Matrix([[1.0, -2.0]]), trainable=False)
    live = Param("live", Matrix([[0.5, 0.5]]))

    def f(tape: Tape):
        return tape.sum(tape.mul(tape.leaf(frozen), tape.leaf(live)))

    report = grad_check(f, [frozen, live])
    assert report.passed
    assert report.frozen_grad_max == 0.0
    assert np.array_equal(frozen.grad.array(), np.zeros((1, 2)))


def test_grad_check_eps_bounds():
    p = Param("x", Matrix([[1.0]]))

    def f(tape: Tape):
        return tape.sum(tape.leaf(p))

    with pytest.raises(ValueError):
        grad_check(f, [p], eps=1e-7)
    with pytest.raises(ValueError):
        grad_check(f, [p], eps=1e-2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_non_finite_objective():
    p = Param("x", Matrix([[0.0]]))

    def f(tape: Tape):
        x = tape.leaf(p)
        return tape.divide(tape.const(np.ones((1, 1))), x)

    with pytest.raises(EvaluationError):
        grad_check(f, [p])


def _composite_objective(p: Param, q: Param, gain: Param):
    def f(tape: Tape):
        x = tape.leaf(p)
        y = tape.layer_norm(tape.matmul(x, tape.leaf(q)), tape.leaf(gain), tape.const(np.zeros((1, 4))))
        y = tape.softmax_rows(y)
        y = tape.normalize_rows(tape.add(y, tape.const(np.full((4, 4), 0.25))))
        cn = tape.column_norms(tape.tanh(y))
        z = tape.mul_cols(tape.div_cols(y, tape.add(cn, tape.const(np.ones((1, 4))))), tape.leaf(gain))
        h = tape.concat_cols([tape.slice_cols(z, 0, 2), tape.slice_cols(z, 2, 4)])
        pooled = tape.mean_pool(tape.add_row(h, tape.const(np.full((1, 4), 0.1))))
        return tape.sum(tape.sqrt(tape.affine(tape.logsumexp_rows(pooled), 1.0, 3.0)))

    return f


def test_primitive_gradients_match_central_differences_over_seeds():
    # All differentiable primitives, composed; 100 random seeds, entries in [-2, 2].
    worst = 0.0
    for seed in range(100):
        rng = Rng(seed, "sweep")
        p = Param("p", Matrix(rng.uniform(4, 4) * 4 - 2))
        q = Param("q", Matrix(rng.uniform(4, 4) * 4 - 2))
        gain = Param("g", Matrix(rng.uniform(1, 4) * 4 - 2))
        report = grad_check(_composite_objective(p, q, gain), [p, q, gain], eps=1e-5, tol=1e-4)
        worst = max(worst, report.max_rel_error)
        assert report.passed, f"seed {seed}: {report.failures[:3]}"
    assert worst < 1e-4


def test_op_outputs_are_deterministic_across_runs():
    def produce() -> bytes:
        rng = Rng(123, "det")
        a, b = rng.normal(5, 5), rng.normal(5, 5)
        tape = Tape(record=False)
        x = tape.matmul(tape.const(a), tape.const(b))
        y = tape.layer_norm(x, tape.const(np.ones((1, 5))), tape.const(np.zeros((1, 5))))
        z = tape.softmax_rows(y)
        return z.value.tobytes() + rng.normal(3, 3).tobytes()

    assert produce() == produce()
