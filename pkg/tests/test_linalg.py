import os

import numpy as np
import pytest

from src.linalg import ResponseMatrix, center_responses, covariance, response_eig, sym_eig
from src.utils.errors import ConvergenceError, ShapeError


def test_center_responses_hand_example():
    responses = center_responses(np.array([[1.0, 3.0], [2.0, 4.0]]))
    np.testing.assert_allclose(responses.mean, [2.0, 3.0])
    np.testing.assert_allclose(responses.Y, [[-1.0, 1.0], [-1.0, 1.0]])


def test_center_responses_constant_columns():
    samples = np.tile(np.array([[0.5], [-2.0], [7.0]]), (1, 10))
    responses = center_responses(samples)
    np.testing.assert_array_equal(responses.Y, np.zeros_like(samples))
    np.testing.assert_allclose(responses.mean, [0.5, -2.0, 7.0])


def test_center_responses_errors():
    with pytest.raises(ValueError):
        center_responses(np.ones((3, 1)))
    with pytest.raises(ShapeError):
        center_responses(np.ones(4))


def test_covariance_hand_example():
    Y = np.array([[1.0, -1.0], [1.0, -1.0]])
    np.testing.assert_allclose(covariance(ResponseMatrix(Y=Y, mean=np.zeros(2))), np.ones((2, 2)))
    zero = ResponseMatrix(Y=np.zeros((3, 5)), mean=np.zeros(3))
    np.testing.assert_array_equal(covariance(zero), np.zeros((3, 3)))


def test_sym_eig_diagonal():
    pair = sym_eig(np.diag([2.0, 5.0]))
    np.testing.assert_allclose(pair.S, [5.0, 2.0])
    np.testing.assert_allclose(np.abs(pair.U), [[0.0, 1.0], [1.0, 0.0]])


def test_sym_eig_two_by_two():
    pair = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(pair.S, [3.0, 1.0], atol=1e-12)
    root = 1 / np.sqrt(2)
    np.testing.assert_allclose(pair.U[:, 0], [root, root], atol=1e-12)
    # 并列最大分量取下标小的为正
    np.testing.assert_allclose(pair.U[:, 1], [root, -root], atol=1e-12)


def test_sym_eig_random_reconstruction(rng):
    """测试随机对称矩阵的分解重构"""
    A = rng.normal(size=(8, 8))
    M = A @ A.T
    pair = sym_eig(M)
    np.testing.assert_allclose(pair.U @ np.diag(pair.S) @ pair.U.T, M, atol=1e-8)
    np.testing.assert_allclose(pair.U.T @ pair.U, np.eye(8), atol=1e-10)
    np.testing.assert_allclose(pair.S, np.sort(np.linalg.eigvalsh(M))[::-1], atol=1e-8)
    assert np.all(np.diff(pair.S) <= 0)


SLOW = [pytest.mark.slow,
        pytest.mark.skipif(os.environ.get('RCM_SLOW') != '1', reason="设置 RCM_SLOW=1 运行")]


@pytest.mark.parametrize("size", [16, 64, pytest.param(128, marks=SLOW)])
def test_sym_eig_reconstruction_at_scale(size):
    """测试较大矩阵的重构误差与正交性"""
    rng = np.random.default_rng(size)
    A = rng.normal(size=(size, 2 * size))
    M = A @ A.T / A.shape[1]
    pair = sym_eig(M)
    reconstructed = pair.U @ np.diag(pair.S) @ pair.U.T
    assert np.abs(reconstructed - M).max() < 1e-4 * np.abs(M).max()
    assert np.abs(pair.U.T @ pair.U - np.eye(size)).max() < 1e-4
    np.testing.assert_allclose(pair.S, np.sort(np.linalg.eigvalsh(M))[::-1], atol=1e-8)


def test_sym_eig_scale_invariance(rng):
    A = rng.normal(size=(5, 5))
    M = A @ A.T
    base, scaled = sym_eig(M), sym_eig(3.5 * M)
    np.testing.assert_allclose(scaled.U, base.U, atol=1e-8)
    np.testing.assert_allclose(scaled.S, 3.5 * base.S, rtol=1e-10)


def test_sym_eig_off_diagonal_norm_decreases(rng):
    A = rng.normal(size=(6, 6))
    trace = []
    sym_eig(A + A.T, trace=trace)
    assert len(trace) >= 2
    assert all(later <= earlier for earlier, later in zip(trace, trace[1:]))


def test_sym_eig_errors(rng):
    with pytest.raises(ValueError):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ShapeError):
        sym_eig(np.ones((2, 3)))
    A = rng.normal(size=(4, 4))
    with pytest.raises(ConvergenceError):
        sym_eig(A + A.T, max_sweeps=0)


def test_response_eig_clamps_tiny_eigenvalues(rng):
    # 秩 1 的响应: 除第一个以外的特征值都置零
    direction = rng.normal(size=(4, 1))
    samples = direction @ rng.normal(size=(1, 50))
    pair = response_eig(center_responses(samples))
    assert pair.S[0] > 0
    np.testing.assert_array_equal(pair.S[1:], np.zeros(3))
    np.testing.assert_allclose(pair.U.T @ pair.U, np.eye(4), atol=1e-10)
