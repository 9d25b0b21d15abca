"""
对称特征分解与响应矩阵的一阶/二阶矩

特征分解用循环 Jacobi 旋转, 对几百维以内的协方差矩阵足够精确.
"""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ..utils.errors import ConvergenceError, ShapeError
from ..utils.logger import get_logger

logger = get_logger(__name__)

MAX_SWEEPS = 100
CONVERGENCE_RATIO = 1e-10
CLAMP_RATIO = 1e-9


@dataclass
class ResponseMatrix:
    """去均值后的响应样本 Y [c_out, n] 与均值 ȳ [c_out]"""
    Y: np.ndarray
    mean: np.ndarray

    @property
    def n(self) -> int:
        return int(self.Y.shape[1])

    @property
    def channels(self) -> int:
        return int(self.Y.shape[0])


@dataclass
class EigenPair:
    """特征向量按列存放, 特征值降序"""
    U: np.ndarray
    S: np.ndarray


def center_responses(samples: np.ndarray) -> ResponseMatrix:
    """
    按行去均值
    :param samples: [c_out, n] 响应样本, 每列一个响应向量
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ShapeError(f"响应样本必须是二维矩阵, 实际 {samples.shape}")
    if samples.shape[1] < 2:
        raise ValueError(f"至少需要2个响应样本, 实际 {samples.shape[1]}")
    mean = samples.mean(axis=1)
    return ResponseMatrix(Y=samples - mean[:, None], mean=mean)


def covariance(responses: ResponseMatrix) -> np.ndarray:
    """(1/n) Y Yᵀ, 缩放不改变特征向量"""
    Y = responses.Y
    cov = (Y @ Y.T) / responses.n
    # 消除舍入造成的微小不对称
    return 0.5 * (cov + cov.T)


def _apply_sign_convention(U: np.ndarray) -> np.ndarray:
    # 每个特征向量绝对值最大的分量取正, 并列时取下标最小者 (argmax 返回首个)
    pivots = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivots, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def sym_eig(M: np.ndarray, max_sweeps: int = MAX_SWEEPS,
            trace: Optional[List[float]] = None) -> EigenPair:
    """
    循环 Jacobi 对称特征分解, M ≈ U diag(S) Uᵀ
    :param M: 对称矩阵 [c, c]
    :param max_sweeps: 最多扫描轮数
    :param trace: 若给出, 追加每轮开始时的非对角 Frobenius 范数
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"特征分解需要方阵, 实际 {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("特征分解输入包含非有限值")
    if np.abs(M - M.T).max(initial=0.0) >= 1e-5:
        raise ValueError("特征分解输入不是对称矩阵")

    n = M.shape[0]
    A = 0.5 * (M + M.T)
    V = np.eye(n)
    norm_f = np.linalg.norm(A)
    if norm_f == 0.0:
        return EigenPair(U=V, S=np.zeros(n))
    threshold = CONVERGENCE_RATIO * norm_f

    for sweep in range(max_sweeps + 1):
        off = np.sqrt(max(np.sum(A * A) - np.sum(np.diag(A) ** 2), 0.0))
        if trace is not None:
            trace.append(float(off))
        logger.debug(f"Jacobi 第 {sweep} 轮, 非对角范数 {off:.3e}")
        if off < threshold:
            break
        if sweep == max_sweeps:
            raise ConvergenceError(f"Jacobi 在 {max_sweeps} 轮内未收敛, 非对角范数 {off:.3e}")

        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                elif theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = A[q, p] = 0.0

                vec_p = V[:, p].copy()
                vec_q = V[:, q].copy()
                V[:, p] = c * vec_p - s * vec_q
                V[:, q] = s * vec_p + c * vec_q

    S = np.diag(A).copy()
    order = np.argsort(-S, kind='stable')
    return EigenPair(U=_apply_sign_convention(V[:, order]), S=S[order])


def response_eig(responses: ResponseMatrix, trace: Optional[List[float]] = None) -> EigenPair:
    """
    响应协方差的特征分解; 小于 1e-9·S_max 的特征值置零, 对应特征向量保留
    """
    if responses.n < responses.channels:
        logger.warning(f"响应样本数 {responses.n} 少于通道数 {responses.channels}, 协方差秩亏")
    pair = sym_eig(covariance(responses), trace=trace)
    s_max = pair.S[0] if pair.S.size else 0.0
    small = pair.S < CLAMP_RATIO * max(s_max, 0.0)
    if np.any(small):
        logger.warning(f"{int(small.sum())} 个特征值过小, 置为0 (保留特征向量)")
        pair.S = np.where(small, 0.0, pair.S)
    return pair
