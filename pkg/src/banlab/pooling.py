"""Low-rank bilinear pooling, its MFB generalization, and a full-form oracle.

Vectors are 1-d tensors; they are lifted to row matrices internally so the
same code also runs on a leading batch of rows (``x[B, N]``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from banlab.tensor import DimensionError, Tensor, as_tensor, hadamard, matmul, reduce_sum, reshape


@dataclass
class LowRankPoolingParams:
    U: Tensor  # N x d
    V: Tensor  # M x d
    P: Tensor  # d x c

    def __post_init__(self):
        self.U, self.V, self.P = as_tensor(self.U), as_tensor(self.V), as_tensor(self.P)
        (N, d), (M, d2), (d3, c) = self.U.shape, self.V.shape, self.P.shape
        if not d == d2 == d3:
            raise DimensionError(f"inconsistent ranks: U {self.U.shape}, V {self.V.shape}, P {self.P.shape}")
        if d > min(N, M):
            raise ValueError(f"rank d={d} exceeds min(N, M)={min(N, M)}")

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def out_size(self) -> int:
        return self.P.shape[1]

    @classmethod
    def init(cls, N: int, M: int, d: int, c: int, rng: np.random.Generator) -> "LowRankPoolingParams":
        bu = 1.0 / np.sqrt(d)
        bp = 1.0 / np.sqrt(c)
        return cls(
            rng.uniform(-bu, bu, (N, d)),
            rng.uniform(-bu, bu, (M, d)),
            rng.uniform(-bp, bp, (d, c)),
        )


@dataclass
class MfbParams:
    U: Tensor  # N x (k*d)
    V: Tensor  # M x (k*d)
    k: int

    def __post_init__(self):
        self.U, self.V = as_tensor(self.U), as_tensor(self.V)
        if self.k < 1:
            raise ValueError("window k must be positive")
        if self.U.shape[1] != self.V.shape[1]:
            raise DimensionError(f"factor widths differ: {self.U.shape} vs {self.V.shape}")
        if self.U.shape[1] % self.k:
            raise DimensionError(f"width {self.U.shape[1]} not divisible by window {self.k}")


def _project(x: Tensor, W: Tensor, name: str) -> Tensor:
    # Wᵀx for x[N] or a batch x[B, N]
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"{name}: input {x.shape} does not match factor {W.shape}")
    if x.ndim == 1:
        return reshape(matmul(reshape(x, (1, -1)), W), (W.shape[1],))
    return matmul(x, W)


def joint_hadamard(x: Tensor, y: Tensor, U: Tensor, V: Tensor) -> Tensor:
    """``Uᵀx ∘ Vᵀy``, the rank-wise joint code shared by every pooling form."""
    x, y, U, V = map(as_tensor, (x, y, U, V))
    return hadamard(_project(x, U, "U"), _project(y, V, "V"))


def bilinear_scalar(x, y, U_i, V_i) -> Tensor:
    """``1ᵀ(U_iᵀx ∘ V_iᵀy)`` which equals ``xᵀ U_i V_iᵀ y``."""
    return reduce_sum(joint_hadamard(x, y, U_i, V_i), axis=-1)


def low_rank_pool(x, y, p: LowRankPoolingParams) -> Tensor:
    """``Pᵀ(Uᵀx ∘ Vᵀy)`` giving a length-c vector."""
    z = joint_hadamard(x, y, p.U, p.V)
    if z.ndim == 1:
        return reshape(matmul(reshape(z, (1, -1)), p.P), (p.out_size,))
    return matmul(z, p.P)


def sum_pool(z: Tensor, k: int) -> Tensor:
    """Non-overlapping window-k sum over the last axis."""
    z = as_tensor(z)
    if z.shape[-1] % k:
        raise DimensionError(f"length {z.shape[-1]} not divisible by window {k}")
    lead = z.shape[:-1]
    return reduce_sum(reshape(z, lead + (z.shape[-1] // k, k)), axis=-1)


def mfb_pool(x, y, p: MfbParams) -> Tensor:
    """``SumPool(Ũᵀx ∘ Ṽᵀy, k)``."""
    return sum_pool(joint_hadamard(x, y, p.U, p.V), p.k)


def full_bilinear_oracle(x, y, W) -> np.ndarray:
    """Evaluate ``x ᵀ W_i y`` for each slice of ``W[c, N, M]`` with explicit loops."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    W = np.asarray(W.data if isinstance(W, Tensor) else W, dtype=np.float64)
    c, N, M = W.shape
    if x.shape != (N,) or y.shape != (M,):
        raise DimensionError(f"oracle: x {x.shape}, y {y.shape} vs W {W.shape}")
    out = np.zeros(c)
    for i in range(c):
        acc = 0.0
        for a in range(N):
            for b in range(M):
                acc += x[a] * W[i, a, b] * y[b]
        out[i] = acc
    return out


def explicit_weights(p: LowRankPoolingParams) -> np.ndarray:
    """``W_i = U diag(P[:, i]) Vᵀ`` stacked over outputs, built with loops."""
    U, V, P = p.U.data, p.V.data, p.P.data
    N, d = U.shape
    M = V.shape[0]
    W = np.zeros((p.out_size, N, M))
    for i in range(p.out_size):
        for a in range(N):
            for b in range(M):
                W[i, a, b] = sum(U[a, r] * P[r, i] * V[b, r] for r in range(d))
    return W
