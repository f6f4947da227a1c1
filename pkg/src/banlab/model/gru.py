from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from banlab.tensor import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    hadamard,
    matmul,
    reshape,
    sigmoid,
    sub,
    take,
    tanh,
    transpose,
)


@dataclass
class GruParams:
    """Single-layer GRU. Input maps are ``[E, N]``, recurrences ``[N, N]``."""

    Wz: Tensor
    Wr: Tensor
    Wh: Tensor
    Uz: Tensor
    Ur: Tensor
    Uh: Tensor
    bz: Tensor
    br: Tensor
    bh: Tensor

    def __post_init__(self):
        for name in ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh"):
            setattr(self, name, as_tensor(getattr(self, name)))
        E, N = self.Wz.shape
        for name in ("Wr", "Wh"):
            if getattr(self, name).shape != (E, N):
                raise ValueError(f"GRU {name} must be {(E, N)}")
        for name in ("Uz", "Ur", "Uh"):
            if getattr(self, name).shape != (N, N):
                raise ValueError(f"GRU {name} must be {(N, N)}")
        for name in ("bz", "br", "bh"):
            if getattr(self, name).shape != (N,):
                raise ValueError(f"GRU {name} must be {(N,)}")

    @property
    def hidden(self) -> int:
        return self.Wz.shape[1]

    @property
    def input_size(self) -> int:
        return self.Wz.shape[0]

    @classmethod
    def init(cls, E: int, N: int, rng: np.random.Generator) -> "GruParams":
        b = 1.0 / np.sqrt(N)
        u = lambda *shape: rng.uniform(-b, b, shape)  # noqa: E731
        return cls(u(E, N), u(E, N), u(E, N), u(N, N), u(N, N), u(N, N), u(N), u(N), u(N))

    def as_dict(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh")}


def gru_encode(emb, params: GruParams) -> Tensor:
    """Hidden state at every step, starting from a zero state.

    z = σ(W_zᵀx + U_zᵀh + b_z), r = σ(W_rᵀx + U_rᵀh + b_r),
    h̃ = tanh(W_hᵀx + U_hᵀ(r∘h) + b_h), h' = (1 - z)∘h + z∘h̃.

    ``emb`` is ``[E, T]`` (or ``[B, E, T]``); the result is ``[N, T]``.
    """
    emb = as_tensor(emb)
    single = emb.ndim == 2
    if single:
        emb = reshape(emb, (1,) + emb.shape)
    B, E, T = emb.shape
    if T < 1:
        raise ValueError("cannot encode an empty sequence")
    if E != params.input_size:
        raise ValueError(f"embedding size {E} does not match GRU input {params.input_size}")
    N = params.hidden
    x = transpose(emb)  # B x T x E
    xz, xr, xh = matmul(x, params.Wz), matmul(x, params.Wr), matmul(x, params.Wh)
    bz = broadcast_to(params.bz, (B, N))
    br = broadcast_to(params.br, (B, N))
    bh = broadcast_to(params.bh, (B, N))
    ones = Tensor(np.ones((B, N)))
    h = Tensor(np.zeros((B, N)))
    states = []
    for t in range(T):
        z = sigmoid(add(add(take(xz, t, axis=1), matmul(h, params.Uz)), bz))
        r = sigmoid(add(add(take(xr, t, axis=1), matmul(h, params.Ur)), br))
        cand = tanh(add(add(take(xh, t, axis=1), matmul(hadamard(r, h), params.Uh)), bh))
        h = add(hadamard(sub(ones, z), h), hadamard(z, cand))
        states.append(reshape(h, (B, 1, N)))
    out = transpose(concat(states, axis=1))  # B x N x T
    return reshape(out, (N, T)) if single else out
