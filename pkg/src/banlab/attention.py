"""Unitary, co-, and bilinear attention.

Multi-channel inputs are column-major in the channel sense: ``X[N, ρ]`` holds
ρ question channels of size N and ``Y[M, φ]`` holds φ visual channels of
size M. Every function also accepts a leading batch axis (``X[B, N, ρ]``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from banlab.tensor import (
    DimensionError,
    EmptyGroupError,
    Tensor,
    as_tensor,
    broadcast_to,
    hadamard,
    masked_softmax,
    matmul,
    mean,
    outer_broadcast,
    reduce_sum,
    relu,
    reshape,
    transpose,
)

Dropper = Callable[[Tensor], Tensor]


def _identity(t: Tensor) -> Tensor:
    return t


def _act(nonlinear: bool) -> Callable[[Tensor], Tensor]:
    return relu if nonlinear else _identity


@dataclass
class ChannelMask:
    """Validity of visual channels; ``valid`` is ``[φ]`` or ``[B, φ]``."""

    valid: np.ndarray

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        if not np.all(self.valid.any(axis=-1)):
            raise EmptyGroupError("empty attention group: a sample has no valid visual channel")

    @classmethod
    def from_counts(cls, counts, phi: int) -> "ChannelMask":
        counts = np.asarray(counts)
        return cls(np.arange(phi) < counts[..., None])

    @classmethod
    def full(cls, phi: int, batch: int | None = None) -> "ChannelMask":
        shape = (phi,) if batch is None else (batch, phi)
        return cls(np.ones(shape, dtype=bool))

    @property
    def counts(self) -> np.ndarray:
        return self.valid.sum(axis=-1)


def _column_mask(mask, shape: tuple[int, ...]) -> np.ndarray | None:
    # expand a [.., φ] channel mask to the [.., rows, φ] logits shape
    if mask is None:
        return None
    valid = mask.valid if isinstance(mask, ChannelMask) else np.asarray(mask, dtype=bool)
    if valid.shape[-1] != shape[-1]:
        raise DimensionError(f"mask over {valid.shape[-1]} channels, logits have {shape[-1]}")
    return np.broadcast_to(valid[..., None, :], shape)


@dataclass
class AttentionMap:
    probs: Tensor  # [.., ρ, φ]
    logits: Tensor  # pre-mask logits, kept for the counter hook

    def numpy(self) -> np.ndarray:
        return self.probs.data


@dataclass
class GlimpseParams:
    """Bilinear attention parameters.

    ``U``/``V`` produce the attention logits and are shared by all glimpses;
    ``p`` holds one weight vector per glimpse. ``U_out``/``V_out`` are the
    BAN pooling factors, one pair per glimpse (a single tensor is shared).
    """

    U: Tensor  # N x K'
    V: Tensor  # M x K'
    p: Sequence[Tensor]  # G vectors of length K'
    U_out: Sequence[Tensor] | Tensor  # N x K
    V_out: Sequence[Tensor] | Tensor  # M x K

    def __post_init__(self):
        self.U, self.V = as_tensor(self.U), as_tensor(self.V)
        self.p = [as_tensor(v) for v in self.p]
        G = len(self.p)
        if G < 1:
            raise ValueError("need at least one glimpse")
        if isinstance(self.U_out, (Tensor, np.ndarray)):
            self.U_out = [as_tensor(self.U_out)] * G
        if isinstance(self.V_out, (Tensor, np.ndarray)):
            self.V_out = [as_tensor(self.V_out)] * G
        self.U_out = [as_tensor(u) for u in self.U_out]
        self.V_out = [as_tensor(v) for v in self.V_out]
        if len(self.U_out) != G or len(self.V_out) != G:
            raise ValueError("U_out/V_out must have one entry per glimpse")
        if self.U.shape[1] != self.V.shape[1] or any(v.shape != (self.U.shape[1],) for v in self.p):
            raise DimensionError("attention rank K' inconsistent across U, V, p")

    @property
    def glimpses(self) -> int:
        return len(self.p)

    @classmethod
    def init(cls, N: int, M: int, K: int, G: int, rng: np.random.Generator, K_att: int | None = None):
        K_att = 3 * K if K_att is None else K_att
        b, ba = 1.0 / np.sqrt(K), 1.0 / np.sqrt(K_att)
        return cls(
            rng.uniform(-ba, ba, (N, K_att)),
            rng.uniform(-ba, ba, (M, K_att)),
            [rng.uniform(-ba, ba, K_att) for _ in range(G)],
            [rng.uniform(-b, b, (N, K)) for _ in range(G)],
            [rng.uniform(-b, b, (M, K)) for _ in range(G)],
        )


@dataclass
class UnitaryParams:
    U: Tensor  # N x d
    V: Tensor  # M x d
    P: Tensor  # d x G

    def __post_init__(self):
        self.U, self.V, self.P = as_tensor(self.U), as_tensor(self.V), as_tensor(self.P)

    @property
    def glimpses(self) -> int:
        return self.P.shape[1]

    @classmethod
    def init(cls, N: int, M: int, d: int, G: int, rng: np.random.Generator):
        b = 1.0 / np.sqrt(d)
        return cls(rng.uniform(-b, b, (N, d)), rng.uniform(-b, b, (M, d)), rng.uniform(-b, b, (d, G)))


@dataclass
class CoAttentionParams:
    """Self-attention over question channels, then visual unitary attention."""

    self_U: Tensor  # N x d
    self_V: Tensor  # N x d
    self_p: Tensor  # d
    visual: UnitaryParams = field(default=None)

    def __post_init__(self):
        self.self_U, self.self_V, self.self_p = map(as_tensor, (self.self_U, self.self_V, self.self_p))

    @classmethod
    def init(cls, N: int, M: int, d: int, G: int, rng: np.random.Generator):
        b = 1.0 / np.sqrt(d)
        return cls(
            rng.uniform(-b, b, (N, d)),
            rng.uniform(-b, b, (N, d)),
            rng.uniform(-b, b, d),
            UnitaryParams.init(N, M, d, G, rng),
        )


# -- bilinear attention -----------------------------------------------------

def project_channels(X: Tensor, W: Tensor, nonlinear: bool = True, drop: Dropper | None = None) -> Tensor:
    """``σ(XᵀW)``: per-channel projection ``[.., N, ρ] -> [.., ρ, k]``."""
    X, W = as_tensor(X), as_tensor(W)
    if X.shape[-2] != W.shape[0]:
        raise DimensionError(f"channels of size {X.shape[-2]} do not match factor {W.shape}")
    Xt = transpose(X)
    if drop is not None:
        Xt = drop(Xt)
    return _act(nonlinear)(matmul(Xt, W))


def logits_from_projections(XU: Tensor, VY: Tensor, p: Tensor) -> Tensor:
    """``((1·pᵀ) ∘ XU) · VY`` with ``XU[.., ρ, K']`` and ``VY[.., K', φ]``."""
    p = as_tensor(p)
    return matmul(hadamard(XU, broadcast_to(p, XU.shape)), VY)


def bilinear_logits(X, Y, g: GlimpseParams, glimpse: int = 0, nonlinear: bool = True) -> Tensor:
    """Logits ``A[i, j] = p_gᵀ(σ(UᵀX_i) ∘ σ(VᵀY_j))`` for every channel pair."""
    XU = project_channels(X, g.U, nonlinear)
    VY = transpose(project_channels(Y, g.V, nonlinear))
    return logits_from_projections(XU, VY, g.p[glimpse])


def bilinear_logits_all(X, Y, g: GlimpseParams, nonlinear: bool = True, drop: Dropper | None = None) -> list[Tensor]:
    """Logits of every glimpse, sharing the U/V projections."""
    XU = project_channels(X, g.U, nonlinear, drop)
    VY = transpose(project_channels(Y, g.V, nonlinear, drop))
    return [logits_from_projections(XU, VY, p) for p in g.p]


def bilinear_attention_map(logits: Tensor, mask=None, scope: str = "joint") -> AttentionMap:
    """Softmax of bilinear logits with padded visual channels at exactly zero.

    ``scope="joint"`` normalizes over all ρ×φ cells; ``"row"`` normalizes
    each question channel separately.
    """
    logits = as_tensor(logits)
    if scope == "joint":
        axes = (-2, -1)
    elif scope == "row":
        axes = -1
    else:
        raise ValueError(f"unknown normalization scope {scope!r}")
    probs = masked_softmax(logits, _column_mask(mask, logits.shape), axes)
    return AttentionMap(probs, logits)


def ban_apply(X, Y, A: AttentionMap | Tensor, g: GlimpseParams, glimpse: int = 0,
              nonlinear: bool = True, drop: Dropper | None = None) -> Tensor:
    """``f'_k = σ(XᵀU')_kᵀ · A · σ(YᵀV')_k`` as a matrix chain."""
    probs = A.probs if isinstance(A, AttentionMap) else as_tensor(A)
    Xp = project_channels(X, g.U_out[glimpse], nonlinear, drop)  # ρ x K
    Yp = project_channels(Y, g.V_out[glimpse], nonlinear, drop)  # φ x K
    if probs.shape[-2:] != (Xp.shape[-2], Yp.shape[-2]):
        raise DimensionError(f"attention map {probs.shape} vs channels ({Xp.shape[-2]}, {Yp.shape[-2]})")
    return reduce_sum(hadamard(Xp, matmul(probs, Yp)), axis=-2)


def ban_oracle(X, Y, A, g: GlimpseParams, glimpse: int = 0, nonlinear: bool = True) -> np.ndarray:
    """Double sum over channel pairs of ``A[i, j]·σ(X_iᵀU'_k)·σ(V'_kᵀY_j)`` (single sample)."""
    X = np.asarray(as_tensor(X).data)
    Y = np.asarray(as_tensor(Y).data)
    A = np.asarray(A.probs.data if isinstance(A, AttentionMap) else as_tensor(A).data)
    U, V = g.U_out[glimpse].data, g.V_out[glimpse].data
    act = (lambda v: max(v, 0.0)) if nonlinear else (lambda v: v)
    rho, phi, K = X.shape[1], Y.shape[1], U.shape[1]
    out = np.zeros(K)
    for k in range(K):
        acc = 0.0
        for i in range(rho):
            xi = act(float(X[:, i] @ U[:, k]))
            for j in range(phi):
                acc += A[i, j] * xi * act(float(V[:, k] @ Y[:, j]))
        out[k] = acc
    return out


# -- unitary and co-attention ----------------------------------------------

def unitary_attention(x, Y, params: UnitaryParams, mask=None, nonlinear: bool = True,
                      drop: Dropper | None = None) -> tuple[Tensor, Tensor]:
    """Attend over visual channels with a single-channel query.

    Returns ``(ŷ, α)`` where ``α[.., G, φ]`` are per-glimpse distributions and
    ``ŷ[.., G·M]`` concatenates the per-glimpse convex combinations of ``Y``.
    """
    x, Y = as_tensor(x), as_tensor(Y)
    act = _act(nonlinear)
    phi = Y.shape[-1]
    xin = drop(x) if drop is not None else x
    if xin.ndim == 1:
        xu = reshape(matmul(reshape(xin, (1, -1)), params.U), (params.U.shape[1],))
    else:
        xu = matmul(xin, params.U)
    q = outer_broadcast(act(xu), phi)  # [.., d, φ]
    vy = transpose(project_channels(Y, params.V, nonlinear, drop))  # [.., d, φ]
    logits = matmul(transpose(params.P), hadamard(q, vy))  # [.., G, φ]
    alpha = masked_softmax(logits, _column_mask(mask, logits.shape), -1)
    y_hat = matmul(alpha, transpose(Y))  # [.., G, M]
    lead = Y.shape[:-2]
    return reshape(y_hat, lead + (params.glimpses * Y.shape[-2],)), alpha


def co_attention(X, Y, params: CoAttentionParams, mask=None, nonlinear: bool = True,
                 drop: Dropper | None = None) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Question self-attention followed by question-conditioned visual attention.

    Each question channel is scored against the channel mean with a
    single-glimpse low-rank pooling.
    """
    X, Y = as_tensor(X), as_tensor(Y)
    rho = X.shape[-1]
    act = _act(nonlinear)
    Xp = project_channels(X, params.self_U, nonlinear, drop)  # [.., ρ, d]
    xbar = mean(X, axis=-1)  # [.., N]
    xbar_in = drop(xbar) if drop is not None else xbar
    if xbar_in.ndim == 1:
        c = reshape(matmul(reshape(xbar_in, (1, -1)), params.self_V), (params.self_V.shape[1],))
    else:
        c = matmul(xbar_in, params.self_V)
    ctx = transpose(outer_broadcast(act(c), rho))  # [.., ρ, d]
    scores = hadamard(Xp, ctx)
    pmat = reshape(params.self_p, (-1, 1))
    logits_x = reshape(matmul(scores, pmat), X.shape[:-2] + (rho,))
    alpha_x = masked_softmax(logits_x, None, -1)
    x_hat = reshape(matmul(X, reshape(alpha_x, X.shape[:-2] + (rho, 1))), X.shape[:-1])
    y_hat, alpha_y = unitary_attention(x_hat, Y, params.visual, mask, nonlinear, drop)
    return x_hat, y_hat, alpha_x, alpha_y


# -- export -----------------------------------------------------------------

def write_attention_csv(maps: Sequence[np.ndarray], out_dir, stem: str = "attention") -> list[Path]:
    """One ρ×φ grid per glimpse; rows are question channels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for gi, grid in enumerate(maps, start=1):
        grid = np.asarray(grid)
        path = out_dir / f"{stem}_g{gi}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["question_channel"] + [f"v{j}" for j in range(grid.shape[1])])
            for i, row in enumerate(grid):
                w.writerow([f"q{i}"] + [repr(float(v)) for v in row])
        paths.append(path)
    return paths


def write_marginal_csv(maps: Sequence[np.ndarray], out_dir, stem: str = "marginal") -> list[Path]:
    """Column sums over question channels, visual channels ranked by mass."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for gi, grid in enumerate(maps, start=1):
        marg = np.asarray(grid).sum(axis=0)
        order = np.argsort(-marg, kind="stable")
        path = out_dir / f"{stem}_g{gi}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "visual_channel", "marginal"])
            for r, j in enumerate(order, start=1):
                w.writerow([r, int(j), repr(float(marg[j]))])
        paths.append(path)
    return paths
