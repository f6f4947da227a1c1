"""Residual glimpse stacking and the full question-answering model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from banlab.attention import (
    AttentionMap,
    ChannelMask,
    CoAttentionParams,
    GlimpseParams,
    UnitaryParams,
    ban_apply,
    bilinear_attention_map,
    bilinear_logits_all,
    co_attention,
    unitary_attention,
)
from banlab.model.counter import (
    TOP_OBJECTS,
    ConfigurationError,
    CounterEmbedding,
    CounterPlugin,
    ZeroCounter,
    count_features,
)
from banlab.model.gru import GruParams, gru_encode
from banlab.tensor import (
    Tensor,
    add,
    broadcast_to,
    concat,
    hadamard,
    matmul,
    outer_broadcast,
    reduce_sum,
    relu,
    take,
    transpose,
)
from banlab.train.regularize import dropout, weight_norm_apply

MODES = ("residual", "sum", "concat")
KINDS = ("bilinear", "unitary", "co")


@dataclass
class BanStackConfig:
    N: int = 32  # question channel size (GRU hidden)
    M: int = 48  # visual channel size
    K: int = 32  # BAN rank
    K_att: int = 96  # attention rank, 3K by default
    C: int = 32  # joint size
    G: int = 1
    E: int = 32  # word embedding size
    vocab_size: int = 32
    n_answers: int = 8
    hidden: int = 0  # classifier width; 0 means 2*C_in
    mode: str = "residual"
    kind: str = "bilinear"
    counter: bool = False
    top_k: int = TOP_OBJECTS
    dropout_hidden: float = 0.2
    dropout_cls: float = 0.5
    scope: str = "joint"
    nonlinear: bool = True
    weight_norm: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.G < 1:
            raise ConfigurationError("need at least one glimpse")
        for name in ("N", "M", "K", "K_att", "C", "E", "vocab_size", "n_answers"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.kind == "bilinear" and self.mode == "residual" and not (self.N == self.K == self.C):
            raise ConfigurationError(
                f"residual stacking starts from f0 = X and needs N == K == C, got N={self.N}, K={self.K}, C={self.C}"
            )
        if self.counter and not (self.kind == "bilinear" and self.mode == "residual"):
            raise ConfigurationError("the counter hook is defined for residual bilinear stacks only")

    @property
    def classifier_in(self) -> int:
        if self.kind == "bilinear" and self.mode == "concat":
            return self.G * self.C
        return self.C

    @property
    def classifier_hidden(self) -> int:
        return self.hidden or 2 * self.classifier_in


# -- residual steps ---------------------------------------------------------

def _project_out(b: Tensor, P: Tensor | None) -> Tensor:
    return b if P is None else matmul(b, P)


def residual_step(f, Y, A: AttentionMap, g: GlimpseParams, glimpse: int, P: Tensor | None = None,
                  nonlinear: bool = True, drop=None) -> Tensor:
    """``f_{i+1} = BAN_i(f_i, Y; A_i)·1ᵀ + f_i``; ``P[K, C]`` is the optional output map."""
    f = f if isinstance(f, Tensor) else Tensor(f)
    b = _project_out(ban_apply(f, Y, A, g, glimpse, nonlinear, drop), P)
    if b.shape[-1] != f.shape[-2]:
        raise ValueError(f"BAN output size {b.shape[-1]} must equal channel size {f.shape[-2]}")
    return add(outer_broadcast(b, f.shape[-1]), f)


def residual_step_with_counter(f, Y, A: AttentionMap, g: GlimpseParams, glimpse: int, boxes,
                               plugin: CounterPlugin | None, embed: CounterEmbedding,
                               P: Tensor | None = None, valid=None, nonlinear: bool = True, drop=None,
                               k: int = TOP_OBJECTS) -> Tensor:
    """``f_{i+1} = (BAN_i(f_i, Y; A_i) + g_i(c_i))·1ᵀ + f_i``.

    ``c_i`` comes from the plugin fed with the top-k column maxima of the
    glimpse logits. ``embed`` is applied without dropout.
    """
    if plugin is None:
        raise ConfigurationError("residual_step_with_counter needs a counter plugin")
    f = f if isinstance(f, Tensor) else Tensor(f)
    b = _project_out(ban_apply(f, Y, A, g, glimpse, nonlinear, drop), P)
    c = count_features(A.logits, boxes, plugin, valid, k)
    b = add(b, embed(c))
    return add(outer_broadcast(b, f.shape[-1]), f)


# -- parameters ---------------------------------------------------------------

def _uniform(rng, fan_in, shape):
    b = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-b, b, shape)


def init_params(cfg: BanStackConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameters; linear maps are stored ``[out, in]``."""
    p: dict[str, np.ndarray] = {}

    def linear(name, n_out, n_in, bias=False):
        w = _uniform(rng, n_in, (n_out, n_in))
        if cfg.weight_norm:
            p[name + ".v"] = w
            p[name + ".g"] = np.linalg.norm(w, axis=1)
        else:
            p[name + ".w"] = w
        if bias:
            p[name + ".b"] = np.zeros(n_out)

    p["emb"] = rng.normal(0.0, 1.0, (cfg.vocab_size, cfg.E))
    gru = GruParams.init(cfg.E, cfg.N, rng)
    for k, t in gru.as_dict().items():
        p["gru." + k] = np.array(t.data)

    if cfg.kind == "bilinear":
        linear("att.U", cfg.K_att, cfg.N)
        linear("att.V", cfg.K_att, cfg.M)
        for i in range(cfg.G):
            p[f"att.p{i}"] = _uniform(rng, cfg.K_att, cfg.K_att)
            linear(f"ban{i}.U", cfg.K, cfg.N)
            linear(f"ban{i}.V", cfg.K, cfg.M)
            linear(f"ban{i}.P", cfg.C, cfg.K)
            if cfg.counter:
                k = min(cfg.top_k, TOP_OBJECTS)
                linear(f"cnt{i}", cfg.K, k + 1, bias=True)
    else:
        if cfg.kind == "co":
            linear("self.U", cfg.K_att, cfg.N)
            linear("self.V", cfg.K_att, cfg.N)
            p["self.p"] = _uniform(rng, cfg.K_att, cfg.K_att)
        linear("uni.U", cfg.K_att, cfg.N)
        linear("uni.V", cfg.K_att, cfg.M)
        linear("uni.P", cfg.G, cfg.K_att)
        linear("joint.U", cfg.K, cfg.N)
        linear("joint.V", cfg.K, cfg.G * cfg.M)
        linear("joint.P", cfg.C, cfg.K)

    linear("cls.W1", cfg.classifier_hidden, cfg.classifier_in, bias=True)
    linear("cls.W2", cfg.n_answers, cfg.classifier_hidden, bias=True)
    return p


@dataclass
class ForwardOutput:
    logits: Tensor
    maps: list[AttentionMap] = field(default_factory=list)
    question: Tensor | None = None
    features: Tensor | None = None


class BanModel:
    """Question encoder + attention + integration + two-layer classifier."""

    def __init__(self, config: BanStackConfig, params: Mapping[str, np.ndarray] | None = None,
                 seed: int = 0, plugin: CounterPlugin | None = None):
        self.config = config
        self.params = dict(params) if params is not None else init_params(config, np.random.default_rng(seed))
        self.plugin = plugin if plugin is not None else (ZeroCounter() if config.counter else None)

    # weights ----------------------------------------------------------------
    def weights(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def _weight(self, w: Mapping[str, Tensor], name: str) -> Tensor:
        """Effective weight of linear ``name`` in ``[in, out]`` layout."""
        if name + ".v" in w:
            return transpose(weight_norm_apply(w[name + ".v"], w[name + ".g"]))
        return transpose(w[name + ".w"])

    def _linear(self, w, name: str, x: Tensor) -> Tensor:
        h = matmul(x, self._weight(w, name))
        if name + ".b" in w:
            h = add(h, broadcast_to(w[name + ".b"], h.shape))
        return h

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # pieces -----------------------------------------------------------------
    def encode_question(self, w, tokens: np.ndarray) -> Tensor:
        emb = take(w["emb"], tokens, axis=0)  # B x T x E
        gru = GruParams(**{k: w["gru." + k] for k in ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh")})
        return gru_encode(transpose(emb), gru)  # B x N x T

    def glimpse_params(self, w) -> GlimpseParams:
        G = self.config.G
        return GlimpseParams(
            self._weight(w, "att.U"),
            self._weight(w, "att.V"),
            [w[f"att.p{i}"] for i in range(G)],
            [self._weight(w, f"ban{i}.U") for i in range(G)],
            [self._weight(w, f"ban{i}.V") for i in range(G)],
        )

    def counter_embedding(self, w, i: int) -> CounterEmbedding:
        return CounterEmbedding(self._weight(w, f"cnt{i}"), w[f"cnt{i}.b"])

    # forward ----------------------------------------------------------------
    def forward(self, tokens, Y, mask, boxes=None, weights: Mapping[str, Tensor] | None = None,
                training: bool = False, rng: np.random.Generator | None = None,
                n_glimpses: int | None = None) -> ForwardOutput:
        """Answer logits ``[B, n_answers]`` for a batch.

        ``tokens[B, T]`` are word ids, ``Y[B, M, φ]`` visual channels and
        ``mask[B, φ]`` marks valid channels. ``n_glimpses`` runs only the
        first n residual steps (ablation).
        """
        cfg = self.config
        w = weights if weights is not None else self.weights()
        valid = mask.valid if isinstance(mask, ChannelMask) else np.asarray(mask, dtype=bool)
        ChannelMask(valid)
        Y = Y if isinstance(Y, Tensor) else Tensor(Y)
        if training and rng is None:
            raise ValueError("training mode needs an rng for dropout")

        def drop(t: Tensor) -> Tensor:
            return dropout(t, cfg.dropout_hidden, rng, training)

        X = self.encode_question(w, np.asarray(tokens))
        out = ForwardOutput(logits=None, question=X)
        if cfg.kind == "bilinear":
            feats = self._bilinear(w, X, Y, valid, boxes, drop, out, n_glimpses)
        else:
            if n_glimpses is not None:
                raise ValueError("glimpse ablation applies to bilinear residual stacks")
            feats = self._single_channel(w, X, Y, valid, drop)
        out.features = feats
        h = relu(self._linear(w, "cls.W1", feats))
        h = dropout(h, cfg.dropout_cls, rng, training)
        out.logits = self._linear(w, "cls.W2", h)
        return out

    def _bilinear(self, w, X, Y, valid, boxes, drop, out: ForwardOutput, n_glimpses):
        cfg = self.config
        n = cfg.G if n_glimpses is None else n_glimpses
        if not 1 <= n <= cfg.G:
            raise ValueError(f"n_glimpses must lie in 1..{cfg.G}, got {n}")
        if n_glimpses is not None and cfg.mode != "residual":
            raise ValueError("glimpse ablation is defined for residual mode")
        g = self.glimpse_params(w)
        logits = bilinear_logits_all(X, Y, g, cfg.nonlinear, drop)
        maps = [bilinear_attention_map(lg, valid, cfg.scope) for lg in logits]
        out.maps = maps
        if cfg.mode == "residual":
            f = X
            for i in range(n):
                P = self._weight(w, f"ban{i}.P")
                if cfg.counter:
                    if boxes is None:
                        raise ConfigurationError("counter mode needs object boxes")
                    f = residual_step_with_counter(
                        f, Y, maps[i], g, i, boxes, self.plugin, self.counter_embedding(w, i), P,
                        valid, cfg.nonlinear, drop, min(cfg.top_k, TOP_OBJECTS),
                    )
                else:
                    f = residual_step(f, Y, maps[i], g, i, P, cfg.nonlinear, drop)
            return reduce_sum(f, axis=-1)
        outs = [
            matmul(drop(ban_apply(X, Y, maps[i], g, i, cfg.nonlinear, drop)), self._weight(w, f"ban{i}.P"))
            for i in range(cfg.G)
        ]
        if cfg.mode == "sum":
            total = outs[0]
            for o in outs[1:]:
                total = add(total, o)
            return total
        return concat(outs, axis=-1)

    def _single_channel(self, w, X, Y, valid, drop):
        cfg = self.config
        visual = UnitaryParams(self._weight(w, "uni.U"), self._weight(w, "uni.V"), self._weight(w, "uni.P"))
        if cfg.kind == "unitary":
            q = take(X, X.shape[-1] - 1, axis=-1)  # last GRU state
            y_hat, _ = unitary_attention(q, Y, visual, valid, cfg.nonlinear, drop)
        else:
            co = CoAttentionParams(self._weight(w, "self.U"), self._weight(w, "self.V"), w["self.p"], visual)
            q, y_hat, _, _ = co_attention(X, Y, co, valid, cfg.nonlinear, drop)
        act = relu if cfg.nonlinear else (lambda t: t)
        z = hadamard(
            act(matmul(drop(q), self._weight(w, "joint.U"))),
            act(matmul(drop(y_hat), self._weight(w, "joint.V"))),
        )
        return matmul(drop(z), self._weight(w, "joint.P"))


def forward(model: BanModel, tokens, Y, mask, boxes=None, **kw) -> Tensor:
    """Answer logits for a batch (see :meth:`BanModel.forward`)."""
    return model.forward(tokens, Y, mask, boxes, **kw).logits
