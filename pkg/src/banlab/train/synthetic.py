"""Toy multimodal QA task.

Each scene holds 4-10 objects with a unique shape and a random color. A
visual channel is ``shape_code + color_code + noise`` in R^M, with fixed
random attribute codes per task. Question families:

* ``color``  - what color is the <shape> ?               -> color
* ``pair``   - colors of the <s1> and the <s2> ?          -> ordered color pair
* ``same``   - is the <s1> same color as the <s2>         -> yes / no
* ``count``  - how many <color> objects ?                 -> 0..phi_max

Answers are enumerated up front; padding channels are zero and masked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SHAPES = ("cube", "sphere", "cone", "cylinder", "torus", "pyramid", "ring", "prism", "disk", "star", "arch", "wedge")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "black")
FUNCTION_WORDS = ("<pad>", "what", "color", "is", "the", "?", "colors", "of", "and", "same", "as", "how", "many", "objects")
QUERY_TYPES = ("color", "pair", "same", "count")


@dataclass
class TaskConfig:
    n_train: int = 6000
    n_val: int = 500
    M: int = 48
    T: int = 8
    phi_min: int = 4
    phi_max: int = 10
    n_shapes: int = 10
    n_colors: int = 6
    noise: float = 0.3
    query_mix: str = "color:1,pair:1,same:0,count:0"
    task_seed: int = 1234

    def __post_init__(self):
        if self.phi_min < 2 or self.phi_max < self.phi_min:
            raise ValueError("need 2 <= phi_min <= phi_max objects per scene")
        if self.n_shapes < self.phi_max or self.n_shapes > len(SHAPES):
            raise ValueError(f"n_shapes must lie in [phi_max, {len(SHAPES)}] so shapes are unique per scene")
        if not 2 <= self.n_colors <= len(COLORS):
            raise ValueError(f"n_colors must lie in [2, {len(COLORS)}]")
        if self.T < 8:
            raise ValueError("questions need T >= 8 tokens")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if not any(w > 0 for w in self.mix().values()):
            raise ValueError("query_mix selects no question type")

    def mix(self) -> dict[str, float]:
        out = {q: 0.0 for q in QUERY_TYPES}
        for part in self.query_mix.split(","):
            if not part.strip():
                continue
            name, weight = part.split(":")
            if name.strip() not in out:
                raise ValueError(f"unknown query type {name!r}")
            out[name.strip()] = float(weight)
        return out


@dataclass
class Vocabulary:
    words: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, tokens, length: int) -> np.ndarray:
        ids = [self.index[t] for t in tokens]
        if len(ids) > length:
            raise ValueError(f"question longer than {length} tokens")
        return np.array(ids + [self.index["<pad>"]] * (length - len(ids)), dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.words[i] for i in ids]


@dataclass
class SyntheticSample:
    tokens: np.ndarray  # [T]
    Y: np.ndarray  # [M, phi_max]
    mask: np.ndarray  # [phi_max]
    boxes: np.ndarray  # [4, phi_max]
    label: int
    qtype: str


@dataclass
class SyntheticSplit:
    tokens: np.ndarray  # [n, T]
    Y: np.ndarray  # [n, M, phi_max]
    mask: np.ndarray  # [n, phi_max]
    boxes: np.ndarray  # [n, 4, phi_max]
    labels: np.ndarray  # [n]
    qtypes: np.ndarray  # [n] of str
    shapes: np.ndarray  # [n, phi_max], -1 on padding
    colors: np.ndarray  # [n, phi_max], -1 on padding

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> SyntheticSample:
        return SyntheticSample(self.tokens[i], self.Y[i], self.mask[i], self.boxes[i], int(self.labels[i]), str(self.qtypes[i]))

    def subset(self, idx) -> "SyntheticSplit":
        return SyntheticSplit(*(getattr(self, f)[idx] for f in
                                ("tokens", "Y", "mask", "boxes", "labels", "qtypes", "shapes", "colors")))


@dataclass
class SyntheticTask:
    config: TaskConfig
    vocab: Vocabulary
    answers: list[str]
    shape_codes: np.ndarray  # [M, n_shapes]
    color_codes: np.ndarray  # [M, n_colors]
    train: SyntheticSplit
    val: SyntheticSplit

    @property
    def n_answers(self) -> int:
        return len(self.answers)


def build_vocabulary(cfg: TaskConfig) -> Vocabulary:
    return Vocabulary(list(FUNCTION_WORDS) + list(SHAPES[: cfg.n_shapes]) + list(COLORS[: cfg.n_colors]))


def build_answers(cfg: TaskConfig) -> list[str]:
    colors = COLORS[: cfg.n_colors]
    answers = list(colors)
    answers += [f"{a}-{b}" for a in colors for b in colors]
    answers += ["yes", "no"]
    answers += [str(n) for n in range(cfg.phi_max + 1)]
    return answers


def _question(qtype: str, rng, shapes, colors, cfg: TaskConfig):
    phi = len(shapes)
    shape_w = SHAPES
    color_w = COLORS
    if qtype == "color":
        j = rng.integers(phi)
        return ["what", "color", "is", "the", shape_w[shapes[j]], "?"], color_w[colors[j]]
    if qtype == "pair":
        a, b = rng.choice(phi, 2, replace=False)
        return (["colors", "of", "the", shape_w[shapes[a]], "and", "the", shape_w[shapes[b]], "?"],
                f"{color_w[colors[a]]}-{color_w[colors[b]]}")
    if qtype == "same":
        a, b = rng.choice(phi, 2, replace=False)
        if rng.random() < 0.5:
            colors[b] = colors[a]
        else:
            colors[b] = (colors[a] + rng.integers(1, cfg.n_colors)) % cfg.n_colors
        ans = "yes" if colors[a] == colors[b] else "no"
        return ["is", "the", shape_w[shapes[a]], "same", "color", "as", "the", shape_w[shapes[b]]], ans
    if qtype == "count":
        c = rng.integers(cfg.n_colors)
        return ["how", "many", color_w[c], "objects", "?"], str(int(np.sum(colors == c)))
    raise ValueError(qtype)


def encode_objects(shapes, colors, shape_codes, color_codes, noise: float, rng) -> np.ndarray:
    """Visual channels ``[M, phi]`` for the given attribute indices."""
    Y = shape_codes[:, shapes] + color_codes[:, colors]
    if noise > 0:
        Y = Y + noise * rng.standard_normal(Y.shape)
    return Y


def gen_synthetic(seed: int, cfg: TaskConfig | None = None) -> SyntheticTask:
    """Deterministic train/validation splits with disjoint (scene, question) signatures."""
    cfg = cfg or TaskConfig()
    vocab = build_vocabulary(cfg)
    answers = build_answers(cfg)
    answer_index = {a: i for i, a in enumerate(answers)}
    code_rng = np.random.default_rng(cfg.task_seed)
    shape_codes = code_rng.standard_normal((cfg.M, cfg.n_shapes))
    color_codes = code_rng.standard_normal((cfg.M, cfg.n_colors))

    mix = cfg.mix()
    names = [q for q in QUERY_TYPES if mix[q] > 0]
    probs = np.array([mix[q] for q in names])
    probs = probs / probs.sum()

    rng = np.random.default_rng(seed)
    seen: set[bytes] = set()

    def make(n: int, exclude: set[bytes] | None) -> SyntheticSplit:
        P = cfg.phi_max
        tokens = np.zeros((n, cfg.T), dtype=np.int64)
        Y = np.zeros((n, cfg.M, P))
        mask = np.zeros((n, P), dtype=bool)
        boxes = np.zeros((n, 4, P))
        labels = np.zeros(n, dtype=np.int64)
        qtypes = np.empty(n, dtype=object)
        shp = -np.ones((n, P), dtype=np.int64)
        col = -np.ones((n, P), dtype=np.int64)
        i = 0
        while i < n:
            phi = int(rng.integers(cfg.phi_min, cfg.phi_max + 1))
            shapes = rng.choice(cfg.n_shapes, phi, replace=False)
            colors = rng.integers(cfg.n_colors, size=phi)
            qtype = names[rng.choice(len(names), p=probs)]
            words, answer = _question(qtype, rng, shapes, colors, cfg)
            tok = vocab.encode(words, cfg.T)
            sig = tok.tobytes() + shapes.tobytes() + colors.tobytes()
            if exclude is not None and sig in exclude:
                continue
            seen.add(sig)
            corner = rng.random((2, phi))
            extent = 0.05 + 0.3 * rng.random((2, phi))
            tokens[i] = tok
            Y[i, :, :phi] = encode_objects(shapes, colors, shape_codes, color_codes, cfg.noise, rng)
            mask[i, :phi] = True
            boxes[i, :2, :phi] = corner
            boxes[i, 2:, :phi] = np.minimum(corner + extent, 1.0)
            labels[i] = answer_index[answer]
            qtypes[i] = qtype
            shp[i, :phi] = shapes
            col[i, :phi] = colors
            i += 1
        return SyntheticSplit(tokens, Y, mask, boxes, labels, qtypes.astype(str), shp, col)

    train = make(cfg.n_train, None)
    train_sigs = set(seen)
    val = make(cfg.n_val, train_sigs)
    return SyntheticTask(cfg, vocab, answers, shape_codes, color_codes, train, val)
