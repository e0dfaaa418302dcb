"""Execution engine: assembles neural modules along a program tree.

Three module families are available:

* ``tensor_film`` -- feature-map modules whose convolution weights are shared
  by every module and specialised by FiLM parameters predicted from a
  per-token embedding, with left/down cumulative-sum features;
* ``tensor`` -- feature-map modules with dedicated residual blocks per token;
* ``vector`` -- modules emitting vectors; FiLM parameters come from the token
  embedding and the child vectors and modulate convolutions over the image.

A batch of programs is executed level by level: every module invocation at
the same height of its tree runs in one call, so shared weights see one big
batch instead of many small ones.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import lang
from .autodiff import Tensor
from .params import ParameterStore

ARCHITECTURES = ("tensor_film", "tensor", "vector")
OPERATORS = lang.OPERATOR_IDS  # 12 tokens, scene included
OP_INDEX = {t: i for i, t in enumerate(OPERATORS)}
N_ANSWERS = 2


@dataclass(frozen=True)
class EEConfig:
    arch: str = "tensor_film"
    width: int = 64
    embed: int = 64
    film_hidden: int = 64
    cls_hidden: int = 64
    in_channels: int = 3

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")


@dataclass
class AssembledGraph:
    """Module invocations grouped by height (children before parents).

    ``levels[k]`` lists ``(example, token, child_a, child_b)`` where children
    are row indices into the running bank of outputs; ``roots[b]`` is the bank
    row holding example ``b``'s top-level output.
    """

    levels: list[list[tuple[int, int, int, int]]]
    roots: list[int]
    scene_roots: list[int]


def assemble(trees: Sequence[lang.Node], leaf_row) -> AssembledGraph:
    """Lay out module invocations for a batch of trees.

    ``leaf_row(b)`` gives the bank row a ``scene`` leaf of example ``b`` reads;
    the bank starts with ``max(leaf_row) + 1`` rows and each level's outputs
    are appended after the previous level's.
    """
    by_height: dict[int, list] = {}

    def visit(n: lang.Node, b: int):
        if n.token not in lang.ARITY:
            raise lang.InvalidToken(f"token {n.token} cannot be executed")
        if n.token == lang.SCENE:
            return ("leaf", b), 0
        kids = [visit(c, b) for c in n.children]
        h = 1 + max(k[1] for k in kids)
        level = by_height.setdefault(h, [])
        level.append((b, n.token, [k[0] for k in kids]))
        return ("node", h, len(level) - 1), h

    root_refs = [visit(t, b)[0] for b, t in enumerate(trees)]
    offsets = {}
    nxt = max(leaf_row(b) for b in range(len(trees))) + 1
    for h in sorted(by_height):
        offsets[h] = nxt
        nxt += len(by_height[h])

    def row(ref) -> int:
        return leaf_row(ref[1]) if ref[0] == "leaf" else offsets[ref[1]] + ref[2]

    levels = []
    for h in sorted(by_height):
        lvl = []
        for b, tok, kids in by_height[h]:
            a = row(kids[0])
            lvl.append((b, tok, a, row(kids[1]) if len(kids) > 1 else a))
        levels.append(lvl)
    scene_roots = [b for b, r in enumerate(root_refs) if r[0] == "leaf"]
    return AssembledGraph(levels, [row(r) for r in root_refs], scene_roots)


def _kaiming(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class ExecutionEngine:
    def __init__(self, cfg: EEConfig = EEConfig(), rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store = ParameterStore()
        C, E = cfg.width, cfg.embed
        self._conv("stem.0", cfg.in_channels, C, 3, rng)
        self._conv("stem.1", C, C, 3, rng)
        n_ops = len(OPERATORS)
        if cfg.arch == "tensor_film":
            self.store.add("embed", rng.standard_normal((n_ops, E)))
            self._film_mlp("film.h", E, C, rng)
            self._film_mlp("film.x", E, C, rng)
            self._film_mlp("film.g", E, 3 * C, rng)
            self._conv("w1", 3 * C, C, 3, rng)
            # residual branches start closed so deep programs keep O(1) activations
            self._conv("w2", 3 * C, 3 * C, 3, rng, gain=0.0)
            self._conv("proj", 3 * C, C, 1, rng)
        elif cfg.arch == "tensor":
            for t in OPERATORS:
                if t == lang.SCENE:
                    continue
                name = f"mod.{lang.surface(t)}"
                if lang.ARITY[t] == 2:
                    self._conv(f"{name}.proj", 2 * C, C, 1, rng)
                self._conv(f"{name}.conv1", C, C, 3, rng)
                self._conv(f"{name}.conv2", C, C, 3, rng, gain=0.0)
        else:
            self.store.add("embed", rng.standard_normal((n_ops, E)))
            self.store.add("start", rng.standard_normal(C) * 0.1)
            self._film_mlp("film.v", E + 2 * C, C, rng, n_sites=2)
            self._conv("va", C, C, 3, rng)
            self._conv("vb", C, C, 3, rng)
        if cfg.arch != "vector":
            self._conv("cls.conv", C, C, 1, rng)
        self._linear("cls.fc1", C, cfg.cls_hidden, rng)
        self._linear("cls.fc2", cfg.cls_hidden, N_ANSWERS, rng)

    # ------------------------------------------------------------------
    # parameter helpers

    def _conv(self, name, cin, cout, k, rng, gain: float = 1.0):
        self.store.add(f"{name}.w", gain * _kaiming(rng, (cout, cin, k, k), cin * k * k))
        self.store.add(f"{name}.b", np.zeros(cout))

    def _linear(self, name, din, dout, rng):
        self.store.add(f"{name}.w", _kaiming(rng, (dout, din), din))
        self.store.add(f"{name}.b", np.zeros(dout))

    def _film_mlp(self, name, din, width, rng, n_sites: int = 1):
        """2-layer MLP emitting ``n_sites`` (gamma, beta) pairs of ``width``
        channels each, initialised to gamma=1, beta=0."""
        hid = self.cfg.film_hidden
        self._linear(f"{name}.l1", din, hid, rng)
        self.store.add(f"{name}.l2.w", np.zeros((2 * width * n_sites, hid)))
        one_site = np.concatenate([np.ones(width), np.zeros(width)])
        self.store.add(f"{name}.l2.b", np.tile(one_site, n_sites))

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.store.state_dict()

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.store.load_state_dict(state)

    def clone(self) -> "ExecutionEngine":
        other = object.__new__(ExecutionEngine)
        other.cfg = self.cfg
        other.store = self.store.clone()
        return other

    def _p(self, name: str) -> Tensor:
        return self.store[name]

    def _conv2d(self, name, x, stride=1, pad=None):
        w = self._p(f"{name}.w")
        if pad is None:
            pad = w.shape[-1] // 2
        return ad.conv2d(x, w, self._p(f"{name}.b"), stride=stride, pad=pad)

    def _mlp2(self, name, x):
        h = ad.relu(ad.linear(x, self._p(f"{name}.l1.w"), self._p(f"{name}.l1.b")))
        return ad.linear(h, self._p(f"{name}.l2.w"), self._p(f"{name}.l2.b"))

    # ------------------------------------------------------------------
    # building blocks

    def stem(self, images: Tensor) -> Tensor:
        """(N, 3, 30, 30) standardized images -> (N, C, 15, 15)."""
        h = ad.relu(self._conv2d("stem.0", images))
        return ad.relu(self._conv2d("stem.1", h, stride=2, pad=1))

    def film_params(self, site: str, op_idx: np.ndarray) -> tuple[Tensor, Tensor]:
        out = self._mlp2(f"film.{site}", ad.index_select(self._p("embed"), op_idx))
        c = out.shape[1] // 2
        return out[:, :c], out[:, c:]

    def forward_tensor_film(self, op_idx: np.ndarray, h1: Tensor, h2: Tensor, x: Tensor) -> Tensor:
        """Batched Tensor-FiLM module; row i uses token ``OPERATORS[op_idx[i]]``."""
        C = self.cfg.width
        if h1.shape[1] != C or h2.shape[1] != C or x.shape[1] != C:
            raise ad.ShapeError("tensor_film module inputs must have width C")
        gh, bh = self.film_params("h", op_idx)
        gx, bx = self.film_params("x", op_idx)
        gg, bg = self.film_params("g", op_idx)
        h1t = ad.film(h1, gh, bh)
        h2t = ad.film(h2, gh, bh)
        e = ad.concat([ad.film(x, gx, bx), ad.maximum(h1t, h2t), h1t - h2t], axis=1)
        g = self._conv2d("w1", e)
        a = ad.relu(ad.concat([g, ad.cumsum_left(g), ad.cumsum_down(g)], axis=1))
        y = ad.relu(self._conv2d("w2", ad.film(a, gg, bg)) + e)
        return self._conv2d("proj", y)

    def forward_tensor_nmn(self, token: int, h1: Tensor, h2: Tensor | None = None) -> Tensor:
        """Dedicated-weight residual module for one token (batched over rows)."""
        name = f"mod.{lang.surface(token)}"
        if lang.ARITY[token] == 2:
            if h2 is None:
                raise ValueError("binary module needs two inputs")
            inp = self._conv2d(f"{name}.proj", ad.concat([h1, h2], axis=1))
        else:
            inp = h1
        r = ad.relu(self._conv2d(f"{name}.conv1", inp))
        return ad.relu(inp + self._conv2d(f"{name}.conv2", r))

    def forward_vector_nmn(self, op_idx: np.ndarray, v1: Tensor, v2: Tensor, x: Tensor) -> Tensor:
        """Vector module: FiLM from [embedding; v1; v2], two residual conv blocks, max-pool."""
        emb = ad.index_select(self._p("embed"), op_idx)
        fp = self._mlp2("film.v", ad.concat([emb, v1, v2], axis=1))
        C = self.cfg.width
        g1, b1, g2, b2 = fp[:, :C], fp[:, C:2 * C], fp[:, 2 * C:3 * C], fp[:, 3 * C:]
        z1 = ad.relu(ad.film(self._conv2d("va", x), g1, b1)) + x
        z2 = ad.relu(ad.film(self._conv2d("vb", z1), g2, b2)) + z1
        return ad.global_max_pool(z2)

    def classify(self, feats: Tensor) -> Tensor:
        if self.cfg.arch == "vector":
            v = feats
        else:
            v = ad.global_max_pool(ad.relu(self._conv2d("cls.conv", feats)))
        h = ad.relu(ad.linear(v, self._p("cls.fc1.w"), self._p("cls.fc1.b")))
        return ad.linear(h, self._p("cls.fc2.w"), self._p("cls.fc2.b"))

    # ------------------------------------------------------------------
    # program execution

    def execute(self, trees: Sequence[lang.Node | Sequence[int]], images) -> Tensor:
        """Answer logits (B, 2) for standardized images (B, 3, 30, 30)."""
        trees = [t if isinstance(t, lang.Node) else lang.parse_prefix(t) for t in trees]
        images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=ad.DTYPE))
        if len(trees) != images.shape[0]:
            raise ValueError("one program per image")
        feat = self.stem(images)
        return self.execute_features(trees, feat)

    def execute_features(self, trees: Sequence[lang.Node], feat: Tensor) -> Tensor:
        arch = self.cfg.arch
        B = len(trees)
        if arch == "vector":
            graph = assemble(trees, lambda b: 0)
            bank = ad.reshape(self._p("start"), (1, -1))
        else:
            graph = assemble(trees, lambda b: b)
            bank = feat
        for lvl in graph.levels:
            ex = np.array([n[0] for n in lvl])
            toks = np.array([n[1] for n in lvl])
            ia = np.array([n[2] for n in lvl])
            ib = np.array([n[3] for n in lvl])
            h1 = ad.index_select(bank, ia)
            h2 = ad.index_select(bank, ib)
            if arch == "tensor_film":
                out = self.forward_tensor_film(np.array([OP_INDEX[t] for t in toks]), h1, h2,
                                               ad.index_select(feat, ex))
            elif arch == "vector":
                out = self.forward_vector_nmn(np.array([OP_INDEX[t] for t in toks]), h1, h2,
                                              ad.index_select(feat, ex))
            else:
                out = self._tensor_level(toks, h1, h2)
            bank = ad.concat([bank, out], axis=0)
        roots = np.array(graph.roots)
        if arch == "vector" and graph.scene_roots:
            # a bare `scene` program reads the pooled image features
            pooled = ad.global_max_pool(ad.index_select(feat, np.array(graph.scene_roots)))
            start = bank.shape[0]
            bank = ad.concat([bank, pooled], axis=0)
            for k, b in enumerate(graph.scene_roots):
                roots[b] = start + k
        return self.classify(ad.index_select(bank, roots))

    def _tensor_level(self, toks: np.ndarray, h1: Tensor, h2: Tensor) -> Tensor:
        pieces, order = [], []
        for t in sorted(set(toks.tolist())):
            rows = np.flatnonzero(toks == t)
            a = ad.index_select(h1, rows)
            b = ad.index_select(h2, rows) if lang.ARITY[t] == 2 else None
            pieces.append(self.forward_tensor_nmn(t, a, b))
            order.append(rows)
        out = ad.concat(pieces, axis=0)
        inv = np.argsort(np.concatenate(order))
        return ad.index_select(out, inv)

    def predict(self, trees, images) -> np.ndarray:
        return self.execute(trees, images).data.argmax(axis=1)
