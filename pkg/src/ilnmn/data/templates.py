"""The twelve question templates, question vocabulary, and ground-truth programs."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import lang
from ..lang import COLORS, RELATIONS, SHAPES

QUESTION_SPECIALS = ("<NULL>", "<START>", "<END>", "<UNK>")
QUESTION_WORDS = ("is", "a", "shape", "red", "green", "blue", "circle", "triangle",
                  "square", "above", "below", "left", "right", "of")
QUESTION_VOCAB = QUESTION_SPECIALS + QUESTION_WORDS
QUESTION_VOCAB_SIZE = len(QUESTION_VOCAB)
_QID = {w: i for i, w in enumerate(QUESTION_VOCAB)}

VERTICAL = ("above", "below")
HORIZONTAL = ("left_of", "right_of")
RELATIVE2 = tuple((a, b) for a in RELATIONS for b in RELATIONS
                  if (a in VERTICAL) != (b in VERTICAL))


def encode_question(text: str) -> list[int]:
    return [_QID.get(w, _QID["<UNK>"]) for w in text.lower().split()]


def decode_question(ids) -> str:
    return " ".join(QUESTION_VOCAB[i] for i in ids)


def _rel_words(r: str) -> str:
    return r.replace("_", " ")


@dataclass(frozen=True)
class Template:
    id: int
    pattern: str
    split: str  # "train" | "eval"
    unique: int
    slots: tuple[str, ...]
    build: Callable[..., tuple[str, str]]

    def instances(self):
        pools = {"COLOR": COLORS, "SHAPE": SHAPES, "REL1": RELATIONS, "REL2": RELATIVE2}
        for combo in itertools.product(*(pools[s] for s in self.slots)):
            yield self.build(*combo)


def _t1(c1, r, c2):
    return (f"is a {c1} shape {_rel_words(r)} a {c2} shape",
            f"and color[{c1}] scene transform[{r}] color[{c2}] scene")


def _t2(s, r, c):
    return (f"is a {s} {_rel_words(r)} a {c} shape",
            f"and shape[{s}] scene transform[{r}] color[{c}] scene")


def _t3(s, r2, c):
    r1, r2_ = r2
    return (f"is a {s} {_rel_words(r1)} {_rel_words(r2_)} a {c} shape",
            f"and shape[{s}] scene transform[{r1}] transform[{r2_}] color[{c}] scene")


def _t4(s1, r2, s2):
    r1, r2_ = r2
    return (f"is a {s1} {_rel_words(r1)} {_rel_words(r2_)} a {s2}",
            f"and shape[{s1}] scene transform[{r1}] transform[{r2_}] shape[{s2}] scene")


def _t5(c, s):
    return f"is a {c} shape a {s}", f"and color[{c}] scene shape[{s}] scene"


def _t6(s, c):
    return f"is a {s} {c}", f"and shape[{s}] scene color[{c}] scene"


def _t7(s1, s2):
    return f"is a {s1} a {s2}", f"and shape[{s1}] scene shape[{s2}] scene"


def _t8(c1, r2, c2):
    r1, r2_ = r2
    return (f"is a {c1} shape {_rel_words(r1)} {_rel_words(r2_)} a {c2} shape",
            f"and color[{c1}] scene transform[{r1}] transform[{r2_}] color[{c2}] scene")


def _t9(c, r, s):
    return (f"is a {c} shape {_rel_words(r)} a {s}",
            f"and color[{c}] scene transform[{r}] shape[{s}] scene")


def _t10(c, r2, s):
    r1, r2_ = r2
    return (f"is a {c} shape {_rel_words(r1)} {_rel_words(r2_)} a {s}",
            f"and color[{c}] scene transform[{r1}] transform[{r2_}] shape[{s}] scene")


def _t11(s1, r, s2):
    return (f"is a {s1} {_rel_words(r)} a {s2}",
            f"and shape[{s1}] scene transform[{r}] shape[{s2}] scene")


def _t12(c1, c2):
    return f"is a {c1} shape {c2}", f"and color[{c1}] scene color[{c2}] scene"


TEMPLATES: tuple[Template, ...] = (
    Template(1, "is a COLOR shape RELATIVE(1) a COLOR shape", "train", 36, ("COLOR", "REL1", "COLOR"), _t1),
    Template(2, "is a SHAPE RELATIVE(1) a COLOR shape", "train", 36, ("SHAPE", "REL1", "COLOR"), _t2),
    Template(3, "is a SHAPE RELATIVE(2) a COLOR shape", "train", 15, ("SHAPE", "REL2", "COLOR"), _t3),
    Template(4, "is a SHAPE RELATIVE(2) a SHAPE", "train", 21, ("SHAPE", "REL2", "SHAPE"), _t4),
    Template(5, "is a COLOR shape a SHAPE", "train", 9, ("COLOR", "SHAPE"), _t5),
    Template(6, "is a SHAPE COLOR", "train", 9, ("SHAPE", "COLOR"), _t6),
    Template(7, "is a SHAPE a SHAPE", "train", 9, ("SHAPE", "SHAPE"), _t7),
    Template(8, "is a COLOR shape RELATIVE(2) a COLOR shape", "eval", 15, ("COLOR", "REL2", "COLOR"), _t8),
    Template(9, "is a COLOR shape RELATIVE(1) a SHAPE", "eval", 36, ("COLOR", "REL1", "SHAPE"), _t9),
    Template(10, "is a COLOR shape RELATIVE(2) a SHAPE", "eval", 13, ("COLOR", "REL2", "SHAPE"), _t10),
    Template(11, "is a SHAPE RELATIVE(1) a SHAPE", "eval", 36, ("SHAPE", "REL1", "SHAPE"), _t11),
    Template(12, "is a COLOR shape COLOR", "eval", 9, ("COLOR", "COLOR"), _t12),
)
TRAIN_TEMPLATES = tuple(t for t in TEMPLATES if t.split == "train")
EVAL_TEMPLATES = tuple(t for t in TEMPLATES if t.split == "eval")


def template(tid: int) -> Template:
    return TEMPLATES[tid - 1]


def enumerate_questions(t: Template, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    """All (question ids, program ids) pairs kept for a template.

    When the combinatorial space exceeds the template's unique-question
    count, a seeded uniform subsample without replacement is kept, in
    enumeration order.
    """
    full = [(encode_question(q), lang.tokenize(p)) for q, p in t.instances()]
    if len(full) > t.unique:
        rng = np.random.default_rng([seed, 1000 + t.id])
        keep = np.sort(rng.choice(len(full), size=t.unique, replace=False))
        full = [full[i] for i in keep]
    return full
