"""The layout language: tokens, arities, prefix (Polish) serialization.

Programs are handled as lists of integer token ids in prefix order. Text
form is the whitespace-separated surface strings, e.g.::

    and color[green] scene transform[left_of] shape[square] scene
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

MAX_PROGRAM_LEN = 16

COLORS = ("red", "green", "blue")
SHAPES = ("circle", "triangle", "square")
RELATIONS = ("above", "below", "left_of", "right_of")


@dataclass(frozen=True)
class ProgramToken:
    id: int
    surface: str
    arity: int | None
    kind: str  # "special" | "operator"


def _build_vocab() -> tuple[ProgramToken, ...]:
    toks = [ProgramToken(i, s, None, "special")
            for i, s in enumerate(("<NULL>", "<START>", "<END>", "<UNK>"))]
    ops = [("scene", 0), ("and", 2)]
    ops += [(f"color[{c}]", 1) for c in COLORS]
    ops += [(f"shape[{s}]", 1) for s in SHAPES]
    ops += [(f"transform[{r}]", 1) for r in RELATIONS]
    toks += [ProgramToken(len(toks) + i, s, a, "operator") for i, (s, a) in enumerate(ops)]
    return tuple(toks)


_VOCAB = _build_vocab()
_BY_SURFACE = {t.surface: t for t in _VOCAB}

NULL, START, END, UNK = 0, 1, 2, 3
SCENE = _BY_SURFACE["scene"].id
AND = _BY_SURFACE["and"].id
VOCAB_SIZE = len(_VOCAB)
OPERATOR_IDS = tuple(t.id for t in _VOCAB if t.kind == "operator")
SPECIAL_IDS = tuple(t.id for t in _VOCAB if t.kind == "special")
ARITY = {t.id: t.arity for t in _VOCAB if t.kind == "operator"}


def vocabulary() -> list[ProgramToken]:
    return list(_VOCAB)


def token_id(surface: str) -> int:
    return _BY_SURFACE[surface].id


def surface(tid: int) -> str:
    return _VOCAB[tid].surface


def arity(tok: int | str) -> int:
    tid = token_id(tok) if isinstance(tok, str) else tok
    a = _VOCAB[tid].arity
    if a is None:
        raise ValueError(f"special token {_VOCAB[tid].surface} has no arity")
    return a


def color_token(c: str) -> int:
    return token_id(f"color[{c}]")


def shape_token(s: str) -> int:
    return token_id(f"shape[{s}]")


def transform_token(r: str) -> int:
    return token_id(f"transform[{r}]")


def tokenize(text: str) -> list[int]:
    try:
        return [token_id(w) for w in text.split()]
    except KeyError as exc:
        raise ValueError(f"unknown program token {exc.args[0]!r}") from None


def to_text(seq: Iterable[int]) -> str:
    return " ".join(surface(t) for t in seq)


# ----------------------------------------------------------------------------
# trees


@dataclass(frozen=True)
class Node:
    token: int
    children: tuple["Node", ...] = ()

    def __str__(self) -> str:
        if not self.children:
            return surface(self.token)
        return f"{surface(self.token)}({', '.join(map(str, self.children))})"

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def height(self) -> int:
        return 0 if not self.children else 1 + max(c.height() for c in self.children)


class ProgramParseError(ValueError):
    pass


class EmptySequence(ProgramParseError):
    pass


class Underflow(ProgramParseError):
    """An operator ran out of tokens before receiving all its operands."""


class TrailingTokens(ProgramParseError):
    pass


class InvalidToken(ProgramParseError):
    pass


def parse_prefix(seq: Sequence[int]) -> Node:
    seq = list(seq)
    if not seq:
        raise EmptySequence("empty program")
    pos = 0

    def parse() -> Node:
        nonlocal pos
        if pos >= len(seq):
            raise Underflow(f"operator lacks operands in {to_text(seq)!r}")
        tid = seq[pos]
        if tid not in ARITY:
            raise InvalidToken(f"token id {tid} is not an operator")
        pos += 1
        return Node(tid, tuple(parse() for _ in range(ARITY[tid])))

    root = parse()
    if pos != len(seq):
        raise TrailingTokens(f"{len(seq) - pos} tokens after complete program")
    return root


def serialize(tree: Node) -> list[int]:
    out: list[int] = []
    stack = [tree]
    while stack:
        n = stack.pop()
        out.append(n.token)
        stack.extend(reversed(n.children))
    return out


def validate_prefix(seq: Sequence[int]) -> bool:
    try:
        parse_prefix(seq)
    except ProgramParseError:
        return False
    return True


def pending_after(prefix: Sequence[int]) -> int:
    """Pending-operand counter after emitting ``prefix`` (starts at 1).

    Returns -1 when the prefix already over-completed or holds a non-operator.
    """
    p = 1
    for t in prefix:
        if p <= 0 or t not in ARITY:
            return -1
        p += ARITY[t] - 1
    return p


def allowed(p: int, length: int, tok_arity: int, max_len: int) -> bool:
    """Whether a token of ``tok_arity`` may follow a prefix of ``length`` tokens
    with ``p`` pending operands and still complete within ``max_len``."""
    if p <= 0 or length >= max_len:
        return False
    new_p = p - 1 + tok_arity
    return 0 <= new_p <= max_len - length - 1


def feasible_next(prefix: Sequence[int], max_len: int = MAX_PROGRAM_LEN) -> set[int]:
    p = pending_after(prefix)
    n = len(prefix)
    return {t for t, a in ARITY.items() if allowed(p, n, a, max_len)}


def exact_match(a: Sequence[int], b: Sequence[int]) -> bool:
    return list(a) == list(b)


def repair(seq: Sequence[int], max_len: int | None = None) -> list[int]:
    """Make an arbitrary token sequence executable.

    Truncates at the first token that cannot extend a valid prefix (a special,
    or anything after the program already closed), then appends ``scene``
    until no operand is pending.
    """
    out: list[int] = []
    p = 1
    for t in seq:
        if p == 0 or t not in ARITY:
            break
        out.append(t)
        p += ARITY[t] - 1
    out.extend([SCENE] * p)
    return out
