"""3x3 grid scenes: sampling, rendering, and the symbolic answer oracle."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import lang
from ..lang import COLORS, RELATIONS, SHAPES

GRID = 3
CELL = 10
IMAGE_SIZE = GRID * CELL
P_EMPTY = 0.4

RGB = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}

Cell = tuple[str, str] | None  # (shape, color)


@dataclass(frozen=True)
class GridSpec:
    """Nine cells in row-major order, row 0 at the top."""

    cells: tuple[Cell, ...]

    def __post_init__(self):
        if len(self.cells) != GRID * GRID:
            raise ValueError("a grid has exactly 9 cells")
        if all(c is None for c in self.cells):
            raise ValueError("a grid needs at least one object")

    def encode(self) -> bytes:
        return bytes(encode_cell(c) for c in self.cells)

    @classmethod
    def decode(cls, raw: Sequence[int]) -> "GridSpec":
        return cls(tuple(decode_cell(b) for b in raw))

    def __str__(self) -> str:
        rows = []
        for r in range(GRID):
            row = self.cells[r * GRID:(r + 1) * GRID]
            rows.append(" ".join("." if c is None else f"{c[1][0]}{c[0][0]}" for c in row))
        return "\n".join(rows)


def encode_cell(c: Cell) -> int:
    if c is None:
        return 0
    return 1 + SHAPES.index(c[0]) * 3 + COLORS.index(c[1])


def decode_cell(b: int) -> Cell:
    if b == 0:
        return None
    k = b - 1
    return SHAPES[k // 3], COLORS[k % 3]


def sample_codes(rng: np.random.Generator, n: int, p_empty: float = P_EMPTY) -> np.ndarray:
    """Draw ``n`` grids as (n, 9) cell codes; all-empty rows are redrawn."""
    if not 0.0 <= p_empty < 1.0:
        raise ValueError("p_empty must lie in [0, 1): an all-empty grid is not allowed")
    out = np.empty((0, 9), dtype=np.uint8)
    while len(out) < n:
        empty = rng.random((n, 9)) < p_empty
        pair = rng.integers(0, 9, size=(n, 9))
        codes = np.where(empty, 0, pair + 1).astype(np.uint8)
        codes = codes[codes.any(axis=1)]
        out = np.concatenate([out, codes])
    return out[:n]


def sample_grid(rng: np.random.Generator, p_empty: float = P_EMPTY) -> GridSpec:
    return GridSpec.decode(sample_codes(rng, 1, p_empty)[0])


# ----------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str) -> np.ndarray:
    """Boolean CELL x CELL footprint with a one-pixel margin."""
    yy, xx = np.mgrid[0:CELL, 0:CELL].astype(np.float64) + 0.5
    inner = (yy > 1) & (yy < CELL - 1) & (xx > 1) & (xx < CELL - 1)
    if shape == "square":
        return inner
    if shape == "circle":
        c = CELL / 2
        return inner & ((yy - c) ** 2 + (xx - c) ** 2 <= (CELL / 2 - 1) ** 2)
    if shape == "triangle":
        # apex at top centre, base on the bottom margin
        top, bottom, half = 1.0, CELL - 1.0, CELL / 2 - 1
        frac = (yy - top) / (bottom - top)
        return inner & (np.abs(xx - CELL / 2) <= half * frac)
    raise ValueError(shape)


SHAPE_MASKS = {s: _shape_mask(s) for s in SHAPES}


def render_codes(codes: Sequence[int]) -> np.ndarray:
    """Render 9 cell codes to a (30, 30, 3) uint8 image on a black background."""
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    for k, code in enumerate(codes):
        cell = decode_cell(int(code))
        if cell is None:
            continue
        shape, color = cell
        r, c = divmod(k, GRID)
        block = img[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
        block[SHAPE_MASKS[shape]] = np.array(RGB[color]) * 255
    return img


def render(grid: GridSpec) -> np.ndarray:
    """Float raster in [0, 1], shape (30, 30, 3)."""
    return render_codes(grid.encode()).astype(np.float32) / 255.0


@dataclass(frozen=True)
class Stats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]


def channel_stats(images_u8: np.ndarray) -> Stats:
    x = images_u8.reshape(-1, 3).astype(np.float64) / 255.0
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return Stats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


def standardize(raster: np.ndarray, stats: Stats) -> np.ndarray:
    """(…, 30, 30, 3) raster -> (…, 3, 30, 30) float32 standardized per channel.

    ``raster`` may be uint8 (0-255) or float in [0, 1].
    """
    x = raster.astype(np.float32)
    if raster.dtype == np.uint8:
        x /= 255.0
    mean = np.asarray(stats.mean, dtype=np.float32)
    std = np.maximum(np.asarray(stats.std, dtype=np.float32), 1e-6)
    x = (x - mean) / std
    return np.ascontiguousarray(np.moveaxis(x, -1, -3))


# ----------------------------------------------------------------------------
# symbolic execution over 9-bit cell masks


def _related_table() -> dict[str, list[int]]:
    """table[r][j] = mask of cells standing in relation r to cell j."""
    table = {}
    for rel in RELATIONS:
        rows = []
        for j in range(9):
            rj, cj = divmod(j, GRID)
            m = 0
            for i in range(9):
                ri, ci = divmod(i, GRID)
                if rel == "above":
                    ok = ci == cj and rj > ri
                elif rel == "below":
                    ok = ci == cj and rj < ri
                elif rel == "left_of":
                    ok = ri == rj and cj > ci
                else:
                    ok = ri == rj and cj < ci
                if ok:
                    m |= 1 << i
            rows.append(m)
        table[rel] = rows
    return table


_REL = _related_table()
_TRANSFORM = {lang.transform_token(r): r for r in RELATIONS}
_COLOR = {lang.color_token(c): c for c in COLORS}
_SHAPE = {lang.shape_token(s): s for s in SHAPES}


def transform_mask(rel: str, mask: int) -> int:
    out = 0
    for j in range(9):
        if mask >> j & 1:
            out |= _REL[rel][j]
    return out


def _attr_masks(codes: Sequence[int]) -> tuple[int, dict[int, int]]:
    scene = 0
    by_token: dict[int, int] = {t: 0 for t in (*_COLOR, *_SHAPE)}
    for k, code in enumerate(codes):
        cell = decode_cell(int(code))
        if cell is None:
            continue
        bit = 1 << k
        scene |= bit
        by_token[lang.shape_token(cell[0])] |= bit
        by_token[lang.color_token(cell[1])] |= bit
    return scene, by_token


def evaluate_mask(tree: lang.Node, codes: Sequence[int]) -> int:
    scene, attrs = _attr_masks(codes)

    def ev(n: lang.Node) -> int:
        t = n.token
        if t == lang.SCENE:
            return scene
        if t == lang.AND:
            return ev(n.children[0]) & ev(n.children[1])
        child = ev(n.children[0])
        if t in _TRANSFORM:
            return transform_mask(_TRANSFORM[t], child)
        return child & attrs[t]

    return ev(tree)


def symbolic_execute(program, grid: GridSpec | Sequence[int]) -> bool:
    """Answer (True = yes) of a program on a grid. ``program`` is a token list or tree."""
    tree = program if isinstance(program, lang.Node) else lang.parse_prefix(program)
    codes = grid.encode() if isinstance(grid, GridSpec) else grid
    return evaluate_mask(tree, codes) != 0


def provably_empty(program: Sequence[int]) -> bool:
    """True when the root is an ``and`` of two attribute filters over ``scene``
    that demand conflicting values (e.g. two different shapes), so no grid
    can answer yes."""
    tree = lang.parse_prefix(program)
    if tree.token != lang.AND:
        return False

    def constraint(n: lang.Node):
        colors, shapes = set(COLORS), set(SHAPES)
        while n.token != lang.SCENE:
            if n.token in _COLOR:
                colors &= {_COLOR[n.token]}
            elif n.token in _SHAPE:
                shapes &= {_SHAPE[n.token]}
            else:
                return None
            n = n.children[0]
        return colors, shapes

    a, b = constraint(tree.children[0]), constraint(tree.children[1])
    if a is None or b is None:
        return False
    return not (a[0] & b[0]) or not (a[1] & b[1])
