"""Independent oracles used by the test suite and ``ilnmn verify``.

None of these reuse the code they check: gradients come from central finite
differences, singular values from a one-sided Jacobi sweep, program answers
from plain Python set semantics, and Adam from a scalar re-implementation.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import lang
from .autodiff import Tape, Tensor

# ----------------------------------------------------------------------------
# finite differences


def numeric_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], h: float = 1e-3):
    """Central differences of scalar ``f`` with respect to each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + h
            fp = f(arrays)
            a[i] = old - h
            fm = f(arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max|a - n| / max(max|n|, max|a|): a per-tensor relative error that
    stays meaningful when individual entries are near zero."""
    scale = max(float(np.abs(numeric).max(initial=0)), float(np.abs(analytic).max(initial=0)), floor)
    return float(np.abs(analytic - numeric).max(initial=0)) / scale


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3,
              seed: int = 0, wrt: Sequence[int] | None = None) -> float:
    """Largest relative error between tape gradients and finite differences.

    ``fn`` maps Tensors to a Tensor of any shape; the check contracts the
    output with a fixed random tensor so every output element contributes.
    Inputs are promoted to float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    probe = fn(*[Tensor(a) for a in arrays])
    r = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * r).sum())

    ts = [Tensor(a.copy(), requires_grad=(k in wrt)) for k, a in enumerate(arrays)]
    with Tape() as tape:
        out = fn(*ts)
        tape.backward(ad.sum(ad.mul(out, Tensor(r))))
    worst = 0.0
    for k in wrt:
        sub = [a.copy() for a in arrays]

        def fk(arrs_k, k=k, sub=sub):
            sub[k] = arrs_k[0]
            return scalar(sub)
        (num,) = numeric_grad(fk, [arrays[k].copy()], h)
        ana = ts[k].grad if ts[k].grad is not None else np.zeros_like(num)
        worst = max(worst, relative_error(ana, num))
    return worst


def gradcheck_params(loss_fn: Callable[[], Tensor], store, names: Sequence[str] | None = None,
                     h: float = 1e-3, max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Finite-difference check of a scalar loss against parameters in ``store``
    (cast it to float64 first). ``max_entries`` samples coordinates per
    parameter to bound cost."""
    names = list(names) if names is not None else list(store)
    store.zero_grad()
    with Tape() as tape:
        tape.backward(loss_fn())
    analytic = {n: (store[n].grad.copy() if store[n].grad is not None else np.zeros_like(store[n].data))
                for n in names}
    store.zero_grad()
    rng = np.random.default_rng(seed)
    out = {}
    for n in names:
        p = store[n].data
        coords = list(np.ndindex(p.shape))
        if max_entries is not None and len(coords) > max_entries:
            coords = [coords[i] for i in rng.choice(len(coords), max_entries, replace=False)]
        num = np.zeros(len(coords))
        ana = np.array([analytic[n][c] for c in coords])
        for j, c in enumerate(coords):
            old = p[c]
            p[c] = old + h
            fp = loss_fn().item()
            p[c] = old - h
            fm = loss_fn().item()
            p[c] = old
            num[j] = (fp - fm) / (2 * h)
        out[n] = relative_error(ana, num)
    return out


# ----------------------------------------------------------------------------
# singular values by one-sided Jacobi


def jacobi_singular_values(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Singular values (descending) via Hestenes one-sided Jacobi rotations."""
    u = np.array(a, dtype=np.float64)
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = float(u[:, i] @ u[:, i])
                beta = float(u[:, j] @ u[:, j])
                gamma = float(u[:, i] @ u[:, j])
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1 + zeta * zeta))
                c = 1 / math.sqrt(1 + t * t)
                s = c * t
                ui = u[:, i].copy()
                u[:, i] = c * ui - s * u[:, j]
                u[:, j] = s * ui + c * u[:, j]
        if not rotated:
            break
    return np.sort(np.sqrt((u * u).sum(axis=0)))[::-1]


# ----------------------------------------------------------------------------
# set semantics for programs over grids

_COLOR_NAMES = ("red", "green", "blue")
_SHAPE_NAMES = ("circle", "triangle", "square")


def _cell(code: int):
    if code == 0:
        return None
    shape, color = divmod(code - 1, 3)
    return _SHAPE_NAMES[shape], _COLOR_NAMES[color]


def _related(rel: str, q: tuple[int, int], p: tuple[int, int]) -> bool:
    """Is cell q ``rel`` of child cell p (row 0 at the top)?"""
    (qr, qc), (pr, pc) = q, p
    if rel == "above":
        return qc == pc and pr > qr
    if rel == "below":
        return qc == pc and pr < qr
    if rel == "left_of":
        return qr == pr and pc > qc
    if rel == "right_of":
        return qr == pr and pc < qc
    raise ValueError(rel)


def brute_force_cells(program: Sequence[int], codes: Sequence[int]) -> set[tuple[int, int]]:
    """Evaluate a prefix program to a set of (row, col) cells."""
    cells = {(k // 3, k % 3): _cell(int(c)) for k, c in enumerate(codes)}
    everything = set(cells)
    toks = [lang.surface(t) for t in program]
    pos = 0

    def ev():
        nonlocal pos
        tok = toks[pos]
        pos += 1
        if tok == "scene":
            return {p for p, v in cells.items() if v is not None}
        if tok == "and":
            a = ev()
            return a & ev()
        name, arg = tok[:-1].split("[")
        child = ev()
        if name == "color":
            return {p for p in child if cells[p] and cells[p][1] == arg}
        if name == "shape":
            return {p for p in child if cells[p] and cells[p][0] == arg}
        return {q for q in everything if any(_related(arg, q, p) for p in child)}

    out = ev()
    if pos != len(toks):
        raise ValueError("trailing tokens")
    return out


def brute_force_answer(program: Sequence[int], codes: Sequence[int]) -> bool:
    return bool(brute_force_cells(program, codes))


# ----------------------------------------------------------------------------
# Adam reference


def scripted_adam(grad: Callable[[float], float], w0: float, lr: float, steps: int,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> list[float]:
    """Scalar Adam written from the textbook recurrences; returns w after each step."""
    w, m, v, trace = w0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad(w)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        w = w - lr * mh / (math.sqrt(vh) + eps)
        trace.append(w)
    return trace


# ----------------------------------------------------------------------------
# programs


def random_tree(rng: np.random.Generator, max_depth: int = 5) -> lang.Node:
    ops = list(lang.OPERATOR_IDS)

    def grow(depth):
        if depth >= max_depth:
            return lang.Node(lang.SCENE, ())
        t = int(rng.choice(ops))
        return lang.Node(t, tuple(grow(depth + 1) for _ in range(lang.ARITY[t])))
    return grow(0)


def enumerate_valid(max_len: int, tokens: Sequence[int] | None = None) -> set[tuple[int, ...]]:
    """All valid prefix programs up to ``max_len`` over ``tokens`` by
    generate-and-parse (no counter logic)."""
    tokens = list(tokens) if tokens is not None else list(lang.OPERATOR_IDS)
    out = set()
    for n in range(1, max_len + 1):
        for seq in itertools.product(tokens, repeat=n):
            try:
                lang.parse_prefix(list(seq))
            except lang.ProgramParseError:
                continue
            out.add(seq)
    return out


def enumerate_masked(max_len: int, tokens: Sequence[int] | None = None) -> set[tuple[int, ...]]:
    """Every sequence reachable by decoding under the feasibility mask."""
    tokens = set(tokens) if tokens is not None else set(lang.OPERATOR_IDS)
    out = set()
    stack: list[tuple[int, ...]] = [()]
    while stack:
        pre = stack.pop()
        if pre and lang.pending_after(list(pre)) == 0:
            out.add(pre)
            continue
        for t in lang.feasible_next(list(pre), max_len) & tokens:
            stack.append(pre + (t,))
    return out


# ----------------------------------------------------------------------------
# suite for the CLI


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def run_suite(quick: bool = True) -> list[CheckResult]:
    from .data import scene
    from .params import ParameterStore, SpectralState, adam_step, spectral_normalize

    res: list[CheckResult] = []
    rng = np.random.default_rng(0)
    seeds = range(3 if quick else 20)

    def add(name, ok, detail):
        res.append(CheckResult(name, bool(ok), detail))

    prims = {
        "conv2d": (lambda x, w, b: ad.conv2d(x, w, b, 1, 1), [(2, 2, 4, 4), (3, 2, 3, 3), (3,)]),
        "lstm_step": (lambda x, h, c, wi, wh, bi, bh: ad.lstm_step(x, h, c, wi, wh, bi, bh)[0],
                      [(2, 3), (2, 3), (2, 3), (12, 3), (12, 3), (12,), (12,)]),
        "film": (lambda x, g, b: ad.film(x, g, b), [(2, 2, 2, 2), (2,), (2,)]),
        "cumsum_left": (lambda x: ad.cumsum_left(x), [(2, 3, 4)]),
        "cumsum_down": (lambda x: ad.cumsum_down(x), [(2, 3, 4)]),
        "log_softmax": (lambda x: ad.log_softmax(x, axis=1), [(3, 4)]),
        "linear": (lambda x, w, b: ad.linear(x, w, b), [(3, 4), (2, 4), (2,)]),
        "sigmoid": (ad.sigmoid, [(3, 4)]),
        "tanh": (ad.tanh, [(3, 4)]),
    }
    for name, (fn, shapes) in prims.items():
        worst = max(gradcheck(fn, [np.random.default_rng(s).standard_normal(sh) for sh in shapes], seed=s)
                    for s in seeds)
        add(f"gradcheck {name}", worst < 1e-3, f"max rel err {worst:.2e}")

    errs = []
    for s in seeds:
        r = np.random.default_rng(s)
        logits = r.standard_normal((4, 3))
        labels = r.integers(0, 3, 4)
        errs.append(gradcheck(lambda z: ad.cross_entropy(z, labels), [logits], seed=s))
    add("gradcheck cross_entropy", max(errs) < 1e-3, f"max rel err {max(errs):.2e}")

    sig = []
    for s in seeds:
        w = np.random.default_rng(s).standard_normal((8, 8))
        st = SpectralState.init(8, np.random.default_rng(s + 100))
        w_sn, _ = spectral_normalize(Tensor(w), st, power_iters=5)
        sig.append(jacobi_singular_values(w_sn.data)[0])
    add("spectral norm vs Jacobi SVD", all(0.9 <= v <= 1.05 for v in sig),
        f"sigma range [{min(sig):.4f}, {max(sig):.4f}]")

    store = ParameterStore()
    store.add("w", np.array(1.0))
    store.astype(np.float64)
    ours = []
    for _ in range(10):
        store["w"].grad = 2 * store["w"].data
        adam_step(store, 0.1)
        ours.append(float(store["w"].data))
    ref = scripted_adam(lambda w: 2 * w, 1.0, 0.1, 10)
    diff = max(abs(a - b) for a, b in zip(ours, ref))
    add("adam vs scripted trace", diff < 1e-6, f"max diff {diff:.2e}")

    n_pairs = 200 if quick else 1000
    bad = 0
    for _ in range(n_pairs):
        tree = random_tree(rng, 4)
        codes = scene.sample_codes(rng, 1, scene.P_EMPTY)[0]
        prog = lang.serialize(tree)
        bad += scene.symbolic_execute(prog, scene.GridSpec.decode(codes)) != brute_force_answer(prog, codes)
    add("symbolic executor vs set semantics", bad == 0, f"{bad} mismatches in {n_pairs}")

    n_trees = 1000 if quick else 10_000
    bad = 0
    for _ in range(n_trees):
        t = random_tree(rng, 5)
        bad += lang.parse_prefix(lang.serialize(t)) != t
    add("program round trip", bad == 0, f"{bad} failures in {n_trees}")

    L = 5 if quick else 8
    classes = [lang.SCENE, lang.AND, lang.color_token("red")]
    same = enumerate_masked(L, classes) == enumerate_valid(L, classes)
    add("feasibility mask exhaustive", same, f"arity classes, max_len {L}")
    return res


__all__ = [
    "numeric_grad", "relative_error", "gradcheck", "gradcheck_params", "jacobi_singular_values",
    "brute_force_cells", "brute_force_answer", "scripted_adam", "random_tree", "enumerate_valid",
    "enumerate_masked", "CheckResult", "run_suite",
]
