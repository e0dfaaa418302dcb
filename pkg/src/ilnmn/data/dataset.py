"""Assembly of the SHAPES-SyGeT splits."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .. import lang
from . import scene
from .scene import GridSpec, Stats
from .templates import EVAL_TEMPLATES, TRAIN_TEMPLATES, QUESTION_VOCAB, enumerate_questions

log = logging.getLogger(__name__)

TRAIN, VAL_IID, VAL_OOD = 0, 1, 2
SPLIT_NAMES = ("train", "val_iid", "val_ood")
TRAIN_PER_QUESTION = 56
VAL_IID_PER_QUESTION = 8
VAL_OOD_PER_QUESTION = 64
MAX_REJECTIONS = 10_000
SUPERVISION_LEVELS = (5, 10, 20, 50, 135)


class DatasetBalanceError(RuntimeError):
    pass


@dataclass
class Question:
    qid: int
    template: int
    tokens: list[int]
    program: list[int]
    one_sided: bool = False


@dataclass
class Example:
    question: list[int]
    gt_program: list[int] | None
    grid: GridSpec
    image: np.ndarray
    answer: int
    split: int
    supervised: bool
    template: int = 0
    qid: int = 0


@dataclass
class Dataset:
    """Column-oriented examples plus header metadata."""

    seed: int
    n_supervised: int
    questions: list[Question]
    qid: np.ndarray          # (N,) question index into ``questions``
    grids: np.ndarray        # (N, 9) uint8 cell codes
    images: np.ndarray       # (N, 30, 30, 3) uint8
    answers: np.ndarray      # (N,) uint8, 1 = yes
    split: np.ndarray        # (N,) uint8
    supervised: np.ndarray   # (N,) bool
    stats: Stats
    p_empty: float = scene.P_EMPTY
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.qid)

    def indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def supervised_indices(self) -> np.ndarray:
        return np.flatnonzero(self.supervised)

    def question_tokens(self, i: int) -> list[int]:
        return self.questions[self.qid[i]].tokens

    def program(self, i: int) -> list[int]:
        return self.questions[self.qid[i]].program

    def example(self, i: int) -> Example:
        q = self.questions[self.qid[i]]
        return Example(
            question=list(q.tokens),
            gt_program=list(q.program) if self.supervised[i] else None,
            grid=GridSpec.decode(self.grids[i]),
            image=self.images[i].astype(np.float32) / 255.0,
            answer=int(self.answers[i]),
            split=int(self.split[i]),
            supervised=bool(self.supervised[i]),
            template=q.template,
            qid=q.qid,
        )

    def __iter__(self) -> Iterator[Example]:
        return (self.example(i) for i in range(len(self)))

    def standardized(self, idx) -> np.ndarray:
        return scene.standardize(self.images[idx], self.stats)

    def counts(self) -> dict[str, dict[str, int]]:
        out = {}
        for s, name in enumerate(SPLIT_NAMES):
            idx = self.indices(s)
            out[name] = {"total": int(len(idx)), "unique": int(len(np.unique(self.qid[idx])))}
        return out


def allocate_supervision(n_supervised: int, sizes: list[int]) -> list[int]:
    """Largest-remainder apportionment of ``n_supervised`` across templates."""
    total = sum(sizes)
    if not 0 <= n_supervised <= total:
        raise ValueError(f"n_supervised must be in [0, {total}]")
    quotas = [n_supervised * s / total for s in sizes]
    alloc = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[:n_supervised - sum(alloc)]:
        alloc[i] += 1
    return alloc


def _yes_targets(n_per_q: int, balanced: list[bool], rng: np.random.Generator) -> list[int]:
    """Per-question yes counts: half each, one-sided questions zero, and a
    +1 on enough balanced questions to bring the split as close to 50% as the
    one-example tolerance allows."""
    half = n_per_q // 2
    targets = [half if b else 0 for b in balanced]
    want = len(balanced) * n_per_q / 2
    deficit = int(round(want - sum(targets)))
    cands = [i for i, b in enumerate(balanced) if b]
    bump = rng.permutation(cands)[:max(0, min(deficit, len(cands)))]
    for i in bump:
        targets[i] += 1
    return targets


def _draw_grids(q: Question, seed: int, quotas: list[tuple[int, int]],
                p_empty: float) -> list[np.ndarray]:
    """For each (n_yes, n_no) quota, draw distinct grids with the requested
    answers from one per-question stream."""
    rng = np.random.default_rng([seed, 7, q.qid])
    tree = lang.parse_prefix(q.program)
    seen: set[bytes] = set()
    out = []
    for n_yes, n_no in quotas:
        need = {True: n_yes, False: n_no}
        got: list[np.ndarray] = []
        misses = 0
        while need[True] or need[False]:
            codes = scene.sample_codes(rng, 1, p_empty)[0]
            key = codes.tobytes()
            ans = scene.evaluate_mask(tree, codes) != 0
            if key in seen or need[ans] == 0:
                misses += 1
                if misses > MAX_REJECTIONS:
                    raise DatasetBalanceError(
                        f"question {q.qid} ({lang.to_text(q.program)}): could not draw "
                        f"{need[True]} yes / {need[False]} no grids after {MAX_REJECTIONS} rejections")
                continue
            misses = 0
            seen.add(key)
            need[ans] -= 1
            got.append(codes)
        out.append(np.stack(got) if got else np.zeros((0, 9), np.uint8))
    return out


def build_questions(seed: int) -> tuple[list[Question], list[Question]]:
    train, evalq = [], []
    qid = 0
    for group, dest in ((TRAIN_TEMPLATES, train), (EVAL_TEMPLATES, evalq)):
        for t in group:
            for toks, prog in enumerate_questions(t, seed):
                dest.append(Question(qid, t.id, toks, prog, scene.provably_empty(prog)))
                qid += 1
    return train, evalq


def build_dataset(seed: int, n_supervised: int = 20, p_empty: float = scene.P_EMPTY) -> Dataset:
    train_qs, eval_qs = build_questions(seed)
    rng = np.random.default_rng([seed, 3])

    sizes = [t.unique for t in TRAIN_TEMPLATES]
    alloc = allocate_supervision(n_supervised, sizes)
    supervised_q: set[int] = set()
    for t, k in zip(TRAIN_TEMPLATES, alloc):
        pool = [q.qid for q in train_qs if q.template == t.id]
        supervised_q.update(int(x) for x in rng.choice(pool, size=k, replace=False))

    balanced_train = [not q.one_sided for q in train_qs]
    tr_yes = _yes_targets(TRAIN_PER_QUESTION, balanced_train, rng)
    iid_yes = _yes_targets(VAL_IID_PER_QUESTION, balanced_train, rng)
    ood_yes = _yes_targets(VAL_OOD_PER_QUESTION, [not q.one_sided for q in eval_qs], rng)

    rows: list[tuple[int, np.ndarray, int]] = []  # (qid, codes, split)
    for q, ty, vy in zip(train_qs, tr_yes, iid_yes):
        g_tr, g_iid = _draw_grids(q, seed, [(ty, TRAIN_PER_QUESTION - ty),
                                            (vy, VAL_IID_PER_QUESTION - vy)], p_empty)
        rows += [(q.qid, c, TRAIN) for c in g_tr]
        rows += [(q.qid, c, VAL_IID) for c in g_iid]
    for q, oy in zip(eval_qs, ood_yes):
        (g_ood,) = _draw_grids(q, seed, [(oy, VAL_OOD_PER_QUESTION - oy)], p_empty)
        rows += [(q.qid, c, VAL_OOD) for c in g_ood]

    # order: split, then question, then draw order
    rows.sort(key=lambda r: (r[2], r[0]))
    questions = train_qs + eval_qs
    qids = np.array([r[0] for r in rows], dtype=np.int64)
    grids = np.stack([r[1] for r in rows]).astype(np.uint8)
    split = np.array([r[2] for r in rows], dtype=np.uint8)
    images = np.stack([scene.render_codes(g) for g in grids])
    answers = np.array([scene.evaluate_mask(lang.parse_prefix(questions[q].program), g) != 0
                        for q, g in zip(qids, grids)], dtype=np.uint8)
    supervised = np.array([q in supervised_q for q in qids]) & (split == TRAIN)
    stats = scene.channel_stats(images[split == TRAIN])

    manifest = {
        "p_empty": p_empty,
        "supervised_questions": sorted(supervised_q),
        "supervision_per_template": dict(zip([str(t.id) for t in TRAIN_TEMPLATES], alloc)),
        "one_sided_questions": [q.qid for q in questions if q.one_sided],
        "questions": [
            {"qid": q.qid, "template": q.template,
             "question": " ".join(QUESTION_VOCAB[i] for i in q.tokens),
             "program": lang.to_text(q.program)}
            for q in questions
        ],
    }
    ds = Dataset(seed, n_supervised, questions, qids, grids, images, answers, split,
                 supervised, stats, p_empty, manifest)
    log.info("built dataset seed=%d n_supervised=%d counts=%s", seed, n_supervised, ds.counts())
    return ds
