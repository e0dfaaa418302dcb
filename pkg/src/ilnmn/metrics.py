"""Evaluation metrics, metric logs and model selection."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import lang
from .data.dataset import Dataset


@dataclass
class MetricsRow:
    global_step: int
    generation: int
    phase: str
    train_acc: float
    val_iid_acc: float
    val_ood_acc: float
    program_acc: float
    wallclock: float

    def __post_init__(self):
        for k in ("train_acc", "val_iid_acc", "val_ood_acc", "program_acc"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{k}={v} outside [0, 1]")


COLUMNS = tuple(f.name for f in fields(MetricsRow))


class MetricsWriter:
    """Append-only CSV; every row is flushed so a crash leaves a parseable file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._last_step: int | None = None
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._f = open(self.path, "a", newline="")
        self._w = csv.writer(self._f)
        if new:
            self._w.writerow(COLUMNS)
            self._f.flush()

    def write(self, row: MetricsRow) -> None:
        if self._last_step is not None and row.global_step <= self._last_step:
            raise ValueError(f"global_step {row.global_step} not after {self._last_step}")
        self._last_step = row.global_step
        d = asdict(row)
        self._w.writerow([_fmt(d[c]) for c in COLUMNS])
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def read_metrics(path: str | Path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append(MetricsRow(
                global_step=int(rec["global_step"]), generation=int(rec["generation"]),
                phase=rec["phase"], train_acc=float(rec["train_acc"]),
                val_iid_acc=float(rec["val_iid_acc"]), val_ood_acc=float(rec["val_ood_acc"]),
                program_acc=float(rec["program_acc"]), wallclock=float(rec["wallclock"])))
    return rows


def select_best(history: Sequence[MetricsRow]) -> MetricsRow:
    """Row with the highest Val-IID accuracy; the earlier step wins ties.
    Val-OOD is never consulted."""
    if not history:
        raise ValueError("no evaluations to select from")
    best = history[0]
    for row in history[1:]:
        if row.val_iid_acc > best.val_iid_acc or (
                row.val_iid_acc == best.val_iid_acc and row.global_step < best.global_step):
            best = row
    return best


# ----------------------------------------------------------------------------
# accuracies

def _argmax_programs(pg, ds: Dataset, idx: np.ndarray, constrained: bool):
    """Greedy decoding is deterministic per question, so decode each distinct
    question once and share the result."""
    qids = np.unique(ds.qid[idx])
    outs = pg.decode_argmax([ds.questions[q].tokens for q in qids], constrained=constrained)
    return {int(q): o for q, o in zip(qids, outs)}


def task_accuracy(pg, ee, ds: Dataset, idx: Iterable[int], batch_size: int = 256,
                  constrained: bool = True) -> float:
    """Fraction of examples whose argmax-decoded program, executed on the
    image, yields the true answer."""
    idx = np.asarray(list(idx) if not isinstance(idx, np.ndarray) else idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty split")
    progs = _argmax_programs(pg, ds, idx, constrained)
    correct = 0
    for s in range(0, len(idx), batch_size):
        chunk = idx[s:s + batch_size]
        trees = [progs[int(ds.qid[i])].exec_seq for i in chunk]
        pred = ee.predict(trees, ds.standardized(chunk))
        correct += int((pred == ds.answers[chunk]).sum())
    return correct / len(idx)


def program_accuracy(pg, ds: Dataset, idx: Iterable[int], constrained: bool = True) -> float:
    """Fraction of examples whose raw argmax program equals the ground truth."""
    idx = np.asarray(list(idx) if not isinstance(idx, np.ndarray) else idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty split")
    progs = _argmax_programs(pg, ds, idx, constrained)
    hits = sum(lang.exact_match(progs[int(ds.qid[i])].seq, ds.program(i)) for i in idx)
    return hits / len(idx)
