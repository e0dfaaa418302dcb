"""Iterated-learning training loop.

Each generation runs four phases: joint interaction of program generator
(PG) and execution engine (EE), transmission of a question/program dataset,
PG learning on that dataset, and EE learning against the new PG. Baseline
mode runs a single long interacting phase.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tape
from .config import RunConfig
from .data.dataset import TRAIN, VAL_IID, VAL_OOD, Dataset
from .engine import ExecutionEngine
from .generator import ProgramGenerator
from .metrics import MetricsRow, MetricsWriter, program_accuracy, task_accuracy
from .params import adam_step

log = logging.getLogger(__name__)

TRANSMIT_CHUNK = 2048


@dataclass
class TransmitRecord:
    question: list[int]
    program: list[int]
    from_gt: bool
    index: int = -1   # dataset row the record was drawn from


@dataclass
class PhaseCounts:
    interact: int = 0
    transmit: int = 0
    pg_learn: int = 0
    ee_learn: int = 0


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, dump: Path | None = None):
        super().__init__(message)
        self.dump = dump


class SupervisedSampler:
    """Draws GT-bearing examples in shuffled passes over the supervised pool,
    so every pool member (and hence every template in proportion to its
    allocation) appears once per pass."""

    def __init__(self, pool: np.ndarray, rng: np.random.Generator):
        self.pool = np.asarray(pool, dtype=np.int64)
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)

    def draw(self, k: int) -> np.ndarray:
        if k and self.pool.size == 0:
            raise ValueError("supervised pool is empty")
        out = []
        while len(out) < k:
            if self._order.size == 0:
                self._order = self.rng.permutation(self.pool)
            take = min(k - len(out), self._order.size)
            out.extend(self._order[:take].tolist())
            self._order = self._order[take:]
        return np.array(out, dtype=np.int64)


def _subset(idx: np.ndarray, limit: int, rng: np.random.Generator) -> np.ndarray:
    if not limit or limit >= len(idx):
        return idx
    return np.sort(rng.choice(idx, size=limit, replace=False))


def _copy_state(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in state.items()}


class Trainer:
    def __init__(self, cfg: RunConfig, ds: Dataset, out_dir: str | Path | None = None,
                 on_eval: Callable[[MetricsRow], None] | None = None):
        self.cfg = cfg
        self.ds = ds
        self.out_dir = Path(out_dir) if out_dir else None
        self.on_eval = on_eval
        seed = cfg.run_seed
        self.rng_batch = np.random.default_rng([seed, 1])
        self.rng_decode = np.random.default_rng([seed, 2])
        self.train_idx = ds.indices(TRAIN)
        self.sampler = SupervisedSampler(ds.supervised_indices(), np.random.default_rng([seed, 3]))
        sub = np.random.default_rng([seed, 4])
        self.eval_idx = {
            "train": _subset(self.train_idx, cfg.train_eval_size, sub),
            "val_iid": _subset(ds.indices(VAL_IID), cfg.eval_limit, sub),
            "val_ood": _subset(ds.indices(VAL_OOD), cfg.eval_limit, sub),
        }
        self.global_step = 0
        self.generation = 0
        self.counts: list[PhaseCounts] = []
        self.history: list[MetricsRow] = []
        self.best: MetricsRow | None = None
        self.best_state: dict[str, np.ndarray] | None = None
        self.sn_sigmas: list[tuple[int, float]] = []
        self.reward_baseline = 0.0
        self.pg = self.new_pg(0, spectral_norm=cfg.reset.sn == "full")
        self.ee = self.new_ee(0)
        # state a Seeded EE restarts from: the end of the latest EE learning phase
        self.seed_state = _copy_state(self.ee.state_dict())
        self._t0 = time.time()
        self._writer: MetricsWriter | None = None

    # ------------------------------------------------------------------
    # agents

    def new_pg(self, generation: int, spectral_norm: bool) -> ProgramGenerator:
        rng = np.random.default_rng([self.cfg.run_seed, 10, generation])
        return ProgramGenerator(self.cfg.pg_config(), rng, spectral_norm=spectral_norm)

    def new_ee(self, generation: int) -> ExecutionEngine:
        return ExecutionEngine(self.cfg.ee_config(), np.random.default_rng([self.cfg.run_seed, 20, generation]))

    def _batch(self, idx: np.ndarray):
        qs = [self.ds.question_tokens(i) for i in idx]
        return qs, self.ds.standardized(idx), self.ds.answers[idx].astype(np.int64)

    def _check(self, phase: str, **values: float) -> None:
        if all(np.isfinite(v) for v in values.values()):
            return
        dump = self._dump(phase, values)
        raise TrainingAborted(f"non-finite loss in {phase} at step {self.global_step}: {values}", dump)

    def _dump(self, phase: str, values: dict) -> Path | None:
        if self.out_dir is None:
            return None
        d = self.out_dir / "abort"
        d.mkdir(parents=True, exist_ok=True)

        def norms(store):
            return {k: {"norm": float(np.linalg.norm(t.data)), "finite": bool(np.isfinite(t.data).all())}
                    for k, t in store.items()}
        info = {"phase": phase, "global_step": self.global_step, "generation": self.generation,
                "losses": {k: float(v) for k, v in values.items()},
                "pg": norms(self.pg.store), "ee": norms(self.ee.store)}
        (d / "diagnostics.json").write_text(json.dumps(info, indent=2, sort_keys=True))
        ckpt.save(self._checkpoint({"abort": phase}), d / "state.ckpt")
        return d

    # ------------------------------------------------------------------
    # phases

    def interact_step(self) -> dict[str, float]:
        """One joint update on a batch with ``gt_per_batch`` supervised rows."""
        cfg, sch = self.cfg, self.cfg.schedule
        k = sch.gt_per_batch if self.sampler.pool.size else 0
        gt = self.sampler.draw(k)
        rest = self.rng_batch.choice(self.train_idx, size=sch.batch_size - k)
        idx = np.concatenate([gt, rest])
        qs, imgs, ans = self._batch(idx)
        pg, ee = self.pg, self.ee
        with Tape() as tape:
            outs, logp = pg.decode(qs, rng=self.rng_decode, constrained=cfg.constrained,
                                   update_sn=pg.spectral_norm)
            logits = ee.execute([o.exec_seq for o in outs], imgs)
            ce = ad.cross_entropy(logits, ans, reduction="none")
            ee_loss = ad.mean(ce)
            rewards = np.clip(-ce.data.astype(np.float64), -5.0, 5.0)
            base = self.reward_baseline if cfg.reward_baseline else None
            pg_loss = ProgramGenerator.reinforce_loss(logp, ce.data, cfg.reinforce_weight, base)
            sup = 0.0
            if k:
                sup_loss = pg.supervised_loss(qs[:k], [self.ds.program(i) for i in gt],
                                              weight=cfg.supervised_weight, constrained=cfg.constrained)
                sup = sup_loss.item()
                pg_loss = pg_loss + sup_loss
            self._check("interact", ee_loss=ee_loss.item(), pg_loss=pg_loss.item())
            tape.backward(ee_loss + pg_loss)
        adam_step(pg.store, cfg.pg_lr)
        adam_step(ee.store, cfg.ee_learning_rate)
        self.reward_baseline = 0.99 * self.reward_baseline + 0.01 * float(rewards.mean())
        return {"ee_loss": ee_loss.item(), "pg_loss": pg_loss.item(), "supervised": sup,
                "reward": float(rewards.mean()),
                "length": float(np.mean([len(o.exec_seq) for o in outs]))}

    def transmit(self, n: int, greedy: bool = False) -> list[TransmitRecord]:
        """Draw ``n`` Train rows with replacement; GT programs where the row is
        supervised, PG samples elsewhere."""
        idx = self.rng_batch.choice(self.train_idx, size=n)
        records: list[TransmitRecord | None] = [None] * n
        sup = self.ds.supervised[idx]
        for pos in np.flatnonzero(sup):
            i = int(idx[pos])
            records[pos] = TransmitRecord(list(self.ds.question_tokens(i)), list(self.ds.program(i)), True, i)
        need = np.flatnonzero(~sup)
        for s in range(0, len(need), TRANSMIT_CHUNK):
            pos = need[s:s + TRANSMIT_CHUNK]
            qs = [self.ds.question_tokens(int(idx[p])) for p in pos]
            if greedy:
                outs = self.pg.decode_argmax(qs, constrained=self.cfg.constrained)
            else:
                outs = self.pg.decode_sample(qs, self.rng_decode, constrained=self.cfg.constrained)
            for p, q, o in zip(pos, qs, outs):
                records[p] = TransmitRecord(list(q), list(o.exec_seq), False, int(idx[p]))
        return records  # type: ignore[return-value]

    def pg_learning(self, records: list[TransmitRecord]) -> tuple[ProgramGenerator, int]:
        """Returns the next-generation PG and the number of updates made."""
        if not records:
            raise ValueError("no transmitted records")
        cfg, sch = self.cfg, self.cfg.schedule
        if cfg.reset.pg == "noretrain":
            return self.pg, 0
        pg = self.new_pg(self.generation, spectral_norm=cfg.reset.sn != "none")
        for step in range(sch.T_p):
            sel = self.rng_batch.integers(len(records), size=sch.batch_size)
            qs = [records[j].question for j in sel]
            ps = [records[j].program for j in sel]
            with Tape() as tape:
                loss = pg.supervised_loss(qs, ps, constrained=cfg.constrained, update_sn=pg.spectral_norm)
                self._check("pg_learning", loss=loss.item())
                tape.backward(loss)
            adam_step(pg.store, cfg.pg_lr)
            self.global_step += 1
            if pg.spectral_norm and ((step + 1) % 500 == 0 or step + 1 == sch.T_p):
                self.sn_sigmas.append((self.global_step, effective_sigma(pg)))
        if cfg.reset.sn == "learning_phase_only":
            pg.bake_spectral_norm()
        return pg, sch.T_p

    def init_learning_ee(self) -> ExecutionEngine:
        """EE at the start of the EE learning phase, per reset strategy."""
        mode = self.cfg.reset.ee
        if mode == "noreset":
            return self.ee
        ee = self.new_ee(self.generation)
        if mode == "seeded":
            ee.load_state_dict(_copy_state(self.seed_state))
        return ee

    def ee_learning(self, pg: ProgramGenerator, ee: ExecutionEngine | None = None) -> tuple[ExecutionEngine, int]:
        cfg, sch = self.cfg, self.cfg.schedule
        ee = ee if ee is not None else self.init_learning_ee()
        steps = cfg.ee_steps
        for _ in range(steps):
            idx = self.rng_batch.choice(self.train_idx, size=sch.batch_size)
            qs, imgs, ans = self._batch(idx)
            # decoded outside the tape: PG is frozen in this phase
            outs = pg.decode_sample(qs, self.rng_decode, constrained=cfg.constrained)
            with Tape() as tape:
                loss = ad.cross_entropy(ee.execute([o.exec_seq for o in outs], imgs), ans)
                self._check("ee_learning", loss=loss.item())
                tape.backward(loss)
            adam_step(ee.store, cfg.ee_learning_rate)
            self.global_step += 1
        self.seed_state = _copy_state(ee.state_dict())
        return ee, steps

    # ------------------------------------------------------------------
    # evaluation & bookkeeping

    def evaluate(self, phase: str) -> MetricsRow | None:
        if self.history and self.history[-1].global_step == self.global_step:
            return None
        c = self.cfg.constrained
        row = MetricsRow(
            global_step=self.global_step, generation=self.generation, phase=phase,
            train_acc=task_accuracy(self.pg, self.ee, self.ds, self.eval_idx["train"], constrained=c),
            val_iid_acc=task_accuracy(self.pg, self.ee, self.ds, self.eval_idx["val_iid"], constrained=c),
            val_ood_acc=task_accuracy(self.pg, self.ee, self.ds, self.eval_idx["val_ood"], constrained=c),
            program_acc=program_accuracy(self.pg, self.ds, self.eval_idx["val_iid"], constrained=c),
            wallclock=time.time() - self._t0,
        )
        self.history.append(row)
        if self._writer:
            self._writer.write(row)
        if self.best is None or row.val_iid_acc > self.best.val_iid_acc:
            self.best = row
            self.best_state = _copy_state(ckpt.bundle(self.pg.state_dict(), self.ee.state_dict()))
            if self.out_dir:
                meta = dict(asdict(row), config=self.cfg.to_text())
                ckpt.save(ckpt.Checkpoint(self.cfg.digest(), self.best_state, meta),
                          self.out_dir / "best.ckpt")
        log.info("step %d gen %d %s: train %.3f iid %.3f ood %.3f prog %.3f", row.global_step,
                 row.generation, phase, row.train_acc, row.val_iid_acc, row.val_ood_acc, row.program_acc)
        if self.on_eval:
            self.on_eval(row)
        return row

    def _checkpoint(self, meta: dict | None = None) -> ckpt.Checkpoint:
        return ckpt.Checkpoint(self.cfg.digest(), ckpt.bundle(self.pg.state_dict(), self.ee.state_dict()),
                               dict(meta or {}, global_step=self.global_step, generation=self.generation,
                                    config=self.cfg.to_text()))

    def _maybe_eval(self, phase_step: int) -> None:
        every = self.cfg.eval_every
        if every and phase_step % every == 0:
            self.evaluate("interact")

    def run_generation(self) -> PhaseCounts:
        sch = self.cfg.schedule
        self.generation += 1
        counts = PhaseCounts()
        for i in range(sch.T_i):
            self.interact_step()
            self.global_step += 1
            counts.interact += 1
            self._maybe_eval(i + 1)
        self.evaluate("interact")
        records = self.transmit(sch.T_t)
        counts.transmit = len(records)
        self.last_records = records
        pg, counts.pg_learn = self.pg_learning(records)
        ee, counts.ee_learn = self.ee_learning(pg)
        self.pg, self.ee = pg, ee
        self.counts.append(counts)
        self.evaluate("generation")
        return counts

    def run_baseline(self) -> PhaseCounts:
        counts = PhaseCounts()
        self.generation = 1
        for i in range(self.cfg.total_baseline_steps):
            self.interact_step()
            self.global_step += 1
            counts.interact += 1
            self._maybe_eval(i + 1)
        self.evaluate("interact")
        self.counts.append(counts)
        return counts

    def run(self) -> list[MetricsRow]:
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.cfg.save(self.out_dir / "config.txt")
            self._writer = MetricsWriter(self.out_dir / "metrics.csv")
        self._t0 = time.time()
        try:
            self.evaluate("init")
            if self.cfg.il_enabled:
                for _ in range(self.cfg.schedule.n_generations):
                    self.run_generation()
            else:
                self.run_baseline()
        finally:
            if self._writer:
                self._writer.close()
                self._writer = None
        if self.out_dir:
            ckpt.save(self._checkpoint({"final": True}), self.out_dir / "last.ckpt")
            summary = {"config_hash": self.cfg.digest(), "global_step": self.global_step,
                       "counts": [asdict(c) for c in self.counts],
                       "best": asdict(self.best) if self.best else None,
                       "sn_sigmas": self.sn_sigmas}
            (self.out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        return self.history


def effective_sigma(pg: ProgramGenerator) -> float:
    """Largest singular value over the effective decoder matrices."""
    w = pg.decoder_weights(update_sn=False)
    return max(float(np.linalg.svd(m.data.astype(np.float64), compute_uv=False)[0]) for m in w)


__all__ = ["Trainer", "TransmitRecord", "PhaseCounts", "TrainingAborted", "SupervisedSampler",
           "effective_sigma"]
