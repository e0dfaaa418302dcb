"""Experiment presets, the multi-seed driver and learning-curve plots."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ResetStrategy, RunConfig
from .data import build_dataset, load_dataset
from .data.dataset import Dataset
from .metrics import MetricsRow, read_metrics, select_best

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)


def ablation_presets(base: RunConfig | None = None) -> dict[str, RunConfig]:
    """The Tensor-FiLM ablation grid at 20 GT programs: two non-IL baselines
    plus IL x {SN, NoSN, NoRetrain} x EE {Scratch, Seeded, NoReset}."""
    base = base or RunConfig()
    base = replace(base, arch="tensor_film", n_supervised=20)
    out = {
        "baseline_fullsn": replace(base, il_enabled=False, reset=ResetStrategy(sn="full")),
        "baseline_nosn": replace(base, il_enabled=False, reset=ResetStrategy(sn="none")),
    }
    pg_axis = {"": ("retrain", "learning_phase_only"), "_nosn": ("retrain", "none"),
               "_noretrain": ("noretrain", "learning_phase_only")}
    for ee, ee_tag in (("scratch", ""), ("seeded", "_seeded"), ("noreset", "_noreset")):
        for pg_tag, (pg, sn) in pg_axis.items():
            out[f"il{ee_tag}{pg_tag}"] = replace(base, il_enabled=True,
                                                 reset=ResetStrategy(ee=ee, pg=pg, sn=sn))
    return out


def load_or_build(cfg: RunConfig) -> Dataset:
    if cfg.data_path:
        ds = load_dataset(cfg.data_path)
        if ds.n_supervised != cfg.n_supervised or ds.seed != cfg.data_seed:
            log.warning("dataset file (seed %d, %d GT) differs from config (seed %d, %d GT)",
                        ds.seed, ds.n_supervised, cfg.data_seed, cfg.n_supervised)
        return ds
    return build_dataset(cfg.data_seed, cfg.n_supervised)


def run_one(cfg: RunConfig, out_dir: str | Path, ds: Dataset | None = None) -> list[MetricsRow]:
    from .trainer import Trainer
    ds = ds if ds is not None else load_or_build(cfg)
    return Trainer(cfg, ds, out_dir).run()


def multi_seed(cfg: RunConfig, out_dir: str | Path, seeds: Sequence[int] = DEFAULT_SEEDS,
               runner: Callable[[RunConfig, Path], list[MetricsRow]] | None = None) -> dict:
    """Run one config under several run seeds; report mean and std of the
    Val-IID-selected checkpoint's accuracies."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = runner or (lambda c, d: run_one(c, d))
    best = {}
    for s in seeds:
        history = runner(replace(cfg, run_seed=s), out_dir / f"seed_{s}")
        best[s] = select_best(history)
    summary = {"seeds": list(seeds), "best": {str(s): asdict(r) for s, r in best.items()}}
    for key in ("val_iid_acc", "val_ood_acc", "program_acc"):
        vals = np.array([getattr(r, key) for r in best.values()])
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std()), "median": float(np.median(vals))}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# ----------------------------------------------------------------------------
# plots


def plot_curves(metrics: Sequence[str | Path], out: str | Path, labels: Sequence[str] | None = None) -> Path:
    """Two panels: task accuracy and program accuracy against the global step."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = list(labels) if labels else [Path(m).parent.name or Path(m).stem for m in metrics]
    if len(labels) != len(metrics):
        raise ValueError("one label per metrics file")
    fig, (ax_task, ax_prog) = plt.subplots(1, 2, figsize=(11, 4))
    for path, label, color in zip(metrics, labels, plt.rcParams["axes.prop_cycle"].by_key()["color"] * 4):
        rows = read_metrics(path)
        if not rows:
            continue
        step = [r.global_step for r in rows]
        ax_task.plot(step, [r.train_acc for r in rows], color=color, ls="-", label=f"{label} train")
        ax_task.plot(step, [r.val_iid_acc for r in rows], color=color, ls="--", label=f"{label} val-iid")
        ax_task.plot(step, [r.val_ood_acc for r in rows], color=color, ls=":", label=f"{label} val-ood")
        ax_prog.plot(step, [r.program_acc for r in rows], color=color, label=label)
        for r in rows:
            if r.phase == "generation":
                ax_task.axvline(r.global_step, color=color, alpha=0.15, lw=0.8)
                ax_prog.axvline(r.global_step, color=color, alpha=0.15, lw=0.8)
    ax_task.set(title="(a) task accuracy", xlabel="global step", ylabel="accuracy", ylim=(0, 1.02))
    ax_prog.set(title="(b) program accuracy", xlabel="global step", ylabel="exact match", ylim=(0, 1.02))
    ax_task.legend(fontsize=7)
    ax_prog.legend(fontsize=7)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, format="svg")
    plt.close(fig)
    return out
