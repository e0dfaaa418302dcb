"""Command-line entry point: ``ilnmn <command> ...``.

Exit status: 0 on success, 1 on a runtime failure, 2 on bad flags or an
invalid configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig


def _overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    kv = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        kv[k.strip()] = v.strip()
    return cfg.with_overrides(**kv) if kv else cfg


def cmd_gen_data(a) -> int:
    from .data import build_dataset, export_jsonl, save_dataset
    ds = build_dataset(a.seed, a.n_supervised, a.p_empty)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    if a.jsonl:
        export_jsonl(ds, a.jsonl)
    print(json.dumps({"out": str(out), "counts": ds.counts()}, sort_keys=True))
    return 0


def cmd_train(a) -> int:
    from .harness import load_or_build, multi_seed, run_one
    cfg = RunConfig.load(a.config) if a.config else RunConfig()
    cfg = _overrides(cfg, a.set)
    if a.data:
        cfg = cfg.with_overrides(data_path=a.data)
    if a.seeds:
        summary = multi_seed(cfg, a.out_dir, a.seeds)
        print(json.dumps({k: summary[k] for k in ("val_iid_acc", "val_ood_acc", "program_acc")}, sort_keys=True))
        return 0
    history = run_one(cfg, a.out_dir, load_or_build(cfg))
    last = history[-1]
    print(json.dumps({"global_step": last.global_step, "val_iid_acc": last.val_iid_acc,
                      "val_ood_acc": last.val_ood_acc, "program_acc": last.program_acc}))
    return 0


def cmd_eval(a) -> int:
    from .data.dataset import SPLIT_NAMES
    from .engine import ExecutionEngine
    from .generator import ProgramGenerator
    from .harness import load_or_build
    from .metrics import program_accuracy, task_accuracy

    ck = ckpt.load(a.checkpoint)
    if "config" not in ck.meta:
        raise ConfigError("checkpoint does not carry its run config")
    cfg = RunConfig.from_text(ck.meta["config"])
    if cfg.digest() != ck.config_hash:
        raise ckpt.CheckpointError("config hash mismatch")
    if a.data:
        cfg = cfg.with_overrides(data_path=a.data)
    ds = load_or_build(cfg)
    pg = ProgramGenerator(cfg.pg_config())
    pg.load_state_dict(ck.section("pg"))
    ee = ExecutionEngine(cfg.ee_config())
    ee.load_state_dict(ck.section("ee"))
    idx = ds.indices(SPLIT_NAMES.index(a.split))
    res = {"split": a.split, "n": int(len(idx)),
           "task_acc": task_accuracy(pg, ee, ds, idx, constrained=cfg.constrained),
           "program_acc": program_accuracy(pg, ds, idx, constrained=cfg.constrained)}
    print(json.dumps(res, sort_keys=True))
    return 0


def cmd_ablate(a) -> int:
    from .harness import ablation_presets, multi_seed
    base = RunConfig.load(a.config) if a.config else RunConfig()
    presets = ablation_presets(base)
    if a.list:
        for name, cfg in presets.items():
            r = cfg.reset
            print(f"{name}: il={cfg.il_enabled} ee={r.ee} pg={r.pg} sn={r.sn}")
        return 0
    if not a.preset:
        raise ConfigError("--preset is required (or use --list)")
    if a.preset not in presets:
        raise ConfigError(f"unknown preset {a.preset!r}; choose from {sorted(presets)}")
    cfg = _overrides(presets[a.preset], a.set)
    out = Path(a.out_dir or f"runs/{a.preset}")
    summary = multi_seed(cfg, out, a.seeds or (0, 1, 2))
    print(json.dumps({k: summary[k] for k in ("val_iid_acc", "val_ood_acc", "program_acc")}, sort_keys=True))
    return 0


def cmd_plot(a) -> int:
    from .harness import plot_curves
    out = plot_curves(a.metrics, a.out, a.labels)
    print(out)
    return 0


def cmd_verify(a) -> int:
    from .verify import run_suite
    results = run_suite(quick=not a.full)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}: {r.detail}")
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ilnmn", description="Iterated learning for neural module networks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a SHAPES-SyGeT dataset file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-supervised", type=int, default=20)
    g.add_argument("--p-empty", type=float, default=0.4)
    g.add_argument("--out", required=True)
    g.add_argument("--jsonl", help="also write a JSONL export")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one run (or several seeds)")
    t.add_argument("--config")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--data", help="dataset file (default: build from the config)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--seeds", type=int, nargs="+", help="run these seeds and summarise")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val_iid", "val_ood"), default="val_iid")
    e.add_argument("--data")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("ablate", help="run an ablation preset over seeds")
    b.add_argument("--preset")
    b.add_argument("--list", action="store_true")
    b.add_argument("--config", help="base config the preset modifies")
    b.add_argument("--out-dir")
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.add_argument("--seeds", type=int, nargs="+")
    b.set_defaults(fn=cmd_ablate)

    pl = sub.add_parser("plot", help="render learning curves to SVG")
    pl.add_argument("--metrics", nargs="+", required=True)
    pl.add_argument("--labels", nargs="+")
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plot)

    v = sub.add_parser("verify", help="run the oracle and gradient suites")
    v.add_argument("--full", action="store_true", help="20 seeds and larger samples")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return a.fn(a)
    except ConfigError as e:
        print(f"ilnmn: configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - reported to the user as exit 1
        print(f"ilnmn: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
