import hashlib
import json
import re
from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY_MODEL, tiny_config
from ilnmn import checkpoint as ckpt
from ilnmn import lang
from ilnmn.cli import main
from ilnmn.config import ConfigError, PhaseSchedule, ResetStrategy, RunConfig
from ilnmn.data import VAL_IID, VAL_OOD
from ilnmn.engine import ExecutionEngine
from ilnmn.generator import ProgramGenerator
from ilnmn.harness import ablation_presets, multi_seed, plot_curves
from ilnmn.metrics import (COLUMNS, MetricsRow, MetricsWriter, program_accuracy, read_metrics,
                           select_best, task_accuracy)


def row(step, iid, ood=0.5, phase="interact", gen=1):
    return MetricsRow(step, gen, phase, 0.5, iid, ood, 0.1, float(step))


# ---------------------------------------------------------------------------
# configuration


def test_config_defaults():
    cfg = RunConfig()
    s = cfg.schedule
    assert (s.T_i, s.T_t, s.T_p, s.n_generations, s.batch_size, s.gt_per_batch) == (2000, 256000, 2000, 20, 128, 4)
    assert cfg.ee_steps == 250
    assert RunConfig(reset=ResetStrategy(ee="seeded")).ee_steps == 200
    assert RunConfig(reset=ResetStrategy(ee="noreset")).ee_steps == 50
    assert cfg.ee_learning_rate == 1e-3 and replace(cfg, arch="tensor").ee_learning_rate == 5e-4
    assert cfg.pg_lr == 1e-4 and cfg.reinforce_weight == 10 and cfg.supervised_weight == 1
    assert cfg.total_baseline_steps == 20 * (2000 + 2000 + 250)


def test_config_text_round_trip(tmp_path):
    cfg = tiny_config(arch="vector", pg_lr=3e-4, reset=ResetStrategy(ee="seeded", sn="none"), constrained=False)
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg and back.digest() == cfg.digest()
    cfg.save(tmp_path / "c.txt")
    assert RunConfig.load(tmp_path / "c.txt") == cfg
    assert "schedule.T_i = 6" in cfg.to_text()
    assert cfg.digest() != RunConfig().digest()


def test_config_comments_and_overrides():
    cfg = RunConfig.from_text("# a comment\narch = tensor  # trailing\n\nreset.ee = noreset\n")
    assert cfg.arch == "tensor" and cfg.reset.ee == "noreset"
    cfg2 = cfg.with_overrides(**{"schedule.T_i": "10", "il_enabled": "false"})
    assert cfg2.schedule.T_i == 10 and not cfg2.il_enabled


@pytest.mark.parametrize("text", [
    "arch = transformer",
    "nope = 1",
    "arch = tensor\narch = vector",
    "schedule.T_i = ten",
    "il_enabled = maybe",
    "reset.ee = sometimes",
    "reset.sn = always",
    "schedule.T_p = 0",
    "schedule.gt_per_batch = 999",
    "pg_lr = -1",
    "just words",
])
def test_config_rejects_bad_text(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


def test_config_unknown_override():
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(bogus="1")


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    r = np.random.default_rng(0)
    params = {"pg/a": r.standard_normal((3, 4)).astype(np.float32), "ee/b": r.standard_normal(5).astype(np.float32),
              "ee/s": np.array(2.5, np.float32)}
    ck = ckpt.Checkpoint(RunConfig().digest(), params, {"step": 3})
    ckpt.save(ck, tmp_path / "x.ckpt")
    back = ckpt.load(tmp_path / "x.ckpt")
    assert back.config_hash == ck.config_hash and back.meta == {"step": 3}
    for k in params:
        assert back.params[k].tobytes() == params[k].tobytes()
    assert set(back.section("ee")) == {"b", "s"}
    assert ckpt.to_bytes(back) == (tmp_path / "x.ckpt").read_bytes()


def test_checkpoint_restores_models_exactly(tmp_path):
    cfg = tiny_config()
    pg = ProgramGenerator(cfg.pg_config(), np.random.default_rng(1), spectral_norm=True)
    ee = ExecutionEngine(cfg.ee_config(), np.random.default_rng(2))
    ckpt.save(ckpt.Checkpoint(cfg.digest(), ckpt.bundle(pg.state_dict(), ee.state_dict())), tmp_path / "m.ckpt")
    back = ckpt.load(tmp_path / "m.ckpt")
    pg2 = ProgramGenerator(cfg.pg_config(), np.random.default_rng(9), spectral_norm=True)
    ee2 = ExecutionEngine(cfg.ee_config(), np.random.default_rng(9))
    pg2.load_state_dict(back.section("pg"))
    ee2.load_state_dict(back.section("ee"))
    q = [[4, 5, 7, 8]]
    np.testing.assert_array_equal(pg.decode_argmax(q)[0].logprobs, pg2.decode_argmax(q)[0].logprobs)
    img = np.random.default_rng(3).standard_normal((1, 3, 30, 30)).astype(np.float32)
    np.testing.assert_array_equal(ee.execute([[lang.SCENE]], img).data, ee2.execute([[lang.SCENE]], img).data)


@pytest.mark.parametrize("mangle", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + b"\x09\x00" + b[6:],
    lambda b: b[:-3],
    lambda b: b + b"\x00",
])
def test_checkpoint_rejects_corruption(mangle):
    ck = ckpt.Checkpoint(RunConfig().digest(), {"a": np.ones(3, np.float32)})
    with pytest.raises(ckpt.CheckpointError):
        ckpt.from_bytes(mangle(ckpt.to_bytes(ck)))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.to_bytes(ckpt.Checkpoint("abc", {}))


# ---------------------------------------------------------------------------
# metrics log and selection


def test_metrics_csv_survives_a_crash(tmp_path):
    p = tmp_path / "m.csv"
    w = MetricsWriter(p)
    w.write(row(10, 0.6))
    w.write(row(20, 0.7))
    # no close(): every row is already flushed
    back = read_metrics(p)
    assert [r.global_step for r in back] == [10, 20]
    assert p.read_text().splitlines()[0] == ",".join(COLUMNS)
    with pytest.raises(ValueError):
        w.write(row(20, 0.8))
    w.close()
    # appending to an existing log keeps a single header
    with MetricsWriter(p) as w2:
        w2.write(row(30, 0.9))
    assert [r.global_step for r in read_metrics(p)] == [10, 20, 30]


def test_metrics_row_validates_range():
    with pytest.raises(ValueError):
        row(1, 1.5)


def test_select_best_prefers_val_iid_and_earlier_ties():
    hist = [row(10, 0.5, ood=0.9), row(20, 0.8, ood=0.1), row(30, 0.8, ood=0.99), row(40, 0.7)]
    assert select_best(hist).global_step == 20
    assert select_best(list(reversed(hist))).global_step == 20
    with pytest.raises(ValueError):
        select_best([])


def naive_task_accuracy(pg, ee, ds, idx):
    hits = 0
    for i in idx:
        prog = pg.decode_argmax([ds.question_tokens(i)])[0].exec_seq
        hits += int(ee.predict([prog], ds.standardized([i]))[0] == ds.answers[i])
    return hits / len(idx)


def test_accuracy_matches_naive_reimplementation(dataset):
    cfg = tiny_config()
    pg = ProgramGenerator(cfg.pg_config(), np.random.default_rng(0))
    ee = ExecutionEngine(cfg.ee_config(), np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for _ in range(5):
        idx = rng.choice(dataset.indices(VAL_OOD), 40, replace=False)
        assert task_accuracy(pg, ee, dataset, idx, batch_size=7) == naive_task_accuracy(pg, ee, dataset, idx)
    with pytest.raises(ValueError):
        task_accuracy(pg, ee, dataset, [])
    with pytest.raises(ValueError):
        program_accuracy(pg, dataset, [])


class Oracle:
    """Stand-in generator that emits the ground-truth program."""

    def __init__(self, ds):
        self.by_tokens = {tuple(q.tokens): q.program for q in ds.questions}

    def decode_argmax(self, qs, constrained=True):
        from ilnmn.generator import DecodeOutput
        return [DecodeOutput(list(self.by_tokens[tuple(q)]), [], True, False, list(self.by_tokens[tuple(q)]))
                for q in qs]


def test_program_accuracy_examples(dataset):
    idx = dataset.indices(VAL_IID)[:200]
    assert program_accuracy(Oracle(dataset), dataset, idx) == 1.0
    pg = ProgramGenerator(tiny_config().pg_config(), np.random.default_rng(0))
    assert program_accuracy(pg, dataset, idx) < 0.05


def test_untrained_task_accuracy_is_near_chance(dataset):
    cfg = tiny_config()
    pg = ProgramGenerator(cfg.pg_config(), np.random.default_rng(0))
    ee = ExecutionEngine(cfg.ee_config(), np.random.default_rng(1))
    acc = task_accuracy(pg, ee, dataset, dataset.indices(VAL_IID))
    assert 0.35 <= acc <= 0.65


# ---------------------------------------------------------------------------
# presets, multi-seed driver and plots


def test_ablation_presets():
    presets = ablation_presets(RunConfig(n_supervised=135, arch="vector"))
    assert len(presets) == 11
    assert all(c.arch == "tensor_film" and c.n_supervised == 20 for c in presets.values())
    assert not presets["baseline_fullsn"].il_enabled and presets["baseline_fullsn"].reset.sn == "full"
    assert presets["baseline_nosn"].reset.sn == "none"
    assert presets["il"].reset == ResetStrategy("scratch", "retrain", "learning_phase_only")
    assert presets["il_seeded_nosn"].reset == ResetStrategy("seeded", "retrain", "none")
    assert presets["il_noreset_noretrain"].reset == ResetStrategy("noreset", "noretrain", "learning_phase_only")
    assert sum(c.il_enabled for c in presets.values()) == 9


def test_multi_seed_summary(tmp_path):
    fake = {0: [row(1, 0.6, 0.5), row(2, 0.9, 0.7)], 1: [row(1, 0.8, 0.6)], 2: [row(5, 0.7, 0.9)]}
    seen = []

    def runner(cfg, out):
        seen.append((cfg.run_seed, out.name))
        return fake[cfg.run_seed]

    s = multi_seed(RunConfig(), tmp_path, (0, 1, 2), runner)
    assert seen == [(0, "seed_0"), (1, "seed_1"), (2, "seed_2")]
    assert s["val_iid_acc"]["mean"] == pytest.approx((0.9 + 0.8 + 0.7) / 3)
    assert s["val_ood_acc"]["median"] == pytest.approx(0.7)
    assert s["val_ood_acc"]["std"] == pytest.approx(np.std([0.7, 0.6, 0.9]))
    assert json.loads((tmp_path / "summary.json").read_text())["seeds"] == [0, 1, 2]


def test_plot_emits_two_panel_svg(tmp_path):
    paths = []
    for name, shift in (("il", 0.1), ("baseline", 0.0)):
        d = tmp_path / name
        d.mkdir()
        with MetricsWriter(d / "metrics.csv") as w:
            for k in range(1, 6):
                w.write(row(k * 100, min(1.0, 0.5 + shift * k), phase="generation" if k % 2 else "interact"))
        paths.append(d / "metrics.csv")
    out = plot_curves(paths, tmp_path / "curves.svg")
    svg = out.read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    assert "(a) task accuracy" in svg and "(b) program accuracy" in svg
    with pytest.raises(ValueError):
        plot_curves(paths, tmp_path / "x.svg", labels=["one"])


# ---------------------------------------------------------------------------
# command line


def test_cli_bad_flags_and_config(tmp_path, capsys):
    assert main(["no-such-command"]) == 2
    assert main(["ablate", "--preset", "nope"]) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("arch = nope\n")
    assert main(["train", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) == 2
    assert main(["train", "--out-dir", str(tmp_path / "o"), "--set", "noequals"]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 1


def test_cli_ablate_list(capsys):
    assert main(["ablate", "--list"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 11 and lines[0].startswith("baseline_fullsn:")


def test_cli_gen_data_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.sgt", tmp_path / "b.sgt"
    assert main(["gen-data", "--seed", "7", "--out", str(a), "--jsonl", str(tmp_path / "a.jsonl")]) == 0
    assert main(["gen-data", "--seed", "7", "--out", str(b)]) == 0
    assert hashlib.sha256(a.read_bytes()).hexdigest() == hashlib.sha256(b.read_bytes()).hexdigest()
    out = capsys.readouterr().out.splitlines()[0]
    assert json.loads(out)["counts"]["val_ood"] == {"total": 6976, "unique": 109}


def test_cli_train_eval_plot_round_trip(tmp_path, capsys):
    cfg = tiny_config(schedule=PhaseSchedule(T_i=2, T_t=32, T_p=2, T_e=1, n_generations=1, batch_size=8))
    cfg_path = tmp_path / "cfg.txt"
    cfg.save(cfg_path)
    data = tmp_path / "d.sgt"
    assert main(["gen-data", "--out", str(data)]) == 0
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out-dir", str(run), "--data", str(data)]) == 0
    assert (run / "best.ckpt").exists() and (run / "metrics.csv").exists()
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "best.ckpt"), "--split", "val_iid", "--data", str(data)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n"] == 1080 and 0.0 <= res["task_acc"] <= 1.0
    assert main(["plot", "--metrics", str(run / "metrics.csv"), "--out", str(tmp_path / "p.svg")]) == 0
    assert (tmp_path / "p.svg").exists()


def test_cli_eval_rejects_tampered_config(tmp_path):
    cfg = tiny_config()
    ck = ckpt.Checkpoint(RunConfig().digest(), {}, {"config": cfg.to_text()})
    ckpt.save(ck, tmp_path / "t.ckpt")
    assert main(["eval", "--checkpoint", str(tmp_path / "t.ckpt")]) == 1


def test_cli_verify_quick(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 10 and "FAIL" not in out
    assert re.search(r"spectral norm vs Jacobi SVD", out)


def test_tiny_model_is_what_the_fixtures_use():
    assert tiny_config().model == TINY_MODEL
