import numpy as np
import pytest

from ilnmn.config import ModelSize, PhaseSchedule, RunConfig
from ilnmn.data import build_dataset

TINY_MODEL = ModelSize(width=4, embed=8, film_hidden=8, cls_hidden=8, q_emb=8, enc_hidden=8,
                       dec_hidden=16, p_emb=8, attn=16)


def tiny_config(**kw) -> RunConfig:
    sched = kw.pop("schedule", PhaseSchedule(T_i=6, T_t=300, T_p=5, T_e=3, n_generations=2,
                                             batch_size=16, gt_per_batch=4))
    base = dict(model=TINY_MODEL, schedule=sched, eval_every=0, eval_limit=64, train_eval_size=64)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def dataset():
    return build_dataset(0, 20)


@pytest.fixture(scope="session")
def dataset135():
    return build_dataset(0, 135)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# PASS/FAIL lines from the acceptance module, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
