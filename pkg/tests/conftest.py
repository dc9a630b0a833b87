import numpy as np
import pytest

from mmilab.synth import TaskSpec, generate_task
from mmilab.training import flat_start, train_ml

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_spec():
    return TaskSpec(train_utterances=12, test_utterances=4, words_per_utterance=(2, 4), seed=11)


@pytest.fixture(scope="session")
def small_task(small_spec):
    return generate_task(small_spec)


@pytest.fixture(scope="session")
def small_mle(small_task):
    init = flat_start(small_task.true_model, small_task.train.all_frames())
    models, _ = train_ml(init, small_task.train, small_task.lexicon, 8)
    return models[-1]


@pytest.fixture(scope="session")
def task7():
    return generate_task(TaskSpec())


@pytest.fixture(scope="session")
def ml7(task7):
    init = flat_start(task7.true_model, task7.train.all_frames())
    models, lls = train_ml(init, task7.train, task7.lexicon, 20)
    return models, lls


@pytest.fixture(scope="session")
def mle7(ml7):
    return ml7[0][-1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
