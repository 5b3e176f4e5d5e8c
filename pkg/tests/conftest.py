import numpy as np
import pytest

from ucil.data import SynthConfig, synth_dataset, split_tasks
from ucil.experiment import DatasetSpec, ExperimentConfig
from ucil.model import ModelConfig
from ucil.trainer import TrainConfig

TINY_SYNTH = SynthConfig(n_frames=24, n_mels=8)
TINY_MODEL = ModelConfig(n_mels=8, frame_count=24, conv_channels=(16,), kernel_width=3, embedding_dim=5)
TINY_TRAIN = TrainConfig(batch_size=8, epochs=2, warmup_epochs=1, patience=5, ema_decay=0.9, steps_per_epoch=2, fisher_samples=4)
TINY_DATA = DatasetSpec(n_classes=4, strong=24, weak=12, unlabeled=16, test=8, n_frames=24, n_mels=8)


@pytest.fixture(scope="session")
def tiny_corpus():
    return synth_dataset(4, {"strong": 24, "weak": 12, "unlabeled": 16, "test": 8}, 0, TINY_SYNTH)


@pytest.fixture(scope="session")
def tiny_tasks(tiny_corpus):
    return split_tasks(tiny_corpus, "two_task", 0)


@pytest.fixture
def tiny_config():
    def make(**kw):
        base = dict(capacity=(6, 3), train=TINY_TRAIN, model=TINY_MODEL, dataset=TINY_DATA)
        base.update(kw)
        return ExperimentConfig(**base)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """Record a criterion verdict for the end-of-run summary, then assert it."""

    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE[number] = (ok, detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
