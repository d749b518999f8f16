import time
from dataclasses import dataclass, replace

import pytest

from innlab.config import DESK_FINETUNE, DESK_PRETRAIN, from_preset
from innlab.datasets import DatasetHandle, load_digits
from innlab.interference import Background, InterferenceConfig, generate_backgrounds
from innlab.models import SmallConvNet, SnapshotSet, finetune_inn, pretrain, transfer_expand

ACCEPTANCE_LINES: list[str] = []


@dataclass
class Desk:
    """Digits pipeline for one seed: clean model plus fig3-blue fine-tuned snapshots."""

    seed: int
    train: DatasetHandle
    test: DatasetHandle
    pretrained: SmallConvNet
    snapshots: SnapshotSet
    icfg: InterferenceConfig
    backgrounds: list[Background]
    pretrain_seconds: float
    finetune_seconds: float


@pytest.fixture(scope="session")
def digits():
    return load_digits("train"), load_digits("test")


@pytest.fixture(scope="session")
def desk(digits):
    """``desk(seed)`` trains once per seed and caches for the whole session."""
    cache: dict[int, Desk] = {}

    def get(seed: int) -> Desk:
        if seed not in cache:
            train, test = digits
            icfg = from_preset("fig3-blue", seed).interference
            bgs = generate_backgrounds(icfg.K, *train.image_shape, seed)
            t0 = time.perf_counter()
            pre = pretrain(train, replace(DESK_PRETRAIN, seed=seed), 10)
            t1 = time.perf_counter()
            model = transfer_expand(pre, 10, icfg.K, seed)
            snaps = finetune_inn(model, train, icfg, replace(DESK_FINETUNE, seed=seed), bgs, "digits")
            t2 = time.perf_counter()
            cache[seed] = Desk(seed, train, test, pre, snaps, icfg, bgs, t1 - t0, t2 - t1)
        return cache[seed]

    return get


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
