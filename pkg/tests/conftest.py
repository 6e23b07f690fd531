import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dcar.backbone import Backbone, BackboneConfig, Vocab  # noqa: E402
from dcar.dataset import gen_dataset, gen_taxonomy  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def tiny_taxonomy():
    return gen_taxonomy(2, 2, seed=0)


@pytest.fixture(scope="session")
def tiny_records(tiny_taxonomy):
    return gen_dataset(tiny_taxonomy, per_sub=6, seed=0)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_records):
    return Vocab.from_texts(r.caption for r in tiny_records)


@pytest.fixture()
def backbone(tiny_vocab):
    return Backbone.create(BackboneConfig(vocab_size=len(tiny_vocab)), seed=0).freeze()


@pytest.fixture()
def backbone64(tiny_vocab):
    return Backbone.create(BackboneConfig(vocab_size=len(tiny_vocab)), seed=0).freeze().double()


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
