from __future__ import annotations

import time

import numpy as np
import pytest

from kwsimc import dataio
from kwsimc.config import DEFAULTS, arch_from_config
from kwsimc.model import checkpoint
from kwsimc.model.training import TrainConfig, train_offline

KEYWORDS = ("yes", "no")
TRAIN_EPOCHS = 10

# acceptance lines collected during the run, printed in the terminal summary
RESULTS: list[str] = []


def report(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {name}: {detail}"
    RESULTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    return dataio.make_fixtures(tmp_path_factory.mktemp("fixtures"), keywords=KEYWORDS,
                                per_keyword=100, speakers=3, personal_per_cell=5, seed=0)


@pytest.fixture(scope="session")
def dataset(fixture_root):
    return dataio.load_gscd(fixture_root / "gscd", keywords=KEYWORDS, seed=0)


@pytest.fixture(scope="session")
def trained(dataset, tmp_path_factory):
    """Desk model trained on the 2-keyword fixture set, with timing and its checkpoint path."""
    cfg = dict(DEFAULTS, data=dict(DEFAULTS["data"], keywords=list(KEYWORDS)))
    tr = dataset.subset("train")
    start = time.perf_counter()
    res = train_offline(tr.audio(), tr.labels, arch_from_config(cfg),
                        TrainConfig(epochs=TRAIN_EPOCHS, seed=0),
                        augment_fn=dataio.augment, quantize_fn=dataio.quantize_clips)
    seconds = time.perf_counter() - start
    path = checkpoint.save(res.model, tmp_path_factory.mktemp("model") / "model.ckpt")
    return {"model": res.model, "seconds": seconds, "path": path}


@pytest.fixture(scope="session")
def splits(dataset):
    tr, te = dataset.subset("train"), dataset.subset("test")
    return {"train": (tr.audio_8bit(), tr.labels), "test": (te.audio_8bit(), te.labels)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
