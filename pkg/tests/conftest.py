import numpy as np
import pytest

from modal_distill.data.corpus import Corpus
from modal_distill.data.synthetic import SyntheticCorpusConfig, generate_synthetic_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_corpus_config(**overrides) -> SyntheticCorpusConfig:
    kw = dict(
        seed=7,
        train_patients={"ABC": 4, "GCB": 4},
        test_patients={"ABC": 2, "GCB": 2},
        regions_per_patient=2,
        region_size=64,
        signal_strength={"HES": 0.5, "BCL6": 0.9, "CD10": 0.9, "MUM1": 0.9},
        noise=0.3,
    )
    kw.update(overrides)
    return SyntheticCorpusConfig(**kw)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory) -> Corpus:
    root = tmp_path_factory.mktemp("tiny_corpus")
    generate_synthetic_corpus(tiny_corpus_config(), root)
    return Corpus.open(root)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
