from __future__ import annotations

import numpy as np
import pytest
import torch

from gazevqa.dataset import load_dataset
from gazevqa.model_core import ModelConfig, build_model
from gazevqa.synthetic import corpus_alphabet, make_corpus, write_manifest

torch.set_num_threads(1)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        prefix_length=4,
        mapping_layers=2,
        mapping_heads=4,
        decoder={"kind": "toy", "d_model": 32, "layers": 2, "heads": 4, "max_len": 64},
        tokenizer={"kind": "char", "alphabet": corpus_alphabet()},
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def make_model():
    def factory(**overrides):
        return build_model(tiny_config(**overrides))

    return factory


@pytest.fixture(scope="session")
def gaze_train(tmp_path_factory):
    out = tmp_path_factory.mktemp("gaze_train")
    path = make_corpus(out, 16, seed=1)
    write_manifest(out, {"train": 16})
    return load_dataset(path)


@pytest.fixture(scope="session")
def gaze_test(tmp_path_factory):
    out = tmp_path_factory.mktemp("gaze_test")
    return load_dataset(make_corpus(out, 8, seed=2, split="test", miss_rate=0.25))


@pytest.fixture(scope="session")
def caption_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("caption")
    return load_dataset(make_corpus(out, 256, seed=100, caption_style=True))


def random_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


# Acceptance tests append (criterion, title, passed, detail); printed after the run.
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
