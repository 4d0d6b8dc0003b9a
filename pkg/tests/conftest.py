import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mucrasp import model as mc
from mucrasp.calibration import CalibrationSample, Corpus, generate_synthetic_corpus

FIXTURES = Path(__file__).parent / "fixtures"
ROOT = Path(__file__).parent.parent
TOY_CHECKPOINT = ROOT / "assets" / "toy_model.ckpt"


def small_config(**kw) -> mc.ModelConfig:
    base = dict(n_layers=2, d_model=16, n_q_heads=4, n_kv_groups=2, head_dim=4, d_mlp=8,
                vocab_size=259, max_seq=256, n_vision_tokens=4)
    base.update(kw)
    return mc.ModelConfig(**base)


def short_sample(config: mc.ModelConfig, seed: int = 0, prompt: str = "How many?",
                 response: str = "1. look\nTherefore, two.") -> CalibrationSample:
    rng = np.random.default_rng(seed)
    vis = rng.normal(size=(config.n_vision_tokens, config.d_model))
    return CalibrationSample(vis, prompt, response, 2)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def weights(cfg):
    return mc.init_weights(cfg, seed=3)


@pytest.fixture
def sample(cfg):
    return short_sample(cfg)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(5, 3, small_config())


@pytest.fixture
def short_corpus(cfg):
    return Corpus([short_sample(cfg, i, response=r) for i, r in enumerate(
        ["1. red\n2. blue\nTherefore, two.", "Step 1: count\nSo the answer is one.",
         "1. see\nHence three.\nFinal Answer: 3"])], seed=0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
