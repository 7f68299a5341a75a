from pathlib import Path

import numpy as np
import pytest

from stablemoe_lab.backbone import BackboneConfig
from stablemoe_lab.corpus import load_corpus
from stablemoe_lab.model import ModelConfig, MoELanguageModel

DATA = Path(__file__).parent / "data"


@pytest.fixture
def tiny_text_path():
    return DATA / "tiny.txt"


@pytest.fixture
def tiny_corpus(tiny_text_path):
    return load_corpus(tiny_text_path, (0.8, 0.1, 0.1))


def randomize(module, seed=0, std=0.3):
    """Replace every parameter with noise so no sublayer is an exact identity."""
    rng = np.random.default_rng(seed)
    for p in module.parameters():
        p.values = (p.values + rng.normal(0.0, std, size=p.shape)).astype(p.dtype)


def small_model(router="stablemoe", seed=0, **kw):
    bb = BackboneConfig(hidden_dim=16, num_blocks=2, num_heads=2, ffn_inner_dim=32, max_seq_len=16)
    return MoELanguageModel(ModelConfig(backbone=bb, router=router, num_experts=4, router_dim=6, **kw), seed=seed)


ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
