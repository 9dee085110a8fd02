import numpy as np
import pytest

from cslm import corpus as C
from cslm.model import ModelConfig, build_model


@pytest.fixture
def tiny_vocab():
    return C.Vocabulary(["a", "b", "c"], ["一", "二", "三"])


def utter(vocab, text):
    return C.encode(C.tokenize_utterance(text), vocab)


@pytest.fixture
def toy_utterances(tiny_vocab):
    return [utter(tiny_vocab, s) for s in ("a b 一 c", "二 三 a", "一 一 二 b c")]


def random_model(vocab, kind, hidden=8, embed=8, seed=0, scale=0.5, features=None):
    """Model with larger-than-default random weights so every path matters."""
    m = build_model(vocab, ModelConfig(kind=kind, hidden=hidden, embed=embed, features=features or {}), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in m.parameters():
        p.data[...] = rng.normal(0.0, scale, p.data.shape)
    return m


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
