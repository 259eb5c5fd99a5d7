import numpy as np
import pytest

from mmasr.model import ModelConfig, Seq2Seq


def small_model(mode="none", V=10, D=5, H=6, Dv=4, layers=4, seed=0, dtype=np.float64, **kw):
    cfg = ModelConfig(vocab_size=V, feat_dim=D, hidden=H, enc_layers=layers, dropout=0.0, mode=mode,
                      visual_dim=Dv, **kw)
    return Seq2Seq(cfg, seed=seed, dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE = []


def record(number, title, ok, detail):
    """Remember one criterion's verdict; printed together at the end of the session."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
