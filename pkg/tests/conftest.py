import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from orthros.model import ModelConfig, build_model
from orthros.synthdata import TaskSpec


def tiny_config(**kw) -> ModelConfig:
    base = dict(v_tgt=8, v_src=6, d_model=16, d_ff=32, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                n_max=12, input_dim=4, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, double=True, **kw):
    model = build_model(tiny_config(**kw), seed=seed)
    model.eval()
    return model.double() if double else model


def random_frames(U, dim=4, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(U, dim, generator=g, dtype=dtype)


@pytest.fixture
def model64():
    return tiny_model()


@pytest.fixture
def small_spec():
    return TaskSpec(v_src_core=6, v_tgt_core=16, len_min=2, len_max=4, d_min=6, d_max=8, input_dim=4, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Trained desk-scale systems (several CPU minutes; built once per session)."""
    from pipeline import build_desk_system
    return build_desk_system(tmp_path_factory.mktemp("desk"))


# ------------------------------------------------------------------ acceptance reporting

ACCEPTANCE = {}


@contextmanager
def criterion(number, title):
    """Record one PASS/FAIL line for an acceptance criterion; ``notes`` collects details."""
    notes = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        status, notes = "FAIL", notes + [f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"]
        raise
    else:
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - start
        line = f"criterion {number} [{status}] {title} ({elapsed:.1f}s)" + (f" :: {'; '.join(notes)}" if notes else "")
        ACCEPTANCE[number] = line
        print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
