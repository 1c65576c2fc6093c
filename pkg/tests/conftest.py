import numpy as np
import pytest

from diffusionlab.denoiser import init_model
from diffusionlab.engine import build_schedule


class StubModel:
    """Cheap stand-in denoiser: eps depends on x and on the mean of the tokens,
    and counts its forward passes."""

    hyper = dict(channels=3, M=8, N=8)

    def __init__(self):
        self.calls = 0

    def predict_noise(self, t, x, tokens, value_tokens=None):
        self.calls += 1
        x = np.asarray(x)
        if isinstance(tokens, (list, tuple)):
            shift = np.array([s.tokens.mean() for s in tokens], dtype=x.dtype)[:, None, None, None]
            attn = np.stack([np.full((64, s.L), 1.0 / s.L) for s in tokens])
        else:
            shift = np.asarray(tokens.tokens.mean(), dtype=x.dtype)
            attn = np.full((64, tokens.L), 1.0 / tokens.L)
        return (0.1 * x + shift).astype(x.dtype), attn


@pytest.fixture
def stub():
    return StubModel()


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


@pytest.fixture(scope="session")
def small_model():
    return init_model(dict(d=8, hidden=16, time_dim=8, qk_norm=1.0, seed=3))


# acceptance lines, printed once at the end of the session
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"CRITERION {criterion}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}")
