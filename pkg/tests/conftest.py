import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from streamst.encoder import EncoderConfig
from streamst.model import ModelConfig, SpeechTranslator
from streamst.tensor import Tape, Tensor, backward, zero_grads

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def analytic_grads(loss_fn, params):
    for p in params:
        p.requires_grad = True
    zero_grads(params)
    with Tape() as tape:
        loss = loss_fn()
        backward(loss, tape)
    return [p.grad.copy() for p in params]


def tiny_config(**kw) -> ModelConfig:
    enc = EncoderConfig(d_in=kw.pop("d_in", 4), d_model=8, n_layers=1, n_heads=2, chunk_frames=8, window_chunks=2)
    return ModelConfig(enc, d_llm=8, dec_layers=1, dec_heads=2, **kw)


@pytest.fixture
def tiny_model():
    return SpeechTranslator(tiny_config(), ["a", "b", "c", "x", "y"], seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def as_t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)
