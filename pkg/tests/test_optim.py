import numpy as np
import pytest

from fgl.diffcore import NonFiniteError
from fgl.model import ModelConfig, ModelParams, init_params
from fgl.optim import Adam


def _shifted(a: np.ndarray) -> np.ndarray:
    """Same values in a buffer offset by one element (different alignment)."""
    buf = np.empty(a.size + 1)
    out = buf[1:].reshape(a.shape)
    out[...] = a
    return out


def test_update_is_independent_of_memory_layout():
    p = init_params(ModelConfig(n_layers=1, n_heads=2, d_hidden=16), 0)
    rng = np.random.default_rng(0)
    grads = {k: 3.0 * rng.standard_normal(v.shape) for k, v in p.tensors.items()}  # norm > 1: clipping on
    a, na = Adam(1e-3).update(p, grads)
    odd = {k: np.asfortranarray(_shifted(g)) for k, g in grads.items()}
    b, nb = Adam(1e-3).update(p, odd)
    assert na == nb
    assert a == b


def test_clipping_and_bias_correction():
    p = ModelParams(ModelConfig(n_layers=1, n_heads=2, d_hidden=16),
                    {"w": np.zeros(2)})
    opt = Adam(0.1)
    q, norm = opt.update(p, {"w": np.array([3.0, 4.0])})
    assert norm == 5.0
    # first Adam step moves each coordinate by lr in the gradient's sign direction
    np.testing.assert_allclose(q.tensors["w"], [-0.1, -0.1], rtol=1e-6)
    with pytest.raises(NonFiniteError):
        opt.update(q, {"w": np.array([np.nan, 1.0])})
