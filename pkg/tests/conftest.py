import numpy as np
import pytest

from voxelfm import encoder as enc


def fd_param_gradients(state, scalar_fn, h=1e-4):
    """Central finite differences of scalar_fn(state) w.r.t. every parameter."""
    grads = {}
    for name, p in state.params.items():
        fd = np.zeros_like(p, dtype=np.float64)
        flat = fd.ravel()
        for idx in range(p.size):
            params = {k: v.copy() for k, v in state.params.items()}
            params[name].ravel()[idx] += h
            lp = scalar_fn(state.replace_params(params))
            params[name].ravel()[idx] -= 2 * h
            lm = scalar_fn(state.replace_params(params))
            flat[idx] = (lp - lm) / (2 * h)
        grads[name] = fd
    return grads


def rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(np.asarray(a, dtype=np.float64)
                          - np.asarray(b, dtype=np.float64)) / denom


@pytest.fixture(scope="session")
def tiny_encoder():
    """A <5k-parameter float64 encoder for gradient checks."""
    config = enc.EncoderConfig(patch_shape=(4, 4, 4), stages=1,
                               base_channels=2, embed_dim=4, proj_dim=4)
    state = enc.init(config, seed=11).astype(np.float64)
    assert state.num_params() < 5000
    return state
