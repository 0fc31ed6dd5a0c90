import numpy as np
import pytest

from taskfree.nn import TRIPLET, LossSpec, Model


def max_rel_err(a, b, floor=1e-8):
    """Largest relative error; components below ``floor`` in both are compared absolutely."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.abs(a), np.abs(b))
    diff = np.abs(a - b)
    big = scale >= floor
    rel = diff[big] / scale[big] if big.any() else np.zeros(1)
    small = diff[~big] if (~big).any() else np.zeros(1)
    return max(float(rel.max()), float(small.max()))


def seeded_case(case: int, kind: str):
    """A random (model, batch, spec) triple; the net has one or two hidden layers."""
    rng = np.random.default_rng(1000 + case)
    depth = int(rng.integers(1, 3))
    sizes = (int(rng.integers(2, 6)), *(int(rng.integers(3, 8)) for _ in range(depth)), int(rng.integers(2, 5)))
    model = Model.init(sizes, case)
    model.params += 0.1 * rng.standard_normal(model.n_params)
    B = int(rng.integers(1, 6))
    if kind == "ce":
        spec = LossSpec()
        batch = (rng.standard_normal((B, sizes[0])), rng.integers(0, sizes[-1], B))
    else:
        spec = LossSpec(TRIPLET, margin=1.0)
        batch = (rng.standard_normal((B, 3, sizes[0])), np.zeros(B, dtype=int))
    return model, batch, spec


@pytest.fixture
def rng():
    return np.random.default_rng(0)
