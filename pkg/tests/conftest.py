import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from memtrack.memory import MemoryConfig


@pytest.fixture
def tiny_config():
    return MemoryConfig(num_cells=3, hidden_dim=6, mlp_hidden_dim=8, key_dim=2)


def random_trace_matrix(rng, T, N):
    """Random (overwrite, coref) matrices with o + c summing below 1 per
    (token, cell) so they look like plausible operation masses."""
    o = rng.uniform(0.0, 1.0, size=(T, N))
    c = rng.uniform(0.0, 1.0, size=(T, N))
    scale = rng.uniform(0.0, 1.0, size=(T, N)) / np.maximum(o + c, 1e-12)
    return o * scale, c * scale
