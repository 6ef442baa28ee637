"""Shared helpers for the test suite."""

import numpy as np
import pytest

from dnls.geometry import LevelSetModel, ModelConfig, init_grid


def random_model(rng, n_polytopes=12, m_halfspaces=6, image_shape=(48, 48),
                 weight_jitter=0.3, bias_jitter=2.0, n_regions=None) -> LevelSetModel:
    """Lattice model with randomized parameters (and labels, when asked)."""
    cfg = ModelConfig(n_polytopes=n_polytopes, m_halfspaces=m_halfspaces)
    model = init_grid(cfg, image_shape)
    model.weights += rng.normal(0.0, weight_jitter, model.weights.shape)
    model.biases += rng.normal(0.0, bias_jitter, model.biases.shape)
    if n_regions is not None:
        model.labels = rng.integers(1, n_regions + 1, model.n_polytopes)
    model.rebuild_neighbor_index()
    return model


def fd_point_gradient(model, x, i, j, h=1e-5) -> np.ndarray:
    """Central finite differences of eval_level_set w.r.t. (w_ij1, w_ij2, b_ij)."""
    from dnls.geometry import eval_level_set

    out = np.empty(3)
    for k in range(3):
        def probe(delta):
            if k < 2:
                model.weights[i, j, k] += delta
            else:
                model.biases[i, j] += delta
            value = eval_level_set(model, x)
            if k < 2:
                model.weights[i, j, k] -= delta
            else:
                model.biases[i, j] -= delta
            return value

        out[k] = (probe(h) - probe(-h)) / (2.0 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
