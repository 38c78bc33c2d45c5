"""Shared factories and fixtures for tests."""

import numpy as np
import pytest

from services.flows import SymmetricAttentionParams, random_symmetric_params
from services.numerics import ParticleCloud, SeededRng, gaussian_sample


def make_cost(n: int, m: int | None = None, scale: float = 1.0, seed: int = 0) -> np.ndarray:
    """Random cost matrix with N(0, scale²) entries."""
    return scale * SeededRng(seed).generator.standard_normal((n, m or n))


def make_cloud(n: int, d: int, seed: int = 0, stddev: float = 1.0) -> ParticleCloud:
    return gaussian_sample(SeededRng(seed), n, d, stddev=stddev)


def make_symmetric_params(d: int, seed: int = 0, scale: float = 0.5) -> SymmetricAttentionParams:
    return random_symmetric_params(SeededRng(seed), d, scale)


def make_instance(seed: int, n_max: int = 8, d_max: int = 3, scale: float = 0.5):
    """Random (cloud, parameters) pair with n in [2, n_max], d in [1, d_max]."""
    gen = SeededRng(10_000 + seed).generator
    n = int(gen.integers(2, n_max + 1))
    d = int(gen.integers(1, d_max + 1))
    return make_cloud(n, d, seed=seed), make_symmetric_params(d, seed=seed, scale=scale)


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    """Point OUT_DIR at a temporary directory."""
    from config import settings

    monkeypatch.setattr(settings, "out_dir", str(tmp_path))
    return tmp_path


def make_interaction_params(d: int, seed: int = 0, jitter: float = 0.25) -> SymmetricAttentionParams:
    """W_Q = I, W_K = M with M = I plus a small random symmetric perturbation."""
    A = SeededRng(seed).generator.standard_normal((d, d))
    return SymmetricAttentionParams.from_interaction(np.eye(d) + 0.5 * jitter * (A + A.T))
