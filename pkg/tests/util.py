"""Shared construction helpers for the test suite."""

import numpy as np

from tembank.grid import FeatureGrid, ProbMask, l2_normalize_channels
from tembank.templates import InertiaParams, bank_init, bank_step


def rand_grid(rng, c, h, w):
    """Random normalized feature grid."""
    return l2_normalize_channels(FeatureGrid(rng.standard_normal((c, h, w))))


def rand_mask(rng, h, w, hard=False):
    fg = rng.random((h, w))
    if hard:
        fg = (fg > 0.5).astype(np.float64)
    return ProbMask.from_fg(fg)


def rand_bank(rng, c, h, w, steps=2, hard=False, params=None):
    """Bank built the way the tracker builds one: init plus a few steps."""
    params = params or InertiaParams()
    bank = bank_init(rand_grid(rng, c, h, w), rand_mask(rng, h, w, hard=hard))
    for _ in range(steps):
        bank = bank_step(bank, rand_grid(rng, c, h, w), rand_mask(rng, h, w, hard=hard), params)
    return bank


def orthonormal_set(seed, c, k):
    """k exactly-orthonormal pseudo-random vectors in R^c (columns)."""
    assert k <= c
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((c, k)))
    # fix signs so the set is unique given the seed
    return q * np.sign(np.diag(r))[None, :]
