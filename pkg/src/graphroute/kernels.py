"""Hot loops of the listwise ranking loss.

Each kernel has a numba version (explicit loops) and a vectorized numpy
version.  ``pairwise_loss_grad`` dispatches to numba unless it is disabled
through ``GRAPHROUTE_DISABLE_NUMBA``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

from ._accel import HAS_NUMBA, njit

WEIGHT_MODES = {"rank-gap": 0, "uniform": 1, "printed": 2}

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def rank_rows(scores: np.ndarray) -> np.ndarray:
    """1-based ranks per row: higher score -> smaller rank, ties by index."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(scores.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, scores.shape[1] + 1)
    return ranks


def _loops(S, Y, R, mode):
    G, K = S.shape
    loss = np.zeros(G)
    dY = np.zeros((G, K))
    for g in range(G):
        for i in range(K):
            for j in range(K):
                if i == j:
                    continue
                ds = S[g, j] - S[g, i]
                if not ds < 0.0:
                    continue
                gap = abs(R[g, i] - R[g, j])
                if mode == 0:
                    m = 1.0 - (gap + 1.0) ** -0.5
                elif mode == 1:
                    m = 1.0
                else:
                    m = math.sqrt(gap)
                z = ds * (Y[g, j] - Y[g, i])
                cdf = 0.5 * (1.0 + math.erf(z / _SQRT2))
                loss[g] += m * z * cdf
                dz = m * (cdf + z * _INV_SQRT_2PI * math.exp(-0.5 * z * z)) * ds
                dY[g, j] += dz
                dY[g, i] -= dz
    return loss, dY


pairwise_loss_grad_numba = njit(_loops) if HAS_NUMBA else None
pairwise_loss_grad_python = _loops


def pairwise_loss_grad_numpy(S, Y, R, mode):
    S = np.asarray(S, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    ds = S[:, None, :] - S[:, :, None]  # [g, i, j] = s_j - s_i
    dy = Y[:, None, :] - Y[:, :, None]
    gap = np.abs(R[:, :, None] - R[:, None, :])
    active = ds < 0.0
    if mode == 0:
        m = 1.0 - (gap + 1.0) ** -0.5
    elif mode == 1:
        m = np.ones_like(gap)
    else:
        m = np.sqrt(gap)
    m = np.where(active, m, 0.0)
    z = ds * dy
    cdf = ndtr(z)
    loss = np.sum(m * z * cdf, axis=(1, 2))
    dz = m * (cdf + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)) * ds
    dY = dz.sum(axis=1) - dz.sum(axis=2)
    return loss, dY


def pairwise_loss_grad(S, Y, R, mode: int = 0):
    """Per-group loss ``[G]`` and its gradient w.r.t. predictions ``[G, K]``.

    ``S`` scores, ``Y`` predictions, ``R`` ranks, all ``[G, K]``.
    """
    if pairwise_loss_grad_numba is not None:
        return pairwise_loss_grad_numba(
            np.ascontiguousarray(S, dtype=np.float64),
            np.ascontiguousarray(Y, dtype=np.float64),
            np.ascontiguousarray(R, dtype=np.int64),
            int(mode),
        )
    return pairwise_loss_grad_numpy(S, Y, R, mode)
