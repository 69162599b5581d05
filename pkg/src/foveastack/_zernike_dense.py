"""Dense monomial matrices for fast batched Zernike slope evaluation.

The gradient of every basis term is a polynomial over a shared monomial
basis u^p v^q. Packing the coefficients into (K, M) matrices turns the
per-ray slope evaluation into two matmuls, which is what the tracer's
hot path needs.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import zernike


@lru_cache(maxsize=None)
def gradient_matrices(max_order: int):
    """(GU, GV, exponents) with GU/GV of shape (K, M).

    exponents is an (M, 2) int array of (p, q) monomial powers such that
    dZ_k/du = sum_m GU[k, m] u^p_m v^q_m (and likewise for v).
    """
    du_tabs, dv_tabs = zernike.gradient_tables(max_order)
    expo = sorted({(p, q) for tabs in (du_tabs, dv_tabs)
                   for tab in tabs for _, p, q in tab})
    index = {e: i for i, e in enumerate(expo)}
    k = len(du_tabs)
    gu = np.zeros((k, len(expo)))
    gv = np.zeros((k, len(expo)))
    for j in range(k):
        for c, p, q in du_tabs[j]:
            gu[j, index[(p, q)]] += c
        for c, p, q in dv_tabs[j]:
            gv[j, index[(p, q)]] += c
    return gu, gv, np.asarray(expo, dtype=int)


def monomial_powers(u, v, exponents):
    """(N, M) monomial values for torch or numpy inputs u, v of shape (N,)."""
    pmax = int(exponents.max()) if len(exponents) else 0
    upows = [u * 0 + 1.0]
    vpows = [v * 0 + 1.0]
    for _ in range(pmax):
        upows.append(upows[-1] * u)
        vpows.append(vpows[-1] * v)
    cols = [upows[p] * vpows[q] for p, q in exponents]
    if hasattr(u, "detach"):  # torch
        import torch
        return torch.stack(cols, dim=1)
    return np.stack(cols, axis=1)
