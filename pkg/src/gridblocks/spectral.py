"""Weighted Laplacian, its pseudo-inverse, DC flows and effective resistance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .errors import BalanceError, ConditioningError, DisconnectedError
from .network import PowerNetwork, components, island_sums

DEFAULT_BALANCE_TOL = 1e-6


def incidence(net: PowerNetwork) -> np.ndarray:
    """Oriented incidence matrix ``C`` of shape ``(n, m)``: +1 at from, -1 at to."""
    C = np.zeros((net.n, net.m))
    ends = net.endpoints
    cols = np.arange(net.m)
    C[ends[:, 0], cols] = 1.0
    C[ends[:, 1], cols] = -1.0
    return C


def laplacian(net: PowerNetwork) -> np.ndarray:
    """``L = C B C^T`` assembled edge by edge."""
    L = np.zeros((net.n, net.n))
    for (i, j), b in zip(net.endpoints, net.susceptances):
        L[i, i] += b
        L[j, j] += b
        L[i, j] -= b
        L[j, i] -= b
    return L


@dataclass(frozen=True, eq=False)
class LaplacianSystem:
    """Laplacian, pseudo-inverse and island structure of one network.

    Attributes
    ----------
    laplacian : ndarray, shape (n, n)
    pseudo_inverse : ndarray, shape (n, n)
        Moore-Penrose inverse; block diagonal over islands.
    islands : list of list of int
    """

    laplacian: np.ndarray
    pseudo_inverse: np.ndarray
    islands: list[list[int]]

    @property
    def n(self) -> int:
        return self.laplacian.shape[0]

    def island_of(self) -> np.ndarray:
        lab = np.empty(self.n, dtype=int)
        for k, I in enumerate(self.islands):
            lab[I] = k
        return lab

    @property
    def is_connected(self) -> bool:
        return len(self.islands) == 1


def build_system(net: PowerNetwork) -> LaplacianSystem:
    """Assemble ``L`` and compute ``L^+`` island by island.

    For each island ``I`` the matrix ``L_I + J/|I|`` (``J`` all ones) is
    nonsingular; its inverse minus ``J/|I|`` is the pseudo-inverse block.

    Raises
    ------
    ConditioningError
        The corrected block fails to factor.
    """
    if net.n == 0:
        raise DisconnectedError("network has no buses")
    L = laplacian(net)
    islands = components(net.n, net.endpoints)
    Lp = np.zeros_like(L)
    for I in islands:
        k = len(I)
        if k == 1:
            continue
        idx = np.ix_(I, I)
        corr = np.full((k, k), 1.0 / k)
        try:
            cf = sla.cho_factor(L[idx] + corr, lower=True)
            inv = sla.cho_solve(cf, np.eye(k))
        except (np.linalg.LinAlgError, ValueError):
            raise ConditioningError(f"corrected Laplacian of island starting at bus {I[0]} is singular", I) from None
        block = inv - corr
        Lp[idx] = 0.5 * (block + block.T)
    return LaplacianSystem(L, Lp, islands)


def is_balanced(p: Sequence[float], islands: Sequence[Sequence[int]], tol: float = 1e-9) -> bool:
    return bool(np.all(np.abs(island_sums(np.asarray(p, dtype=float), islands)) <= tol))


def check_balanced(p: np.ndarray, islands: Sequence[Sequence[int]], tol: float) -> None:
    sums = island_sums(p, islands)
    bad = {k: float(s) for k, s in enumerate(sums) if abs(s) > tol}
    if bad:
        raise BalanceError(f"injections unbalanced on {len(bad)} island(s): {bad}", bad)


def phase_angles(sys: LaplacianSystem, p: Sequence[float]) -> np.ndarray:
    return sys.pseudo_inverse @ np.asarray(p, dtype=float)


def dc_flow(
    sys: LaplacianSystem,
    net: PowerNetwork,
    p: Sequence[float],
    tol: float = DEFAULT_BALANCE_TOL,
) -> np.ndarray:
    """Line flows ``f = B C^T L^+ p`` in MW, signed by line orientation.

    Raises
    ------
    BalanceError
        Some island's injections do not sum to zero within ``tol``.
    """
    p = np.asarray(p, dtype=float)
    check_balanced(p, sys.islands, tol)
    theta = phase_angles(sys, p)
    ends = net.endpoints
    return net.susceptances * (theta[ends[:, 0]] - theta[ends[:, 1]])


def effective_resistance(sys: LaplacianSystem, i: int, j: int) -> float:
    """Resistance distance; ``math.inf`` when ``i`` and ``j`` lie on different islands."""
    if i == j:
        return 0.0
    lab = sys.island_of()
    if lab[i] != lab[j]:
        return math.inf
    Lp = sys.pseudo_inverse
    return max(0.0, float(Lp[i, i] + Lp[j, j] - 2.0 * Lp[i, j]))


def resistance_matrix(sys: LaplacianSystem) -> np.ndarray:
    d = np.diag(sys.pseudo_inverse)
    R = d[:, None] + d[None, :] - 2.0 * sys.pseudo_inverse
    lab = sys.island_of()
    R[lab[:, None] != lab[None, :]] = np.inf
    np.fill_diagonal(R, 0.0)
    return np.maximum(R, 0.0)


def total_effective_resistance(sys: LaplacianSystem) -> float:
    """``R_tot = n tr(L^+)``; defined for connected networks only."""
    if not sys.is_connected:
        raise DisconnectedError(f"total effective resistance needs a connected network; found {len(sys.islands)} islands")
    return sys.n * float(np.trace(sys.pseudo_inverse))
