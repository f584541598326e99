"""Binomial scenario tree standing in for the Brownian filtration.

Level ``k`` holds ``2**k`` nodes stored contiguously.  The children of node
``n`` at level ``k`` are ``n`` (increment ``-sqrt(dt)``) and ``n + 2**k``
(increment ``+sqrt(dt)``), so bit ``i`` of a node id records the sign of
increment ``i + 1``.  An adapted process is a list of per-level arrays whose
leading axis is the node index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_STEPS = 24


class TreeSizeError(ValueError):
    """Requested tree does not fit the memory guard."""


@dataclass(frozen=True)
class ScenarioTree:
    T: float
    n_steps: int

    def __post_init__(self):
        if not 1 <= self.n_steps <= MAX_STEPS:
            raise TreeSizeError(f"n_steps={self.n_steps} outside [1, {MAX_STEPS}]")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.dt)

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def level_size(self, k: int) -> int:
        return 1 << k

    def prob(self, k: int) -> float:
        return 1.0 / (1 << k)

    def increments(self, k: int) -> np.ndarray:
        """Increment dB leading into each node of level ``k >= 1``."""
        half = 1 << (k - 1)
        s = self.sqrt_dt
        return np.concatenate([np.full(half, -s), np.full(half, s)])

    def brownian(self, k: int) -> np.ndarray:
        """B(t_k) at every node of level k."""
        b = np.zeros(1)
        for j in range(1, k + 1):
            b = np.concatenate([b, b]) + self.increments(j)
        return b

    def expectation(self, x) -> float | np.ndarray:
        """Unconditional expectation of a level array (mean over the node axis)."""
        return np.mean(np.asarray(x), axis=0)


def build_tree(T: float, n_steps: int) -> ScenarioTree:
    return ScenarioTree(float(T), int(n_steps))


def children(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a level-(k+1) array into its (minus, plus) child blocks."""
    half = x.shape[0] // 2
    return x[:half], x[half:]


def conditional_expectation(x: np.ndarray) -> np.ndarray:
    """E[x | F_k] for x given on level k+1."""
    x = np.asarray(x)
    if x.shape[0] < 2 or x.shape[0] & (x.shape[0] - 1):
        raise ValueError(f"array with {x.shape[0]} nodes is not a level k+1 >= 1")
    lo, hi = children(x)
    return 0.5 * (lo + hi)


def increment_projection(x: np.ndarray, tree: ScenarioTree) -> np.ndarray:
    """E[x dB_{k+1} | F_k] / dt for x given on level k+1."""
    lo, hi = children(np.asarray(x))
    return (hi - lo) / (2.0 * tree.sqrt_dt)


def branch(base: np.ndarray, noise: np.ndarray, tree: ScenarioTree) -> np.ndarray:
    """Level-(k+1) array ``base +/- sqrt(dt) * noise`` from level-k arrays."""
    s = tree.sqrt_dt * noise
    return np.concatenate([base - s, base + s])


def ito_integral(rho, tree: ScenarioTree) -> np.ndarray:
    """Terminal value of sum_k rho_k dB_{k+1}; ``rho[k]`` has 2**k entries."""
    if len(rho) != tree.n_steps:
        raise ValueError(f"need {tree.n_steps} integrand levels, got {len(rho)}")
    acc = np.zeros(1)
    for k, r in enumerate(rho):
        r = np.broadcast_to(np.asarray(r, dtype=float), (1 << k,))
        acc = branch(acc, r, tree)
    return acc


def martingale_representation(xi, tree: ScenarioTree):
    """Return (x0, rho) with xi = x0 + sum_k rho_k dB_{k+1} exactly."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[0] != 1 << tree.n_steps:
        raise ValueError(f"terminal variable needs {1 << tree.n_steps} nodes, got {xi.shape[0]}")
    rho = [None] * tree.n_steps
    cur = xi
    for k in range(tree.n_steps - 1, -1, -1):
        rho[k] = increment_projection(cur, tree)
        cur = conditional_expectation(cur)
    return float(cur[0]) if cur.ndim == 1 else cur[0], rho


def peng_eta(t: float, T: float) -> float:
    """+1 on [(1 - 2**(-2i)) T, (1 - 2**(-2i-1)) T) for i = 0, 1, ..., else -1."""
    if not 0.0 <= t < T:
        raise ValueError(f"t={t} outside [0, {T})")
    # t lies in [(1 - 2**-j) T, (1 - 2**-(j+1)) T) for j = floor(-log2(1 - t/T))
    j = 0
    rem = (T - t) / T
    while rem <= 0.5 ** (j + 1):
        j += 1
    return 1.0 if j % 2 == 0 else -1.0


def peng_integrand(tree: ScenarioTree) -> np.ndarray:
    """eta sampled at the left endpoint of every time cell."""
    return np.array([peng_eta(t, tree.T) for t in tree.times()[:-1]])


def peng_xi(tree: ScenarioTree) -> np.ndarray:
    return ito_integral(list(peng_integrand(tree)), tree)
