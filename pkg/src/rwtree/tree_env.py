"""Lazily realized marked Galton-Watson tree.

Node ids are dense integers handed out in realization order.  Id 0 is the
root's parent ``e*`` and id 1 is the root ``e``.  The marks of a node are a
pure function of ``(master_seed, child-index path)`` through a splitmix64
hash chain, so the realized environment does not depend on the order in
which nodes are explored.
"""

from __future__ import annotations

import math

import numpy as np

from .env_model import EnvSpec
from .errors import CapacityExceeded

ROOT_PARENT = 0
ROOT = 1
DEFAULT_CAP = 200_000_000

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_SALT_ROOT = 0x243F6A8885A308D3
_SALT_CHILD = 0x13198A2E03707344
_SALT_NU = 0xA4093822299F31D0
_SALT_OMEGA = 0x082EFA98EC4E6C89


def mix64(z: int) -> int:
    """splitmix64 finalizer on a Python int."""
    z = (z + _GOLDEN) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def mix64_array(z: np.ndarray) -> np.ndarray:
    """Vectorized :func:`mix64` (uint64 arithmetic wraps modulo 2**64)."""
    z = np.asarray(z, dtype=np.uint64) + np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _uniform(keys: np.ndarray, salt: int) -> np.ndarray:
    z = mix64_array(keys ^ np.uint64(salt))
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def child_keys(parent_keys: np.ndarray, index: np.ndarray) -> np.ndarray:
    salted = mix64_array(np.asarray(index, dtype=np.uint64) + np.uint64(_SALT_CHILD))
    return mix64_array(np.asarray(parent_keys, dtype=np.uint64) ^ salted)


def root_key(seed: int) -> int:
    """Hash key of the root ``e`` for a master seed."""
    return mix64(mix64(int(seed) & _M64) ^ _SALT_ROOT)


def realize_marks(spec: EnvSpec, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Offspring counts, child keys and child marks for parents with hash ``keys``.

    Children are listed parent by parent.  This is the single source of the
    environment's randomness, shared by :class:`EnvTree` and the streaming
    samplers.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    nu = spec.offspring.from_uniform(_uniform(keys, _SALT_NU))
    total = int(nu.sum())
    offsets = np.cumsum(nu) - nu
    idx = np.arange(total) - np.repeat(offsets, nu)
    k = child_keys(np.repeat(keys, nu), idx)
    return nu, k, spec.increment.from_uniform(_uniform(k, _SALT_OMEGA))


class EnvTree:
    """Arena of realized nodes with contiguous child ranges.

    ``first_child[x] == -1`` marks a node whose children are not realized
    yet.  ``nu``, ``omega`` and ``V`` are only meaningful for realized
    nodes; ``e*`` carries no mark.
    """

    def __init__(self, spec: EnvSpec, seed: int, cap: int = DEFAULT_CAP):
        self.spec = spec
        self.master_seed = int(seed) & _M64
        self.cap = int(cap)
        n0 = 1024
        self.parent = np.full(n0, -1, dtype=np.int64)
        self.first_child = np.full(n0, -1, dtype=np.int64)
        self.nu = np.zeros(n0, dtype=np.int64)
        self.omega = np.full(n0, np.nan)
        self.V = np.full(n0, np.nan)
        self.depth = np.zeros(n0, dtype=np.int64)
        self.key = np.zeros(n0, dtype=np.uint64)
        self.size = 2

        self.first_child[ROOT_PARENT] = ROOT
        self.nu[ROOT_PARENT] = 1
        self.depth[ROOT_PARENT] = -1
        self.key[ROOT_PARENT] = mix64(self.master_seed)
        self.parent[ROOT] = ROOT_PARENT
        self.V[ROOT] = 0.0
        self.key[ROOT] = root_key(self.master_seed)

    # -- storage -----------------------------------------------------------

    def _reserve(self, extra: int):
        need = self.size + extra
        if need > self.cap:
            raise CapacityExceeded(f"realizing {extra} nodes would exceed the cap of {self.cap}")
        cur = len(self.parent)
        if need <= cur:
            return
        new = max(need, 2 * cur)
        for name, fill in (
            ("parent", -1), ("first_child", -1), ("nu", 0), ("omega", np.nan),
            ("V", np.nan), ("depth", 0), ("key", 0),
        ):
            old = getattr(self, name)
            arr = np.full(new, fill, dtype=old.dtype)
            arr[:cur] = old
            setattr(self, name, arr)

    # -- realization -------------------------------------------------------

    def is_realized(self, x: int) -> bool:
        return self.first_child[x] >= 0

    def realize_children(self, nodes) -> None:
        """Realize the children of every node in ``nodes`` (batch form)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        nodes = nodes[self.first_child[nodes] < 0]
        if len(nodes) == 0:
            return
        nodes = np.unique(nodes)
        nu, k, w = realize_marks(self.spec, self.key[nodes])
        total = int(nu.sum())
        self._reserve(total)
        start = self.size
        self.first_child[nodes] = start + np.cumsum(nu) - nu
        self.nu[nodes] = nu
        if total:
            kids = np.arange(start, start + total)
            par = np.repeat(nodes, nu)
            self.parent[kids] = par
            self.key[kids] = k
            self.omega[kids] = w
            self.V[kids] = self.V[par] + w
            self.depth[kids] = self.depth[par] + 1
        self.size = start + total

    def children(self, x: int) -> range:
        """Ids of the children of ``x``, realized on first access."""
        if self.first_child[x] < 0:
            self.realize_children(np.array([x]))
        f = int(self.first_child[x])
        return range(f, f + int(self.nu[x]))

    # -- marks -------------------------------------------------------------

    def potential(self, x: int) -> float:
        return float(self.V[x])

    def rho(self, x: int) -> float:
        return 1.0 / (1.0 + math.exp(-float(self.omega[x])))

    def ancestors(self, x: int) -> list[int]:
        """Path ``[e, ..., x]``."""
        path = []
        while x != ROOT_PARENT:
            path.append(x)
            x = int(self.parent[x])
        return path[::-1]

    def hitting_quantities(self, x: int) -> tuple[float, float, float]:
        """``(H_x, a_x, b_x)``.

        ``H_x = sum_{e <= y <= x} exp(V(y) - V(x))``; ``a_x`` is the chance of
        hitting ``x`` before ``e*`` from ``e`` and ``b_x`` the same from ``x*``.
        """
        if x == ROOT_PARENT:
            raise ValueError("hitting quantities are undefined at e*")
        h = 1.0
        for y in self.ancestors(x)[1:]:
            h = 1.0 + math.exp(-float(self.omega[y])) * h
        return h, math.exp(-float(self.V[x])) / h, 1.0 - 1.0 / h

    def path_of(self, x: int) -> tuple[int, ...]:
        """Child-index path from the root to ``x``."""
        out = []
        for y in self.ancestors(x)[1:]:
            out.append(y - int(self.first_child[self.parent[y]]))
        return tuple(out)

    def node_at(self, path) -> int:
        x = ROOT
        for j in path:
            x = self.children(x)[j]
        return x

    def realize_to_depth(self, d: int) -> None:
        """Realize every node of generation ``<= d`` (breadth first)."""
        frontier = np.array([ROOT])
        for _ in range(d):
            self.realize_children(frontier)
            if len(frontier) == 0:
                return
            f = self.first_child[frontier]
            n = self.nu[frontier]
            frontier = np.concatenate([np.arange(a, a + b) for a, b in zip(f, n)]) if n.sum() else np.array([], dtype=np.int64)

    def is_extinct(self, width: int = 256, max_generations: int = 10_000) -> bool:
        """Whether the tree dies out.

        Explores generation by generation and declares survival once a
        generation holds ``width`` nodes (extinction from there has
        probability ``q**width``, negligible for any supercritical law).
        """
        if not self.spec.offspring.can_die:
            return False
        frontier = np.array([ROOT])
        for _ in range(max_generations):
            if len(frontier) == 0:
                return True
            if len(frontier) >= width:
                return False
            self.realize_children(frontier)
            f = self.first_child[frontier]
            n = self.nu[frontier]
            frontier = np.concatenate([np.arange(a, a + b) for a, b in zip(f, n)]) if n.sum() else np.array([], dtype=np.int64)
        return False
