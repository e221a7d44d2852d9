"""Step-by-step simulation of the quenched walk on a lazily realized tree.

From ``e*`` the walk moves to ``e``.  From any other vertex ``x`` it moves to
the parent with probability ``1 / (1 + sum_i exp(-omega_{x_i}))`` and to
child ``x_j`` with probability ``exp(-omega_{x_j}) / (1 + sum_i ...)``.
Only downward crossing counts are kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import StepBudgetExceeded
from .localtime import STEP, LocalTimeField
from .tree_env import ROOT, ROOT_PARENT, EnvTree

DEFAULT_BUDGET = 10**9
_BLOCK = 1 << 16


@dataclass
class WalkRun:
    field: LocalTimeField
    steps: int
    n_excursions: int
    max_generation: int
    excursion_steps: list[int] = field(default_factory=list)


class _Kernel:
    """Per-node transition tables, built once per visited vertex."""

    def __init__(self, tree: EnvTree):
        self.tree = tree
        self.table: dict[int, tuple] = {}

    def __call__(self, x: int):
        t = self.table.get(x)
        if t is None:
            tree = self.tree
            kids = tree.children(x)
            w = np.exp(-tree.omega[kids.start:kids.stop])
            tot = 1.0 + float(w.sum())
            # thresholds after the "up" mass; the last child absorbs rounding
            cum = ((1.0 + np.cumsum(w)) / tot).tolist()
            if cum:
                cum[-1] = 2.0
            t = (int(tree.parent[x]), kids.start, 1.0 / tot, cum, int(tree.depth[x]))
            self.table[x] = t
        return t


class _Uniforms:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.buf: list[float] = []
        self.i = 0

    def refill(self):
        self.buf = self.rng.random(_BLOCK).tolist()
        self.i = 0


def step(tree: EnvTree, current: int, rng: np.random.Generator) -> int:
    """Sample one transition of the quenched chain from ``current``."""
    if current == ROOT_PARENT:
        return ROOT
    kids = tree.children(current)
    w = np.exp(-tree.omega[kids.start:kids.stop])
    u = rng.random() * (1.0 + w.sum())
    if u < 1.0:
        return int(tree.parent[current])
    acc = 1.0
    for j, wj in enumerate(w):
        acc += wj
        if u < acc:
            return kids.start + j
    return kids.stop - 1


def _walk(tree, rng, *, n_excursions=None, n_steps=None, budget=DEFAULT_BUDGET, max_depth=None, record=False):
    kernel = _Kernel(tree)
    uni = _Uniforms(rng)
    counts: dict[int, int] = {}
    steps = 0
    done = 0
    exc_steps = []
    exc_start = 0
    cap = max_depth if max_depth is not None else math.inf
    if n_excursions is not None:
        x = ROOT_PARENT
        limit = budget
    else:
        x = ROOT
        limit = n_steps
    while steps < limit:
        if x == ROOT_PARENT:
            if n_excursions is not None:
                if done == n_excursions:
                    break
                exc_start = steps
            x = ROOT
            counts[ROOT] = counts.get(ROOT, 0) + 1
            steps += 1
            continue
        parent, first, p_up, cum, depth = kernel(x)
        if uni.i >= len(uni.buf):
            uni.refill()
        u = uni.buf[uni.i]
        uni.i += 1
        steps += 1
        if u < p_up:
            x = parent
            if x == ROOT_PARENT:
                done += 1
                if record:
                    exc_steps.append(steps - exc_start)
            continue
        j = 0
        while u >= cum[j]:
            j += 1
        y = first + j
        counts[y] = counts.get(y, 0) + 1
        if depth >= cap:
            # trace on the first generations: the sub-excursion below returns a.s.
            steps += 1
        else:
            x = y
    else:
        if n_excursions is not None and not (x == ROOT_PARENT and done == n_excursions):
            raise StepBudgetExceeded(f"{done} of {n_excursions} excursions after {steps} steps")
    return counts, steps, done, exc_steps


def run_excursions(
    tree: EnvTree,
    n: int,
    rng: np.random.Generator,
    budget: int = DEFAULT_BUDGET,
    max_depth: int | None = None,
    record_excursions: bool = False,
) -> WalkRun:
    """Walk from ``e*`` until the n-th return to ``e*``.

    With ``max_depth`` the walk is watched on generations ``<= max_depth``
    only: a step into generation ``max_depth + 1`` is counted and undone at
    once.  Counts on generations ``<= max_depth + 1`` keep their exact law
    (the walk is recurrent), the step count does not.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    counts, steps, done, exc = _walk(tree, rng, n_excursions=n, budget=budget, max_depth=max_depth, record=record_excursions)
    fld = LocalTimeField.from_counts(tree, counts, n, STEP, max_depth)
    return WalkRun(fld, steps, done, fld.max_generation, exc)


def excursion_blocks(tree: EnvTree, n: int, blocks: int, rng: np.random.Generator, nodes, max_depth: int) -> np.ndarray:
    """Counts on ``nodes`` for ``blocks`` independent runs of ``n`` excursions.

    Excursions are i.i.d. given the environment, so one long walk cut into
    consecutive groups of ``n`` gives independent copies of
    ``run_excursions(tree, n, ...)`` restricted to ``nodes``.  The walk is
    depth-capped as in :func:`run_excursions`; every node must lie on a
    generation ``<= max_depth + 1``.
    """
    nodes = [int(x) for x in nodes]
    slot = {x: k for k, x in enumerate(nodes)}
    if any(tree.depth[x] > max_depth + 1 for x in nodes):
        raise ValueError("watched nodes lie below the depth cap")
    kernel = _Kernel(tree)
    uni = _Uniforms(rng)
    out = np.zeros((blocks, len(nodes)), dtype=np.int64)
    for b in range(blocks):
        row = out[b]
        acc = [0] * len(nodes)
        for _ in range(n):
            if ROOT in slot:
                acc[slot[ROOT]] += 1
            x = ROOT
            while x != ROOT_PARENT:
                parent, first, p_up, cum, depth = kernel(x)
                if uni.i >= len(uni.buf):
                    uni.refill()
                u = uni.buf[uni.i]
                uni.i += 1
                if u < p_up:
                    x = parent
                    continue
                j = 0
                while u >= cum[j]:
                    j += 1
                y = first + j
                k = slot.get(y)
                if k is not None:
                    acc[k] += 1
                if depth < max_depth:
                    x = y
        row[:] = acc
    return out


def run_steps(tree: EnvTree, n_steps: int, rng: np.random.Generator) -> WalkRun:
    """Walk exactly ``n_steps`` transitions from ``X_0 = e``.

    The field's ``n`` is the number of ``e* -> e`` crossings so far.
    """
    counts, steps, done, _ = _walk(tree, rng, n_steps=n_steps)
    n = counts.get(ROOT, 0)
    if n == 0:
        fld = LocalTimeField(
            node=np.array([ROOT]), parent=np.array([-1]), count=np.array([0]),
            depth=np.array([0]), omega=np.array([np.nan]), V=np.array([0.0]),
            n=0, backend=STEP,
        )
    else:
        fld = LocalTimeField.from_counts(tree, counts, n, STEP)
    return WalkRun(fld, steps, done, fld.max_generation)
