"""Edge local-time fields and the branching (Gamma-Poisson) sampler.

Given ``N_x = i`` downward crossings of the edge ``(x*, x)``, the walk leaves
``x`` upward exactly ``i`` times, and every stay at ``x`` picks "up" or one of
the children independently.  The children's crossing counts are therefore
negative multinomial with ``i`` stops, which is sampled as a Gamma(i)
intensity ``L`` followed by independent ``Poisson(L * exp(-omega_child))``
counts.  One-dimensional marginals are
``P(N_y = j) = C(i-1+j, j) rho_y**i (1-rho_y)**j``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .env_model import EnvSpec
from .tree_env import ROOT, ROOT_PARENT, EnvTree, realize_marks, root_key

STEP = "step"
BRANCHING = "branching"

COLUMNS = ("node_id", "parent_id", "depth", "omega", "V", "N")


@dataclass
class LocalTimeField:
    """Columnar edge local times, parents stored before their children.

    ``parent`` indexes into the same arrays (-1 for the root).  Every entry
    with a positive count has all of its children recorded, unless the
    field was sampled with a depth cap, in which case entries deeper than
    ``max_depth`` are not expanded.
    """

    node: np.ndarray
    parent: np.ndarray
    count: np.ndarray
    depth: np.ndarray
    omega: np.ndarray
    V: np.ndarray
    n: int
    backend: str
    max_depth: int | None = None

    def __len__(self):
        return len(self.node)

    @property
    def truncated(self) -> bool:
        return self.max_depth is not None

    @property
    def nu(self) -> np.ndarray:
        """Number of recorded children of every entry."""
        kids = self.parent[self.parent >= 0]
        return np.bincount(kids, minlength=len(self)).astype(np.int64)

    @property
    def total(self) -> int:
        return int(self.count.sum())

    @property
    def max_generation(self) -> int:
        pos = self.count > 0
        return int(self.depth[pos].max()) if pos.any() else -1

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.node.tolist(), self.count.tolist()))

    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(parent_pos, parent_count, child_count)`` for every recorded edge below the root."""
        m = self.parent >= 0
        p = self.parent[m]
        return p, self.count[p], self.count[m]

    def validate(self, tree: EnvTree | None = None) -> None:
        """Check the structural invariants; with ``tree``, also completeness."""
        c = self.count
        assert c[0] == self.n and self.parent[0] == -1, "root must carry N_e = n"
        kids = self.parent >= 0
        assert np.all(self.parent[kids] < np.nonzero(kids)[0]), "parents must precede children"
        assert np.all(c[self.parent[kids]][c[kids] > 0] > 0), "positive count under a zero parent"
        if tree is not None:
            expanded = c > 0
            if self.truncated:
                expanded &= self.depth <= self.max_depth
            nu = self.nu
            assert np.all(nu[expanded] == tree.nu[self.node[expanded]]), "visited vertex with missing children"
            assert np.all(nu[~expanded] == 0), "unvisited vertex expanded"

    # -- io ----------------------------------------------------------------

    def dump(self, path) -> None:
        parent_id = np.where(self.parent >= 0, self.node[np.maximum(self.parent, 0)], ROOT_PARENT)
        with open(path, "w", newline="") as fh:
            fh.write(f"# n={self.n} backend={self.backend} max_depth={self.max_depth}\n")
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for row in zip(self.node, parent_id, self.depth, self.omega, self.V, self.count):
                w.writerow([int(row[0]), int(row[1]), int(row[2]), repr(float(row[3])), repr(float(row[4])), int(row[5])])

    @classmethod
    def load(cls, path) -> LocalTimeField:
        meta = {}
        with open(path, newline="") as fh:
            first = fh.readline()
            if first.startswith("#"):
                for tok in first[1:].split():
                    k, _, v = tok.partition("=")
                    meta[k] = v
            else:
                fh.seek(0)
            rows = list(csv.DictReader(fh))
        node = np.array([int(r["node_id"]) for r in rows], dtype=np.int64)
        pid = np.array([int(r["parent_id"]) for r in rows], dtype=np.int64)
        pos = {int(x): i for i, x in enumerate(node)}
        parent = np.array([pos.get(int(p), -1) for p in pid], dtype=np.int64)
        count = np.array([int(r["N"]) for r in rows], dtype=np.int64)
        md = meta.get("max_depth", "None")
        return cls(
            node=node,
            parent=parent,
            count=count,
            depth=np.array([int(r["depth"]) for r in rows], dtype=np.int64),
            omega=np.array([float(r["omega"]) for r in rows]),
            V=np.array([float(r["V"]) for r in rows]),
            n=int(meta.get("n", count[0])),
            backend=meta.get("backend", "file"),
            max_depth=None if md == "None" else int(md),
        )

    @classmethod
    def from_counts(cls, tree: EnvTree, counts: dict[int, int], n: int, backend: str, max_depth: int | None = None) -> LocalTimeField:
        """Assemble a field from sparse counts, adding the zero-count children."""
        nodes = [ROOT]
        parents = [-1]
        i = 0
        while i < len(nodes):
            x = nodes[i]
            if counts.get(x, 0) > 0 and (max_depth is None or tree.depth[x] <= max_depth):
                for y in tree.children(x):
                    nodes.append(y)
                    parents.append(i)
            i += 1
        node = np.array(nodes, dtype=np.int64)
        return cls(
            node=node,
            parent=np.array(parents, dtype=np.int64),
            count=np.array([counts.get(x, 0) for x in nodes], dtype=np.int64),
            depth=tree.depth[node].copy(),
            omega=tree.omega[node].copy(),
            V=tree.V[node].copy(),
            n=n,
            backend=backend,
            max_depth=max_depth,
        )


def sample_field(tree: EnvTree, n: int, rng: np.random.Generator, max_depth: int | None = None) -> LocalTimeField:
    """Draw the edge local times at the n-th return to ``e*`` without stepping.

    Generation by generation: every vertex with ``N_x = i > 0`` gets a
    latent ``Gamma(i, 1)`` intensity shared by its children, whose counts
    are independent Poisson variables with means ``L * exp(-omega_child)``.
    With ``max_depth`` set, vertices deeper than ``max_depth`` are recorded
    but not expanded.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    nodes = [np.array([ROOT])]
    parents = [np.array([-1])]
    counts = [np.array([n])]
    cur_nodes, cur_counts, cur_pos = nodes[0], counts[0], np.array([0])
    offset = 1
    depth = 0
    while True:
        active = cur_counts > 0
        if max_depth is not None and depth > max_depth:
            break
        if not active.any():
            break
        act = cur_nodes[active]
        tree.realize_children(act)
        nu = tree.nu[act]
        total = int(nu.sum())
        if total == 0:
            break
        first = tree.first_child[act]
        starts = np.repeat(np.cumsum(nu) - nu, nu)
        kids = np.repeat(first, nu) + (np.arange(total) - starts)
        lam = rng.gamma(cur_counts[active].astype(np.float64))
        kc = rng.poisson(np.repeat(lam, nu) * np.exp(-tree.omega[kids]))
        nodes.append(kids)
        parents.append(np.repeat(cur_pos[active], nu))
        counts.append(kc)
        cur_nodes, cur_counts = kids, kc
        cur_pos = np.arange(offset, offset + total)
        offset += total
        depth += 1
    node = np.concatenate(nodes)
    return LocalTimeField(
        node=node,
        parent=np.concatenate(parents),
        count=np.concatenate(counts).astype(np.int64),
        depth=tree.depth[node].copy(),
        omega=tree.omega[node].copy(),
        V=tree.V[node].copy(),
        n=n,
        backend=BRANCHING,
        max_depth=max_depth,
    )


def branching_blocks(tree: EnvTree, n: int, blocks: int, rng: np.random.Generator, nodes, max_depth: int) -> np.ndarray:
    """Counts on ``nodes`` for ``blocks`` independent draws of :func:`sample_field`.

    The same Gamma-Poisson recursion, run on the first ``max_depth + 1``
    generations with a leading replica axis.  Every node must lie on a
    generation ``<= max_depth + 1``.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    if np.any(tree.depth[nodes] > max_depth + 1):
        raise ValueError("watched nodes lie below the depth cap")
    count = {ROOT: np.full(blocks, n, dtype=np.int64)}
    frontier = np.array([ROOT])
    for _ in range(max_depth + 1):
        tree.realize_children(frontier)
        nxt = []
        for x in frontier:
            kids = tree.children(int(x))
            if len(kids) == 0:
                continue
            lam = rng.gamma(count[int(x)].astype(np.float64))  # shape 0 gives 0
            w = np.exp(-tree.omega[kids.start:kids.stop])
            kc = rng.poisson(lam[:, None] * w[None, :])
            for k, y in enumerate(kids):
                count[y] = kc[:, k]
            nxt.extend(kids)
        frontier = np.array(nxt, dtype=np.int64)
        if frontier.size == 0:
            break
    zero = np.zeros(blocks, dtype=np.int64)
    return np.column_stack([count.get(int(x), zero) for x in nodes])


@dataclass
class FieldSummary:
    """Count histogram of a field: ``histogram[k]`` vertices carry ``N = k`` (k >= 1)."""

    n: int
    histogram: np.ndarray
    max_generation: int
    censored: bool = False  # sampling stopped once the crossing total passed a limit

    @property
    def total(self) -> int:
        return int(np.dot(np.arange(len(self.histogram)), self.histogram))

    @property
    def visited(self) -> int:
        return int(self.histogram[1:].sum())

    def heavy_ranges(self, alphas) -> np.ndarray:
        """``R_alpha`` for every level: vertices with ``N >= alpha``."""
        tail = np.concatenate((np.cumsum(self.histogram[::-1])[::-1], [0]))
        idx = np.clip(np.ceil(np.asarray(alphas, dtype=float)).astype(np.int64), 1, len(tail) - 1)
        return tail[idx]

    @classmethod
    def of(cls, field: LocalTimeField) -> FieldSummary:
        return cls(field.n, np.bincount(field.count[field.count > 0], minlength=2), field.max_generation)


def sample_summary(spec: EnvSpec, seed: int, n: int, rng: np.random.Generator, max_total: int | None = None) -> FieldSummary:
    """Same law and random stream as :func:`sample_field` on ``EnvTree(spec, seed)``,
    keeping only the current generation in memory.

    With ``max_total``, sampling stops as soon as the number of crossings
    exceeds it and the summary is flagged ``censored``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    hist = np.zeros(n + 1, dtype=np.int64)
    hist[n] = 1
    keys = np.array([root_key(seed)], dtype=np.uint64)
    counts = np.array([n])
    depth = 0
    total = n
    while True:
        if max_total is not None and total > max_total:
            return FieldSummary(n, hist, depth, censored=True)
        nu, kid_keys, omega = realize_marks(spec, keys)
        if len(kid_keys) == 0:
            break
        lam = rng.gamma(counts.astype(np.float64))
        kc = rng.poisson(np.repeat(lam, nu) * np.exp(-omega))
        live = kc > 0
        if not live.any():
            break
        depth += 1
        b = np.bincount(kc[live])
        if len(b) > len(hist):
            hist = np.concatenate((hist, np.zeros(len(b) - len(hist), dtype=np.int64)))
        hist[: len(b)] += b
        total += int(kc.sum())
        keys, counts = kid_keys[live], kc[live]
    return FieldSummary(n, hist, depth)


def heavy_range(field: LocalTimeField, alpha: float) -> int:
    """Number of recorded vertices whose edge local time is at least ``alpha``."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    return int(np.count_nonzero(field.count >= alpha))


def heavy_ranges(field: LocalTimeField, alphas) -> np.ndarray:
    """:func:`heavy_range` for many levels at once."""
    s = np.sort(field.count)
    return len(s) - np.searchsorted(s, np.asarray(alphas, dtype=float), side="left")


def return_time(field: LocalTimeField) -> int:
    """``T^(n)``: every downward crossing is undone before the walk gets back to ``e*``."""
    return 2 * field.total


def excursion_hits(tree: EnvTree, n: int, x: int, rng: np.random.Generator) -> int:
    """Number of the ``n`` excursions that reach ``x``: ``Binomial(n, a_x)``."""
    _, a, _ = tree.hitting_quantities(x)
    return int(rng.binomial(n, a))


def mean_matrix(spec: EnvSpec, i: int, j: int) -> float:
    """Expected number of first-generation children with ``j`` crossings when ``N_e = i``."""
    if i < 1 or j < 0:
        raise ValueError("need i >= 1 and j >= 0")
    lc = special.gammaln(i + j) - special.gammaln(j + 1) - special.gammaln(i)
    return math.exp(lc) * spec.mean_nu * spec.increment.rho_moment(i, j)
