"""User-example attribution graphs and multi-attribution b-min-sep sampling.

Examples carry stable integer ids; a coin for example ``e`` at iteration ``i``
always comes from substream ``(seed, EXAMPLE, e)``. Running the sampler on a
subgraph with the same seed therefore reuses the same interim coins, which is
the coupling the domination argument relies on.
"""

from __future__ import annotations

import dataclasses
from collections import defaultdict

import numpy as np

from . import kernels, rng as rng_mod
from .sampling import BatchSchedule

VARIANTS = ("coin_based", "participation_based")


@dataclasses.dataclass(frozen=True, eq=False)
class AttributionGraph:
    """Examples ``example_ids[k]`` attributed to user sets ``users[k]``."""

    example_ids: np.ndarray
    users: tuple
    source: np.ndarray | None = None  # original id for duplicated examples

    def __post_init__(self):
        ids = np.asarray(self.example_ids, dtype=np.int64)
        users = tuple(frozenset(u) for u in self.users)
        if ids.ndim != 1 or ids.size != len(users):
            raise ValueError("example_ids and users must have equal length")
        if np.unique(ids).size != ids.size:
            raise ValueError("example ids must be unique")
        for eid, us in zip(ids, users):
            if not us:
                raise ValueError(f"example {eid} has no attributed user")
        ids.setflags(write=False)
        object.__setattr__(self, "example_ids", ids)
        object.__setattr__(self, "users", users)
        src = ids if self.source is None else np.asarray(self.source, dtype=np.int64)
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "_csr", None)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "AttributionGraph":
        ids = sorted(mapping)
        return cls(np.array(ids, dtype=np.int64), tuple(mapping[i] for i in ids))

    @classmethod
    def read(cls, path) -> "AttributionGraph":
        """Parse ``example_id user_id user_id ...`` lines."""
        mapping = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].split()
                if not line:
                    continue
                try:
                    eid = int(line[0])
                except ValueError:
                    raise ValueError(f"line {lineno}: bad example id {line[0]!r}") from None
                if eid in mapping:
                    raise ValueError(f"line {lineno}: duplicate example id {eid}")
                if len(line) < 2:
                    raise ValueError(f"line {lineno}: example {eid} has no users")
                mapping[eid] = frozenset(line[1:])
        return cls.from_mapping(mapping)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for eid, us in zip(self.example_ids, self.users):
                fh.write(" ".join([str(int(eid))] + sorted(map(str, us))) + "\n")

    @property
    def m(self) -> int:
        return int(self.example_ids.size)

    @property
    def all_users(self) -> frozenset:
        return frozenset().union(*self.users) if self.users else frozenset()

    def user_index(self) -> dict:
        """user -> sorted positional indices of its examples."""
        inv = defaultdict(list)
        for k, us in enumerate(self.users):
            for u in us:
                inv[u].append(k)
        return {u: np.array(v, dtype=np.int64) for u, v in inv.items()}

    def neighborhoods_csr(self):
        """``(indptr, indices)`` of N(e) over positional indices (e in N(e))."""
        if self._csr is None:
            inv = self.user_index()
            indptr = [0]
            indices = []
            for us in self.users:
                nb = np.unique(np.concatenate([inv[u] for u in us]))
                indices.append(nb)
                indptr.append(indptr[-1] + nb.size)
            flat = np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64)
            object.__setattr__(self, "_csr", (np.array(indptr, dtype=np.int64), flat.astype(np.int64)))
        return self._csr

    def neighborhood_sizes(self) -> np.ndarray:
        return np.diff(self.neighborhoods_csr()[0])

    def neighborhood(self, example_id: int) -> np.ndarray:
        k = self._position(example_id)
        indptr, indices = self.neighborhoods_csr()
        return self.example_ids[indices[indptr[k]: indptr[k + 1]]]

    def _position(self, example_id: int) -> int:
        hits = np.flatnonzero(self.example_ids == example_id)
        if hits.size == 0:
            raise KeyError(f"unknown example {example_id}")
        return int(hits[0])

    def user_degrees(self) -> dict:
        return {u: int(v.size) for u, v in self.user_index().items()}

    def subgraph(self, keep: np.ndarray) -> "AttributionGraph":
        keep = np.asarray(keep, dtype=np.int64)
        return AttributionGraph(self.example_ids[keep], tuple(self.users[k] for k in keep),
                                self.source[keep])

    def restrict_to_user(self, u) -> "AttributionGraph":
        """D_u: the examples attributed to ``u`` (keeping their other users)."""
        keep = [k for k, us in enumerate(self.users) if u in us]
        return self.subgraph(np.array(keep, dtype=np.int64))


# --------------------------------------------------------------------------
# preprocessing

def contribution_bound(g: AttributionGraph, k_u: int, allow_duplicates: bool,
                       rng: np.random.Generator) -> AttributionGraph:
    """Cap every user at ``k_u`` attributed examples.

    Greedy over a random order: an example is kept only if all its users
    still have spare capacity. With ``allow_duplicates`` further random
    passes add copies (fresh ids, same users, ``source`` pointing at the
    original) until no example fits.
    """
    if k_u < 1:
        raise ValueError("k_u must be >= 1")
    load = defaultdict(int)
    kept = []

    def sweep():
        added = False
        for k in rng.permutation(g.m):
            us = g.users[k]
            if all(load[u] < k_u for u in us):
                for u in us:
                    load[u] += 1
                kept.append(int(k))
                added = True
        return added

    sweep()
    if not allow_duplicates:
        kept.sort()
        return g.subgraph(np.array(kept, dtype=np.int64))
    while sweep():
        pass
    first = {}
    ids, users, source = [], [], []
    next_id = int(g.example_ids.max()) + 1 if g.m else 0
    for k in sorted(kept):
        if k in first:
            ids.append(next_id)
            next_id += 1
        else:
            first[k] = True
            ids.append(int(g.example_ids[k]))
        users.append(g.users[k])
        source.append(int(g.source[k]))
    return AttributionGraph(np.array(ids), tuple(users), np.array(source))


@dataclasses.dataclass
class NeighborhoodAdvisory:
    """Rule-of-thumb check ``b * p * |N(e)| < 1`` (include) per example."""

    b: int
    p: float
    k_e: int
    cap_verdict: str
    removed: list  # (example id, |N(e)| at removal, verdict)
    retained: list  # (example id, final |N(e)|, verdict)


def include_verdict(b: int, p: float, size: int) -> str:
    return "include" if b * p * size < 1 else "exclude"


def neighborhood_cap(g: AttributionGraph, k_e: int, b: int, p: float):
    """Drop examples with ``|N(e)| > k_e``, largest neighbourhood first.

    Removing an example shrinks its neighbours' neighbourhoods, so sizes are
    recomputed after each removal. Ties go to the smaller example id.
    """
    if k_e < 1:
        raise ValueError("k_e must be >= 1")
    alive = np.ones(g.m, dtype=bool)
    indptr, indices = g.neighborhoods_csr()
    sizes = np.diff(indptr).astype(np.int64)
    removed = []
    while True:
        cand = np.where(alive, sizes, -1)
        worst = int(np.argmax(cand))
        if cand[worst] <= k_e:
            break
        top = np.flatnonzero(cand == cand[worst])
        worst = int(top[np.argmin(g.example_ids[top])])
        removed.append((int(g.example_ids[worst]), int(sizes[worst]),
                        include_verdict(b, p, int(sizes[worst]))))
        alive[worst] = False
        for nb in indices[indptr[worst]: indptr[worst + 1]]:
            if alive[nb]:
                sizes[nb] -= 1
    keep = np.flatnonzero(alive)
    retained = [(int(g.example_ids[k]), int(sizes[k]), include_verdict(b, p, int(sizes[k])))
                for k in keep]
    advisory = NeighborhoodAdvisory(b, p, k_e, include_verdict(b, p, k_e), removed, retained)
    return g.subgraph(keep), advisory


# --------------------------------------------------------------------------
# sampling

@dataclasses.dataclass(frozen=True)
class MultiAttrConfig:
    p: float
    b: int
    n: int
    seed: int
    variant: str = "coin_based"
    warmup_iters: int | None = None  # None -> n (2n batches formed in total)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0 <= self.p <= 1:
            raise ValueError("p must lie in [0, 1]")
        if self.b < 1 or self.n < 1:
            raise ValueError("b and n must be positive")
        if self.warmup_iters is not None and self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")
        object.__setattr__(self, "seed", rng_mod.normalize_seed(self.seed))

    @property
    def warmup(self) -> int:
        return self.n if self.warmup_iters is None else int(self.warmup_iters)

    @property
    def certified(self) -> bool:
        return self.variant == "coin_based"


def interim_coins(g: AttributionGraph, p: float, n_total: int, seed: int) -> np.ndarray:
    """``(n_total, m)`` interim sample indicators, one substream per example id."""
    coins = np.empty((n_total, g.m), dtype=bool)
    for k, eid in enumerate(g.example_ids):
        coins[:, k] = rng_mod.substream(seed, rng_mod.EXAMPLE, int(eid)).random(n_total) < p
    return coins


def sample_multiattr(g: AttributionGraph, config: MultiAttrConfig,
                     coins: np.ndarray | None = None) -> BatchSchedule:
    """Multi-attribution b-min-sep batches (example ids per iteration).

    ``coin_based`` excludes the neighbours of every interim coin from the
    previous ``b - 1`` iterations; ``participation_based`` only those of
    realised batch members. ``warmup`` leading iterations are simulated and
    dropped.
    """
    n_total = config.n + config.warmup
    if coins is None:
        coins = interim_coins(g, config.p, n_total, config.seed)
    indptr, indices = g.neighborhoods_csr()
    mask = kernels.multiattr_batches(coins, indptr, indices, config.b,
                                     config.variant == "coin_based")
    batches = [g.example_ids[np.flatnonzero(row)] for row in mask[config.warmup:]]
    return BatchSchedule(batches, None)


def user_participation_vector(g: AttributionGraph, schedule: BatchSchedule, u) -> np.ndarray:
    """Per-iteration count of ``u``'s examples in each batch."""
    if u not in g.all_users:
        raise KeyError(f"unknown user {u!r}")
    mine = g.example_ids[[k for k, us in enumerate(g.users) if u in us]]
    return np.array([np.isin(bt, mine).sum() for bt in schedule.batches], dtype=np.int64)


def find_sampling_probability(g: AttributionGraph, target_batch_size: float, b: int, n: int,
                              seed: int, variant: str = "coin_based", warmup_iters=None,
                              replicas: int = 32, tol: float = 1e-4, max_iter: int = 40,
                              grid: int = 24) -> float:
    """Smallest-branch p whose mean emitted batch size matches the target.

    The mean batch size is not monotone in p: large p makes the exclusion
    rule bar almost everything. A coarse grid locates the peak, then the
    rising branch ``[0, p_peak]`` is bisected. Raises ``ValueError`` when the
    target exceeds the peak.
    """
    if not 0 < target_batch_size < g.m:
        raise ValueError("target batch size must lie strictly between 0 and m")

    def mean_size(p):
        tot = 0.0
        for r in range(replicas):
            cfg = MultiAttrConfig(p, b, n, rng_mod.derive_seed(seed, rng_mod.SEARCH, r),
                                  variant, warmup_iters)
            sched = sample_multiattr(g, cfg)
            tot += np.mean([len(bt) for bt in sched.batches])
        return tot / replicas

    ps = np.linspace(1.0 / grid, 1.0, grid)
    sizes = [mean_size(p) for p in ps]
    peak = int(np.argmax(sizes))
    if sizes[peak] < target_batch_size:
        raise ValueError(f"target batch size {target_batch_size} unreachable: the largest mean "
                         f"batch size is about {sizes[peak]:.3g} (at p={ps[peak]:.3g})")
    lo, hi = 0.0, float(ps[peak])
    for _ in range(max_iter):
        if hi - lo < tol:
            break
        mid = 0.5 * (lo + hi)
        if mean_size(mid) < target_batch_size:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
