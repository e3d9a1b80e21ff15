"""Oscillator configurations, the truncated product basis |x, m>, and the
family of distances used to measure Green's-function decay."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import BasisTooLarge, EmptyRegion, TooManyWaypoints, Unreachable
from .lattice import LatticeRegion, Site, as_site

MAX_WAYPOINTS = 12
DEFAULT_MAX_STATES = 250_000


class OscillatorConfig(Mapping):
    """Sparse map site -> excitation count; absent sites carry zero.

    Zero counts are never stored, so two configurations compare equal
    exactly when they agree at every site.
    """

    __slots__ = ("_items", "_map", "total")

    def __init__(self, counts: Mapping | Iterable = ()):
        pairs = counts.items() if isinstance(counts, Mapping) else counts
        clean = {}
        for site, c in pairs:
            c = int(c)
            if c < 0:
                raise ValueError(f"negative excitation count {c} at {site}")
            if c:
                clean[as_site(site)] = c
        self._items = tuple(sorted(clean.items()))
        self._map = dict(self._items)
        self.total = sum(clean.values())

    @classmethod
    def vacuum(cls) -> "OscillatorConfig":
        return cls()

    @classmethod
    def from_dense(cls, region: LatticeRegion, counts) -> "OscillatorConfig":
        return cls(zip(region.sites, counts))

    def to_dense(self, region: LatticeRegion) -> tuple[int, ...]:
        dense = [0] * len(region)
        for site, c in self._items:
            dense[region.index(site)] = c
        return tuple(dense)

    def __getitem__(self, site) -> int:
        return self._map.get(as_site(site), 0)

    def __iter__(self) -> Iterator[Site]:
        return (s for s, _ in self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __hash__(self) -> int:
        return hash(self._items)

    def __eq__(self, other) -> bool:
        if isinstance(other, OscillatorConfig):
            return self._items == other._items
        return NotImplemented

    def __repr__(self) -> str:
        inner = ", ".join(f"{s}: {c}" for s, c in self._items)
        return f"OscillatorConfig({{{inner}}})"

    def differing_sites(self, other: "OscillatorConfig") -> set[Site]:
        return {u for u in set(self) | set(other) if self[u] != other[u]}


@dataclass(frozen=True)
class BasisState:
    site: Site
    config: OscillatorConfig

    def __str__(self) -> str:
        occ = ",".join(f"{list(s)}:{c}" for s, c in self.config.items())
        return f"x={list(self.site)} m={{{occ}}}"


@dataclass(frozen=True)
class TruncationPolicy:
    """Keep configurations with N(m) <= max_total (and each count <= per_site_cap)."""

    max_total: int
    per_site_cap: int | None = None
    max_states: int = DEFAULT_MAX_STATES

    def __post_init__(self):
        if self.max_total < 0:
            raise ValueError("max_total must be nonnegative")
        if self.per_site_cap is not None and self.per_site_cap < 0:
            raise ValueError("per_site_cap must be nonnegative")


def basis_size(n_sites: int, max_total: int) -> int:
    """|Lambda| * sum_{k<=K} C(|Lambda|+k-1, k) = |Lambda| * C(|Lambda|+K, K)."""
    return n_sites * math.comb(n_sites + max_total, max_total)


def _dense_configs(n_sites: int, max_total: int, cap: int | None) -> list[tuple[int, ...]]:
    out = []
    for k in range(max_total + 1):
        for multiset in itertools.combinations_with_replacement(range(n_sites), k):
            dense = [0] * n_sites
            for i in multiset:
                dense[i] += 1
            if cap is None or max(dense, default=0) <= cap:
                out.append(tuple(dense))
    out.sort()
    return out


class BasisEnumeration:
    """Ordered, indexed truncated basis |x, m>.

    States are laid out site-major: ``index = site_index * n_configs + config_index``
    with sites in lexicographic order and configurations ordered
    lexicographically by their dense count vector.
    """

    def __init__(self, region: LatticeRegion, policy: TruncationPolicy):
        if len(region) == 0:
            raise EmptyRegion("cannot enumerate a basis over an empty region")
        bound = basis_size(len(region), policy.max_total)
        if policy.per_site_cap is None and bound > policy.max_states:
            raise BasisTooLarge(f"{bound} states exceed the cap of {policy.max_states}")
        self.region = region
        self.policy = policy
        dense = _dense_configs(len(region), policy.max_total, policy.per_site_cap)
        if len(dense) * len(region) > policy.max_states:
            raise BasisTooLarge(
                f"{len(dense) * len(region)} states exceed the cap of {policy.max_states}"
            )
        self.dense = np.array(dense, dtype=np.int64).reshape(len(dense), len(region))
        self.configs = tuple(OscillatorConfig.from_dense(region, d) for d in dense)
        self._config_index = {d: i for i, d in enumerate(dense)}
        self.n_sites = len(region)
        self.n_configs = len(dense)
        self.config_totals = self.dense.sum(axis=1)
        n = self.n_sites * self.n_configs
        self.site_of = np.repeat(np.arange(self.n_sites), self.n_configs)
        self.config_of = np.tile(np.arange(self.n_configs), self.n_sites)
        self.totals = self.config_totals[self.config_of]
        self.shells = {
            k: np.flatnonzero(self.totals == k) for k in range(policy.max_total + 1)
        }
        self._size = n

    def __len__(self) -> int:
        return self._size

    @property
    def max_total(self) -> int:
        return self.policy.max_total

    def config_index(self, config: OscillatorConfig | tuple) -> int:
        key = config.to_dense(self.region) if isinstance(config, OscillatorConfig) else tuple(config)
        try:
            return self._config_index[key]
        except KeyError:
            raise KeyError(f"configuration {config} is outside the truncated basis") from None

    def dense_index(self, site_index: int, dense_config: tuple) -> int | None:
        """Position of |x, m> given dense counts, or None if truncated away."""
        j = self._config_index.get(dense_config)
        return None if j is None else site_index * self.n_configs + j

    def index(self, site, config: OscillatorConfig) -> int:
        return self.region.index(site) * self.n_configs + self.config_index(config)

    def state(self, i: int) -> BasisState:
        if not 0 <= i < self._size:
            raise IndexError(i)
        return BasisState(self.region.sites[self.site_of[i]], self.configs[self.config_of[i]])

    def __iter__(self) -> Iterator[BasisState]:
        return (self.state(i) for i in range(self._size))

    def shell(self, k: int) -> np.ndarray:
        return self.shells.get(k, np.empty(0, dtype=np.int64))

    def positions(self, sites) -> np.ndarray:
        """Indices of all states whose particle sits in ``sites``."""
        idx = sorted(self.region.index(s) for s in sites)
        if not idx:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(
            [np.arange(i * self.n_configs, (i + 1) * self.n_configs) for i in idx]
        )

    def dump(self) -> Iterator[str]:
        """One line per state: index, shell, site, configuration."""
        for i in range(self._size):
            st = self.state(i)
            yield f"{i}\tN={int(self.totals[i])}\t{st}"


def enumerate_basis(region: LatticeRegion, policy: TruncationPolicy) -> BasisEnumeration:
    return BasisEnumeration(region, policy)


# --- distances on configurations and basis states -------------------------


def radius_R(region: LatticeRegion, m: OscillatorConfig, xi: OscillatorConfig, x) -> int:
    """Largest distance from x to a site where m > 0 and m differs from xi."""
    sites = [u for u, c in m.items() if c != xi[u]]
    if not sites:
        return 0
    return max(region.distance(x, u) for u in sites)


def upsilon(region: LatticeRegion, x, m: OscillatorConfig, y, xi: OscillatorConfig) -> int:
    return max(region.distance(x, y), radius_R(region, m, xi, x), radius_R(region, xi, m, y))


def r_metric(m: OscillatorConfig, xi: OscillatorConfig) -> float:
    return float(sum(math.sqrt(abs(m[u] - xi[u])) for u in set(m) | set(xi)))


def shell_distance(m: OscillatorConfig, k: int, region: LatticeRegion) -> float:
    """r-distance from m to the shell of configurations with N = k.

    Adding excitations costs sqrt(k - N(m)) (all on one site); removing
    them greedily empties the largest counts first, which is optimal
    because sqrt is concave.
    """
    if len(region) == 0:
        raise EmptyRegion("shell distance needs at least one site")
    if k < 0:
        raise ValueError("shell index must be nonnegative")
    n = m.total
    if n <= k:
        return math.sqrt(k - n)
    remaining = n - k
    cost = 0.0
    for c in sorted(m.values(), reverse=True):
        take = min(c, remaining)
        cost += math.sqrt(take)
        remaining -= take
        if remaining == 0:
            break
    return cost


def collapsed_metric(
    m: OscillatorConfig, xi: OscillatorConfig, k: int, region: LatticeRegion
) -> float:
    """r with the k-th shell collapsed to a point."""
    return min(r_metric(m, xi), shell_distance(m, k, region) + shell_distance(xi, k, region))


R_k = collapsed_metric


def held_karp_path(dist: np.ndarray) -> int:
    """Shortest path from node 0 to node n-1 visiting every node of ``dist``.

    ``dist`` is a symmetric (n, n) matrix of nonnegative path lengths.
    """
    n = dist.shape[0]
    if n <= 2:
        return int(dist[0, n - 1])
    inner = n - 2
    full = (1 << inner) - 1
    inf = np.iinfo(np.int64).max // 4
    cost = np.full((1 << inner, inner), inf, dtype=np.int64)
    way = dist[1:-1, 1:-1]
    for i in range(inner):
        cost[1 << i, i] = dist[0, i + 1]
    for mask in range(1, full + 1):
        row = cost[mask]
        if not np.any(row < inf):
            continue
        for j in range(inner):
            bit = 1 << j
            if mask & bit:
                continue
            best = np.min(row + way[:, j])
            if best < cost[mask | bit, j]:
                cost[mask | bit, j] = best
    return int(np.min(cost[full] + dist[1:-1, -1]))


def walk_metric_L(region: LatticeRegion, x, m: OscillatorConfig, y, xi: OscillatorConfig) -> int:
    """Length of the shortest nearest-neighbour walk x -> y visiting every
    site where m and xi differ (exact, Held-Karp)."""
    x, y = as_site(x), as_site(y)
    waypoints = sorted(m.differing_sites(xi) - {x, y})
    if len(waypoints) > MAX_WAYPOINTS:
        raise TooManyWaypoints(f"{len(waypoints)} waypoints exceed the exact limit {MAX_WAYPOINTS}")
    nodes = [region.index(x)] + [region.index(w) for w in waypoints] + [region.index(y)]
    dist = region.distance_matrix[np.ix_(nodes, nodes)]
    if np.any(dist < 0):
        raise Unreachable("walk endpoints or waypoints lie in different components")
    return held_karp_path(np.asarray(dist, dtype=np.int64))


def d_metric(region: LatticeRegion, x, m: OscillatorConfig, y, xi: OscillatorConfig) -> float:
    return walk_metric_L(region, x, m, y, xi) + r_metric(m, xi)


def pair_distances(enum: BasisEnumeration, a: int, b: int, k: int = 0) -> dict[str, float]:
    """All distance variables between basis states ``a`` and ``b``."""
    region = enum.region
    sa, sb = enum.state(a), enum.state(b)
    ups = upsilon(region, sa.site, sa.config, sb.site, sb.config)
    rk = collapsed_metric(sa.config, sb.config, k, region)
    walk = walk_metric_L(region, sa.site, sa.config, sb.site, sb.config)
    r = r_metric(sa.config, sb.config)
    return {
        "position": float(region.distance(sa.site, sb.site)),
        "upsilon": float(ups),
        "R_k": rk,
        "upsilon_plus_R_k": ups + rk,
        "L": float(walk),
        "r": r,
        "d": walk + r,
    }


def upsilon_shell_sum(
    enum: BasisEnumeration, x, y, xi: OscillatorConfig, k: int, mu: float
) -> float:
    """sum over m with N(m) = k of exp(-mu * Upsilon(x, m; y, xi))."""
    region = enum.region
    total = 0.0
    for j in np.flatnonzero(enum.config_totals == k):
        total += math.exp(-mu * upsilon(region, x, enum.configs[j], y, xi))
    return total
