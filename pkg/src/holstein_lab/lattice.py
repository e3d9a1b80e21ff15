"""Finite regions of the hypercubic lattice Z^D with open boundaries.

Sites are plain tuples of integers. Distances are shortest-path lengths
inside the region, which coincide with the l1 norm on full boxes.
"""
from __future__ import annotations

import itertools
from collections import deque
from typing import Iterable, Sequence

import numpy as np

from .errors import SiteOutsideRegion, SubsetOutsideRegion, Unreachable

Site = tuple[int, ...]


def as_site(coords) -> Site:
    if isinstance(coords, (int, np.integer)):
        return (int(coords),)
    return tuple(int(c) for c in coords)


class LatticeRegion:
    """Finite subset of Z^D with nearest-neighbour adjacency.

    Sites are stored in lexicographic order; ``index(site)`` gives the
    position of a site in that order. The object is immutable after
    construction, all-pairs distances are computed lazily and cached.
    """

    def __init__(self, dimension: int, sites: Iterable):
        if dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {dimension}")
        sites = sorted({as_site(s) for s in sites})
        for s in sites:
            if len(s) != dimension:
                raise ValueError(f"site {s} does not have {dimension} coordinates")
        self.dimension = int(dimension)
        self.sites: tuple[Site, ...] = tuple(sites)
        self._index = {s: i for i, s in enumerate(self.sites)}
        nbrs = []
        for s in self.sites:
            row = []
            for axis in range(dimension):
                for step in (-1, 1):
                    t = list(s)
                    t[axis] += step
                    j = self._index.get(tuple(t))
                    if j is not None:
                        row.append(j)
            nbrs.append(tuple(sorted(row)))
        self._neighbors = tuple(nbrs)
        self._dist: np.ndarray | None = None

    @classmethod
    def box(cls, extents: Sequence, excluded: Iterable = ()) -> "LatticeRegion":
        """Box region; each extent is a length ``L`` (sites 0..L-1) or a
        ``(lo, hi)`` pair of inclusive bounds."""
        ranges = []
        for e in extents:
            if isinstance(e, (int, np.integer)):
                ranges.append(range(int(e)))
            else:
                lo, hi = e
                ranges.append(range(int(lo), int(hi) + 1))
        excluded = {as_site(s) for s in excluded}
        sites = [s for s in itertools.product(*ranges) if s not in excluded]
        return cls(len(ranges), sites)

    @classmethod
    def chain(cls, length: int) -> "LatticeRegion":
        return cls.box([length])

    def __len__(self) -> int:
        return len(self.sites)

    def __contains__(self, site) -> bool:
        return as_site(site) in self._index

    def __iter__(self):
        return iter(self.sites)

    def __repr__(self) -> str:
        return f"LatticeRegion(D={self.dimension}, n_sites={len(self)})"

    def index(self, site) -> int:
        try:
            return self._index[as_site(site)]
        except KeyError:
            raise SiteOutsideRegion(f"site {site} is not in the region") from None

    def neighbors(self, site) -> list[Site]:
        return [self.sites[j] for j in self._neighbors[self.index(site)]]

    def neighbor_indices(self, i: int) -> tuple[int, ...]:
        return self._neighbors[i]

    def edges(self) -> list[tuple[int, int]]:
        """Adjacent index pairs ``(i, j)`` with ``i < j``."""
        return [(i, j) for i, row in enumerate(self._neighbors) for j in row if i < j]

    def _bfs(self, source: int) -> np.ndarray:
        dist = np.full(len(self), -1, dtype=np.int64)
        dist[source] = 0
        queue = deque([source])
        while queue:
            i = queue.popleft()
            for j in self._neighbors[i]:
                if dist[j] < 0:
                    dist[j] = dist[i] + 1
                    queue.append(j)
        return dist

    @property
    def distance_matrix(self) -> np.ndarray:
        """All-pairs graph distances, ``-1`` marking unreachable pairs."""
        if self._dist is None:
            d = np.vstack([self._bfs(i) for i in range(len(self))])
            d.setflags(write=False)
            self._dist = d
        return self._dist

    def index_distance(self, i: int, j: int) -> int:
        d = int(self.distance_matrix[i, j])
        if d < 0:
            raise Unreachable(f"{self.sites[i]} and {self.sites[j]} are not connected")
        return d

    def distance(self, x, y) -> int:
        return self.index_distance(self.index(x), self.index(y))

    def is_connected(self) -> bool:
        return len(self) == 0 or bool((self.distance_matrix[0] >= 0).all())


def graph_distance(region: LatticeRegion, x, y) -> int:
    """Length of the shortest nearest-neighbour path from x to y inside region."""
    return region.distance(x, y)


def ball(region: LatticeRegion, x, radius: int) -> set[Site]:
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    row = region.distance_matrix[region.index(x)]
    return {region.sites[j] for j in np.flatnonzero((row >= 0) & (row <= radius))}


def _check_subset(region: LatticeRegion, gamma) -> set[Site]:
    gamma = {as_site(s) for s in gamma}
    outside = [s for s in gamma if s not in region]
    if outside:
        raise SubsetOutsideRegion(f"sites {sorted(outside)} are not in the region")
    return gamma


def boundary(region: LatticeRegion, gamma) -> set[Site]:
    """Sites of gamma with at least one neighbour in region minus gamma."""
    gamma = _check_subset(region, gamma)
    return {s for s in gamma if any(t not in gamma for t in region.neighbors(s))}


def interior(region: LatticeRegion, gamma) -> set[Site]:
    gamma = _check_subset(region, gamma)
    return gamma - boundary(region, gamma)
