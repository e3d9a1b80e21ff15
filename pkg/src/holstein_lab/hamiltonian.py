"""Disorder sampling and sparse assembly of H(gamma) = gamma*Delta + H(0)
in the truncated eigenbasis |x, m> of the zero-hopping Hamiltonian."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import DimensionTooLarge, SelectorMismatch
from .lattice import LatticeRegion, Site, as_site
from .oscillator import displacement_elements
from .states import BasisEnumeration

DENSE_LIMIT = 6000


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters. ``beta`` is the dimensionless coupling alpha/omega.

    ``density`` is ``"uniform"`` (uniform on [0, v_plus]) or
    ``("beta", a, b)`` for a Beta(a, b) law rescaled to [0, v_plus].
    """

    dimension: int
    gamma: float
    omega: float
    beta: complex = 0.0
    v_plus: float = 0.0
    density: str | tuple = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "beta", complex(self.beta))
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError("gamma must be finite and >= 0")
        if not np.isfinite(self.omega) or self.omega <= 0:
            raise ValueError("omega must be finite and > 0")
        if not np.isfinite(self.v_plus) or self.v_plus < 0:
            raise ValueError("v_plus must be finite and >= 0")
        if not np.isfinite(self.beta):
            raise ValueError("beta must be finite")
        if self.density != "uniform":
            if not (isinstance(self.density, tuple) and len(self.density) == 3
                    and self.density[0] == "beta" and min(self.density[1:]) > 0):
                raise ValueError(f"unsupported density {self.density!r}")

    @property
    def gap(self) -> float:
        """delta = omega - V_+ - 4 D gamma; positive when the bands are separated."""
        return self.omega - self.v_plus - 4 * self.dimension * self.gamma

    def band(self, k: int) -> tuple[float, float]:
        """Energy interval [omega k, omega k + V_+ + 4 D gamma]."""
        lo = self.omega * k
        return lo, lo + self.v_plus + 4 * self.dimension * self.gamma

    def window(self, k: int) -> tuple[float, float]:
        """Spectral window [0, omega k + V_+ + 4 D gamma]."""
        return 0.0, self.band(k)[1]


@dataclass(frozen=True)
class DisorderSample:
    region: LatticeRegion
    values: np.ndarray
    seed: int
    index: int

    def value(self, site) -> float:
        return float(self.values[self.region.index(site)])


def _zigzag(c: int) -> int:
    return 2 * c if c >= 0 else -2 * c - 1


def _site_generator(seed: int, index: int, site: Site) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)] + [_zigzag(c) for c in site]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def sample_disorder(
    region: LatticeRegion, params: ModelParams, seed: int, index: int = 0
) -> DisorderSample:
    """IID potentials v_x in [0, V_+], one counter-based stream per (seed, index, site)."""
    values = np.zeros(len(region))
    if params.v_plus > 0:
        for i, site in enumerate(region.sites):
            g = _site_generator(seed, index, site)
            if params.density == "uniform":
                u = g.random()
            else:
                _, a, b = params.density
                u = g.beta(a, b)
            values[i] = params.v_plus * u
    values.setflags(write=False)
    return DisorderSample(region, values, int(seed), int(index))


def fixed_disorder(region: LatticeRegion, values: Sequence[float]) -> DisorderSample:
    values = np.array(values, dtype=float)
    if values.shape != (len(region),):
        raise ValueError("need one potential value per site")
    values.setflags(write=False)
    return DisorderSample(region, values, -1, -1)


# --- subspace selectors ---------------------------------------------------


class Selector:
    """Chooses a subset of basis states; ``blocks`` lists decoupled parts."""

    def indices(self, enum: BasisEnumeration) -> np.ndarray:
        raise NotImplementedError

    def blocks(self, enum: BasisEnumeration) -> list[np.ndarray]:
        return [self.indices(enum)]


@dataclass(frozen=True)
class Full(Selector):
    def indices(self, enum):
        return np.arange(len(enum))


@dataclass(frozen=True)
class Positions(Selector):
    """States with the particle in ``sites``."""

    sites: frozenset

    def __init__(self, sites):
        object.__setattr__(self, "sites", frozenset(as_site(s) for s in sites))

    def indices(self, enum):
        try:
            return enum.positions(self.sites)
        except ValueError as exc:
            raise SelectorMismatch(str(exc)) from None


@dataclass(frozen=True)
class BandIn(Selector):
    k: int

    def indices(self, enum):
        return enum.shell(self.k)


@dataclass(frozen=True)
class BandOut(Selector):
    k: int

    def indices(self, enum):
        return np.flatnonzero(enum.totals != self.k)


@dataclass(frozen=True)
class Explicit(Selector):
    index_set: tuple

    def __init__(self, index_set):
        object.__setattr__(self, "index_set", tuple(sorted({int(i) for i in index_set})))

    def indices(self, enum):
        idx = np.array(self.index_set, dtype=np.int64)
        if idx.size and (idx[0] < 0 or idx[-1] >= len(enum)):
            raise SelectorMismatch("explicit indices outside the basis range")
        return idx


@dataclass(frozen=True)
class DirectSum(Selector):
    """Block-diagonal restriction: hopping between different parts is removed."""

    parts: tuple

    def __init__(self, *parts: Selector):
        object.__setattr__(self, "parts", tuple(parts))

    def blocks(self, enum):
        return [p.indices(enum) for p in self.parts]

    def indices(self, enum):
        blocks = self.blocks(enum)
        idx = np.concatenate(blocks) if blocks else np.empty(0, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise SelectorMismatch("direct-sum parts overlap")
        return np.sort(idx)


def position_split(enum: BasisEnumeration, gamma_sites) -> DirectSum:
    gamma_sites = {as_site(s) for s in gamma_sites}
    rest = [s for s in enum.region.sites if s not in gamma_sites]
    return DirectSum(Positions(gamma_sites), Positions(rest))


def band_split(k: int) -> DirectSum:
    return DirectSum(BandIn(k), BandOut(k))


# --- assembly --------------------------------------------------------------


@dataclass
class OperatorMatrix:
    """Sparse Hermitian matrix on the basis states listed in ``indices``."""

    matrix: sp.csr_matrix
    indices: np.ndarray
    enum: BasisEnumeration
    leaked_weight: float = 0.0
    label: str = ""
    _local: dict = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def local(self, basis_index: int) -> int | None:
        """Row of a basis state inside this matrix, or None when excluded."""
        if self._local is None:
            self._local = {int(g): i for i, g in enumerate(self.indices)}
        return self._local.get(int(basis_index))

    def hermiticity_error(self) -> float:
        diff = self.matrix - self.matrix.getH()
        return float(abs(diff).max()) if diff.nnz else 0.0


@dataclass(frozen=True)
class _Hopping:
    matrix: sp.csr_matrix
    leaked_weight: float
    leaked_max: float


def hopping_matrix(enum: BasisEnumeration, beta: complex) -> _Hopping:
    """Delta in the |x, m> basis, truncated to the enumeration; cached per beta.

    Diagonal 2D; for neighbours x ~ y and configurations equal away from
    {x, y} the entry is -<m(x)|D(-beta)|xi(x)> <m(y)|D(beta)|xi(y)>.
    Couplings into configurations outside the truncation are dropped and
    their squared weight summed into ``leaked_weight``.
    """
    beta = complex(beta)
    cache = enum.__dict__.setdefault("_hopping_cache", {})
    if beta in cache:
        return cache[beta]
    K = enum.max_total
    cap = enum.policy.per_site_cap
    q = np.arange(K + 1)
    d_minus = displacement_elements(q[:, None], q[None, :], -beta)
    d_plus = displacement_elements(q[:, None], q[None, :], beta)
    nc = enum.n_configs
    D = enum.region.dimension
    rows, cols, vals = [], [], []
    leaked = np.zeros(len(enum))
    for i in range(enum.n_sites):
        for j in enum.region.neighbor_indices(i):
            for c in range(nc):
                dense = enum.dense[c]
                mi, mj = int(dense[i]), int(dense[j])
                budget = K - (int(enum.config_totals[c]) - mi - mj)
                kept = 0.0
                row = i * nc + c
                base = list(dense)
                for a in range(budget + 1):
                    for b in range(budget + 1 - a):
                        if cap is not None and (a > cap or b > cap):
                            continue
                        base[i], base[j] = a, b
                        col = enum.dense_index(j, tuple(base))
                        v = -d_minus[mi, a] * d_plus[mj, b]
                        kept += abs(v) ** 2
                        rows.append(row)
                        cols.append(col)
                        vals.append(v)
                leaked[row] += max(0.0, 1.0 - kept)
    n = len(enum)
    rows.extend(range(n))
    cols.extend(range(n))
    vals.extend([2.0 * D] * n)
    mat = sp.csr_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n))
    out = _Hopping(mat, float(leaked.sum()), float(leaked.max(initial=0.0)))
    cache[beta] = out
    return out


def _restrict(full: sp.csr_matrix, enum: BasisEnumeration, selector: Selector):
    blocks = selector.blocks(enum)
    idx = selector.indices(enum)
    sub = full[idx][:, idx].tocoo()
    if len(blocks) > 1:
        label = np.full(len(enum), -1)
        for b, block in enumerate(blocks):
            label[block] = b
        lab = label[idx]
        keep = lab[sub.row] == lab[sub.col]
        sub = sp.coo_matrix((sub.data[keep], (sub.row[keep], sub.col[keep])), shape=sub.shape)
    return sub.tocsr(), idx


def assemble(
    enum: BasisEnumeration,
    params: ModelParams,
    disorder: DisorderSample,
    selector: Selector | None = None,
    hopping_sign: float = 1.0,
) -> OperatorMatrix:
    """P_S H P_S for H = gamma*Delta + omega*N + V on the truncated basis.

    ``hopping_sign`` is a mutation hook for tests; physical runs keep 1.
    """
    selector = selector or Full()
    if disorder.values.shape != (enum.n_sites,):
        raise SelectorMismatch("disorder sample does not match the region")
    hop = hopping_matrix(enum, params.beta)
    diag = params.omega * enum.totals + disorder.values[enum.site_of]
    full = (hopping_sign * params.gamma) * hop.matrix + sp.diags(diag.astype(complex))
    mat, idx = _restrict(full.tocsr(), enum, selector)
    leaked = hop.leaked_weight * params.gamma ** 2
    return OperatorMatrix(mat, idx, enum, leaked, label=repr(selector))


def hopping_remainder(
    enum: BasisEnumeration, params: ModelParams, selector: Selector
) -> OperatorMatrix:
    """T = Delta - Delta_restricted for a selector partitioning the basis.

    Returned in full-basis coordinates without the factor gamma.
    """
    n = len(enum)
    hop = hopping_matrix(enum, params.beta).matrix
    if isinstance(selector, Full):
        return OperatorMatrix(sp.csr_matrix((n, n), dtype=complex), np.arange(n), enum,
                              label="T[full]")
    idx = selector.indices(enum)
    if len(idx) != n or not np.array_equal(idx, np.arange(n)):
        raise SelectorMismatch("selector parts must partition the basis")
    label = np.full(n, -1)
    for b, block in enumerate(selector.blocks(enum)):
        label[block] = b
    coo = hop.tocoo()
    keep = label[coo.row] != label[coo.col]
    T = sp.coo_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=(n, n)).tocsr()
    return OperatorMatrix(T, np.arange(n), enum, label=f"T[{selector!r}]")


def spectrum(op: OperatorMatrix | np.ndarray, dense_limit: int = DENSE_LIMIT,
             vectors: bool = False):
    """Full Hermitian eigendecomposition, eigenvalues ascending."""
    mat = op.matrix if isinstance(op, OperatorMatrix) else op
    if mat.shape[0] > dense_limit:
        raise DimensionTooLarge(f"dimension {mat.shape[0]} exceeds dense limit {dense_limit}")
    dense = mat.toarray() if sp.issparse(mat) else np.asarray(mat)
    if vectors:
        return scipy.linalg.eigh(dense)
    return scipy.linalg.eigvalsh(dense)


def band_violation(eigenvalues, params: ModelParams) -> float:
    """Largest distance from an eigenvalue to the union of the bands."""
    ev = np.asarray(eigenvalues, dtype=float)
    width = params.v_plus + 4 * params.dimension * params.gamma
    k0 = np.floor(ev / params.omega)
    best = np.full(ev.shape, np.inf)
    for shift in (-1, 0, 1):
        lo = params.omega * np.clip(k0 + shift, 0, None)
        gap = np.maximum.reduce([lo - ev, ev - (lo + width), np.zeros_like(ev)])
        best = np.minimum(best, gap)
    return float(np.max(best, initial=0.0))


def write_coo(op: OperatorMatrix, path) -> None:
    """Coordinate triplets ``row col re im``, one nonzero per line."""
    coo = op.matrix.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# dim {op.dim}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v.real:.17g} {v.imag:.17g}\n")


def read_coo(path) -> sp.csr_matrix:
    with open(path) as fh:
        dim = int(fh.readline().split()[-1])
        data = np.loadtxt(fh, ndmin=2)
    if data.size == 0:
        return sp.csr_matrix((dim, dim), dtype=complex)
    return sp.csr_matrix(
        (data[:, 2] + 1j * data[:, 3], (data[:, 0].astype(int), data[:, 1].astype(int))),
        shape=(dim, dim),
    )
