"""Green's functions, resolvent-identity checks, Combes-Thomas probes and
eigenfunction correlators for assembled Holstein matrices."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import GapViolated, SelectorMismatch, SingularShift, SolveNotConverged
from .hamiltonian import (
    DENSE_LIMIT,
    BandIn,
    BandOut,
    DirectSum,
    DisorderSample,
    ModelParams,
    OperatorMatrix,
    Selector,
    assemble,
    hopping_remainder,
    spectrum,
)
from .states import BasisEnumeration, pair_distances

RESIDUAL_RTOL = 1e-10
SINGULAR_TOL = 1e-12
CLUSTER_RTOL = 1e-8


class Resolvent:
    """Factorization of (H - z) reused across right-hand sides.

    ``method`` is ``"dense"`` (LU, default up to 6000 states), ``"sparse"``
    (SuperLU) or ``"gmres"``; the last one only exists to study how
    solver error propagates and honours ``rtol``.
    """

    def __init__(self, op: OperatorMatrix, z: complex, method: str | None = None,
                 rtol: float = 1e-12):
        self.op = op
        self.z = complex(z)
        n = op.dim
        self.method = method or ("dense" if n <= DENSE_LIMIT else "sparse")
        self.rtol = rtol
        shifted = (op.matrix - self.z * sp.identity(n, dtype=complex, format="csr")).tocsc()
        self._shifted = shifted
        if self.z.imag == 0.0 and n:
            if n <= DENSE_LIMIT:
                ev = spectrum(op)
                if np.min(np.abs(ev - self.z.real)) < SINGULAR_TOL:
                    raise SingularShift(f"z = {self.z} is an eigenvalue to within {SINGULAR_TOL}")
        try:
            if self.method == "dense":
                self._lu = scipy.linalg.lu_factor(shifted.toarray(), check_finite=False)
            elif self.method == "sparse":
                self._lu = spla.splu(shifted)
            elif self.method == "gmres":
                self._lu = None
            else:
                raise ValueError(f"unknown solver method {self.method!r}")
        except RuntimeError as exc:  # SuperLU reports exact singularity this way
            raise SingularShift(str(exc)) from None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=complex)
        if self.method == "dense":
            u = scipy.linalg.lu_solve(self._lu, rhs, check_finite=False)
        elif self.method == "sparse":
            u = self._lu.solve(rhs)
        else:
            u, info = spla.gmres(self._shifted, rhs, rtol=self.rtol, atol=0.0,
                                 restart=self.op.dim, maxiter=10 * self.op.dim)
            if info != 0:
                raise SolveNotConverged(f"gmres returned info={info}")
            return u
        scale = np.linalg.norm(rhs)
        res = np.linalg.norm(self._shifted @ u - rhs)
        if res > RESIDUAL_RTOL * max(scale, 1e-300):
            raise SolveNotConverged(f"residual {res:.3e} exceeds {RESIDUAL_RTOL:g} * {scale:.3e}")
        return u

    def unit(self, basis_index: int) -> np.ndarray:
        e = np.zeros(self.op.dim, dtype=complex)
        j = self.op.local(basis_index)
        if j is None:
            raise SelectorMismatch(f"basis state {basis_index} is outside the operator's subspace")
        e[j] = 1.0
        return e

    def column(self, basis_index: int) -> np.ndarray:
        """(H - z)^{-1} applied to the unit vector of a basis state."""
        return self.solve(self.unit(basis_index))

    def element(self, row: int, col: int) -> complex:
        """G_S(row; col; z), zero when either state lies outside S."""
        i, j = self.op.local(row), self.op.local(col)
        if i is None or j is None:
            return 0j
        return complex(self.column(col)[i])


def greens_element(op: OperatorMatrix, row: int, col: int, z: complex,
                   method: str | None = None) -> complex:
    """<row|(H - z)^{-1}|col> for basis-state indices ``row`` and ``col``."""
    return Resolvent(op, z, method).element(row, col)


def top_shell_weight(op: OperatorMatrix, vec: np.ndarray) -> float:
    """Fraction of |vec|^2 carried by the highest retained shell."""
    totals = op.enum.totals[op.indices]
    w = np.abs(vec) ** 2
    norm = w.sum()
    if norm == 0:
        return 0.0
    return float(w[totals == op.enum.max_total].sum() / norm)


# --- geometric resolvent identities ----------------------------------------


def _embed(op: OperatorMatrix, local_vec: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=complex)
    out[op.indices] = local_vec
    return out


def verify_gri(
    enum: BasisEnumeration,
    params: ModelParams,
    disorder: DisorderSample,
    split: DirectSum,
    z: complex,
    pairs: Sequence[tuple[int, int]],
    method: str | None = None,
    rtol: float = 1e-12,
    band: int | None = None,
) -> dict[str, float]:
    """Largest |lhs - rhs| of each resolvent identity over ``pairs``.

    ``split`` must partition the basis. Both two-sided identities are
    evaluated; with ``band=k`` (split into shell k and the rest) the
    out-of-band form is also checked on pairs with the row off shell k
    and the column on it.
    """
    n = len(enum)
    g = params.gamma
    H = assemble(enum, params, disorder)
    Hs = assemble(enum, params, disorder, split)
    if Hs.dim != n:
        raise SelectorMismatch("split must partition the basis")
    T = hopping_remainder(enum, params, split).matrix
    R = Resolvent(H, z, method, rtol)
    Rs = Resolvent(Hs, z, method, rtol)
    res = {"first": 0.0, "second": 0.0}
    cols = sorted({b for _, b in pairs})
    cache = {}
    for b in cols:
        u = R.column(b)
        us = Rs.column(b)
        cache[b] = (u, us, Rs.solve(T @ u), R.solve(T @ us))
    for a, b in pairs:
        u, us, v1, v2 = cache[b]
        lhs = u[a]
        res["first"] = max(res["first"], float(abs(lhs - (us[a] - g * v1[a]))))
        res["second"] = max(res["second"], float(abs(lhs - (us[a] - g * v2[a]))))
    if band is not None:
        out_pairs = [(a, b) for a, b in pairs
                     if enum.totals[a] != band and enum.totals[b] == band]
        res["out"] = 0.0
        if out_pairs:
            Hout = assemble(enum, params, disorder, BandOut(band))
            Rout = Resolvent(Hout, z, method, rtol)
            for a, b in out_pairs:
                w = (T @ cache[b][0])[Hout.indices]
                v = Rout.solve(w)
                rhs = -g * v[Hout.local(a)]
                res["out"] = max(res["out"], float(abs(cache[b][0][a] - rhs)))
    return res


# --- Combes-Thomas probes ---------------------------------------------------


@dataclass
class CTProbe:
    records: list
    resolvent_norm: float
    spectral_distance: float
    gap: float
    block_norms: dict = field(default_factory=dict)

    @property
    def norm_within_inverse_distance(self) -> bool:
        return self.resolvent_norm <= (1.0 + 1e-9) / self.spectral_distance

    @property
    def norm_within_two_over_gap(self) -> bool:
        return self.resolvent_norm <= 2.0 / self.gap

    def samples(self, distance: str = "d") -> tuple[np.ndarray, np.ndarray]:
        d = np.array([r[distance] for r in self.records], dtype=float)
        g = np.array([r["abs_G"] for r in self.records], dtype=float)
        return d, g

    def bound_rate(self, distance: str = "d") -> float:
        """Largest nu with |G| <= (2/delta) exp(-nu d) on every probed pair at d > 0."""
        d, g = self.samples(distance)
        keep = (d > 0) & (g > 0)
        if not keep.any():
            return np.inf
        return float(np.min((np.log(2.0 / self.gap) - np.log(g[keep])) / d[keep]))


def combes_thomas_probe(
    enum: BasisEnumeration,
    params: ModelParams,
    disorder: DisorderSample,
    k: int,
    z: complex,
    pairs: Iterable[tuple[int, int]],
    selector: Selector | None = None,
    blocks: Sequence[tuple[Sequence[int], Sequence[int]]] = (),
) -> CTProbe:
    """|G_S| on pairs of states in S, for S disjoint from shell k and Re z in band k.

    The operator norm of (H_S - z)^{-1} is measured from the dense inverse
    and compared with the exact spectral distance, not with the gap.
    """
    delta = params.gap
    if delta <= 0:
        raise GapViolated(f"band gap delta = {delta:g} is not positive")
    selector = selector or BandOut(k)
    HS = assemble(enum, params, disorder, selector)
    if np.any(enum.totals[HS.indices] == k):
        raise SelectorMismatch(f"selector intersects shell {k}")
    ev = spectrum(HS)
    dist = float(np.min(np.abs(ev - complex(z)))) if len(ev) else np.inf
    if dist < 1e-9:
        raise GapViolated(f"z = {z} lies within 1e-9 of the restricted spectrum")
    inv = scipy.linalg.inv(HS.dense() - complex(z) * np.eye(HS.dim))
    norm = float(np.linalg.norm(inv, 2))
    records = []
    for pid, (a, b) in enumerate(pairs):
        i, j = HS.local(a), HS.local(b)
        if i is None or j is None:
            raise SelectorMismatch(f"pair {(a, b)} is not inside the selected subspace")
        G = complex(inv[i, j])
        rec = {"pair": pid, "row": int(a), "col": int(b)}
        rec.update(pair_distances(enum, a, b, k))
        rec.update({"re_G": G.real, "im_G": G.imag, "abs_G": abs(G)})
        records.append(rec)
    block_norms = {}
    for bid, (s1, s2) in enumerate(blocks):
        i1 = [HS.local(a) for a in s1]
        i2 = [HS.local(b) for b in s2]
        if None in i1 or None in i2:
            raise SelectorMismatch("block outside the selected subspace")
        block_norms[bid] = float(np.linalg.norm(inv[np.ix_(i1, i2)], 2))
    return CTProbe(records, norm, dist, delta, block_norms)


# --- spectral correlators ---------------------------------------------------


@dataclass
class EigenSystem:
    values: np.ndarray
    vectors: np.ndarray
    op: OperatorMatrix

    @classmethod
    def of(cls, op: OperatorMatrix, dense_limit: int = DENSE_LIMIT) -> "EigenSystem":
        w, v = spectrum(op, dense_limit, vectors=True)
        return cls(w, v, op)

    @property
    def norm(self) -> float:
        return float(np.max(np.abs(self.values), initial=0.0))

    def amplitudes(self, a: int, b: int) -> np.ndarray:
        """psi_i(a) * conj(psi_i(b)) for every eigenvector."""
        i, j = self.op.local(a), self.op.local(b)
        if i is None or j is None:
            raise SelectorMismatch("state outside the operator's subspace")
        return self.vectors[i] * self.vectors[j].conj()


@dataclass
class CorrelatorResult:
    q: float
    contributions: np.ndarray
    energies: np.ndarray
    clusters: list


def _in_window(values, window, closed_right=True):
    lo, hi = window
    upper = values <= hi if closed_right else values < hi
    return (values >= lo) & upper


def eigenfunction_correlator(
    eig: EigenSystem, a: int, b: int, window: tuple[float, float],
    closed_right: bool = True, cluster_rtol: float = CLUSTER_RTOL,
) -> CorrelatorResult:
    """Sum over eigenvalues in ``window`` of |<a|P_E|b>|.

    Eigenvalues closer than ``cluster_rtol * ||H||`` are merged into one
    eigenspace before taking absolute values.
    """
    amp = eig.amplitudes(a, b)
    sel = np.flatnonzero(_in_window(eig.values, window, closed_right))
    tol = cluster_rtol * max(eig.norm, 1.0)
    clusters = []
    for i in sel:
        if clusters and eig.values[i] - eig.values[clusters[-1][-1]] <= tol:
            clusters[-1].append(int(i))
        else:
            clusters.append([int(i)])
    contrib = np.array([abs(amp[c].sum()) for c in clusters])
    energies = np.array([eig.values[c].mean() for c in clusters])
    return CorrelatorResult(float(contrib.sum()), contrib, energies, clusters)


def dynamical_amplitude(
    eig: EigenSystem, a: int, b: int, e_cut: float, times: Sequence[float]
) -> tuple[float, float]:
    """(max over ``times`` of |<a|exp(-itH) P_[0,e_cut)|b>|, Q(a; b; [0, e_cut)))."""
    amp = eig.amplitudes(a, b)
    sel = _in_window(eig.values, (0.0, e_cut), closed_right=False)
    t = np.asarray(times, dtype=float)
    phases = np.exp(-1j * np.outer(t, eig.values[sel]))
    grid = np.abs(phases @ amp[sel])
    q = eigenfunction_correlator(eig, a, b, (0.0, e_cut), closed_right=False).q
    return float(grid.max(initial=0.0)), q


def dynamical_amplitude_grid(eig: EigenSystem, a: int, b: int, window, times,
                             closed_right: bool = True) -> np.ndarray:
    """|<a|exp(-itH) P_window|b>| at every time of the grid."""
    amp = eig.amplitudes(a, b)
    sel = _in_window(eig.values, window, closed_right)
    t = np.asarray(times, dtype=float)
    return np.abs(np.exp(-1j * np.outer(t, eig.values[sel])) @ amp[sel])
