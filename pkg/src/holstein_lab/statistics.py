"""Disorder averages: fractional moments, decay fits, weak-L1 tails and
eigenfunction-correlator sweeps.

Realizations are independent tasks. Each one draws its potentials from a
counter-based stream keyed by (seed, realization index, site), so results do
not depend on how tasks are distributed over processes, and aggregation is
always a fold over realizations in index order.
"""
from __future__ import annotations

import csv
import io
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import HolsteinLabError, InsufficientDistances, NonpositiveMean
from .hamiltonian import (
    DisorderSample,
    ModelParams,
    assemble,
    fixed_disorder,
    sample_disorder,
)
from .lattice import LatticeRegion
from .resolvent import EigenSystem, Resolvent, dynamical_amplitude_grid, eigenfunction_correlator
from .states import BasisEnumeration, TruncationPolicy

log = logging.getLogger(__name__)

N_BOOTSTRAP = 200
_BOOT_STREAM = 0xB0075


@dataclass(frozen=True)
class SweepConfig:
    params: ModelParams
    region: LatticeRegion
    truncation: TruncationPolicy
    pairs: tuple
    energies: tuple
    s: float = 0.5
    realizations: int = 100
    seed: int = 0
    workers: int = 1
    n_bootstrap: int = N_BOOTSTRAP

    def __post_init__(self):
        if not 0 < self.s < 1:
            raise ValueError("fractional power s must lie in (0, 1)")
        if self.realizations < 1:
            raise ValueError("need at least one realization")
        if self.workers < 1:
            raise ValueError("need at least one worker")
        object.__setattr__(self, "pairs", tuple((int(a), int(b)) for a, b in self.pairs))
        object.__setattr__(self, "energies", tuple(complex(z) for z in self.energies))


# --- worker pool ------------------------------------------------------------

_ENUM_CACHE: dict = {}


def _enumeration(region: LatticeRegion, policy: TruncationPolicy) -> BasisEnumeration:
    key = (region.dimension, region.sites, policy)
    if key not in _ENUM_CACHE:
        _ENUM_CACHE.clear()
        _ENUM_CACHE[key] = BasisEnumeration(region, policy)
    return _ENUM_CACHE[key]


def _chunks(indices: Sequence[int], workers: int) -> list[list[int]]:
    n = max(1, min(workers * 4, len(indices)))
    return [list(c) for c in np.array_split(np.asarray(indices), n) if len(c)]


def run_realizations(task: Callable, payload, n: int, workers: int) -> list:
    """Evaluate ``task(payload, chunk)`` over realization indices 0..n-1.

    Every chunk runs in a pool worker, including when ``workers == 1``, so a
    realization follows the same floating-point path for any worker count.
    Returns one entry per realization, in index order.
    """
    chunks = _chunks(range(n), workers)
    methods = multiprocessing.get_all_start_methods()
    ctx = multiprocessing.get_context("fork" if "fork" in methods else "spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        parts = list(pool.map(task, [payload] * len(chunks), chunks))
    out = [r for part in parts for r in part]
    assert len(out) == n
    return out


# --- fractional moments -----------------------------------------------------


def _greens_chunk(cfg: SweepConfig, chunk: list[int]) -> list:
    enum = _enumeration(cfg.region, cfg.truncation)
    cols = sorted({b for _, b in cfg.pairs})
    out = []
    for i in chunk:
        try:
            dis = sample_disorder(cfg.region, cfg.params, cfg.seed, int(i))
            H = assemble(enum, cfg.params, dis)
            vals = np.empty((len(cfg.pairs), len(cfg.energies)))
            for iz, z in enumerate(cfg.energies):
                R = Resolvent(H, z)
                column = {b: R.column(b) for b in cols}
                for ip, (a, b) in enumerate(cfg.pairs):
                    vals[ip, iz] = abs(column[b][a])
            out.append(vals)
        except (HolsteinLabError, ArithmeticError, np.linalg.LinAlgError) as exc:
            out.append(f"{type(exc).__name__}: {exc}")
    return out


def bootstrap_indices(n: int, n_boot: int, seed: int) -> np.ndarray:
    """Resampling index matrix (n_boot x n), reproducible from ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _BOOT_STREAM]))
    return rng.integers(0, n, size=(n_boot, n))


@dataclass
class SweepResult:
    config: SweepConfig
    abs_g: np.ndarray  # realizations kept x pairs x energies
    kept: np.ndarray  # realization indices that succeeded
    failures: list  # (realization index, message)

    def moments(self, s: float | None = None) -> np.ndarray:
        s = self.config.s if s is None else s
        return np.mean(self.abs_g ** s, axis=0)

    def bootstrap_stderr(self, s: float | None = None) -> np.ndarray:
        s = self.config.s if s is None else s
        x = self.abs_g ** s
        idx = bootstrap_indices(len(x), self.config.n_bootstrap, self.config.seed)
        boots = np.stack([np.mean(x[row], axis=0) for row in idx])
        return np.std(boots, axis=0, ddof=1)

    def table(self) -> list[dict]:
        """One row per pair x energy x statistic."""
        mean, err = self.moments(), self.bootstrap_stderr()
        rows = []
        for ip, (a, b) in enumerate(self.config.pairs):
            for iz, z in enumerate(self.config.energies):
                base = {"pair": ip, "row_state": a, "col_state": b,
                        "z_re": z.real, "z_im": z.imag, "s": self.config.s}
                for name, val in (("mean_abs_G_s", mean[ip, iz]),
                                  ("bootstrap_stderr", err[ip, iz]),
                                  ("n_realizations", len(self.kept))):
                    rows.append({**base, "statistic": name, "value": val})
        return rows


def fractional_moment_sweep(cfg: SweepConfig) -> SweepResult:
    """E|G(a; b; z)|^s over disorder for every pair and energy of ``cfg``."""
    raw = run_realizations(_greens_chunk, cfg, cfg.realizations, cfg.workers)
    kept, vals, failures = [], [], []
    for i, r in enumerate(raw):
        if isinstance(r, str):
            log.warning("realization %d failed: %s", i, r)
            failures.append((i, r))
        else:
            kept.append(i)
            vals.append(r)
    shape = (0, len(cfg.pairs), len(cfg.energies))
    abs_g = np.stack(vals) if vals else np.empty(shape)
    return SweepResult(cfg, abs_g, np.array(kept, dtype=int), failures)


# --- decay fits -------------------------------------------------------------


@dataclass
class DecayFit:
    """log(mean) ~ intercept - rate * distance."""

    rate: float
    intercept: float
    stderr: float
    ci: tuple
    distance_kind: str
    residual: float
    n_distances: int
    boot_rates: np.ndarray = field(repr=False, default=None)

    @property
    def excludes_zero(self) -> bool:
        return self.ci[0] > 0 or self.ci[1] < 0


def _line_fit(d, y):
    slope, intercept = np.polyfit(d, y, 1)
    resid = y - (slope * d + intercept)
    return -slope, intercept, float(np.sqrt(np.mean(resid ** 2)))


def decay_fit(
    distances,
    samples,
    distance_kind: str = "norm",
    n_bootstrap: int = N_BOOTSTRAP,
    seed: int = 0,
    level: float = 0.95,
) -> DecayFit:
    """Exponential decay rate of averaged samples against a distance.

    ``samples`` is either the vector of means (one per distance entry) or a
    realizations x entries matrix, in which case the confidence interval
    comes from resampling realizations. For plain means the fit residuals
    are resampled instead.
    """
    d = np.asarray(distances, dtype=float)
    x = np.asarray(samples, dtype=float)
    if len(np.unique(d)) < 4:
        raise InsufficientDistances(f"need >= 4 distinct distances, got {len(np.unique(d))}")
    means = x.mean(axis=0) if x.ndim == 2 else x
    if means.shape != d.shape:
        raise ValueError("one sample column per distance entry is required")
    if np.any(~(means > 0)):
        raise NonpositiveMean("all means must be positive to take logarithms")
    rate, intercept, resid = _line_fit(d, np.log(means))
    idx = bootstrap_indices(len(x), n_bootstrap, seed)
    boots = []
    if x.ndim == 2:
        for row in idx:
            m = x[row].mean(axis=0)
            if np.all(m > 0):
                boots.append(_line_fit(d, np.log(m))[0])
    else:
        fitted = intercept - rate * d
        r = np.log(means) - fitted
        for row in idx:
            boots.append(_line_fit(d, fitted + r[row % len(r)])[0])
    boots = np.asarray(boots)
    alpha = (1 - level) / 2
    ci = (float(np.quantile(boots, alpha)), float(np.quantile(boots, 1 - alpha)))
    return DecayFit(float(rate), float(intercept), float(np.std(boots, ddof=1)), ci,
                    distance_kind, resid, len(np.unique(d)), boots)


def metric_fit_is_better(reference: DecayFit, candidate: DecayFit) -> bool:
    """Soft comparison of two fits of the same data against different distances.

    Returns whether ``candidate`` has the smaller residual; a worse candidate is
    logged as a warning and never raised.
    """
    better = candidate.residual <= reference.residual
    if not better:
        log.warning("%s fit residual %.3g exceeds %s fit residual %.3g",
                    candidate.distance_kind, candidate.residual,
                    reference.distance_kind, reference.residual)
    return better


# --- weak-L1 tails ----------------------------------------------------------


@dataclass
class TailResult:
    t: np.ndarray
    survival: np.ndarray
    counts: np.ndarray
    slope: float
    envelope: float
    decade_envelopes: list
    samples: np.ndarray = field(repr=False)

    def moment(self, s: float) -> float:
        return float(np.mean(self.samples ** s))


def conditional_samples(
    enum: BasisEnumeration,
    params: ModelParams,
    disorder: DisorderSample,
    pair: tuple[int, int],
    z: complex,
    n_samples: int,
    seed: int,
) -> np.ndarray:
    """|G(a; b; z)| with v at the two particle positions redrawn, others frozen."""
    a, b = pair
    sites = sorted({int(enum.site_of[a]), int(enum.site_of[b])})
    base = disorder.values.copy()
    out = np.empty(n_samples)
    for i in range(n_samples):
        dis = sample_disorder(enum.region, params, seed, i)
        vals = base.copy()
        vals[sites] = dis.values[sites]
        H = assemble(enum, params, fixed_disorder(enum.region, vals))
        out[i] = abs(Resolvent(H, z).element(a, b))
    return out


def tail_test(samples, t_grid=None) -> TailResult:
    """Empirical survival P[|G| > t] with log-log slope and envelope max_t t P."""
    samples = np.asarray(samples, dtype=float)
    t = np.logspace(1, 4, 31) if t_grid is None else np.asarray(t_grid, dtype=float)
    counts = np.array([(samples > ti).sum() for ti in t])
    surv = counts / len(samples)
    ok = counts > 0
    if ok.sum() >= 2:
        # counts as weights: low-count tail points carry less information
        slope = float(np.polyfit(np.log(t[ok]), np.log(surv[ok]), 1, w=np.sqrt(counts[ok]))[0])
    else:
        slope = float("nan")
    env = t * surv
    decades = []
    lo = np.floor(np.log10(t[0]))
    while 10 ** lo < t[-1]:
        m = (t >= 10 ** lo) & (t <= 10 ** (lo + 1))
        if m.any():
            decades.append(float(env[m].max()))
        lo += 1
    return TailResult(t, surv, counts, slope, float(env.max()), decades, samples)


@dataclass
class AllForOneReport:
    s: np.ndarray
    moments: np.ndarray
    finite: bool
    log_convex: bool
    blowup_exponent: float
    kappa: np.ndarray
    envelope_consistent: bool | None


ENVELOPE_SLACK = 1.1


def allforone_check(samples, s_grid, envelope: float | None = None,
                    slack: float = ENVELOPE_SLACK) -> AllForOneReport:
    """E|G|^s across ``s_grid`` from one set of samples.

    Log-convexity in s follows from Hoelder. ``kappa`` is (1 - s) E|G|^s, the
    prefactor of a kappa/(1-s) envelope. A tail P[|G| > t] <= C/t implies
    kappa(s) <= C^s, so with a measured ``envelope`` C the report states
    whether every kappa stays below ``slack * C^s``. ``blowup_exponent`` is
    the plain slope of log E|G|^s against log 1/(1-s), kept as a diagnostic.
    """
    s = np.sort(np.asarray(s_grid, dtype=float))
    if np.any((s <= 0) | (s >= 1)):
        raise ValueError("s grid must lie in (0, 1)")
    x = np.asarray(samples, dtype=float)
    mom = np.array([np.mean(x ** si) for si in s])
    logm = np.log(mom)
    convex = True
    for i in range(1, len(s) - 1):
        lam = (s[i + 1] - s[i]) / (s[i + 1] - s[i - 1])
        chord = lam * logm[i - 1] + (1 - lam) * logm[i + 1]
        convex &= bool(logm[i] <= chord + 1e-12 * max(1.0, abs(chord)))
    expo = float(np.polyfit(-np.log1p(-s), logm, 1)[0]) if len(s) >= 2 else float("nan")
    kappa = (1 - s) * mom
    consistent = None if envelope is None else bool(np.all(kappa <= slack * envelope ** s))
    return AllForOneReport(s, mom, bool(np.all(np.isfinite(mom))), convex, expo, kappa,
                           consistent)


# --- eigenfunction correlators ----------------------------------------------


@dataclass(frozen=True)
class CorrelatorConfig:
    params: ModelParams
    region: LatticeRegion
    truncation: TruncationPolicy
    pairs: tuple
    band: int = 0
    times: tuple = tuple(np.linspace(0.0, 50.0, 64))
    realizations: int = 20
    seed: int = 0
    workers: int = 1
    tolerance: float = 1e-10


def _correlator_chunk(cfg: CorrelatorConfig, chunk: list[int]) -> list:
    enum = _enumeration(cfg.region, cfg.truncation)
    window = cfg.params.window(cfg.band)
    out = []
    for i in chunk:
        try:
            dis = sample_disorder(cfg.region, cfg.params, cfg.seed, int(i))
            eig = EigenSystem.of(assemble(enum, cfg.params, dis))
            q = np.empty(len(cfg.pairs))
            amp_max = np.empty(len(cfg.pairs))
            for ip, (a, b) in enumerate(cfg.pairs):
                q[ip] = eigenfunction_correlator(eig, a, b, window).q
                amp_max[ip] = dynamical_amplitude_grid(eig, a, b, window, cfg.times).max()
            out.append((q, amp_max))
        except (HolsteinLabError, ArithmeticError, np.linalg.LinAlgError) as exc:
            out.append(f"{type(exc).__name__}: {exc}")
    return out


@dataclass
class CorrelatorSweep:
    config: CorrelatorConfig
    q: np.ndarray  # realizations x pairs
    amp_max: np.ndarray
    kept: np.ndarray
    failures: list

    @property
    def violations(self) -> int:
        return int(np.sum(self.amp_max > self.q + self.config.tolerance))

    @property
    def mean_q(self) -> np.ndarray:
        return self.q.mean(axis=0)

    def fit(self, distances, n_bootstrap: int = N_BOOTSTRAP) -> DecayFit:
        return decay_fit(distances, self.q, "norm", n_bootstrap, self.config.seed)


def correlator_sweep(cfg: CorrelatorConfig) -> CorrelatorSweep:
    raw = run_realizations(_correlator_chunk, cfg, cfg.realizations, cfg.workers)
    q, amp, kept, failures = [], [], [], []
    for i, r in enumerate(raw):
        if isinstance(r, str):
            log.warning("realization %d failed: %s", i, r)
            failures.append((i, r))
        else:
            kept.append(i)
            q.append(r[0])
            amp.append(r[1])
    n = len(cfg.pairs)
    return CorrelatorSweep(
        cfg,
        np.stack(q) if q else np.empty((0, n)),
        np.stack(amp) if amp else np.empty((0, n)),
        np.array(kept, dtype=int),
        failures,
    )


# --- output -----------------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def rows_to_csv(rows: list[dict], fieldnames: Sequence[str] | None = None) -> str:
    """CSV text with a header row and RFC 4180 quoting."""
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: format_value(r[k]) for k in fieldnames})
    return buf.getvalue()


def write_csv(path, rows: list[dict], fieldnames: Sequence[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(rows_to_csv(rows, fieldnames))
