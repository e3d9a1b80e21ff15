"""Exact-identity suite: every check reports its measured error against a tolerance."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .hamiltonian import (
    ModelParams,
    assemble,
    band_split,
    band_violation,
    position_split,
    sample_disorder,
    spectrum,
)
from .lattice import ball
from .oscillator import (
    displacement_elements,
    weighted_square_sum,
    weighted_square_sum_closed_form,
)
from .resolvent import verify_gri
from .states import (
    BasisEnumeration,
    collapsed_metric,
    r_metric,
    upsilon,
    walk_metric_L,
)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)

    def as_dict(self) -> dict:
        return {"name": self.name, "error": self.error, "tolerance": self.tolerance,
                "passed": self.passed, "detail": self.detail}


def _expm_displacement(beta: complex, cutoff: int) -> np.ndarray:
    b = np.diag(np.sqrt(np.arange(1, cutoff)), 1).astype(complex)
    return scipy.linalg.expm(beta * b.conj().T - np.conj(beta) * b)


def check_displacement(betas, n_max: int = 10, tol: float = 1e-10) -> CheckResult:
    """Closed form against the exponential of a generously truncated generator."""
    err = 0.0
    q = np.arange(n_max + 1)
    for beta in betas:
        ref = _expm_displacement(beta, 160)[: n_max + 1, : n_max + 1]
        got = displacement_elements(q[:, None], q[None, :], beta)
        err = max(err, float(np.max(np.abs(got - ref))))
    return CheckResult("displacement_closed_form", err, tol, f"m, n <= {n_max}")


def check_unitarity(betas, n_max: int = 40, tol: float = 1e-10) -> CheckResult:
    err = max(abs(weighted_square_sum(n, b, 0.0) - 1.0) for b in betas for n in range(n_max + 1))
    return CheckResult("unitarity", err, tol, f"n <= {n_max}")


def check_square_sum(betas, n_max: int = 20, mus=(0.1, 0.3, 0.5), tol: float = 1e-8) -> CheckResult:
    err = 0.0
    for b in betas:
        for mu in mus:
            for n in range(n_max + 1):
                lhs = weighted_square_sum(n, b, mu)
                rhs = weighted_square_sum_closed_form(n, b, mu)
                err = max(err, abs(lhs - rhs) / abs(rhs))
    return CheckResult("square_sum_identity", err, tol, f"n <= {n_max}, mu in {list(mus)}")


def check_metrics(enum: BasisEnumeration, samples: int, rng: np.random.Generator,
                  k: int = 0) -> CheckResult:
    """Count violated metric relations on random triples of basis states."""
    region = enum.region
    bad = 0
    for _ in range(samples):
        sa, sb, sc = (enum.state(int(i)) for i in rng.integers(0, len(enum), 3))
        u_ab = upsilon(region, sa.site, sa.config, sb.site, sb.config)
        u_ba = upsilon(region, sb.site, sb.config, sa.site, sa.config)
        u_bc = upsilon(region, sb.site, sb.config, sc.site, sc.config)
        u_ac = upsilon(region, sa.site, sa.config, sc.site, sc.config)
        l_ab = walk_metric_L(region, sa.site, sa.config, sb.site, sb.config)
        l_ba = walk_metric_L(region, sb.site, sb.config, sa.site, sa.config)
        l_bc = walk_metric_L(region, sb.site, sb.config, sc.site, sc.config)
        l_ac = walk_metric_L(region, sa.site, sa.config, sc.site, sc.config)
        r = r_metric(sa.config, sb.config)
        rk = collapsed_metric(sa.config, sb.config, k, region)
        low = abs(math.sqrt(sa.config.total) - math.sqrt(sb.config.total))
        bad += u_ab != u_ba or u_ac > u_ab + u_bc
        bad += l_ab != l_ba or l_ac > l_ab + l_bc or l_ab < u_ab
        bad += not (r + 1e-12 >= rk >= low - 1e-12)
    return CheckResult("metric_axioms", float(bad), 0.0, f"{samples} random triples")


def check_assembly(enum: BasisEnumeration, params: ModelParams, seed: int,
                   tol: float = 1e-12) -> list[CheckResult]:
    dis = sample_disorder(enum.region, params, seed, 0)
    H = assemble(enum, params, dis)
    free = ModelParams(params.dimension, 0.0, params.omega, params.beta, params.v_plus,
                       params.density)
    H0 = assemble(enum, free, dis).matrix.toarray()
    expect = params.omega * enum.totals + dis.values[enum.site_of]
    diag_err = float(np.max(np.abs(H0 - np.diag(expect))))
    return [
        CheckResult("hermiticity", H.hermiticity_error(), tol),
        CheckResult("zero_hopping_diagonal", diag_err, tol),
    ]


def check_band_containment(enum: BasisEnumeration, params: ModelParams, seed: int,
                           realizations: int = 3, tol: float = 1e-9,
                           hopping_sign: float = 1.0) -> CheckResult:
    worst = 0.0
    for i in range(realizations):
        dis = sample_disorder(enum.region, params, seed, i)
        ev = spectrum(assemble(enum, params, dis, hopping_sign=hopping_sign))
        worst = max(worst, band_violation(ev, params))
    return CheckResult("band_containment", worst, tol, f"{realizations} realizations")


def check_gri(enum: BasisEnumeration, params: ModelParams, seed: int, rng: np.random.Generator,
              z: complex = 0.25 + 1e-3j, n_pairs: int = 20, tol: float = 1e-8) -> list[CheckResult]:
    dis = sample_disorder(enum.region, params, seed, 0)
    region = enum.region
    centre = region.sites[len(region) // 2]
    pairs = [tuple(int(v) for v in rng.integers(0, len(enum), 2)) for _ in range(n_pairs)]
    off = np.flatnonzero(enum.totals != 0)
    on = enum.shell(0)
    if len(off):
        pairs += [(int(rng.choice(off)), int(rng.choice(on))) for _ in range(n_pairs)]
    pos = verify_gri(enum, params, dis, position_split(enum, ball(region, centre, 2)), z, pairs)
    band = verify_gri(enum, params, dis, band_split(0), z, pairs, band=0)
    return [
        CheckResult("gri_position_first", pos["first"], tol),
        CheckResult("gri_position_second", pos["second"], tol),
        CheckResult("gri_band_first", band["first"], tol),
        CheckResult("gri_band_second", band["second"], tol),
        CheckResult("gri_band_out", band["out"], tol),
    ]


def verify_suite(enum: BasisEnumeration, params: ModelParams, seed: int = 0,
                 tolerance: float | None = None, identity_n_max: int = 20,
                 hopping_sign: float = 1.0) -> list[CheckResult]:
    """Run every exact check; ``tolerance`` overrides all default tolerances."""
    rng = np.random.default_rng(seed)
    betas = sorted({complex(params.beta), 0.5, 1 + 0.3j, 2.0}, key=lambda b: (abs(b), b.imag))
    betas = [b for b in betas if abs(b) <= 2] or [params.beta]
    results = [
        check_displacement(betas),
        check_unitarity(betas),
        check_square_sum(betas, identity_n_max),
        check_metrics(enum, 300, rng),
        *check_assembly(enum, params, seed),
        check_band_containment(enum, params, seed, hopping_sign=hopping_sign),
        *check_gri(enum, params, seed, rng),
    ]
    if tolerance is not None:
        for r in results:
            if r.name != "metric_axioms":
                r.tolerance = tolerance
    return results

