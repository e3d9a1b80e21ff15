"""``holstein-lab``: command-line front end.

Each subcommand runs one experiment kind from a JSON config and writes
``<prefix>.csv`` plus a ``<prefix>.json`` summary into the output directory.
Exit status is 0 on success, 2 for an invalid config and 3 when the
computation fails (including failed identity checks).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .errors import ComputeFailed, ConfigInvalid, HolsteinLabError
from .hamiltonian import BandOut, assemble, sample_disorder, write_coo
from .resolvent import Resolvent, combes_thomas_probe, top_shell_weight
from .states import BasisEnumeration, pair_distances
from .statistics import (
    CorrelatorConfig,
    SweepConfig,
    correlator_sweep,
    decay_fit,
    DecayFit,
    fractional_moment_sweep,
    metric_fit_is_better,
    write_csv,
)
from .verify import verify_suite

log = logging.getLogger("holstein_lab")

KINDS = ("verify", "greens", "sweep", "fit", "correlator", "ct-probe", "basis-info")
TRUNCATION_FLAG = 1e-6
DISTANCE_KINDS = ("position", "upsilon", "upsilon_plus_R_k", "L", "r", "d")


def _fit_dict(fit) -> dict:
    return {"rate": fit.rate, "intercept": fit.intercept, "stderr": fit.stderr,
            "ci_low": fit.ci[0], "ci_high": fit.ci[1], "distance": fit.distance_kind,
            "residual": fit.residual, "n_distances": fit.n_distances}


def _as_fit(d: dict) -> DecayFit:
    return DecayFit(d["rate"], d["intercept"], d["stderr"], (d["ci_low"], d["ci_high"]),
                    d["distance"], d["residual"], d["n_distances"])


def _try_fit(distances, samples, kind, seed, n_boot=200):
    try:
        return _fit_dict(decay_fit(distances, samples, kind, n_boot, seed)), None
    except (HolsteinLabError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


class Run:
    """State shared by the experiment functions of one invocation."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str, prefix: str):
        self.cfg = cfg
        self.out_dir = out_dir
        self.prefix = prefix
        self.timings: dict = {}
        self.diagnostics: dict = {}
        self._enum = None

    def path(self, suffix: str) -> str:
        return os.path.join(self.out_dir, f"{self.prefix}{suffix}")

    def timed(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        finally:
            self.timings[name] = time.perf_counter() - t0

    @property
    def enum(self) -> BasisEnumeration:
        if self._enum is None:
            self._enum = self.timed("enumerate", BasisEnumeration, self.cfg.region(), self.cfg.policy())
            self.diagnostics.update({"basis_size": len(self._enum),
                                     "k_max": self._enum.max_total,
                                     "n_configs": self._enum.n_configs})
        return self._enum

    def extras(self, H) -> None:
        self.diagnostics["leaked_weight"] = H.leaked_weight
        if self.cfg.get("dump_basis"):
            with open(self.path("_basis.txt"), "w") as fh:
                fh.writelines(line + "\n" for line in self.enum.dump())
        if self.cfg.get("export_coo"):
            write_coo(H, self.path("_hamiltonian.coo"))

    # --- experiments ---------------------------------------------------------

    def verify(self):
        sign = -1.0 if self.cfg.get("mutation", "none") == "flip_hopping_sign" else 1.0
        checks = self.timed("verify", verify_suite, self.enum, self.cfg.params(), self.cfg.seed,
                            self.cfg.get("tolerance"), self.cfg.get("identity_n_max", 20), sign)
        rows = [c.as_dict() for c in checks]
        failed = [c.name for c in checks if not c.passed]
        return {"checks": rows, "all_passed": not failed}, rows, failed

    def greens(self):
        enum, params = self.enum, self.cfg.params()
        dis = sample_disorder(enum.region, params, self.cfg.seed, self.cfg.get("realization", 0))
        H = self.timed("assemble", assemble, enum, params, dis, self.cfg.selector())
        self.extras(H)
        k = self.cfg.get("band", 0)
        rows, worst = [], 0.0
        pairs = self.cfg.pairs(enum)
        for z in self.cfg.energies():
            R = self.timed("factorize", Resolvent, H, z)
            for pid, (a, b) in enumerate(pairs):
                i = H.local(a)
                if i is None or H.local(b) is None:
                    G, w = 0j, 0.0
                else:
                    u = R.column(b)
                    G, w = complex(u[i]), top_shell_weight(H, u)
                worst = max(worst, w)
                rows.append({"pair": pid, "row_state": a, "col_state": b, "z_re": z.real,
                             "z_im": z.imag, **pair_distances(enum, a, b, k), "re_G": G.real,
                             "im_G": G.imag, "abs_G": abs(G), "top_shell_weight": w})
        self.diagnostics["max_top_shell_weight"] = worst
        self.diagnostics["truncation_sensitive"] = worst > TRUNCATION_FLAG
        return {"n_values": len(rows)}, rows, []

    def _sweep_config(self):
        enum = self.enum
        return SweepConfig(self.cfg.params(), enum.region, enum.policy, self.cfg.pairs(enum),
                           self.cfg.energies(), self.cfg.get("s", 0.5),
                           self.cfg.get("realizations", 100), self.cfg.seed, self.cfg.workers,
                           self.cfg.get("bootstrap", 200))

    def sweep(self):
        sc = self._sweep_config()
        res = self.timed("sweep", fractional_moment_sweep, sc)
        kind = self.cfg.get("distance", "position")
        k = self.cfg.get("band", 0)
        dist = [pair_distances(self.enum, a, b, k)[kind] for a, b in sc.pairs]
        fits = []
        for iz, z in enumerate(sc.energies):
            fit, err = _try_fit(dist, res.abs_g[:, :, iz] ** sc.s, kind, sc.seed, sc.n_bootstrap)
            fits.append({"z_re": z.real, "z_im": z.imag, "fit": fit, "error": err})
        self.diagnostics["failures"] = res.failures
        self.diagnostics["realizations_kept"] = len(res.kept)
        self.diagnostics["partial"] = bool(res.failures)
        return {"fits": fits}, res.table(), []

    def fit(self):
        src = self.cfg.get("input")
        if not src:
            raise ConfigInvalid("experiment.input: fit needs the path of a sweep CSV")
        k = self.cfg.get("band", 0)
        by_z: dict = {}
        with open(src, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["statistic"] != "mean_abs_G_s":
                    continue
                key = (float(row["z_re"]), float(row["z_im"]))
                by_z.setdefault(key, []).append((int(row["row_state"]), int(row["col_state"]),
                                                 float(row["value"])))
        kinds = [self.cfg.get("distance")] if self.cfg.get("distance") else list(DISTANCE_KINDS)
        rows, summary = [], []
        for (zr, zi), entries in by_z.items():
            values = [v for _, _, v in entries]
            dists = [pair_distances(self.enum, a, b, k) for a, b, _ in entries]
            fits = {}
            for kind in kinds:
                fit, err = _try_fit([d[kind] for d in dists], values, kind, self.cfg.seed)
                fits[kind] = fit if fit else {"error": err}
                if fit:
                    rows.append({"z_re": zr, "z_im": zi, **fit})
            comparison = None
            pos, met = fits.get("position", {}), fits.get("upsilon_plus_R_k", {})
            if "residual" in pos and "residual" in met:
                comparison = metric_fit_is_better(_as_fit(pos), _as_fit(met))
            summary.append({"z_re": zr, "z_im": zi, "fits": fits,
                            "metric_fit_better": comparison})
        fields = ["z_re", "z_im", "distance", "rate", "intercept", "stderr", "ci_low", "ci_high",
                  "residual", "n_distances"]
        return {"fits": summary}, [{f: r[f] for f in fields} for r in rows], []

    def correlator(self):
        enum = self.enum
        cc = CorrelatorConfig(self.cfg.params(), enum.region, enum.policy,
                              tuple(self.cfg.pairs(enum)), self.cfg.get("band", 0),
                              tuple(self.cfg.times()), self.cfg.get("realizations", 20),
                              self.cfg.seed, self.cfg.workers)
        res = self.timed("correlator", correlator_sweep, cc)
        dist = [pair_distances(enum, a, b)["position"] for a, b in cc.pairs]
        fit, err = _try_fit(dist, res.q, "position", cc.seed)
        rows = []
        for pid, (a, b) in enumerate(cc.pairs):
            rows.append({"pair": pid, "row_state": a, "col_state": b, "position": dist[pid],
                         "mean_Q": res.q[:, pid].mean(), "max_amplitude": res.amp_max[:, pid].max(),
                         "violations": int(np.sum(res.amp_max[:, pid] > res.q[:, pid] + cc.tolerance))})
        self.diagnostics["failures"] = res.failures
        self.diagnostics["partial"] = bool(res.failures)
        return {"violations": res.violations, "fit": fit, "fit_error": err}, rows, []

    def ct_probe(self):
        enum, params = self.enum, self.cfg.params()
        k = self.cfg.get("band", 0)
        dis = sample_disorder(enum.region, params, self.cfg.seed, self.cfg.get("realization", 0))
        z = self.cfg.energies()[0]
        pairs = self.cfg.pairs(enum)
        sel = self.cfg.selector() or BandOut(k)
        probe = self.timed("probe", combes_thomas_probe, enum, params, dis, k, z, pairs, sel)
        nu = probe.bound_rate("d")
        d, g = probe.samples("d")
        keep = (d > 0) & (g > 0)
        fit, err = _try_fit(d[keep], g[keep], "d", self.cfg.seed)
        results = {"resolvent_norm": probe.resolvent_norm,
                   "spectral_distance": probe.spectral_distance, "gap": probe.gap,
                   "norm_within_inverse_distance": probe.norm_within_inverse_distance,
                   "norm_within_two_over_gap": probe.norm_within_two_over_gap,
                   "bound_rate": nu if np.isfinite(nu) else None,
                   "fit": fit, "fit_error": err}
        return results, probe.records, []

    def basis_info(self):
        enum, params = self.enum, self.cfg.params()
        dis = sample_disorder(enum.region, params, self.cfg.seed, 0)
        H = self.timed("assemble", assemble, enum, params, dis)
        self.extras(H)
        shells = {str(k): len(v) for k, v in enum.shells.items()}
        rows = [{"shell": k, "states": n} for k, n in shells.items()]
        return {"size": len(enum), "shells": shells, "nnz": int(H.matrix.nnz),
                "hermiticity_error": H.hermiticity_error()}, rows, []


def _write_summary(path: str, cfg: ExperimentConfig, results, timings, diagnostics) -> None:
    summary = {"config_hash": cfg.hash, "results": results, "timings": timings,
               "diagnostics": diagnostics, "config": cfg.doc}
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"cannot serialize {type(o).__name__}")


def run(config: str | dict | None, overrides: Sequence[str] = (), kind: str | None = None,
        out_dir: str | None = None) -> int:
    """Execute one experiment; returns the process exit status."""
    t0 = time.perf_counter()
    try:
        overrides = list(overrides)
        if kind is not None:
            overrides.append(f"experiment.kind={json.dumps(kind)}")
        cfg = ExperimentConfig.load(config, overrides)
        cfg.params()
        d, prefix = cfg.output()
        out_dir = out_dir or d
        os.makedirs(out_dir, exist_ok=True)
    except ConfigInvalid as exc:
        for m in exc.messages:
            print(f"config error: {m}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: output directory: {exc}", file=sys.stderr)
        return 2

    state = Run(cfg, out_dir, prefix)
    method = getattr(state, cfg.kind.replace("-", "_"))
    try:
        results, rows, failed = method()
    except ConfigInvalid as exc:
        for m in exc.messages:
            print(f"config error: {m}", file=sys.stderr)
        return 2
    except (HolsteinLabError, ArithmeticError, np.linalg.LinAlgError, OSError, MemoryError) as exc:
        state.diagnostics.update({"partial": True, "error": f"{type(exc).__name__}: {exc}"})
        state.timings["total"] = time.perf_counter() - t0
        _write_summary(state.path(".json"), cfg, None, state.timings, state.diagnostics)
        print(f"compute error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    if rows:
        write_csv(state.path(".csv"), rows)
    state.timings["total"] = time.perf_counter() - t0
    _write_summary(state.path(".json"), cfg, results, state.timings, state.diagnostics)
    if failed:
        err = ComputeFailed(f"checks failed: {', '.join(failed)}")
        print(f"compute error: {err}", file=sys.stderr)
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="holstein-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        s = sub.add_parser(kind)
        s.add_argument("-c", "--config", help="JSON config file (built-in defaults if omitted)")
        s.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a dotted config key (JSON value)")
        s.add_argument("-o", "--out", help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
        if kind == "verify":
            s.add_argument("--tolerance", type=float, help="override every check tolerance")
            s.add_argument("--identity-n-max", type=int)
            s.add_argument("--inject-sign-flip", action="store_true",
                           help="mutation hook: flip the sign of the hopping term")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ov = list(args.overrides)
    if args.seed is not None:
        ov.append(f"seed={args.seed}")
    if args.workers is not None:
        ov.append(f"workers={args.workers}")
    if args.kind == "verify":
        if args.tolerance is not None:
            ov.append(f"experiment.tolerance={args.tolerance!r}")
        if args.identity_n_max is not None:
            ov.append(f"experiment.identity_n_max={args.identity_n_max}")
        if args.inject_sign_flip:
            ov.append('experiment.mutation="flip_hopping_sign"')
    return run(args.config, ov, args.kind, args.out)


if __name__ == "__main__":
    sys.exit(main())
