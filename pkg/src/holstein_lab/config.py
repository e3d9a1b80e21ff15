"""Experiment configuration: JSON documents validated against a schema."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from typing import Any, Sequence

import jsonschema
import numpy as np

from .errors import ConfigInvalid
from .hamiltonian import BandIn, BandOut, Full, ModelParams, Positions, Selector
from .lattice import LatticeRegion, as_site
from .states import DEFAULT_MAX_STATES, BasisEnumeration, OscillatorConfig, TruncationPolicy

DEFAULTS: dict = {
    "model": {"D": 1, "gamma": 0.05, "omega": 1.0, "beta_re": 1.0, "beta_im": 0.0,
              "v_plus": 0.5, "density": "uniform"},
    "region": {"extent": [8]},
    "truncation": {"k_max": 2},
    "experiment": {"kind": "verify"},
    "seed": 0,
    "workers": 1,
}


def schema() -> dict:
    text = resources.files(__package__).joinpath("config_schema.json").read_text()
    return json.loads(text)


def _path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate(doc: dict) -> None:
    """Raise ConfigInvalid listing every schema violation by field."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigInvalid([f"{_path(e)}: {e.message}" for e in errors])


def apply_override(doc: dict, assignment: str) -> None:
    """Apply ``dotted.key=value``; the value is parsed as JSON when possible
    and ``null`` removes the key."""
    if "=" not in assignment:
        raise ConfigInvalid(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigInvalid(f"override {key!r}: {p} is not an object")
    if value is None:
        node.pop(parts[-1], None)
    else:
        node[parts[-1]] = value


def config_hash(doc: dict) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class ExperimentConfig:
    doc: dict

    @classmethod
    def load(cls, source: str | dict | None = None, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        if source is None:
            doc = copy.deepcopy(DEFAULTS)
        elif isinstance(source, dict):
            doc = copy.deepcopy(source)
        else:
            try:
                with open(source) as fh:
                    doc = json.load(fh)
            except OSError as exc:
                raise ConfigInvalid(f"cannot read config: {exc}") from None
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigInvalid("<root>: config must be a JSON object")
        for o in overrides:
            apply_override(doc, o)
        validate(doc)
        cfg = cls(doc)
        cfg._check_semantics()
        return cfg

    def _check_semantics(self) -> None:
        msgs = []
        D = self.doc["model"]["D"]
        reg = self.doc["region"]
        if "extent" in reg and len(reg["extent"]) != D:
            msgs.append(f"region.extent: needs {D} entries for D={D}")
        for i, s in enumerate(reg.get("sites", [])):
            if len(s) != D:
                msgs.append(f"region.sites.{i}: needs {D} coordinates")
        if msgs:
            raise ConfigInvalid(msgs)

    # --- typed views ---------------------------------------------------------

    @property
    def kind(self) -> str:
        return self.doc["experiment"]["kind"]

    @property
    def experiment(self) -> dict:
        return self.doc["experiment"]

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def workers(self) -> int:
        return self.doc["workers"]

    @property
    def hash(self) -> str:
        return config_hash(self.doc)

    def params(self) -> ModelParams:
        m = self.doc["model"]
        dens = m["density"]
        if isinstance(dens, dict):
            dens = ("beta", float(dens["a"]), float(dens["b"]))
        try:
            return ModelParams(m["D"], float(m["gamma"]), float(m["omega"]),
                               complex(m["beta_re"], m["beta_im"]), float(m["v_plus"]), dens)
        except ValueError as exc:
            raise ConfigInvalid(f"model: {exc}") from None

    def region(self) -> LatticeRegion:
        r = self.doc["region"]
        if "extent" in r:
            return LatticeRegion.box(r["extent"])
        return LatticeRegion(self.doc["model"]["D"], r["sites"])

    def policy(self) -> TruncationPolicy:
        t = self.doc["truncation"]
        return TruncationPolicy(t["k_max"], t.get("per_site_cap"),
                                t.get("max_states", DEFAULT_MAX_STATES))

    def _state_index(self, enum: BasisEnumeration, spec: dict, where: str) -> int:
        try:
            conf = OscillatorConfig((as_site(s), c) for s, c in spec.get("config", []))
            return enum.index(spec["site"], conf)
        except (KeyError, ValueError) as exc:
            raise ConfigInvalid(f"{where}: {exc}") from None

    def pairs(self, enum: BasisEnumeration) -> list[tuple[int, int]]:
        exp = self.experiment
        out = []
        for i, p in enumerate(exp.get("pairs", [])):
            out.append((self._state_index(enum, p["row"], f"experiment.pairs.{i}.row"),
                        self._state_index(enum, p["col"], f"experiment.pairs.{i}.col")))
        if "chain_pairs" in exp:
            cp = exp["chain_pairs"]
            origin = list(cp["origin"])
            axis = cp.get("axis", 0)
            if axis >= len(origin):
                raise ConfigInvalid("experiment.chain_pairs.axis: exceeds the dimension")
            col = self._state_index(enum, {"site": origin}, "experiment.chain_pairs.origin")
            for d in cp["distances"]:
                site = list(origin)
                site[axis] += d
                out.append((self._state_index(enum, {"site": site}, "experiment.chain_pairs"), col))
        return out

    def energies(self) -> list[complex]:
        return [complex(re, im) for re, im in self.experiment.get("energies", [[0.25, 1e-3]])]

    def selector(self) -> Selector | None:
        spec = self.experiment.get("selector")
        if spec is None:
            return None
        if spec == "full":
            return Full()
        kind = spec["kind"]
        if kind == "positions":
            return Positions(spec.get("sites", []))
        if "k" not in spec:
            raise ConfigInvalid(f"experiment.selector: {kind} needs k")
        return BandIn(spec["k"]) if kind == "band_in" else BandOut(spec["k"])

    def times(self) -> np.ndarray:
        t = self.experiment.get("times", {"t_max": 50.0, "n": 64})
        return np.linspace(0.0, float(t["t_max"]), int(t["n"]))

    def output(self) -> tuple[str, str]:
        o = self.doc.get("output", {})
        return o.get("dir", "."), o.get("prefix", self.kind)

    def get(self, key: str, default: Any = None) -> Any:
        return self.experiment.get(key, default)
