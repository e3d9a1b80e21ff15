import csv
import json
import subprocess
import sys

import pytest

from holstein_lab.cli import main, run
from holstein_lab.config import DEFAULTS, ExperimentConfig, apply_override, config_hash, validate
from holstein_lab.errors import ConfigInvalid
from holstein_lab.states import BasisEnumeration


def small(kind, **experiment):
    doc = json.loads(json.dumps(DEFAULTS))
    doc["region"] = {"extent": [6]}
    doc["truncation"] = {"k_max": 1}
    doc["experiment"] = {"kind": kind, **experiment}
    return doc


def summary(path):
    return json.loads(path.read_text())


# --- configuration ---------------------------------------------------------------


def test_defaults_validate():
    validate(DEFAULTS)
    cfg = ExperimentConfig.load(None)
    assert cfg.kind == "verify" and cfg.params().gap == pytest.approx(0.3)


@pytest.mark.parametrize("override,field", [
    ("model.omega=-1", "model.omega"),
    ("model.D=0", "model.D"),
    ("model.colour=1", "model"),
    ("experiment.kind=\"plot\"", "experiment.kind"),
    ("truncation.k_max=-1", "truncation.k_max"),
    ("region.extent=[4, 4]", "region.extent"),
])
def test_invalid_config_messages(override, field):
    with pytest.raises(ConfigInvalid) as exc:
        ExperimentConfig.load(None, [override])
    assert any(m.startswith(field) for m in exc.value.messages)


def test_override_parsing():
    doc = {"a": {"b": 1}}
    apply_override(doc, "a.c=[1, 2]")
    apply_override(doc, "a.d=plain text")
    apply_override(doc, "a.b=null")
    assert doc == {"a": {"c": [1, 2], "d": "plain text"}}
    with pytest.raises(ConfigInvalid):
        apply_override(doc, "novalue")


def test_config_hash_is_canonical():
    a = {"x": 1, "y": [1, 2]}
    assert config_hash(a) == config_hash({"y": [1, 2], "x": 1})
    assert config_hash(a) != config_hash({"x": 2, "y": [1, 2]})


def test_pair_selectors():
    doc = small("greens", pairs=[{"row": {"site": [2], "config": [[[2], 1]]}, "col": {"site": [0]}}],
                chain_pairs={"origin": [0], "distances": [1, 3]})
    cfg = ExperimentConfig.load(doc)
    enum = BasisEnumeration(cfg.region(), cfg.policy())
    pairs = cfg.pairs(enum)
    assert len(pairs) == 3
    assert str(enum.state(pairs[0][0])) == "x=[2] m={[2]:1}"
    with pytest.raises(ConfigInvalid):
        ExperimentConfig.load(small("greens", pairs=[{"row": {"site": [9]}, "col": {"site": [0]}}])
                              ).pairs(enum)


# --- exit codes ----------------------------------------------------------------------


def test_verify_defaults_pass(tmp_path):
    assert main(["verify", "-o", str(tmp_path)]) == 0
    out = summary(tmp_path / "verify.json")
    assert set(out) >= {"config_hash", "results", "timings", "diagnostics"}
    assert out["results"]["all_passed"]
    assert "total" in out["timings"] and out["diagnostics"]["basis_size"] == 8 * 45
    names = {r["name"] for r in csv.DictReader(open(tmp_path / "verify.csv", newline=""))}
    assert {"unitarity", "band_containment", "gri_band_out", "metric_axioms"} <= names


def test_negative_omega_exits_2(tmp_path, capsys):
    assert main(["verify", "-o", str(tmp_path), "--set", "model.omega=-1"]) == 2
    assert "model.omega" in capsys.readouterr().err
    assert not (tmp_path / "verify.json").exists()


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**DEFAULTS, "extra": 1}))
    assert main(["verify", "-c", str(cfg), "-o", str(tmp_path)]) == 2
    assert "extra" in capsys.readouterr().err


def test_unreadable_config_exits_2(tmp_path):
    assert main(["verify", "-c", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["verify", "-c", str(bad)]) == 2


def test_sign_flip_fails_band_containment(tmp_path, capsys):
    assert main(["verify", "-o", str(tmp_path), "--inject-sign-flip"]) == 3
    checks = {c["name"]: c for c in summary(tmp_path / "verify.json")["results"]["checks"]}
    assert not checks["band_containment"]["passed"]
    assert "band_containment" in capsys.readouterr().err


def test_tightened_tolerance_still_passes(tmp_path):
    assert main(["verify", "-o", str(tmp_path), "--tolerance", "1e-10",
                 "--identity-n-max", "10"]) == 0
    checks = summary(tmp_path / "verify.json")["results"]["checks"]
    sq = next(c for c in checks if c["name"] == "square_sum_identity")
    assert sq["tolerance"] == 1e-10 and sq["passed"]


def test_compute_error_exits_3_with_partial_summary(tmp_path):
    doc = small("ct-probe", pairs=[{"row": {"site": [0], "config": [[[0], 1]]},
                                    "col": {"site": [3], "config": [[[3], 1]]}}])
    doc["model"]["gamma"] = 0.2
    assert run(doc, out_dir=str(tmp_path)) == 3
    out = summary(tmp_path / "ct-probe.json")
    assert out["diagnostics"]["partial"] and "GapViolated" in out["diagnostics"]["error"]


def test_basis_too_large_exits_3(tmp_path):
    doc = small("basis-info")
    doc["truncation"] = {"k_max": 3, "max_states": 100}
    assert run(doc, out_dir=str(tmp_path)) == 3


# --- experiment kinds -----------------------------------------------------------------


def test_config_echo_round_trips(tmp_path):
    doc = small("basis-info")
    assert run(doc, out_dir=str(tmp_path)) == 0
    out = summary(tmp_path / "basis-info.json")
    echo = ExperimentConfig.load(out["config"])
    assert echo.doc == doc and out["config_hash"] == config_hash(doc)


def test_basis_info_with_dump_and_coo(tmp_path):
    doc = small("basis-info", dump_basis=True, export_coo=True)
    doc["output"] = {"prefix": "b"}
    assert run(doc, out_dir=str(tmp_path)) == 0
    out = summary(tmp_path / "b.json")
    assert out["results"]["size"] == 6 * 7 and out["results"]["shells"] == {"0": 6, "1": 36}
    lines = (tmp_path / "b_basis.txt").read_text().splitlines()
    assert lines[0] == "0\tN=0\tx=[0] m={}" and len(lines) == 42
    assert (tmp_path / "b_hamiltonian.coo").read_text().startswith("# dim 42")


def test_greens_output(tmp_path):
    doc = small("greens", chain_pairs={"origin": [0], "distances": [0, 1, 2]},
                energies=[[0.25, 1e-3], [0.3, 1e-2]])
    assert run(doc, out_dir=str(tmp_path)) == 0
    rows = list(csv.DictReader(open(tmp_path / "greens.csv", newline="")))
    assert len(rows) == 6
    assert {"position", "upsilon_plus_R_k", "d", "abs_G", "top_shell_weight"} <= set(rows[0])
    diag = summary(tmp_path / "greens.json")["diagnostics"]
    assert isinstance(diag["truncation_sensitive"], bool) and "leaked_weight" in diag


def test_sweep_then_fit(tmp_path):
    doc = small("sweep", chain_pairs={"origin": [0], "distances": [1, 2, 3, 4, 5]},
                realizations=20, bootstrap=50)
    assert run(doc, out_dir=str(tmp_path)) == 0
    out = summary(tmp_path / "sweep.json")
    assert out["results"]["fits"][0]["fit"]["rate"] > 0
    with open(tmp_path / "sweep.csv", newline="") as fh:
        text = fh.read()
    assert text.split("\r\n")[0] == "pair,row_state,col_state,z_re,z_im,s,statistic,value"
    fit_doc = small("fit", input=str(tmp_path / "sweep.csv"))
    assert run(fit_doc, out_dir=str(tmp_path)) == 0
    fits = summary(tmp_path / "fit.json")["results"]["fits"][0]
    assert fits["fits"]["position"]["rate"] > 0
    assert isinstance(fits["metric_fit_better"], bool)
    assert run(small("fit"), out_dir=str(tmp_path)) == 2


def test_correlator_output(tmp_path):
    doc = small("correlator", chain_pairs={"origin": [0], "distances": [1, 2, 3, 4, 5]},
                realizations=4, times={"t_max": 20.0, "n": 16})
    assert run(doc, out_dir=str(tmp_path)) == 0
    out = summary(tmp_path / "correlator.json")
    assert out["results"]["violations"] == 0


def test_ct_probe_output(tmp_path):
    doc = small("ct-probe", pairs=[{"row": {"site": [0], "config": [[[0], 1]]},
                                    "col": {"site": [x], "config": [[[x], 1]]}} for x in range(1, 6)],
                energies=[[0.25, 0.0]])
    doc["model"]["v_plus"] = 0.3
    doc["model"]["gamma"] = 0.02
    assert run(doc, out_dir=str(tmp_path)) == 0
    res = summary(tmp_path / "ct-probe.json")["results"]
    assert res["norm_within_inverse_distance"] and res["bound_rate"] > 0
    assert res["fit"]["rate"] > 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "holstein_lab.cli", "basis-info", "-o", str(tmp_path),
                           "--set", "region.extent=[3]"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert summary(tmp_path / "basis-info.json")["results"]["size"] == 3 * 10
