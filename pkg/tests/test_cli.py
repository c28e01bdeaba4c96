import json
import subprocess
import sys

import numpy as np
import pytest

from hodl.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from hodl.config import ConfigError, ExperimentConfig, build_problem
from hodl.hypergrad import phi_k
from hodl.inner import SolverConfig
from hodl.outer import OuterRow, OuterTrace
from hodl.report import HEADER, emit_metrics, read_metrics, render_metrics

QUAD = {
    "problem": {"kind": "quadratic", "dim": 5, "seed": 3},
    "solver": {"mode": "simplified", "K": 30, "T": 1, "gamma": 0.0},
}


def write_cfg(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def data_lines(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


def test_single_step_matches_direct_phi(tmp_path):
    cfg_path = write_cfg(tmp_path, QUAD)
    out = tmp_path / "m.csv"
    assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
    _, rows = read_metrics(out)
    assert len(rows) == 1
    cfg = ExperimentConfig.from_dict(QUAD)
    p = build_problem(cfg.problem)
    direct = phi_k(p.operator, p.loss, p.omega_init, p.u_init, cfg.solver)
    assert rows[0]["phi_K"] == "%.17g" % direct
    assert float(rows[0]["phi_K"]) == direct


def test_header_verbatim(tmp_path):
    out = tmp_path / "m.csv"
    main(["run", "--config", str(write_cfg(tmp_path, QUAD)), "--out", str(out), "--no-timing"])
    assert data_lines(out)[0] == "outer_iter,phi_K,hypergrad_g_norm,fp_residual_g_lb,inner_K,wall_ms"
    assert HEADER == data_lines(out)[0]


def test_byte_identical_reruns(tmp_path):
    data = {"problem": {"kind": "sparse_coding", "m": 20, "n": 10, "n_samples": 2},
            "solver": {"K": 10, "T": 5, "gamma": 0.01, "outer_update": "adaptive_moments"}}
    cfg = write_cfg(tmp_path, data)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert main(["run", "--config", str(cfg), "--out", str(out), "--no-timing", "--seed", "7"]) == 0
    assert a.read_bytes() == b.read_bytes()
    prov, rows = read_metrics(a)
    assert prov["seed"] == "7" and len(rows) == 5
    assert all(r["wall_ms"] == "0" for r in rows)
    main(["run", "--config", str(cfg), "--out", str(b), "--no-timing", "--seed", "8"])
    assert a.read_bytes() != b.read_bytes()


def test_invalid_mu_writes_nothing(tmp_path, capsys):
    data = json.loads(json.dumps(QUAD))
    data["solver"]["mu"] = 1.5
    out = tmp_path / "m.csv"
    assert main(["run", "--config", str(write_cfg(tmp_path, data)), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()
    assert "mu" in capsys.readouterr().err


def test_unknown_key_status(tmp_path):
    data = dict(QUAD, extra=1)
    assert main(["run", "--config", str(write_cfg(tmp_path, data))]) == EXIT_CONFIG


def test_missing_config(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == EXIT_IO


def test_unwritable_output(tmp_path):
    out = tmp_path / "no_dir" / "m.csv"
    assert main(["run", "--config", str(write_cfg(tmp_path, QUAD)), "--out", str(out)]) == EXIT_IO


def test_numeric_blowup(tmp_path):
    data = {"problem": {"kind": "quadratic", "dim": 3, "eta": 50.0},
            "solver": {"mode": "simplified", "K": 400, "T": 1}}
    with np.errstate(all="ignore"):
        assert main(["run", "--config", str(write_cfg(tmp_path, data)), "--out",
                     str(tmp_path / "m.csv")]) == EXIT_NUMERIC


def test_empty_trace():
    text = render_metrics(OuterTrace())
    lines = text.splitlines()
    assert lines[-1] == HEADER
    assert all(ln.startswith("#") for ln in lines[:-1])


def test_single_row(tmp_path):
    tr = OuterTrace(rows=[OuterRow(1, 0.1, 2.0, 1e-3, 50, 0.0)])
    p = emit_metrics(tr, tmp_path / "x.csv")
    rows = data_lines(p)[1:]
    assert len(rows) == 1 and len(rows[0].split(",")) == 6
    assert rows[0] == "1,0.10000000000000001,2,0.001,50,0"
    first = p.read_bytes()
    emit_metrics(tr, p)
    assert p.read_bytes() == first


def test_inner_residual_file(tmp_path):
    data = dict(QUAD, report={"per_inner_residuals": True})
    data["solver"] = dict(QUAD["solver"], T=2)
    out = tmp_path / "m.csv"
    assert main(["run", "--config", str(write_cfg(tmp_path, data)), "--out", str(out)]) == 0
    lines = (tmp_path / "m.inner.csv").read_text().splitlines()
    assert lines[0] == "outer_iter,k,fp_residual_g_lb" and len(lines) == 1 + 2 * 31


class TestConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig.from_dict({
            "problem": {"kind": "hypercleaning", "d": 3, "n_train": 10},
            "solver": {"mu": 0.2, "u_box": {"lo": -1.0, "hi": 1.0}},
            "sweep": {"mu_values": [0.0, 0.5]},
            "report": {"per_inner_residuals": True},
        })
        again = ExperimentConfig.from_json(cfg.to_json())
        assert again.to_dict() == cfg.to_dict()
        assert again.digest() == cfg.digest()

    @pytest.mark.parametrize("data", [
        {"problem": {"kind": "quadratic", "dims": 3}},
        {"problem": {"kind": "quadratic"}, "solver": {"learning_rate": 1}},
        {"problem": {"kind": "quadratic"}, "sweep": {"alpha_values": [0.1]}},
        {"problem": {"kind": "quadratic"}, "report": {"plots": True}},
        {"problem": {"kind": "unknown"}},
        {"solver": {}},
    ])
    def test_rejects(self, data):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(data)

    def test_shipped_configs_parse(self):
        from pathlib import Path
        for path in sorted((Path(__file__).parent.parent / "configs").glob("*.json")):
            ExperimentConfig.from_json(path.read_text())


def test_ablate_mu(tmp_path):
    data = {"problem": {"kind": "sparse_coding", "m": 20, "n": 10},
            "solver": {"K": 5, "T": 2}, "sweep": {"mu_values": [0.0, 0.3]}}
    out = tmp_path / "abl.csv"
    assert main(["ablate-mu", "--config", str(write_cfg(tmp_path, data)), "--out", str(out), "--no-timing"]) == 0
    a, b = tmp_path / "abl_mu0.csv", tmp_path / "abl_mu0.3.csv"
    assert a.exists() and b.exists() and a.read_bytes() != b.read_bytes()
    assert main(["ablate-mu", "--config", str(write_cfg(tmp_path, data)), "--mu", "1.2"]) == EXIT_CONFIG


def test_ablate_sn(tmp_path):
    data = {"problem": {"kind": "sparse_coding", "m": 20, "n": 10, "with_net": True, "net_layers": 1,
                        "net_init": "random", "net_scale": 3.0},
            "solver": {"K": 5, "T": 2, "gamma": 0.001}}
    out = tmp_path / "sn.csv"
    assert main(["ablate-sn", "--config", str(write_cfg(tmp_path, data)), "--out", str(out)]) == 0
    assert (tmp_path / "sn_sn_on.csv").exists() and (tmp_path / "sn_sn_off.csv").exists()


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--n-seeds", "1"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert sum("True" in ln for ln in lines) == 4


def test_module_entry_point(tmp_path):
    cfg = write_cfg(tmp_path, QUAD)
    proc = subprocess.run([sys.executable, "-m", "hodl", "run", "--config", str(cfg), "--out",
                           str(tmp_path / "m.csv"), "--no-timing"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
