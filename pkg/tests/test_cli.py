import csv
import json

import numpy as np
import pytest

from microtrap import reproduce as R
from microtrap.cli import ConfigError, config_hash, load_config, main


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    return rows[0], rows[1:]


def table(path):
    _, rows = read_csv(path)
    return {k: v for k, v in rows}


def write_config(tmp_path, cfg, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "microtrap" in capsys.readouterr().out


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path, {"drive": {"V0": 8.0}})
    assert main(["circuit", "--config", cfg, "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "V0" in err and "drive" in err


def test_bad_json_exit_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["circuit", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_bad_geometry_exit_2(tmp_path):
    cfg = write_config(tmp_path, {"geometry": {"g_m": 0.0}})
    assert main(["circuit", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_load_config_defaults_and_overrides():
    cfg = load_config(grid="high", seed=9)
    assert cfg["grid"]["spacing_m"] == 1e-6 and cfg["rng_seed"] == 9
    assert cfg["drive"]["V0_V"] == 8.0
    assert config_hash(cfg) != config_hash(load_config())
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.json")


def test_solve_cache_hit(paper_run):
    out = str(paper_run.out)
    key_dirs = list((paper_run.out / "bases").iterdir())
    assert len(key_dirs) == 1
    report = key_dirs[0] / "report.json"
    before = report.stat().st_mtime_ns
    assert main(["solve", "--out", out]) == 0
    assert report.stat().st_mtime_ns == before
    assert len(list(key_dirs[0].glob("basis_*.grid"))) == 16
    head, rows = read_csv(paper_run.out / "solve_report.csv")
    assert head == ["electrode", "label", "iterations", "residual"] and len(rows) == 16


def test_analyze_paper(paper_run, capsys):
    assert main(["analyze", "--out", str(paper_run.out)]) == 0
    head, rows = read_csv(paper_run.out / "comparison.csv")
    names = [r[0] for r in rows]
    assert names == ["f_axial_Hz", "f_transverse1_Hz", "f_transverse2_Hz", "q", "axis_tilt_deg",
                     "depth_eV", "escape_tilt_deg"]
    assert all(r[-1] == "1" for r in rows)
    assert "published" in capsys.readouterr().out


def test_analyze_untrapped(paper_run, tmp_path, capsys):
    cfg = write_config(tmp_path, {"drive": {"V0_V": 0.0}})
    assert main(["analyze", "--config", cfg, "--out", str(paper_run.out)]) == 1
    assert "untrapped" in capsys.readouterr().err


def test_analyze_flags_unstable(paper_run, tmp_path, capsys):
    cfg = write_config(tmp_path, {"drive": {"V0_V": 12.5}, "analysis": {"depth": False}})
    assert main(["analyze", "--config", cfg, "--out", str(paper_run.out)]) == 0
    assert "unstable" in capsys.readouterr().out


def test_heat_deterministic(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for d, seed in ((a, "3"), (b, "3"), (c, "4")):
        assert main(["heat", "--out", str(d), "--seed", seed]) == 0

    def body(p):
        return [line for line in p.read_text().splitlines() if not line.startswith("# created")]

    for name in ("raman_dataset.csv", "heating.csv", "heating_summary.csv"):
        assert body(a / name) == body(b / name)
    assert body(a / "raman_dataset.csv") != body(c / "raman_dataset.csv")
    rate = float(table(a / "heating_summary.csv")["fitted_rate_per_s"])
    assert 0.5e6 <= rate <= 2.0e6
    header = (a / "heating.csv").read_text().splitlines()[:4]
    assert header[0].startswith("# microtrap") and "config_sha256" in header[1] and "rng_seed: 3" in header[2]


def test_circuit(tmp_path):
    assert main(["circuit", "--out", str(tmp_path)]) == 0
    t = table(tmp_path / "circuit.csv")
    assert float(t["Q"]) == pytest.approx(58.9, abs=0.05)
    assert float(t["P_D_measured_Q_W"]) == pytest.approx(1.98e-3, rel=0.01)
    assert float(t["C_self_F"]) == pytest.approx(3.1e-12, abs=0.05e-12)
    assert t["operating_point_ok"] == "1"


def test_scaling(tmp_path):
    cfg = write_config(tmp_path, {"scaling": {"D_ref_eV": 0.08}})
    assert main(["scaling", "--config", cfg, "--out", str(tmp_path)]) == 0
    head, rows = read_csv(tmp_path / "scaling.csv")
    s, D, I0 = (np.array([float(r[head.index(k)]) for r in rows]) for k in ("s_m", "D_eV", "I0_rel"))
    assert len(rows) == 15 and s.min() == pytest.approx(10e-6) and s.max() == pytest.approx(80e-6)
    assert np.all(np.diff(D) < 0)
    a, b = R.scaling_slopes(s, D, I0)
    assert a == pytest.approx(-0.44, abs=0.01) and b == pytest.approx(-2.2, abs=0.01)
    i60 = int(np.argmin(np.abs(s - 60e-6)))
    assert D[i60] == pytest.approx(0.08 * (s[i60] / 60e-6) ** -0.44)


def test_shuttle_identity(paper_run, tmp_path):
    cfg = write_config(tmp_path, {"shuttle": {"zone_b_m": [-77.5e-6, 0.0, 0.0], "n_samples": 11}})
    assert main(["shuttle", "--config", cfg, "--out", str(paper_run.out)]) == 0
    head, rows = read_csv(paper_run.out / "waveform.csv")
    v = np.array([[float(x) for x in r[1:]] for r in rows])
    assert v.shape == (11, 8)
    np.testing.assert_allclose(v, v[:1].repeat(11, axis=0), atol=1e-9)
    _, transport = read_csv(paper_run.out / "transport.csv")
    assert transport == []
