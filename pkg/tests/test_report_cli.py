import json
import math

import numpy as np
import pytest

from latentprior import __version__
from latentprior.cli import main
from latentprior.config import ConfigError, RunConfig, parse_config
from latentprior.data import paper_target, rasterize
from latentprior.heat import read_field
from latentprior.report import Manifest, ManifestError, OutputLock, boundary_band, error_metrics, export_pgm, write_csv

TINY = """
[grid]
n = 8
[data]
count = 40
[train]
generator_hidden = 8, 16
critic_hidden = 16, 8
iterations = 3
batch_size = 8
critic_steps = 2
[inference]
restarts = 2
n_samp = 300
chain_length = 300
burn_in = 100
thin = 2
"""


def read_pgm(path):
    parts = path.read_bytes().split(b"\n", 3)
    assert parts[0] == b"P5" and parts[2] == b"255"
    cols, rows = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(rows, cols)


# -- PGM -------------------------------------------------------------------------


def test_pgm_fixed_range_endpoints_and_midpoint(tmp_path):
    export_pgm(np.array([[0.0, 12.0], [6.0, 20.0]]), tmp_path / "a.pgm")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[0, 255], [128, 255]])


def test_pgm_clamps_below_range(tmp_path):
    export_pgm(np.array([[-3.0, 1.0]]).reshape(1, 2), tmp_path / "a.pgm")
    assert read_pgm(tmp_path / "a.pgm")[0, 0] == 0


def test_pgm_per_image(tmp_path):
    export_pgm(np.full((3, 3), 4.2), tmp_path / "c.pgm", "per-image")
    assert not read_pgm(tmp_path / "c.pgm").any()
    export_pgm(np.array([[1.0, 2.0], [3.0, 5.0]]), tmp_path / "d.pgm", "per-image")
    np.testing.assert_array_equal(read_pgm(tmp_path / "d.pgm"), [[0, 64], [128, 255]])


def test_pgm_header_and_errors(tmp_path):
    export_pgm(np.zeros((2, 3)), tmp_path / "r.pgm")
    assert (tmp_path / "r.pgm").read_bytes().startswith(b"P5\n3 2\n255\n")
    with pytest.raises(ValueError):
        export_pgm(np.array([[np.nan]]), tmp_path / "n.pgm")
    with pytest.raises(ValueError):
        export_pgm(np.zeros((2, 2)), tmp_path / "n.pgm", "log")


# -- metrics -----------------------------------------------------------------------


def test_metrics_of_exact_and_zero_estimates():
    truth = rasterize(paper_target(), 16)
    m = error_metrics(truth, truth)
    assert m == {"rel_l2": 0.0, "max_abs": 0.0, "band_rms": 0.0}
    assert error_metrics(np.zeros_like(truth), truth)["rel_l2"] == 1.0
    with pytest.raises(ValueError):
        error_metrics(truth, np.zeros_like(truth))


def test_metrics_constant_offset_against_direct_loop():
    truth = rasterize(paper_target(), 16)
    norm = math.sqrt(sum(v * v for v in truth.ravel()))
    m = error_metrics(truth + 1.0, truth)
    assert m["rel_l2"] == pytest.approx(16 / norm, rel=1e-14)
    assert m["max_abs"] == 1.0 and m["band_rms"] == 1.0


def band_oracle(support, width):
    """Pixels with an opposite-membership pixel within Manhattan distance ``width`` (outside the grid counts as off)."""
    n, m = support.shape
    out = np.zeros_like(support)
    for i in range(n):
        for j in range(m):
            for di in range(-width, width + 1):
                for dj in range(-width + abs(di), width - abs(di) + 1):
                    a, b = i + di, j + dj
                    other = support[a, b] if 0 <= a < n and 0 <= b < m else False
                    out[i, j] |= other != support[i, j]
    return out


@pytest.mark.parametrize("seed", range(4))
def test_boundary_band_against_brute_force(seed):
    rng = np.random.default_rng(seed)
    s = np.zeros((16, 16), bool)
    r0, c0 = rng.integers(0, 8, size=2)
    s[r0 : r0 + rng.integers(3, 9), c0 : c0 + rng.integers(3, 9)] = True
    np.testing.assert_array_equal(boundary_band(s, 2), band_oracle(s, 2))


def test_csv_is_rfc4180(tmp_path):
    write_csv(tmp_path / "x.csv", ["a", "b,c"], [[1, 0.1], ["q\"t", 2.5]])
    assert (tmp_path / "x.csv").read_bytes() == b'a,"b,c"\r\n1,0.1\r\n"q""t",2.5\r\n'


# -- manifest and lock -----------------------------------------------------------


def test_manifest_round_trip_and_check(tmp_path):
    m = Manifest(tmp_path)
    (tmp_path / "a.gpf").write_bytes(b"x")
    m.add(tmp_path / "a.gpf", command="eigen", config_hash="abc", seed=3)
    m.save()
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert data["version"] == f"v{__version__}"
    assert data["files"]["a.gpf"] == {"command": "eigen", "config_hash": "abc", "seed": 3}
    Manifest(tmp_path).check()
    (tmp_path / "a.gpf").unlink()
    with pytest.raises(ManifestError, match="a.gpf"):
        Manifest(tmp_path).check()


def test_output_lock_is_exclusive(tmp_path):
    with OutputLock(tmp_path):
        with pytest.raises(ManifestError, match="locked"):
            with OutputLock(tmp_path):
                pass
    assert not (tmp_path / ".lpb.lock").exists()


# -- config ------------------------------------------------------------------------


def test_config_defaults_round_trip():
    cfg = RunConfig()
    assert parse_config(cfg.to_text()).values == cfg.values
    assert cfg["grid"]["n"] == 16 and cfg["train"]["learning_rate"] == 1e-4
    assert len(cfg["inference"]["alpha_grid"]) == 10


@pytest.mark.parametrize("text", [
    "[grid]\nwidth = 3\n",
    "[mystery]\nx = 1\n",
    "[grid]\nn = sixteen\n",
    "[grid]\nn = 2\n",
    "[data]\ntarget = disk\n",
    "[train]\nbatch_size = 1\n",
    "not an ini file",
])
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_hash_tracks_values():
    a = parse_config("[grid]\nn = 8\n")
    assert a.hash == parse_config("[grid]\nn = 8\n").hash != RunConfig().hash


# -- CLI ---------------------------------------------------------------------------


@pytest.fixture
def workspace(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    out = tmp_path / "out"

    def run(*args):
        return main([*args, "--config", str(cfg), "--out", str(out)])

    return run, out


def test_print_defaults(capsys):
    assert main(["config", "--print-defaults"]) == 0
    text = capsys.readouterr().out
    assert "[grid]" in text and "n = 16" in text
    assert parse_config(text).values == RunConfig().values


def test_unknown_config_key_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[grid]\nwidth = 4\n")
    assert main(["eigen", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "error: config:" in capsys.readouterr().err


def test_missing_artifact_exit_code(workspace, capsys):
    run, _ = workspace
    assert run("infer", "map") == 3
    assert "error: missing-artifact:" in capsys.readouterr().err


def test_bad_seed_is_rejected(workspace):
    run, _ = workspace
    with pytest.raises(SystemExit):
        run("eigen", "--seed", "-4")


def test_eigen_spectrum_decreases(tmp_path):
    out = tmp_path / "e"
    assert main(["eigen", "--n", "32", "--out", str(out)]) == 0
    rows = (out / "spectrum.csv").read_text().splitlines()
    assert rows[0] == "mode_index,eigenvalue" and len(rows) == 1 + 32 * 32
    vals = np.array([float(r.split(",")[1]) for r in rows[1:]])
    assert np.all(np.diff(vals) <= 0) and vals[0] > 0.7


def test_full_pipeline(workspace):
    run, out = workspace
    assert run("gen-data") == 0
    assert read_field(out / "observed.gpf").shape == (8, 8)
    assert run("train") == 0
    assert run("sample", "--count", "4") == 0
    assert len(list((out / "samples").glob("*.pgm"))) == 4
    assert run("infer", "map") == 0
    first = (out / "map_field.gpf").read_bytes()
    assert run("infer", "map") == 0
    assert (out / "map_field.gpf").read_bytes() == first
    assert run("infer", "mc") == 0
    assert run("infer", "mcmc") == 0
    assert run("baseline", "l2") == 0
    assert run("baseline", "h1", "--tune") == 0
    assert run("report") == 0
    rows = (out / "error_metrics.csv").read_text().splitlines()
    names = {r.split(",")[0] for r in rows[1:]}
    assert {"map_field", "mc_mean", "mcmc_mean", "baseline_l2", "baseline_h1"} <= names
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["files"]["map_field.gpf"]["seed"] == 0
    assert "baseline_h1.pgm" in manifest["files"]
    Manifest(out).check()
    assert not (out / ".lpb.lock").exists()


def test_report_refuses_dangling_manifest(workspace, capsys):
    run, out = workspace
    assert run("eigen") == 0
    (out / "spectrum.csv").unlink()
    assert run("report") == 6
    assert "error: manifest:" in capsys.readouterr().err


def test_locked_output_directory(workspace):
    run, out = workspace
    out.mkdir()
    (out / ".lpb.lock").write_text("123")
    assert run("eigen") == 6
