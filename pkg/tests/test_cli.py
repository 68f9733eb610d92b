import numpy as np
import pytest

import sevis.harness as harness
from sevis.cli import load_config, main, sim_config


def write_config(tmp_path, text):
    path = tmp_path / "cfg.yaml"
    path.write_text(text)
    return str(path)


SMALL = """
sim:
  duration: 2.0
modes: [vio, sevis]
bench:
  map_sizes: [20, 40, 80]
  repeats: 1
"""


def test_config_sections_and_keys(tmp_path):
    cfg = load_config(write_config(tmp_path, SMALL + "estimator:\n  max_update_rows: 20\n"))
    assert sim_config(cfg, 5).duration == 2.0 and sim_config(cfg, 5).seed == 5
    with pytest.raises(ValueError):
        load_config(write_config(tmp_path, "sim:\n  bogus: 1\n"))
    with pytest.raises(ValueError):
        load_config(write_config(tmp_path, "extra: {}\n"))


def test_bad_config_exit_code(tmp_path, capsys):
    assert main(["check", "--config", write_config(tmp_path, "sim:\n  bogus: 1\n")]) == 2
    assert "config error" in capsys.readouterr().err


def test_check_command(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 5 and all(line.startswith("PASS") for line in out)


def test_montecarlo_outputs_and_determinism(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL)
    for d in ("a", "b"):
        code = main(["montecarlo", "--config", cfg, "--runs", "2", "--seed", "3", "--workers", "1",
                     "--out-dir", str(tmp_path / d)])
        assert code == 0
    out = capsys.readouterr().out
    assert "vio: runs=2 aborted=0" in out and "sevis: runs=2 aborted=0" in out
    for name in ("rsse_vio.csv", "rsse_sevis.csv", "summary.txt", "runs/sevis_run001.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rsse = np.loadtxt(tmp_path / "a" / "rsse_vio.csv", delimiter=",", skiprows=1)
    assert rsse.shape == (10, 3) and np.all(rsse[:, 1:] >= 0)


def test_montecarlo_aborted_run_gives_nonzero_exit(tmp_path, monkeypatch, capsys):
    real = harness.min_eig_ratio
    calls = {"n": 0}

    def flaky(cov):
        calls["n"] += 1
        return -1.0 if calls["n"] == 1 else real(cov)

    monkeypatch.setattr(harness, "min_eig_ratio", flaky)
    code = main(["montecarlo", "--config", write_config(tmp_path, SMALL), "--runs", "1", "--mode", "vio",
                 "--workers", "1", "--out-dir", str(tmp_path / "o")])
    assert code == 1
    assert "ABORTED vio run 0" in capsys.readouterr().err


def test_single_writes_run_timing_and_truth(tmp_path, capsys):
    code = main(["single", "--config", write_config(tmp_path, SMALL), "--mode", "sevis", "--seed", "2",
                 "--out-dir", str(tmp_path)])
    assert code == 0
    for name in ("sevis_seed2.csv", "sevis_seed2_timing.csv", "truth_seed2.csv"):
        assert (tmp_path / name).exists()
    assert "sevis seed 2" in capsys.readouterr().out


def test_bench_writes_csv(tmp_path, capsys):
    assert main(["bench", "--config", write_config(tmp_path, SMALL), "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "bench_timing.csv").read_text().startswith("mode,n_map")
    assert "log-log update slope" in capsys.readouterr().out
