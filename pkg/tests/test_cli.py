from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from oracles import sum_planes_loop
from spdrecon import cli
from spdrecon.cli import EXIT_CONFIG, EXIT_DOMAIN, EXIT_IO, EXIT_OK, PipelineConfig, main
from spdrecon.errors import ConfigError
from spdrecon.video_io import BitPlaneStream, read_image_sequence, write_bit_planes

PAN = {"synthetic": "pan", "shape": [32, 32], "velocity": [2, 0], "seed": 1, "name": "pan"}
EDGE = {"synthetic": "edge", "shape": [32, 32], "speed": 2.0, "name": "edge"}


def _write(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(data))
    return path


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    cfg = _write(root / "cfg.json", {"clips": [PAN], "ppp": [3.25], "seed": 7})
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "out")]) == EXIT_OK
    return root / "out"


# ---------------------------------------------------------------- config


def test_config_defaults_and_sorting():
    cfg = PipelineConfig(ppp=[26, 3.25, 9.75])
    assert cfg.ppp == [3.25, 9.75, 26.0]
    assert cfg.frames == 11 and list(cfg.methods) == ["average", "align-merge", "qudi"]


@pytest.mark.parametrize(
    "kw",
    [{"ppp": [0]}, {"ppp": ["x"]}, {"frames": 0}, {"reference_index": 11}, {"methods": ["magic"]}, {"seed": -1}],
)
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        PipelineConfig(**kw)


def test_unknown_preset_lists_available():
    with pytest.raises(ConfigError, match="paper-spd"):
        PipelineConfig(sensor="no-such-sensor")


def test_inline_sensor_params():
    cfg = PipelineConfig(sensor={"qe": 0.5, "dark_current": 0, "read_noise_sigma": 0, "n_bits": 4, "fwc": 15})
    assert cfg.sensor_params().max_value == 15


# -------------------------------------------------------------- simulate


def test_simulate_writes_bursts_and_manifest(simulated):
    clip = read_image_sequence(simulated / "ppp_3.25", cli.BURST_PATTERN, normalize=False)
    assert clip.frames.shape == (11, 32, 32)
    assert clip.frames.max() <= 7
    manifest = json.loads((simulated / "manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["config"]["seed"] == 7
    assert manifest["sensor_params"]["n_bits"] == 3
    assert (simulated / "ppp_3.25" / "truth.npy").exists()


def test_simulate_rerun_from_manifest_is_byte_identical(simulated, tmp_path):
    assert main(["simulate", "--config", str(simulated / "manifest.json"), "--out", str(tmp_path)]) == EXIT_OK
    assert _tree(tmp_path) == _tree(simulated)


def test_simulate_seed_changes_output(simulated, tmp_path):
    main(["simulate", "--config", str(simulated / "manifest.json"), "--seed", "8", "--out", str(tmp_path)])
    a = (simulated / "ppp_3.25" / "frame_0000.pgm").read_bytes()
    assert (tmp_path / "ppp_3.25" / "frame_0000.pgm").read_bytes() != a


def test_simulate_without_seed_records_generated_one(tmp_path):
    cfg = _write(tmp_path / "c.json", {"clips": [EDGE], "ppp": [3.25], "frames": 3, "reference_index": 1})
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    seed = json.loads((tmp_path / "o" / "manifest.json").read_text())["config"]["seed"]
    assert isinstance(seed, int) and 0 <= seed < 2**64


def test_unknown_preset_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", {"sensor": "nope", "clips": [PAN]})
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "nope" in err and "paper-spd" in err and "spad-1bit" in err


def test_bad_json_and_missing_file_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_short_clip_is_domain_error(tmp_path):
    src = tmp_path / "clip"
    main(["simulate", "--config", str(_write(tmp_path / "a.json", {"clips": [EDGE], "frames": 3, "reference_index": 0,
                                                                  "ppp": [3.25], "seed": 1})), "--out", str(src)])
    cfg = _write(tmp_path / "b.json", {"clips": [str(src / "ppp_3.25")], "frames": 11, "seed": 1})
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_DOMAIN


# ----------------------------------------------------------- reconstruct


@pytest.fixture(scope="module")
def reconstructed(simulated, tmp_path_factory):
    out = tmp_path_factory.mktemp("rec")
    cfg = _write(out.parent / "rec.json", {"input": str(simulated), "seed": 3, "methods": {
        "average": {}, "align-merge": {}, "qudi": {"total_steps": 10}}})
    assert main(["reconstruct", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    return out


def test_reconstruct_outputs(reconstructed):
    qudi = np.load(reconstructed / "ppp_3.25" / "qudi" / "restored.npy")
    assert qudi.shape == (11, 32, 32)
    assert len(list((reconstructed / "ppp_3.25" / "qudi").glob("frame_*.pgm"))) == 11
    avg = np.load(reconstructed / "ppp_3.25" / "average" / "restored.npy")
    assert avg.shape == (1, 32, 32)


def test_reconstruct_metrics_rows(reconstructed):
    rows = list(csv.DictReader((reconstructed / "metrics.csv").open()))
    assert [r["method"] for r in rows] == ["average", "align-merge", "qudi"]
    assert {r["ppp"] for r in rows} == {"3.25"} and {r["frame"] for r in rows} == {"5"}
    report = json.loads((reconstructed / "metrics.json").read_text())
    assert len(report["rows"]) == 3
    for r in report["rows"]:
        assert np.isfinite(r["psnr"]) and -1 <= r["ssim"] <= 1


def test_reconstruct_rerun_is_byte_identical(reconstructed, tmp_path):
    assert main(["reconstruct", "--config", str(reconstructed / "manifest.json"), "--out", str(tmp_path)]) == EXIT_OK
    assert _tree(tmp_path) == _tree(reconstructed)


def test_reconstruct_missing_truth(simulated, tmp_path, capsys):
    src = tmp_path / "sim"
    for p in simulated.rglob("*"):
        if p.is_file() and p.name != "truth.npy":
            dst = src / p.relative_to(simulated)
            dst.parent.mkdir(parents=True, exist_ok=True)
            dst.write_bytes(p.read_bytes())
    args = ["reconstruct", "--input", str(src), "--seed", "1", "--out", str(tmp_path / "o")]
    cfg = _write(tmp_path / "avg.json", {"methods": ["average"]})
    assert main(args + ["--config", str(cfg)]) == EXIT_CONFIG
    assert "truth" in capsys.readouterr().err
    cfg = _write(tmp_path / "avg2.json", {"methods": ["average"], "metrics": False})
    assert main(args + ["--config", str(cfg)]) == EXIT_OK
    assert not (tmp_path / "o" / "metrics.csv").exists()


def test_reconstruct_debug_steps(simulated, tmp_path):
    cfg = _write(tmp_path / "q.json", {"methods": {"qudi": {"total_steps": 2}}, "metrics": False})
    args = ["reconstruct", "--config", str(cfg), "--input", str(simulated), "--seed", "1", "--out", str(tmp_path / "o")]
    assert main(args + ["--debug-steps"]) == EXIT_OK
    steps = json.loads((tmp_path / "o" / "ppp_3.25" / "qudi" / "steps" / "steps.json").read_text())
    assert [s["t"] for s in steps] == [2, 1]
    assert all(np.isfinite(s["forward_consistency"]) for s in steps)


def test_reconstruct_missing_input_dir(tmp_path):
    args = ["reconstruct", "--input", str(tmp_path / "nothing"), "--seed", "1", "--out", str(tmp_path / "o")]
    assert main(args) == EXIT_IO


# ----------------------------------------------------------------- sweep


SWEEP = {
    "clips": [PAN, EDGE],
    "ppp": [26, 3.25, 9.75],
    "frames": 3,
    "reference_index": 1,
    "seed": 5,
    "methods": {"average": {}, "align-merge": {}, "qudi": {"total_steps": 2}},
}


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    assert main(["sweep", "--config", str(_write(out.parent / "sw.json", SWEEP)), "--out", str(out)]) == EXIT_OK
    return out


def test_sweep_cells_and_order(swept):
    rows = list(csv.DictReader((swept / "sweep.csv").open()))
    assert len(rows) == 18
    assert all(r["error"] == "" for r in rows)
    assert [float(r["ppp"]) for r in rows[:9:3]] == [3.25, 9.75, 26.0]
    table = (swept / "table.txt").read_text().splitlines()
    assert table[0].split() == ["method", "PPP", "3.25", "PPP", "9.75", "PPP", "26"]
    assert [line.split()[0] for line in table[2:5]] == ["average", "align-merge", "qudi"]


def test_sweep_rerun_identical_and_parallel(swept, tmp_path, monkeypatch):
    assert main(["sweep", "--config", str(swept / "manifest.json"), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert (tmp_path / "a" / "table.txt").read_bytes() == (swept / "table.txt").read_bytes()
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (swept / "sweep.csv").read_bytes()
    monkeypatch.setenv(cli.WORKERS_ENV, "2")
    assert main(["sweep", "--config", str(swept / "manifest.json"), "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "b" / "sweep.csv").read_bytes() == (swept / "sweep.csv").read_bytes()


def test_sweep_records_failed_cell(tmp_path, capsys):
    cfg = dict(SWEEP, clips=[PAN, {"synthetic": "spiral", "name": "bad"}], ppp=[3.25], methods=["average"])
    assert main(["sweep", "--config", str(_write(tmp_path / "c.json", cfg)), "--out", str(tmp_path / "o")]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "o" / "sweep.csv").open()))
    assert [r["clip"] for r in rows] == ["pan", "bad"]
    assert rows[0]["error"] == "" and "spiral" in rows[1]["error"]
    assert rows[1]["psnr"] == "nan"


def test_workers_env_validation(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "zero")
    cfg = _write(tmp_path / "c.json", SWEEP)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    monkeypatch.delenv(cli.WORKERS_ENV)
    assert main(["sweep", "--config", str(cfg), "--workers", "0", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


# ----------------------------------------------------------- bit planes


def test_sum_bitplanes_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    planes = rng.random((14, 240, 320)) < 0.4
    write_bit_planes(tmp_path / "s.qbps", BitPlaneStream(planes))
    assert main(["sum-bitplanes", str(tmp_path / "s.qbps"), "--out", str(tmp_path / "o")]) == EXIT_OK
    clip = read_image_sequence(tmp_path / "o", cli.BURST_PATTERN, normalize=False)
    assert clip.frames.shape == (2, 240, 320)
    assert clip.frames.max() <= 7
    np.testing.assert_array_equal(clip.frames, sum_planes_loop(planes, 7))
    expected = float(sum_planes_loop(planes, 7).mean())
    assert f"measured PPP {expected:.4f}" in capsys.readouterr().out
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["measured_ppp"] == pytest.approx(expected)


def test_sum_bitplanes_bad_file(tmp_path):
    (tmp_path / "x.qbps").write_bytes(b"JUNKJUNKJUNKJUNK")
    assert main(["sum-bitplanes", str(tmp_path / "x.qbps"), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_module_entry_point_help(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "simulate" in capsys.readouterr().out
