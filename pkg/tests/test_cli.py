import json

import pandas as pd
import pytest

from asir.cli import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUNTIME_ERROR, EXIT_VERIFY_FAILED, main
from asir.config import load_config
from asir.engine import RNG_ALGORITHM

from .conftest import UNIFORM3_TOML

PURE_RECOVERY_SIR = """
[sir]
alpha = 0.0
beta = 0.1
n = 30
s0 = 0
i0 = 30
horizon = 20
"""

DISEASE_FREE_SIR = """
[sir]
alpha = 0.4
beta = 0.1
n = 30
s0 = 30
i0 = 0
horizon = 10
"""


@pytest.fixture
def write_config(tmp_path):
    def write(text: str, name: str = "experiment.toml"):
        path = tmp_path / name
        path.write_text(text)
        return path

    return write


def run(mode: str, config, out, *extra) -> int:
    return main([mode, "--config", str(config), "--out", str(out), *extra])


class TestModes:
    def test_sir(self, write_config, tmp_path, capsys):
        out = tmp_path / "sir"
        assert run("sir", write_config(PURE_RECOVERY_SIR), out) == EXIT_OK
        euler = pd.read_csv(out / "sir_euler.csv")
        assert list(euler.columns) == ["t", "S", "I", "R"]
        assert len(euler) == 21
        assert euler["I"].iloc[1] == pytest.approx(27.0)
        assert (out / "sir_rk4.csv").exists()
        assert (out / "discretization_gap.csv").exists()
        assert "R0" in capsys.readouterr().out

    def test_stationary(self, write_config, tmp_path, capsys):
        out = tmp_path / "stationary"
        assert run("stationary", write_config(UNIFORM3_TOML), out) == EXIT_OK
        pi = pd.read_csv(out / "stationary.csv")
        assert pi["pi"].tolist() == pytest.approx([1 / 3] * 3, abs=1e-12)
        report = pd.read_csv(out / "ergodicity.csv").iloc[0]
        assert report["meetup_probability"] == pytest.approx(1 / 3, abs=1e-12)
        assert report["period"] == 1
        assert "P(meetup)" in capsys.readouterr().out

    def test_deduce_writes_runnable_config(self, write_config, tmp_path):
        out = tmp_path / "deduce"
        text = PURE_RECOVERY_SIR.replace("alpha = 0.0", "alpha = 0.3") + UNIFORM3_TOML
        text += "[output]\nwrite_config = true\n"
        assert run("deduce", write_config(text), out) == EXIT_OK
        bridge = pd.read_csv(out / "bridge.csv").iloc[0]
        assert bridge["alpha_prime"] == pytest.approx(0.3 / (30 / 3))

        generated = load_config(out / "asir.toml")
        assert generated.mode == "asir"
        asir = generated.asir_config()
        assert asir.alpha_prime == pytest.approx(0.03)
        assert asir.map.to_rows() == [[0.5, 0.3, 0.2], [0.3, 0.3, 0.4], [0.2, 0.4, 0.4]]
        assert run("asir", out / "asir.toml", tmp_path / "from_generated") == EXIT_OK

    def test_deduce_on_grid_writes_grid_block(self, write_config, tmp_path):
        out = tmp_path / "deduce_grid"
        text = DISEASE_FREE_SIR + "[map.grid]\nside = 3\n[output]\nwrite_config = true\n"
        assert run("deduce", write_config(text), out) == EXIT_OK
        generated = load_config(out / "asir.toml")
        assert generated.map.side == 3

    def test_asir_with_trace(self, write_config, tmp_path):
        out = tmp_path / "asir"
        text = PURE_RECOVERY_SIR + UNIFORM3_TOML + "[asir]\nreplicates = 3\n[output]\ntrace = true\n"
        assert run("asir", write_config(text), out) == EXIT_OK
        trajectories = pd.read_csv(out / "trajectories.csv")
        assert list(trajectories.columns) == [
            "replicate", "t", "S", "I", "R", "new_inf", "new_rec", "clamps",
        ]
        assert sorted(trajectories["replicate"].unique()) == [0, 1, 2]
        agents = pd.read_csv(out / "agents.csv")
        assert len(agents) == 3 * 21 * 30
        assert set(agents["health"]) <= {"S", "I", "R"}

    def test_verify_pass(self, write_config, tmp_path, capsys):
        out = tmp_path / "verify"
        text = DISEASE_FREE_SIR + UNIFORM3_TOML + "[ensemble]\nreplicates = 4\n"
        assert run("verify", write_config(text), out, "--workers", "1") == EXIT_OK
        summary = pd.read_csv(out / "summary.csv")
        assert list(summary.columns)[:3] == ["t", "mean_S", "se_S"]
        assert "verdict: PASS" in capsys.readouterr().out
        assert (out / "summary_footer.txt").read_text().startswith("verdict: PASS")

    def test_verify_negative_control(self, write_config, tmp_path):
        out = tmp_path / "negative"
        text = PURE_RECOVERY_SIR + UNIFORM3_TOML
        text += "[asir]\nbeta_prime = 0.2\n[ensemble]\nreplicates = 50\n"
        assert run("verify", write_config(text), out, "--workers", "1") == EXIT_VERIFY_FAILED
        assert "verdict: FAIL" in (out / "summary_footer.txt").read_text()

    def test_failure_mode(self, write_config, tmp_path):
        out = tmp_path / "failure"
        text = DISEASE_FREE_SIR.replace("s0 = 30\ni0 = 0", "s0 = 28\ni0 = 2") + UNIFORM3_TOML
        text += "[failure]\nside = 6\nn_agents = 10\n[ensemble]\nreplicates = 4\n"
        assert run("failure-mode", write_config(text), out, "--workers", "1") == EXIT_OK
        summary = json.loads((out / "failure_summary.json").read_text())
        assert summary["grid_side"] == 6
        assert "grid_tv_distance_at_horizon" in summary
        assert (out / "grid_summary.csv").exists()
        assert (out / "contrast_summary.csv").exists()


class TestReproducibility:
    def test_metadata(self, write_config, tmp_path):
        out = tmp_path / "meta"
        run("sir", write_config(PURE_RECOVERY_SIR), out)
        metadata = json.loads((out / "metadata.json").read_text())
        assert metadata["mode"] == "sir"
        assert metadata["rng_algorithm"] == RNG_ALGORITHM
        assert metadata["master_seed"] == 0
        assert len(metadata["config_sha256"]) == 64
        assert {"tool_version", "created_at"} <= set(metadata)

    def test_csvs_are_byte_identical_across_runs_and_worker_counts(self, write_config, tmp_path):
        config = write_config(
            PURE_RECOVERY_SIR + UNIFORM3_TOML + "[asir]\nseed = 17\n[ensemble]\nreplicates = 12\n"
        )
        run("verify", config, tmp_path / "a", "--workers", "1")
        run("verify", config, tmp_path / "b", "--workers", "1")
        run("verify", config, tmp_path / "c", "--workers", "2")
        first = (tmp_path / "a" / "summary.csv").read_bytes()
        assert (tmp_path / "b" / "summary.csv").read_bytes() == first
        assert (tmp_path / "c" / "summary.csv").read_bytes() == first


class TestExitCodes:
    def test_missing_config_file(self, tmp_path, capsys):
        assert run("sir", tmp_path / "absent.toml", tmp_path / "out") == EXIT_CONFIG_ERROR
        assert "configuration error" in capsys.readouterr().err

    def test_invalid_matrix(self, write_config, tmp_path, capsys):
        config = write_config("[map]\nmatrix = [[0.6, 0.3], [0.5, 0.5]]\n")
        assert run("stationary", config, tmp_path / "out") == EXIT_CONFIG_ERROR
        assert "map.matrix" in capsys.readouterr().err

    def test_non_ergodic_map_keeps_its_diagnostics(self, write_config, tmp_path):
        config = write_config("[map]\nmatrix = [[0.0, 1.0], [1.0, 0.0]]\n")
        out = tmp_path / "out"
        assert run("stationary", config, out) == EXIT_CONFIG_ERROR
        report = pd.read_csv(out / "ergodicity.csv").iloc[0]
        assert bool(report["irreducible"])
        assert not bool(report["aperiodic"])
        assert report["period"] == 2
        assert pd.isna(report["meetup_probability"])
        assert not (out / "stationary.csv").exists()

    def test_alpha_prime_out_of_range(self, write_config, tmp_path):
        text = PURE_RECOVERY_SIR.replace("alpha = 0.0", "alpha = 50.0") + UNIFORM3_TOML
        assert run("deduce", write_config(text), tmp_path / "out") == EXIT_CONFIG_ERROR

    def test_runtime_error(self, write_config, tmp_path, capsys):
        text = """
[sir]
alpha = 5.0
beta = 0.1
n = 100
s0 = 50
i0 = 50
horizon = 5
"""
        assert run("sir", write_config(text), tmp_path / "out") == EXIT_RUNTIME_ERROR
        assert "runtime error" in capsys.readouterr().err

    def test_flash_backend_needs_api_key(self, write_config, tmp_path, monkeypatch):
        monkeypatch.delenv("RUNPOD_API_KEY", raising=False)
        text = DISEASE_FREE_SIR + UNIFORM3_TOML + '[ensemble]\nbackend = "flash"\n'
        assert run("verify", write_config(text), tmp_path / "out") == EXIT_CONFIG_ERROR

    def test_workers_must_be_positive(self, write_config, tmp_path):
        assert run("sir", write_config(PURE_RECOVERY_SIR), tmp_path / "out", "--workers", "0") == EXIT_CONFIG_ERROR

    def test_unexpected_failure_is_a_runtime_error(self, write_config, tmp_path, monkeypatch, capsys):
        def crash(*args, **kwargs):
            raise RuntimeError("process pool died")

        monkeypatch.setattr("asir.cli.run_ensemble", crash)
        text = DISEASE_FREE_SIR + UNIFORM3_TOML + "[ensemble]\nreplicates = 2\n"
        assert run("verify", write_config(text), tmp_path / "out") == EXIT_RUNTIME_ERROR
        assert "RuntimeError: process pool died" in capsys.readouterr().err
