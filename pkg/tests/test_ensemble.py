import asyncio
import sys
import types

import numpy as np
import pytest

from asir.engine import AsirConfig, InitMode
from asir.ensemble import (
    Ensemble,
    equivalence_report,
    failure_mode_experiment,
    run_batch_payload,
    run_ensemble,
    run_ensemble_remote,
)
from asir.errors import HorizonMismatch, InvalidParameter, PopulationMismatch, ReplicateFailed
from asir.sir import SirParams, simulate_sir_euler


def make_config(map, **overrides) -> AsirConfig:
    values = dict(
        alpha_prime=0.01,
        beta_prime=0.1,
        map=map,
        n_agents=60,
        s0=55,
        i0=5,
        r0=0,
        horizon=20,
        init_mode=InitMode.stationary(),
        seed=3,
    )
    values.update(overrides)
    return AsirConfig(**values)


def reference_for(config: AsirConfig, alpha: float, beta: float):
    return simulate_sir_euler(
        SirParams(
            alpha=alpha,
            beta=beta,
            n_total=config.n_agents,
            s0=config.s0,
            i0=config.i0,
            r0=config.r0,
            horizon=config.horizon,
        )
    )


@pytest.fixture
def stub_worker(monkeypatch):
    """Replace the Flash endpoint module with an in-process coroutine."""
    calls = []

    async def simulate_replicates(payload: dict) -> dict:
        calls.append(tuple(payload["replicates"]))
        return run_batch_payload(payload)

    module = types.ModuleType("asir.replicate_worker")
    module.simulate_replicates = simulate_replicates
    monkeypatch.setitem(sys.modules, "asir.replicate_worker", module)
    return calls


class TestRunEnsemble:
    def test_no_infection_is_constant(self, uniform3):
        config = make_config(uniform3, s0=60, i0=0)
        ensemble = run_ensemble(config, 2)
        np.testing.assert_array_equal(ensemble.mean(), np.tile([60, 0, 0], (21, 1)))
        assert np.all(ensemble.standard_error() == 0)

    def test_same_seed_is_identical(self, uniform3):
        a = run_ensemble(make_config(uniform3), 10)
        b = run_ensemble(make_config(uniform3), 10)
        np.testing.assert_array_equal(a.counts, b.counts)
        np.testing.assert_array_equal(a.events, b.events)

    def test_independent_of_worker_count(self, uniform3):
        config = make_config(uniform3)
        serial = run_ensemble(config, 12, workers=1)
        parallel = run_ensemble(config, 12, workers=2, batch_size=5)
        np.testing.assert_array_equal(serial.counts, parallel.counts)
        np.testing.assert_array_equal(serial.events, parallel.events)

    def test_replicate_r_matches_single_replicate_run(self, uniform3):
        from asir.engine import simulate_replicate

        config = make_config(uniform3)
        ensemble = run_ensemble(config, 6)
        np.testing.assert_array_equal(ensemble.counts[4], simulate_replicate(config, 4).counts)

    def test_requires_two_replicates(self, uniform3):
        with pytest.raises(InvalidParameter):
            run_ensemble(make_config(uniform3), 1)

    def test_means_conserve_population(self, uniform3):
        ensemble = run_ensemble(make_config(uniform3), 30)
        np.testing.assert_allclose(ensemble.mean().sum(axis=1), 60, atol=1e-9)
        assert np.all(ensemble.standard_error() >= 0)

    def test_standard_error_shrinks_with_replicates(self, uniform3):
        config = make_config(uniform3, alpha_prime=0.02)
        small = run_ensemble(config, 200).standard_error()[1:, 1]
        large = run_ensemble(config, 400).standard_error()[1:, 1]
        ratio = float(np.mean(large / small))
        assert 0.6 <= ratio <= 0.82

    def test_trajectory_frame(self, uniform3):
        frame = run_ensemble(make_config(uniform3, horizon=4), 3).to_frame()
        assert list(frame.columns) == ["replicate", "t", "S", "I", "R", "new_inf", "new_rec", "clamps"]
        assert frame["replicate"].tolist() == [0] * 5 + [1] * 5 + [2] * 5


class TestBatchPayload:
    def test_success(self, uniform3):
        config = make_config(uniform3, horizon=5)
        response = run_batch_payload({"config": config.to_payload(), "replicates": [2, 5]})
        assert response["status"] == "success"
        assert response["start"] == 2
        counts = np.array(response["counts"])
        assert counts.shape == (3, 6, 3)
        np.testing.assert_array_equal(counts, run_ensemble(config, 5).counts[2:5])

    def test_malformed_payload(self):
        response = run_batch_payload({"replicates": [0, 1]})
        assert response["status"] == "error"
        assert "KeyError" in response["message"]

    def test_invalid_config(self, uniform3):
        payload = make_config(uniform3).to_payload()
        payload["alpha_prime"] = 2.0
        response = run_batch_payload({"config": payload, "replicates": [0, 1]})
        assert response["status"] == "error"


class TestRunEnsembleRemote:
    async def test_matches_local_run(self, uniform3, stub_worker):
        config = make_config(uniform3)
        remote = await run_ensemble_remote(config, 23, batch_size=5, concurrency=2)
        local = run_ensemble(config, 23)
        np.testing.assert_array_equal(remote.counts, local.counts)
        assert sorted(stub_worker) == [(0, 5), (5, 10), (10, 15), (15, 20), (20, 23)]

    async def test_completion_order_does_not_matter(self, uniform3):
        config = make_config(uniform3)

        async def shuffled(payload: dict) -> dict:
            start, _ = payload["replicates"]
            # later batches finish first
            await asyncio.sleep(0.01 * (10 - start // 4))
            return run_batch_payload(payload)

        remote = await run_ensemble_remote(config, 40, batch_size=4, dispatch=shuffled)
        local = run_ensemble(config, 40, workers=1)
        report_remote = equivalence_report(remote, reference_for(config, 0.2, 0.1))
        report_local = equivalence_report(local, reference_for(config, 0.2, 0.1))
        np.testing.assert_array_equal(report_remote.to_frame().to_numpy(), report_local.to_frame().to_numpy())

    async def test_worker_error_becomes_replicate_failed(self, uniform3):
        async def failing(payload: dict) -> dict:
            return {"status": "error", "replicate": 7, "message": "worker crashed"}

        with pytest.raises(ReplicateFailed) as info:
            await run_ensemble_remote(make_config(uniform3), 10, dispatch=failing)
        assert info.value.replicate == 7

    async def test_transport_error_carries_batch_start(self, uniform3):
        async def unreachable(payload: dict) -> dict:
            start, _ = payload["replicates"]
            if start == 5:
                raise RuntimeError("endpoint unreachable")
            return run_batch_payload(payload)

        with pytest.raises(ReplicateFailed) as info:
            await run_ensemble_remote(make_config(uniform3), 10, batch_size=5, dispatch=unreachable)
        assert info.value.replicate == 5
        assert "endpoint unreachable" in info.value.reason
        assert isinstance(info.value.__cause__, RuntimeError)


class TestEquivalenceReport:
    def test_disease_free_passes_exactly(self, uniform3):
        config = make_config(uniform3, s0=60, i0=0)
        report = equivalence_report(run_ensemble(config, 5), reference_for(config, 0.3, 0.1))
        assert np.all(report.z == 0)
        assert report.passed
        assert report.coverage == {"S": 1.0, "I": 1.0, "R": 1.0}

    def test_zero_se_with_different_means_fails_coverage(self, uniform3):
        config = make_config(uniform3, s0=60, i0=0)
        ensemble = run_ensemble(config, 3)
        shifted = reference_for(config, 0.0, 0.0)
        shifted.s[1:] += 1.0
        shifted.r[1:] -= 1.0
        report = equivalence_report(ensemble, shifted)
        assert np.isinf(report.z[1:, 0]).all()
        assert report.coverage["S"] == pytest.approx(1 / 21)
        assert not report.passed

    def test_clamps_fail_the_report(self):
        from asir.markov import validate_matrix

        config = make_config(
            validate_matrix([[1.0]]), alpha_prime=0.6, n_agents=5, s0=3, i0=2, horizon=3
        )
        ensemble = run_ensemble(config, 4)
        report = equivalence_report(ensemble, reference_for(config, 0.5, 0.1), coverage_threshold=0.01)
        assert report.total_clamp_events > 0
        assert not report.passed
        assert "clamp" in report.footer()

    def test_horizon_mismatch(self, uniform3):
        config = make_config(uniform3)
        ensemble = run_ensemble(config, 2)
        with pytest.raises(HorizonMismatch):
            equivalence_report(ensemble, reference_for(make_config(uniform3, horizon=10), 0.2, 0.1))

    def test_population_mismatch(self, uniform3):
        ensemble = run_ensemble(make_config(uniform3), 2)
        other = make_config(uniform3, n_agents=61, s0=56)
        with pytest.raises(PopulationMismatch):
            equivalence_report(ensemble, reference_for(other, 0.2, 0.1))

    def test_summary_frame_and_footer(self, uniform3):
        config = make_config(uniform3)
        report = equivalence_report(run_ensemble(config, 20), reference_for(config, 0.2, 0.1))
        frame = report.to_frame()
        assert list(frame.columns) == [
            "t", "mean_S", "se_S", "mean_I", "se_I", "mean_R", "se_R",
            "ref_S", "ref_I", "ref_R", "z_S", "z_I", "z_R",
        ]
        assert len(frame) == 21
        footer = report.footer()
        assert "replicates: 20" in footer
        assert "master seed: 3" in footer

    def test_ensemble_built_directly(self, uniform3):
        config = make_config(uniform3, horizon=1, n_agents=2, s0=2, i0=0)
        counts = np.array([[[2, 0, 0], [2, 0, 0]], [[2, 0, 0], [2, 0, 0]]])
        events = np.zeros((2, 3, 2), dtype=np.int64)
        report = equivalence_report(Ensemble(config, counts, events), reference_for(config, 0.1, 0.1))
        assert report.passed


class TestFailureModeExperiment:
    def test_small_grid_summary(self, uniform3, reference_params):
        result = failure_mode_experiment(
            reference_params, uniform3, side=5, n_agents=10, n_replicates=3
        )
        summary = result.summary
        assert summary["alpha_prime"] == pytest.approx(0.004, rel=1e-12)
        assert summary["beta_prime"] == 0.1
        assert summary["grid_n_agents"] == 10
        assert summary["grid_i0"] == 3
        assert 1 / 25 <= summary["grid_meetup_probability"] <= 1
        assert 0 <= summary["grid_tv_distance_at_horizon"] <= 1
        assert result.grid_report.n_replicates == 3
        assert result.contrast_report.mean[0].tolist() == [297, 3, 0]
        assert result.grid_report.mean[0].tolist() == [7, 3, 0]

    def test_without_diagnostics(self, uniform3, reference_params):
        result = failure_mode_experiment(
            reference_params, uniform3, side=3, n_agents=5, n_replicates=2, diagnostics=False
        )
        assert "grid_tv_distance_at_horizon" not in result.summary
        assert "grid_meetup_probability" not in result.summary

    def test_population_smaller_than_i0(self, uniform3, reference_params):
        with pytest.raises(InvalidParameter):
            failure_mode_experiment(reference_params, uniform3, side=3, n_agents=2, n_replicates=2)
