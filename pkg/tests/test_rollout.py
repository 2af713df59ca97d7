import csv
import io
import json

import numpy as np
import pytest

from stableflow.core import ElementaryDS, MaterializedPolicy, PolicyParams
from stableflow.errors import RolloutDivergedError, ValidationError
from stableflow.rollout import (CONVERGENCE_TOL, CONVERGENCE_WINDOW,
                                ObservationProvider, PerturbationEvent,
                                convergence_stats, integrate,
                                vector_field_grid)
from stableflow.state import StateVector
from tests.util import isotropic_policy, random_policy


class TestIntegrate:
    def test_analytic_exponential_decay(self):
        # closed-form oracle: dx/dt = -x from 1 gives x(t) = exp(-t)
        params = isotropic_policy([1.0], [0.0])
        rec = integrate(params, StateVector([1.0]), dt=1e-3, horizon=1.0,
                        stop_on_convergence=False)
        assert abs(rec.xc[-1][0] - np.exp(-1.0)) < 1e-9

    def test_start_at_attractor_converges_at_zero(self):
        params = isotropic_policy([1.0], [0.3, -0.4])
        rec = integrate(params, StateVector([0.3, -0.4]), dt=1e-3, horizon=1.0)
        assert rec.converged
        assert rec.convergence_time == 0.0
        assert rec.steps == CONVERGENCE_WINDOW

    def test_euler_rk4_agree_at_small_dt(self):
        # Euler's global error grows with the contraction rate squared, so
        # the cross-check uses a gently contracting draw.
        rng = np.random.default_rng(0)
        params = random_policy(rng, d_c=2, n_systems=3, d_nc=2,
                               diag_low=-0.3, diag_high=0.1,
                               lower_scale=0.1, skew_scale=0.1,
                               attractor=[0.0, 0.0])
        x0 = StateVector([0.5, -0.25], rng.uniform(size=2))
        a = integrate(params, x0, dt=1e-3, horizon=1.0, method="euler",
                      stop_on_convergence=False)
        b = integrate(params, x0, dt=1e-3, horizon=1.0, method="rk4",
                      stop_on_convergence=False)
        assert np.linalg.norm(a.xc[-1] - b.xc[-1]) < 1e-4

    def test_parameter_validation(self):
        params = isotropic_policy([1.0], [0.0])
        x0 = StateVector([1.0])
        with pytest.raises(ValidationError):
            integrate(params, x0, dt=0.0, horizon=1.0)
        with pytest.raises(ValidationError):
            integrate(params, x0, dt=0.1, horizon=-1.0)
        with pytest.raises(ValidationError):
            integrate(params, x0, dt=0.1, horizon=1.0, method="heun")
        with pytest.raises(ValidationError):
            integrate(params, x0, dt=0.1, horizon=1.0, clamp=0.0)

    def test_divergence_carries_step_index(self):
        # uncertified bypass system: expanding flow blows up under big steps
        bad = ElementaryDS(np.zeros((1, 1)), np.zeros((1, 1)),
                           A_bypass=np.array([[-40.0]]))
        base = isotropic_policy([1.0], [0.0])
        params = PolicyParams((bad,), base.weight_net, base.attractor)
        with pytest.raises(RolloutDivergedError) as err:
            integrate(params, StateVector([1.0]), dt=1.0, horizon=400.0,
                      method="euler")
        assert err.value.step > 0

    def test_clamp_preserves_direction_and_caps_speed(self):
        params = isotropic_policy([4.0], [0.0, 0.0])
        x0 = StateVector([3.0, 4.0])
        rec = integrate(params, x0, dt=1e-3, horizon=0.01, clamp=1.0,
                        stop_on_convergence=False)
        speeds = np.linalg.norm(rec.velocities, axis=1)
        assert speeds.max() <= 1.0 + 1e-12
        v0 = rec.velocities[0]
        direction = v0 / np.linalg.norm(v0)
        expect = -np.array([3.0, 4.0]) / 5.0
        assert np.allclose(direction, expect, atol=1e-9)

    def test_clamped_rollout_still_converges(self):
        params = isotropic_policy([4.0], [0.0, 0.0])
        rec = integrate(params, StateVector([3.0, 4.0]), dt=1e-3, horizon=30.0,
                        clamp=1.0)
        assert rec.converged
        assert convergence_stats(rec)["lyapunov_violations"] == 0


class TestPerturbations:
    def test_events_applied_at_scheduled_steps(self):
        params = isotropic_policy([1.0], [0.0, 0.0])
        rec = integrate(params, StateVector([1.0, 0.0]),
                        perturbations=[PerturbationEvent(0.5, [0.5, 0.0]),
                                       PerturbationEvent(0.0, [0.0, 0.2])],
                        dt=1e-3, horizon=3.0, stop_on_convergence=False)
        kinds = [(e.kind, e.time) for e in rec.events]
        assert ("perturb", 0.0) in kinds and ("perturb", 0.5) in kinds
        stats = convergence_stats(rec)
        assert stats["lyapunov_violations"] == 0

    def test_recovery_after_large_displacement(self):
        rng = np.random.default_rng(1)
        params = random_policy(rng, d_c=2, n_systems=2, diag_low=0.6,
                               diag_high=1.5, attractor=[0.0, 0.0])
        delta = rng.normal(size=2)
        delta *= 5.0 / np.linalg.norm(delta)
        rec = integrate(params, StateVector([0.5, 0.5]),
                        perturbations=[PerturbationEvent(0.2, delta)],
                        dt=1e-3, horizon=60.0)
        assert rec.converged

    def test_v_jump_only_at_event_step(self):
        params = isotropic_policy([2.0], [0.0, 0.0])
        rec = integrate(params, StateVector([1.0, 0.0]),
                        perturbations=[PerturbationEvent(0.5, [2.0, 2.0])],
                        dt=1e-3, horizon=2.0, stop_on_convergence=False)
        event_step = [e.step for e in rec.events if e.kind == "perturb"][0]
        dV = np.diff(rec.lyapunov)
        jumps = np.nonzero(dV > 1e-10)[0] + 1
        assert list(jumps) == [event_step]

    def test_bad_perturbation_rejected(self):
        params = isotropic_policy([1.0], [0.0, 0.0])
        with pytest.raises(ValidationError):
            integrate(params, StateVector([1.0, 0.0]),
                      perturbations=[PerturbationEvent(-1.0, [0.1, 0.1])],
                      dt=0.01, horizon=1.0)
        with pytest.raises(ValidationError):
            integrate(params, StateVector([1.0, 0.0]),
                      perturbations=[PerturbationEvent(0.5, [0.1])],
                      dt=0.01, horizon=1.0)


class TestObservationProvider:
    def test_schedule_semantics(self):
        p = ObservationProvider.scheduled([(0.0, [1.0, 0.0]), (1.0, [0.0, 1.0])])
        assert np.array_equal(p.payload_at(0.0), [1.0, 0.0])
        assert np.array_equal(p.payload_at(0.999), [1.0, 0.0])
        assert np.array_equal(p.payload_at(1.0), [0.0, 1.0])
        assert p.next_switch_after(0.0) == 1.0
        assert p.next_switch_after(1.0) is None

    def test_schedule_validation(self):
        with pytest.raises(ValidationError):
            ObservationProvider.scheduled([(0.5, [1.0])])
        with pytest.raises(ValidationError):
            ObservationProvider.scheduled([(0.0, [1.0]), (0.0, [2.0])])

    def test_switch_recorded_and_convergence_survives(self):
        rng = np.random.default_rng(2)
        params = random_policy(rng, d_c=2, n_systems=3, d_nc=2,
                               diag_low=0.6, attractor=[0.0, 0.0])
        provider = ObservationProvider.scheduled(
            [(0.0, [1.0, 0.0]), (1.0, [0.0, 1.0])])
        rec = integrate(params, StateVector([2.0, -1.0], [1.0, 0.0]),
                        provider=provider, dt=1e-3, horizon=60.0)
        assert any(e.kind == "obs" and e.time == 1.0 for e in rec.events)
        assert rec.converged
        assert convergence_stats(rec)["lyapunov_violations"] == 0

    def test_payload_validated_against_net(self):
        params = isotropic_policy([1.0], [0.0, 0.0], d_nc=2)
        bad = ObservationProvider.static(np.zeros(5))
        with pytest.raises(ValidationError):
            integrate(params, StateVector([1.0, 0.0], np.zeros(2)),
                      provider=bad, dt=0.01, horizon=1.0)


class TestConvergenceStats:
    def test_clean_rollout_no_violations(self):
        rng = np.random.default_rng(3)
        params = random_policy(rng, d_c=2, n_systems=3, d_nc=1,
                               diag_low=0.6, attractor=[0.0, 0.0])
        rec = integrate(params, StateVector([1.0, 1.0], [0.5]), dt=1e-3,
                        horizon=60.0)
        stats = convergence_stats(rec)
        assert rec.converged
        assert stats["lyapunov_violations"] == 0
        assert stats["final_error"] < CONVERGENCE_TOL

    def test_large_dt_euler_reports_violations_not_fatal(self):
        # Euler with lambda * dt > 2 oscillates outward: V increases are
        # expected at this step size and are reported, not fatal.
        params = isotropic_policy([4.4], [0.0])
        rec = integrate(params, StateVector([1.0]), dt=0.5, horizon=10.0,
                        method="euler", stop_on_convergence=False)
        assert convergence_stats(rec)["lyapunov_violations"] > 0

    def test_empty_record_rejected(self):
        import dataclasses
        params = isotropic_policy([1.0], [0.0])
        rec = integrate(params, StateVector([1.0]), dt=0.01, horizon=0.05)
        empty = dataclasses.replace(
            rec, times=np.zeros(0), xc=np.zeros((0, 1)),
            velocities=np.zeros((0, 1)), lyapunov=np.zeros(0))
        with pytest.raises(ValidationError):
            convergence_stats(empty)


class TestConvergenceProperty:
    def test_random_certified_policies_converge(self):
        """100 random policies x 10 starts, RK4 dt=1e-3, horizon 100 s.

        Batched integration with a per-start Lyapunov monitor; violations
        outside events and non-convergence both fail.
        """
        rng = np.random.default_rng(42)
        dt = 1e-3
        horizon = 100.0
        max_steps = int(horizon / dt)
        for _ in range(100):
            params = random_policy(rng, d_c=2, n_systems=int(rng.integers(1, 4)),
                                   d_nc=1, diag_low=1.0, diag_high=2.0,
                                   lower_scale=0.2, attractor=rng.normal(size=2))
            pol = MaterializedPolicy(params)
            starts = params.attractor + rng.uniform(-1, 1, size=(10, 2)) * \
                rng.uniform(0.1, 10.0 / np.sqrt(2), size=(10, 1))
            payload = rng.uniform(size=(10, 1))
            x = starts.copy()
            err = np.linalg.norm(params.attractor - x, axis=1)
            run = np.zeros(10, dtype=int)
            prev_v = err**2
            converged = err < CONVERGENCE_TOL
            for step in range(max_steps):
                k1 = pol.velocity_batch(x, payload)
                k2 = pol.velocity_batch(x + 0.5 * dt * k1, payload)
                k3 = pol.velocity_batch(x + 0.5 * dt * k2, payload)
                k4 = pol.velocity_batch(x + dt * k3, payload)
                x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
                err = np.linalg.norm(params.attractor - x, axis=1)
                v = err**2
                assert np.all(v - prev_v <= 1e-10), "Lyapunov increase detected"
                prev_v = v
                run = np.where(err < CONVERGENCE_TOL, run + 1, 0)
                if np.all(run >= CONVERGENCE_WINDOW):
                    converged[:] = True
                    break
            assert np.all(converged | (run >= CONVERGENCE_WINDOW)), \
                "a certified rollout failed to converge within the horizon"


class TestFieldGrid:
    def test_zero_at_attractor_grid_point(self):
        params = isotropic_policy([1.0, 3.0], [0.0, 0.0])
        grid = vector_field_grid(params, np.zeros(0), ((-1, 1), (-1, 1)), 3)
        center = np.all(grid.points == 0.0, axis=1)
        assert center.sum() == 1
        assert np.all(grid.velocities[center] == 0.0)

    def test_identity_field(self):
        params = isotropic_policy([1.0], [0.5, -0.5])
        grid = vector_field_grid(params, np.zeros(0), ((-1, 1), (-1, 1)), 5)
        expect = params.attractor[None, :] - grid.points
        assert np.allclose(grid.velocities, expect, atol=1e-9)

    def test_inward_flow_everywhere(self):
        rng = np.random.default_rng(4)
        params = random_policy(rng, d_c=2, n_systems=4, d_nc=2,
                               attractor=[0.2, -0.1])
        grid = vector_field_grid(params, rng.uniform(size=2),
                                 ((-2, 2), (-2, 2)), 9)
        e = params.attractor[None, :] - grid.points
        inner = (e * grid.velocities).sum(axis=1)
        nonzero = np.linalg.norm(e, axis=1) > 1e-9
        assert np.all(inner[nonzero] > 0.0)

    def test_validation(self):
        params = isotropic_policy([1.0], [0.0, 0.0])
        with pytest.raises(ValidationError):
            vector_field_grid(params, np.zeros(0), ((-1, 1), (-1, 1)), 1)
        params1d = isotropic_policy([1.0], [0.0])
        with pytest.raises(ValidationError):
            vector_field_grid(params1d, np.zeros(0), ((-1, 1),), 5)

    def test_csv_layout(self):
        params = isotropic_policy([1.0], [0.0, 0.0])
        grid = vector_field_grid(params, np.zeros(0), ((-1, 1), (0, 2)), (2, 3))
        rows = list(csv.reader(io.StringIO(grid.to_csv())))
        assert rows[0] == ["x0", "x1", "v0", "v1"]
        assert len(rows) == 1 + 6
        # row-major: first coordinate varies slowest
        assert [float(r[0]) for r in rows[1:]] == [-1, -1, -1, 1, 1, 1]


class TestExports:
    def test_rollout_csv_and_json(self):
        params = isotropic_policy([1.0], [0.0, 0.0])
        rec = integrate(params, StateVector([1.0, 0.0]),
                        perturbations=[PerturbationEvent(0.05, [0.1, 0.0])],
                        dt=0.01, horizon=0.1, stop_on_convergence=False)
        rows = list(csv.reader(io.StringIO(rec.to_csv())))
        assert rows[0] == ["t", "xc_0", "xc_1", "v_0", "v_1", "V"]
        assert len(rows) == 1 + rec.steps
        assert float(rows[1][1]) == 1.0
        doc = json.loads(rec.to_json())
        assert doc["converged"] == rec.converged
        assert doc["events"][0]["kind"] == "perturb"
        assert len(doc["xc"]) == rec.steps
