import numpy as np
import pytest

from stableflow.data import Dataset, Trajectory
from stableflow.errors import ValidationError
from stableflow.evaluation import (bbox_diagonal, demo_provider, eval_table,
                                   mixture_weight_series, multitask_eval,
                                   reproduction_error)
from stableflow.fixtures import make_demo, multitask_demos
from stableflow.rollout import integrate
from stableflow.state import StateVector
from stableflow.training import TrainConfig, init_policy, train
from tests.util import random_policy


class TestReproduction:
    def test_self_consistency(self):
        """A policy replayed against its own rollout reproduces it exactly."""
        rng = np.random.default_rng(0)
        params = random_policy(rng, d_c=2, n_systems=2, d_nc=1,
                               attractor=[0.0, 0.0])
        payload = np.array([0.7])
        rec = integrate(params, StateVector([1.0, -1.0], payload), dt=0.01,
                        horizon=1.0, stop_on_convergence=False)
        traj = Trajectory(0.01, tuple(StateVector(x, payload) for x in rec.xc))
        rep = reproduction_error(params, traj)
        assert rep["rmse"] <= 1e-12

    def test_trained_beats_initialization(self, sine_demo, sine_dataset,
                                          trained_sine):
        cfg = TrainConfig(n_systems=5, seed=0)
        rng = np.random.default_rng(0)
        untrained = init_policy(2, cfg, sine_dataset.attractor, rng)
        init_err = reproduction_error(untrained, sine_demo)["rmse"]
        trained_err = reproduction_error(trained_sine.params, sine_demo)["rmse"]
        assert trained_err < init_err

    def test_trained_linear_below_threshold(self, line_demo, trained_line):
        rep = reproduction_error(trained_line.params, line_demo,
                                 horizon_factor=1.5)
        assert rep["normalized_rmse"] < 0.05
        assert rep["converged"]

    def test_dims_checked(self, trained_line):
        demo1d = Trajectory(0.01, tuple(StateVector([v]) for v in (0.0, 0.5, 1.0)))
        with pytest.raises(ValidationError):
            reproduction_error(trained_line.params, demo1d)

    def test_bbox_diagonal(self):
        traj = Trajectory(0.1, (StateVector([0.0, 0.0]), StateVector([3.0, 0.0]),
                                StateVector([3.0, 4.0])))
        assert bbox_diagonal(traj) == pytest.approx(5.0)


class TestDemoProvider:
    def test_constant_payload_collapses_to_static(self):
        demo = make_demo("line", M=10, payload=np.array([1.0, 0.0]))
        provider = demo_provider(demo)
        assert provider.kind == "static"

    def test_changing_payload_scheduled(self):
        states = [StateVector([0.0], [0.0]), StateVector([0.1], [0.0]),
                  StateVector([0.2], [1.0]), StateVector([0.3], [1.0])]
        provider = demo_provider(Trajectory(0.1, tuple(states)))
        assert provider.kind == "scheduled"
        assert np.array_equal(provider.payload_at(0.15), [0.0])
        assert np.array_equal(provider.payload_at(0.2), [1.0])


class TestMultitask:
    def test_three_reports_below_threshold(self, onehot_dataset, trained_onehot):
        reports = multitask_eval(trained_onehot.params, onehot_dataset)
        assert len(reports) == 3
        for r in reports:
            assert r.max_normalized_rmse < 0.10
            assert r.all_converged
            assert r.certificate["verdict"]

    def test_single_task_degenerates_to_reproduction(self, line_demo,
                                                     line_dataset, trained_line):
        reports = multitask_eval(trained_line.params, line_dataset,
                                 horizon_factor=1.5)
        assert len(reports) == 1
        direct = reproduction_error(trained_line.params, line_demo,
                                    horizon_factor=1.5)
        assert reports[0].per_trajectory[0]["rmse"] == pytest.approx(
            direct["rmse"], rel=1e-12)

    def test_mismatched_endpoints_fixture_error(self, trained_line):
        a = make_demo("line", goal=(0.0, 0.0), start=(-1.0, 0.0),
                      payload=np.array([1.0, 0.0]))
        b = make_demo("curve", goal=(1.0, 1.0), start=(0.0, 1.0),
                      payload=np.array([0.0, 1.0]))
        ds = Dataset.from_trajectories([a, b])
        with pytest.raises(ValidationError, match="fixture error"):
            multitask_eval(trained_line.params, ds)

    def test_task_weight_separation(self, onehot_dataset, trained_onehot):
        trajs = onehot_dataset.trajectories
        series = [mixture_weight_series(trained_onehot.params, t) for t in trajs]
        for i in range(len(series)):
            for j in range(i + 1, len(series)):
                gap = np.abs(series[i] - series[j]).max()
                assert gap > 0.05, f"tasks {i} and {j} share weights"

    def test_table_format(self, onehot_dataset, trained_onehot):
        reports = multitask_eval(trained_onehot.params, onehot_dataset)
        table = eval_table(reports)
        lines = table.splitlines()
        assert lines[0].split()[:2] == ["task", "trajs"]
        assert len(lines) == 1 + len(reports)
