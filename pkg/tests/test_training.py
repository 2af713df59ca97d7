import json

import numpy as np
import pytest

from stableflow import autodiff as ad
from stableflow.core import (ElementaryDS, PolicyParams, policy_eval,
                             verify_certificate)
from stableflow.data import Dataset
from stableflow.errors import (ParseError, TrainingDivergedError,
                               UnsupportedVersionError, ValidationError)
from stableflow.fixtures import make_demo, multitask_demos
from stableflow.state import StateVector
from stableflow.training import (Checkpoint, TrainConfig, _batch_loss,
                                 _stack_batch, best_fit_contraction,
                                 checkpoint_to_json, flatten_params,
                                 imitation_loss, init_policy, load_checkpoint,
                                 loss_on_vector, parse_net_spec,
                                 save_checkpoint, train)
from tests.util import isotropic_policy, random_policy


class TestNetSpec:
    def test_mlp(self):
        assert parse_net_spec("mlp:32,32")["hidden"] == ((32, "tanh"), (32, "tanh"))
        assert parse_net_spec("mlp:8")["hidden"] == ((8, "tanh"),)

    def test_conv(self):
        spec = parse_net_spec("conv")
        assert spec["kind"] == "conv"
        assert parse_net_spec("conv:4,8")["channels"] == (4, 8)

    @pytest.mark.parametrize("bad", ["mlp", "mlp:", "mlp:0", "mlp:a,b",
                                     "conv:0", "resnet", "conv:1:2"])
    def test_rejects(self, bad):
        with pytest.raises(ValidationError):
            parse_net_spec(bad)


class TestConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.n_systems == 5 and cfg.batch_size == 64

    @pytest.mark.parametrize("kw", [dict(n_systems=0), dict(epochs=-1),
                                    dict(learning_rate=0.0), dict(batch_size=0),
                                    dict(eps=0.0), dict(net="nope")])
    def test_invalid_rejected(self, kw):
        with pytest.raises(ValidationError):
            TrainConfig(**kw)


class TestImitationLoss:
    def test_zero_when_targets_match(self):
        rng = np.random.default_rng(0)
        params = random_policy(rng, d_c=2, n_systems=3, d_nc=1)
        batch = []
        for _ in range(8):
            s = StateVector(rng.normal(size=2), rng.uniform(size=1))
            batch.append((s, policy_eval(params, s)))
        assert imitation_loss(params, batch) == pytest.approx(0.0, abs=1e-24)

    def test_unit_error_single_sample(self):
        params = isotropic_policy([1.0], [0.0, 0.0])
        batch = [(StateVector([0.0, 0.0]), np.array([1.0, 0.0]))]
        assert imitation_loss(params, batch) == pytest.approx(1.0)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        params = random_policy(rng, d_c=2, n_systems=2, d_nc=2)
        batch = [(StateVector(rng.normal(size=2), rng.uniform(size=2)),
                  rng.normal(size=2)) for _ in range(16)]
        a = imitation_loss(params, batch)
        b = imitation_loss(params, batch[::-1])
        assert a == pytest.approx(b, rel=1e-12)

    def test_empty_batch_rejected(self):
        params = isotropic_policy([1.0], [0.0, 0.0])
        with pytest.raises(ValidationError):
            imitation_loss(params, [])

    def test_image_dedup_path_bit_identical(self):
        rng = np.random.default_rng(2)
        cfg = TrainConfig(n_systems=3, net="conv", seed=0)
        trajs = multitask_demos("image", M=5, image_shape=(16, 16))
        ds = Dataset.from_trajectories(trajs)
        params = init_policy(2, cfg, ds.attractor, rng, image_shape=(16, 16))
        batch = list(ds.samples)[:10]
        xc, xnc, tg = _stack_batch(batch, 2, "image")
        tensors = [(s.L_raw, s.C) for s in params.systems]
        plain = _batch_loss(tensors, params.weight_net, params.attractor,
                            params.diag_floor, xc, xnc, tg)
        keys = {}
        ids = np.empty(len(batch), dtype=int)
        uniq = []
        for i in range(len(batch)):
            k = xnc[i].tobytes()
            if k not in keys:
                keys[k] = len(uniq)
                uniq.append(xnc[i])
            ids[i] = keys[k]
        dedup = _batch_loss(tensors, params.weight_net, params.attractor,
                            params.diag_floor, xc, None, tg,
                            unique_images=np.stack(uniq), image_index=ids)
        assert float(plain) == float(dedup)


class TestTrain:
    def test_linear_demo_reaches_target_loss(self, trained_line):
        assert trained_line.final_loss < 1e-3

    def test_zero_epochs_returns_initialization(self, line_dataset):
        cfg = TrainConfig(n_systems=2, epochs=0, seed=7)
        ckpt = train(line_dataset, cfg)
        rng = np.random.default_rng(7)
        fresh = init_policy(2, cfg, line_dataset.attractor, rng,
                            contraction=best_fit_contraction(line_dataset))
        for a, b in zip(ckpt.params.systems, fresh.systems):
            assert np.array_equal(a.L_raw, b.L_raw)
            assert np.array_equal(a.C, b.C)
        assert ckpt.loss_history == ()

    def test_seed_determinism_bitwise(self, line_dataset):
        cfg = TrainConfig(n_systems=2, epochs=15, seed=3)
        a = train(line_dataset, cfg)
        b = train(line_dataset, cfg)
        assert a.loss_history == b.loss_history
        assert np.array_equal(flatten_params(a.params), flatten_params(b.params))

    def test_different_seed_differs(self, line_dataset):
        cfg = TrainConfig(n_systems=2, epochs=5, seed=3)
        a = train(line_dataset, cfg)
        b = train(line_dataset, TrainConfig(n_systems=2, epochs=5, seed=4))
        assert not np.array_equal(flatten_params(a.params), flatten_params(b.params))

    def test_certificate_holds_every_epoch(self, line_dataset):
        seen = []

        def check(epoch, loss, params):
            seen.append(epoch)
            assert verify_certificate(params).verdict

        train(line_dataset, TrainConfig(n_systems=3, epochs=10, seed=0),
              progress=check)
        assert seen == list(range(10))

    def test_loss_trend_down(self, trained_line):
        hist = trained_line.loss_history
        assert hist[-1] < hist[0]

    def test_divergence_raises_with_epoch(self):
        # squared velocity error overflows double range -> non-finite loss
        from stableflow.data import Trajectory
        huge = [np.array([0.0, 0.0]), np.array([1e200, 0.0]),
                np.array([0.0, 0.0])]
        ds = Dataset.from_trajectories(
            [Trajectory(0.01, tuple(StateVector(x) for x in huge))])
        with pytest.raises(TrainingDivergedError) as err:
            train(ds, TrainConfig(n_systems=2, epochs=3, seed=0))
        assert err.value.epoch == 0

    def test_conv_requires_images(self, line_dataset):
        with pytest.raises(ValidationError):
            train(line_dataset, TrainConfig(net="conv", epochs=1))

    def test_images_require_conv(self):
        ds = Dataset.from_trajectories(
            multitask_demos("image", M=5, image_shape=(16, 16)))
        with pytest.raises(ValidationError):
            train(ds, TrainConfig(net="mlp:8", epochs=1))


class TestGradientFidelity:
    def _five_sample_batch(self, rng, params):
        batch = []
        for _ in range(5):
            s = StateVector(rng.normal(size=2), rng.uniform(size=2))
            batch.append((s, rng.normal(size=2)))
        return batch

    def test_loss_gradient_at_init(self):
        rng = np.random.default_rng(4)
        params = random_policy(rng, d_c=2, n_systems=2, d_nc=2,
                               hidden=((8, "tanh"),))
        batch = self._five_sample_batch(rng, params)
        f = loss_on_vector(params, batch)
        err = ad.grad_check(f, flatten_params(params), 1e-5)
        assert err < 1e-4

    def test_loss_gradient_after_training(self, line_dataset):
        ckpt = train(line_dataset, TrainConfig(n_systems=2, epochs=20, seed=1))
        batch = list(line_dataset.samples)[:5]
        f = loss_on_vector(ckpt.params, batch)
        err = ad.grad_check(f, flatten_params(ckpt.params), 1e-5)
        assert err < 1e-4


class TestCheckpointIO:
    def test_round_trip_bit_identical(self, tmp_path, trained_line):
        p = tmp_path / "ck.json"
        save_checkpoint(trained_line, p)
        loaded = load_checkpoint(p)
        assert np.array_equal(flatten_params(trained_line.params),
                              flatten_params(loaded.params))
        rng = np.random.default_rng(5)
        for _ in range(10):
            s = StateVector(rng.normal(size=2))
            assert np.array_equal(policy_eval(trained_line.params, s),
                                  policy_eval(loaded.params, s))
        save_checkpoint(loaded, tmp_path / "ck2.json")
        assert (tmp_path / "ck.json").read_bytes() == (tmp_path / "ck2.json").read_bytes()

    def test_truncated_file(self, tmp_path, trained_line):
        p = tmp_path / "ck.json"
        save_checkpoint(trained_line, p)
        p.write_text(p.read_text()[: 200])
        with pytest.raises(ParseError):
            load_checkpoint(p)

    def test_version_zero_rejected(self, tmp_path, trained_line):
        p = tmp_path / "ck.json"
        doc = checkpoint_to_json(trained_line)
        doc["version"] = 0
        p.write_text(json.dumps(doc))
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "nope.json")

    def test_bypass_round_trips(self, tmp_path):
        base = isotropic_policy([1.0], [0.0, 0.0])
        bad = ElementaryDS(base.systems[0].L_raw, base.systems[0].C,
                           A_bypass=-np.eye(2))
        params = PolicyParams((bad,), base.weight_net, base.attractor)
        ckpt = Checkpoint(config=TrainConfig(n_systems=1), params=params,
                          final_loss=0.0, epochs_run=0, dataset_fingerprint="x")
        p = tmp_path / "tampered.json"
        save_checkpoint(ckpt, p)
        loaded = load_checkpoint(p)
        assert not verify_certificate(loaded.params).verdict


class TestBestFitContraction:
    def test_matches_generating_field(self):
        # demo from dx = a (g - x) should report ~a
        a, g = 2.5, np.array([0.3, -0.2])
        dt, m = 0.01, 400
        xs = [np.array([1.0, 1.0])]
        for _ in range(m - 1):
            xs.append(xs[-1] + dt * a * (g - xs[-1]))
        from stableflow.data import Trajectory
        ds = Dataset.from_trajectories(
            [Trajectory(dt, tuple(StateVector(x) for x in xs))])
        est = best_fit_contraction(ds)
        assert est == pytest.approx(a, rel=0.05)
