"""Critic construction, forward pass, EMA, and checkpoint format."""

import numpy as np
import pytest

from nndiv import tensor as T
from nndiv.nn import (CheckpointError, ConfigError, CriticSpec, EmaState,
                      build_critic, critic_forward, ema_update, load_checkpoint,
                      load_params, save_checkpoint, save_params)
from nndiv.tensor import ShapeError, Tensor

from test_tensor import check_gradients


def cnn_spec(h=8, w=8, c=1, mult=0.25):
    return CriticSpec(kind="cnn", input_shape=(h, w, c), channel_multiplier=mult)


class TestSpecValidation:
    def test_paper_width_channels(self):
        spec = CriticSpec(kind="cnn", input_shape=(32, 32, 3))
        params = build_critic(spec, seed=0)
        assert params.tensors["conv1/kernel"].data.shape == (5, 5, 3, 64)
        assert params.tensors["conv2/kernel"].data.shape == (5, 5, 64, 128)
        assert params.tensors["conv3/kernel"].data.shape == (5, 5, 128, 256)
        assert params.tensors["out/weight"].data.shape == (4 * 4 * 256, 1)

    def test_quarter_multiplier(self):
        params = build_critic(cnn_spec(mult=0.25), seed=0)
        assert params.tensors["conv1/kernel"].data.shape[-1] == 16
        assert params.tensors["conv3/kernel"].data.shape[-1] == 64

    def test_multiplier_below_one_channel_rejected(self):
        with pytest.raises(ConfigError, match="below 1"):
            CriticSpec(kind="cnn", input_shape=(8, 8, 1), channel_multiplier=0.001)

    def test_mlp_hidden_required_for_mlp(self):
        with pytest.raises(ConfigError):
            CriticSpec(kind="mlp", input_shape=(3,), mlp_hidden=None)
        with pytest.raises(ConfigError):
            CriticSpec(kind="cnn", input_shape=(8, 8, 1), mlp_hidden=(4,))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            CriticSpec(kind="rnn", input_shape=(3,))

    def test_json_round_trip_and_strictness(self):
        spec = cnn_spec()
        assert CriticSpec.from_json(spec.to_json()) == spec
        bad = spec.to_json()
        bad["extra"] = 1
        with pytest.raises(ConfigError, match="extra"):
            CriticSpec.from_json(bad)


class TestBuildCritic:
    def test_empty_mlp_is_single_affine(self):
        spec = CriticSpec(kind="mlp", input_shape=(1,), mlp_hidden=())
        params = build_critic(spec, seed=5)
        assert list(params.tensors) == ["out/weight", "out/bias"]
        assert params.tensors["out/weight"].data.shape == (1, 1)
        assert np.all(params.tensors["out/bias"].data == 0.0)

    def test_he_init_std(self):
        # pooled std of a 64 -> 128 weight over 10 seeds vs sqrt(2/64)
        spec = CriticSpec(kind="mlp", input_shape=(64,), mlp_hidden=(128,))
        draws = [build_critic(spec, seed=s).tensors["fc1/weight"].data for s in range(10)]
        pooled = np.concatenate([d.ravel() for d in draws])
        target = np.sqrt(2.0 / 64.0)
        assert abs(pooled.std() - target) < 0.1 * target
        assert abs(pooled.mean()) < 0.05 * target

    def test_deterministic_given_seed(self):
        a = build_critic(cnn_spec(), seed=9)
        b = build_critic(cnn_spec(), seed=9)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)


class TestForward:
    def test_zero_params_zero_output(self):
        params = build_critic(cnn_spec(), seed=0)
        zeroed = params.with_arrays({n: np.zeros_like(t.data) for n, t in params.tensors.items()})
        batch = np.random.default_rng(0).normal(size=(6, 8, 8, 1)).astype(np.float32)
        out = critic_forward(zeroed, batch)
        assert out.data.shape == (6, 1)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_mlp_affine_values(self):
        spec = CriticSpec(kind="mlp", input_shape=(1,), mlp_hidden=())
        params = build_critic(spec, seed=0)
        params.tensors["out/weight"].data[:] = 3.0
        params.tensors["out/bias"].data[:] = 1.0
        out = critic_forward(params, np.array([[2.0], [-1.0]], dtype=np.float32))
        np.testing.assert_allclose(out.data, [[7.0], [-2.0]])

    def test_one_scalar_per_example_at_paper_shape(self):
        params = build_critic(CriticSpec(kind="cnn", input_shape=(32, 32, 3),
                                         channel_multiplier=0.125), seed=1)
        batch = np.random.default_rng(1).normal(size=(4, 32, 32, 3)).astype(np.float32)
        assert critic_forward(params, batch).data.shape == (4, 1)

    def test_batch_order_equivariance(self):
        params = build_critic(cnn_spec(), seed=2)
        batch = np.random.default_rng(2).normal(size=(8, 8, 8, 1)).astype(np.float32)
        out = critic_forward(params, batch).data
        perm = np.random.default_rng(3).permutation(8)
        out_perm = critic_forward(params, batch[perm]).data
        np.testing.assert_array_equal(out[perm], out_perm)

    def test_shape_mismatch(self):
        params = build_critic(cnn_spec(), seed=0)
        with pytest.raises(ShapeError):
            critic_forward(params, np.zeros((2, 4, 4, 1), dtype=np.float32))

    def test_gradcheck_mean_output_wrt_kernel(self):
        spec = cnn_spec(h=6, w=6, mult=1 / 16)
        base = build_critic(spec, seed=3)
        batch = np.random.default_rng(4).normal(size=(2, 6, 6, 1)).astype(np.float32)
        kv = base.tensors["conv2/kernel"].data

        def build(tensors):
            params = base.with_arrays(base.copy_arrays())
            params.tensors["conv2/kernel"] = tensors[0]
            return T.mean(critic_forward(params, batch))

        check_gradients(build, [kv])


class TestEma:
    def test_shadow_starts_as_copy(self):
        params = build_critic(cnn_spec(), seed=0)
        ema = EmaState.init(params, 0.999)
        for name, t in params.tensors.items():
            np.testing.assert_array_equal(ema.shadow[name], t.data)
            assert ema.shadow[name] is not t.data

    def test_single_step_value(self):
        spec = CriticSpec(kind="mlp", input_shape=(1,), mlp_hidden=())
        params = build_critic(spec, seed=0)
        params.tensors["out/weight"].data[:] = 0.0
        ema = EmaState(0.999, {"out/weight": np.ones((1, 1), dtype=np.float32),
                               "out/bias": np.zeros(1, dtype=np.float32)})
        ema_update(ema, params)
        assert ema.shadow["out/weight"][0, 0] == pytest.approx(0.999)

    def test_geometric_recursion(self):
        spec = CriticSpec(kind="mlp", input_shape=(1,), mlp_hidden=())
        params = build_critic(spec, seed=0)
        theta = 0.25
        params.tensors["out/weight"].data[:] = theta
        params.tensors["out/bias"].data[:] = theta
        s0 = 1.0
        ema = EmaState(0.9, {"out/weight": np.full((1, 1), s0, dtype=np.float32),
                             "out/bias": np.full(1, s0, dtype=np.float32)})
        k = 7
        for _ in range(k):
            ema_update(ema, params)
        expected = theta + 0.9 ** k * (s0 - theta)
        assert ema.shadow["out/weight"][0, 0] == pytest.approx(expected, rel=1e-5)

    def test_never_mutates_live(self):
        params = build_critic(cnn_spec(), seed=1)
        before = params.copy_arrays()
        ema = EmaState.init(params, 0.5)
        ema.shadow = {n: a * 2.0 for n, a in ema.shadow.items()}
        ema_update(ema, params)
        for name in before:
            np.testing.assert_array_equal(params.tensors[name].data, before[name])

    def test_coefficient_range(self):
        params = build_critic(cnn_spec(), seed=0)
        with pytest.raises(ConfigError):
            EmaState.init(params, 1.0)


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        params = build_critic(cnn_spec(), seed=4)
        path = tmp_path / "critic.nndw"
        save_params(path, params)
        loaded = load_params(path, cnn_spec())
        for name in params.tensors:
            np.testing.assert_array_equal(loaded.tensors[name].data,
                                          params.tensors[name].data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.nndw"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload_reports_counts(self, tmp_path):
        path = tmp_path / "trunc.nndw"
        save_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(CheckpointError, match="payload"):
            load_checkpoint(path)

    def test_name_mismatch_rejected(self, tmp_path):
        path = tmp_path / "other.nndw"
        save_checkpoint(path, {"something": np.ones(3, dtype=np.float32)})
        with pytest.raises(CheckpointError, match="names"):
            load_params(path, cnn_spec())
