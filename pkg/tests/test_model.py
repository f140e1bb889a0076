"""Model variants: construction, determinism, forward contract, nodule prediction."""

import numpy as np
import pytest

from nslgc import model as M
from nslgc import tensor as T
from nslgc.model import ModelConfig
from nslgc.tensor import Tape, Tensor


def small_config(variant="maxout_local_global", seed=0):
    return ModelConfig(variant=variant, input_size=16, base_channels=4, maxout_pieces=2, seed=seed)


class TestBuild:
    def test_same_config_builds_identical_parameters(self):
        a = M.build_model(small_config(seed=3))
        b = M.build_model(small_config(seed=3))
        for (na, pa), (nb, pb) in zip(a.parameters(), b.parameters()):
            assert na == nb
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_different_seed_differs(self):
        a = M.build_model(small_config(seed=0))
        b = M.build_model(small_config(seed=1))
        assert a.stem.kernel.data.tobytes() != b.stem.kernel.data.tobytes()

    def test_all_variants_build_and_forward(self):
        x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 16, 16)))
        for variant in M.VARIANTS:
            state = M.build_model(small_config(variant=variant))
            probs = M.model_forward(state, x, mode="eval")
            assert probs.shape == (2,)
            assert np.all((probs.data > 0.0) & (probs.data < 1.0))

    def test_parameter_shapes_match_plan(self):
        for variant in M.VARIANTS:
            cfg = small_config(variant=variant)
            state = M.build_model(cfg)
            expected = M.parameter_shapes(cfg)
            actual = {name: p.shape for name, p in state.parameters()}
            assert actual == expected, variant

    def test_head_pieces_per_variant(self):
        assert M.build_model(small_config("local_global_linear")).head.pieces == 1
        assert M.build_model(small_config("resnet_a")).head.pieces == 1
        assert M.build_model(small_config("maxout_local_global")).head.pieces == 2
        assert M.build_model(small_config("maxout_a")).head.pieces == 2
        assert M.build_model(small_config("resnet_a_maxout")).head.pieces == 2

    def test_larger_variants_have_more_parameters(self):
        base = M.param_count(M.build_model(small_config("maxout_local_global")))
        assert M.param_count(M.build_model(small_config("maxout_a"))) > base
        assert M.param_count(M.build_model(small_config("resnet_a"))) > base
        assert M.param_count(M.build_model(small_config("resnet_a_maxout"))) > base

    def test_maxout_head_only_difference_between_linear_and_maxout(self):
        lin = M.build_model(small_config("local_global_linear"))
        mx = M.build_model(small_config("maxout_local_global"))
        lin_names = {n for n, _ in lin.parameters()}
        mx_names = {n for n, _ in mx.parameters()}
        assert lin_names == mx_names
        diff = M.param_count(mx) - M.param_count(lin)
        assert diff == lin.head.weight.size + 1  # one extra affine piece

    def test_invalid_variant_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            ModelConfig(variant="resnet_b")


class TestForward:
    def test_eval_is_deterministic(self):
        state = M.build_model(small_config())
        x = Tensor(np.random.default_rng(1).uniform(size=(3, 1, 16, 16)))
        a = M.model_forward(state, x, mode="eval").data
        b = M.model_forward(state, x, mode="eval").data
        assert a.tobytes() == b.tobytes()

    def test_eval_never_touches_running_stats(self):
        state = M.build_model(small_config())
        before = [buf.copy() for _, buf in state.bn_buffers()]
        M.model_forward(state, Tensor(np.random.default_rng(2).uniform(size=(2, 1, 16, 16))), mode="eval")
        for (name, buf), prev in zip(state.bn_buffers(), before):
            np.testing.assert_array_equal(buf, prev)

    def test_train_updates_running_stats_unless_frozen(self):
        state = M.build_model(small_config())
        x = Tensor(np.random.default_rng(3).uniform(size=(4, 1, 16, 16)))
        before = state.stem.running_mean.copy()
        M.model_forward(state, x, mode="train", rng=np.random.default_rng(0))
        assert state.stem.running_mean.tobytes() != before.tobytes()
        frozen = M.build_model(small_config())
        before = frozen.stem.running_mean.copy()
        M.model_forward(frozen, x, mode="train", rng=np.random.default_rng(0), update_bn_stats=False)
        np.testing.assert_array_equal(frozen.stem.running_mean, before)

    def test_wrong_input_shape_rejected(self):
        state = M.build_model(small_config())
        with pytest.raises(ValueError, match=r"\[N, 1, S, S\]"):
            M.model_forward(state, Tensor(np.zeros((2, 3, 16, 16))), mode="eval")
        with pytest.raises(ValueError, match="16x16"):
            M.model_forward(state, Tensor(np.zeros((2, 1, 8, 8))), mode="eval")

    def test_zero_head_gives_half_probability(self):
        state = M.build_model(small_config())
        state.head.weight.data[:] = 0.0
        state.head.bias.data[:] = 0.0
        x = Tensor(np.random.default_rng(9).uniform(size=(3, 1, 16, 16)))
        probs = M.model_forward(state, x, mode="eval")
        np.testing.assert_allclose(probs.data, 0.5, atol=1e-15)

    def test_stochastic_depth_scales_eval_logit(self):
        # With SD enabled, eval logit is survival_prob * raw logit.
        state = M.build_model(small_config())
        x = Tensor(np.random.default_rng(4).uniform(size=(2, 1, 16, 16)))
        with_sd = M.model_forward(state, x, mode="eval", stochastic_depth_enabled=True).data
        without = M.model_forward(state, x, mode="eval", stochastic_depth_enabled=False).data
        logit = np.log(without / (1.0 - without))
        expected = 1.0 / (1.0 + np.exp(-state.config.survival_prob * logit))
        np.testing.assert_allclose(with_sd, expected, atol=1e-10)

    def test_gradients_reach_every_block(self):
        state = M.build_model(small_config())
        x = Tensor(np.random.default_rng(5).uniform(size=(4, 1, 16, 16)))
        y = np.array([0.0, 1.0, 1.0, 0.0])
        with Tape() as tape:
            probs = M.model_forward(
                state, x, mode="train", rng=np.random.default_rng(0),
                dropout_enabled=False, stochastic_depth_enabled=False, update_bn_stats=False,
            )
            loss = T.bce_loss(probs, y)
        T.backward(loss, tape)
        missing = [name for name, p in state.parameters() if p.grad is None]
        assert missing == []


class TestClone:
    def test_clone_matches_then_diverges_independently(self):
        state = M.build_model(small_config())
        dup = M.clone_model(state)
        for (n1, p1), (n2, p2) in zip(state.parameters(), dup.parameters()):
            assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
            assert p1 is not p2 and not np.shares_memory(p1.data, p2.data)
        dup.stem.kernel.data[:] = 0.0
        dup.stem.running_mean[:] = 99.0
        assert not np.all(state.stem.kernel.data == 0.0)
        assert not np.any(state.stem.running_mean == 99.0)

    def test_clone_preserves_epoch(self):
        state = M.build_model(small_config())
        state.epoch = 17
        assert M.clone_model(state).epoch == 17


class TestPredictNodule:
    def test_probability_is_mean_of_three_views(self):
        state = M.build_model(small_config())
        vol = np.random.default_rng(6).uniform(size=(16, 16, 16))
        p = M.predict_nodule(state, vol)
        from nslgc.preprocess import center_views

        per_view = M.model_forward(state, Tensor(center_views(vol)[:, None]), mode="eval").data
        assert p == pytest.approx(per_view.mean(), abs=1e-15)
        assert 0.0 < p < 1.0

    def test_unnormalized_volume_rejected(self):
        state = M.build_model(small_config())
        vol = np.random.default_rng(7).uniform(size=(16, 16, 16)) * 400.0 - 200.0
        with pytest.raises(ValueError, match="normalized"):
            M.predict_nodule(state, vol)

    def test_deterministic(self):
        state = M.build_model(small_config())
        vol = np.random.default_rng(8).uniform(size=(16, 16, 16))
        assert M.predict_nodule(state, vol) == M.predict_nodule(state, vol)
