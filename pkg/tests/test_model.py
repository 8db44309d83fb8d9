import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jetforge import model as M
from jetforge import tensor as T
from jetforge.cost import count_params
from jetforge.errors import ConfigError, DimensionError

TINY = M.ModelConfig(4, 8, 2)


def random_config(rng):
    heads = int(rng.integers(1, 3))
    return M.ModelConfig(
        num_blocks=int(rng.integers(1, 4)),
        embed_dim=4 * heads * int(rng.integers(1, 3)),
        num_heads=heads,
        num_features=int(rng.integers(1, 5)),
        num_particles=int(rng.integers(2, 10)),
        num_classes=int(rng.integers(2, 6)),
    )


class TestConfig:
    def test_ffn_defaults_to_twice_embed(self):
        assert TINY.ffn_hidden == 16

    @pytest.mark.parametrize(
        "kwargs, fragment",
        [
            ({"embed_dim": 10, "num_heads": 3}, "divisible"),
            ({"embed_dim": 8, "num_heads": 4}, ">= 4"),
            ({"num_blocks": 0}, "num_blocks"),
            ({"num_classes": 1}, "num_classes"),
            ({"dropout": 1.0}, "dropout"),
        ],
    )
    def test_validate_names_violation(self, kwargs, fragment):
        base = {"num_blocks": 1, "embed_dim": 8, "num_heads": 2}
        with pytest.raises(ConfigError, match=fragment):
            M.ModelConfig(**(base | kwargs)).validate()

    def test_dict_roundtrip(self):
        cfg = M.with_widths(TINY, 6, ((4, 3),) * 4, (5, 6, 7, 8))
        assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            M.ModelConfig.from_dict({"num_blocks": 1, "embed_dim": 8, "num_heads": 2, "depth": 3})


class TestBuild:
    def test_deterministic(self):
        a, b = M.build(TINY, 3), M.build(TINY, 3)
        np.testing.assert_array_equal(a.flatten(), b.flatten())
        assert not np.array_equal(a.flatten(), M.build(TINY, 4).flatten())

    @pytest.mark.parametrize("seed", range(10))
    def test_param_count_matches_flattened_state(self, seed):
        cfg = random_config(np.random.default_rng(seed))
        state = M.build(cfg, seed)
        assert count_params(cfg) == state.num_params() == state.flatten().size

    def test_tiny_param_count(self):
        assert count_params(TINY) == 2501

    def test_copy_is_independent(self):
        state = M.build(TINY)
        clone = state.copy()
        clone.params["head.bias"].data += 1.0
        clone.norms["norm_final"].running_mean += 1.0
        assert state.params["head.bias"].data.sum() == 0.0
        assert state.norms["norm_final"].running_mean.sum() == 0.0
        assert clone.norms["norm_final"].weight is clone.params["norm_final.weight"]


class TestForward:
    def test_output_is_log_probability(self, rng):
        state = M.build(TINY)
        out = M.forward(state, rng.normal(size=(5, 8, 3)))
        assert out.shape == (5, 5)
        np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0)

    def test_wrong_feature_count(self, rng):
        with pytest.raises(DimensionError):
            M.forward(M.build(TINY), rng.normal(size=(2, 8, 4)))

    def test_training_updates_running_stats(self, rng):
        state = M.build(TINY)
        M.forward(state, rng.normal(size=(4, 8, 3)), training=True)
        assert state.norms["blocks.0.norm1"].running_mean.any()

    def test_uneven_head_widths(self, rng):
        cfg = M.with_widths(TINY, 8, ((5, 4), (4, 6), (4, 4), (7, 4)), (3, 16, 9, 1))
        state = M.build(cfg)
        assert M.forward(state, rng.normal(size=(3, 8, 3))).shape == (3, 5)

    def test_attention_head_split(self, rng):
        # one head of width d equals single-head softmax attention computed directly
        cfg = M.ModelConfig(1, 4, 1, num_features=2, num_particles=3, num_classes=2)
        state = M.build(cfg, 1)
        x = rng.normal(size=(2, 4, 4))
        got = M.attention(state, 0, T.Tensor(x)).data
        p = {k: v.data for k, v in state.params.items()}
        q = x @ p["blocks.0.attn.q.weight"].T + p["blocks.0.attn.q.bias"]
        k = x @ p["blocks.0.attn.k.weight"].T + p["blocks.0.attn.k.bias"]
        v = x @ p["blocks.0.attn.v.weight"].T + p["blocks.0.attn.v.bias"]
        s = q @ np.swapaxes(k, -1, -2) / 2.0
        s = np.exp(s - s.max(-1, keepdims=True))
        s /= s.sum(-1, keepdims=True)
        want = (s @ v) @ p["blocks.0.attn.out.weight"].T + p["blocks.0.attn.out.bias"]
        np.testing.assert_allclose(got, want, atol=1e-12)


@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    state = M.build(TINY, seed % 7)
    x = rng.normal(size=(1, 8, 3))
    perm = rng.permutation(8)
    a = M.forward(state, x).data
    b = M.forward(state, x[:, perm]).data
    assert np.abs(a - b).max() < 1e-8
