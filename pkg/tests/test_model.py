import numpy as np
import pytest

from dlo import tensor as T
from dlo.errors import ConfigError, InputError
from dlo.layers import (LAYER_TENSORS, MODEL_PRESETS, ModelConfig, attention_sublayer, embed_tokens,
                        init_model, mlp_sublayer, output_logits)
from dlo.model import RoutingMode, forward
from dlo.router import RouterParams
from dlo.tensor import Tensor


@pytest.fixture
def tiny():
    return init_model(MODEL_PRESETS["tiny"], seed=0)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=3, d_ff=8, n_layers=1, vocab=4, max_seq=4)

    @pytest.mark.parametrize("field", ["d_model", "n_layers", "vocab", "max_seq", "d_ff"])
    def test_positive(self, field):
        kwargs = MODEL_PRESETS["tiny"].to_dict() | {field: 0}
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)

    def test_presets_valid(self):
        assert MODEL_PRESETS["toy-32"].n_layers == 32
        assert MODEL_PRESETS["toy"].d_model == 64 and MODEL_PRESETS["toy"].vocab == 128


class TestParams:
    def test_named_tensors_cover_every_layer(self, tiny):
        names = [n for n, _ in tiny.named_tensors()]
        assert names[:2] == ["embed", "pos"] and names[-2:] == ["final_norm", "head"]
        assert len(names) == 4 + len(LAYER_TENSORS) * tiny.config.n_layers
        assert len(set(names)) == len(names)

    def test_shapes(self, tiny):
        cfg = tiny.config
        layer = tiny.layers[0]
        assert layer.wq.shape == (cfg.d_model, cfg.d_model)
        assert layer.w_gate.shape == (cfg.d_model, cfg.d_ff)
        assert layer.w_down.shape == (cfg.d_ff, cfg.d_model)
        assert tiny.head.shape == (cfg.d_model, cfg.vocab)

    def test_seeded_init_is_deterministic(self):
        a, b = init_model(MODEL_PRESETS["tiny"], 3), init_model(MODEL_PRESETS["tiny"], 3)
        for (_, x), (_, y) in zip(a.named_tensors(), b.named_tensors()):
            assert np.array_equal(x.data, y.data)

    def test_copy_is_deep(self, tiny):
        clone = tiny.copy()
        clone.layers[0].wq.data[:] = 0
        assert np.abs(tiny.layers[0].wq.data).sum() > 0


class TestForward:
    def test_shapes_and_squeeze(self, tiny):
        logits, trace = forward(tiny, np.array([[1, 2, 3], [4, 5, 6]]))
        assert logits.shape == (2, 3, 16)
        assert trace.scores.shape == (2, 2, 3)
        logits1, _ = forward(tiny, np.array([1, 2, 3]))
        assert logits1.shape == (3, 16)

    def test_causality(self, tiny):
        a, _ = forward(tiny, np.array([[1, 2, 3, 4]]))
        b, _ = forward(tiny, np.array([[1, 2, 3, 9]]))
        np.testing.assert_allclose(a.data[0, :3], b.data[0, :3], atol=1e-6)
        assert not np.allclose(a.data[0, 3], b.data[0, 3])

    def test_token_range_checked(self, tiny):
        with pytest.raises(InputError):
            forward(tiny, np.array([[0, 16]]))
        with pytest.raises(InputError):
            forward(tiny, np.array([[0.5, 1.0]]))

    def test_max_seq_checked(self, tiny):
        with pytest.raises(InputError):
            forward(tiny, np.zeros((1, 9), dtype=np.int64))

    def test_always_on_is_plain_residual_stack(self, tiny):
        tokens = np.array([[3, 1, 4, 1]])
        logits, _ = forward(tiny, tokens, RoutingMode.always_on())
        h = embed_tokens(tiny, tokens)
        for layer in tiny.layers:
            h = mlp_sublayer(attention_sublayer(h, layer, tiny.config.n_heads), layer)
        np.testing.assert_allclose(logits.data, output_logits(tiny, h).data, atol=1e-6)

    def test_sparse_inference_matches_dense_inference(self):
        model = init_model(MODEL_PRESETS["tiny"], 1)
        rng = np.random.default_rng(0)
        routers = RouterParams([Tensor(rng.normal(0, 3, (8, 1))) for _ in range(2)])
        tokens = rng.integers(0, 16, (5, 6))
        with T.no_grad():
            sparse, t1 = forward(model, tokens, RoutingMode.inference(), routers)
            dense, t2 = forward(model, tokens, RoutingMode.inference(), routers, with_similarity=True)
        assert 0 < t1.predicted.mean() < 1
        np.testing.assert_array_equal(t1.predicted, t2.predicted)
        np.testing.assert_allclose(sparse.data, dense.data, atol=1e-5)

    def test_random_mode_rate_and_seed(self):
        model = init_model(MODEL_PRESETS["tiny"], 0)
        tokens = np.random.default_rng(0).integers(0, 16, (200, 8))
        mode = RoutingMode.random([0.3, 0.3], seed=5)
        with T.no_grad():
            _, a = forward(model, tokens, mode)
            _, b = forward(model, tokens, mode)
        assert np.array_equal(a.predicted, b.predicted)
        assert abs(1 - a.predicted.mean() - 0.3) < 0.03

    def test_invalid_tokens_never_activate(self, tiny):
        valid = np.array([[True, True, False]])
        _, trace = forward(tiny, np.array([[1, 2, 0]]), RoutingMode.train([0.0, 0.0]), valid=valid)
        assert not trace.predicted[:, 0, 2].any()
        assert trace.predicted[:, 0, :2].all()


class TestRoutingModeParse:
    def test_parse(self):
        assert RoutingMode.parse("inference", 3).kind == "inference"
        assert RoutingMode.parse("random:0.3", 3).rates == (0.3, 0.3, 0.3)
        assert RoutingMode.parse("random:0.1,0.2", 2).rates == (0.1, 0.2)

    @pytest.mark.parametrize("text", ["dense", "random:x", "random:0.1,0.2", "random:1.5"])
    def test_bad(self, text):
        with pytest.raises(ConfigError):
            RoutingMode.parse(text, 3)
