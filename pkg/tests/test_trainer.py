import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlo import tensor as T
from dlo.errors import ConfigError, TrainingError
from dlo.layers import MODEL_PRESETS, init_model
from dlo.model import RoutingMode, forward
from dlo.router import RouterParams
from dlo.tensor import Tensor
from dlo.trainer import (AdamW, Batch, SparsitySchedule, activated_fraction, anneal, batch_similarity_labels,
                         compute_losses, dense_step, layer_lr, lr_multiplier, similarity_labels, skip_loss,
                         total_loss, train_step, update_layer_sparsity)


def brute_labels(mu, rho_t, valid):
    """Oracle: python ``sorted`` over (mu, layer, token) triples of one sequence."""
    n_layers, s = mu.shape
    cells = [(mu[i, j], i, j) for i in range(n_layers) for j in range(s) if valid[j]]
    k = math.floor((1 - rho_t) * len(cells) + 1e-9)
    out = np.zeros(mu.shape, dtype=bool)
    for _, i, j in sorted(cells)[:k]:
        out[i, j] = True
    return out


def tiny_batch(seed=0, b=3, s=4):
    rng = np.random.default_rng(seed)
    return Batch(rng.integers(0, 16, (b, s)), rng.integers(0, 16, (b, s)), np.ones((b, s), dtype=bool))


class TestSchedules:
    def test_anneal_endpoints(self):
        assert anneal(0, 0.1, 0.5, 10) == pytest.approx(0.1)
        assert anneal(5, 0.1, 0.5, 10) == pytest.approx(0.3)
        assert anneal(10, 0.1, 0.5, 10) == pytest.approx(0.5)
        assert anneal(11, 0.1, 0.5, 10) == 0.5
        assert anneal(3, 0.1, 0.5, 0) == 0.5

    def test_layer_lr(self):
        assert layer_lr(1.0, 0.25, 0.25) == 1.0
        assert layer_lr(2e-5, 0.5, 0.25) == pytest.approx(2e-5 * 0.5 / 0.75)
        with pytest.raises(ConfigError):
            layer_lr(1.0, 0.0, 1.0)

    def test_warmup_then_cosine(self):
        total = 100
        assert lr_multiplier(1, total) == pytest.approx(1 / 3)
        assert lr_multiplier(3, total) == pytest.approx(1.0)
        assert lr_multiplier(100, total) == pytest.approx(0.0, abs=1e-12)
        mid = 3 + (100 - 3) / 2
        assert lr_multiplier(mid, total) == pytest.approx(0.5)
        values = [lr_multiplier(t, total) for t in range(3, 101)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_schedule_validation(self):
        with pytest.raises(ConfigError):
            SparsitySchedule.create(2, 0.2, rho_start=0.3)
        with pytest.raises(ConfigError):
            SparsitySchedule.create(2, 1.0)

    def test_schedule_round_trip(self):
        s = SparsitySchedule.create(3, 0.25, 0.05, 10, 100)
        s.step, s.per_layer_rho = 7, [0.1, 0.2, 0.3]
        assert SparsitySchedule.from_dict(s.to_dict()) == s


class TestLabels:
    def test_lowest_similarity_activates(self):
        mu = np.array([[0.9, 0.1, 0.5], [0.2, 0.8, 0.95]])
        # 6 cells, rho=0.5 -> 3 activations: 0.1, 0.2, 0.5
        assert similarity_labels(mu, 0.5).tolist() == [[False, True, True], [True, False, False]]

    def test_ties_by_layer_then_token(self):
        mu = np.ones((2, 3))
        assert similarity_labels(mu, 0.5).tolist() == [[True, True, True], [False, False, False]]

    def test_zero_rate_activates_everything(self):
        assert similarity_labels(np.random.default_rng(0).random((3, 5)), 0.0).all()

    def test_against_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n_layers, b, s = (int(x) for x in rng.integers(1, 6, 3))
            mu = rng.choice([0.5, 1.0], size=(n_layers, b, s)) if rng.random() < 0.3 else rng.random((n_layers, b, s))
            valid = rng.random((b, s)) < 0.8
            rho = float(rng.random() * 0.99)
            got = batch_similarity_labels(mu, rho, valid)
            for j in range(b):
                np.testing.assert_array_equal(got[:, j], brute_labels(mu[:, j], rho, valid[j]))

    def test_invalid_cells_never_labelled(self):
        valid = np.array([[True, False, True]])
        labels = batch_similarity_labels(np.zeros((2, 1, 3)), 0.0, valid)
        assert not labels[:, 0, 1].any()


class TestConservation:
    """The layer-mean of next-step rates equals the global rate up to one cell."""

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 16), st.floats(0.0, 0.95), st.integers(0, 2**31 - 1))
    def test_corrected_rule_conserves(self, n_layers, s, rho, seed):
        mu = np.random.default_rng(seed).random((n_layers, s))
        labels = similarity_labels(mu, rho)
        mean_rate = np.mean([update_layer_sparsity(labels[i]) for i in range(n_layers)])
        assert abs(mean_rate - rho) <= 1.0 / (n_layers * s) + 1e-12

    def test_uncorrected_rule_breaks_conservation(self):
        mu = np.random.default_rng(0).random((4, 16))
        labels = similarity_labels(mu, 0.25)
        wrong = np.mean([activated_fraction(labels[i]) for i in range(4)])
        assert abs(wrong - 0.25) > 1.0 / 64


class TestLosses:
    def test_skip_loss_matches_formula(self, double):
        p = np.array([[0.9, 0.2], [0.6, 0.4]])
        labels = np.array([[1, 0], [0, 1]], dtype=bool)
        expect = -np.mean(np.where(labels, np.log(p), np.log(1 - p)))
        assert skip_loss([Tensor(p[0][None]), Tensor(p[1][None])], labels[:, None]).item() == pytest.approx(expect)

    def test_total_loss_rejects_nan(self):
        with pytest.raises(TrainingError):
            total_loss(Tensor(np.float32(np.nan)), Tensor(np.float32(0.0)))

    def test_dlo_gradient(self, double):
        model = init_model(MODEL_PRESETS["tiny"], 0)
        rng = np.random.default_rng(0)
        routers = RouterParams([Tensor(rng.normal(0, 0.5, (8, 1)), requires_grad=True) for _ in range(2)])
        batch = tiny_batch()

        def loss():
            task, skip, _ = compute_losses(model, routers, batch, 0.25, [0.25, 0.25])
            return T.add(task, skip)

        errs = T.gradcheck(loss, model.parameters() + routers.weights)
        assert max(errs.values()) <= 1e-4


class TestAdamW:
    def test_matches_reference_update(self, double):
        p = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
        opt = AdamW(lr=0.1, weight_decay=0.5)
        m = v = np.zeros(2)
        ref = p.data.copy()[0]
        for step in range(1, 4):
            g = np.array([0.3, -0.1]) * step
            p.grad = g[None].copy()
            opt.apply([("p", p, 0.1, True)])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref * (1 - 0.1 * 0.5)
            ref = ref - 0.1 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
        np.testing.assert_allclose(p.data[0], ref, rtol=1e-12)

    def test_no_decay_flag(self, double):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.zeros(1)
        AdamW(lr=0.1, weight_decay=0.5).apply([("p", p, 0.1, False)])
        assert p.data[0] == 1.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            AdamW(betas=(1.0, 0.9))


class TestTrainStep:
    def test_updates_schedule_and_reports(self):
        model = init_model(MODEL_PRESETS["tiny"], 0)
        routers = RouterParams.zeros(2, 8)
        schedule = SparsitySchedule.create(2, 0.5, 0.0, 4, 10)
        optim = AdamW(lr=1e-2)
        m1 = train_step(model, routers, tiny_batch(), schedule, optim)
        assert m1.step == 1 and schedule.step == 1
        assert m1.rho_t == pytest.approx(0.125)
        assert m1.layer_rho == [0.0, 0.0]
        assert m1.activations == [12, 12]
        assert np.mean(m1.next_layer_rho) == pytest.approx(m1.rho_t, abs=1 / 8 + 1e-12)
        m2 = train_step(model, routers, tiny_batch(1), schedule, optim)
        assert m2.layer_rho == m1.next_layer_rho

    def test_zero_rate_is_dense_with_all_labels_active(self):
        model = init_model(MODEL_PRESETS["tiny"], 0)
        routers = RouterParams.zeros(2, 8)
        schedule = SparsitySchedule.create(2, 0.0, 0.0, 0, 5)
        optim = AdamW(lr=1e-2)
        for k in range(5):
            m = train_step(model, routers, tiny_batch(k), schedule, optim)
            assert m.next_layer_rho == [0.0, 0.0]
            assert m.activations == [12, 12]
        # all-ones labels push every router probability up
        _, trace = forward(model, tiny_batch(0).tokens, RoutingMode.inference(), routers)
        assert (trace.scores.mean(axis=(1, 2)) > 1.0).all()

    def test_loss_decreases_on_a_fixed_batch(self):
        model = init_model(MODEL_PRESETS["tiny"], 0)
        routers = RouterParams.zeros(2, 8)
        schedule = SparsitySchedule.create(2, 0.25, 0.0, 0, 60)
        optim = AdamW(lr=1e-2, warmup_ratio=0.0)
        batch = tiny_batch()
        losses = [train_step(model, routers, batch, schedule, optim).task_loss for _ in range(60)]
        assert losses[-1] < 0.5 * losses[0]

    def test_nan_raises_with_trace(self):
        model = init_model(MODEL_PRESETS["tiny"], 0)
        model.head.data[:] = np.nan
        with pytest.raises(TrainingError) as info:
            train_step(model, RouterParams.zeros(2, 8), tiny_batch(), SparsitySchedule.create(2, 0.25), AdamW())
        assert info.value.trace is not None

    def test_layer_count_checked(self):
        model = init_model(MODEL_PRESETS["tiny"], 0)
        with pytest.raises(ConfigError):
            train_step(model, RouterParams.zeros(3, 8), tiny_batch(), SparsitySchedule.create(2, 0.25), AdamW())

    def test_dense_step_learns(self):
        model = init_model(MODEL_PRESETS["tiny"], 0)
        optim = AdamW(lr=1e-2, warmup_ratio=0.0)
        batch = tiny_batch()
        losses = [dense_step(model, batch, optim, 50) for _ in range(50)]
        assert losses[-1] < 0.5 * losses[0]
