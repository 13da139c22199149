import io
import json
import math

import numpy as np
import pytest

from trice.data import generate_synthetic
from trice.errors import ConfigError, NumericError
from trice.kpp import substream
from trice.nn import Dataset, init_weights, loss_and_grad, mlp, sgd_step
from trice.noise import NoiseSpec, analytic_mean, analytic_second_moment
from trice.quant import DeviceModel, QuantConfig, quantize_weights
from trice.train import (SearchState, TrainConfig, binary_search_update, inject_noise,
                         noise_injected_step, noise_train_epoch, pick_winner, train,
                         train_baseline, trice)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig(sigma_d=0.2)
        assert (c.epochs, c.warmup, c.th, c.start, c.n_train, c.q) == (100, 5, 2.0, 0.0, 300, 0.01)
        assert c.end == pytest.approx(0.4)

    @pytest.mark.parametrize("kw", [dict(start=0.3, end=0.2), dict(start=-0.1),
                                    dict(warmup=5, epochs=5), dict(n_train=0), dict(H=3),
                                    dict(device="pcm")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_lr_schedule(self):
        c = TrainConfig(epochs=100, lr=0.1)
        assert c.lr_at(49) == 0.1
        assert c.lr_at(50) == pytest.approx(0.01)
        assert c.lr_at(75) == pytest.approx(0.001)


class TestSearch:
    def test_quartiles(self):
        assert SearchState(0.0, 0.4).candidates == pytest.approx((0.1, 0.2, 0.3))

    def test_mid_halves(self):
        s = binary_search_update(SearchState(0.0, 0.4, [1, 2, 3]), "mid")
        assert (s.start, s.end) == pytest.approx((0.1, 0.3))

    def test_mid_only_reaches_convergence_in_12(self):
        s, n = SearchState(0.0, 0.4, [0, 0, 0]), 0
        while not s.converged:
            s = binary_search_update(s, "mid")
            n += 1
        assert n == math.ceil(math.log2(0.4 / 1e-4)) == 12

    def test_hand_traced_table(self):
        rng = np.random.default_rng(0)
        fresh = lambda: [rng.normal(size=3) for _ in range(3)]
        # (winner, start, end before) -> (start, end after, index of source weights)
        table = [("mid", 0.0, 0.4, 0.1, 0.3, 1),
                 ("left", 0.1, 0.3, 0.1, 0.25, 0),
                 ("right", 0.1, 0.25, 0.1375, 0.25, 2)]
        s = SearchState(0.0, 0.4)
        for winner, s0, e0, s1, e1, src in table:
            assert (s.start, s.end) == pytest.approx((s0, e0))
            s.weights = fresh()
            before = [w.copy() for w in s.weights]
            s = binary_search_update(s, winner)
            assert (s.start, s.end) == pytest.approx((s1, e1))
            for w in s.weights:
                assert np.array_equal(w, before[src])
            # overwritten copies are independent arrays
            assert len({id(w) for w in s.weights}) == 3

    def test_errors(self):
        with pytest.raises(ConfigError):
            binary_search_update(SearchState(0.0, 0.4), "best")
        with pytest.raises(ConfigError):
            binary_search_update(SearchState(0.1, 0.1), "mid")

    def test_ties(self):
        assert pick_winner([1, 1, 1]) == "mid"
        assert pick_winner([2, 1, 2]) == "left"
        assert pick_winner([0, 1, 2]) == "right"


def _mock_run(sigma_star, epochs, warmup, start=0.0, end=0.4):
    net = mlp([2, 2])
    data = Dataset(np.zeros((1, 2)), np.zeros(1, dtype=int))
    cfg = TrainConfig(epochs=epochs, warmup=warmup, start=start, end=end, sigma_d=0.2)
    return trice(net, cfg, data, data,
                 evaluate=lambda w, s, e: -abs(s - sigma_star),
                 train_epoch=lambda w, noise, e, rng: w)


@pytest.mark.parametrize("sigma_star", [0.013, 0.17, 0.2, 0.3512, 0.399])
def test_mock_unimodal_converges(sigma_star):
    res = _mock_run(sigma_star, epochs=60, warmup=2)
    assert res.converged
    assert abs(res.sigma_t - sigma_star) <= 1e-4


def test_mock_keeps_optimum_inside_range():
    res = _mock_run(0.2833, epochs=8, warmup=2)
    for rec in res.history:
        assert rec["start"] <= 0.2833 <= rec["end"]


def test_degenerate_range_trains_single_model():
    data = generate_synthetic(2, 20, seed=1, dim=4)
    net = mlp([4, 2])
    cfg = TrainConfig(epochs=3, warmup=1, start=0.05, end=0.05, sigma_d=0.1, batch_size=8)
    calls = []
    res = trice(net, cfg, data, data, evaluate=lambda *a: calls.append(a) or 0.0)
    assert not calls and res.converged and res.sigma_t == 0.05
    # same trajectory as plain noise training at sigma_t = start
    w = init_weights(net, substream(0, 0))
    r = substream(0, 1, 0)
    for epoch in range(3):
        w = noise_train_epoch(net, w, NoiseSpec("rc", 0.05, 2.0), data, cfg.lr_at(epoch), r, 8,
                              cfg.quant, True)
    for a, b in zip(res.weights.layers, w.layers):
        assert np.array_equal(a.weight, b.weight)


def test_trice_default_evaluator_and_log():
    data = generate_synthetic(3, 40, seed=2, dim=8)
    net = mlp([8, 6, 3])
    cfg = TrainConfig(epochs=4, warmup=1, sigma_d=0.1, n_train=5, batch_size=16)
    buf = io.StringIO()
    res = trice(net, cfg, data, data, log_file=buf)
    assert 0 <= res.sigma_t <= 0.2
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1, 2, 3]
    assert lines[0]["chosen"] is None and lines[1]["chosen"] in ("left", "mid", "right")
    for key in ("start", "end", "kpp_left", "kpp_mid", "kpp_right"):
        assert key in lines[-1]
    again = trice(net, cfg, data, data)
    assert again.sigma_t == res.sigma_t
    assert np.array_equal(again.weights.layers[0].weight, res.weights.layers[0].weight)


class TestNoiseTraining:
    def test_zero_noise_equals_vanilla(self):
        data = generate_synthetic(2, 30, seed=0, dim=4)
        net = mlp([4, 5, 2])
        cfg = TrainConfig(epochs=2, warmup=0, batch_size=10)
        a = train(net, cfg, data, NoiseSpec("gaussian", 0.0))
        b = train_baseline(net, cfg, "none", data)
        for x, y in zip(a.layers, b.layers):
            assert np.array_equal(x.weight, y.weight)

    def test_single_batch_epoch_is_one_step(self):
        data = generate_synthetic(2, 5, seed=0, dim=4)
        net = mlp([4, 2])
        w = init_weights(net, np.random.default_rng(0))
        out = noise_train_epoch(net, w, None, data, 0.1, np.random.default_rng(1), batch_size=64)
        _, g = loss_and_grad(net, w, data.inputs, data.labels)
        ref = sgd_step(w, g, 0.1)
        np.testing.assert_allclose(out.layers[0].weight, ref.layers[0].weight, rtol=0, atol=1e-14)

    def test_quadratic_expected_update(self):
        # f(w) = (w - 1)^2: E[step] = -lr (f'(w) + m f''(w))
        n, w0, lr = 10**5, 0.4, 0.1
        noise = NoiseSpec("rc", 0.3, 1.0)
        w = np.full(n, w0)
        new = noise_injected_step(w, lambda x: 2 * (x - 1), noise, lr, np.random.default_rng(0))
        step = new - w
        pred = -lr * (2 * (w0 - 1) + analytic_mean(noise) * 2)
        assert abs(step.mean() - pred) < 3 * step.std() / math.sqrt(n)

    def test_cubic_expected_update(self):
        # f(w) = w^3/3: f' = w^2, f'' = 2w, f''' = 2
        n, w0, lr = 10**5, 0.5, 0.2
        for noise in (NoiseSpec("gaussian", 0.4), NoiseSpec("rc", 0.4, 0.5)):
            step = noise_injected_step(np.full(n, w0), np.square, noise, lr,
                                       np.random.default_rng(3)) - w0
            pred = -lr * (w0 ** 2 + analytic_mean(noise) * 2 * w0 + analytic_second_moment(noise))
            assert abs(step.mean() - pred) < 3 * step.std() / math.sqrt(n)

    def test_gaussian_baseline_scale(self):
        rng = np.random.default_rng(0)
        net = mlp([200, 100])
        w = init_weights(net, rng)
        q = QuantConfig(4, 2)
        out = inject_noise(w, NoiseSpec("gaussian", 0.1), rng, q, quant_aware=True,
                           device=DeviceModel("rram", 0.1))
        dev = out.layers[0].weight - quantize_weights(w, q).layers[0].weight
        expect = w.layers[0].max_abs / 15 * 0.1 * math.sqrt(17)
        assert dev.std() == pytest.approx(expect, rel=0.02)
        assert np.array_equal(out.layers[0].bias, w.layers[0].bias)

    def test_baselines_deterministic(self):
        data = generate_synthetic(2, 20, seed=0, dim=4)
        net = mlp([4, 3, 2])
        cfg = TrainConfig(epochs=2, warmup=0, batch_size=8, seed=4)
        for method in ("none", "gaussian"):
            a = train_baseline(net, cfg, method, data)
            b = train_baseline(net, cfg, method, data)
            assert np.array_equal(a.layers[0].weight, b.layers[0].weight)
        with pytest.raises(ConfigError):
            train_baseline(net, cfg, "adam", data)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_epoch(self):
        data = Dataset(np.full((4, 2), 1e308), np.array([0, 1, 0, 1]))
        net = mlp([2, 2])
        with pytest.raises(NumericError, match="epoch 0"):
            train(net, TrainConfig(epochs=2, warmup=0, quant_aware=False), data, None)
