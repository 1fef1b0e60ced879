import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdvq import gradcore as G
from rdvq import losses
from rdvq import tokenizer as tk
from rdvq import vq
from rdvq.gradcore import DimensionError, Parameter


def log_softmax(x):
    x = x - x.max(-1, keepdims=True)
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


class TestRateSoft:
    def test_one_hot_under_uniform(self):
        p = np.eye(64)[[3, 9, 40]][None]
        lq = np.full((1, 3, 64), -math.log(64))
        assert losses.rate_soft(p, lq).item() == pytest.approx(6.0, abs=1e-12)

    def test_matching_distributions_give_entropy(self):
        lq = log_softmax(np.random.default_rng(0).normal(size=(2, 4, 8)))
        q = np.exp(lq)
        entropy = -(q * lq).sum(-1).mean() / math.log(2)
        assert losses.rate_soft(q, lq).item() == pytest.approx(entropy, abs=1e-12)

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        p = np.exp(log_softmax(rng.normal(size=(1, 5, 8))))
        lq = log_softmax(rng.normal(size=(1, 5, 8)))
        total = 0.0
        for l in range(5):
            for k in range(8):
                total -= p[0, l, k] * lq[0, l, k] / math.log(2)
        assert losses.rate_soft(p, lq).item() == pytest.approx(total / 5, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_cross_entropy_bound_and_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        lq = log_softmax(rng.normal(size=(1, 6, 7)))
        p = np.exp(log_softmax(rng.normal(size=(1, 6, 7))))
        r = losses.rate_soft(p, lq).item()
        # Gibbs: cross-entropy of p under q >= entropy of p
        h_p = -(p * np.log(p)).sum(-1).mean() / math.log(2)
        assert r >= h_p - 1e-12
        perm = rng.permutation(7)
        assert losses.rate_soft(p[..., perm], lq[..., perm]).item() == pytest.approx(r, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            losses.rate_soft(np.ones((1, 2, 4)) / 4, np.zeros((1, 3, 4)))

    def test_gradient_bridge(self):
        rng = np.random.default_rng(2)
        cb = vq.Codebook(Parameter(rng.normal(size=(8, 3)), "codebook"))
        cb.freeze()
        y = Parameter(rng.normal(size=(1, 5, 3)), "y")
        lq = log_softmax(rng.normal(size=(1, 5, 8)))

        def build():
            return losses.rate_soft(vq.soft_distribution(y, cb, 0.5), lq)

        rep = G.grad_check(build, tolerance=1e-4, params=[y])
        assert rep.passed, rep.errors
        assert rep.analytic_norms["y"] > 0
        # the hard path gives the encoder nothing
        onehot = np.eye(8)[vq.assign_hard(y, cb).y_ind]
        rate = G.add(losses.rate_soft(onehot, lq), G.scale(G.sum(y), 0.0))
        assert not G.backward(rate, [y])["y"].any()


class TestRateHard:
    def test_uniform(self):
        lq = np.full((10, 64), -math.log(64))
        assert losses.rate_hard(np.arange(10), lq) == pytest.approx(60.0)

    def test_near_certain(self):
        lq = np.full((4, 16), math.log(1e-12))
        lq[np.arange(4), [1, 2, 3, 4]] = math.log(1 - 15e-12)
        assert losses.rate_hard([1, 2, 3, 4], lq) < 1e-9

    def test_soft_converges_to_hard(self):
        rng = np.random.default_rng(3)
        cb = vq.Codebook(Parameter(rng.normal(size=(8, 3)), "codebook"))
        y = rng.normal(size=(1, 6, 3))
        lq = log_softmax(rng.normal(size=(1, 6, 8)))
        hard_per_token = losses.rate_hard(vq.assign_hard(y, cb).y_ind, lq) / 6
        gaps = [abs(losses.rate_soft(vq.soft_distribution(y, cb, t), lq).item() - hard_per_token)
                for t in (1.0, 0.1, 0.01, 1e-4)]
        assert gaps[-1] < 1e-8
        assert gaps[-1] <= gaps[0]


class TestDistortion:
    def setup_method(self):
        self.cb = vq.Codebook(Parameter(np.random.default_rng(0).normal(size=(8, 3)), "codebook"))

    def test_zero(self):
        x = np.random.default_rng(1).normal(size=(1, 3, 4, 4))
        y = self.cb.entries.value[[0, 3]][None]
        total, comps = losses.distortion(x, x, y, vq.assign_hard(y, self.cb))
        assert total.item() == 0.0
        assert set(comps) == {"mse", "codebook_loss"}

    def test_constant_offset(self):
        x = np.zeros((1, 3, 4, 4))
        y = self.cb.entries.value[[1]][None]
        _, comps = losses.distortion(x, x + 0.1, y, vq.assign_hard(y, self.cb))
        assert comps["mse"].item() == pytest.approx(0.01)

    def test_extra_term_hook(self):
        x = np.zeros((1, 3, 2, 2))
        y = self.cb.entries.value[[1]][None]

        def l1(a, b):
            return G.mean(G.clamp_min(G.sub(b, a), 0.0))

        total, comps = losses.distortion(x, x + 0.5, y, vq.assign_hard(y, self.cb), extra=[l1])
        assert comps["l1"].item() == pytest.approx(0.5)
        assert total.item() == pytest.approx(0.25 + 0.5)

    def test_encoder_gradient_through_straight_through(self):
        cfg = tk.TokenizerConfig(num_stages=2, base_channels=4, channel_multipliers=(1, 1, 1),
                                 latent_dim=3, scale_factors=(2, 4), groups=2)
        rng = np.random.default_rng(4)
        params = tk.init_params(cfg, rng)
        cb = vq.Codebook(Parameter(rng.normal(size=(8, 3)) * 0.1, "codebook"))
        x = rng.uniform(-1, 1, (1, 3, 4, 4))

        def build():
            y, layout = tk.flatten(tk.encode(x, cfg, params))
            hard = vq.assign_hard(y, cb)
            x_hat = tk.decode(tk.unflatten(hard.y_q, layout), cfg, params)
            return losses.distortion(x, x_hat, y, hard)[0]

        target = params["enc.s0.down.w"]
        grads = G.backward(build(), [target])
        assert np.abs(grads[target.name]).sum() > 0


class TestSchedule:
    def test_table(self):
        assert losses.schedule("low", 0) == losses.RDConfig(4.8, 0.1, "low")
        assert losses.schedule("high", 1) == losses.RDConfig(1.2, 0.01, "high")

    def test_closed(self):
        entries = losses.all_schedule_entries()
        assert sorted((e.tau, e.lam) for e in entries) == \
            [(0.01, 0.8), (0.01, 1.2), (0.1, 4.8), (0.1, 7.2), (0.1, 12.0)]
        with pytest.raises(KeyError):
            losses.schedule("mid", 0)
        with pytest.raises(IndexError):
            losses.schedule("high", 2)
        with pytest.raises(KeyError):
            losses.schedule_for_lambda(2.0)

    def test_lookup_by_lambda(self):
        assert losses.schedule_for_lambda(12).tau == 0.1
        assert losses.schedule_for_lambda(0.8).tau == 0.01


class TestObjective:
    def test_total_is_distortion_plus_weighted_rate(self):
        d, r = G.constant(np.array(0.3)), G.constant(np.array(2.0))
        assert losses.rd_objective(d, r, 1.2).item() == pytest.approx(0.3 + 2.4)
        assert losses.rd_objective(d, None, 1.2) is d

    def test_report_row(self):
        rep = losses.LossReport(42.0, 0.5, 0.1, 1.0, {"mse": 0.08, "codebook_loss": 0.02})
        row = rep.csv_row(7)
        assert tuple(row) == losses.LOG_COLUMNS
        assert row["step"] == 7 and row["mse"] == 0.08
