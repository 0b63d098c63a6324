from fractions import Fraction

import numpy as np
import pytest
import torch

from costar.decoder import (
    OutcomeDecoder,
    OutcomeModel,
    TrainConfig,
    TrainingDiverged,
    anchor_validity_mask,
    anchored_targets,
    factual_loss,
    finetune,
    load_model,
    make_weights,
    rollout_estimate,
    save_model,
)
from costar.data import apply_normalization, fit_normalization
from costar.encoder import EncoderConfig, HistoryEncoder

torch.manual_seed(0)


def tiny_encoder(**overrides):
    base = dict(d_x=1, d_a=2, d_y=1, d_v=1, d_model=8, n_layers=1, n_heads=2, dropout=0.0)
    base.update(overrides)
    return HistoryEncoder(EncoderConfig(**base))


class TestWeights:
    def test_uniform(self):
        w = make_weights("uniform", 4)
        assert w.as_array().tolist() == [0.25, 0.25, 0.25, 0.25]

    def test_inverse(self):
        w = make_weights("inv", 2)
        assert w.fractions == (Fraction(2, 3), Fraction(1, 3))

    def test_squared_inverse(self):
        w = make_weights("sq_inv", 2)
        assert w.fractions == (Fraction(4, 5), Fraction(1, 5))
        np.testing.assert_allclose(w.as_array(), [0.8, 0.2])

    def test_sum_exactly_one_all_schemes(self):
        for scheme in ("uniform", "inv", "sq_inv"):
            for tau in range(1, 65):
                w = make_weights(scheme, tau)
                assert sum(w.fractions) == 1
                assert all(f > 0 for f in w.fractions)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            make_weights("exp", 3)
        with pytest.raises(ValueError):
            make_weights("uniform", 0)


class TestFactualLoss:
    def test_zero_at_perfect_estimates(self):
        w = make_weights("uniform", 3)
        x = torch.randn(5, 3, 1)
        assert factual_loss(x, x.clone(), w).item() == 0.0

    def test_uniform_hand_value(self):
        w = make_weights("uniform", 2)
        est = torch.tensor([[[1.0], [2.0]]])
        tgt = torch.tensor([[[0.0], [0.0]]])  # squared errors 1.0, 4.0
        assert factual_loss(est, tgt, w).item() == pytest.approx(2.5, abs=1e-12)

    def test_sq_inv_hand_value(self):
        w = make_weights("sq_inv", 2)
        est = torch.tensor([[[1.0], [2.0]]])
        tgt = torch.tensor([[[0.0], [0.0]]])
        assert factual_loss(est, tgt, w).item() == pytest.approx(1.6, abs=1e-6)

    def test_shape_mismatch_rejected(self):
        w = make_weights("uniform", 2)
        with pytest.raises(ValueError):
            factual_loss(torch.zeros(1, 2, 1), torch.zeros(1, 3, 1), w)


class TestDecoderMasking:
    def test_later_plan_steps_never_leak_backward(self):
        dec = OutcomeDecoder(d_model=8, d_a=2, d_y=1, tau=6)
        dec.eval()
        z = torch.randn(3, 8)
        plan = torch.randint(0, 2, (3, 6, 2)).float()
        with torch.no_grad():
            base = dec(z, plan)
            for i in range(1, 7):  # flip plan step i (1-indexed)
                other = plan.clone()
                other[:, i - 1] = 1.0 - other[:, i - 1]
                out = dec(z, other)
                assert torch.equal(out[:, : i - 1], base[:, : i - 1])
                assert not torch.allclose(out[:, i - 1 :], base[:, i - 1 :])

    def test_single_horizon_uses_immediate_treatment_only(self):
        dec = OutcomeDecoder(d_model=8, d_a=2, d_y=1, tau=1)
        dec.eval()
        z = torch.randn(2, 8)
        a = torch.tensor([[[1.0, 0.0]], [[1.0, 0.0]]])
        b = torch.tensor([[[0.0, 1.0]], [[0.0, 1.0]]])
        with torch.no_grad():
            assert not torch.allclose(dec(z, a), dec(z, b))
            assert torch.equal(dec(z, a)[0], dec(z, a.clone())[0])

    def test_eval_mode_deterministic(self):
        dec = OutcomeDecoder(d_model=8, d_a=2, d_y=1, tau=4)
        dec.eval()
        z = torch.randn(2, 8)
        plan = torch.randint(0, 2, (2, 4, 2)).float()
        with torch.no_grad():
            assert torch.equal(dec(z, plan), dec(z, plan))

    def test_plan_length_checked(self):
        dec = OutcomeDecoder(d_model=8, d_a=2, d_y=1, tau=4)
        with pytest.raises(ValueError):
            dec(torch.randn(1, 8), torch.zeros(1, 3, 2))


class TestAnchoredEstimates:
    def test_one_pass_matches_per_prefix_forward(self):
        torch.manual_seed(1)
        enc = tiny_encoder()
        model = OutcomeModel(enc, tau=3)
        model.eval()
        dynamic = torch.randn(2, 10, 4)
        statics = torch.randn(2, 1)
        treatments = torch.randint(0, 2, (2, 10, 2)).float()
        with torch.no_grad():
            batched, _ = model.anchored_estimates(dynamic, statics, treatments)
            for t in range(1, 8):  # anchors 1 .. T - tau
                plan = treatments[:, t - 1 : t + 2]
                direct = model(dynamic[:, :t], statics, plan)
                assert torch.allclose(batched[:, t - 1], direct, atol=1e-5)

    def test_target_windows(self):
        outcomes = torch.arange(10.0).view(1, 10, 1)
        targets = anchored_targets(outcomes, tau=3)
        assert targets.shape == (1, 7, 3, 1)
        assert targets[0, 0].squeeze().tolist() == [1.0, 2.0, 3.0]  # anchor 1 -> y[1:4]
        assert targets[0, 6].squeeze().tolist() == [7.0, 8.0, 9.0]

    def test_validity_mask(self):
        lengths = torch.tensor([10, 5])
        mask = anchor_validity_mask(lengths, t_max=10, tau=3)
        assert mask.shape == (2, 7)
        assert mask[0].all()
        assert mask[1].tolist() == [True, True, False, False, False, False, False]


class TestGradients:
    def test_factual_loss_gradients_match_finite_differences(self):
        torch.manual_seed(2)
        enc = tiny_encoder().double()
        model = OutcomeModel(enc, tau=3).double()
        w = make_weights("inv", 3)
        dynamic = torch.randn(2, 6, 4, dtype=torch.float64)
        statics = torch.randn(2, 1, dtype=torch.float64)
        plan = torch.randint(0, 2, (2, 3, 2)).double()
        targets = torch.randn(2, 3, 1, dtype=torch.float64)

        def loss_fn():
            return factual_loss(model(dynamic, statics, plan), targets, w)

        loss = loss_fn()
        loss.backward()
        rng = np.random.default_rng(3)
        params = [p for p in model.parameters() if p.grad is not None]
        for _ in range(20):
            p = params[rng.integers(len(params))]
            flat = p.detach().reshape(-1)
            j = int(rng.integers(flat.numel()))
            grad = p.grad.reshape(-1)[j].item()
            h = 1e-3
            with torch.no_grad():
                flat[j] += h
                up = loss_fn().item()
                flat[j] -= 2 * h
                down = loss_fn().item()
                flat[j] += h
            fd = (up - down) / (2 * h)
            denom = max(abs(fd), abs(grad), 1e-8)
            assert abs(fd - grad) / denom < 1e-4


def _toy_trajectories(n, horizon, seed):
    from costar.pkpd import PKPDParams, PolicyParams, simulate_trajectory

    params = PKPDParams(
        carrying_capacity=30.0,
        growth_rate=0.08,
        chemo_sensitivity=0.05,
        radio_linear=0.05,
        radio_quadratic=0.005,
        noise_std=0.0,
    )
    rng = np.random.default_rng(seed)
    trajs = [
        simulate_trajectory(params, PolicyParams.from_gamma(0.0), horizon, np.random.default_rng(rng.integers(1 << 31)))
        for _ in range(n)
    ]
    stats = fit_normalization(trajs)
    return [apply_normalization(t, stats) for t in trajs]


class TestFinetune:
    def test_smoke_and_improvement(self):
        torch.manual_seed(4)
        train = _toy_trajectories(24, 16, seed=0)
        val = _toy_trajectories(8, 16, seed=1)
        enc = tiny_encoder()
        cfg = TrainConfig(tau=3, scheme="uniform", batch_size=8, epochs=8, seed=0)
        log: list = []
        model, metric = finetune(enc, train, val, cfg, log=log)
        assert np.isfinite(metric)
        assert len(log) == 9  # initial candidate plus one record per epoch
        best = min(r["val_metric"] for r in log)
        assert best <= log[0]["val_metric"]  # best-by-validation selection
        assert metric == pytest.approx(best)
        assert best < log[0]["val_metric"]  # training actually helped here

    def test_trained_model_uses_the_plan(self):
        # on treatment-sensitive noise-free data, different plans must give
        # different estimates
        torch.manual_seed(5)
        train = _toy_trajectories(30, 16, seed=2)
        val = _toy_trajectories(10, 16, seed=3)
        enc = tiny_encoder()
        cfg = TrainConfig(tau=3, scheme="uniform", batch_size=8, epochs=15, seed=0)
        model, _ = finetune(enc, train, val, cfg)
        from costar.data import history_from_trajectory

        hist = history_from_trajectory(val[0], 8)
        dynamic = torch.as_tensor(hist.dynamic, dtype=torch.float32)
        statics = torch.as_tensor(hist.statics, dtype=torch.float32)
        treated = rollout_estimate(model, dynamic, statics, torch.ones(3, 2))
        untreated = rollout_estimate(model, dynamic, statics, torch.zeros(3, 2))
        assert not torch.allclose(treated, untreated, atol=1e-4)

    def test_divergence_detected(self):
        train = _toy_trajectories(8, 10, seed=4)
        cfg = TrainConfig(tau=2, batch_size=4, epochs=3, learning_rate=1e12, seed=0)
        with pytest.raises(TrainingDiverged):
            finetune(tiny_encoder(), train, train, cfg)


class TestRolloutEstimate:
    def test_single_pass_per_call(self, monkeypatch):
        enc = tiny_encoder()
        model = OutcomeModel(enc, tau=4)
        model.eval()
        calls = {"n": 0}
        original = HistoryEncoder.forward

        def counting_forward(self, *args, **kwargs):
            calls["n"] += 1
            return original(self, *args, **kwargs)

        monkeypatch.setattr(HistoryEncoder, "forward", counting_forward)
        dynamic = torch.randn(9, 4)
        statics = torch.randn(1)
        plan = torch.randint(0, 2, (4, 2)).float()
        out = rollout_estimate(model, dynamic, statics, plan)
        assert out.shape == (4, 1)
        assert calls["n"] == 1  # non-autoregressive: one encoder pass for all horizons

    def test_identical_calls_identical_outputs(self):
        model = OutcomeModel(tiny_encoder(), tau=6)
        dynamic = torch.randn(7, 4)
        statics = torch.randn(1)
        plan = torch.randint(0, 2, (6, 2)).float()
        a = rollout_estimate(model, dynamic, statics, plan)
        b = rollout_estimate(model, dynamic, statics, plan)
        assert torch.equal(a, b)
        assert a.shape == (6, 1)  # horizons 1..6 jointly


class TestModelIO:
    def test_roundtrip(self, tmp_path):
        model = OutcomeModel(tiny_encoder(), tau=3)
        model.eval()
        dynamic = torch.randn(1, 8, 4)
        statics = torch.randn(1, 1)
        plan = torch.randint(0, 2, (1, 3, 2)).float()
        with torch.no_grad():
            before = model(dynamic, statics, plan)
        path = save_model(model, tmp_path / "model.pt", extra={"scheme": "inv"})
        loaded, extra = load_model(path)
        with torch.no_grad():
            after = loaded(dynamic, statics, plan)
        assert torch.equal(before, after)
        assert extra == {"scheme": "inv"}
