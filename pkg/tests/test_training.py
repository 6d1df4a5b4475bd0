import numpy as np
import pytest

from tissueop.errors import TrainingDivergedError
from tissueop.grid import GridField, GridSpec, Sample, extract_boundary, trapezoid_weights
from tissueop.ifno import IfnoParams, ModelConfig, init_params
from tissueop.training import (
    AdamState,
    TrainConfig,
    adam_step,
    data_loss,
    fd_gradient_check,
    grad,
    hybrid_loss,
    physics_loss,
    train,
)

from conftest import random_sample

TINY = ModelConfig(width=2, proj_width=3, modes=(2, 2), depth=2)
SPEC5 = GridSpec(5, 5, (1.0, 1.0))


def zeroed_projection(params: IfnoParams) -> IfnoParams:
    for sub in (params.sub_x, params.sub_y):
        sub.proj_out_weight = np.zeros_like(sub.proj_out_weight)
        sub.proj_out_bias = np.zeros(())
    return params


def zero_field_samples(n, spec=SPEC5):
    fld = GridField(np.zeros((spec.nx, spec.ny, 2)), spec.extent)
    return [
        Sample(boundary=extract_boundary(fld), field=fld, protocol_id=1, frame_index=k)
        for k in range(n)
    ]


class TestDataLoss:
    def test_exact_reproduction_is_zero(self):
        params = zeroed_projection(init_params(TINY, 0))
        assert data_loss(params, zero_field_samples(3)) == 0.0

    def test_additive_over_disjoint_sets(self, rng):
        params = init_params(TINY, 1)
        s1 = [random_sample(rng, SPEC5, frame_index=k) for k in range(3)]
        s2 = [random_sample(rng, SPEC5, frame_index=k + 3) for k in range(2)]
        total = data_loss(params, s1 + s2)
        assert total == pytest.approx(data_loss(params, s1) + data_loss(params, s2), rel=1e-12)

    def test_unit_difference_quadrature(self):
        # prediction minus truth identically 1 on the unit square in both
        # channels integrates to exactly 2.0
        params = zeroed_projection(init_params(TINY, 0))
        for sub in (params.sub_x, params.sub_y):
            sub.proj_out_bias = np.array(1.0)  # constant prediction 1
        assert data_loss(params, zero_field_samples(1)) == pytest.approx(2.0, abs=1e-14)

    def test_quadrature_oracle_random(self, rng):
        # independent quadrature-sum evaluation of one sample's loss
        params = init_params(TINY, 3)
        sample = random_sample(rng, SPEC5)
        from tissueop.ifno import forward

        pred = forward(sample.boundary, params).values
        w = trapezoid_weights(SPEC5)
        expected = float(np.einsum("ij,ijc->", w, (pred - sample.field.values) ** 2))
        assert data_loss(params, [sample]) == pytest.approx(expected, rel=1e-12)


class TestPhysicsLoss:
    def test_zeroed_projection_gives_zero(self):
        params = zeroed_projection(init_params(TINY, 0))
        assert physics_loss(params, SPEC5) == 0.0

    def test_equals_data_loss_on_zero_sample(self):
        params = init_params(TINY, 5)
        assert physics_loss(params, SPEC5) == pytest.approx(
            data_loss(params, zero_field_samples(1)), rel=1e-14
        )


class TestHybridLoss:
    def test_gamma_zero_equals_data_loss_bitwise(self, rng):
        params = init_params(TINY, 2)
        samples = [random_sample(rng, SPEC5, frame_index=k) for k in range(2)]
        assert hybrid_loss(params, samples, 0.0) == data_loss(params, samples)

    def test_weighted_sum_arithmetic(self, rng):
        params = init_params(TINY, 2)
        samples = [random_sample(rng, SPEC5)]
        d = data_loss(params, samples)
        p = physics_loss(params, SPEC5)
        assert hybrid_loss(params, samples, 1.0) == pytest.approx(d + p, rel=1e-14)
        assert hybrid_loss(params, samples, 2.5) == pytest.approx(d + 2.5 * p, rel=1e-14)

    def test_monotone_in_gamma(self, rng):
        params = init_params(TINY, 2)
        samples = [random_sample(rng, SPEC5)]
        values = [hybrid_loss(params, samples, g) for g in (0.0, 0.5, 1.0, 2.0)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_negative_gamma_rejected(self, rng):
        with pytest.raises(ValueError):
            hybrid_loss(init_params(TINY, 0), [random_sample(rng, SPEC5)], -1.0)


class TestGrad:
    def test_zero_at_global_minimum(self):
        params = zeroed_projection(init_params(TINY, 0))
        loss, grads = grad(params, zero_field_samples(2))
        assert loss == 0.0
        # output is identically zero and matches the target, so the
        # cotangent at the output is zero and every gradient block is 0
        for name, g in grads.items():
            assert np.all(np.asarray(g) == 0.0), name

    def test_directional_probe_smooth(self, rng):
        cfg = ModelConfig(width=2, proj_width=3, modes=(2, 2), depth=2, activation="softplus")
        params = init_params(cfg, 7)
        samples = [random_sample(rng, SPEC5, frame_index=k) for k in range(3)]
        loss0, grads = grad(params, samples, gamma=1.0)

        blocks = params.blocks()
        direction = {}
        for name, arr in blocks.items():
            if np.iscomplexobj(arr):
                direction[name] = rng.standard_normal(arr.shape) + 1j * rng.standard_normal(arr.shape)
            else:
                direction[name] = rng.standard_normal(arr.shape)

        eps = 1e-6

        def loss_at(t):
            moved = {n: blocks[n] + t * direction[n] for n in blocks}
            return hybrid_loss(params.with_blocks(moved), samples, 1.0)

        fd = (loss_at(eps) - loss_at(-eps)) / (2 * eps)
        an = 0.0
        for name, g in grads.items():
            d = direction[name]
            if np.iscomplexobj(g):
                an += float(np.sum(g.real * d.real + g.imag * d.imag))
            else:
                an += float(np.sum(g * d))
        assert abs(fd - an) / max(abs(fd), 1e-10) < 1e-6

    def test_gradient_accumulates_over_shared_layers(self, rng):
        # deeper net with identical arrays must not equal the shallow
        # gradient: reuse of the shared layer accumulates contributions
        cfg2 = ModelConfig(width=2, proj_width=2, modes=(2, 2), depth=2, activation="softplus")
        params2 = init_params(cfg2, 3)
        samples = [random_sample(rng, SPEC5)]
        _, g2 = grad(params2, samples)
        from tissueop.ifno import shallow_to_deep

        params4 = shallow_to_deep(params2, 4)
        _, g4 = grad(params4, samples)
        assert not np.allclose(g2["x.mix_weight"], g4["x.mix_weight"])


class TestFdGradientCheck:
    def test_central_difference_formula_is_exact_on_quadratics(self, rng):
        # FD-oracle sanity: a quadratic has zero truncation error at any
        # step, so a large step isolates roundoff and the central
        # difference equals the exact derivative 2x to 1e-10
        x = rng.standard_normal(12)
        eps = 1e-2
        for idx in range(12):
            e = np.zeros(12)
            e[idx] = eps
            fd = (np.sum((x + e) ** 2) - np.sum((x - e) ** 2)) / (2 * eps)
            assert abs(fd - 2 * x[idx]) < 1e-10 * max(1.0, abs(2 * x[idx]))

    def test_tiny_net_all_blocks_below_tolerance(self, rng):
        cfg = ModelConfig(width=2, proj_width=3, modes=(2, 2), depth=2, activation="softplus")
        params = init_params(cfg, 7)
        samples = [random_sample(rng, SPEC5, frame_index=k) for k in range(3)]
        report = fd_gradient_check(params, samples, eps=1e-6, gamma=1.0)
        assert max(v["max_rel"] for v in report.values()) < 1e-4

    def test_report_covers_all_blocks(self, rng):
        cfg = ModelConfig(width=2, proj_width=2, modes=(2, 2), depth=1, activation="softplus")
        params = init_params(cfg, 0)
        report = fd_gradient_check(params, [random_sample(rng, SPEC5)], max_coords_per_block=2)
        assert len(report) == 18
        prefixes = {name.split(".")[0] for name in report}
        assert prefixes == {"x", "y"}

    def test_requires_smooth_activation(self, rng):
        params = init_params(TINY, 0)
        with pytest.raises(ValueError, match="smooth activation"):
            fd_gradient_check(params, [random_sample(rng, SPEC5)])


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = init_params(TINY, 1)
        grads = {n: np.zeros_like(a) for n, a in params.blocks().items()}
        state = AdamState.fresh(params)
        new, _ = adam_step(params, grads, state, lr=0.1)
        for name, arr in params.blocks().items():
            assert np.array_equal(arr, new.blocks()[name]), name

    def test_first_step_matches_reference_formula(self):
        # scalar theta=0, g=2, lr=0.1: m_hat=2, v_hat=4
        # update = lr * m_hat / (sqrt(v_hat) + eps) ~= 0.1
        params = init_params(TINY, 1)
        grads = {n: np.zeros_like(a) for n, a in params.blocks().items()}
        grads["x.proj_out_bias"] = np.array(2.0)
        state = AdamState.fresh(params)
        new, state = adam_step(params, grads, state, lr=0.1)
        expected = -0.1 * 2.0 / (np.sqrt(4.0) + 1e-8)
        got = float(new.sub_x.proj_out_bias) - float(params.sub_x.proj_out_bias)
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(-0.1, rel=1e-7)

    def test_constant_gradient_recurrence_matches_scalar_oracle(self):
        # independent scalar recurrence oracle
        g_val, lr, b1, b2, eps = 0.7, 0.05, 0.9, 0.999, 1e-8
        theta_oracle, m, v = 0.0, 0.0, 0.0
        params = init_params(TINY, 1)
        start = float(params.sub_y.proj_out_bias)
        grads = {n: np.zeros_like(a) for n, a in params.blocks().items()}
        grads["y.proj_out_bias"] = np.array(g_val)
        state = AdamState.fresh(params)
        cur = params
        for t in range(1, 6):
            m = b1 * m + (1 - b1) * g_val
            v = b2 * v + (1 - b2) * g_val**2
            theta_oracle -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            cur, state = adam_step(cur, grads, state, lr=lr)
        assert float(cur.sub_y.proj_out_bias) - start == pytest.approx(theta_oracle, abs=1e-12)

    def test_complex_block_updates_via_real_imag_parts(self, rng):
        params = init_params(TINY, 1)
        grads = {n: np.zeros_like(a) for n, a in params.blocks().items()}
        gk = np.zeros_like(params.sub_x.spectral.kernel)
        gk[0, 0, 0, 0] = 1.0 + 0.0j  # gradient only on the real part
        grads["x.spectral_kernel"] = gk
        state = AdamState.fresh(params)
        new, _ = adam_step(params, grads, state, lr=0.1)
        delta = new.sub_x.spectral.kernel - params.sub_x.spectral.kernel
        assert delta[0, 0, 0, 0].real == pytest.approx(-0.1, rel=1e-6)
        assert delta[0, 0, 0, 0].imag == 0.0
        delta[0, 0, 0, 0] = 0.0
        assert np.all(delta == 0.0)


class TestTrainLoop:
    def test_learning_rate_schedule_paper_values(self):
        cfg = TrainConfig()
        assert cfg.learning_rate(0) == pytest.approx(3e-3)
        assert cfg.learning_rate(99) == pytest.approx(3e-3)
        assert cfg.learning_rate(100) == pytest.approx(1.5e-3)
        assert cfg.learning_rate(199) == pytest.approx(1.5e-3)
        assert cfg.learning_rate(200) == pytest.approx(7.5e-4)

    def test_constant_rate_flag(self):
        cfg = TrainConfig(decay_during_training=False)
        assert cfg.learning_rate(500) == pytest.approx(3e-3)

    def test_history_lr_matches_schedule(self, rng):
        samples = [random_sample(rng, SPEC5, frame_index=k, scale=0.1) for k in range(4)]
        cfg = TrainConfig(epochs_per_depth=12, lr_decay_every=5, depth_schedule=(1,), seed=0)
        _, hist = train(samples, TINY, cfg)
        assert hist.lr[:5] == [3e-3] * 5
        assert hist.lr[5:10] == [1.5e-3] * 5
        assert hist.lr[10:12] == [7.5e-4] * 2

    def test_deterministic_given_seed(self, rng):
        samples = [random_sample(rng, SPEC5, frame_index=k, scale=0.2) for k in range(4)]
        cfg = TrainConfig(epochs_per_depth=5, depth_schedule=(1, 2), seed=3, batch_size=2)
        p1, h1 = train(samples, TINY, cfg)
        p2, h2 = train(samples, TINY, cfg)
        assert h1.data_loss == h2.data_loss
        for name, arr in p1.blocks().items():
            assert np.array_equal(arr, p2.blocks()[name]), name

    def test_invalid_schedule_rejected(self):
        from tissueop.errors import ConfigError

        with pytest.raises(ConfigError):
            TrainConfig(depth_schedule=(4, 2))
        with pytest.raises(ConfigError):
            TrainConfig(depth_schedule=())
        with pytest.raises(ConfigError):
            TrainConfig(lr0=0.0)

    def test_divergence_raises_with_diagnostics(self, rng):
        samples = [random_sample(rng, SPEC5, frame_index=k, scale=5.0) for k in range(3)]
        # an absurd rate overflows the forward pass within an epoch
        cfg = TrainConfig(epochs_per_depth=200, lr0=1e50, depth_schedule=(2,), seed=0)
        with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as excinfo:
            train(samples, TINY, cfg)
        assert excinfo.value.history is not None
        assert excinfo.value.params is not None

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train([], TINY, TrainConfig(epochs_per_depth=1, depth_schedule=(1,)))

    @pytest.mark.slow
    def test_small_synthetic_convergence(self, rng):
        # loss after 500 epochs falls below 1% of the initial loss
        spec = GridSpec(9, 9, (1.0, 1.0))
        from tissueop.grid import node_coordinates

        coords = node_coordinates(spec)
        samples = []
        for k in range(50):
            a, b = rng.uniform(-1, 1, 2)
            vals = np.stack(
                [
                    a * coords[..., 0] * 0.3 + 0.1 * np.sin(coords[..., 0] + b),
                    b * coords[..., 1] * 0.3 + 0.1 * np.cos(coords[..., 1] * a),
                ],
                axis=-1,
            )
            fld = GridField(vals, spec.extent)
            samples.append(Sample(boundary=extract_boundary(fld), field=fld,
                                  protocol_id=1, frame_index=k))
        cfg_model = ModelConfig(width=8, proj_width=16, modes=(4, 4), depth=4)
        cfg = TrainConfig(epochs_per_depth=250, depth_schedule=(2, 4), seed=1)
        _, hist = train(samples, cfg_model, cfg)
        assert min(hist.data_loss) < 0.01 * hist.data_loss[0]
