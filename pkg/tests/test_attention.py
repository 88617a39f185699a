"""Forward-path tests for the representative-attention layer."""

from dataclasses import replace

import numpy as np
import pytest

from rpattn import (
    AttnConfig,
    RPAttnParams,
    gather_assign,
    gather_latents,
    init_params,
    latent_interact,
    local_bypass,
    mass_normalize,
    distribute_global,
    param_count,
    param_shapes,
    project_qkv,
    rpattention_forward,
)
from rpattn.attention import merge_heads, split_heads
from rpattn.errors import ConfigError

import oracles

SMALL = AttnConfig(channels=8, heads=2, num_representatives=3, grid_h=3, grid_w=4)


def _identity_params(config):
    c = config.channels
    d = config.head_dim
    k = config.dwc_kernel
    kernel = np.zeros((k, k, c))
    kernel[k // 2, k // 2, :] = 1.0
    return RPAttnParams(
        w_q=np.eye(c), w_k=np.eye(c), w_v=np.eye(c), w_o=np.eye(c),
        w_g=np.zeros((d, config.num_representatives)),
        w_lq=np.eye(d), w_lk=np.eye(d), w_lv=np.eye(d),
        ln_k_gamma=np.ones(d), ln_k_beta=np.zeros(d),
        ln_v_gamma=np.ones(d), ln_v_beta=np.zeros(d),
        dwc_kernel=kernel, dwc_bias=np.zeros(c),
    )


class TestConfig:
    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            AttnConfig(channels=7, heads=2, num_representatives=3, grid_h=2, grid_w=2)
        with pytest.raises(ConfigError):
            AttnConfig(channels=8, heads=2, num_representatives=0, grid_h=2, grid_w=2)
        with pytest.raises(ConfigError):
            AttnConfig(channels=8, heads=2, num_representatives=3, grid_h=2, grid_w=2,
                       dwc_kernel=2)
        with pytest.raises(ConfigError):
            AttnConfig(channels=8, heads=2, num_representatives=3, grid_h=2, grid_w=2,
                       routing="nearest")

    def test_more_slots_than_tokens_accepted(self):
        cfg = replace(SMALL, num_representatives=20)
        params = init_params(cfg, 0)
        x = np.random.default_rng(0).standard_normal((1, 12, 8))
        y, trace = rpattention_forward(x, params, cfg)
        assert y.shape == x.shape
        assert trace.a.shape == (1, 2, 12, 20)


class TestProjectQKV:
    def test_identity_single_head(self):
        cfg = AttnConfig(channels=4, heads=1, num_representatives=2, grid_h=2, grid_w=2)
        params = _identity_params(cfg)
        x = np.random.default_rng(0).standard_normal((2, 4, 4))
        q, k, v = project_qkv(x, params, cfg)
        for t in (q, k, v):
            assert np.abs(t[:, 0] - x).max() < 1e-15

    def test_zero_input(self):
        params = init_params(SMALL, 0)
        q, k, v = project_qkv(np.zeros((1, 12, 8)), params, SMALL)
        assert not q.any() and not k.any() and not v.any()

    def test_head_slicing_oracle(self):
        rng = np.random.default_rng(1)
        params = init_params(SMALL, 1)
        x = rng.standard_normal((2, 12, 8))
        q, _, _ = project_qkv(x, params, SMALL)
        flat = oracles.matmul_loops(x, params.w_q)
        d = SMALL.head_dim
        for r in range(SMALL.heads):
            assert np.abs(q[:, r] - flat[:, :, r * d:(r + 1) * d]).max() < 1e-12


class TestGatherAssign:
    def test_zero_anchors_give_uniform(self):
        rng = np.random.default_rng(2)
        k = rng.standard_normal((1, 2, 5, 4))
        a = gather_assign(k, np.zeros((4, 3)))
        assert np.abs(a - 1.0 / 3.0).max() < 1e-15

    def test_single_slot_is_one(self):
        rng = np.random.default_rng(3)
        k = rng.standard_normal((1, 1, 4, 3))
        a = gather_assign(k, rng.standard_normal((3, 1)))
        assert np.array_equal(a, np.ones_like(a))

    def test_matches_per_token_softmax_oracle(self):
        rng = np.random.default_rng(4)
        k = rng.standard_normal((1, 1, 4, 3))
        w_g = rng.standard_normal((3, 2))
        a = gather_assign(k, w_g)
        for n in range(4):
            logits = [sum(k[0, 0, n, d] * w_g[d, m] for d in range(3)) for m in range(2)]
            assert np.abs(a[0, 0, n] - oracles.softmax_vec(logits)).max() < 1e-12

    def test_rows_stochastic(self):
        rng = np.random.default_rng(5)
        a = gather_assign(rng.standard_normal((2, 2, 9, 4)), rng.standard_normal((4, 5)))
        assert np.abs(a.sum(axis=-1) - 1.0).max() < 1e-6
        assert (a >= 0).all()


class TestMassNormalize:
    def test_uniform(self):
        n, m, eps = 6, 3, 1e-6
        a = np.full((1, 1, n, m), 1.0 / m)
        a_hat = mass_normalize(a, eps)
        expect = (1.0 / m) / (n / m + eps)
        assert np.abs(a_hat - expect).max() < 1e-15

    def test_zero_column_stays_zero(self):
        a = np.zeros((1, 1, 4, 2))
        a[..., 0] = 0.5
        a_hat = mass_normalize(a, 1e-6)
        assert np.isfinite(a_hat).all()
        assert not a_hat[..., 1].any()

    def test_column_sums(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(0, 1, (2, 2, 7, 3))
        eps = 1e-6
        a_hat = mass_normalize(a, eps)
        s = a.sum(axis=-2)
        assert np.abs(a_hat.sum(axis=-2) - s / (s + eps)).max() < 1e-12
        assert (a_hat.sum(axis=-2) < 1.0).all()


class TestGatherLatents:
    def test_constant_token_collapse(self):
        rng = np.random.default_rng(7)
        token = rng.standard_normal(4)
        k = np.broadcast_to(token, (1, 1, 6, 4)).copy()
        a = gather_assign(k, rng.standard_normal((4, 3)))
        eps = 1e-6
        a_hat = mass_normalize(a, eps)
        k_l, _ = gather_latents(a_hat, k, k)
        s = a.sum(axis=-2)[0, 0]
        for m in range(3):
            assert np.abs(k_l[0, 0, m] - token * s[m] / (s[m] + eps)).max() < 1e-12

    def test_one_hot_permutation(self):
        rng = np.random.default_rng(8)
        n = 5
        k = rng.standard_normal((1, 1, n, 3))
        perm = rng.permutation(n)
        a_hat = np.zeros((1, 1, n, n))
        a_hat[0, 0, np.arange(n), perm] = 1.0
        k_l, v_l = gather_latents(a_hat, k, k)
        inv = np.argsort(perm)
        assert np.abs(k_l[0, 0] - k[0, 0][inv]).max() < 1e-15
        assert np.abs(v_l[0, 0] - k[0, 0][inv]).max() < 1e-15

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(9)
        a_hat = rng.uniform(0, 0.3, (2, 2, 6, 3))
        k = rng.standard_normal((2, 2, 6, 4))
        v = rng.standard_normal((2, 2, 6, 4))
        k_l, v_l = gather_latents(a_hat, k, v)
        for bi in range(2):
            for hi in range(2):
                for m in range(3):
                    expect_k = sum(a_hat[bi, hi, n, m] * k[bi, hi, n] for n in range(6))
                    expect_v = sum(a_hat[bi, hi, n, m] * v[bi, hi, n] for n in range(6))
                    assert np.abs(k_l[bi, hi, m] - expect_k).max() < 1e-12
                    assert np.abs(v_l[bi, hi, m] - expect_v).max() < 1e-12


class TestLatentInteract:
    def test_single_slot_residual_plus_value(self):
        cfg = AttnConfig(channels=8, heads=2, num_representatives=1, grid_h=2, grid_w=2)
        params = init_params(cfg, 0)
        rng = np.random.default_rng(10)
        k_l = rng.standard_normal((1, 2, 1, 4))
        v_l = rng.standard_normal((1, 2, 1, 4))
        k_l_bar, v_l_bar, p_lat, z_l = latent_interact(k_l, v_l, params, cfg)
        assert np.array_equal(p_lat, np.ones_like(p_lat))
        v_t = np.einsum("bhmd,de->bhme", v_l_bar, params.w_lv)
        assert np.abs(z_l - (v_l_bar + v_t)).max() < 1e-12

    def test_zero_value_weights_give_pure_residual(self):
        params = replace(init_params(SMALL, 1), w_lv=np.zeros((4, 4)))
        rng = np.random.default_rng(11)
        k_l = rng.standard_normal((1, 2, 3, 4))
        v_l = rng.standard_normal((1, 2, 3, 4))
        _, v_l_bar, _, z_l = latent_interact(k_l, v_l, params, SMALL)
        assert np.array_equal(z_l, v_l_bar)

    def test_disabled_interact_is_exactly_normalized_values(self):
        cfg = replace(SMALL, enable_interact=False)
        params = init_params(cfg, 2)
        rng = np.random.default_rng(12)
        k_l = rng.standard_normal((1, 2, 3, 4))
        v_l = rng.standard_normal((1, 2, 3, 4))
        _, v_l_bar, p_lat, z_l = latent_interact(k_l, v_l, params, cfg)
        assert p_lat is None
        assert np.array_equal(z_l, v_l_bar)

    def test_matches_step_by_step_oracle(self):
        params = init_params(SMALL, 3)
        rng = np.random.default_rng(13)
        k_l = rng.standard_normal((2, 2, 3, 4))
        v_l = rng.standard_normal((2, 2, 3, 4))
        k_l_bar, v_l_bar, p_lat, z_l = latent_interact(k_l, v_l, params, SMALL)

        k_bar_o = oracles.layer_norm_loops(k_l, params.ln_k_gamma, params.ln_k_beta, SMALL.ln_eps)
        v_bar_o = oracles.layer_norm_loops(v_l, params.ln_v_gamma, params.ln_v_beta, SMALL.ln_eps)
        assert np.abs(k_l_bar - k_bar_o).max() < 1e-12
        scale = 1.0 / np.sqrt(4.0)
        for bi in range(2):
            for hi in range(2):
                q_t = oracles.matmul_loops(v_bar_o[bi, hi], params.w_lq)
                k_t = oracles.matmul_loops(v_bar_o[bi, hi], params.w_lk)
                v_t = oracles.matmul_loops(v_bar_o[bi, hi], params.w_lv)
                p_o = oracles.softmax_lastdim_loops(oracles.matmul_loops(q_t, k_t.T) * scale)
                z_o = v_bar_o[bi, hi] + oracles.matmul_loops(p_o, v_t)
                assert np.abs(p_lat[bi, hi] - p_o).max() < 1e-12
                assert np.abs(z_l[bi, hi] - z_o).max() < 1e-12


class TestDistribute:
    def test_single_slot_broadcast(self):
        rng = np.random.default_rng(14)
        q = rng.standard_normal((1, 2, 5, 4))
        k_l_bar = rng.standard_normal((1, 2, 1, 4))
        z_l = rng.standard_normal((1, 2, 1, 4))
        _, o = distribute_global(q, k_l_bar, z_l)
        expect = merge_heads(np.broadcast_to(z_l, (1, 2, 5, 4)).copy())
        assert np.abs(o - expect).max() < 1e-12

    def test_zero_queries_average_slots(self):
        rng = np.random.default_rng(15)
        k_l_bar = rng.standard_normal((1, 2, 3, 4))
        z_l = rng.standard_normal((1, 2, 3, 4))
        p, o = distribute_global(np.zeros((1, 2, 5, 4)), k_l_bar, z_l)
        assert np.abs(p - 1.0 / 3.0).max() < 1e-15
        expect = merge_heads(np.broadcast_to(z_l.mean(axis=2, keepdims=True), (1, 2, 5, 4)).copy())
        assert np.abs(o - expect).max() < 1e-12

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(16)
        q = rng.standard_normal((1, 2, 5, 4))
        k_l_bar = rng.standard_normal((1, 2, 3, 4))
        z_l = rng.standard_normal((1, 2, 3, 4))
        p, o = distribute_global(q, k_l_bar, z_l)
        scale = 1.0 / np.sqrt(4.0)
        for hi in range(2):
            p_o = oracles.softmax_lastdim_loops(
                oracles.matmul_loops(q[0, hi], k_l_bar[0, hi].T) * scale)
            o_o = oracles.matmul_loops(p_o, z_l[0, hi])
            assert np.abs(p[0, hi] - p_o).max() < 1e-12
            assert np.abs(o[0, :, hi * 4:(hi + 1) * 4] - o_o).max() < 1e-12


class TestLocalBypass:
    def test_delta_kernel_identity(self):
        cfg = AttnConfig(channels=4, heads=1, num_representatives=2, grid_h=3, grid_w=3)
        params = _identity_params(cfg)
        x = np.random.default_rng(17).standard_normal((2, 9, 4))
        assert np.abs(local_bypass(x, params, cfg) - x).max() < 1e-15

    def test_disabled_returns_zeros(self):
        cfg = replace(SMALL, enable_dwc=False)
        params = init_params(cfg, 0)
        x = np.random.default_rng(18).standard_normal((1, 12, 8))
        assert not local_bypass(x, params, cfg).any()

    def test_matches_conv_oracle(self):
        params = init_params(SMALL, 4)
        x = np.random.default_rng(19).standard_normal((2, 12, 8))
        got = local_bypass(x, params, SMALL)
        xv = oracles.matmul_loops(x, params.w_v).reshape(2, 3, 4, 8)
        expect = oracles.depthwise_conv2d_loops(xv, params.dwc_kernel, params.dwc_bias)
        assert np.abs(got - expect.reshape(2, 12, 8)).max() < 1e-12


class TestForward:
    def test_zero_input_zero_output(self):
        cfg = AttnConfig(channels=4, heads=2, num_representatives=2, grid_h=2, grid_w=2)
        params = init_params(cfg, 0)
        y, _ = rpattention_forward(np.zeros((1, 4, 4)), params, cfg)
        assert not y.any()

    def test_output_shape_matches_input(self):
        params = init_params(SMALL, 5)
        x = np.random.default_rng(20).standard_normal((3, 12, 8))
        y, trace = rpattention_forward(x, params, SMALL)
        assert y.shape == x.shape
        assert trace.output is y or np.array_equal(trace.output, y)

    def test_trace_invariants(self):
        params = init_params(SMALL, 6)
        x = np.random.default_rng(21).standard_normal((2, 12, 8))
        _, trace = rpattention_forward(x, params, SMALL)
        assert np.abs(trace.a.sum(axis=-1) - 1.0).max() < 1e-6
        col = trace.a_hat.sum(axis=-2)
        assert (col > 0).all() and (col < 1).all()
        assert np.abs(trace.p_lat.sum(axis=-1) - 1.0).max() < 1e-6
        assert np.abs(trace.p_dist.sum(axis=-1) - 1.0).max() < 1e-6

    def test_permutation_equivariance_without_dwc(self):
        cfg = replace(SMALL, enable_dwc=False)
        params = init_params(cfg, 7)
        rng = np.random.default_rng(22)
        x = rng.standard_normal((2, 12, 8))
        y, _ = rpattention_forward(x, params, cfg)
        for _ in range(3):
            perm = rng.permutation(12)
            y_perm, _ = rpattention_forward(x[:, perm, :], params, cfg)
            assert np.abs(y_perm - y[:, perm, :]).max() < 1e-10

    def test_constant_tokens_collapse_rows(self):
        cfg = AttnConfig(channels=4, heads=2, num_representatives=3, grid_h=2, grid_w=2)
        params = replace(init_params(cfg, 8),
                         dwc_kernel=_identity_params(cfg).dwc_kernel,
                         dwc_bias=np.zeros(4))
        token = np.random.default_rng(23).standard_normal(4)
        x = np.broadcast_to(token, (1, 4, 4)).copy()
        y, trace = rpattention_forward(x, params, cfg)
        assert np.abs(trace.o_global - trace.o_global[:, :1, :]).max() < 1e-12
        assert np.abs(y - y[:, :1, :]).max() < 1e-12

    def test_golden_straight_line_reimplementation(self):
        params = init_params(SMALL, 9)
        x = np.random.default_rng(24).standard_normal((2, 12, 8))
        _, trace = rpattention_forward(x, params, SMALL)
        expect = oracles.straight_line_forward(
            x, params, heads=2, num_reps=3, grid_h=3, grid_w=4,
            epsilon=SMALL.epsilon, ln_eps=SMALL.ln_eps)
        for name, val in expect.items():
            got = getattr(trace, name)
            assert np.abs(got - val).max() < 1e-12, name

    def test_gather_distribute_variant_forward(self):
        cfg = replace(SMALL, enable_interact=False)
        params = init_params(cfg, 10)
        x = np.random.default_rng(25).standard_normal((1, 12, 8))
        _, trace = rpattention_forward(x, params, cfg)
        assert trace.p_lat is None
        assert np.array_equal(trace.z_l, trace.v_l_bar)
        expect = oracles.straight_line_forward(
            x, params, heads=2, num_reps=3, grid_h=3, grid_w=4,
            epsilon=cfg.epsilon, ln_eps=cfg.ln_eps, enable_interact=False)
        assert np.abs(trace.output - expect["output"]).max() < 1e-12

    def test_empty_batch_rejected(self):
        params = init_params(SMALL, 0)
        with pytest.raises(ConfigError):
            rpattention_forward(np.zeros((0, 12, 8)), params, SMALL)

    def test_wrong_token_count_rejected(self):
        params = init_params(SMALL, 0)
        with pytest.raises(ConfigError):
            rpattention_forward(np.zeros((1, 10, 8)), params, SMALL)


class TestInitAndCount:
    def test_same_seed_byte_identical(self):
        a = init_params(SMALL, 42)
        b = init_params(SMALL, 42)
        for name, arr in a.field_dict().items():
            assert arr.tobytes() == getattr(b, name).tobytes()

    def test_shapes_match_config(self):
        params = init_params(SMALL, 0)
        for name, shape in param_shapes(SMALL).items():
            assert getattr(params, name).shape == shape

    def test_reference_layer_count(self):
        cfg = AttnConfig(channels=192, heads=3, num_representatives=49, grid_h=14, grid_w=14)
        assert param_count(cfg) == 165056

    def test_tiny_count(self):
        cfg = AttnConfig(channels=2, heads=1, num_representatives=1, grid_h=1, grid_w=1,
                         dwc_kernel=1)
        assert param_count(cfg) == 42

    def test_doubling_slots_grows_by_head_dim(self):
        base = param_count(SMALL)
        doubled = param_count(replace(SMALL, num_representatives=6))
        assert doubled - base == 3 * SMALL.head_dim

    def test_count_matches_serialized_length(self):
        params = init_params(SMALL, 1)
        total = sum(arr.size for arr in params.field_dict().values())
        assert total == param_count(SMALL)


def test_split_merge_heads_roundtrip():
    rng = np.random.default_rng(26)
    x = rng.standard_normal((2, 5, 6))
    assert np.array_equal(merge_heads(split_heads(x, 3)), x)
