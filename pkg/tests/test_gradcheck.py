import numpy as np
import pytest

from blockattn import attention as att
from blockattn import gradcheck as gc
from blockattn.attention import AttentionConfig
from blockattn.tensor import softmax_rows
from conftest import random_params


class TestGradReport:
    @pytest.mark.parametrize("rel,abs_,expected", [
        (5e-5, 1.0, True), (1e-3, 5e-8, True), (1e-3, 1e-6, False), (1e-4, 1e-7, False),
    ])
    def test_pass_rule(self, rel, abs_, expected):
        assert gc.GradReport("op", rel, abs_, 1).passed is expected

    def test_merge_takes_worst(self):
        r = gc.GradReport("op", 1e-6, 1e-9, 3).merge(gc.GradReport("op", 1e-5, 1e-10, 4))
        assert (r.max_rel_err, r.max_abs_err, r.probe_count) == (1e-5, 1e-9, 7)

    def test_table_and_csv(self):
        reports = [gc.GradReport("a", 1e-6, 1e-9, 3), gc.GradReport("longer_name", 1.0, 1.0, 2)]
        table = gc.format_reports(reports).splitlines()
        assert len(table) == 3 and table[1].endswith("PASS") and table[2].endswith("FAIL")
        assert len({line.index("max_rel_err") for line in table[:1]}) == 1
        rows = gc.reports_csv(reports).splitlines()
        assert rows[0] == "op,max_rel_err,max_abs_err,probe_count,pass"
        assert rows[2].startswith("longer_name,1.0,1.0,2,0")


class TestFiniteDifference:
    def test_sum_gives_ones(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_allclose(gc.finite_difference(np.sum, x), 1.0, atol=1e-10)

    def test_half_square_norm(self, rng):
        x = rng.standard_normal(10)
        np.testing.assert_allclose(gc.finite_difference(lambda v: 0.5 * np.sum(v * v), x), x, atol=1e-9)

    def test_softmax_rows_conservation(self, rng):
        x = rng.standard_normal((3, 5))
        np.testing.assert_allclose(gc.finite_difference(lambda v: np.sum(softmax_rows(v)), x), 0.0, atol=1e-8)

    def test_coordinate_subset(self, rng):
        x = rng.standard_normal(8)
        sub = gc.finite_difference(lambda v: np.sum(v ** 3), x, coords=np.array([1, 5]))
        np.testing.assert_allclose(sub, 3 * x[[1, 5]] ** 2, rtol=1e-8)

    def test_input_left_untouched(self, rng):
        x = rng.standard_normal(5)
        before = x.copy()
        gc.finite_difference(np.sum, x)
        assert np.array_equal(x, before)

    def test_eps_positive(self):
        with pytest.raises(ValueError):
            gc.finite_difference(np.sum, np.zeros(2), eps=0.0)


def _fd_check(forward, x, params, g):
    def loss_x(v):
        return float(np.sum(g * forward(v, params)))
    return gc.finite_difference(loss_x, x)


class TestGlobalBackward:
    def test_zero_upstream(self, rng):
        p = random_params(3, rng)
        x = rng.standard_normal((3, 3, 4))
        gx, gp = gc.backward_global_attention(x, p, np.zeros_like(x))
        assert not gx.any() and not any(v.any() for v in gp.as_dict().values())

    def test_pure_residual(self, rng):
        p = random_params(3, rng).with_value_path_zeroed()
        x = rng.standard_normal((3, 3, 4))
        g = rng.standard_normal(x.shape)
        gx, _ = gc.backward_global_attention(x, p, g)
        assert np.array_equal(gx, g)

    def test_matches_finite_differences(self, rng):
        p = random_params(2, rng)
        x = rng.standard_normal((2, 3, 3))
        g = rng.standard_normal(x.shape)
        gx, gp = gc.backward_global_attention(x, p, g)
        numeric = _fd_check(lambda v, ps: att.global_self_attention(v, ps).features, x, p, g)
        assert gc.compare("x", gx, numeric).max_rel_err < 1e-4
        for name in ("query_w", "key_w", "value_w", "out_w", "value_b", "out_b"):
            def loss(v, name=name):
                trial = p.copy()
                getattr(trial, name)[...] = v
                return float(np.sum(g * att.global_self_attention(x, trial).features))
            numeric = gc.finite_difference(loss, getattr(p, name))
            report = gc.compare(name, getattr(gp, name), numeric)
            assert report.passed, (name, report)

    def test_upstream_shape_checked(self, rng):
        with pytest.raises(att.ShapeError):
            gc.backward_global_attention(rng.standard_normal((2, 3, 3)), random_params(2, rng), np.zeros((2, 3)))

    def test_linear_in_upstream(self, rng):
        p = random_params(3, rng)
        x = rng.standard_normal((3, 4, 4))
        g = rng.standard_normal(x.shape)
        base, gp = gc.backward_global_attention(x, p, g)
        for alpha in (2.0, 0.5, -4.0):
            scaled, sp = gc.backward_global_attention(x, p, alpha * g)
            assert np.array_equal(scaled, alpha * base)
            assert all(np.array_equal(sp.as_dict()[k], alpha * gp.as_dict()[k]) for k in gp.as_dict())
        scaled, _ = gc.backward_global_attention(x, p, 0.3 * g)
        np.testing.assert_allclose(scaled, 0.3 * base, rtol=1e-12, atol=1e-15)


class TestBlockwiseBackward:
    @pytest.mark.parametrize("mode", att.UPDATE_MODES)
    def test_single_block_equals_global(self, rng, mode):
        p = random_params(3, rng)
        x = rng.standard_normal((3, 5, 6))
        g = rng.standard_normal(x.shape)
        gx_b, gp_b = gc.backward_blockwise_attention(x, AttentionConfig(6, 6, update_mode=mode), [p], g)
        gx_g, gp_g = gc.backward_global_attention(x, p, g)
        assert np.max(np.abs(gx_b - gx_g)) < 1e-10
        for k, v in gp_g.as_dict().items():
            assert np.max(np.abs(gp_b[0].as_dict()[k] - v)) < 1e-10

    @pytest.mark.parametrize("mode", att.UPDATE_MODES)
    def test_two_layers_match_finite_differences(self, rng, mode):
        cfg = AttentionConfig(8, 4, layers=2, update_mode=mode)
        ps = [random_params(2, rng) for _ in range(2)]
        x = rng.standard_normal((2, 12, 12))
        fwd = lambda xx, pp: att.stacked_attention(xx, cfg, pp).features
        bwd = lambda xx, pp, g: gc.backward_blockwise_attention(xx, cfg, pp, g)
        report = gc.check_kernel("dab", fwd, bwd, x, ps, rng)
        assert report.passed, report

    def test_gradient_locality(self, rng):
        cfg = AttentionConfig(4, 2, update_mode=att.PARALLEL)
        p = random_params(2, rng)
        x = rng.standard_normal((2, 12, 12))
        g = np.zeros_like(x)
        g[:, 1, 1] = rng.standard_normal(2)
        gx, _ = gc.backward_blockwise_attention(x, cfg, [p], g)
        # only the window at origin (0, 0) contains (1, 1)
        outside = np.ones((12, 12), dtype=bool)
        outside[:4, :4] = False
        assert not gx[:, outside].any()
        assert np.abs(gx[:, :4, :4]).sum() > 0

    def test_shared_params_gradient_is_summed(self, rng):
        p = random_params(2, rng)
        x = rng.standard_normal((2, 6, 6))
        g = rng.standard_normal(x.shape)
        _, shared = gc.backward_blockwise_attention(x, AttentionConfig(3, 2, layers=2, share_params=True), [p], g)
        _, separate = gc.backward_blockwise_attention(x, AttentionConfig(3, 2, layers=2), [p, p], g)
        assert len(shared) == 1
        for k, v in shared[0].as_dict().items():
            np.testing.assert_allclose(v, separate[0].as_dict()[k] + separate[1].as_dict()[k], atol=1e-14)

    def test_linear_in_upstream(self, rng):
        cfg = AttentionConfig(4, 3, layers=2)
        ps = [random_params(2, rng) for _ in range(2)]
        x = rng.standard_normal((2, 7, 7))
        g = rng.standard_normal(x.shape)
        base, _ = gc.backward_blockwise_attention(x, cfg, ps, g)
        scaled, _ = gc.backward_blockwise_attention(x, cfg, ps, 4.0 * g)
        assert np.array_equal(scaled, 4.0 * base)


class TestCrissCrossBackward:
    def test_matches_finite_differences(self, rng):
        p = random_params(2, rng)
        x = rng.standard_normal((2, 4, 5))
        fwd = lambda xx, pp: att.crisscross_attention(xx, pp[0], layers=2).features
        bwd = lambda xx, pp, g: (lambda r: (r[0], [r[1]]))(gc.backward_crisscross_attention(xx, pp[0], 2, g))
        assert gc.check_kernel("cca", fwd, bwd, x, [p], rng).passed


class TestCertification:
    def test_all_variants_named(self):
        names = [v[0] for v in gc.variant_checks()]
        assert names[0] == "backward_global_attention" and names[-1] == "backward_crisscross_attention"
        assert len(names) == 6

    def test_small_run_passes(self):
        reports = gc.run_gradchecks(seed=3, instances=2)
        assert len(reports) == 6 and all(r.passed for r in reports)

    def test_sign_error_in_softmax_backward_detected(self, monkeypatch):
        original = att._softmax_backward
        monkeypatch.setattr(att, "_softmax_backward", lambda b, g: -original(b, g))
        reports = {r.op: r for r in gc.run_gradchecks(seed=0, instances=1)}
        assert not reports["backward_global_attention"].passed
