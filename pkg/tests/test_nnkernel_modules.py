"""Module construction, forward semantics, Adam, persistence, gradient checks."""

import numpy as np
import pytest

import slaterl.nnkernel as nk
from slaterl.nnkernel import (
    Adam,
    ModuleSpec,
    Tensor,
    build_module,
    gradient_check,
    load_parameters,
    save_parameters,
    SpecMismatchError,
)


class TestBuildModule:
    def test_linear_parameter_count(self):
        mod = build_module(ModuleSpec("linear", (4, 2)), seed=0)
        assert mod.parameter_count() == 10  # 4*2 + 2

    def test_embedding_parameter_count(self):
        mod = build_module(ModuleSpec("embedding", (283, 32)), seed=0)
        assert mod.parameter_count() == 9056

    def test_same_seed_bit_identical(self):
        spec = ModuleSpec("transformer-encoder", (8, 8), layer_count=2, head_count=2)
        a = build_module(spec, seed=7)
        b = build_module(spec, seed=7)
        for name, p in a.named_parameters().items():
            other = b.named_parameters()[name]
            assert np.array_equal(p.values, other.values), name

    def test_different_seed_differs(self):
        spec = ModuleSpec("linear", (4, 4))
        a = build_module(spec, seed=1)
        b = build_module(spec, seed=2)
        assert not np.array_equal(a.inner.weight.values, b.inner.weight.values)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError, match="divide"):
            build_module(ModuleSpec("transformer-encoder", (10, 10), head_count=3), seed=0)

    def test_dropout_rate_domain(self):
        with pytest.raises(ValueError):
            ModuleSpec("linear", (2, 2), dropout_rate=1.0).validate()


class TestForwardSemantics:
    def test_output_shape_deterministic_function_of_input(self):
        mod = build_module(ModuleSpec("mlp", (6, 4, 3)), seed=0)
        for batch in (1, 5, 17):
            out = nk.forward(mod, Tensor(np.zeros((batch, 6))))
            assert out.shape == (batch, 3)

    def test_single_token_attention_equals_value_path(self):
        # With one key, the attention weight is exactly 1 and the block reduces
        # to out_proj(value_proj(x)). Oracle: direct matrix arithmetic.
        rng = np.random.default_rng(0)
        attn = nk.MultiHeadAttention(2, 1, rng=np.random.default_rng(3))
        x = rng.normal(size=(1, 1, 2))
        out = attn(Tensor(x), Tensor(x), None)

        wv, bv = attn.wv.weight.values, attn.wv.bias.values
        wo, bo = attn.wo.weight.values, attn.wo.bias.values
        expected = (x[0, 0] @ wv + bv) @ wo + bo
        np.testing.assert_allclose(out.values[0, 0], expected, rtol=1e-12)

    def test_masked_keys_do_not_contribute(self):
        rng = np.random.default_rng(1)
        attn = nk.MultiHeadAttention(4, 2, rng=np.random.default_rng(4))
        seq = rng.normal(size=(1, 3, 4))
        valid = np.array([[True, True, False]])
        out_masked = attn(Tensor(seq), Tensor(seq), valid)
        seq_changed = seq.copy()
        seq_changed[0, 2] = 100.0  # only affects the masked key/value row
        out_changed = attn(Tensor(seq[:, :1]), Tensor(seq_changed), valid)
        out_reference = attn(Tensor(seq[:, :1]), Tensor(seq), valid)
        np.testing.assert_allclose(out_changed.values, out_reference.values, rtol=1e-10)
        assert out_masked.shape == (1, 3, 4)

    def test_training_flag_records_graph(self):
        mod = build_module(ModuleSpec("linear", (3, 2)), seed=0)
        x = Tensor(np.ones((1, 3)))
        assert nk.forward(mod, x, training=True).requires_grad
        assert not nk.forward(mod, x, training=False).requires_grad


class TestAdam:
    def test_first_step_moves_by_lr_sign(self):
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        p.grad = np.array([0.5, -2.0])
        opt = Adam({"p": p}, lr=0.01)
        opt.step()
        # bias correction at t=1 makes the step exactly -lr * sign(g) (up to eps)
        np.testing.assert_allclose(p.values, [1.0 - 0.01, -1.0 + 0.01], atol=1e-6)
        assert p.grad is None

    def test_zero_gradient_leaves_parameter_unchanged(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        p.grad = np.zeros(1)
        opt = Adam({"p": p}, lr=0.1)
        opt.step()
        np.testing.assert_allclose(p.values, [3.0])

    def test_missing_gradient_raises(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        with pytest.raises(ValueError, match="missing gradients"):
            opt.step()

    def test_quadratic_convergence_matches_scalar_recurrence(self):
        # Oracle: run the Adam recurrence on f(w) = (w-2)^2 in plain python.
        def oracle(steps, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
            w, m, v = 0.0, 0.0, 0.0
            for t in range(1, steps + 1):
                g = 2.0 * (w - 2.0)
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                w -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
            return w

        p = Tensor(np.array(0.0), requires_grad=True)
        opt = Adam({"w": p}, lr=0.1)
        for _ in range(100):
            loss = nk.mul(nk.sub(p, 2.0), nk.sub(p, 2.0))
            loss.backward()
            opt.step()
        expected = oracle(100)
        assert p.values == pytest.approx(expected, rel=1e-12)
        assert abs(p.values - 2.0) < 0.2


class TestPersistence:
    def test_round_trip_bit_identical(self, tmp_path):
        spec = ModuleSpec("mlp", (5, 4, 2))
        mod = build_module(spec, seed=11)
        path = tmp_path / "params.npz"
        save_parameters(mod, path)
        other = build_module(spec, seed=99)
        load_parameters(other, path)
        for name, p in mod.named_parameters().items():
            assert np.array_equal(p.values, other.named_parameters()[name].values)

    def test_forward_identical_after_reload(self, tmp_path):
        spec = ModuleSpec("transformer-encoder", (8, 8), layer_count=1, head_count=2)
        mod = build_module(spec, seed=3)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 8)))
        before = nk.forward(mod, (x, None)).values.copy()
        path = tmp_path / "enc.npz"
        save_parameters(mod, path)
        fresh = build_module(spec, seed=77)
        load_parameters(fresh, path)
        after = nk.forward(fresh, (x, None)).values
        assert np.array_equal(before, after)

    def test_mismatched_spec_rejected(self, tmp_path):
        path = tmp_path / "p.npz"
        save_parameters(build_module(ModuleSpec("linear", (4, 2)), seed=0), path)
        with pytest.raises(SpecMismatchError):
            load_parameters(build_module(ModuleSpec("linear", (4, 3)), seed=0), path)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "junk.npz"
        path.write_bytes(b"not an archive")
        with pytest.raises(SpecMismatchError, match="corrupt|unreadable"):
            load_parameters(build_module(ModuleSpec("linear", (2, 2)), seed=0), path)


class TestGradientCheck:
    def test_linear_layer_tight(self):
        mod = build_module(ModuleSpec("linear", (4, 3)), seed=5)
        report = gradient_check(mod, lambda rng: Tensor(rng.normal(size=(3, 4))))
        assert not report.skipped
        assert report.max_rel_error <= 1e-6

    def test_transformer_block_within_tolerance(self):
        spec = ModuleSpec("transformer-encoder", (8, 8), layer_count=1, head_count=2)
        mod = build_module(spec, seed=6)

        def sampler(rng):
            return (Tensor(rng.normal(size=(2, 4, 8))), None)

        report = gradient_check(mod, sampler, max_coords_per_block=40)
        assert not report.skipped
        assert report.max_rel_error <= 1e-4

    def test_attention_pool_within_tolerance(self):
        spec = ModuleSpec("attention-pool", (6,), head_count=1)
        mod = build_module(spec, seed=8)

        def sampler(rng):
            return (Tensor(rng.normal(size=(2, 3, 6))), Tensor(rng.normal(size=(2, 6))), None)

        report = gradient_check(mod, sampler, max_coords_per_block=40)
        assert not report.skipped
        assert report.max_rel_error <= 1e-4

    def test_dropout_flagged_and_skipped(self):
        spec = ModuleSpec("transformer-encoder", (4, 4), dropout_rate=0.5, head_count=1)
        mod = build_module(spec, seed=9)
        report = gradient_check(mod, lambda rng: (Tensor(rng.normal(size=(1, 2, 4))), None))
        assert report.skipped
        assert "dropout" in report.reason
