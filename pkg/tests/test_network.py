import numpy as np
import pytest

from moras import tensor as T
from moras.errors import FormatError, ShapeError
from moras.genome import CellSpec, NetworkSpec, decode, random_genome, uniform_cell
from moras.network import (Model, forward, load_model, loss_and_input_grad,
                           loss_and_param_grad, predict)

from conftest import central_difference, rel_err


def small_spec(genes, **kw):
    kw = {"num_classes": 3, "channels": 4, "cells_per_phase": 1, **kw}
    return NetworkSpec.from_genome(genes, **kw)


def sample_positions(rng, shape, count):
    flat = rng.choice(int(np.prod(shape)), size=min(count, int(np.prod(shape))), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


class TestInputGradient:
    def test_linear_unit_closed_form(self, f64):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 6))
        w = rng.standard_normal((2, 6))
        y = np.array([0, 1, 1, 0, 1])
        tx = T.tensor(x, requires_grad=True)
        T.softmax_cross_entropy(T.linear(tx, T.tensor(w)), y).backward()
        logits = x @ w.T
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        p[np.arange(5), y] -= 1
        np.testing.assert_allclose(tx.grad, p @ w / 5, rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_six_by_six_against_finite_differences(self, f64, seed):
        # the network is piecewise linear; a small step stays inside one linear region
        rng = np.random.default_rng(seed)
        model = Model(small_spec(random_genome(rng)), seed=seed)
        x = rng.random((2, 1, 6, 6))
        y = np.array([0, 2])
        _, g = loss_and_input_grad(model, x, y)
        fd = central_difference(lambda: loss_and_input_grad(model, x, y)[0], x, 1e-5)
        assert rel_err(g, fd) < 1e-6

    def test_params_untouched_by_input_gradient(self):
        rng = np.random.default_rng(1)
        model = Model(small_spec(random_genome(rng)))
        loss_and_input_grad(model, rng.random((2, 1, 8, 8)), np.array([0, 1]))
        assert all(p.grad is None and p.requires_grad for p in model.params)


class TestParameterGradient:
    @pytest.mark.parametrize("seed", range(4))
    def test_every_tensor_against_finite_differences(self, f64, seed):
        rng = np.random.default_rng(100 + seed)
        model = Model(small_spec(random_genome(rng)), seed=seed)
        x = rng.random((3, 1, 8, 8))
        y = np.array([0, 1, 2])
        _, grads = loss_and_param_grad(model, x, y)
        loss = lambda: loss_and_param_grad(model, x, y)[0]
        for p, g in zip(model.params, grads):
            pos = sample_positions(rng, p.data.shape, 6)
            fd = central_difference(loss, p.data, 1e-5, index=pos)
            sel = tuple(np.array(pos).T)
            assert rel_err(g[sel], fd[sel]) < 1e-6, p.name

    def test_dead_branch_gradient_is_exactly_zero(self):
        # no node reads input 1, so every other cell's output is ignored
        chain = CellSpec((((3, 0), (4, 0)), ((5, 2), (3, 0)), ((6, 3), (2, 2)), ((7, 4), (0, 3))))
        spec = NetworkSpec(chain, chain, num_classes=3, channels=4, cells_per_phase=1)
        model = Model(spec)
        rng = np.random.default_rng(2)
        _, grads = loss_and_param_grad(model, rng.random((2, 1, 8, 8)), np.array([1, 2]))
        dead = [g for p, g in zip(model.params, grads)
                if p.name.startswith(("cell1.", "cell3."))]
        alive = [g for p, g in zip(model.params, grads) if p.name.startswith("cell4.")]
        assert dead and all(np.all(g == 0) for g in dead)
        assert any(np.any(g != 0) for g in alive)

    def test_gradients_are_bit_identical_across_calls(self):
        rng = np.random.default_rng(3)
        model = Model(small_spec(random_genome(rng), channels=8, cells_per_phase=2))
        x = rng.random((4, 1, 16, 16)).astype(np.float32)
        y = np.array([0, 1, 2, 0])
        a = loss_and_param_grad(model, x, y)[1]
        b = loss_and_param_grad(model, x, y)[1]
        assert all(np.array_equal(u, v) for u, v in zip(a, b))


class TestModel:
    def test_same_seed_same_parameters(self):
        genes = random_genome(np.random.default_rng(4))
        a, b = Model(small_spec(genes), seed=7), Model(small_spec(genes), seed=7)
        assert all(np.array_equal(u, v) for u, v in zip(a.get_params(), b.get_params()))
        c = Model(small_spec(genes), seed=8)
        assert not np.array_equal(a.get_params()[0], c.get_params()[0])

    def test_every_random_genome_builds_and_runs(self):
        rng = np.random.default_rng(5)
        x = rng.random((2, 1, 16, 16))
        for _ in range(25):
            model = Model(small_spec(random_genome(rng)))
            assert forward(model, x).shape == (2, 3)
            loss, g = loss_and_input_grad(model, x, np.array([0, 1]))
            assert np.isfinite(loss) and g.shape == x.shape

    def test_pooling_only_model_still_trains_its_projections(self):
        pool = uniform_cell(0)
        model = Model(NetworkSpec(pool, pool, num_classes=2, channels=4, cells_per_phase=1))
        _, grads = loss_and_param_grad(model, np.random.default_rng(0).random((2, 1, 8, 8)),
                                       np.array([0, 1]))
        assert len(grads) == 2 + 2 * 5 + 2

    def test_wrong_channel_count(self):
        model = Model(small_spec(np.zeros(32)))
        with pytest.raises(ShapeError, match="stem"):
            forward(model, np.zeros((1, 3, 8, 8)))

    def test_predict_batches_consistently(self):
        rng = np.random.default_rng(6)
        model = Model(small_spec(random_genome(rng)))
        x = rng.random((10, 1, 8, 8))
        np.testing.assert_array_equal(predict(model, x, batch_size=3), forward(model, x).argmax(1))

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        model = Model(small_spec(random_genome(rng)), seed=3)
        model.save(tmp_path / "m.npz", meta={"genome_id": 5})
        loaded, meta = load_model(tmp_path / "m.npz")
        assert meta == {"genome_id": 5}
        assert loaded.spec == model.spec
        x = rng.random((3, 1, 8, 8))
        np.testing.assert_array_equal(forward(loaded, x), forward(model, x))

    def test_corrupt_model_file(self, tmp_path):
        (tmp_path / "bad.npz").write_bytes(b"nope")
        with pytest.raises(FormatError):
            load_model(tmp_path / "bad.npz")

    def test_decode_feeds_the_model(self):
        genes = random_genome(np.random.default_rng(8))
        normal, reduction = decode(genes)
        spec = small_spec(genes)
        assert spec.normal == normal and spec.reduction == reduction
