import numpy as np
import pytest

from kanreg import diffcore as dc
from kanreg.chebyshev import BasisConfig, DegreeSet, recurrence_basis
from kanreg.diffcore import Dual, Tape, backward, grad_check
from kanreg.network import (
    FREEZE_FRACTION,
    NOISE_START,
    AdaptiveBasisState,
    FrozenStateError,
    KanLayer,
    KanModel,
    adaptive_schedule_update,
    init_model,
    layer_forward,
    load_checkpoint,
    model_forward,
    parameter_count,
    save_checkpoint,
    update_adaptive_schedule,
)


def _silu(x):
    return x / (1.0 + np.exp(-x))


def brute_layer(layer, x):
    """Explicit loops over samples, outputs, inputs and degrees."""
    degs = list(layer.degrees)
    out = np.zeros((len(x), layer.out_dim))
    for b in range(len(x)):
        for o in range(layer.out_dim):
            acc = 0.0
            for i in range(layer.in_dim):
                acc += layer.skip[o, i] * _silu(x[b, i])
                T = recurrence_basis(np.tanh(x[b, i]), max(degs))
                for k, d in enumerate(degs):
                    acc += layer.coeffs[i, o, k] * T[d]
            out[b, o] = acc
    return out


class TestLayer:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        layer = KanLayer(rng.normal(size=(3, 4, 4)), rng.normal(size=(4, 3)), DegreeSet((0, 2, 5, 11)))
        x = rng.normal(size=(6, 3))
        assert np.allclose(layer_forward(layer, x), brute_layer(layer, x), atol=1e-11)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            KanLayer(np.zeros((3, 4, 2)), np.zeros((4, 3)), DegreeSet((0, 1, 2)))
        with pytest.raises(ValueError):
            KanLayer(np.zeros((3, 4, 3)), np.zeros((3, 4)), DegreeSet((0, 1, 2)))

    def test_wrong_input_width(self):
        layer = KanLayer(np.zeros((3, 2, 1)), np.zeros((2, 3)), DegreeSet((0,)))
        with pytest.raises(ValueError):
            layer_forward(layer, np.zeros((5, 4)))


class TestModel:
    def test_zero_head_gives_zero_displacement(self):
        for cfg in (BasisConfig.fixed(28), BasisConfig.randomized(12, 84), BasisConfig.adaptive(4, 10)):
            model = init_model(cfg, (3, 16, 16, 3), np.random.default_rng(1))
            x = np.random.default_rng(2).uniform(-1, 1, (50, 3))
            assert np.array_equal(model_forward(model, x), np.zeros((50, 3)))

    def test_widths_and_counts(self):
        model = init_model(BasisConfig.fixed(28), rng=np.random.default_rng(3))
        assert model.widths == (3, 70, 70, 3)
        assert model.basis_sizes() == [29, 29, 29]
        expected = sum(i * o * 29 + o * i for i, o in [(3, 70), (70, 70), (70, 3)])
        assert parameter_count(model) == expected

    def test_randkan_evaluates_fewer_bases(self):
        model = init_model(BasisConfig.randomized(12, 84), rng=np.random.default_rng(4))
        assert model.basis_sizes() == [13, 13, 13]
        assert all(layer.degrees.max_degree <= 84 for layer in model.layers)
        # layers draw independently
        assert len({layer.degrees for layer in model.layers}) > 1

    def test_invalid_widths(self):
        with pytest.raises(ValueError):
            init_model(BasisConfig.fixed(3), (2, 8, 3))
        with pytest.raises(ValueError):
            init_model(BasisConfig.fixed(3), (3,))

    def test_layers_must_chain(self):
        a = KanLayer(np.zeros((3, 4, 1)), np.zeros((4, 3)), DegreeSet((0,)))
        b = KanLayer(np.zeros((5, 3, 1)), np.zeros((3, 5)), DegreeSet((0,)))
        with pytest.raises(ValueError):
            KanModel([a, b], BasisConfig.fixed(0))

    def test_composition_matches_brute_force(self):
        model = init_model(BasisConfig.fixed(5), (3, 4, 3), np.random.default_rng(5), zero_head=False)
        x = np.random.default_rng(6).uniform(-1, 1, (4, 3))
        h = brute_layer(model.layers[0], x)
        ref = brute_layer(model.layers[1], h)
        assert np.allclose(model_forward(model, x), ref, atol=1e-11)

    def test_float32_model(self):
        model = init_model(BasisConfig.fixed(4), (3, 8, 3), np.random.default_rng(7), dtype=np.float32, zero_head=False)
        out = model_forward(model, np.zeros((2, 3), dtype=np.float32))
        assert out.dtype == np.float32

    def test_parameter_gradients(self):
        model = init_model(BasisConfig.fixed(6), (3, 5, 3), np.random.default_rng(8), zero_head=False)
        x = np.random.default_rng(9).uniform(-1, 1, (10, 3))
        names = list(model.named_parameters())
        vals = [model.named_parameters()[n].copy() for n in names]

        def f(*ps):
            return dc.sum(dc.mul(model_forward(model, x, dict(zip(names, ps))), 0.7))

        assert grad_check(f, vals, step=1e-6) < 1e-6

    def test_spatial_jacobian_matches_finite_differences(self):
        model = init_model(BasisConfig.fixed(8), (3, 16, 16, 3), np.random.default_rng(10), zero_head=False)
        x = np.random.default_rng(11).uniform(-0.9, 0.9, (30, 3))
        u = model_forward(model, Dual.seed(x))
        h = 1e-5
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            fd = (model_forward(model, x + e) - model_forward(model, x - e)) / (2 * h)
            assert np.allclose(u.tangent[j], fd, rtol=1e-5, atol=1e-8)


class TestAdaptive:
    def _state(self, k=3, K=8, seed=0):
        return AdaptiveBasisState.create(k, K, np.random.default_rng(seed))

    def test_ties_go_to_lowest_index(self):
        st = self._state(k=2, K=5)
        assert list(st.select(np.array([1.0, 3.0, 3.0, 3.0, 0.0]))) == [1, 2]

    def test_selection_sorted(self):
        st = self._state(k=3, K=6)
        sel = st.select(np.array([0.1, 5.0, -1.0, 4.0, 3.0, 0.0]))
        assert list(sel) == [1, 3, 4]

    def test_schedule_endpoints(self):
        st = self._state()
        total = 1000
        adaptive_schedule_update(st, 0, total)
        assert st.noise_std == NOISE_START
        adaptive_schedule_update(st, 374, total)
        assert st.noise_std == pytest.approx(0.3 * (1 - 374 / 750))
        adaptive_schedule_update(st, int(FREEZE_FRACTION * total), total)
        assert st.noise_std == 0.0
        assert st.frozen

    def test_freeze_is_read_only(self):
        st = self._state()
        st.freeze()
        with pytest.raises(FrozenStateError):
            st.assign("w1", np.zeros_like(st.w1))
        with pytest.raises(ValueError):
            st.w1[0, 0] = 1.0
        with pytest.raises(ValueError):
            st.frozen_selection[0] = 0

    def test_frozen_selection_ignores_noise(self):
        st = self._state()
        st.freeze()
        sel = st.frozen_selection.copy()
        for seed in range(5):
            assert np.array_equal(st.select(np.zeros(st.K), np.random.default_rng(seed)), sel)

    def test_frozen_model_drops_mlp_parameters(self):
        model = init_model(BasisConfig.adaptive(3, 8), (3, 6, 3), np.random.default_rng(1))
        assert any(".mlp." in n for n in model.named_parameters())
        update_adaptive_schedule(model, 9, 10)
        assert not any(".mlp." in n for n in model.named_parameters())

    def test_mlp_receives_gradient(self):
        model = init_model(BasisConfig.adaptive(3, 8), (3, 6, 3), np.random.default_rng(2), zero_head=False)
        x = np.random.default_rng(3).uniform(-1, 1, (20, 3))
        tape = Tape()
        leaves = {n: tape.leaf(v) for n, v in model.named_parameters().items()}
        grads = backward(tape, dc.sum(model_forward(model, x, leaves)))
        assert np.abs(grads[leaves["layers.0.mlp.w2"]]).sum() > 0

    def test_adaptive_gradient_check(self):
        model = init_model(BasisConfig.adaptive(3, 6), (3, 4, 3), np.random.default_rng(4), zero_head=False)
        x = np.random.default_rng(5).uniform(-1, 1, (8, 3))
        names = list(model.named_parameters())
        vals = [model.named_parameters()[n].copy() for n in names]

        def f(*ps):
            return dc.sum(dc.tanh(model_forward(model, x, dict(zip(names, ps)))))

        # MLP gradients are small, so a larger step keeps round-off below the tolerance
        assert grad_check(f, vals, step=1e-5) < 1e-5


class TestCheckpoint:
    @pytest.mark.parametrize(
        "cfg", [BasisConfig.fixed(5), BasisConfig.randomized(4, 20), BasisConfig.adaptive(3, 8)]
    )
    def test_roundtrip(self, tmp_path, cfg):
        model = init_model(cfg, (3, 7, 3), np.random.default_rng(0), seed=11, zero_head=False)
        if cfg.mode == "adaptive":
            update_adaptive_schedule(model, 9, 10)
        path = tmp_path / "m.kanr"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        x = np.random.default_rng(1).uniform(-1, 1, (16, 3))
        assert np.array_equal(model_forward(model, x), model_forward(back, x))
        assert back.seed == 11
        assert back.config == cfg
        assert [layer.degrees for layer in back.layers] == [layer.degrees for layer in model.layers]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.kanr"
        path.write_bytes(b"NOPE" + b"\0" * 20)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        model = init_model(BasisConfig.fixed(2), (3, 4, 3), np.random.default_rng(0))
        path = tmp_path / "m.kanr"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(path)
