import math

import numpy as np
import pytest

from geodrop.data import Dataset, synth_blobs
from geodrop.errors import DegenerateMaskError, FormatError, NumericalError, ShapeError
from geodrop.models import (
    DropoutMask,
    MlpModel,
    TrainConfig,
    bernoulli_log_likelihood,
    enumerate_unit_masks,
    fit,
    forward,
    jacobian_rank,
    load_checkpoint,
    loss_and_grad,
    mean_loss,
    output_bias_slice,
    sample_masks,
    save_checkpoint,
    softmax,
    train_projection,
    unit_mask,
)
from geodrop.numerics import finite_diff_grad, make_rng


def random_model(rng, sizes, activation="sigmoid"):
    model = MlpModel.init(sizes, rng, activation)
    return model.with_params(model.params + 0.3 * rng.normal(size=model.n_params))


class TestForward:
    def test_zero_model_is_uniform(self):
        p = forward(MlpModel.zeros((4, 5, 3)), np.ones(4))
        np.testing.assert_allclose(p, 1 / 3)

    def test_only_output_bias(self, rng):
        model = random_model(rng, (3, 4, 3))
        kept = np.zeros(model.n_params, bool)
        kept[output_bias_slice(model)] = True
        b = model.biases[-1]
        np.testing.assert_allclose(forward(model, rng.normal(size=3), DropoutMask(kept)), softmax(b), atol=1e-15)

    def test_mask_equals_zeroed_model(self, rng):
        model = random_model(rng, (3, 5, 4), "relu")
        mask = sample_masks(model, 0.4, 1, make_rng(1), "coordinate")[0]
        x = rng.normal(size=(7, 3))
        np.testing.assert_array_equal(forward(model, x, mask), forward(model.with_params(mask.apply(model.params)), x))

    def test_rows_sum_to_one(self, rng):
        model = random_model(rng, (6, 8, 5), "relu")
        p = forward(model, 20 * rng.normal(size=(50, 6)))
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            forward(MlpModel.zeros((3, 2)), np.ones(4))

    def test_parameter_count(self):
        assert MlpModel.zeros((784, 100, 10)).n_params == 785 * 100 + 101 * 10


class TestGradients:
    def test_uniform_balanced_loss(self):
        x = np.ones((4, 2))
        loss, _ = loss_and_grad(MlpModel.zeros((2, 2)), x, np.array([0, 1, 0, 1]))
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    @pytest.mark.parametrize("activation", ["sigmoid", "relu"])
    def test_backprop_matches_finite_differences(self, activation):
        rng = make_rng(21)
        worst = 0.0
        for _ in range(20):
            sizes = (int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 5)))
            model = random_model(rng, sizes, activation)
            x = rng.normal(size=(8, sizes[0]))
            y = rng.integers(0, sizes[-1], size=8)
            _, grad = loss_and_grad(model, x, y)
            fd = finite_diff_grad(lambda t: loss_and_grad(model.with_params(t), x, y)[0], model.params)
            worst = max(worst, np.linalg.norm(grad - fd) / np.linalg.norm(fd))
        assert worst <= 1e-5

    def test_two_four_three(self, rng):
        model = random_model(rng, (2, 4, 3))
        x, y = rng.normal(size=(10, 2)), rng.integers(0, 3, size=10)
        _, grad = loss_and_grad(model, x, y)
        fd = finite_diff_grad(lambda t: loss_and_grad(model.with_params(t), x, y)[0], model.params)
        assert np.linalg.norm(grad - fd) <= 1e-5 * np.linalg.norm(fd)

    def test_masked_gradient_is_zero(self, rng):
        model = random_model(rng, (3, 4, 2))
        mask = sample_masks(model, 0.5, 1, make_rng(2), "coordinate")[0]
        _, grad = loss_and_grad(model, rng.normal(size=(5, 3)), rng.integers(0, 2, size=5), mask)
        assert np.all(grad[~mask.kept] == 0.0)


class TestTraining:
    def test_separable_blobs(self):
        d = synth_blobs(2, 100, 2, 6.0, 3)
        result = fit(d, TrainConfig(hidden=(8,), epochs=30, lr=0.1))
        assert mean_loss(result.model, d) < 0.2

    def test_output_bias_only_learns_frequencies(self):
        y = np.array([0] * 50 + [1] * 150)
        d = Dataset(make_rng(0).normal(size=(200, 3)), y, 2)
        template = MlpModel.zeros((3, 4, 2))
        kept = np.zeros(template.n_params, bool)
        kept[output_bias_slice(template)] = True
        theta = train_projection(d, DropoutMask(kept), TrainConfig(hidden=(4,), epochs=60, lr=0.5))
        p = forward(template.with_params(theta), np.zeros(3))
        np.testing.assert_allclose(p, [0.25, 0.75], atol=1e-2)

    def test_everything_masked(self):
        d = synth_blobs(3, 10, 2, 1.0, 0)
        template = MlpModel.zeros((2, 3, 3))
        result = fit(d, TrainConfig(hidden=(3,)), mask=DropoutMask(np.zeros(template.n_params, bool)))
        assert np.all(result.params == 0.0)
        assert result.losses == [pytest.approx(math.log(3))]

    def test_masked_coordinates_zero_every_step(self):
        d = synth_blobs(3, 20, 4, 2.0, 1)
        cfg = TrainConfig(hidden=(5,), epochs=3, lr=0.2)
        template = MlpModel.zeros(cfg.layer_sizes(d))
        mask = sample_masks(template, 0.3, 1, make_rng(4), "unit")[0]
        from geodrop.models import _sgd

        seen = []
        _sgd(d, cfg, mask=mask, step_hook=lambda th: seen.append(np.all(th[~mask.kept] == 0.0)))
        assert seen and all(seen)

    def test_deterministic(self):
        d = synth_blobs(3, 20, 4, 2.0, 1)
        cfg = TrainConfig(hidden=(5,), epochs=2, seed=5, dropout_rate=0.3)
        assert np.array_equal(fit(d, cfg).params, fit(d, cfg).params)

    def test_zero_rate_matches_plain(self):
        d = synth_blobs(3, 20, 4, 2.0, 1)
        cfg = TrainConfig(hidden=(5,), epochs=2, seed=5)
        assert np.array_equal(fit(d, cfg).params, train_projection(d, None, cfg))

    def test_windowed_loss_decreases(self):
        d = synth_blobs(3, 60, 4, 3.0, 2)
        cfg = TrainConfig(hidden=(8,), epochs=6, lr=0.1, batch_size=16)
        means = fit(d, cfg).epoch_means(cfg.epochs)
        assert np.all(np.diff(means) < 0)

    def test_divergence_raises_with_state(self):
        d = synth_blobs(2, 20, 2, 50.0, 0)
        with pytest.raises(NumericalError) as info:
            fit(d, TrainConfig(hidden=(4,), epochs=50, lr=1e6, activation="relu"))
        assert info.value.state is not None and np.all(np.isfinite(info.value.state))


class TestMasks:
    def test_zero_rate(self):
        model = MlpModel.zeros((3, 6, 2))
        assert all(m.kept.all() for m in sample_masks(model, 0.0, 5, make_rng(0)))

    def test_unit_rate_concentration(self):
        model = MlpModel.zeros((2, 100, 2))
        masks = sample_masks(model, 0.5, 1000, make_rng(1))
        dropped = [100 - int(m.kept[model.layer_slices()[0][1]].sum()) for m in masks]
        assert abs(np.mean(dropped) - 50) <= 5

    def test_unit_mask_structure(self):
        model = MlpModel.zeros((2, 3, 2))
        mask = unit_mask(model, [np.array([False, True, False])])
        w1 = mask.kept[model.layer_slices()[0][0]].reshape(2, 3)
        w2 = mask.kept[model.layer_slices()[1][0]].reshape(3, 2)
        assert not w1[:, 1].any() and w1[:, [0, 2]].all()
        assert not w2[1].any() and w2[[0, 2]].all()
        assert mask.kept[output_bias_slice(model)].all()

    def test_reproducible(self):
        model = MlpModel.zeros((3, 8, 2))
        a = sample_masks(model, 0.4, 5, make_rng(3), "coordinate")
        b = sample_masks(model, 0.4, 5, make_rng(3), "coordinate")
        assert all(np.array_equal(x.kept, y.kept) for x, y in zip(a, b))

    def test_output_bias_never_dropped(self):
        model = MlpModel.zeros((3, 4, 5))
        for m in sample_masks(model, 0.9, 50, make_rng(5), "coordinate"):
            assert m.kept[output_bias_slice(model)].all()

    def test_degenerate(self):
        with pytest.raises(DegenerateMaskError):
            sample_masks(MlpModel.zeros((2, 1, 2)), 0.999, 1, make_rng(0))

    def test_enumeration(self):
        model = MlpModel.zeros((2, 3, 2))
        masks = enumerate_unit_masks(model)
        assert len(masks) == 2**3 - 1
        with pytest.raises(ValueError):
            enumerate_unit_masks(MlpModel.zeros((2, 11, 2)))

    def test_bernoulli_likelihood(self):
        model = MlpModel.zeros((2, 4, 2))
        mask = unit_mask(model, [np.array([True, False, False, True])])
        assert bernoulli_log_likelihood(model, mask, 0.3) == pytest.approx(2 * math.log(0.3) + 2 * math.log(0.7))


class TestJacobianRank:
    @pytest.mark.parametrize("n", [2, 5, 10])
    def test_generic_inputs(self, n):
        rng = make_rng(n)
        model = random_model(rng, (n, 1))
        assert jacobian_rank(model, rng.normal(size=(3 * n, n))) == n + 1

    def test_identical_inputs(self):
        rng = make_rng(0)
        model = random_model(rng, (3, 1))
        assert jacobian_rank(model, np.tile(rng.normal(size=3), (6, 1))) == 1

    def test_zero_inputs(self):
        model = random_model(make_rng(0), (4, 1))
        assert jacobian_rank(model, np.zeros((8, 4))) == 1


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model = random_model(rng, (3, 4, 2), "relu")
        save_checkpoint(model, tmp_path / "m.gdrp")
        back = load_checkpoint(tmp_path / "m.gdrp")
        assert back.layer_sizes == model.layer_sizes
        assert np.array_equal(back.params, model.params)

    def test_layout(self, tmp_path):
        save_checkpoint(MlpModel.zeros((2, 3)), tmp_path / "m.gdrp")
        raw = (tmp_path / "m.gdrp").read_bytes()
        assert raw[:4] == b"GDRP"
        assert raw[4:16] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert len(raw) == 4 + 4 + 4 + 8 + 9 * 8

    def test_bad_files(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "x")
        (tmp_path / "y").write_bytes(b"GDRP\x01")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "y")
