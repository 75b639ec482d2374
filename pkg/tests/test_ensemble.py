import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geodrop.data import synth_blobs
from geodrop.dropout_ensemble import (
    EnsembleResult,
    EnsembleSpec,
    flatness_gap,
    predict_integrated,
    run_ensemble,
)
from geodrop.errors import FormatError, NumericalError
from geodrop.mixtures import alpha_integrate
from geodrop.models import MlpModel, TrainConfig, forward, train_projection
from geodrop.numerics import make_rng

TINY = TrainConfig(hidden=(6,), epochs=5, lr=0.2, batch_size=16, activation="sigmoid")


@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(3, 30, 4, 2.0, 0).split(60)


@pytest.fixture(scope="module")
def mlp_ensemble(blobs):
    train, test = blobs
    return run_ensemble(train, test, EnsembleSpec(n_masks=3, rate=0.5, train=TINY), make_rng(1))


def stub_trainer(values):
    def trainer(data, mask, cfg, model):
        n = MlpModel.zeros(cfg.layer_sizes(data)).n_params
        if mask is None:
            return np.zeros(n)
        return np.resize(values.pop(0), n)

    return trainer


class TestSpec:
    def test_uniform_default(self):
        spec = EnsembleSpec(n_masks=4)
        template = MlpModel.zeros((2, 3, 2))
        from geodrop.dropout_ensemble import _mask_weights

        np.testing.assert_array_equal(_mask_weights(spec, template, [None] * 4), [0.25] * 4)

    def test_validation(self):
        with pytest.raises(ValueError):
            EnsembleSpec(n_masks=0)
        with pytest.raises(ValueError):
            EnsembleSpec(n_masks=2, weights=[0.5, 0.6])
        with pytest.raises(ValueError):
            EnsembleSpec(n_masks=2, rate=[0.1])
        with pytest.raises(ValueError):
            EnsembleSpec(n_masks=2, weights=[0.5, 0.5], weighting="likelihood")

    def test_rate_schedule(self):
        assert EnsembleSpec(n_masks=3, rate=[0.1, 0.2, 0.3]).rates == (0.1, 0.2, 0.3)


class TestRunEnsemble:
    def test_single_full_mask_is_erm(self, blobs):
        train, test = blobs
        result = run_ensemble(train, test, EnsembleSpec(n_masks=1, rate=0.0, train=TINY), make_rng(0))
        erm = train_projection(train, None, TINY)
        np.testing.assert_array_equal(result.theta_d, erm)
        assert result.averaged == result.integrated == result.erm == result.member_metrics[0]

    def test_stubbed_average(self, blobs):
        train, test = blobs
        trainer = stub_trainer([[2.0, 0.0], [0.0, 2.0]])
        spec = EnsembleSpec(n_masks=2, rate=0.5, weights=[0.5, 0.5], train=TrainConfig(hidden=()))
        result = run_ensemble(train, test, spec, make_rng(0), trainer=trainer)
        np.testing.assert_array_equal(result.theta_d, np.ones(15))

    def test_reproducible_bytes(self, blobs, mlp_ensemble):
        train, test = blobs
        again = run_ensemble(train, test, EnsembleSpec(n_masks=3, rate=0.5, train=TINY), make_rng(1), workers=3)
        assert again.to_json() == mlp_ensemble.to_json()

    def test_members_respect_masks(self, mlp_ensemble):
        assert np.all(mlp_ensemble.members[~mlp_ensemble.kept] == 0.0)
        assert mlp_ensemble.reconstruction_error() <= 1e-12

    def test_likelihood_weights(self, blobs):
        train, test = blobs
        spec = EnsembleSpec(n_masks=3, rate=[0.2, 0.5, 0.8], weighting="likelihood", train=TINY)
        result = run_ensemble(train, test, spec, make_rng(2), trainer=stub_trainer([[0.0]] * 3), erm_baseline=False)
        assert result.weights.sum() == pytest.approx(1.0)
        assert result.erm is None

    def test_error_names_member(self, blobs):
        train, test = blobs
        calls = []

        def trainer(data, mask, cfg, model):
            calls.append(1)
            if len(calls) == 2:
                raise NumericalError("diverged", state=np.zeros(1))
            return np.zeros(MlpModel.zeros(cfg.layer_sizes(data)).n_params)

        with pytest.raises(NumericalError, match="ensemble member 1") as info:
            run_ensemble(train, test, EnsembleSpec(n_masks=3, train=TINY), make_rng(0), trainer=trainer)
        assert info.value.member == 1


class TestReport:
    def test_round_trip(self, mlp_ensemble):
        text = mlp_ensemble.to_json()
        assert EnsembleResult.from_json(text).to_json() == text

    def test_deltas_reported(self, mlp_ensemble):
        d = mlp_ensemble.to_dict()
        assert d["loss_delta_vs_erm"]["averaged"] == d["averaged"]["loss"] - d["erm"]["loss"]

    def test_tampered_average_rejected(self, mlp_ensemble):
        import json

        d = json.loads(mlp_ensemble.to_json())
        d["theta_d"][0] += 1e-6
        with pytest.raises(FormatError):
            EnsembleResult.from_json(json.dumps(d))

    def test_malformed(self):
        with pytest.raises(FormatError):
            EnsembleResult.from_json('{"layer_sizes": [2, 2]}')


class TestPredictIntegrated:
    template = MlpModel.zeros((2, 2))

    def members_for(self, dists):
        # a bias-only softmax regression predicts softmax(b) everywhere
        return np.array([np.concatenate([np.zeros(4), np.log(p)]) for p in dists])

    def test_symmetric_pair_at_one(self):
        members = self.members_for([[0.8, 0.2], [0.2, 0.8]])
        np.testing.assert_allclose(predict_integrated(self.template, members, np.ones(2)), [0.5, 0.5], atol=1e-15)

    def test_minus_one_is_arithmetic(self):
        members = self.members_for([[0.9, 0.1], [0.3, 0.7]])
        out = predict_integrated(self.template, members, np.ones(2), [0.25, 0.75], alpha=-1.0)
        np.testing.assert_allclose(out, [0.45, 0.55], atol=1e-14)

    @pytest.mark.parametrize("alpha", [-3.0, -1.0, 0.0, 0.5, 1.0, 3.0])
    def test_identical_members(self, alpha):
        members = self.members_for([[0.3, 0.7]] * 3)
        np.testing.assert_allclose(predict_integrated(self.template, members, np.ones(2), alpha=alpha), [0.3, 0.7])

    def test_log_domain_matches_alpha_integrate(self, rng):
        model = MlpModel.init((3, 4, 3), rng)
        members = model.params + rng.normal(size=(3, model.n_params))
        x = rng.normal(size=(5, 3))
        got = predict_integrated(model, members, x, [0.2, 0.3, 0.5], 1.0)
        probs = np.stack([forward(model.with_params(m), x) for m in members], axis=1)
        expected = [alpha_integrate(p, [0.2, 0.3, 0.5], 1.0) for p in probs]
        np.testing.assert_allclose(got, expected, atol=1e-14)

    @settings(max_examples=25)
    @given(st.integers(0, 2**31), st.sampled_from([-3.0, -1.0, 0.0, 0.5, 1.0, 3.0]))
    def test_output_is_categorical(self, seed, alpha):
        rng = make_rng(seed)
        model = MlpModel.init((3, 4, 3), rng)
        members = model.params + 3 * rng.normal(size=(3, model.n_params))
        out = predict_integrated(model, members, rng.normal(size=(4, 3)), alpha=alpha)
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            predict_integrated(self.template, np.zeros((0, 6)), np.ones(2))


class TestFlatnessGap:
    def test_softmax_regression_is_flat_at_one(self, rng):
        model = MlpModel.init((4, 3), rng)
        members = rng.normal(size=(5, model.n_params))
        data = synth_blobs(3, 20, 4, 1.0, 3)
        assert flatness_gap(model, members, None, data, 1.0) <= 1e-8
        assert flatness_gap(model, members, None, data, -1.0) > 1e-3

    @pytest.mark.parametrize("alpha", [-1.0, 0.0, 1.0])
    def test_identical_members(self, rng, alpha):
        model = MlpModel.init((4, 5, 3), rng)
        members = np.tile(model.params, (3, 1))
        assert flatness_gap(model, members, None, synth_blobs(3, 5, 4, 1.0, 0), alpha) == pytest.approx(0, abs=1e-15)

    def test_masked_mlp_fixture(self, blobs, mlp_ensemble):
        _, test = blobs
        r = mlp_ensemble
        gap = flatness_gap(r.template(), r.members, r.weights, test, 1.0)
        assert gap > 0
        assert gap == pytest.approx(0.03412449126207481, rel=1e-9)
