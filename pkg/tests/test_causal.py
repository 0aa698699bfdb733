import numpy as np
import pytest
from scipy.special import expit

from clefbench import causal, diffcore
from clefbench.causal import (
    NoTreatmentEstimator,
    NoTreatmentKind,
    ReferenceOutcome,
    ScoreSet,
)
from clefbench.diffcore import GradientTape, Tensor
from clefbench.errors import DataError, ShapeError, ValidationError


def log_sig(x):
    return np.log(expit(x))


def test_fuse_values():
    assert causal.fuse([0.0], [0.0]).data[0] == pytest.approx(np.log(0.5), abs=1e-12)
    assert causal.fuse([2.0], [1.0]).data[0] == pytest.approx(-0.048587, abs=1e-6)
    assert causal.fuse([2.0], [1.0]).data[0] == pytest.approx(log_sig(3.0), abs=1e-14)


def test_fuse_symmetric_and_increasing():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-10, 10, size=(2, 200))
    np.testing.assert_array_equal(causal.fuse(a, b).data, causal.fuse(b, a).data)
    step = rng.uniform(1e-3, 1.0, size=200)
    assert np.all(causal.fuse(a + step, b).data > causal.fuse(a, b).data)


def test_fuse_class_mismatch():
    with pytest.raises(ShapeError):
        causal.fuse([0.0, 1.0], [0.0])


def test_factual_and_counterfactual():
    s = ScoreSet(y_c=[1.0, 0.0], y_e=[2.0, 1.0], y_e_star=[0.5, 0.5])
    np.testing.assert_allclose(causal.factual_score(s).data, log_sig(np.array([3.0, 1.0])))
    np.testing.assert_allclose(
        causal.counterfactual_score(s).data, log_sig(np.array([1.5, 0.5]))
    )
    np.testing.assert_array_equal(
        causal.factual_score(s).data, causal.fuse(s.y_c, s.y_e).data
    )
    zero = ScoreSet(y_c=[0.0, 0.0], y_e=[0.0, 0.0], y_e_star=[0.0, 0.0])
    np.testing.assert_allclose(causal.factual_score(zero).data, [np.log(0.5)] * 2)
    np.testing.assert_allclose(causal.counterfactual_score(zero).data, [np.log(0.5)] * 2)


def test_counterfactual_ignores_y_e():
    rng = np.random.default_rng(1)
    y_c, y_star = rng.standard_normal(4), rng.standard_normal(4)
    first = causal.counterfactual_score(ScoreSet(y_c, rng.standard_normal(4), y_star))
    second = causal.counterfactual_score(ScoreSet(y_c, 100 * rng.standard_normal(4), y_star))
    np.testing.assert_array_equal(first.data, second.data)


def test_effects_null_treatment():
    s = ScoreSet(y_c=[0.0, 0.0], y_e=[0.0, 0.0], y_e_star=[0.0, 0.0])
    effects = causal.compute_effects(s, ReferenceOutcome(np.log([0.5, 0.5])))
    for name in ("te", "nde", "tie"):
        np.testing.assert_allclose(getattr(effects, name), [0.0, 0.0], atol=1e-15)


def test_effects_example():
    s = ScoreSet(y_c=[1.0, 0.0], y_e=[2.0, 1.0], y_e_star=[0.5, 0.5])
    effects = causal.compute_effects(s)
    expected = [log_sig(3.0) - log_sig(1.5), log_sig(1.0) - log_sig(0.5)]
    np.testing.assert_allclose(effects.tie, expected, atol=1e-12)


def test_effect_decomposition_on_random_scores():
    rng = np.random.default_rng(2)
    n, k = 10_000, 6
    s = ScoreSet(
        y_c=rng.normal(0, 3, size=(n, k)),
        y_e=rng.normal(0, 3, size=(n, k)),
        y_e_star=rng.normal(0, 3, size=k),
    )
    effects = causal.compute_effects(s)
    assert np.max(np.abs(effects.te - effects.nde - effects.tie)) <= 1e-12
    assert np.max(np.abs(effects.tie - (effects.factual - effects.counterfactual))) <= 1e-12

    other = causal.compute_effects(s, ReferenceOutcome(rng.normal(size=k)))
    np.testing.assert_array_equal(other.tie, effects.tie)
    np.testing.assert_array_equal(
        np.argmax(other.tie, axis=1), np.argmax(effects.tie, axis=1)
    )


def test_reference_is_class_uniform():
    ref = ReferenceOutcome.from_no_treatment([0.2, -0.4, 0.8])
    u = np.mean([0.2, -0.4, 0.8])
    np.testing.assert_allclose(ref.y_ref, [log_sig(2 * u)] * 3)


def test_predict_tie():
    s = ScoreSet(y_c=[5.0, 5.0], y_e=[1.0, 0.0], y_e_star=[0.0, 0.0])
    assert causal.predict_tie(s) == 0

    same = ScoreSet(y_c=[0.3, -1.0], y_e=[0.7, 0.1], y_e_star=[0.7, 0.1])
    np.testing.assert_array_equal(causal.predict_tie(same, "multi_label"), [0.0, 0.0])


def test_tie_under_context_shift():
    y_c, y_e, y_star = np.array([0.5, -0.5]), np.array([1.0, 2.0]), np.array([0.1, 0.1])
    shifted = ScoreSet(y_c + 2.0, y_e, y_star)
    expected = log_sig(y_c + 2.0 + y_e) - log_sig(y_c + 2.0 + y_star)
    np.testing.assert_allclose(causal.tie_scores(shifted).data, expected, atol=1e-13)


def test_tie_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    y_c = Tensor(rng.standard_normal(5), requires_grad=True)
    y_e = Tensor(rng.standard_normal(5), requires_grad=True)
    y_star = Tensor(rng.standard_normal(5), requires_grad=True)
    weights = rng.standard_normal(5)

    def objective():
        return diffcore.sum(diffcore.mul(causal.tie_scores(ScoreSet(y_c, y_e, y_star)), weights))

    with GradientTape() as tape:
        loss = objective()
    tape.backward(loss)
    for t in (y_c, y_e, y_star):
        numeric = diffcore.finite_diff_grad(lambda: objective().item(), t)
        np.testing.assert_allclose(t.grad, numeric.data, rtol=1e-5, atol=1e-9)


def test_scoreset_rejects_non_finite():
    with pytest.raises(ValidationError):
        ScoreSet([0.0, np.nan], [0.0, 0.0], [0.0, 0.0])


def test_average_prior():
    est = causal.estimate_no_treatment(NoTreatmentKind.AVERAGE_PRIOR, 2, labels=[0, 0, 1, 1])
    np.testing.assert_allclose(est.logits.data, np.log([0.5, 0.5]))
    assert not est.trainable
    est = causal.estimate_no_treatment("average_prior", 2, labels=[0, 0, 0, 1])
    np.testing.assert_allclose(est.logits.data, np.log([0.75, 0.25]))


def test_average_prior_floors_missing_class():
    est = causal.estimate_no_treatment("average_prior", 3, labels=[0, 1])
    assert est.logits.data[2] == pytest.approx(np.log(causal.PRIOR_FLOOR))


def test_average_prior_needs_labels():
    with pytest.raises(DataError):
        causal.estimate_no_treatment("average_prior", 3, labels=[])


def test_learnable_uniform():
    est = causal.estimate_no_treatment("learnable_uniform", 4, init_range=(0.25, 0.25))
    np.testing.assert_array_equal(est.logits.data, [0.25] * 4)
    assert est.trainable and est.logits.requires_grad

    est = causal.estimate_no_treatment("learnable_uniform", 6, seed=3)
    assert np.all(np.abs(est.logits.data) <= 0.01)
    again = causal.estimate_no_treatment("learnable_uniform", 6, seed=3)
    np.testing.assert_array_equal(est.logits.data, again.logits.data)


def test_random_fixed_is_seeded():
    a = causal.estimate_no_treatment("random_fixed", 5, seed=1)
    b = causal.estimate_no_treatment("random_fixed", 5, seed=1)
    np.testing.assert_array_equal(a.logits.data, b.logits.data)
    assert not a.trainable


def test_estimate_validation():
    with pytest.raises(ValidationError):
        causal.estimate_no_treatment("learnable_uniform", 1)
    with pytest.raises(ValidationError):
        causal.estimate_no_treatment("learnable_uniform", 3, init_range=(0.1, -0.1))
    with pytest.raises(ValueError):
        causal.estimate_no_treatment("median", 3)


def test_estimator_dict_round_trip():
    est = causal.estimate_no_treatment("random_fixed", 4, seed=9)
    back = NoTreatmentEstimator.from_dict(est.to_dict())
    assert back.kind == est.kind
    np.testing.assert_array_equal(back.logits.data, est.logits.data)
