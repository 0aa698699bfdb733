from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from clefbench import causal, diffcore, synthbench, train
from clefbench.diffcore import GradientTape, Tensor
from clefbench.errors import DivergenceError, ValidationError
from clefbench.models import build_model, forward_ensemble
from clefbench.synthbench import BiasSpec, SceneBatch
from clefbench.train import TrainConfig

SPEC = BiasSpec(d_s=8, d_c=8, seed=1)


def small_model(mode="clef", seed=0, **kwargs):
    return build_model(SPEC.d_s, SPEC.d_c, SPEC.num_classes, width=6, depth=1,
                       mode=mode, seed=seed, **kwargs)


@pytest.fixture(scope="module")
def samples():
    return synthbench.generate_dataset(SPEC, 10, "train")


@pytest.fixture
def batch(samples):
    return SceneBatch.from_samples(samples, SPEC.num_classes)


def test_task_loss_uniform_two_classes():
    f = Tensor([-0.5, -0.5])
    tf, tcf = train.task_loss(f, f, [0])
    assert tf.item() == pytest.approx(np.log(2.0))
    assert tcf.item() == pytest.approx(np.log(2.0))


def test_task_loss_multi_label_by_hand():
    f = Tensor(np.log([0.5, 0.5]))
    tf, _ = train.task_loss(f, f, [1, 0], "multi_label")
    assert tf.item() == pytest.approx(2 * np.log(2.0))


def test_task_loss_label_checks():
    with pytest.raises(ValidationError):
        train.task_loss(Tensor([0.0, 0.0]), Tensor([0.0, 0.0]), [2])
    with pytest.raises(ValidationError):
        train.task_loss(Tensor([0.0, 0.0]), Tensor([0.0, 0.0]), [1, 2], "multi_label")


def test_y_e_star_only_reached_through_counterfactual():
    y_c = Tensor([0.3, -0.2, 0.1])
    y_e = Tensor([1.0, 0.0, -1.0], requires_grad=True)
    y_star = Tensor([0.0, 0.0, 0.0], requires_grad=True)
    s = causal.ScoreSet(y_c, y_e, y_star)
    with GradientTape() as tape:
        tf, tcf = train.task_loss(causal.factual_score(s), causal.counterfactual_score(s), [2])
    tape.backward(tf)
    np.testing.assert_array_equal(y_star.grad, np.zeros(3))
    assert np.any(y_e.grad != 0)

    y_e.zero_grad()
    with GradientTape() as tape:
        tf, tcf = train.task_loss(causal.factual_score(s), causal.counterfactual_score(s), [2])
    tape.backward(tcf)
    np.testing.assert_array_equal(y_e.grad, np.zeros(3))
    assert np.any(y_star.grad != 0)


def test_kl_values():
    assert train.kl_loss(Tensor([0.2, 0.4]), Tensor([0.2, 0.4])).item() == pytest.approx(0.0, abs=1e-15)
    kl = train.kl_loss(Tensor([0.0, 0.0]), Tensor(np.log([0.75, 0.25]))).item()
    assert kl == pytest.approx(0.75 * np.log(1.5) + 0.25 * np.log(0.5), abs=1e-12)
    assert kl == pytest.approx(0.13081, abs=1e-5)
    reverse = train.kl_loss(Tensor([0.0, 0.0]), Tensor(np.log([0.75, 0.25])), "reversed").item()
    assert reverse == pytest.approx(0.5 * np.log(0.5 / 0.75) + 0.5 * np.log(0.5 / 0.25))


@pytest.mark.parametrize("direction", train.KL_DIRECTIONS)
def test_kl_gradient_reaches_only_no_treatment(batch, direction):
    m = small_model("clef")
    with GradientTape() as tape:
        scores = train.forward_all(m, batch)
        gated = causal.fuse(diffcore.stop_gradient(scores.y_c), scores.y_e_star)
        loss = train.kl_loss(gated, causal.factual_score(scores), direction)
    tape.backward(loss)
    for name, p in m.parameters().items():
        if name == "no_treatment":
            assert np.any(p.grad != 0)
        else:
            np.testing.assert_array_equal(p.grad, np.zeros_like(p.data), err_msg=name)


def test_vanilla_loss_is_plain_classifier_loss(batch):
    m = small_model("vanilla")
    breakdown, total = train.final_loss(batch, m, TrainConfig(mode="vanilla"))
    _, y_e = forward_ensemble(m, batch.subject, batch.context)
    assert total.item() == pytest.approx(train.classifier_loss(y_e, batch.labels).item(), abs=1e-15)
    assert breakdown.task_counterfactual == 0.0 and breakdown.kl == 0.0

    m.no_treatment.logits.data[:] = 5.0
    for layer in m.context_branch.layers():
        layer.weight.data[:] = 1.0
    assert train.final_loss(batch, m, TrainConfig(mode="vanilla"))[0].total == breakdown.total


def test_kl_zero_when_branches_agree(batch):
    est = causal.estimate_no_treatment("learnable_uniform", 6, init_range=(0.0, 0.0))
    m = small_model("clef", no_treatment=est, zero_heads=True)
    breakdown, _ = train.final_loss(batch, m, TrainConfig())
    assert breakdown.kl == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("mode", ["clef", "no_kl", "te_only", "vanilla", "no_ensemble"])
def test_breakdown_adds_up(batch, mode):
    config = TrainConfig(mode=mode, kl_weight=0.7)
    breakdown, total = train.final_loss(batch, small_model(mode), config)
    expected = (breakdown.task_factual + breakdown.task_counterfactual
                + breakdown.kl_weight * breakdown.kl)
    assert breakdown.total == pytest.approx(expected, abs=1e-12)
    assert total.item() == breakdown.total
    if mode != "clef":
        assert breakdown.kl == 0.0


def _check_gradients(m, batch, config, names):
    params = m.parameters()
    rng = np.random.default_rng(11)
    for name, p in params.items():
        # keep relu pre-activations of occluded (all-zero) inputs off the kink
        if name.endswith(".bias"):
            p.data[:] = 0.1 * rng.standard_normal(p.data.shape)
        p.grad = np.zeros_like(p.data)
    with GradientTape() as tape:
        _, total = train.final_loss(batch, m, config)
    tape.backward(total)
    for name in names:
        numeric = diffcore.finite_diff_grad(
            lambda: train.final_loss(batch, m, config)[1].item(), params[name]
        )
        np.testing.assert_allclose(params[name].grad, numeric.data, rtol=1e-5, atol=1e-9,
                                   err_msg=name)


@pytest.mark.parametrize("mode", ["no_kl", "te_only", "vanilla", "no_ensemble"])
def test_loss_gradients_match_finite_differences(batch, mode):
    m = small_model(mode, seed=3)
    names = [n for n in m.parameters() if n != "no_treatment" or mode == "no_kl"]
    _check_gradients(m, batch, TrainConfig(mode=mode), names)


def test_multi_label_loss_gradients(samples):
    spec = replace(SPEC, multi_label=True, secondary_rate=0.5)
    ml = SceneBatch.from_samples(synthbench.generate_dataset(spec, 10, "train"), 6, True)
    m = small_model("no_kl", seed=2)
    _check_gradients(m, ml, TrainConfig(mode="no_kl", task="multi_label"),
                     ["no_treatment", "context.head.weight", "ensemble.head.bias"])


def test_clef_no_treatment_gradient_matches_finite_differences(batch):
    # the gated objective differs from the scalar loss only on the branches,
    # y_e_star sees the full loss
    _check_gradients(small_model("clef", seed=5), batch, TrainConfig(), ["no_treatment"])


def test_degenerate_branches_reduce_to_vanilla(batch):
    est = causal.estimate_no_treatment("learnable_uniform", 6, init_range=(0.0, 0.0))
    m = small_model("clef", no_treatment=est)
    m.context_branch.head.weight.data[:] = 0.0
    tie = train.score_batch(m, batch, "tie")
    ensemble = train.score_batch(m, batch, "ensemble_only")
    np.testing.assert_array_equal(np.argmax(tie, axis=1), np.argmax(ensemble, axis=1))


def test_score_batch_rejects_unknown_scorer(batch):
    with pytest.raises(ValidationError):
        train.score_batch(small_model(), batch, "oracle")


def test_evaluate_uses_mode_scorer(samples):
    report = train.evaluate(small_model("te_only"), samples, stamp={"seed": 4})
    assert report.scorer == "te" and report.mode == "te_only" and report.seed == 4
    assert report.n == 10


@pytest.mark.parametrize("kwargs", [
    dict(mode="joint"), dict(task="ranking"), dict(kl_direction="both"),
    dict(no_treatment="median"), dict(batch_size=0), dict(kl_weight=-1.0),
    dict(init_low=0.1, init_high=0.0), dict(optimizer="lbfgs"),
])
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        TrainConfig(**kwargs).validate()


def _fit(mode="clef", **kwargs):
    spec = BiasSpec(d_s=8, d_c=8, seed=2)
    tr = synthbench.generate_dataset(spec, 120, "train")
    va = synthbench.generate_dataset(spec, 40, "val")
    m = small_model(mode, seed=1)
    kwargs.setdefault("batch_size", 32)
    config = TrainConfig(mode=mode, **kwargs)
    return m, train.fit(m, tr, va, config)


def test_zero_learning_rate_keeps_parameters():
    m, _ = _fit(epochs=3, lr=0.0)
    fresh = small_model("clef", seed=1).state_dict()
    for name, values in m.state_dict().items():
        np.testing.assert_array_equal(values, fresh[name])


def test_zero_epochs_keeps_initialization():
    m, log = _fit(epochs=0)
    assert log.records == [] and log.best_epoch == 0
    fresh = small_model("clef", seed=1).state_dict()
    for name, values in m.state_dict().items():
        np.testing.assert_array_equal(values, fresh[name])


def test_training_reduces_loss():
    _, log = _fit("vanilla", epochs=6, lr=0.01)
    assert len(log.records) == 6
    assert log.records[-1].total < log.records[0].total
    assert [r.epoch for r in log.records] == list(range(1, 7))


@pytest.mark.parametrize("mode", ["vanilla", "no_kl"])
def test_full_batch_loss_falls_every_epoch(mode):
    _, log = _fit(mode, epochs=5, lr=0.003, batch_size=120)
    totals = [r.total for r in log.records]
    assert all(b < a for a, b in zip(totals, totals[1:])), totals


def test_fit_is_deterministic():
    _, first = _fit(epochs=2, seed=3)
    _, second = _fit(epochs=2, seed=3)
    assert first.to_list() == second.to_list()
    _, other = _fit(epochs=2, seed=4)
    assert other.to_list() != first.to_list()


def test_fit_keeps_best_validation_state():
    m, log = _fit(epochs=4)
    report = train.evaluate(m, synthbench.generate_dataset(BiasSpec(d_s=8, d_c=8, seed=2), 40, "val"))
    assert report.accuracy == pytest.approx(log.best_val_metric)


@pytest.mark.parametrize("mode", ["clef", "no_kl", "te_only", "vanilla", "no_ensemble"])
def test_divergence_is_reported(mode):
    spec = BiasSpec(d_s=8, d_c=8, seed=2)
    tr = synthbench.generate_dataset(spec, 40, "train")
    m = small_model(mode)
    head = m.context_branch.head if mode == "no_ensemble" else m.ensemble.head
    head.bias.data[:] = np.inf
    with pytest.raises(DivergenceError):
        train.fit(m, tr, tr, TrainConfig(mode=mode, epochs=1))


def test_saturated_positive_class_keeps_multi_label_loss_finite():
    z = Tensor([[800.0, -3.0]], requires_grad=True)
    with GradientTape() as tape:
        loss = train.fused_loss(diffcore.log_sigmoid(z), [[1, 0]], "multi_label")
    tape.backward(loss)
    assert loss.item() == pytest.approx(np.logaddexp(0.0, -3.0))
    np.testing.assert_allclose(z.grad, [[0.0, expit(-3.0)]], rtol=1e-9)


def test_saturated_negative_class_hits_the_floor():
    z = Tensor([[-3.0, 800.0]], requires_grad=True)
    with GradientTape() as tape:
        loss = train.fused_loss(diffcore.log_sigmoid(z), [[1, 0]], "multi_label")
    tape.backward(loss)
    assert loss.item() == pytest.approx(-diffcore.LOG_FLOOR + np.logaddexp(0.0, 3.0))
    assert np.all(np.isfinite(z.grad)) and z.grad[0, 1] == 0.0


@pytest.mark.parametrize("kind", ["average_prior", "random_fixed"])
def test_fixed_no_treatment_reaches_the_learnable_state(batch, samples, kind):
    learnable = small_model("clef", seed=4)
    labels = [s.label for s in samples]
    fixed_est = causal.estimate_no_treatment(kind, 6, labels=labels, seed=9)
    fixed = small_model("clef", seed=4, no_treatment=fixed_est)
    for name, p in learnable.parameters().items():
        if name != "no_treatment":
            fixed.parameters()[name].data[:] = p.data
    shift = learnable.no_treatment.logits.data - fixed_est.logits.data
    fixed.context_branch.head.bias.data += shift
    fixed.ensemble.head.bias.data -= shift

    config = TrainConfig()
    a, _ = train.final_loss(batch, learnable, config)
    b, _ = train.final_loss(batch, fixed, config)
    for field_name in ("task_factual", "task_counterfactual", "kl", "total"):
        assert getattr(b, field_name) == pytest.approx(getattr(a, field_name), abs=1e-10)
    np.testing.assert_allclose(train.score_batch(fixed, batch, "tie"),
                               train.score_batch(learnable, batch, "tie"), atol=1e-10)
