"""Losses and the training loop.

The clef objective per batch is

    CE(fuse(y_c, y_e), y) + CE(fuse(y_c, y_e*), y) + kl_weight * KL

where the KL term only moves the no-treatment scores y_e*.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from clefbench import causal, diffcore, metrics
from clefbench.causal import NoTreatmentKind, ScoreSet
from clefbench.diffcore import GradientTape, Tensor
from clefbench.errors import DivergenceError, NonFiniteScoreError, ValidationError
from clefbench.models import MODES, forward_all, forward_context, forward_ensemble
from clefbench.optim import OptimizerConfig, Optimizer
from clefbench.synthbench import SceneBatch

logger = logging.getLogger("TRAIN")

TASKS = ("multi_class", "multi_label")
KL_DIRECTIONS = ("factual_target", "reversed")
SCORERS = ("tie", "factual", "te", "context_only", "ensemble_only")
DEFAULT_SCORER = {
    "clef": "tie",
    "no_kl": "tie",
    "te_only": "te",
    "vanilla": "ensemble_only",
    "no_ensemble": "context_only",
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: str = "clef"
    no_treatment: str = "learnable_uniform"
    init_low: float = -0.01
    init_high: float = 0.01
    task: str = "multi_class"
    kl_weight: float = 1.0
    kl_direction: str = "factual_target"

    def optimizer_config(self):
        return OptimizerConfig(
            self.optimizer, self.lr, self.momentum, self.beta1, self.beta2, self.eps
        )

    def validate(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode}")
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}, got {self.task}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValidationError(f"kl_direction must be one of {KL_DIRECTIONS}")
        try:
            kind = NoTreatmentKind(self.no_treatment)
        except ValueError:
            raise ValidationError(f"unknown no_treatment kind {self.no_treatment}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if self.kl_weight < 0:
            raise ValidationError(f"kl_weight must be >= 0, got {self.kl_weight}")
        if self.init_low > self.init_high:
            raise ValidationError("init_low must not exceed init_high")
        if self.mode in ("vanilla", "te_only", "no_ensemble") \
                and kind != NoTreatmentKind.LEARNABLE_UNIFORM:
            logger.warning(f"mode {self.mode} ignores no_treatment={self.no_treatment}")
        self.optimizer_config().validate()
        return self


@dataclass(frozen=True)
class LossBreakdown:
    task_factual: float
    task_counterfactual: float
    kl: float
    total: float
    kl_weight: float = 1.0

    def to_dict(self):
        return asdict(self)


def _check_labels(y, num_classes, task):
    y = np.asarray(y)
    if task == "multi_label":
        if y.shape[-1] != num_classes or np.any((y != 0) & (y != 1)):
            raise ValidationError("multi-label targets must be 0/1 vectors of length K")
        return y.astype(np.float64)
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValidationError(f"labels out of range for {num_classes} classes")
    return np.eye(num_classes)[y.astype(np.int64)]


def _batch_mean(per_class):
    """sum over classes, mean over the batch (a lone vector is a batch of one)"""
    per_sample = diffcore.sum(per_class, axis=-1)
    if per_sample.data.ndim == 0:
        return per_sample
    return diffcore.mean(per_sample)


def classifier_loss(logits, y, task="multi_class"):
    """Plain loss on raw logits: softmax CE, or per-class BCE for multi_label"""
    logits = diffcore.as_tensor(logits)
    target = _check_labels(y, logits.dims[-1], task)
    if task == "multi_label":
        pos = diffcore.mul(target, diffcore.log_sigmoid(logits))
        neg = diffcore.mul(1.0 - target, diffcore.log_sigmoid(diffcore.neg(logits)))
        return diffcore.neg(_batch_mean(diffcore.add(pos, neg)))
    log_probs = diffcore.softmax_logprobs(logits)
    return diffcore.neg(_batch_mean(diffcore.mul(target, log_probs)))


def fused_loss(scores, y, task="multi_class"):
    """Loss on fused log-scores F = log sigma(.).

    multi_class treats F as logits of a softmax; multi_label reads F as
    per-class log p and log(1 - p) = log1mexp(F).
    """
    scores = diffcore.as_tensor(scores)
    target = _check_labels(y, scores.dims[-1], task)
    if task == "multi_label":
        pos = diffcore.mul(target, scores)
        neg = diffcore.mul(1.0 - target, diffcore.log1mexp(scores))
        return diffcore.neg(_batch_mean(diffcore.add(pos, neg)))
    log_probs = diffcore.softmax_logprobs(scores)
    return diffcore.neg(_batch_mean(diffcore.mul(target, log_probs)))


def task_loss(factual_scores, counterfactual_scores, y, task="multi_class"):
    return fused_loss(factual_scores, y, task), fused_loss(counterfactual_scores, y, task)


def kl_loss(counterfactual_scores, factual_scores, direction="factual_target"):
    """KL between the class distributions of the two fused score vectors.

    The factual side is a constant target. Callers pass counterfactual
    scores built from a stop-gradient y_c so that only y_e* moves.
    """
    cf = diffcore.as_tensor(counterfactual_scores)
    log_p = diffcore.softmax_logprobs(diffcore.stop_gradient(factual_scores)).data
    log_q = diffcore.softmax_logprobs(cf)
    if direction == "reversed":
        q = diffcore.exp(log_q)
        return _batch_mean(diffcore.mul(q, diffcore.sub(log_q, log_p)))
    return _batch_mean(diffcore.mul(np.exp(log_p), diffcore.sub(log_p, log_q)))


def final_loss(batch, model, config):
    """Mode-dependent objective on one batch -> (LossBreakdown, total tensor)"""
    task = config.task
    zero = Tensor(0.0)
    tf, tcf, kl = zero, zero, zero
    if model.mode == "vanilla":
        _, y_e = forward_ensemble(model, batch.subject, batch.context)
        tf = classifier_loss(y_e, batch.labels, task)
    elif model.mode == "no_ensemble":
        y_c = forward_context(model, batch.scene(masked=model.mask_context))
        tf = classifier_loss(y_c, batch.labels, task)
    else:
        scores = forward_all(model, batch)
        factual = causal.factual_score(scores)
        tf = fused_loss(factual, batch.labels, task)
        if model.mode in ("clef", "no_kl"):
            tcf = fused_loss(causal.counterfactual_score(scores), batch.labels, task)
        if model.mode == "clef":
            gated = causal.fuse(diffcore.stop_gradient(scores.y_c), scores.y_e_star)
            kl = kl_loss(gated, factual, config.kl_direction)
    total = diffcore.add(diffcore.add(tf, tcf), diffcore.mul(config.kl_weight, kl))
    breakdown = LossBreakdown(
        task_factual=tf.item(),
        task_counterfactual=tcf.item(),
        kl=kl.item(),
        total=total.item(),
        kl_weight=config.kl_weight,
    )
    return breakdown, total


# --- evaluation ---


def score_batch(model, batch, scorer):
    """(B, K) ranking scores of `scorer` for a SceneBatch"""
    if scorer not in SCORERS:
        raise ValidationError(f"scorer must be one of {SCORERS}, got {scorer}")
    if scorer == "ensemble_only":
        return forward_ensemble(model, batch.subject, batch.context)[1].data
    if scorer == "context_only":
        return forward_context(model, batch.scene(masked=model.mask_context)).data
    scores = forward_all(model, batch)
    if scorer == "tie":
        return causal.tie_scores(scores).data
    if scorer == "factual":
        return causal.factual_score(scores).data
    return causal.compute_effects(scores).te


def evaluate(model, samples, scorer=None, task="multi_class", stamp=None):
    """EvalReport of `scorer` (the mode's default if None) on samples"""
    scorer = scorer or DEFAULT_SCORER[model.mode]
    batch = SceneBatch.from_samples(samples, model.num_classes, task == "multi_label")
    scores = score_batch(model, batch, scorer)
    stamp = dict(stamp or {})
    stamp.setdefault("mode", model.mode)
    return metrics.build_report(scores, batch.label_sets, scorer=scorer, **stamp)


def validation_metric(report, task):
    return report.map if task == "multi_label" else report.accuracy


# --- training loop ---


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    task_factual: float
    task_counterfactual: float
    kl: float
    total: float
    val_metric: float

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_metric: float = None

    def to_list(self):
        return [r.to_dict() for r in self.records]


def _all_finite(arrays):
    return all(np.all(np.isfinite(a)) for a in arrays)


def fit(model, train_samples, val_samples, config):
    """Train `model` in its mode; the model is left at its best-validation state.

    Deterministic given config.seed: the batch order comes from a seeded
    generator and nothing else is random.
    """
    config.validate()
    multi_label = config.task == "multi_label"
    train_batch = SceneBatch.from_samples(train_samples, model.num_classes, multi_label)
    rng = np.random.default_rng([config.seed, 202])
    optimizer = Optimizer(model.trainable_parameters(), config.optimizer_config())
    all_params = list(model.parameters().values())
    log = TrainingLog()

    def validate(where):
        try:
            report = evaluate(model, val_samples, task=config.task)
        except NonFiniteScoreError as exc:
            raise DivergenceError(f"{where}: {exc}") from exc
        return validation_metric(report, config.task)

    best_state = model.state_dict()
    log.best_val_metric = validate("initial validation")
    logger.info(f"{model.mode}: initial val metric {log.best_val_metric:.4f}")

    n = len(train_batch)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(4)
        steps = 0
        for start in range(0, n, config.batch_size):
            batch = train_batch.take(order[start:start + config.batch_size])
            for p in all_params:
                p.zero_grad()
            try:
                with GradientTape() as tape:
                    breakdown, total = final_loss(batch, model, config)
            except NonFiniteScoreError as exc:
                raise DivergenceError(f"epoch {epoch} step {steps}: {exc}") from exc
            if not np.isfinite(breakdown.total):
                raise DivergenceError(
                    f"epoch {epoch} step {steps}: loss is {breakdown.total} "
                    f"(task_factual={breakdown.task_factual}, "
                    f"task_counterfactual={breakdown.task_counterfactual}, "
                    f"kl={breakdown.kl})"
                )
            tape.backward(total)
            if not _all_finite(p.grad for p in optimizer.params):
                raise DivergenceError(f"epoch {epoch} step {steps}: non-finite gradient")
            optimizer.step()
            sums += (breakdown.task_factual, breakdown.task_counterfactual,
                     breakdown.kl, breakdown.total)
            steps += 1
        means = sums / max(steps, 1)
        val = validate(f"epoch {epoch} validation")
        log.records.append(EpochRecord(epoch, *[float(v) for v in means], float(val)))
        logger.info(
            f"{model.mode} epoch {epoch}/{config.epochs}: total={means[3]:.4f} "
            f"task={means[0]:.4f}/{means[1]:.4f} kl={means[2]:.4f} val={val:.4f}"
        )
        if val > log.best_val_metric:
            log.best_val_metric = float(val)
            log.best_epoch = epoch
            best_state = model.state_dict()
    model.load_state_dict(best_state)
    return log
