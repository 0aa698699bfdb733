"""Causal-effect calculus over two-branch class scores.

Scores are per-class vectors (or (batch, K) stacks). The fused outcome of a
context score and an ensemble score is log sigma(y_c + y_e). Blocking the
ensemble path replaces y_e by the shared no-treatment scores y_e*, and the
debiased prediction is the total indirect effect

    TIE = fuse(y_c, y_e) - fuse(y_c, y_e*)
"""
import enum
import logging
from dataclasses import dataclass

import numpy as np

from clefbench import diffcore
from clefbench.diffcore import Tensor, as_tensor
from clefbench.errors import DataError, NonFiniteScoreError, ShapeError, ValidationError

logger = logging.getLogger("CAUSAL")

DEFAULT_INIT_RANGE = (-0.01, 0.01)
# frequency assigned to a class absent from the training split
PRIOR_FLOOR = 1e-6


class NoTreatmentKind(str, enum.Enum):
    LEARNABLE_UNIFORM = "learnable_uniform"
    AVERAGE_PRIOR = "average_prior"
    RANDOM_FIXED = "random_fixed"


@dataclass
class ScoreSet:
    y_c: Tensor
    y_e: Tensor
    y_e_star: Tensor

    def __post_init__(self):
        self.y_c = as_tensor(self.y_c)
        self.y_e = as_tensor(self.y_e)
        self.y_e_star = as_tensor(self.y_e_star)
        k = self.y_c.dims[-1]
        for name in ("y_e", "y_e_star"):
            if getattr(self, name).dims[-1] != k:
                raise ShapeError(
                    f"ScoreSet.{name} has {getattr(self, name).dims[-1]} classes, "
                    f"y_c has {k}"
                )
        for name in ("y_c", "y_e", "y_e_star"):
            if not np.all(np.isfinite(getattr(self, name).data)):
                raise NonFiniteScoreError(f"ScoreSet.{name} has non-finite entries")

    @property
    def num_classes(self):
        return self.y_c.dims[-1]


@dataclass(frozen=True)
class CausalEffects:
    factual: np.ndarray
    counterfactual: np.ndarray
    te: np.ndarray
    nde: np.ndarray
    tie: np.ndarray


@dataclass(frozen=True)
class ReferenceOutcome:
    """Y_{c*,e*}: class-uniform, so it cancels from TIE"""

    y_ref: np.ndarray

    @classmethod
    def from_no_treatment(cls, logits):
        logits = np.asarray(as_tensor(logits).data)
        u = float(np.mean(logits))
        value = fuse([u], [u]).data[0]
        return cls(np.full(logits.shape[-1], value))


def fuse(y_a, y_b):
    """phi(y_a, y_b) = log sigma(y_a + y_b), elementwise"""
    y_a, y_b = as_tensor(y_a), as_tensor(y_b)
    if y_a.dims[-1:] != y_b.dims[-1:]:
        raise ShapeError(f"fuse: {y_a.dims[-1:]} vs {y_b.dims[-1:]} classes")
    return diffcore.log_sigmoid(diffcore.add(y_a, y_b))


def factual_score(s):
    return fuse(s.y_c, s.y_e)


def counterfactual_score(s):
    # ensemble mediator held at its no-treatment value
    return fuse(s.y_c, s.y_e_star)


def compute_effects(s, ref=None):
    if ref is None:
        ref = ReferenceOutcome.from_no_treatment(s.y_e_star)
    factual = factual_score(s).data
    counterfactual = counterfactual_score(s).data
    return CausalEffects(
        factual=factual,
        counterfactual=counterfactual,
        te=factual - ref.y_ref,
        nde=counterfactual - ref.y_ref,
        tie=factual - counterfactual,
    )


def tie_scores(s):
    """TIE as a differentiable tensor"""
    return diffcore.sub(factual_score(s), counterfactual_score(s))


def predict_tie(s, task="multi_class"):
    """argmax TIE per sample for multi_class, the TIE scores for multi_label"""
    tie = tie_scores(s).data
    if task == "multi_label":
        return tie
    return np.argmax(tie, axis=-1)


@dataclass
class NoTreatmentEstimator:
    kind: NoTreatmentKind
    logits: Tensor
    init_range: tuple = DEFAULT_INIT_RANGE
    seed: int = 0

    @property
    def trainable(self):
        return self.kind == NoTreatmentKind.LEARNABLE_UNIFORM

    @property
    def num_classes(self):
        return self.logits.dims[0]

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "logits": self.logits.data,
            "init_range": list(self.init_range),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        kind = NoTreatmentKind(d["kind"])
        return cls(
            kind=kind,
            logits=Tensor(
                d["logits"],
                requires_grad=kind == NoTreatmentKind.LEARNABLE_UNIFORM,
                name="no_treatment",
            ),
            init_range=tuple(d["init_range"]),
            seed=d["seed"],
        )


def label_prior(labels, num_classes):
    """Empirical class frequencies; labels are ints or label tuples"""
    counts = np.zeros(num_classes)
    for label in labels:
        for k in np.atleast_1d(label):
            if not 0 <= k < num_classes:
                raise DataError(f"label {k} out of range for {num_classes} classes")
            counts[k] += 1
    freqs = counts / counts.sum()
    return np.where(counts > 0, freqs, PRIOR_FLOOR)


def estimate_no_treatment(kind, num_classes, init_range=DEFAULT_INIT_RANGE,
                          labels=None, seed=0):
    kind = NoTreatmentKind(kind)
    if num_classes < 2:
        raise ValidationError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    if kind == NoTreatmentKind.LEARNABLE_UNIFORM:
        low, high = init_range
        if low > high:
            raise ValidationError(f"init range {init_range} is empty")
        logits = rng.uniform(low, high, size=num_classes) if low < high \
            else np.full(num_classes, float(low))
    elif kind == NoTreatmentKind.AVERAGE_PRIOR:
        if labels is None or len(labels) == 0:
            raise DataError("average prior needs a non-empty training split")
        logits = np.log(label_prior(labels, num_classes))
    else:
        logits = rng.standard_normal(num_classes)
    logger.debug(f"no-treatment {kind.value}: {np.round(logits, 4)}")
    return NoTreatmentEstimator(
        kind=kind,
        logits=Tensor(logits, requires_grad=kind == NoTreatmentKind.LEARNABLE_UNIFORM,
                      name="no_treatment"),
        init_range=tuple(init_range),
        seed=seed,
    )
