"""Two-branch classifier: a context-only branch next to an untouched
ensemble model, plus the shared no-treatment scores.
"""
import logging
from collections import OrderedDict

import numpy as np

from clefbench import diffcore, utilities
from clefbench.causal import (
    NoTreatmentEstimator,
    NoTreatmentKind,
    ScoreSet,
    estimate_no_treatment,
)
from clefbench.diffcore import DenseLayer
from clefbench.errors import ArtifactError, ContractError, ShapeError, ValidationError

logger = logging.getLogger("MODEL")

MODES = ("clef", "vanilla", "te_only", "no_kl", "no_ensemble")
CHECKPOINT_VERSION = 1


def _encoder(in_width, width, depth, rng, zero, prefix):
    layers = []
    for i in range(depth):
        layers.append(
            DenseLayer.create(
                in_width if i == 0 else width, width, "relu", rng, zero, f"{prefix}.{i}"
            )
        )
    return layers


class ContextBranch:
    """Sees only the masked scene vector.

    The input is the whole scene, d_s + d_c wide, with the subject slots
    zeroed rather than dropped, so the no_mask cell can feed the same
    network the unmasked scene.
    """

    def __init__(self, encoder, head):
        self.encoder = encoder
        self.head = head

    @property
    def in_width(self):
        return self.encoder[0].in_width if self.encoder else self.head.in_width

    def layers(self):
        return self.encoder + [self.head]

    def __call__(self, x):
        for layer in self.encoder:
            x = layer(x)
        return self.head(x)


class EnsembleModel:
    """Subject and context encoders, concatenation fusion to e, head to y_e"""

    def __init__(self, subject_encoder, context_encoder, fusion, head):
        self.subject_encoder = subject_encoder
        self.context_encoder = context_encoder
        self.fusion = fusion
        self.head = head

    def layers(self):
        return self.subject_encoder + self.context_encoder + [self.fusion, self.head]

    def __call__(self, subject, context):
        s, c = subject, context
        for layer in self.subject_encoder:
            s = layer(s)
        for layer in self.context_encoder:
            c = layer(c)
        e = self.fusion(diffcore.concat([c, s], axis=-1))
        return e, self.head(e)


class ClefModel:
    def __init__(self, context_branch, ensemble, no_treatment, mode="clef",
                 mask_context=True, d_s=None, d_c=None, width=32, depth=2):
        if mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {mode}")
        self.context_branch = context_branch
        self.ensemble = ensemble
        self.no_treatment = no_treatment
        self.mode = mode
        self.mask_context = mask_context
        self.d_s = d_s
        self.d_c = d_c
        self.width = width
        self.depth = depth

    @property
    def num_classes(self):
        return self.no_treatment.num_classes

    def parameters(self):
        """name -> Tensor for every array the checkpoint holds"""
        params = OrderedDict()
        for prefix, layers in (
            ("context", self.context_branch.layers()),
            ("ensemble", self.ensemble.layers()),
        ):
            for layer in layers:
                params[f"{prefix}.{layer.name}.weight"] = layer.weight
                params[f"{prefix}.{layer.name}.bias"] = layer.bias
        params["no_treatment"] = self.no_treatment.logits
        return params

    def trainable_parameters(self):
        """Parameters the mode's loss updates; vanilla never touches the
        context branch, no_ensemble never touches the ensemble
        """
        params = []
        if self.mode != "no_ensemble":
            for layer in self.ensemble.layers():
                params += layer.parameters()
        if self.mode != "vanilla":
            for layer in self.context_branch.layers():
                params += layer.parameters()
        if self.mode in ("clef", "no_kl") and self.no_treatment.trainable:
            params.append(self.no_treatment.logits)
        return params

    def state_dict(self):
        return OrderedDict((k, t.data.copy()) for k, t in self.parameters().items())

    def load_state_dict(self, state):
        params = self.parameters()
        if set(state) != set(params):
            raise ShapeError("state does not match the model's parameters")
        for name, values in state.items():
            values = np.asarray(values, dtype=np.float64)
            if values.shape != params[name].data.shape:
                raise ShapeError(
                    f"{name}: dims {values.shape} vs {params[name].data.shape}"
                )
            params[name].data[...] = values


def build_model(d_s, d_c, num_classes, width=32, depth=2, mode="clef",
                no_treatment=None, mask_context=True, seed=0, zero_heads=False):
    """Dense encoders of `depth` layers at `width`; weights from `seed`"""
    if depth < 1 or width < 1:
        raise ValidationError("encoder depth and width must be >= 1")
    rng = np.random.default_rng([seed, 101])
    if no_treatment is None:
        no_treatment = estimate_no_treatment(
            NoTreatmentKind.LEARNABLE_UNIFORM, num_classes, seed=seed
        )
    context_branch = ContextBranch(
        _encoder(d_s + d_c, width, depth, rng, False, "encoder"),
        DenseLayer.create(width, num_classes, "identity", rng, zero_heads, "head"),
    )
    ensemble = EnsembleModel(
        _encoder(d_s, width, depth, rng, False, "subject"),
        _encoder(d_c, width, depth, rng, False, "context"),
        DenseLayer.create(2 * width, width, "relu", rng, False, "fusion"),
        DenseLayer.create(width, num_classes, "identity", rng, zero_heads, "head"),
    )
    return ClefModel(context_branch, ensemble, no_treatment, mode, mask_context,
                     d_s, d_c, width, depth)


def forward_context(m, x):
    """y_c from the context branch; x is the scene vector, subject slots zeroed
    when the model is built to mask
    """
    x = diffcore.as_tensor(x)
    if x.dims[-1] != m.d_s + m.d_c:
        raise ShapeError(
            f"context branch expects width {m.d_s + m.d_c}, got {x.dims[-1]}"
        )
    if m.mask_context and np.any(x.data[..., :m.d_s] != 0.0):
        raise ContractError("context branch input has unmasked subject slots")
    return m.context_branch(x)


def forward_ensemble(m, subject, context):
    subject, context = diffcore.as_tensor(subject), diffcore.as_tensor(context)
    if subject.dims[-1] != m.d_s or context.dims[-1] != m.d_c:
        raise ShapeError(
            f"ensemble expects widths ({m.d_s}, {m.d_c}), "
            f"got ({subject.dims[-1]}, {context.dims[-1]})"
        )
    if subject.dims[:-1] != context.dims[:-1]:
        raise ShapeError(f"subject dims {subject.dims} vs context dims {context.dims}")
    return m.ensemble(subject, context)


def forward_all(m, batch):
    """ScoreSet for a SceneBatch; y_e_star is the one shared vector"""
    y_c = forward_context(m, batch.scene(masked=m.mask_context))
    _, y_e = forward_ensemble(m, batch.subject, batch.context)
    return ScoreSet(y_c=y_c, y_e=y_e, y_e_star=m.no_treatment.logits)


# --- checkpoints ---


def save_checkpoint(path, m, stamp=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "mode": m.mode,
        "mask_context": m.mask_context,
        "dims": {
            "d_s": m.d_s,
            "d_c": m.d_c,
            "num_classes": m.num_classes,
            "width": m.width,
            "depth": m.depth,
        },
        "no_treatment": m.no_treatment.to_dict(),
        "params": {
            name: {"dims": list(t.dims), "values": t.data.ravel()}
            for name, t in m.parameters().items()
        },
    }
    payload.update(stamp or {})
    return utilities.write_json(path, payload, indent=None)


def load_checkpoint(path):
    """Rebuild the model saved at path; returns (model, payload)"""
    payload = utilities.read_json(path)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ArtifactError(f"{path}: unsupported checkpoint version")
    try:
        dims = payload["dims"]
        no_treatment = NoTreatmentEstimator.from_dict(payload["no_treatment"])
        m = build_model(
            dims["d_s"], dims["d_c"], dims["num_classes"], dims["width"],
            dims["depth"], payload["mode"], no_treatment, payload["mask_context"],
            zero_heads=True,
        )
        m.load_state_dict({
            name: np.array(p["values"], dtype=np.float64).reshape(p["dims"])
            for name, p in payload["params"].items()
        })
    except KeyError as e:
        raise ArtifactError(f"{path}: checkpoint is missing {e}")
    logger.debug(f"loaded {payload['mode']} checkpoint from {path}")
    return m, payload
