"""Synthetic scenes with a tunable spurious context/label correlation.

Every context type admits a subset of labels (the useful context prior) and
prefers one of them. On the training distribution a label is the preferred
one with probability beta, otherwise uniform over the admissible subset;
test splits drop the preference (decorrelated) or exclude the preferred
label altogether (anti_correlated). Subject signals are noisy label
prototypes, zeroed for occluded samples; context signals are noisy context
type prototypes.
"""
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import simplejson as json
from scipy.special import logsumexp

from clefbench import utilities
from clefbench.errors import ArtifactError, DataError, ValidationError

logger = logging.getLogger("BENCH")

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
TEST_VARIANTS = ("decorrelated", "anti_correlated")
_SPLIT_STREAM = {"train": 1, "val": 2, "test": 3}
_VARIANT_STREAM = {"decorrelated": 0, "anti_correlated": 1}


def default_prior_map(num_classes, num_context_types, width):
    """Context type t admits `width` consecutive classes (mod K) starting at
    t*K//T, and prefers the first of them.
    """
    prior_map, preferred = [], []
    for t in range(num_context_types):
        start = (t * num_classes) // num_context_types
        prior_map.append(tuple((start + j) % num_classes for j in range(width)))
        preferred.append(start)
    return tuple(prior_map), tuple(preferred)


@dataclass(frozen=True)
class BiasSpec:
    num_classes: int = 6
    num_context_types: int = 3
    beta: float = 0.9
    occlusion_rate: float = 0.5
    sigma_s: float = 1.5
    sigma_c: float = 1.0
    d_s: int = 16
    d_c: int = 16
    signal_scale: float = 3.0
    admissible_width: int = 3
    prior_map: tuple = None
    preferred: tuple = None
    multi_label: bool = False
    secondary_rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.prior_map is None:
            prior_map, preferred = default_prior_map(
                self.num_classes, self.num_context_types, self.admissible_width
            )
            object.__setattr__(self, "prior_map", prior_map)
            if self.preferred is None:
                object.__setattr__(self, "preferred", preferred)
        else:
            prior_map = tuple(tuple(int(k) for k in subset) for subset in self.prior_map)
            object.__setattr__(self, "prior_map", prior_map)
            if self.preferred is None:
                object.__setattr__(self, "preferred", tuple(s[0] for s in prior_map if s))
        object.__setattr__(self, "preferred", tuple(int(k) for k in self.preferred))

    def validate(self):
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_context_types < 2:
            raise ValidationError(
                f"num_context_types must be >= 2, got {self.num_context_types}"
            )
        for name in ("beta", "occlusion_rate", "secondary_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        for name in ("sigma_s", "sigma_c", "signal_scale"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_s < 1 or self.d_c < 1:
            raise ValidationError("feature widths must be >= 1")
        if len(self.prior_map) != self.num_context_types:
            raise ValidationError(
                f"prior_map has {len(self.prior_map)} subsets for "
                f"{self.num_context_types} context types"
            )
        if len(self.preferred) != self.num_context_types:
            raise ValidationError("one preferred label per context type is required")
        covered = set()
        for t, subset in enumerate(self.prior_map):
            if not subset:
                raise ValidationError(f"context type {t} admits no label")
            if len(set(subset)) != len(subset):
                raise ValidationError(f"context type {t} repeats a label")
            for k in subset:
                if not 0 <= k < self.num_classes:
                    raise ValidationError(f"context type {t} admits unknown label {k}")
            if self.preferred[t] not in subset:
                raise ValidationError(
                    f"preferred label {self.preferred[t]} of context type {t} "
                    f"is not admissible"
                )
            covered.update(subset)
        missing = sorted(set(range(self.num_classes)) - covered)
        if missing:
            raise ValidationError(f"labels {missing} are admissible for no context type")
        return self

    def to_dict(self):
        d = asdict(self)
        d["prior_map"] = [list(s) for s in self.prior_map]
        d["preferred"] = list(self.preferred)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["prior_map"] = tuple(tuple(s) for s in d["prior_map"])
        d["preferred"] = tuple(d["preferred"])
        return cls(**d)


@dataclass
class SceneSample:
    subject_signal: np.ndarray
    context_signal: np.ndarray
    context_type: int
    label: object
    occluded: bool
    split: str

    @property
    def labels(self):
        """label(s) as a tuple, primary first"""
        if isinstance(self.label, (tuple, list)):
            return tuple(self.label)
        return (self.label,)

    def to_dict(self):
        return {
            "subject_signal": self.subject_signal,
            "context_signal": self.context_signal,
            "context_type": self.context_type,
            "label": list(self.label) if isinstance(self.label, tuple) else self.label,
            "occluded": self.occluded,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d):
        label = d["label"]
        return cls(
            subject_signal=np.array(d["subject_signal"], dtype=np.float64),
            context_signal=np.array(d["context_signal"], dtype=np.float64),
            context_type=int(d["context_type"]),
            label=tuple(label) if isinstance(label, list) else int(label),
            occluded=bool(d["occluded"]),
            split=d["split"],
        )


@dataclass
class GridImage:
    """pixels has dims (height, width, channels); bbox is (x0, y0, x1, y1),
    inclusive-exclusive, x along width
    """

    pixels: np.ndarray
    bbox: tuple

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        self.pixels = pixels
        self.bbox = tuple(int(v) for v in self.bbox)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    def validate(self):
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 <= x1 <= self.width and 0 <= y0 <= y1 <= self.height):
            raise ValidationError(
                f"bbox {self.bbox} outside a {self.height}x{self.width} grid"
            )
        return self


def mask_grid(img):
    """Zero the pixels inside the subject bbox, leave the rest untouched"""
    img.validate()
    x0, y0, x1, y1 = img.bbox
    pixels = img.pixels.copy()
    pixels[y0:y1, x0:x1, :] = 0.0
    return GridImage(pixels, img.bbox)


def scene_vector(sample):
    """[subject slots | context slots]"""
    return np.concatenate([sample.subject_signal, sample.context_signal])


def mask_vector(x, d_s):
    """Zero the leading d_s subject slots of scene vector(s) x"""
    out = np.array(x, dtype=np.float64, copy=True)
    out[..., :d_s] = 0.0
    return out


def mask_features(sample):
    return mask_vector(scene_vector(sample), len(sample.subject_signal))


@dataclass
class SceneBatch:
    """Stacked samples ready for a forward pass"""

    subject: np.ndarray
    context: np.ndarray
    labels: np.ndarray
    context_type: np.ndarray
    occluded: np.ndarray
    label_sets: list = field(default_factory=list)

    @classmethod
    def from_samples(cls, samples, num_classes, multi_label=False):
        if not samples:
            raise DataError("cannot batch zero samples")
        label_sets = [s.labels for s in samples]
        if multi_label:
            labels = np.zeros((len(samples), num_classes))
            for i, ls in enumerate(label_sets):
                labels[i, list(ls)] = 1.0
        else:
            labels = np.array([ls[0] for ls in label_sets], dtype=np.int64)
        return cls(
            subject=np.stack([s.subject_signal for s in samples]),
            context=np.stack([s.context_signal for s in samples]),
            labels=labels,
            context_type=np.array([s.context_type for s in samples], dtype=np.int64),
            occluded=np.array([s.occluded for s in samples], dtype=bool),
            label_sets=label_sets,
        )

    def __len__(self):
        return self.subject.shape[0]

    @property
    def d_s(self):
        return self.subject.shape[1]

    def scene(self, masked=True):
        x = np.concatenate([self.subject, self.context], axis=1)
        return mask_vector(x, self.d_s) if masked else x

    def take(self, idx):
        return SceneBatch(
            subject=self.subject[idx],
            context=self.context[idx],
            labels=self.labels[idx],
            context_type=self.context_type[idx],
            occluded=self.occluded[idx],
            label_sets=[self.label_sets[i] for i in idx],
        )


def _orthogonalish(rng, count, width, scale):
    g = rng.standard_normal((width, count))
    if width >= count:
        q, r = np.linalg.qr(g)
        # fix the sign convention so the factorisation is unique
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        rows = q.T
    else:
        rows = g.T / np.linalg.norm(g.T, axis=1, keepdims=True)
    return scale * rows


def prototypes(spec):
    """Subject prototypes (K, d_s) and context prototypes (T, d_c), fixed by seed"""
    rng = np.random.default_rng([spec.seed, 0])
    subject = _orthogonalish(rng, spec.num_classes, spec.d_s, spec.signal_scale)
    context = _orthogonalish(rng, spec.num_context_types, spec.d_c, spec.signal_scale)
    return subject, context


def _label_support(spec, t, split, test_variant):
    """Admissible labels of context type t with their probabilities"""
    subset = list(spec.prior_map[t])
    pref = spec.preferred[t]
    if split in ("train", "val"):
        probs = [(1.0 - spec.beta) / len(subset) + (spec.beta if k == pref else 0.0)
                 for k in subset]
        return subset, probs
    if test_variant == "anti_correlated":
        others = [k for k in subset if k != pref]
        return others, [1.0 / len(others)] * len(others)
    return subset, [1.0 / len(subset)] * len(subset)


def _check_split(spec, split, test_variant):
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}, got {split}")
    if test_variant not in TEST_VARIANTS:
        raise ValidationError(f"test variant must be one of {TEST_VARIANTS}")
    if split == "test" and test_variant == "anti_correlated":
        narrow = [t for t, s in enumerate(spec.prior_map) if len(s) < 2]
        if narrow:
            raise ValidationError(
                f"context types {narrow} admit a single label, no anti-correlated test"
            )


def occluded_count(spec, n):
    return int(np.floor(spec.occlusion_rate * n + 0.5))


def generate_dataset(spec, n, split="train", test_variant="decorrelated"):
    """n samples of `split`; fully determined by spec.seed, split and variant"""
    spec.validate()
    if n < 1:
        raise ValidationError(f"need at least one sample, got n={n}")
    _check_split(spec, split, test_variant)
    rng = np.random.default_rng(
        [spec.seed, _SPLIT_STREAM[split], _VARIANT_STREAM[test_variant]]
    )
    subject_protos, context_protos = prototypes(spec)

    types = rng.integers(spec.num_context_types, size=n)
    u_bias = rng.random(n)
    u_pick = rng.random(n)
    u_second = rng.random(n)
    u_second_pick = rng.random(n)
    occluded = np.zeros(n, dtype=bool)
    occluded[rng.permutation(n)[:occluded_count(spec, n)]] = True
    subject_noise = rng.standard_normal((n, spec.d_s))
    context_noise = rng.standard_normal((n, spec.d_c))

    samples = []
    for i in range(n):
        t = int(types[i])
        subset = list(spec.prior_map[t])
        pref = spec.preferred[t]
        if split in ("train", "val") and u_bias[i] < spec.beta:
            primary = pref
        elif split == "test" and test_variant == "anti_correlated":
            others = [k for k in subset if k != pref]
            primary = others[int(u_pick[i] * len(others))]
        else:
            primary = subset[int(u_pick[i] * len(subset))]
        labels = [primary]
        if spec.multi_label:
            rest = [k for k in subset if k != primary]
            if rest and u_second[i] < spec.secondary_rate:
                labels.append(rest[int(u_second_pick[i] * len(rest))])
        if occluded[i]:
            subject = np.zeros(spec.d_s)
        else:
            subject = subject_protos[labels].mean(axis=0) + spec.sigma_s * subject_noise[i]
        context = context_protos[t] + spec.sigma_c * context_noise[i]
        samples.append(
            SceneSample(
                subject_signal=subject,
                context_signal=context,
                context_type=t,
                label=tuple(labels) if spec.multi_label else primary,
                occluded=bool(occluded[i]),
                split=split,
            )
        )
    logger.debug(f"generated {n} {split} samples ({int(occluded.sum())} occluded)")
    return samples


def _label_configs(spec, t, split, test_variant):
    """(label tuple, log probability) pairs for context type t"""
    support, probs = _label_support(spec, t, split, test_variant)
    configs = []
    for k, p in zip(support, probs):
        if not spec.multi_label:
            configs.append(((k,), np.log(p)))
            continue
        rest = [j for j in spec.prior_map[t] if j != k]
        if not rest:
            configs.append(((k,), np.log(p)))
            continue
        if spec.secondary_rate < 1.0:
            configs.append(((k,), np.log(p) + np.log1p(-spec.secondary_rate)))
        if spec.secondary_rate > 0.0:
            for j in rest:
                configs.append(
                    ((k, j), np.log(p) + np.log(spec.secondary_rate / len(rest)))
                )
    return configs


def bayes_oracle(spec, sample, assume_split="test", test_variant="decorrelated"):
    """Exact P(label | signals) under the generative model of `assume_split`.

    Multi-class: a distribution over the K classes. Multi-label: for each
    class the posterior probability that it is in the label set.
    """
    _check_split(spec, assume_split, test_variant)
    subject_protos, context_protos = prototypes(spec)
    log_weights, members = [], []
    for t in range(spec.num_context_types):
        diff_c = sample.context_signal - context_protos[t]
        log_context = -np.dot(diff_c, diff_c) / (2.0 * spec.sigma_c ** 2)
        for labels, log_p in _label_configs(spec, t, assume_split, test_variant):
            log_w = -np.log(spec.num_context_types) + log_p + log_context
            if not sample.occluded:
                diff_s = sample.subject_signal - subject_protos[list(labels)].mean(axis=0)
                log_w += -np.dot(diff_s, diff_s) / (2.0 * spec.sigma_s ** 2)
            log_weights.append(log_w)
            members.append(labels)
    log_weights = np.array(log_weights)
    weights = np.exp(log_weights - logsumexp(log_weights))
    posterior = np.zeros(spec.num_classes)
    for w, labels in zip(weights, members):
        if spec.multi_label:
            posterior[list(labels)] += w
        else:
            posterior[labels[0]] += w
    return posterior


def oracle_accuracy(spec, samples, assume_split="test", test_variant="decorrelated"):
    """Top-1 accuracy of the Bayes posterior (a hit is the top class in the label set)"""
    hits = 0
    for s in samples:
        top = int(np.argmax(bayes_oracle(spec, s, assume_split, test_variant)))
        hits += top in s.labels
    return hits / len(samples)


def empirical_preferred_rate(spec, samples):
    """Fraction of samples whose primary label is their context type's preferred one"""
    if not samples:
        raise DataError("no samples")
    hits = np.mean([s.labels[0] == spec.preferred[s.context_type] for s in samples])
    return float(hits)


def empirical_beta(spec, samples):
    """Bias strength recovered from the preferred-label rate.

    The non-biased draw can also land on the preferred label, so
    P(preferred | t) = beta + (1 - beta) / |A_t|; invert that per sample.
    Context types admitting a single label carry no information and are skipped.
    """
    terms = []
    for s in samples:
        width = len(spec.prior_map[s.context_type])
        if width < 2:
            continue
        hit = float(s.labels[0] == spec.preferred[s.context_type])
        terms.append((hit - 1.0 / width) / (1.0 - 1.0 / width))
    if not terms:
        raise DataError("no samples from a context type admitting several labels")
    return float(np.mean(terms))


def dataset_summary(spec, samples):
    counts = np.zeros((spec.num_context_types, spec.num_classes), dtype=int)
    for s in samples:
        for k in s.labels:
            counts[s.context_type, k] += 1
    return {
        "n": len(samples),
        "occluded": int(sum(s.occluded for s in samples)),
        "context_counts": counts.sum(axis=1).tolist(),
        "label_counts": counts.sum(axis=0).tolist(),
        "joint_counts": counts.tolist(),
        "preferred_rate": empirical_preferred_rate(spec, samples),
        "empirical_beta": empirical_beta(spec, samples),
    }


def format_summary(summary, split=""):
    header = ["context"] + [f"y={k}" for k in range(len(summary["label_counts"]))] + ["n"]
    rows = [
        [t] + row + [sum(row)] for t, row in enumerate(summary["joint_counts"])
    ]
    rows.append(["all"] + summary["label_counts"] + [summary["n"]])
    lines = [
        f"{split} n={summary['n']} occluded={summary['occluded']} "
        f"preferred_rate={summary['preferred_rate']:.4f} "
        f"empirical_beta={summary['empirical_beta']:.4f}",
        utilities.format_table(header, rows),
    ]
    return "\n".join(lines)


# --- dataset files ---


@dataclass
class Dataset:
    spec: BiasSpec
    samples: list
    split: str
    test_variant: str
    header: dict
    path: str = None
    hash: str = None


def write_dataset(path, spec, samples, split, test_variant="decorrelated", stamp=None):
    """JSON Lines: one header line (format version, spec, stamp), then one
    sample per line
    """
    header = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "split": split,
        "test_variant": test_variant,
        "n": len(samples),
    }
    header.update(stamp or {})
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(utilities.dumps(header) + "\n")
        for s in samples:
            f.write(utilities.dumps(s.to_dict()) + "\n")
    logger.info(f"Wrote {path} ({utilities.naturalsize(os.path.getsize(path))})")
    return path


def read_dataset(path):
    if not os.path.exists(path):
        raise ArtifactError(f"dataset {path} not found")
    with open(path) as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise DataError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(
                f"{path}: format version {header.get('format_version')}, "
                f"expected {FORMAT_VERSION}"
            )
        spec = BiasSpec.from_dict(header["spec"]).validate()
        samples = [SceneSample.from_dict(json.loads(line)) for line in lines[1:]]
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise DataError(f"{path} does not match the dataset schema: {e}")
    if len(samples) != header.get("n", len(samples)):
        raise DataError(f"{path}: header says {header['n']} samples, found {len(samples)}")
    for s in samples:
        if len(s.subject_signal) != spec.d_s or len(s.context_signal) != spec.d_c:
            raise DataError(f"{path}: sample signal widths do not match the header BiasSpec")
    return Dataset(
        spec=spec,
        samples=samples,
        split=header["split"],
        test_variant=header.get("test_variant", "decorrelated"),
        header=header,
        path=path,
        hash=utilities.file_hash(path),
    )
