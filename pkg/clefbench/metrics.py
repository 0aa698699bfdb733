import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from clefbench import utilities
from clefbench.errors import ValidationError

logger = logging.getLogger("EVAL")

REPORT_VERSION = 1


def accuracy(predictions, labels):
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if len(predictions) == 0 or len(predictions) != len(labels):
        raise ValidationError(
            f"accuracy needs equal non-empty inputs, got {len(predictions)} "
            f"predictions and {len(labels)} labels"
        )
    return float(np.mean(predictions == labels))


def average_precision(scores, positives):
    """Precision averaged over the ranks of the positives.

    Scores are ranked descending; ties keep input order. Returns None when
    there is no positive (the class is then left out of mAP).
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape:
        raise ValidationError(f"{scores.shape} scores vs {positives.shape} positives")
    n_pos = int(positives.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.arange(1, len(hits) + 1)
    precision_at_hits = np.cumsum(hits)[hits] / ranks[hits]
    # left-to-right sum
    return float(np.cumsum(precision_at_hits)[-1] / n_pos)


def mean_ap(per_class_ap):
    evaluable = [ap for ap in per_class_ap if ap is not None]
    if not evaluable:
        raise ValidationError("no class has a positive sample, mAP undefined")
    return float(np.mean(evaluable))


@dataclass
class EvalReport:
    per_class_ap: list
    map: float
    accuracy: float
    per_class_accuracy: list
    mode: str = None
    scorer: str = None
    dataset_hash: str = None
    seed: int = None
    config_hash: str = None
    n: int = 0
    skipped_classes: list = field(default_factory=list)
    format_version: int = REPORT_VERSION

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != REPORT_VERSION:
            raise ValidationError(f"unsupported report version {d.get('format_version')}")
        return cls(**d)

    def save(self, path):
        return utilities.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(utilities.read_json(path))


def build_report(scores, label_sets, scorer=None, mode=None, dataset_hash=None,
                 seed=None, config_hash=None):
    """EvalReport from (N, K) scores and each sample's label tuple (primary first)"""
    scores = np.asarray(scores, dtype=np.float64)
    n, num_classes = scores.shape
    if n != len(label_sets):
        raise ValidationError(f"{n} score rows for {len(label_sets)} samples")
    top = np.argmax(scores, axis=1)
    primary = np.array([ls[0] for ls in label_sets])
    if all(len(ls) == 1 for ls in label_sets):
        acc = accuracy(top, primary)
    else:
        acc = float(np.mean([t in ls for t, ls in zip(top, label_sets)]))
    per_class_accuracy, per_class_ap, skipped = [], [], []
    for k in range(num_classes):
        members = primary == k
        per_class_accuracy.append(
            accuracy(top[members], primary[members]) if members.any() else None
        )
        ap = average_precision(scores[:, k], [k in ls for ls in label_sets])
        if ap is None:
            logger.warning(f"class {k} has no positive sample, left out of mAP")
            skipped.append(k)
        per_class_ap.append(ap)
    return EvalReport(
        per_class_ap=per_class_ap,
        map=mean_ap(per_class_ap),
        accuracy=acc,
        per_class_accuracy=per_class_accuracy,
        mode=mode,
        scorer=scorer,
        dataset_hash=dataset_hash,
        seed=seed,
        config_hash=config_hash,
        n=n,
        skipped_classes=skipped,
    )


# --- mode comparison ---


COMPARISON_COLUMNS = ("mode", "scorer", "accuracy", "map", "delta_accuracy", "delta_map")


@dataclass
class ComparisonTable:
    rows: list
    baseline: str
    dataset_hash: str
    # clef >= te_only >= baseline on accuracy, None if a row is missing
    ordering: bool = None

    def to_dict(self):
        return asdict(self)

    def to_text(self):
        rows = [[r[c] for c in COMPARISON_COLUMNS] for r in self.rows]
        lines = [utilities.format_table(list(COMPARISON_COLUMNS), rows)]
        if self.ordering is not None:
            mark = "holds" if self.ordering else "violated"
            lines.append(f"ordering TIE >= TE >= {self.baseline}: {mark}")
        return "\n".join(lines)

    def to_csv(self):
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(COMPARISON_COLUMNS)
        for r in self.rows:
            writer.writerow([r[c] for c in COMPARISON_COLUMNS])
        return out.getvalue()


def compare_modes(reports, baseline="vanilla"):
    """Deltas of every report against the baseline one.

    reports maps a row name (mode or ablation cell) to its EvalReport.
    """
    if baseline not in reports:
        raise ValidationError(f"no {baseline} report to compare against")
    hashes = {r.dataset_hash for r in reports.values()}
    if len(hashes) != 1:
        raise ValidationError(f"reports come from different datasets: {sorted(map(str, hashes))}")
    base = reports[baseline]
    rows = []
    for name, r in reports.items():
        rows.append({
            "mode": name,
            "scorer": r.scorer,
            "accuracy": r.accuracy,
            "map": r.map,
            "delta_accuracy": r.accuracy - base.accuracy,
            "delta_map": r.map - base.map,
        })
    ordering = None
    if "clef" in reports and "te_only" in reports:
        ordering = bool(
            reports["clef"].accuracy >= reports["te_only"].accuracy >= base.accuracy
        )
    return ComparisonTable(rows, baseline, hashes.pop(), ordering)
