"""Experiment orchestration: config loading, dataset generation, the
per-cell train/eval runs and the ablation grid.

Layout under out_dir:

    data/seed-<s>/{train,val,test}.jsonl, summary.json
    runs/seed-<s>/<cell>/checkpoint.json, train_log.json, report-<scorer>.json
    ablation.json, ablation.csv, ablation.txt
"""
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from functools import partial

import numpy as np
import trio

from clefbench import config, metrics, synthbench, utilities
from clefbench.causal import NoTreatmentKind, estimate_no_treatment
from clefbench.errors import ValidationError
from clefbench.models import build_model, load_checkpoint, save_checkpoint
from clefbench.synthbench import BiasSpec
from clefbench.train import DEFAULT_SCORER, SCORERS, TrainConfig, evaluate, fit

logger = logging.getLogger("EXPT")


@dataclass(frozen=True)
class Cell:
    """One row of the ablation grid. no_treatment None keeps the configured kind"""

    mode: str
    no_treatment: str = None
    mask_context: bool = True

    @property
    def scorer(self):
        return DEFAULT_SCORER[self.mode]


CELLS = {
    "vanilla": Cell("vanilla"),
    "clef": Cell("clef"),
    "te_only": Cell("te_only"),
    "no_kl": Cell("no_kl"),
    "no_mask": Cell("clef", mask_context=False),
    "avg_embedding": Cell("clef", NoTreatmentKind.AVERAGE_PRIOR.value),
    "random_embedding": Cell("clef", NoTreatmentKind.RANDOM_FIXED.value),
    "no_ensemble": Cell("no_ensemble"),
}
DEFAULT_ABLATIONS = (
    "vanilla", "clef", "te_only", "no_kl", "no_mask", "avg_embedding", "random_embedding",
)
# clef checkpoint re-scored by its context branch alone
PROBE = "context_probe"
# slack, in accuracy points, of the ablation direction checks
SLACK = 0.005


@dataclass(frozen=True)
class ModelConfig:
    width: int = 32
    depth: int = 2


@dataclass(frozen=True)
class ExperimentConfig:
    bias: BiasSpec = field(default_factory=BiasSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    out_dir: str = "runs"
    n_train: int = 6000
    n_val: int = 1000
    n_test: int = 2000
    test_split: str = "anti_correlated"
    seeds: tuple = (0, 1, 2)
    ablations: tuple = DEFAULT_ABLATIONS
    workers: int = 1

    def validate(self):
        self.bias.validate()
        self.train.validate()
        if self.model.width < 1 or self.model.depth < 1:
            raise ValidationError("model width and depth must be >= 1")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.test_split not in synthbench.TEST_VARIANTS:
            raise ValidationError(
                f"test_split must be one of {synthbench.TEST_VARIANTS}, got {self.test_split}"
            )
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        unknown = [a for a in self.ablations if a not in CELLS]
        if unknown:
            raise ValidationError(f"unknown ablation cells {unknown}, known: {sorted(CELLS)}")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.bias.multi_label != (self.train.task == "multi_label"):
            raise ValidationError("[bias] multi_label and [train] task disagree")
        return self

    def to_dict(self):
        d = asdict(self)
        d["bias"] = self.bias.to_dict()
        d["seeds"] = list(self.seeds)
        d["ablations"] = list(self.ablations)
        return d

    def with_overrides(self, seed=None, mode=None, epochs=None, out=None,
                       test_split=None, workers=None):
        """Command line values win over the file; None leaves a field alone"""
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seeds=(int(seed),))
        if mode is not None:
            if mode not in CELLS:
                raise ValidationError(f"mode must be one of {sorted(CELLS)}, got {mode}")
            cfg = replace(cfg, train=replace(cfg.train, mode=CELLS[mode].mode))
        if epochs is not None:
            cfg = replace(cfg, train=replace(cfg.train, epochs=int(epochs)))
        if out is not None:
            cfg = replace(cfg, out_dir=out)
        if test_split is not None:
            cfg = replace(cfg, test_split=test_split)
        if workers is not None:
            cfg = replace(cfg, workers=int(workers))
        return cfg.validate()


def _prior_map(value):
    """'0 1 2 | 2 3 4 | 4 5 0' -> ((0, 1, 2), (2, 3, 4), (4, 5, 0))"""
    try:
        return tuple(tuple(int(k) for k in part.split()) for part in value.split("|"))
    except ValueError as e:
        raise ValidationError(f"bad prior_map {value!r}: {e}")


_BIAS_FIELDS = {
    "num_classes": int, "num_context_types": int, "beta": float,
    "occlusion_rate": float, "sigma_s": float, "sigma_c": float, "d_s": int,
    "d_c": int, "signal_scale": float, "admissible_width": int,
    "prior_map": _prior_map, "preferred": partial(config.get_list, cast=int),
    "multi_label": bool, "secondary_rate": float, "seed": int,
}
_TRAIN_FIELDS = {
    "epochs": int, "batch_size": int, "optimizer": None, "lr": float,
    "momentum": float, "beta1": float, "beta2": float, "eps": float, "seed": int,
    "mode": None, "no_treatment": None, "init_low": float, "init_high": float,
    "task": None, "kl_weight": float, "kl_direction": None,
}
_MODEL_FIELDS = {"width": int, "depth": int}
_EXPERIMENT_FIELDS = {
    "out_dir": None, "n_train": int, "n_val": int, "n_test": int,
    "test_split": None, "seeds": partial(config.get_list, cast=int),
    "ablations": config.get_list, "workers": int,
}


def load_experiment_config(path=None):
    """ExperimentConfig from an INI file (the packaged example when path is None)"""
    parser = config.create_config(path)
    if path:
        logger.debug(f"reading config {path}")
    bias = config.section_values(parser, "bias", _BIAS_FIELDS)
    if "preferred" in bias:
        bias["preferred"] = tuple(bias["preferred"])
    experiment = config.section_values(parser, "experiment", _EXPERIMENT_FIELDS)
    for key in ("seeds", "ablations"):
        if key in experiment:
            experiment[key] = tuple(experiment[key])
    try:
        cfg = ExperimentConfig(
            bias=BiasSpec(**bias),
            train=TrainConfig(**config.section_values(parser, "train", _TRAIN_FIELDS)),
            model=ModelConfig(**config.section_values(parser, "model", _MODEL_FIELDS)),
            **experiment,
        )
    except (TypeError, IndexError) as e:
        raise ValidationError(f"bad config {path}: {e}")
    return cfg.validate()


def config_hash(cfg):
    """Hash of everything that shapes an artifact's bytes; where artifacts go,
    which seeds and cells run and how many workers run them are left out
    """
    d = cfg.to_dict()
    for key in ("out_dir", "seeds", "ablations", "workers"):
        d.pop(key)
    d["bias"].pop("seed")
    d["train"].pop("seed")
    d["train"].pop("mode")
    return utilities.stable_hash(d)


# --- paths ---


def data_dir(cfg, seed):
    return os.path.join(cfg.out_dir, "data", f"seed-{seed}")


def split_path(cfg, seed, split):
    return os.path.join(data_dir(cfg, seed), f"{split}.jsonl")


def run_dir(cfg, seed, cell):
    return os.path.join(cfg.out_dir, "runs", f"seed-{seed}", cell)


def report_path(checkpoint_path, scorer):
    return os.path.join(os.path.dirname(checkpoint_path), f"report-{scorer}.json")


# --- generate ---


def generate(cfg, seed):
    """Write the three splits and their summary for one seed; returns the
    summaries by split
    """
    spec = replace(cfg.bias, seed=seed).validate()
    stamp = {"config_hash": config_hash(cfg), "seed": seed}
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    summaries = {}
    for split in synthbench.SPLITS:
        variant = cfg.test_split if split == "test" else "decorrelated"
        samples = synthbench.generate_dataset(spec, sizes[split], split, variant)
        synthbench.write_dataset(split_path(cfg, seed, split), spec, samples, split,
                                 variant, stamp)
        summaries[split] = synthbench.dataset_summary(spec, samples)
    utilities.write_json(
        os.path.join(data_dir(cfg, seed), "summary.json"), dict(stamp, splits=summaries)
    )
    return summaries


def load_split(cfg, seed, split):
    return synthbench.read_dataset(split_path(cfg, seed, split))


# --- train / eval ---


def _cell_train_config(cfg, seed, cell):
    train = replace(cfg.train, mode=cell.mode, seed=seed)
    if cell.no_treatment is not None:
        train = replace(train, no_treatment=cell.no_treatment)
    return train.validate()


def train_cell(cfg, seed, cell_name):
    """Train one grid cell on the seed's data; writes checkpoint and log,
    returns the checkpoint path
    """
    cell = CELLS[cell_name]
    train_cfg = _cell_train_config(cfg, seed, cell)
    train_set, val_set = load_split(cfg, seed, "train"), load_split(cfg, seed, "val")
    spec = train_set.spec
    no_treatment = estimate_no_treatment(
        train_cfg.no_treatment,
        spec.num_classes,
        (train_cfg.init_low, train_cfg.init_high),
        labels=[s.labels for s in train_set.samples],
        seed=seed,
    )
    model = build_model(
        spec.d_s, spec.d_c, spec.num_classes, cfg.model.width, cfg.model.depth,
        cell.mode, no_treatment, cell.mask_context, seed,
    )
    logger.info(f"seed {seed} {cell_name}: training {cell.mode} for {train_cfg.epochs} epochs")
    log = fit(model, train_set.samples, val_set.samples, train_cfg)

    stamp = {"config_hash": config_hash(cfg), "seed": seed}
    out = run_dir(cfg, seed, cell_name)
    checkpoint = save_checkpoint(
        os.path.join(out, "checkpoint.json"),
        model,
        dict(stamp, cell=cell_name, dataset_hash=train_set.hash,
             best_epoch=log.best_epoch),
    )
    utilities.write_json(
        os.path.join(out, "train_log.json"),
        [dict(r, **stamp) for r in log.to_list()],
    )
    return checkpoint


def eval_checkpoint(cfg, checkpoint_path, scorer=None, dataset_path=None):
    """Score a checkpoint on a dataset (its seed's test split by default);
    writes report-<scorer>.json next to the checkpoint
    """
    model, payload = load_checkpoint(checkpoint_path)
    seed = payload.get("seed", cfg.seeds[0])
    dataset = synthbench.read_dataset(dataset_path or split_path(cfg, seed, "test"))
    spec = dataset.spec
    if spec.num_classes != model.num_classes:
        raise ValidationError(
            f"checkpoint has {model.num_classes} classes, dataset has {spec.num_classes}"
        )
    if (spec.d_s, spec.d_c) != (model.d_s, model.d_c):
        raise ValidationError(
            f"checkpoint widths ({model.d_s}, {model.d_c}) do not match the dataset's "
            f"({spec.d_s}, {spec.d_c})"
        )
    scorer = scorer or DEFAULT_SCORER[model.mode]
    if scorer not in SCORERS:
        raise ValidationError(f"scorer must be one of {SCORERS}, got {scorer}")
    task = "multi_label" if spec.multi_label else "multi_class"
    report = evaluate(
        model, dataset.samples, scorer, task,
        stamp={"dataset_hash": dataset.hash, "seed": seed,
               "config_hash": payload.get("config_hash")},
    )
    report.save(report_path(checkpoint_path, scorer))
    return report


def run_cell(cfg, seed, cell_name):
    """train_cell then eval_checkpoint with the cell's scorer"""
    checkpoint = train_cell(cfg, seed, cell_name)
    return eval_checkpoint(cfg, checkpoint, CELLS[cell_name].scorer)


# --- ablation grid ---


async def _run_grid(jobs, workers):
    """Run (key, fn) jobs in worker threads, at most `workers` at once.

    Failures are collected rather than raised inside the nursery so the
    caller sees the original exception.
    """
    limiter = trio.CapacityLimiter(workers)
    results = {}

    async def run_one(key, fn):
        try:
            results[key] = await trio.to_thread.run_sync(fn, limiter=limiter)
        except Exception as e:
            results[key] = e

    async with trio.open_nursery() as nursery:
        for key, fn in jobs:
            nursery.start_soon(run_one, key, fn)
    return results


def run_grid(jobs, workers=1):
    results = trio.run(_run_grid, jobs, workers)
    # first failure in job order, so the error reported does not depend on timing
    for key, _ in jobs:
        if isinstance(results[key], Exception):
            raise results[key]
    return {key: results[key] for key, _ in jobs}


@dataclass
class AblationResult:
    per_seed: dict
    mean: list
    oracle_accuracy: dict
    gap_closure: float
    checks: dict
    config_hash: str

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "per_seed": {str(s): t.to_dict() for s, t in self.per_seed.items()},
            "mean": self.mean,
            "oracle_accuracy": {str(s): a for s, a in self.oracle_accuracy.items()},
            "gap_closure": self.gap_closure,
            "checks": self.checks,
        }

    def to_text(self):
        lines = []
        for seed, table in self.per_seed.items():
            lines += [f"seed {seed} (oracle accuracy {self.oracle_accuracy[seed]:.4f})",
                      table.to_text(), ""]
        rows = [[r[c] for c in metrics.COMPARISON_COLUMNS] for r in self.mean]
        lines += [f"mean over {len(self.per_seed)} seeds",
                  utilities.format_table(list(metrics.COMPARISON_COLUMNS), rows)]
        if self.gap_closure is not None:
            lines.append(f"gap closed towards the oracle: {self.gap_closure:.4f}")
        for name, ok in self.checks.items():
            if ok is not None:
                lines.append(f"{name}: {'ok' if ok else 'failed'}")
        return "\n".join(lines)

    def to_csv(self):
        header = ["seed"] + list(metrics.COMPARISON_COLUMNS)
        lines = [",".join(header)]
        for seed, table in self.per_seed.items():
            for r in table.rows:
                lines.append(",".join(str(v) for v in [seed] + [r[c] for c in header[1:]]))
        for r in self.mean:
            lines.append(",".join(str(v) for v in ["mean"] + [r[c] for c in header[1:]]))
        return "\n".join(lines) + "\n"


def mean_rows(tables, baseline="vanilla"):
    """Comparison rows averaged over seeds, deltas against the mean baseline"""
    names = [r["mode"] for r in next(iter(tables.values())).rows]
    rows = []
    for name in names:
        picked = [next(r for r in t.rows if r["mode"] == name) for t in tables.values()]
        rows.append({
            "mode": name,
            "scorer": picked[0]["scorer"],
            "accuracy": float(np.mean([r["accuracy"] for r in picked])),
            "map": float(np.mean([r["map"] for r in picked])),
        })
    base = next(r for r in rows if r["mode"] == baseline)
    for r in rows:
        r["delta_accuracy"] = r["accuracy"] - base["accuracy"]
        r["delta_map"] = r["map"] - base["map"]
    return rows


def directional_checks(per_seed, mean, gap_closure):
    """Expected directions of the debiasing grid; None where a row is missing"""
    acc = {r["mode"]: r["accuracy"] for r in mean}

    def below(a, b):
        if a not in acc or b not in acc:
            return None
        return bool(acc[a] <= acc[b] + SLACK)

    checks = {}
    if "clef" in acc:
        checks["clef_beats_vanilla_by_5pt_every_seed"] = all(
            next(r for r in t.rows if r["mode"] == "clef")["delta_accuracy"] >= 0.05
            for t in per_seed.values()
        )
    if "te_only" in acc and "clef" in acc:
        checks["tie_above_te_above_vanilla"] = bool(
            acc["clef"] > acc["te_only"] >= acc["vanilla"]
        )
    checks["context_probe_below_vanilla"] = below(PROBE, "vanilla")
    checks["gap_closure_at_least_0.3"] = None if gap_closure is None \
        else bool(gap_closure >= 0.3)
    checks["no_kl_not_above_clef"] = below("no_kl", "clef")
    checks["no_mask_not_above_clef"] = below("no_mask", "clef")
    # a fixed y_e* is a reparametrization of the learnable one, so these
    # cells can only be measured against clef
    checks["avg_embedding_not_above_clef"] = below("avg_embedding", "clef")
    checks["random_embedding_not_above_clef"] = below("random_embedding", "clef")
    return checks


def ablate(cfg):
    """The full grid over every seed on shared data; writes ablation.{json,csv,txt}"""
    cfg.validate()
    cells = list(cfg.ablations)
    if "vanilla" not in cells:
        cells.insert(0, "vanilla")
    for seed in cfg.seeds:
        generate(cfg, seed)
    jobs = [((seed, cell), partial(run_cell, cfg, seed, cell))
            for seed in cfg.seeds for cell in cells]
    logger.info(f"running {len(jobs)} cells on {cfg.workers} worker(s)")
    reports = run_grid(jobs, cfg.workers)

    per_seed, oracle = {}, {}
    for seed in cfg.seeds:
        by_cell = {cell: reports[(seed, cell)] for cell in cells}
        if "clef" in cells:
            by_cell[PROBE] = eval_checkpoint(
                cfg, os.path.join(run_dir(cfg, seed, "clef"), "checkpoint.json"),
                "context_only",
            )
        per_seed[seed] = metrics.compare_modes(by_cell)
        test = load_split(cfg, seed, "test")
        oracle[seed] = synthbench.oracle_accuracy(
            test.spec, test.samples, "test", cfg.test_split
        )
    mean = mean_rows(per_seed)
    acc = {r["mode"]: r["accuracy"] for r in mean}
    gap_closure = None
    oracle_mean = float(np.mean(list(oracle.values())))
    if "clef" in acc and oracle_mean > acc["vanilla"]:
        gap_closure = (acc["clef"] - acc["vanilla"]) / (oracle_mean - acc["vanilla"])
    result = AblationResult(
        per_seed=per_seed,
        mean=mean,
        oracle_accuracy=oracle,
        gap_closure=gap_closure,
        checks=directional_checks(per_seed, mean, gap_closure),
        config_hash=config_hash(cfg),
    )
    utilities.write_json(os.path.join(cfg.out_dir, "ablation.json"), result.to_dict())
    for ext, text in (("csv", result.to_csv()), ("txt", result.to_text())):
        path = os.path.join(cfg.out_dir, f"ablation.{ext}")
        with open(path, "w") as f:
            f.write(text if ext == "csv" else text + "\n")
        logger.info(f"Wrote {path} ({utilities.naturalsize(len(text))})")
    return result
