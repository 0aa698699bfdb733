"""Full-size debiasing benchmark: three seeds of the whole ablation grid.

Run with `pytest --runslow`.
"""
from dataclasses import replace

import numpy as np
import pytest

from clefbench import experiment
from clefbench.experiment import ExperimentConfig


@pytest.mark.slow
def test_biased_benchmark_grid(tmp_path):
    cfg = replace(ExperimentConfig(), out_dir=str(tmp_path), workers=4).validate()
    result = experiment.ablate(cfg)
    failed = [name for name, ok in result.checks.items() if ok is False]
    assert failed == [], result.to_text()
    assert result.gap_closure >= 0.3


@pytest.mark.slow
def test_unbiased_data_is_not_damaged(tmp_path):
    cfg = ExperimentConfig()
    cfg = replace(
        cfg,
        bias=replace(cfg.bias, beta=0.0),
        test_split="decorrelated",
        ablations=("vanilla", "clef"),
        out_dir=str(tmp_path),
        workers=4,
    ).validate()
    result = experiment.ablate(cfg)
    acc = {r["mode"]: r["accuracy"] for r in result.mean}
    assert abs(acc["clef"] - acc["vanilla"]) <= 0.02


@pytest.mark.slow
def test_tie_and_factual_agree_without_bias(tmp_path):
    cfg = ExperimentConfig()
    cfg = replace(cfg, bias=replace(cfg.bias, beta=0.0), test_split="decorrelated",
                  seeds=(0,), out_dir=str(tmp_path)).validate()
    experiment.generate(cfg, 0)
    checkpoint = experiment.train_cell(cfg, 0, "clef")
    tie = experiment.eval_checkpoint(cfg, checkpoint, "tie")
    factual = experiment.eval_checkpoint(cfg, checkpoint, "factual")
    # two standard errors of an accuracy near 0.7 on 2000 samples
    noise = 2 * np.sqrt(0.7 * 0.3 / 2000)
    assert abs(tie.accuracy - factual.accuracy) <= 2 * noise
