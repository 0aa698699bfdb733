"""clefbench

Usage:
  clefbench generate [options]
  clefbench train [options]
  clefbench eval <checkpoint> [options]
  clefbench ablate [options]
  clefbench report <rundir> [--debug]
  clefbench --help
  clefbench --version

Options:
  --config <path>       Config file, else $CLEFBENCH_CONFIG or ~/.clefbench/config.ini
  --seed <n>            Run this seed only, instead of the configured seeds
  --mode <cell>         Mode or ablation cell to train (clef, vanilla, te_only,
                        no_kl, no_ensemble, no_mask, avg_embedding, random_embedding)
  --epochs <n>          Training epochs
  --out <dir>           Output directory
  --test-split <name>   decorrelated or anti_correlated
  --scorer <name>       tie, factual, te, context_only or ensemble_only
  --data <path>         Dataset file to evaluate on, else the seed's test split
  --workers <n>         Ablation cells run at once
  --debug               Enable debug logging to console
  --help                Show this screen.
"""
import logging
import sys

from docopt import docopt

from clefbench import __version__, config, experiment, report, synthbench, utilities
from clefbench.errors import EXIT_OK, EXIT_UNEXPECTED, ClefError, exit_code_for

logger = logging.getLogger("CLI")


def load_config(args):
    cfg = experiment.load_experiment_config(config.get_config_file(args["--config"]))
    return cfg.with_overrides(
        seed=args["--seed"],
        mode=args["--mode"],
        epochs=args["--epochs"],
        out=args["--out"],
        test_split=args["--test-split"],
        workers=args["--workers"],
    )


def cmd_generate(cfg):
    for seed in cfg.seeds:
        summaries = experiment.generate(cfg, seed)
        for split, summary in summaries.items():
            print(synthbench.format_summary(summary, f"seed {seed} {split}"))
            print()


def cmd_train(cfg, cell):
    for seed in cfg.seeds:
        checkpoint = experiment.train_cell(cfg, seed, cell)
        print(utilities.status(f"seed {seed} {cell}: {checkpoint}"))


def cmd_eval(cfg, checkpoint, scorer=None, dataset_path=None):
    r = experiment.eval_checkpoint(cfg, checkpoint, scorer, dataset_path)
    print(f"{r.mode} scorer={r.scorer} n={r.n} accuracy={r.accuracy:.4f} mAP={r.map:.4f}")
    return r


def cmd_ablate(cfg):
    result = experiment.ablate(cfg)
    print(result.to_text())
    for name, ok in result.checks.items():
        if ok is not None:
            print(utilities.status(f"{name}: {'ok' if ok else 'failed'}", ok))
    return result


def cmd_report(rundir):
    summary = report.write_report(rundir)
    if summary.empty:
        print(utilities.status("no runs found", ok=False))
        return summary
    print(summary.to_markdown())
    for m in summary.missing:
        print(utilities.status(f"missing: {m}", ok=False))
    return summary


def run(args):
    if args["report"]:
        config.setup_logging(None, args["--debug"])
        cmd_report(args["<rundir>"])
        return
    cfg = load_config(args)
    config.setup_logging(cfg.out_dir, args["--debug"])
    logger.debug(f"config hash {experiment.config_hash(cfg)}")
    if args["generate"]:
        cmd_generate(cfg)
    elif args["train"]:
        cmd_train(cfg, args["--mode"] or cfg.train.mode)
    elif args["eval"]:
        cmd_eval(cfg, args["<checkpoint>"], args["--scorer"], args["--data"])
    elif args["ablate"]:
        cmd_ablate(cfg)


def main(argv=None):
    args = docopt(__doc__, argv=argv, version=__version__)
    try:
        run(args)
    except ClefError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return exit_code_for(e)
    except OSError as e:
        logger.error(f"{e}")
        return exit_code_for(e)
    except Exception:
        logger.exception("unexpected failure")
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
