"""Command-line entry point: ``python run.py <subcommand> [flags]``.

Settings resolve as built-in defaults, then environment (``REBALANCE_*``),
then a ``--config`` key=value file, then flags given on the command line.
Every run directory gets a ``manifest.txt`` echoing the resolved settings.
"""
import os
import sys
import json
import logging
import argparse
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional

from pydantic import ValidationError
from tqdm import tqdm

from rebalance import configure_logging, create_settings
from rebalance.errors import InvalidInputError, RebalanceError, UsageError
from rebalance.services import evalreport, synthlab
from rebalance.services.experiment import ERM_EPOCHS, RunConfig, run_seed
from rebalance.services.samplers import BalanceMode

logger = logging.getLogger(__name__)

class CliArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> List[int]:
    return [int(item) for item in text.split(",") if item.strip()]


def _float_list(text: str) -> List[float]:
    return [float(item) for item in text.split(",") if item.strip()]


def build_parser(defaults: Optional[dict] = None) -> argparse.ArgumentParser:
    """
    Build the subcommand parser

    Args:
        defaults (dict): Values shown as flag defaults; with None every flag
            defaults to SUPPRESS so only explicitly given flags are parsed

    Returns:
        argparse.ArgumentParser: Parser with one subparser per command
    """
    suppress = defaults is None

    def default(name):
        return argparse.SUPPRESS if suppress else defaults.get(name)

    def flags(parser, specs):
        for flag, kwargs in specs:
            dest = flag.lstrip("-").replace("-", "_")
            parser.add_argument(flag, default=default(dest), **kwargs)

    common = CliArgumentParser(add_help=False)
    flags(common, [
        ("--config", {"help": "key=value settings file; flags override it"}),
        ("--out", {"help": "output directory"}),
        ("--seed", {"type": int, "help": "run seed (REBALANCE_SEED when unset)"}),
        ("--seeds", {"type": _int_list, "help": "comma-separated seeds, one run each"}),
        ("--jobs", {"type": int, "help": "parallel seed runs"}),
        ("--progress", {"action": "store_true", "help": "show progress bars on stderr"}),
        ("--log-level", {"help": "logging level"}),
    ])

    data = CliArgumentParser(add_help=False)
    flags(data, [
        ("--data", {"help": "embeddings (GEMB or .csv); cut 70/10/10/10 unless split files are given"}),
        ("--heldout", {"help": "held-out (reweighting) embeddings"}),
        ("--val", {"help": "model-selection embeddings, halved into held-out and val when --heldout is absent"}),
        ("--test", {"help": "evaluation embeddings"}),
        ("--split-seed", {"type": int, "help": "seed of the train/heldout/val/test cut"}),
    ])

    optim = CliArgumentParser(add_help=False)
    flags(optim, [
        ("--optimizer", {"choices": ["sgd", "adamw"], "help": "optimizer"}),
        ("--lr", {"type": float, "help": "initial learning rate"}),
        ("--schedule", {"choices": ["constant", "cosine", "linear"], "help": "learning-rate schedule"}),
        ("--steps", {"type": int, "help": "optimization steps"}),
        ("--batch-size", {"type": int, "help": "minibatch size"}),
        ("--weight-decay", {"type": float, "help": "l2 weight decay on the weights"}),
        ("--eval-every", {"type": int, "help": "validation trace interval in steps"}),
    ])

    erm = CliArgumentParser(add_help=False)
    flags(erm, [
        ("--erm-steps", {"type": int, "help": f"ERM steps (default: {ERM_EPOCHS} epochs of the training split)"}),
        ("--erm-lr", {"type": float, "help": "ERM learning rate"}),
        ("--checkpoints", {"type": _float_list, "help": "ERM checkpoint fractions"}),
    ])

    parser = CliArgumentParser(
        prog="rebalance",
        description="Last-layer retraining experiments on frozen embeddings",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliArgumentParser)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    synth = sub.add_parser("synth", parents=[common], formatter_class=fmt, help="generate a synthetic dataset")
    flags(synth, [
        ("--n-samples", {"type": int, "help": "rows"}),
        ("--dim", {"type": int, "help": "features (core, spurious, junk...)"}),
        ("--minority-rate", {"type": float, "help": "share of rows whose spurious feature opposes the label"}),
        ("--spurious-magnitude", {"type": float, "help": "spurious coordinate magnitude"}),
        ("--class-prior", {"type": float, "help": "P(y = +1)"}),
    ])

    for name, help_text in (("train", "train a head on the training split"),
                            ("retrain", "retrain a fresh head on the held-out split")):
        cmd = sub.add_parser(name, parents=[common, data, optim], formatter_class=fmt, help=help_text)
        flags(cmd, [
            ("--balance", {"type": BalanceMode, "help": "minibatch balancing mode"}),
            ("--checkpoints", {"type": _float_list, "help": "fractions of training saved as head@<fraction>.ghed"}),
        ])

    dfr = sub.add_parser("dfr", parents=[common, data, optim], formatter_class=fmt, help="group-balanced retraining")
    flags(dfr, [
        ("--repeats", {"type": int, "help": "average heads over this many group-balanced subsets"}),
        ("--grid", {"action": "store_true", "help": "select the learning rate on --val"}),
    ])

    self_cmd = sub.add_parser("self", parents=[common, data, optim, erm], formatter_class=fmt,
                              help="selective last-layer finetuning")
    flags(self_cmd, [
        ("--variant", {"choices": ["random", "misclassification", "es-misclassification",
                                   "dropout-disagreement", "es-disagreement"], "help": "selection cost"}),
        ("--n", {"type": int, "help": "rows to select"}),
        ("--es-fraction", {"type": float, "help": "early-stopped checkpoint fraction"}),
        ("--dropout-p", {"type": float, "help": "dropout probability"}),
        ("--dropout-passes", {"type": int, "help": "dropout passes averaged"}),
        ("--divergence", {"choices": ["kl", "tvd"], "help": "disagreement divergence"}),
        ("--head", {"help": "ERM head file to start from instead of training one"}),
        ("--grid", {"action": "store_true", "help": "search n, lr and the variant parameter on --val"}),
        ("--worst-groups", {"type": _int_list, "help": "groups reported as worst; lowest ERM accuracy when unset"}),
    ])

    free = sub.add_parser("free-lunch", parents=[common, data, optim, erm], formatter_class=fmt,
                          help="ERM then class-balanced retraining on a split of the same data")
    flags(free, [
        ("--holdout-fraction", {"type": float, "help": "share retrained on"}),
        ("--combine-heldout", {"action": "store_true", "help": "pool the held-out split with the training split first"}),
    ])

    ablate = sub.add_parser("ablate", parents=[common, data, optim, erm], formatter_class=fmt,
                            help="worst-group data ablation")
    flags(ablate, [
        ("--fractions", {"type": _float_list, "help": "worst-group fractions"}),
        ("--worst-groups", {"type": _int_list, "help": "groups to ablate; picked from the ERM validation trace when unset"}),
        ("--worst-group-tolerance", {"type": float,
                                     "help": "also ablate groups within this accuracy of the worst one"}),
    ])

    ev = sub.add_parser("eval", parents=[common, data], formatter_class=fmt, help="evaluate a saved head")
    flags(ev, [("--head", {"help": "head file"})])

    verify = sub.add_parser("verify-theorem", parents=[common], formatter_class=fmt,
                            help="check the disagreement gap identity on random instances")
    flags(verify, [("--trials", {"type": int, "help": "random instances"})])
    return parser


def read_config_file(path: str) -> Dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    if not os.path.isfile(path):
        raise UsageError(f"config file {path} not found")
    values = {}
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{number}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve_config(argv: List[str]) -> RunConfig:
    settings = create_settings()
    defaults = {name: info.default for name, info in RunConfig.model_fields.items() if name != "command"}
    defaults.update(seed=settings.seed, jobs=settings.jobs, out=settings.out_dir,
                    log_level=settings.log_level, progress=settings.progress)

    # full parse first so --help and bad flags behave normally
    build_parser(defaults).parse_args(argv)
    explicit = vars(build_parser(None).parse_args(argv))

    values = dict(defaults)
    config_path = explicit.pop("config", None)
    if config_path:
        values.update(read_config_file(config_path))
    values.update(explicit)
    try:
        config = RunConfig(**values)
        # surface bad variant or synthetic settings before any work starts
        if config.command == "self":
            config.self_variant()
        if config.command == "synth":
            config.synthetic_spec(config.seed)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise UsageError(f"invalid settings: {problems}")
    except InvalidInputError as e:
        raise UsageError(f"invalid settings: {e}")
    return config


def _write_manifest(config: RunConfig, out: str) -> None:
    os.makedirs(out, exist_ok=True)
    lines = []
    for key, value in sorted(config.model_dump(mode="json").items()):
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={'' if value is None else value}")
    with open(os.path.join(out, "manifest.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def run(config: RunConfig) -> dict:
    """Execute a resolved command and write its reports; returns a short summary."""
    os.makedirs(config.out, exist_ok=True)
    _write_manifest(config, config.out)

    if config.command == "verify-theorem":
        report = synthlab.verify_theorem(config.trials, config.seed, config.progress)
        payload = report.model_dump()
        with open(os.path.join(config.out, "theorem.json"), "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(payload, indent=2) + "\n")
        return payload

    seeds = config.seed_list
    if config.jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(config.jobs, len(seeds))) as pool:
            results = list(tqdm(pool.map(run_seed, [config] * len(seeds), seeds),
                                total=len(seeds), desc=config.command, disable=not config.progress))
    else:
        results = [run_seed(config, s) for s in tqdm(seeds, desc=config.command, disable=not config.progress)]

    if config.command == "synth":
        return {"command": "synth", "seeds": seeds, "out": config.out}

    totals = {"class": 0, "group": 0}
    for result in results:
        for key in totals:
            totals[key] += result["annotations"][key]
    report = evalreport.summarize(
        config.command,
        seeds,
        [r["metrics"] for r in results],
        annotations=totals,
        config=config.model_dump(mode="json"),
        extras=[r["extras"] for r in results],
    )
    evalreport.emit_report(report, os.path.join(config.out, "report.json"), "json")
    evalreport.emit_report(report, os.path.join(config.out, "report.csv"), "csv")
    return {"command": config.command, "wga_mean": report.wga_mean, "wga_std": report.wga_std,
            "annotations": report.annotations}


def dispatch(argv: Optional[List[str]] = None) -> int:
    """
    Parse ``argv``, run the command and map failures to exit codes

    Returns:
        int: 0 on success, 2 for usage errors, 1 for pipeline errors
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        config = resolve_config(argv)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except UsageError as e:
        print(json.dumps(e.to_record()), file=sys.stderr)
        return 2

    configure_logging(config.log_level)
    try:
        summary = run(config)
    except UsageError as e:
        print(json.dumps(e.to_record()), file=sys.stderr)
        return 2
    except RebalanceError as e:
        logger.error(f"{config.command} failed: {e}")
        print(json.dumps(e.to_record()), file=sys.stderr)
        return 1
    except OSError as e:
        logger.error(f"{config.command} failed: {e}")
        print(json.dumps({"error": "io", "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(summary))
    return 0
