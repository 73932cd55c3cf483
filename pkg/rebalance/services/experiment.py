"""Per-seed execution of one experiment command.

``RunConfig`` is the resolved settings record built by the command line.
``ExperimentService`` loads the splits a command needs, runs it for one seed
and writes heads, selections and ablation tables into the seed directory.
"""
import os
import logging
from typing import Annotated, List, Literal, Optional

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    field_validator,
)

from rebalance.errors import UsageError
from rebalance.models import (
    AnnotationLedger,
    CheckpointSet,
    OptimConfig,
    SelfVariant,
    SplitSpec,
    SyntheticSpec,
    TrainReport,
)
from rebalance.services import evalreport, selfselect, synthlab, trainer
from rebalance.services.dataset import halve, load_embeddings, save_embeddings, split
from rebalance.services.samplers import BalanceMode

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("synth", "train", "retrain", "dfr", "self", "free-lunch", "ablate", "eval", "verify-theorem")
DATA_SPLIT = (0.7, 0.1, 0.1, 0.1)
ERM_EPOCHS = 10
LIST_FIELDS = ("seeds", "checkpoints", "fractions", "worst_groups")

CheckpointFraction = Annotated[float, Field(gt=0.0, le=1.0)]
AblationFraction = Annotated[float, Field(ge=0.0, le=1.0)]


class RunConfig(BaseModel):
    """Fully resolved settings of one CLI invocation."""

    model_config = ConfigDict(extra="forbid")

    command: Literal[SUBCOMMANDS]
    data: Optional[str] = None
    heldout: Optional[str] = None
    val: Optional[str] = None
    test: Optional[str] = None
    split_seed: NonNegativeInt = 0
    out: str = "runs"
    seed: NonNegativeInt = 0
    seeds: Optional[List[NonNegativeInt]] = None
    jobs: PositiveInt = 1
    progress: bool = False
    log_level: str = "WARNING"

    optimizer: Literal["sgd", "adamw"] = "sgd"
    lr: PositiveFloat = 1e-3
    schedule: Literal["constant", "cosine", "linear"] = "cosine"
    steps: NonNegativeInt = 250
    batch_size: PositiveInt = 32
    weight_decay: NonNegativeFloat = 1e-4
    eval_every: Optional[PositiveInt] = None
    balance: BalanceMode = BalanceMode.UNBALANCED
    grid: bool = False

    erm_steps: Optional[NonNegativeInt] = None
    erm_lr: PositiveFloat = 3e-3
    checkpoints: List[CheckpointFraction] = [0.1, 0.2, 0.5]

    repeats: PositiveInt = 1
    variant: str = "es-disagreement"
    n: PositiveInt = 20
    es_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    dropout_p: float = Field(default=0.5, gt=0.0, lt=1.0)
    dropout_passes: PositiveInt = 1
    divergence: Literal["kl", "tvd"] = "kl"
    holdout_fraction: float = Field(default=0.05, gt=0.0, lt=1.0)
    combine_heldout: bool = False
    fractions: List[AblationFraction] = list(evalreport.ABLATION_FRACTIONS)
    worst_groups: Optional[List[NonNegativeInt]] = None
    worst_group_tolerance: NonNegativeFloat = 0.0
    head: Optional[str] = None

    trials: PositiveInt = 1000
    n_samples: PositiveInt = 10_000
    dim: int = Field(default=12, ge=3)
    minority_rate: float = Field(default=0.05, gt=0.0, le=0.5)
    spurious_magnitude: PositiveFloat = 1.0
    class_prior: float = Field(default=0.5, gt=0.0, lt=1.0)

    @field_validator(*LIST_FIELDS, mode="before")
    @classmethod
    def _split_commas(cls, value):
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @property
    def seed_list(self) -> List[int]:
        return list(self.seeds) if self.seeds else [self.seed]

    def optim(self, seed: int) -> OptimConfig:
        return OptimConfig(
            optimizer=self.optimizer,
            lr0=self.lr,
            schedule=self.schedule,
            weight_decay=self.weight_decay,
            total_steps=self.steps,
            batch_size=self.batch_size,
            seed=seed,
            eval_every=self.eval_every,
        )

    def erm_optim(self, seed: int, n: int) -> OptimConfig:
        steps = self.erm_steps if self.erm_steps is not None else trainer.steps_for_epochs(n, self.batch_size, ERM_EPOCHS)
        return self.optim(seed).model_copy(update={"lr0": self.erm_lr, "total_steps": steps})

    def self_variant(self) -> SelfVariant:
        return SelfVariant(
            variant=self.variant,
            n=self.n,
            es_fraction=self.es_fraction,
            dropout_p=self.dropout_p,
            dropout_passes=self.dropout_passes,
            divergence=self.divergence,
        )

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(
            n=self.n_samples,
            d=self.dim,
            minority_rate=self.minority_rate,
            spurious_magnitude=self.spurious_magnitude,
            class_prior=self.class_prior,
            seed=seed,
        )


class ExperimentService:
    """
    Runs one seed of one command

    Args:
        config (RunConfig): Resolved settings
        seed (int): Seed of this run; it lands in its own directory when
            several seeds are requested
    """

    def __init__(self, config: RunConfig, seed: int):
        self.config = config
        self.seed = seed
        if len(config.seed_list) == 1:
            self.out = config.out
        else:
            self.out = os.path.join(config.out, f"seed-{seed}")

    def run(self) -> dict:
        """Execute the command; returns metrics, annotation totals and extras."""
        os.makedirs(self.out, exist_ok=True)
        command = self.config.command
        if command == "synth":
            return self.synthesize()
        if command == "eval":
            return self.evaluate_head()

        splits = self.load_splits()
        handlers = {
            "train": self.train,
            "retrain": self.train,
            "dfr": self.dfr,
            "self": self.select_and_finetune,
            "free-lunch": self.free_lunch,
            "ablate": self.ablate,
        }
        if command not in handlers:
            raise UsageError(f"{command} has no per-seed run")

        ledger = AnnotationLedger(splits["heldout"].n)
        val_ledger = AnnotationLedger(splits["val"].n, scope="val")
        extras = {"seed": self.seed}
        head, ledger = handlers[command](splits, ledger, val_ledger, extras)

        trainer.save_head(head, os.path.join(self.out, "head.ghed"))
        logger.info(f"{command} seed {self.seed} finished, head saved under {self.out}")
        return {
            "metrics": evalreport.evaluate(head, splits["test"]),
            "annotations": AnnotationLedger.merge(ledger, val_ledger),
            "extras": extras,
        }

    def synthesize(self) -> dict:
        ds = synthlab.generate_synthetic(self.config.synthetic_spec(self.seed))
        save_embeddings(ds, os.path.join(self.out, "synthetic.gemb"))
        return {"metrics": None, "annotations": {"class": 0, "group": 0}, "extras": {"seed": self.seed, "rows": ds.n}}

    def evaluate_head(self) -> dict:
        config = self.config
        if not config.head:
            raise UsageError("eval needs --head")
        path = config.test or config.data
        if not path:
            raise UsageError("eval needs --test or --data")
        metrics = evalreport.evaluate(trainer.load_head(config.head), load_embeddings(path))
        return {"metrics": metrics, "annotations": {"class": 0, "group": 0}, "extras": {"seed": self.seed}}

    def load_splits(self) -> dict:
        """
        Train, held-out, validation and test splits

        ``--data`` is cut 70/10/10/10 unless ``--val`` and ``--test`` are
        given. A ``--val`` file without ``--heldout`` is halved into both.
        """
        config = self.config
        if not config.data:
            raise UsageError(f"{config.command} needs --data")
        train = load_embeddings(config.data)
        given = {name: getattr(config, name) for name in ("heldout", "val", "test")}
        if given["val"] and given["test"]:
            splits = {"train": train}
        else:
            parts = split(train, SplitSpec(fractions=list(DATA_SPLIT), seed=config.split_seed))
            splits = dict(zip(("train", "heldout", "val", "test"), parts))
        for name, path in given.items():
            if path:
                splits[name] = load_embeddings(path)
        if given["val"] and not given["heldout"]:
            splits["heldout"], splits["val"] = halve(splits["val"], seed=config.split_seed)
        return splits

    def erm_report(self, splits: dict) -> TrainReport:
        """ERM on the training split, or the head given with ``--head``."""
        config = self.config
        if config.head:
            head = trainer.load_head(config.head)
            return TrainReport(head=head, checkpoints=CheckpointSet({1.0: head}), loss_trace=[])
        fractions = sorted(set(config.checkpoints) | ({config.es_fraction} if config.command == "self" else set()))
        report = trainer.train_head(
            splits["train"], BalanceMode.UNBALANCED, config.erm_optim(self.seed, splits["train"].n),
            checkpoints=fractions, val=splits["val"],
        )
        trainer.save_head(report.head, os.path.join(self.out, "erm.ghed"))
        return report

    def train(self, splits, ledger, val_ledger, extras):
        config = self.config
        # retrain starts a fresh head on the held-out split
        ds = splits["train"] if config.command == "train" else splits["heldout"]
        report = trainer.train_head(
            ds, config.balance, config.optim(self.seed), checkpoints=config.checkpoints, val=splits["val"]
        )
        for fraction in report.checkpoints.fractions:
            trainer.save_head(report.checkpoints.at(fraction), os.path.join(self.out, f"head@{fraction:g}.ghed"))
        if config.command == "train":
            ledger = AnnotationLedger(ds.n, scope="train")
        ledger.reveal(np.arange(ds.n), "class")
        if config.balance.needs_groups:
            ledger.reveal(np.arange(ds.n), "group")
        extras["final_loss"] = report.loss_trace[-1] if report.loss_trace else None
        return report.head, ledger

    def dfr(self, splits, ledger, val_ledger, extras):
        config = self.config
        optim = config.optim(self.seed)
        if not config.grid:
            return trainer.dfr(splits["train"], splits["heldout"], optim, ledger, config.repeats), ledger
        candidates = [
            (trainer.dfr(splits["train"], splits["heldout"], optim.model_copy(update={"lr0": lr}), ledger, config.repeats),
             {"lr": lr})
            for lr in (1e-4, 1e-3, 1e-2)
        ]
        head, best = evalreport.model_select(candidates, splits["val"], val_ledger)
        extras["selected"] = best
        return head, ledger

    def select_and_finetune(self, splits, ledger, val_ledger, extras):
        config = self.config
        optim = config.optim(self.seed)
        erm = self.erm_report(splits)
        if config.grid:
            head, selection, best = selfselect.run_self_grid(
                erm, splits["heldout"], splits["val"], config.self_variant(), optim, ledger=ledger, val_ledger=val_ledger
            )
            extras["selected"] = best
        else:
            head, selection = selfselect.run_self(
                erm, splits["heldout"], config.self_variant(), optim, ledger, worst_groups=config.worst_groups
            )
        selfselect.dump_selection(selection, splits["heldout"], os.path.join(self.out, "selection.csv"))
        extras.update(
            annotations_requested=selection.annotations_requested,
            worst_groups=list(selection.worst_groups),
            worst_group_fraction=selection.worst_group_fraction,
            worst_group_base_rate=selection.worst_group_base_rate,
            reweight_accuracy=selection.reweight_accuracy,
        )
        return head, ledger

    def free_lunch(self, splits, ledger, val_ledger, extras):
        config = self.config
        extra = splits["heldout"] if config.combine_heldout else None
        pool = splits["train"].n + (extra.n if extra is not None else 0)
        erm_head, head = trainer.free_lunch(
            splits["train"], config.erm_optim(self.seed, pool), config.optim(self.seed), config.holdout_fraction,
            extra=extra,
        )
        trainer.save_head(erm_head, os.path.join(self.out, "erm.ghed"))
        erm_metrics = evalreport.evaluate(erm_head, splits["test"])
        extras.update(erm_wga=erm_metrics.worst_group_accuracy, erm_avg=erm_metrics.average_accuracy, pooled_rows=pool)
        # only class labels were used, and the merge below skips a missing ledger
        return head, None

    def ablate(self, splits, ledger, val_ledger, extras):
        config = self.config
        erm = self.erm_report(splits)
        rows = evalreport.run_wg_ablation(
            erm, splits["heldout"], config.fractions, config.optim(self.seed), eval_ds=splits["test"],
            worst_groups=config.worst_groups, tolerance=config.worst_group_tolerance, progress=config.progress,
        )
        evalreport.emit_table(rows, os.path.join(self.out, "ablation.csv"), columns=evalreport.ABLATION_COLUMNS)
        ledger.reveal(np.arange(ledger.size), "class")
        ledger.reveal(np.arange(ledger.size), "group")
        extras["ablation"] = rows
        return erm.head, ledger


def run_seed(config: RunConfig, seed: int) -> dict:
    """Module-level entry so a process pool can pickle the call."""
    return ExperimentService(config, seed).run()
