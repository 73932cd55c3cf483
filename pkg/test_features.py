"""Directional checks on the synthetic spurious-correlation benchmark.

ERM on the full training split leans on the spurious coordinate; the
retraining methods recover the minority groups. Budgets are small enough that
the whole module runs in seconds.
"""
import pytest

from rebalance.models import OptimConfig, SelfVariant, SplitSpec, SyntheticSpec
from rebalance.services import selfselect, trainer
from rebalance.services.dataset import split
from rebalance.services.evalreport import evaluate, run_wg_ablation
from rebalance.services.samplers import BalanceMode
from rebalance.services.synthlab import generate_synthetic

pytestmark = pytest.mark.slow

ERM_CONFIG = OptimConfig(lr0=0.05, schedule="constant", weight_decay=0.0, total_steps=200, batch_size=128)
RETRAIN_CONFIG = OptimConfig(lr0=0.1, schedule="constant", weight_decay=0.0, total_steps=1000, batch_size=64)
LONG_RETRAIN_CONFIG = OptimConfig(lr0=0.1, schedule="constant", weight_decay=0.0, total_steps=2000, batch_size=64)


def _splits(**spec):
    ds = generate_synthetic(SyntheticSpec(n=10_000, d=12, minority_rate=0.05, **spec))
    return dict(zip(("train", "heldout", "val", "test"), split(ds, SplitSpec(fractions=[0.7, 0.1, 0.1, 0.1], seed=0))))


@pytest.fixture(scope="module")
def benchmark():
    return _splits(spurious_magnitude=2.0, seed=0)


@pytest.fixture(scope="module")
def erm(benchmark):
    return trainer.train_head(
        benchmark["train"], BalanceMode.UNBALANCED, ERM_CONFIG, checkpoints=[0.2], val=benchmark["val"]
    )


def test_erm_relies_on_the_spurious_feature(benchmark, erm):
    metrics = evaluate(erm.head, benchmark["test"])
    assert metrics.worst_group_accuracy < metrics.average_accuracy - 0.25


def test_dfr_recovers_worst_group(benchmark, erm):
    erm_wga = evaluate(erm.head, benchmark["test"]).worst_group_accuracy
    head = trainer.dfr(benchmark["train"], benchmark["heldout"], RETRAIN_CONFIG)
    assert evaluate(head, benchmark["test"]).worst_group_accuracy >= erm_wga + 0.20


def test_retraining_methods_order_on_imbalanced_classes():
    splits = _splits(spurious_magnitude=1.0, class_prior=0.2, seed=1)
    heldout, test = splits["heldout"], splits["test"]
    unbalanced = trainer.retrain_head(heldout, RETRAIN_CONFIG)
    balanced = trainer.cb_last_layer_retrain(heldout, RETRAIN_CONFIG)
    grouped = trainer.dfr(splits["train"], heldout, RETRAIN_CONFIG)

    wga = {name: evaluate(head, test).worst_group_accuracy
           for name, head in (("unbalanced", unbalanced), ("class", balanced), ("group", grouped))}
    assert wga["unbalanced"] < wga["class"] < wga["group"]


def test_disagreement_upsamples_the_worst_group(benchmark, erm):
    variant = SelfVariant(variant="es-disagreement", n=100, es_fraction=0.2)
    _, selection = selfselect.run_self(erm, benchmark["heldout"], variant, RETRAIN_CONFIG)
    assert selection.worst_group_fraction > selection.worst_group_base_rate
    assert selection.worst_group_fraction >= 3 * selection.worst_group_base_rate


def test_disagreement_finetuning_beats_class_balanced_retraining(benchmark, erm):
    variant = SelfVariant(variant="es-disagreement", n=100, es_fraction=0.2)
    head, _ = selfselect.run_self(erm, benchmark["heldout"], variant, RETRAIN_CONFIG)
    balanced = trainer.cb_last_layer_retrain(benchmark["heldout"], RETRAIN_CONFIG)
    test = benchmark["test"]
    assert evaluate(head, test).worst_group_accuracy > evaluate(balanced, test).worst_group_accuracy


def test_free_lunch_beats_erm(benchmark):
    erm_head, retrained = trainer.free_lunch(benchmark["train"], ERM_CONFIG, LONG_RETRAIN_CONFIG)
    test = benchmark["test"]
    assert evaluate(retrained, test).worst_group_accuracy > evaluate(erm_head, test).worst_group_accuracy


def test_more_worst_group_data_does_not_hurt(benchmark, erm):
    rows = run_wg_ablation(erm, benchmark["heldout"], [0.0, 1.0], RETRAIN_CONFIG, eval_ds=benchmark["test"])
    none, full = rows
    assert none["error"] == "" and full["error"] == ""
    assert full["wga"] >= none["wga"]
