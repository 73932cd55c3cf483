import numpy as np
import pytest

from rebalance.errors import InvalidInputError, LinkValidityError, TheoremViolationError
from rebalance.models import SyntheticSpec, TheoremInstance
from rebalance.services import synthlab


def _worked_instance(**update):
    base = dict(alpha_erm=0.7, beta_erm=0.3, alpha_reg=0.5, beta_reg=0.5, b=0.5, core_mag=1.0, spurious_mag=0.8)
    base.update(update)
    return TheoremInstance(**base)


def test_worked_instance():
    inst = _worked_instance()
    np.testing.assert_allclose(synthlab._logits(inst), [0.46, 0.10, 0.94, 0.90])
    assert synthlab.tvd_gap_formula(inst) == pytest.approx(0.08)
    assert synthlab.tvd_gap_direct(inst) == pytest.approx(0.08)


def test_gap_is_symmetric_in_the_two_models():
    inst = _worked_instance()
    assert synthlab.tvd_gap_direct(inst.swapped()) == pytest.approx(synthlab.tvd_gap_direct(inst), abs=1e-15)
    assert synthlab.tvd_gap_formula(inst.swapped()) == synthlab.tvd_gap_formula(inst)


def test_gap_vanishes_for_equal_models_or_flat_link():
    same = _worked_instance(alpha_erm=0.5, beta_erm=0.5)
    assert synthlab.tvd_gap_formula(same) == 0.0
    assert synthlab.tvd_gap_direct(same) == pytest.approx(0.0, abs=1e-15)
    flat = _worked_instance(b=0.0)
    assert synthlab.tvd_gap_formula(flat) == 0.0
    assert synthlab.tvd_gap_direct(flat) == 0.0


def test_gap_scales_linearly():
    inst = _worked_instance(b=0.25)
    doubled_b = _worked_instance(b=0.5)
    assert synthlab.tvd_gap_direct(doubled_b) == pytest.approx(2 * synthlab.tvd_gap_direct(inst))
    # |beta_erm - beta_reg| goes from 0.1 to 0.2
    narrow = _worked_instance(alpha_erm=0.6, beta_erm=0.4)
    assert synthlab.tvd_gap_direct(inst.model_copy(update={"b": 0.5})) == pytest.approx(
        2 * synthlab.tvd_gap_direct(narrow)
    )


def test_link_validity_is_enforced():
    inst = _worked_instance(b=2.0)
    assert not synthlab.link_valid(inst)
    with pytest.raises(LinkValidityError):
        synthlab.tvd_gap_formula(inst)
    with pytest.raises(LinkValidityError):
        synthlab.tvd_gap_direct(inst)
    with pytest.raises(InvalidInputError):
        synthlab.tvd_gap_direct(inst)


def test_normalization_is_checked_on_construction():
    with pytest.raises(InvalidInputError):
        _worked_instance(alpha_erm=0.8)


def test_verify_theorem():
    report = synthlab.verify_theorem(1000, seed=7)
    assert report.trials == 1000
    assert report.max_abs_deviation < 1e-10
    assert report.min_gap > 0.0
    assert report == synthlab.verify_theorem(1000, seed=7)
    with pytest.raises(InvalidInputError):
        synthlab.verify_theorem(0)


def test_violation_carries_the_instance(monkeypatch):
    monkeypatch.setattr(synthlab, "tvd_gap_formula", lambda inst: 1.0)
    with pytest.raises(TheoremViolationError) as err:
        synthlab.verify_theorem(3, seed=0)
    record = err.value.to_record()
    assert record["error"] == "theorem-violation"
    assert set(record["counterexample"]) >= {"alpha_erm", "beta_erm", "b"}


def test_generated_labels_follow_core_sign(small_synthetic):
    ds = small_synthetic
    y = 2 * ds.class_labels - 1
    assert np.all(np.sign(ds.features[:, 0]) == y)
    opposing = y * ds.features[:, 1] < 0
    np.testing.assert_array_equal(opposing, ds.spurious_labels == 1)


def test_minority_rate_concentrates():
    ds = synthlab.generate_synthetic(SyntheticSpec(n=10_000, minority_rate=0.05, seed=3))
    rate = ds.spurious_labels.mean()
    assert abs(rate - 0.05) < 4 * np.sqrt(0.05 * 0.95 / 10_000)
    assert ds.d == 12


def test_noise_free_spec_has_four_points():
    spec = SyntheticSpec(n=500, d=4, minority_rate=0.2, core_noise=0.0, junk_scale=0.0, seed=2)
    ds = synthlab.generate_synthetic(spec)
    assert len({tuple(row) for row in ds.features}) == 4


def test_half_minority_balances_spurious_values():
    ds = synthlab.generate_synthetic(SyntheticSpec(n=10_000, minority_rate=0.5, seed=4))
    counts = np.bincount(ds.group_ids, minlength=4)
    # within each class the two spurious values are equally likely
    for cls in (0, 1):
        total = counts[2 * cls] + counts[2 * cls + 1]
        assert abs(counts[2 * cls] - total / 2) < 4 * np.sqrt(total / 4)


def test_generation_is_seeded():
    spec = SyntheticSpec(n=100, seed=5)
    np.testing.assert_array_equal(
        synthlab.generate_synthetic(spec).features, synthlab.generate_synthetic(spec).features
    )


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        SyntheticSpec(d=2)
    with pytest.raises(InvalidInputError):
        SyntheticSpec(minority_rate=0.0)
