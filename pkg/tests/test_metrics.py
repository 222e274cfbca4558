import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrsl.metrics import (
    CategoryRates,
    binary_report,
    category_rates,
    confusion_table,
    format_binary_report,
    format_ordinal_report,
    ordinal_report,
    roc_auc,
    roc_auc_by_group,
    roc_curve,
    sensitivity_at_specificity,
)


def brute_force_auc(scores, labels):
    # O(n^2) pairwise concordance count; the oracle the fast path must match.
    scores = np.asarray(scores, float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    num = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                num += 1.0
            elif p == q:
                num += 0.5
    return num / (len(pos) * len(neg))


# ----------------------------------------------------------------- roc_auc


def test_auc_worked_examples():
    assert roc_auc([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3, 0.3, 0.3, 0.3], [0, 1, 0, 1]) == 0.5
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_rejects_single_class():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1, np.nan], [0, 1])


@st.composite
def binary_instance(draw, max_n=60):
    n = draw(st.integers(2, max_n))
    seed = draw(st.integers(0, 2**32 - 1))
    g = np.random.default_rng(seed)
    # coarse value grid so ties happen often
    scores = g.integers(0, 6, size=n) / 5.0 + g.normal(0, 1e-3) * g.integers(0, 2, n)
    labels = g.integers(0, 2, size=n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    return scores, labels


@given(binary_instance())
def test_auc_matches_brute_force_exactly(inst):
    scores, labels = inst
    assert roc_auc(scores, labels) == brute_force_auc(scores, labels)


@given(binary_instance())
def test_auc_monotone_transform_invariant(inst):
    scores, labels = inst
    assert roc_auc(np.exp(2.0 * scores) + 1.0, labels) == roc_auc(scores, labels)


@given(binary_instance())
def test_auc_negation_symmetry(inst):
    scores, labels = inst
    assert roc_auc(scores, labels) + roc_auc(-scores, labels) == 1.0


def test_auc_by_group_handles_single_class_groups():
    scores = [0.1, 0.9, 0.2, 0.4]
    labels = [0, 1, 0, 0]
    groups = ["a", "a", "b", "b"]
    out = roc_auc_by_group(scores, labels, groups)
    assert out["a"] == 1.0 and out["b"] is None


# --------------------------------------------------------------- roc curve


def test_roc_curve_vertices_hand_case():
    c = roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    np.testing.assert_array_equal(c.fpr, [0.0, 0.0, 0.5, 0.5, 1.0])
    np.testing.assert_array_equal(c.sensitivity, [0.0, 0.5, 0.5, 1.0, 1.0])
    np.testing.assert_array_equal(c.thresholds, [np.inf, 0.8, 0.4, 0.35, 0.1])
    assert c.auc == 0.75


@given(binary_instance())
def test_roc_curve_trapezoid_equals_rank_auc(inst):
    scores, labels = inst
    c = roc_curve(scores, labels)
    assert c.fpr[0] == 0.0 and c.sensitivity[0] == 0.0
    assert c.fpr[-1] == 1.0 and c.sensitivity[-1] == 1.0
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.sensitivity) >= 0)
    trap = np.trapezoid(c.sensitivity, c.fpr)
    np.testing.assert_allclose(trap, c.auc, rtol=0, atol=1e-12)


def test_sensitivity_at_specificity_hand_cases():
    # perfect classifier
    assert sensitivity_at_specificity([0, 0, 1, 1], [0, 0, 1, 1], 0.8) == 1.0
    # chance diagonal
    s = sensitivity_at_specificity([0.3] * 6, [0, 1, 0, 1, 0, 1], 0.8)
    assert np.isclose(s, 0.2)
    # staircase with a vertical segment at the target
    s = sensitivity_at_specificity([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], 0.8)
    assert s == 0.5
    # vertical stack exactly at x*: the top vertex wins
    s = sensitivity_at_specificity([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], 0.5)
    assert s == 1.0


def test_sensitivity_step_rule():
    s = sensitivity_at_specificity([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], 0.8,
                                   method="step")
    assert s == 0.5  # most liberal threshold with specificity >= 0.8
    with pytest.raises(ValueError):
        sensitivity_at_specificity([0.1, 0.8], [0, 1], 0.8, method="nope")
    with pytest.raises(ValueError):
        sensitivity_at_specificity([0.1, 0.8], [0, 1], 1.0)


@given(binary_instance(), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_sensitivity_nonincreasing_in_target(inst, t1, t2):
    scores, labels = inst
    lo, hi = sorted((t1, t2))
    s_lo = sensitivity_at_specificity(scores, labels, lo)
    s_hi = sensitivity_at_specificity(scores, labels, hi)
    assert s_hi <= s_lo + 1e-12


# ------------------------------------------------------- confusion / rates


def test_confusion_table_hand_tally():
    t = confusion_table([1, 2, 2, 3, 1, 3], [1, 2, 3, 3, 2, 3], Z=3)
    np.testing.assert_array_equal(t.counts, [[1, 0, 0], [1, 1, 0], [0, 1, 2]])
    assert t.total == 6


def test_confusion_table_validation():
    with pytest.raises(ValueError):
        confusion_table([], [], Z=3)
    with pytest.raises(ValueError):
        confusion_table([0], [1], Z=3)
    with pytest.raises(ValueError):
        confusion_table([1], [4], Z=3)


def test_confusion_diagonal_when_perfect():
    true = [1, 2, 3, 2, 1]
    t = confusion_table(true, true, Z=3)
    assert np.all(t.counts == np.diag(np.diag(t.counts)))
    r = category_rates(t)
    assert r.fpr == (0.0, 0.0, 0.0) and r.fdr == (0.0, 0.0, 0.0)
    assert r.overall_error == 0.0


def test_category_rates_published_block():
    # three-category block with a never-predicted middle category
    counts = np.array([[60217, 0, 9822], [17083, 0, 10932], [20475, 0, 21548]])
    r = category_rates(confusion_table_from_counts(counts))
    assert [round(v, 2) for v in r.fpr] == [0.14, 1.00, 0.49]
    assert r.fdr[1] is None
    assert round(r.fdr[0], 2) == 0.38 and round(r.fdr[2], 2) == 0.49
    assert round(r.overall_error, 2) == 0.42


def confusion_table_from_counts(counts):
    from mrsl.metrics import ConfusionTable

    counts = np.asarray(counts, dtype=np.int64)
    return ConfusionTable(counts=counts, Z=counts.shape[0])


def test_category_rates_two_by_two():
    r = category_rates(confusion_table_from_counts([[8, 2], [1, 9]]))
    assert r.fpr == (0.2, 0.1)
    np.testing.assert_allclose(r.fdr, (1 / 9, 2 / 11))
    np.testing.assert_allclose(r.overall_error, 0.15)


@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.integers(1, 120))
def test_overall_error_is_prevalence_weighted_fpr(seed, Z, n):
    g = np.random.default_rng(seed)
    true = g.integers(1, Z + 1, size=n)
    pred = g.integers(1, Z + 1, size=n)
    t = confusion_table(pred, true, Z)
    r = category_rates(t)
    total = t.total
    acc = sum(
        (t.counts[z].sum() / total) * r.fpr[z]
        for z in range(Z)
        if r.fpr[z] is not None
    )
    np.testing.assert_allclose(r.overall_error, acc, rtol=0, atol=1e-12)
    assert all(v is None or 0.0 <= v <= 1.0 for v in r.fpr + r.fdr)


# ------------------------------------------------------------------ reports


def test_reports_render():
    rep = binary_report([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1],
                        groups=["a", "a", "b", "b"])
    assert rep["auc"] == 0.75 and rep["s80"] == 0.5
    assert set(rep["auc_by_subject"]) == {"a", "b"}
    assert "AUC: 0.750" in format_binary_report(rep)

    orep = ordinal_report([1, 2, 2, 3, 1, 3], [1, 2, 3, 3, 2, 3], Z=3)
    text = format_ordinal_report(orep)
    assert "overall error" in text and "FDR" in text
    orep2 = ordinal_report([1, 1, 1], [1, 2, 3], Z=3)
    assert "NA" in format_ordinal_report(orep2)
