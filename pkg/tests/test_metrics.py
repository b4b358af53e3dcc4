import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reperfq.core import PhaseBoundaries
from reperfq.errors import (
    DegenerateInput,
    EmptyInput,
    LengthMismatch,
    OutOfRange,
    ParseError,
    SingleClass,
)
from reperfq.metrics import (
    OUTCOME_COLUMNS,
    average_accuracy,
    boundary_offsets,
    etici_success,
    logistic_loocv,
    mrs_good,
    nihss_shift,
    outcome_metrics,
    read_outcomes,
    roc_auc,
    spearman,
    weighted_f1,
)

from .oracles import confusion_weighted_f1, pairwise_auc, rank_pearson


# --- accuracy and F1 --------------------------------------------------------

def test_perfect_prediction():
    ref = [0, 1, 1, 2, 3, 3]
    assert average_accuracy(ref, ref) == 1.0 and weighted_f1(ref, ref) == 1.0


def test_weighted_f1_hand_example():
    # class 0: P=1, R=2/3 -> F1 0.8; class 1: F1 1.0; class 2 has no support
    assert weighted_f1([0, 0, 2, 1], [0, 0, 0, 1]) == pytest.approx(0.85, abs=1e-15)


def test_weighted_f1_matches_confusion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        ref = rng.integers(0, 4, 200)
        pred = np.where(rng.random(200) < 0.7, ref, rng.integers(0, 4, 200))
        assert abs(weighted_f1(pred, ref) - confusion_weighted_f1(pred, ref, 4)) <= 1e-12


def test_label_input_errors():
    with pytest.raises(LengthMismatch):
        average_accuracy([0, 1], [0])
    with pytest.raises(EmptyInput):
        weighted_f1([], [])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.data())
def test_perfect_scores_only_for_exact_match(ref, data):
    pred = data.draw(st.lists(st.integers(0, 3), min_size=len(ref), max_size=len(ref)))
    exact = pred == ref
    assert (average_accuracy(pred, ref) == 1.0) == exact
    assert (weighted_f1(pred, ref) == 1.0) == exact


# --- boundary offsets -------------------------------------------------------

def test_identical_boundaries():
    b = PhaseBoundaries(2, 4, 7)
    stats = boundary_offsets(b, b)
    for name in ("first_arterial", "last_arterial", "last_parenchymal"):
        entry = getattr(stats, name)
        assert entry.accuracy == 1.0 and entry.mean_frames == 0


def test_one_frame_offset_in_seconds():
    stats = boundary_offsets(PhaseBoundaries(3, 4, 7), PhaseBoundaries(2, 4, 7),
                             times=[0.5 * i for i in range(10)])
    assert stats.first_arterial.mean_frames == 1.0
    assert stats.first_arterial.mean_seconds == 0.5
    assert stats.first_arterial.accuracy == 0.0


def test_absence_mismatch_excluded():
    stats = boundary_offsets([PhaseBoundaries(None, None, 5), PhaseBoundaries(1, 2, 5)],
                             [PhaseBoundaries(2, 3, 5), PhaseBoundaries(3, 2, 5)])
    fa = stats.first_arterial
    assert fa.absence_mismatches == 1 and fa.n_compared == 1
    assert fa.mean_frames == 2.0 and fa.accuracy == 0.0
    assert stats.last_parenchymal.accuracy == 1.0


def test_both_absent_is_a_match():
    stats = boundary_offsets(PhaseBoundaries(None, None, None), PhaseBoundaries(None, None, None))
    assert stats.first_arterial.accuracy == 1.0 and stats.first_arterial.mean_frames is None


# --- Spearman ---------------------------------------------------------------

def test_spearman_extremes():
    x = np.arange(10.0)
    assert spearman(x, x, n_permutations=200).rho == pytest.approx(1.0, abs=1e-15)
    assert spearman(x, -x, n_permutations=200).rho == pytest.approx(-1.0, abs=1e-15)


def test_spearman_matches_rank_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        x = rng.integers(0, 8, 20).astype(float)
        y = x + rng.normal(0, 3, 20).round()
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert abs(spearman(x, y, n_permutations=10).rho - rank_pearson(x, y)) <= 1e-12


def test_spearman_p_value_range_and_seed():
    rng = np.random.default_rng(2)
    x, y = rng.random(15), rng.random(15)
    a = spearman(x, y, n_permutations=500, seed=3)
    b = spearman(x, y, n_permutations=500, seed=3)
    assert a == b
    assert 1 / 501 <= a.p_value <= 1.0
    strong = spearman(np.arange(15.0), np.arange(15.0), n_permutations=500)
    assert strong.p_value == pytest.approx(1 / 501)


def test_spearman_invariant_to_monotone_maps():
    rng = np.random.default_rng(4)
    x, y = rng.random(12), rng.random(12)
    assert spearman(np.exp(x), y ** 3, n_permutations=10).rho == pytest.approx(
        spearman(x, y, n_permutations=10).rho, abs=1e-12)


def test_spearman_errors():
    with pytest.raises(DegenerateInput):
        spearman([1, 2], [1, 2])
    with pytest.raises(DegenerateInput):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(LengthMismatch):
        spearman([1, 2, 3], [1, 2])


# --- AUC --------------------------------------------------------------------

def test_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        scores = rng.integers(0, 10, 50) / 10
        labels = rng.random(50) < 0.4
        if labels.all() or not labels.any():
            continue
        assert abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)) <= 1e-12


def test_auc_invariant_to_monotone_maps():
    rng = np.random.default_rng(6)
    s, l = rng.random(30), rng.random(30) < 0.5
    assert roc_auc(s, l) == roc_auc(np.log(s) * 3 + 1, l)


def test_auc_single_class():
    with pytest.raises(SingleClass):
        roc_auc([0.1, 0.2], [1, 1])


# --- logistic regression ----------------------------------------------------

def test_separable_logistic():
    x = np.r_[np.linspace(0, 1, 10), np.linspace(2, 3, 10)]
    y = np.r_[np.zeros(10), np.ones(10)]
    assert logistic_loocv(x, y).auc == 1.0


def test_uninformative_logistic():
    rng = np.random.default_rng(11)
    res = logistic_loocv(rng.normal(size=60), rng.random(60) < 0.5)
    assert 0.3 <= res.auc <= 0.7


def test_zero_variance_feature_has_unit_odds():
    rng = np.random.default_rng(2)
    x = rng.normal(size=30)
    X = np.c_[x, np.full(30, 4.0)]
    y = (x + rng.normal(0, 1, 30)) > 0
    assert logistic_loocv(X, y).odds_ratios[1] == 1.0


def test_logistic_scale_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=40)
    y = (x + rng.normal(0, 1, 40)) > 0
    a = logistic_loocv(x, y).auc
    b = logistic_loocv(7.5 * x - 3.0, y).auc
    assert abs(a - b) <= 1e-3


def test_logistic_input_checks():
    with pytest.raises(DegenerateInput):
        logistic_loocv(np.arange(5.0), [0, 1, 0, 1, 0])
    with pytest.raises(SingleClass):
        logistic_loocv(np.arange(12.0), np.ones(12))


# --- clinical scales --------------------------------------------------------

@pytest.mark.parametrize("bl, fu, shift", [(10, 4, 6), (5, 5, 0), (0, 42, -42)])
def test_nihss_shift(bl, fu, shift):
    assert nihss_shift(bl, fu) == shift


def test_nihss_range():
    with pytest.raises(OutOfRange):
        nihss_shift(43, 0)


def test_dichotomies():
    assert [etici_success(g) for g in ("0", "1", "2A", "2B", "2C", "3")] == [False] * 3 + [True] * 3
    assert [mrs_good(m) for m in range(7)] == [True] * 3 + [False] * 4
    with pytest.raises(OutOfRange):
        etici_success("4")


# --- outcome files ----------------------------------------------------------

def _write_outcomes(path, n=24, seed=0):
    rng = np.random.default_rng(seed)
    grades = ["0", "1", "2A", "2B", "2C", "3"]
    lines = [",".join(OUTCOME_COLUMNS)]
    for i in range(n):
        g = i % 6
        score = min(1.0, max(0.0, g / 5 + rng.normal(0, 0.15)))
        mrs = int(np.clip(5 - g + rng.integers(-1, 2), 0, 6))
        lat = "" if i % 5 == 0 else f"{score:.3f}"
        lines.append(f"{score:.3f},{lat},{grades[g]},{mrs},{int(rng.integers(5, 25))},{int(rng.integers(0, 10))}")
    path.write_text("\n".join(lines) + "\n")
    return path


def test_outcomes_round_trip(tmp_path):
    records = read_outcomes(_write_outcomes(tmp_path / "o.csv"))
    assert len(records) == 24 and records[0].auto_tici_lat is None
    out = outcome_metrics(records, n_permutations=200)
    assert out["n"] == 24
    assert out["auc_etici_success"] > 0.8
    assert out["spearman_etici"]["rho"] > 0.5


def test_outcomes_bad_header(tmp_path):
    (tmp_path / "o.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ParseError):
        read_outcomes(tmp_path / "o.csv")
