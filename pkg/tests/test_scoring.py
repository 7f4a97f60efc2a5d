import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcgnet.errors import ScoreError, TallyError
from pcgnet.pcg_io import DatasetManifest, Label, ManifestEntry, Quality
from pcgnet.scoring import (
    CELLS, ChallengeCounts, QualityWeights, ScoreReport, challenge_score, format_report, read_predictions,
    score_predictions, tally, truncate4, write_predictions,
)

A, N = Label.ABNORMAL, Label.NORMAL
G, P = Quality.GOOD, Quality.POOR


@pytest.mark.parametrize("se,sp,shown", [(0.7278, 0.9521, "0.8399"), (0.6545, 0.7569, "0.7057")])
def test_overall_display_reference_rows(se, sp, shown):
    assert truncate4(ScoreReport(se, sp).overall) == shown


def test_truncation_not_rounding():
    assert truncate4(0.12349) == "0.1234"
    assert truncate4(0.99999) == "0.9999"
    assert truncate4(1.0) == "1.0000"


def test_quality_weights():
    items = [(A, G, "a"), (A, G, "a"), (A, G, "n"), (A, P, "a")]
    _, w = tally(items)
    assert w.wa1 == 0.75 and w.wa2 == 0.25
    assert w.wn1 == 0 and w.wn2 == 0


def test_unsure_counts_by_quality():
    items = [(A, G, "q"), (A, P, "q"), (N, G, "q"), (N, P, "q")]
    counts, w = tally(items)
    assert counts.Aq1 == counts.Aq2 == counts.Nq1 == counts.Nq2 == 1
    rep = challenge_score(counts, w)
    # unsure is wrong on good-quality signals and right on poor ones
    assert rep.se == pytest.approx(0.5) and rep.sp == pytest.approx(0.5)


def test_perfect_and_inverted():
    items = [(A, G, "a"), (A, P, "a"), (N, G, "n"), (N, P, "n")]
    assert challenge_score(*tally(items)).overall == 1.0
    inverted = [(A, G, "n"), (A, P, "n"), (N, G, "a"), (N, P, "a")]
    assert challenge_score(*tally(inverted)).overall == 0.0


def test_tally_rejects_unknowns():
    with pytest.raises(TallyError):
        tally([(Label.UNKNOWN, G, "a")])
    with pytest.raises(TallyError):
        tally([(A, Quality.UNKNOWN, "a")])
    with pytest.raises(TallyError):
        tally([(A, G, "x")])


def test_zero_denominator_with_weight_is_error():
    with pytest.raises(ScoreError):
        challenge_score(ChallengeCounts(Nn1=1), QualityWeights(1.0, 0.0, 1.0, 0.0))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([A, N]), st.sampled_from([G, P]), st.sampled_from("anq")),
                min_size=1, max_size=60))
def test_scores_bounded_and_weights_sum(items):
    counts, w = tally(items)
    rep = challenge_score(counts, w)
    assert 0.0 <= rep.se <= 1.0 + 1e-12
    assert 0.0 <= rep.sp <= 1.0 + 1e-12
    assert rep.overall == pytest.approx((rep.se + rep.sp) / 2)
    if counts.abnormal_total:
        assert w.wa1 + w.wa2 == pytest.approx(1.0)
    if counts.normal_total:
        assert w.wn1 + w.wn2 == pytest.approx(1.0)
    assert sum(getattr(counts, c) for c in CELLS) == len(items)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([A, N]), st.sampled_from([G, P])), min_size=1, max_size=40))
def test_correct_predictions_score_one(items):
    preds = [(t, q, "a" if t is A else "n") for t, q in items]
    rep = challenge_score(*tally(preds))
    has_a = any(t is A for t, _ in items)
    has_n = any(t is N for t, _ in items)
    assert rep.se == pytest.approx(1.0 if has_a else 0.0)
    assert rep.sp == pytest.approx(1.0 if has_n else 0.0)


def test_format_report():
    assert format_report(ScoreReport(0.7278, 0.9521)) == "Se 0.7278 Sp 0.9521 Overall 0.8399"


def _manifest():
    return DatasetManifest([
        ManifestEntry("r1", "r1.wav", A, G, "s1"),
        ManifestEntry("r2", "r2.wav", N, G, "s2"),
        ManifestEntry("r3", "r3.wav", N, P, "s3"),
    ])


def test_predictions_file_round_trip_and_scoring(tmp_path):
    path = tmp_path / "pred.csv"
    write_predictions(path, {"r1": "a", "r2": "a", "r3": "n"})
    assert path.read_text() == "record_id,predicted\nr1,a\nr2,a\nr3,n\n"
    preds = read_predictions(path)
    counts, weights, rep = score_predictions(preds, _manifest())
    assert counts.Aa1 == 1 and counts.Na1 == 1 and counts.Nn2 == 1
    assert rep.se == 1.0 and rep.sp == pytest.approx(0.5)


def test_predictions_must_cover_manifest(tmp_path):
    with pytest.raises(TallyError):
        score_predictions({"r1": "a"}, _manifest())
    with pytest.raises(TallyError):
        score_predictions({"r1": "a", "r2": "n", "r3": "n", "zz": "n"}, _manifest())
    bad = tmp_path / "bad.csv"
    bad.write_text("id,pred\nr1,a\n")
    with pytest.raises(TallyError):
        read_predictions(bad)


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        ChallengeCounts(Aa1=-1)


def test_score_symmetry_under_label_swap():
    rng = np.random.default_rng(0)
    for _ in range(50):
        items = [([A, N][rng.integers(2)], [G, P][rng.integers(2)], "an"[rng.integers(2)]) for _ in range(20)]
        swap = {A: N, N: A}
        flipped = [(swap[t], q, "n" if p == "a" else "a") for t, q, p in items]
        c1, w1 = tally(items)
        c2, w2 = tally(flipped)
        if not (c1.abnormal_total and c1.normal_total):
            continue
        r1, r2 = challenge_score(c1, w1), challenge_score(c2, w2)
        assert r1.se == pytest.approx(r2.sp) and r1.sp == pytest.approx(r2.se)
