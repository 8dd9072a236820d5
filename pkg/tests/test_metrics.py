import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_u, confusion_counts, pairwise_auroc, step_sum_ap
from pepscreen import metrics
from pepscreen.metrics import MetricInputError, ScoreRow, ScoreTable


def labels_with_both(draw_n, rng):
    while True:
        y = rng.integers(0, 2, draw_n)
        if 0 < y.sum() < draw_n:
            return y


# ---------------------------------------------------------------- binary metrics

def test_perfect_predictions():
    m = metrics.binary_metrics([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert all(m[k] == 1.0 for k in ("precision", "recall", "accuracy", "f1", "mcc"))


def test_all_positive_predictor():
    m = metrics.binary_metrics([0.9] * 4, [1, 0, 1, 0])
    assert (m["accuracy"], m["recall"], m["precision"], m["mcc"]) == (0.5, 1.0, 0.5, 0.0)


def test_confusion_example():
    m = metrics.binary_metrics([.9, .8, .4, .3], [1, 0, 1, 0])
    assert (m["tp"], m["fp"], m["tn"], m["fn"]) == (1, 1, 1, 1)
    assert m["precision"] == m["recall"] == m["accuracy"] == m["f1"] == 0.5 and m["mcc"] == 0


def test_binary_metrics_match_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        s = np.round(rng.random(n), 2)
        y = rng.integers(0, 2, n)
        t = float(rng.choice([0.3, 0.5, 0.71]))
        m = metrics.binary_metrics(s, y, t)
        assert (m["tp"], m["fp"], m["tn"], m["fn"]) == confusion_counts(s, y, t)


def test_binary_metrics_errors():
    with pytest.raises(MetricInputError):
        metrics.binary_metrics([], [])
    with pytest.raises(MetricInputError):
        metrics.binary_metrics([0.1], [2])
    with pytest.raises(MetricInputError):
        metrics.binary_metrics([0.1, 0.2], [1])


# ---------------------------------------------------------------- ranking

def test_auroc_examples():
    assert metrics.auroc([.9, .8, .2, .1], [1, 1, 0, 0]) == 1.0
    assert metrics.auroc([.1, .2, .8, .9], [1, 1, 0, 0]) == 0.0
    assert metrics.auroc([.8, .6, .6, .2], [1, 0, 1, 0]) == 0.875
    with pytest.raises(MetricInputError):
        metrics.auroc([.1, .2], [1, 1])


def test_aupr_examples():
    assert metrics.aupr([.9, .8, .2], [1, 1, 0]) == 1.0
    assert abs(metrics.aupr([.9, .7, .5], [1, 0, 1]) - (0.5 + (2 / 3) * 0.5)) < 1e-15
    with pytest.raises(MetricInputError):
        metrics.aupr([.1, .2], [0, 0])


def test_ranking_metrics_match_oracles_on_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(2, 51))
        y = labels_with_both(n, rng)
        s = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding forces ties
        assert abs(metrics.auroc(s, y) - pairwise_auroc(s, y)) < 1e-12
        assert abs(metrics.aupr(s, y) - step_sum_ap(s, y)) < 1e-12


def test_aupr_random_scores_approach_prevalence():
    rng = np.random.default_rng(2)
    y = (rng.random(10_000) < 0.3).astype(int)
    assert abs(metrics.aupr(rng.random(10_000), y) - y.mean()) < 0.05


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=30), st.randoms())
def test_ranking_metrics_permutation_invariant(rows, rnd):
    s = [r[0] / 5 for r in rows]
    y = [r[1] for r in rows]
    if 0 < sum(y) < len(y):
        idx = list(range(len(s)))
        rnd.shuffle(idx)
        s2, y2 = [s[i] for i in idx], [y[i] for i in idx]
        assert metrics.auroc(s, y) == metrics.auroc(s2, y2)
        assert abs(metrics.aupr(s, y) - metrics.aupr(s2, y2)) < 1e-15


# ---------------------------------------------------------------- rank statistics

def test_mann_whitney_examples():
    assert metrics.mann_whitney([3, 4], [1, 2]).u == 4
    x = [1, 2, 2, 5, 7]
    r = metrics.mann_whitney(x, list(reversed(x)))
    assert r.u == len(x) ** 2 / 2 and r.p_value == pytest.approx(1.0)


def test_mann_whitney_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(300):
        n1, n2 = int(rng.integers(1, 201)), int(rng.integers(1, 201))
        x = rng.integers(0, 30, n1).astype(float)
        y = rng.integers(0, 30, n2).astype(float)
        assert metrics.mann_whitney(x, y).u == brute_u(x, y)


def test_mann_whitney_pvalue_against_scipy():
    from scipy import stats
    rng = np.random.default_rng(4)
    x = rng.integers(0, 10, 40)
    y = rng.integers(2, 12, 35)
    ours = metrics.mann_whitney(x, y)
    ref = stats.mannwhitneyu(x, y, alternative="two-sided", method="asymptotic", use_continuity=False)
    assert ours.u == ref.statistic
    assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_mann_whitney_underflow_reported():
    x = np.arange(5000) + 10_000.0
    y = np.arange(5000, dtype=float)
    r = metrics.mann_whitney(x, y)
    assert r.u == 5000 * 5000
    assert r.underflow and r.p_value == 0.0 and r.log10_p < -300
    assert r.report().startswith("U=25000000.0, p < 1e-")


def test_cliffs_delta_examples():
    d = metrics.cliffs_delta([5, 6], [1, 2])
    assert (d.delta, d.common_language) == (1.0, 1.0)
    d = metrics.cliffs_delta([1, 3], [2])
    assert (d.delta, d.common_language, d.wins, d.losses) == (0.0, 0.5, 1, 1)


def test_cliffs_delta_cl_identity_without_ties():
    rng = np.random.default_rng(5)
    for _ in range(50):
        x, y = rng.random(int(rng.integers(1, 30))), rng.random(int(rng.integers(1, 30)))
        d = metrics.cliffs_delta(x, y)
        assert d.ties == 0
        assert abs(d.common_language - (d.delta + 1) / 2) < 1e-12
        assert d.wins + 0.5 * d.ties == metrics.mann_whitney(x, y).u


def test_effect_from_reported_u():
    delta, cl = metrics.effect_from_u(8_890_301, 1000, 10_000)
    assert abs(delta - 0.778) <= 0.001 and abs(cl - 0.889) <= 0.001
    assert abs(cl - (delta + 1) / 2) < 1e-15


# ---------------------------------------------------------------- composition / lengths

def test_composition_identity_and_onehot():
    seqs = ["ACDK", "WWYA"]
    c = metrics.composition_stats(seqs, seqs)
    assert c.tv_distance == 0.0
    assert np.all(np.diag(c.confusion)[c.generated_freq > 0] == 1.0)
    one = metrics.composition_stats(["AAAA"], ["CCCC"])
    assert one.generated_freq[0] == 1.0 and one.generated_freq.sum() == 1.0
    assert one.tv_distance == 1.0


def test_composition_matches_counting_oracle():
    rng = np.random.default_rng(6)
    aa = "ACDEFGHIKLMNPQRSTVWY"
    seqs = ["".join(aa[i] for i in rng.integers(0, 20, int(rng.integers(1, 30)))) for _ in range(1000)]
    counts = {a: 0 for a in aa}
    for s in seqs:
        for ch in s:
            counts[ch] += 1
    total = sum(counts.values())
    freq = metrics.aa_frequencies(seqs)
    assert np.array_equal(freq, np.array([counts[a] for a in aa]) / total)


def test_composition_skips_unequal_lengths():
    c = metrics.composition_stats(["ACD", "KK"], ["ACE", "KKK"])
    assert c.confusion_pairs == 1 and c.skipped_pairs == 1
    assert np.allclose(c.confusion.sum(1)[c.confusion.sum(1) > 0], 1.0)
    with pytest.raises(MetricInputError):
        metrics.composition_stats([], ["A"])


def test_length_deviation():
    r = metrics.length_deviation([24], [21])
    assert r.deltas.tolist() == [3]
    same = metrics.length_deviation([5, 6, 7], [5, 6, 7])
    assert same.mode == 0 and set(same.deltas) == {0}
    r = metrics.length_deviation([10, 10, 11, 12, 15, 7], [10] * 6)
    assert r.fraction_0_to_5 == 5 / 6
    assert r.histogram == {-3: 1, -2: 0, -1: 0, 0: 2, 1: 1, 2: 1, 3: 0, 4: 0, 5: 1}
    with pytest.raises(MetricInputError):
        metrics.length_deviation([1, 2], [1])


def test_length_histogram_csv(tmp_path):
    r = metrics.length_deviation([3, 4], [3, 3])
    r.write_histogram(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "bin,count\n0,1\n1,1\n"


# ---------------------------------------------------------------- hit rate

def fixture_table(hits, total, evaluator="iptm"):
    rows = [ScoreRow(f"r{i}", 0.8 if i < hits else 0.5, 0.6, evaluator) for i in range(total)]
    return ScoreTable(rows)


@pytest.mark.parametrize("hits,expected", [(93, 45.81), (82, 40.39), (55, 27.09), (109, 53.69),
                                           (88, 43.35), (73, 35.96), (60, 29.56)])
def test_hit_rate_fixtures(hits, expected):
    hr = metrics.hit_rate(fixture_table(hits, 203))
    assert round(hr.percent, 2) == expected
    assert (hr.hits, hr.total) == (hits, 203)


def test_hit_rate_strict_and_swap_bound():
    t = ScoreTable([ScoreRow("a", 0.5, 0.5, "x"), ScoreRow("b", 0.7, 0.5, "x"), ScoreRow("c", 0.1, 0.5, "x")])
    assert metrics.hit_rate(t).hits == 1
    assert metrics.hit_rate(t).percent + metrics.hit_rate(t.swapped()).percent < 100
    no_ties = ScoreTable([ScoreRow("b", 0.7, 0.5, "x"), ScoreRow("c", 0.1, 0.5, "x")])
    assert metrics.hit_rate(no_ties).percent + metrics.hit_rate(no_ties.swapped()).percent == 100
    with pytest.raises(MetricInputError):
        metrics.hit_rate(ScoreTable())


def test_score_table_csv_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    t = ScoreTable([ScoreRow(f"p{i}", float(rng.random()), float(rng.random()), "af3" if i % 2 else "chai")
                    for i in range(20)])
    t.write_csv(tmp_path / "s.csv")
    back = ScoreTable.read_csv(tmp_path / "s.csv")
    assert back.rows == t.rows
    back.write_csv(tmp_path / "s2.csv")
    assert (tmp_path / "s.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()
    assert set(back.by_evaluator()) == {"af3", "chai"}


def test_score_table_validation(tmp_path):
    with pytest.raises(MetricInputError):
        ScoreRow("x", math.nan, 0.1, "e")
    with pytest.raises(MetricInputError):
        ScoreRow("x", 0.1, 0.1, "")
    (tmp_path / "bad.csv").write_text("pair_id,generated_score,native_score,evaluator\nx,oops,0.1,e\n")
    with pytest.raises(MetricInputError, match=":2"):
        ScoreTable.read_csv(tmp_path / "bad.csv")
    (tmp_path / "hdr.csv").write_text("a,b\n")
    with pytest.raises(MetricInputError, match="header"):
        ScoreTable.read_csv(tmp_path / "hdr.csv")


# ---------------------------------------------------------------- attribution

def test_gini_examples():
    assert metrics.gini([1, 1, 1, 1]) == 0.0
    assert metrics.gini([0, 0, 0, 1]) == 0.75
    assert metrics.gini([0, 0, 0]) == 0.0
    with pytest.raises(MetricInputError):
        metrics.gini([-1, 2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=30))
def test_gini_bounds_and_order_invariance(xs):
    g = metrics.gini(xs)
    assert -1e-12 <= g <= 1
    assert metrics.gini(list(reversed(xs))) == pytest.approx(g, abs=1e-12)


def test_occlusion_attribution():
    from pepscreen import peppi
    from pepscreen.corpus import PairExample
    from pepscreen.encoder import SyntheticEmbedder
    from pepscreen.sequences import SequenceRecord

    emb = SyntheticEmbedder(8)
    cfg = peppi.PepPIConfig(d_embed=8, d_model=4, heads=2, pep_len=6, prot_len=10, proj_dim=4)
    pairs = [PairExample(SequenceRecord(f"p{i}", s, "peptide"), SequenceRecord(f"t{i}", "MKTAYIAKQR"), 1)
             for i, s in enumerate(["ACDK", "WWYL", "KRHE"])]
    model = peppi.PepPIModel(cfg, peppi.ABLATION_SERIES["full"])
    rng = np.random.default_rng(8)
    for p in model.parameters():
        p.values[...] = rng.standard_normal(p.shape) * 0.5
    rep = metrics.occlusion_attribution(model, pairs, emb)
    assert rep.method == "occlusion attribution"
    assert set(rep.group_mass) == set(metrics.FUSION_SLOTS)
    assert all(v >= 0 for v in rep.group_mass.values())
    assert all(0 <= g <= 1 for g in rep.group_gini.values())
    assert rep.per_dimension.shape == (16,)
    # with the gate off the local branch never reaches the output
    off = peppi.PepPIModel(cfg, peppi.ABLATION_SERIES["model4"])
    off.load_state_dict(model.state_dict())
    rep_off = metrics.occlusion_attribution(off, pairs, emb)
    assert rep_off.group_mass["pep_local"] == 0.0 and rep_off.group_mass["prot_local"] == 0.0
    assert rep_off.group_mass["pep_global"] > 0
    with pytest.raises(MetricInputError, match="partition"):
        metrics.occlusion_attribution(model, pairs, emb, grouping={"a": np.arange(8), "b": np.arange(4, 16)})
