import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vptlab.errors import MetricError
from vptlab.metrics import (
    bleu4,
    distinct_n,
    evaluate_sets,
    meteor_lite,
    oracle_score,
    render_table,
    rouge_l,
    self_bleu,
    wilcoxon_signed_rank,
)


def t(text: str) -> list[str]:
    return text.split()


words = st.lists(st.sampled_from(list("abcdef")), min_size=1, max_size=8)


# BLEU ----------------------------------------------------------------------------------


def test_bleu_identity():
    assert bleu4(t("a b c d e"), [t("a b c d e")]) == pytest.approx(1.0)


def test_bleu_one_substitution_uses_add_one_on_the_empty_order():
    # p = 3/4, 2/3, 1/2 and the unmatched 4-gram order smoothed to 1/2
    assert bleu4(t("a b c d"), [t("a b c e")]) == pytest.approx((1 / 8) ** 0.25)
    assert bleu4(t("a b c d"), [t("a b c e")]) == pytest.approx(0.5946, abs=1e-4)


def test_bleu_disjoint_is_zero():
    assert bleu4(t("a b c d"), [t("e f g h")]) == 0.0


def test_bleu_brevity_penalty_uses_closest_reference():
    hyp = t("a b c d")
    assert bleu4(hyp, [t("a b c d e f")]) == pytest.approx(math.exp(1 - 6 / 4))
    assert bleu4(hyp, [t("a b c d e f"), t("a b c d x")]) == pytest.approx(math.exp(1 - 5 / 4))


def test_bleu_multi_reference_clipping_uses_max_count():
    hyp = t("a a a a")
    single = bleu4(hyp, [t("a b c d")])
    both = bleu4(hyp, [t("a b c d"), t("a a x y")])
    assert both > single


def test_bleu_empty_hypothesis_is_zero():
    assert bleu4([], [t("a b")]) == 0.0


@given(words, st.lists(words, min_size=1, max_size=3))
def test_bleu_bounds(hyp, refs):
    assert 0.0 <= bleu4(hyp, refs) <= 1.0


@settings(max_examples=100)
@given(words, st.integers(1, 8).flatmap(lambda n: st.lists(st.lists(st.sampled_from(list("abcdef")), min_size=n, max_size=n), min_size=1, max_size=3)))
def test_bleu_multi_reference_dominance(hyp, refs):
    # equal reference lengths keep the brevity penalty fixed
    multi = bleu4(hyp, refs)
    for r in refs:
        assert multi >= bleu4(hyp, [r]) - 1e-12


def test_multi_reference_can_lose_through_the_brevity_penalty():
    hyp, short, long = t("a a a a"), t("a"), t("a a b b b")
    assert bleu4(hyp, [short, long]) < bleu4(hyp, [short])


@given(words, words)
def test_self_match_is_maximal(x, y):
    assert bleu4(x, [x]) == pytest.approx(1.0)
    assert rouge_l(x, [x]) == pytest.approx(1.0)
    assert bleu4(x, [x]) >= bleu4(x, [y]) - 1e-12
    assert rouge_l(x, [x]) >= rouge_l(x, [y])
    assert meteor_lite(x, [x]) >= meteor_lite(x, [y]) - 1e-12


# ROUGE-L and METEOR -----------------------------------------------------------------------


def test_rouge_fixtures():
    assert rouge_l(t("a b c"), [t("a b c")]) == 1.0
    assert rouge_l(t("a b c d"), [t("a c b d")]) == pytest.approx(0.75)
    assert rouge_l(t("a b"), [t("c d")]) == 0.0
    assert rouge_l(t("a b c d"), [t("c d"), t("a c b d")]) == pytest.approx(0.75)


def test_meteor_fixtures():
    assert meteor_lite(t("a b c"), [t("a b c")]) == pytest.approx(1 - 0.5 / 27)
    assert meteor_lite(t("a b c"), [t("a b c")]) == pytest.approx(0.98148, abs=1e-5)
    assert meteor_lite(t("a b"), [t("b a")]) == pytest.approx(0.5)
    assert meteor_lite(t("a b"), [t("c d")]) == 0.0


def test_meteor_matches_stems():
    assert meteor_lite(t("returns values"), [t("return value")]) > 0.4


@given(words, st.lists(words, min_size=1, max_size=3))
def test_rouge_and_meteor_bounds(hyp, refs):
    assert 0.0 <= rouge_l(hyp, refs) <= 1.0
    assert 0.0 <= meteor_lite(hyp, refs) <= 1.0


# distinct-n and Self-BLEU -----------------------------------------------------------------


def test_distinct_fixtures():
    assert distinct_n([t("a b"), t("a b")], 1) == 0.5
    assert distinct_n([t("a b"), t("c d")], 1) == 1.0
    assert distinct_n([t("a b c"), t("b c d")], 2) == pytest.approx(0.75)


def test_distinct_average_mode_differs_from_set_mode():
    s = [t("a b"), t("a b")]
    assert distinct_n(s, 1, mode="average") == 1.0
    assert distinct_n(s, 1, mode="set") == 0.5
    with pytest.raises(ValueError):
        distinct_n(s, 1, mode="other")


def test_distinct_errors():
    with pytest.raises(MetricError):
        distinct_n([], 1)
    with pytest.raises(MetricError):
        distinct_n([t("a")], 2)


@given(st.lists(words, min_size=1, max_size=5), st.integers(1, 2), st.data())
def test_appending_a_duplicate_never_raises_distinct(summaries, n, data):
    if not any(len(s) >= n for s in summaries):
        return
    dup = data.draw(st.sampled_from(summaries))
    assert distinct_n(summaries + [dup], n) <= distinct_n(summaries, n) + 1e-12


def test_self_bleu_fixtures():
    assert self_bleu([t("a b c d")] * 3) == pytest.approx(1.0)
    assert self_bleu([t("a b c d"), t("e f g h")]) == 0.0
    # pairs: two exact matches and four one-substitution pairs
    s = [t("a b c d"), t("a b c e"), t("a b c d")]
    assert self_bleu(s) == pytest.approx((2 * 1.0 + 4 * (1 / 8) ** 0.25) / 6)


def test_self_bleu_needs_two():
    with pytest.raises(MetricError):
        self_bleu([t("a b")])


@given(st.lists(words, min_size=2, max_size=5), st.randoms())
def test_self_bleu_is_permutation_invariant(summaries, rnd):
    shuffled = list(summaries)
    rnd.shuffle(shuffled)
    assert self_bleu(shuffled) == pytest.approx(self_bleu(summaries), abs=1e-12)


# oracle ------------------------------------------------------------------------------------


def test_oracle_fixtures():
    ref = [t("a b c d e")]
    assert oracle_score([t("x y"), t("a b c d e")], ref) == pytest.approx(1.0)
    assert oracle_score([t("a b c x")], ref, "rouge_l") == rouge_l(t("a b c x"), ref)
    with pytest.raises(MetricError):
        oracle_score([], ref)


def test_oracle_picks_a_winner_per_metric():
    ref = [t("a b c d e f")]
    c1, c2, c3 = t("a b c d"), t("f e d c b a"), t("a b x d e f")
    # hand values
    assert bleu4(c1, ref) == pytest.approx(math.exp(-0.5))
    assert bleu4(c2, ref) == pytest.approx((1 / 120) ** 0.25)
    assert bleu4(c3, ref) == pytest.approx((5 / 6 * 3 / 5 * 1 / 4 * 1 / 4) ** 0.25)
    assert rouge_l(c1, ref) == pytest.approx(0.8)
    assert rouge_l(c3, ref) == pytest.approx(5 / 6)
    assert meteor_lite(c2, ref) == pytest.approx(0.5)
    assert meteor_lite(c3, ref) == pytest.approx(5 / 6 * (1 - 0.5 * 0.4**3))
    cands = [c1, c2, c3]
    assert oracle_score(cands, ref, "bleu") == bleu4(c1, ref)
    assert oracle_score(cands, ref, "rouge_l") == rouge_l(c3, ref)
    assert oracle_score(cands, ref, "meteor") == meteor_lite(c3, ref)


@given(st.lists(words, min_size=1, max_size=4), words, st.lists(words, min_size=1, max_size=2))
def test_oracle_is_monotone(cands, extra, refs):
    for metric in ("bleu", "rouge_l", "meteor"):
        assert oracle_score(cands + [extra], refs, metric) >= oracle_score(cands, refs, metric)


# reports -------------------------------------------------------------------------------------


def test_report_means_are_arithmetic_means():
    sets = [[t("a b c d"), t("a b c e")], [t("x y z")]]
    refs = [[t("a b c d")], [t("x y w")]]
    rep = evaluate_sets("demo", ["0", "1"], sets, refs)
    assert rep.means["bleu"] == pytest.approx(np.mean(rep.values("bleu")))
    assert rep.per_example[0]["bleu"] == pytest.approx(1.0)
    assert rep.per_example[1]["self_bleu"] is None  # one summary has no pairs
    assert rep.means["self_bleu"] == rep.per_example[0]["self_bleu"]
    for row in rep.per_example:
        for key in ("bleu", "rouge_l", "meteor", "distinct1"):
            assert 0.0 <= row[key] <= 1.0
    assert json.loads(rep.dumps())["name"] == "demo"


def test_report_rejects_misaligned_inputs():
    with pytest.raises(MetricError):
        evaluate_sets("x", ["0"], [], [])


def test_table_layout():
    rep = evaluate_sets("beam", ["0"], [[t("a b"), t("a c")]], [[t("a b")]])
    lines = render_table([rep]).splitlines()
    assert lines[0].split() == ["method", "B", "R", "M", "D-1", "D-2", "S-B"]
    assert lines[2].split()[1] == "100.00"
    assert "distinct-n mode: set" in lines[-1]


# Wilcoxon --------------------------------------------------------------------------------------


def enumerated_p(deltas) -> float:
    """Exact one-sided p by flipping every sign."""
    d = np.asarray([x for x in deltas if x != 0], dtype=float)
    mags = np.abs(d)
    ranks = np.array([np.mean(np.flatnonzero(np.sort(mags) == m)) + 1 for m in mags])
    observed = ranks[d > 0].sum()
    hits = sum(1 for signs in itertools.product((0, 1), repeat=len(d)) if ranks[np.array(signs, bool)].sum() >= observed - 1e-9)
    return hits / 2 ** len(d)


def test_wilcoxon_all_positive():
    res = wilcoxon_signed_rank([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    assert res.p_value == pytest.approx(1 / 64)
    assert res.significant_at and res.method == "exact" and res.statistic == 21.0


def test_wilcoxon_symmetric_pairs():
    d = [1, -1, 2, -2, 3, -3]
    p = wilcoxon_signed_rank(d).p_value
    assert p == pytest.approx(enumerated_p(d))
    assert abs(p - 0.5) < 0.1


def test_wilcoxon_drops_zeros():
    res = wilcoxon_signed_rank([0.0, 0.0, 1.0, 2.0, 3.0, -0.5, 4.0])
    assert res.n_effective == 5


@pytest.mark.parametrize(
    "deltas",
    [
        [0.3, -0.1, 0.7, 0.2, -0.4, 0.9, 0.05, 0.6],
        [1.0, 1.0, -1.0, 2.0, -2.0, 3.0, 0.5, -0.25],  # tied magnitudes
        [-0.3, -0.2, 0.1, -0.5, -0.6, 0.4, -0.8, -0.9],
    ],
)
def test_wilcoxon_matches_sign_enumeration(deltas):
    assert wilcoxon_signed_rank(deltas).p_value == pytest.approx(enumerated_p(deltas), abs=1e-12)


def test_wilcoxon_normal_approximation_is_close_to_exact():
    rng = np.random.default_rng(0)
    d = rng.normal(0.3, 1.0, size=13)
    res = wilcoxon_signed_rank(d)
    assert res.method == "normal"
    assert res.p_value == pytest.approx(enumerated_p(d), abs=0.02)


def test_wilcoxon_errors():
    with pytest.raises(MetricError):
        wilcoxon_signed_rank([0.0] * 6)
    with pytest.raises(MetricError):
        wilcoxon_signed_rank([1.0, 2.0, 3.0, 4.0])
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1.0] * 6, alternative="less")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5).filter(lambda x: abs(x) > 1e-6), min_size=5, max_size=20))
def test_wilcoxon_p_is_a_probability(deltas):
    assert 0.0 <= wilcoxon_signed_rank(deltas).p_value <= 1.0
