import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vptlab.corpus import BOS, EOS, Vocabulary
from vptlab.decode import (
    BackboneDecoder,
    Candidate,
    CandidateSet,
    DecodeConfig,
    TableModel,
    beam_search,
    dedupe,
    diverse_beam_search,
    generate_vpt_candidates,
    greedy,
    load_candidate_sets,
    log_softmax,
    rescore,
    sample,
    save_candidate_sets,
    sequence_logprob,
    stochastic_beam_search,
)
from vptlab.errors import DataError, ShapeError

# hand table: 0 = BOS, 1 = EOS, 2 = a, 3 = b
_HAND = {
    (): [0.0, 0.0, 0.6, 0.4],
    (2,): [0.0, 0.3, 0.3, 0.4],
    (3,): [0.0, 0.9, 0.05, 0.05],
}


def _hand_model():
    def table(prefix):
        probs = _HAND.get(prefix, [0.0, 1.0, 0.0, 0.0])
        with np.errstate(divide="ignore"):
            return np.log(np.array(probs))

    return TableModel(4, table, eos=1)


def _one_step_model(logits):
    return TableModel(len(logits), lambda prefix: np.array(logits, dtype=float), eos=1)


def _exhaustive(model, max_len):
    """Every sequence the decoders may return: EOS-terminated ones up to ``max_len`` tokens and unfinished ones of exactly ``max_len``."""
    body = [t for t in range(model.vocab_size) if t != model.eos]
    seqs = []
    for n in range(1, max_len + 1):
        for mid in itertools.product(body, repeat=n - 1):
            seqs.append((model.bos, *mid, model.eos))
        if n == max_len:
            seqs.extend((model.bos, *mid) for mid in itertools.product(body, repeat=n))
    scored = [(sequence_logprob(model, [], s), s) for s in seqs]
    return sorted((x for x in scored if math.isfinite(x[0])), key=lambda x: (-x[0], len(x[1]), x[1]))


# config and candidate -----------------------------------------------------------------------


def test_decode_config_validation():
    for bad in ({"beam_width": 0}, {"beam_width": 10, "dbs_groups": 3}, {"temperature": 0.0}, {"dbs_lambda": -1.0}, {"max_steps": 0}):
        with pytest.raises(ValueError):
            DecodeConfig(**bad)


def test_candidate_scores():
    c = Candidate((0, 5, 6, 1), (-0.5, -1.0, -0.25), eos=1)
    assert c.total_logprob == pytest.approx(-1.75)
    assert c.length == 2 and c.content == (5, 6) and c.finished
    assert c.normalized_score == pytest.approx(-0.875)
    with pytest.raises(ShapeError):
        Candidate((0, 5), (-0.5, -1.0), eos=1)


# greedy and sampling -----------------------------------------------------------------------


def test_greedy_hand_walk():
    c = greedy(_hand_model(), [], max_steps=5)
    assert c.tokens == (0, 2, 3, 1)
    assert c.total_logprob == pytest.approx(math.log(0.6 * 0.4))


def test_greedy_is_deterministic():
    model = TableModel.random(6, eos=1, seed=4)
    assert greedy(model, [], max_steps=6) == greedy(model, [], max_steps=6)


def test_sampling_probabilities():
    np.testing.assert_allclose(np.exp(log_softmax(np.array([0.0, math.log(3)]))), [0.25, 0.75], atol=1e-12)
    flat = np.exp(log_softmax(np.array([0.0, math.log(3)]), temperature=2.0))
    np.testing.assert_allclose(flat, [1 / (1 + math.sqrt(3)), math.sqrt(3) / (1 + math.sqrt(3))], atol=1e-12)
    assert flat == pytest.approx([0.366, 0.634], abs=1e-3)


@pytest.mark.parametrize("temperature,expected", [(1.0, 0.75), (2.0, math.sqrt(3) / (1 + math.sqrt(3)))])
def test_sampling_frequencies(temperature, expected):
    model = _one_step_model([-1e9, 0.0, math.log(3)])  # tokens: BOS, EOS, x
    draws = sample(model, [], temperature, np.random.default_rng(0), n=100_000, max_steps=1, min_length=0)
    freq = sum(c.tokens[1] == 2 for c in draws) / len(draws)
    assert abs(freq - expected) < 0.01


def test_sampling_records_untempered_logprobs():
    model = _one_step_model([-1e9, 0.0, math.log(3)])
    c = sample(model, [], 2.0, np.random.default_rng(1), n=1, max_steps=1, min_length=0)[0]
    assert c.logprobs[0] in (pytest.approx(math.log(0.25)), pytest.approx(math.log(0.75)))


@pytest.mark.parametrize("seed", range(5))
def test_sampling_at_low_temperature_is_greedy(seed):
    model = TableModel.random(6, eos=1, seed=seed)
    g = greedy(model, [], max_steps=6)
    for c in sample(model, [], 1e-6, np.random.default_rng(seed), n=4, max_steps=6):
        assert c.tokens == g.tokens


def test_sampling_is_reproducible():
    model = TableModel.random(6, eos=1, seed=9)
    a = sample(model, [], 1.0, np.random.default_rng(5), n=20, max_steps=6)
    b = sample(model, [], 1.0, np.random.default_rng(5), n=20, max_steps=6)
    assert a == b
    with pytest.raises(ValueError):
        sample(model, [], 0.0, np.random.default_rng(5), n=1)


# beam search -------------------------------------------------------------------------------


def test_beam_hand_enumeration():
    beams = beam_search(_hand_model(), [], 3, max_steps=5)
    # "a EOS" and "a a EOS" tie at 0.18; the shorter one wins
    assert [c.tokens for c in beams] == [(0, 3, 1), (0, 2, 3, 1), (0, 2, 1)]
    assert [round(math.exp(c.total_logprob), 6) for c in beams] == [0.36, 0.24, 0.18]


def test_beam_of_one_is_greedy():
    for seed in range(10):
        model = TableModel.random(6, eos=1, seed=seed)
        assert beam_search(model, [], 1, max_steps=6)[0].tokens == greedy(model, [], max_steps=6).tokens


@pytest.mark.parametrize("seed", range(5))
def test_saturated_beam_matches_exhaustive(seed):
    model = TableModel.random(5, eos=1, seed=seed)
    best = _exhaustive(model, 4)
    beams = beam_search(model, [], 625, max_steps=4)
    assert beams[0].tokens == best[0][1]
    assert beams[0].total_logprob == pytest.approx(best[0][0], abs=1e-9)


def test_beam_returns_distinct_sequences_in_score_order():
    model = TableModel.random(6, eos=1, seed=11)
    beams = beam_search(model, [], 8, max_steps=6)
    assert len({c.tokens for c in beams}) == len(beams) == 8
    scores = [c.total_logprob for c in beams]
    assert scores == sorted(scores, reverse=True)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 6))
def test_beam_properties(seed, width, steps):
    model = TableModel.random(5, eos=1, seed=seed)
    beams = beam_search(model, [], width, max_steps=steps)
    assert beams[0].total_logprob >= greedy(model, [], max_steps=steps).total_logprob - 1e-9
    for c in beams:
        assert c.finished or len(c.tokens) - 1 == steps
        assert c.total_logprob == pytest.approx(sum(c.logprobs))
        assert c.total_logprob == pytest.approx(sequence_logprob(model, [], c.tokens), abs=1e-9)


def test_beam_rejects_zero_width():
    with pytest.raises(ValueError):
        beam_search(_hand_model(), [], 0)


# stochastic beam search ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_sbs_at_low_temperature_is_beam(seed):
    model = TableModel.random(5, eos=1, seed=seed)
    beams = beam_search(model, [], 4, max_steps=5)
    sbs = stochastic_beam_search(model, [], 4, 1e-6, np.random.default_rng(seed), max_steps=5)
    assert [c.tokens for c in sbs] == [c.tokens for c in beams]


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_sbs_returns_distinct_sequences(seed, width):
    model = TableModel.random(5, eos=1, seed=seed)
    out = stochastic_beam_search(model, [], width, 1.0, np.random.default_rng(seed), max_steps=4)
    assert len({c.tokens for c in out}) == len(out) == width


def test_sbs_top_sequence_follows_model_distribution():
    model = _hand_model()
    truth = {(0, 3, 1): 0.36, (0, 2, 3, 1): 0.24, (0, 2, 1): 0.18, (0, 2, 2, 1): 0.18, (0, 3, 2, 1): 0.02, (0, 3, 3, 1): 0.02}
    rng = np.random.default_rng(0)
    runs = 10_000
    counts = Counter(stochastic_beam_search(model, [], 2, 1.0, rng, max_steps=5)[0].tokens for _ in range(runs))
    for seq, p in truth.items():
        assert abs(counts[seq] / runs - p) < 0.02


# diverse beam search -------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_dbs_without_penalty_is_beam(seed):
    model = TableModel.random(6, eos=1, seed=seed)
    assert diverse_beam_search(model, [], 4, 1, 0.0, max_steps=5) == beam_search(model, [], 4, max_steps=5)
    # with several groups and no penalty every group repeats the same narrower beam
    groups = diverse_beam_search(model, [], 6, 3, 0.0, max_steps=5)
    narrow = beam_search(model, [], 2, max_steps=5)
    assert groups == narrow * 3


def test_dbs_penalty_separates_first_tokens():
    model = _hand_model()
    plain = diverse_beam_search(model, [], 2, 2, 0.0, max_steps=5)
    assert plain[0].tokens[1] == plain[1].tokens[1] == 2
    diverse = diverse_beam_search(model, [], 2, 2, 10.0, max_steps=5)
    assert diverse[0].tokens[1] != diverse[1].tokens[1]


@given(st.integers(0, 10_000), st.sampled_from([(2, 1), (4, 2), (6, 3), (4, 4)]), st.floats(0, 5))
def test_dbs_returns_beam_width(seed, shape, lam):
    width, groups = shape
    model = TableModel.random(6, eos=1, seed=seed)
    assert len(diverse_beam_search(model, [], width, groups, lam, max_steps=5)) == width


def test_dbs_validation():
    with pytest.raises(ValueError):
        diverse_beam_search(_hand_model(), [], 4, 3, 0.5)
    with pytest.raises(ValueError):
        diverse_beam_search(_hand_model(), [], 4, 2, -0.5)


# VPT candidates and post-processing ------------------------------------------------------------


def test_vpt_candidates_count_and_limit(tiny_backbone, tiny_vpt):
    tiny_vpt.eval()
    model = BackboneDecoder(tiny_backbone)
    x = [BOS, 5, 6, EOS]
    out = generate_vpt_candidates(model, tiny_vpt, x, 7, 1.0, np.random.default_rng(0), max_steps=6)
    assert len(out) == 7
    a = generate_vpt_candidates(model, tiny_vpt, x, 1, 1e-9, np.random.default_rng(1), max_steps=6)
    b = generate_vpt_candidates(model, tiny_vpt, x, 1, 1e-9, np.random.default_rng(2), max_steps=6)
    assert a == b and len(a) == 1
    greedy_out = generate_vpt_candidates(model, tiny_vpt, x, 3, 1.0, np.random.default_rng(0), per_latent="greedy", max_steps=6)
    assert len(greedy_out) == 3
    with pytest.raises(ValueError):
        generate_vpt_candidates(model, tiny_vpt, x, 3, 1.0, np.random.default_rng(0), per_latent="nucleus")


def test_backbone_decoder_never_emits_special_tokens(tiny_backbone):
    model = BackboneDecoder(tiny_backbone)
    for c in sample(model, [BOS, 5, EOS], 1.5, np.random.default_rng(0), n=30, max_steps=8):
        assert not set(c.tokens[1:]) & {0, 1, 4}


def test_dedupe_fixtures():
    a = Candidate((0, 5, 1), (-1.0, -1.0), eos=1)
    a_better = Candidate((0, 5, 1), (-0.1, -0.1), eos=1)
    b = Candidate((0, 6, 1), (-0.5, -0.5), eos=1)
    assert dedupe([a, a, a]) == [a]
    assert dedupe([b, a]) == [b, a]
    assert dedupe([a, b, a_better]) == [a_better, b]


def test_rescore_attaches_prefix_free_quality(tiny_backbone):
    model = BackboneDecoder(tiny_backbone)
    x = [BOS, 5, 6, EOS]
    beams = beam_search(model, x, 3, max_steps=6)
    for c in rescore(tiny_backbone, x, beams):
        assert c.quality == pytest.approx(c.normalized_score, abs=1e-4)


def test_candidate_file_round_trip(tmp_path):
    vocab = Vocabulary(["<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "returns", "sum"])
    sets = [CandidateSet("e1", "beam10", [Candidate((1, 5, 6, 2), (-0.5, -0.25, -0.125), -0.2)], [0])]
    path = tmp_path / "c.jsonl"
    save_candidate_sets(path, sets, vocab)
    back = load_candidate_sets(path, vocab)
    assert back[0].candidates[0].tokens == (1, 5, 6, 2)
    assert back[0].texts(vocab, selected_only=True) == [["returns", "sum"]]
    save_candidate_sets(tmp_path / "again.jsonl", back, vocab)
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()
    (tmp_path / "bad.jsonl").write_text('{"id": 1}\n')
    with pytest.raises(DataError):
        load_candidate_sets(tmp_path / "bad.jsonl", vocab)
