import numpy as np
import pytest

from pdcap.errors import ContractError
from pdcap.metrics import CiderD, bleu, cider_d, corpus_eval, rouge_l
from pdcap import kernels

from oracles import bleu_oracle, cider_oracle, clipped_precision_counts, rouge_oracle

S = str.split
CORPUS = [[S("a man rides a horse on the beach")], [S("two dogs play in the snow")],
          [S("a red car parked near a tree")], [S("children eat cake at a party")]]


def random_sentence(rng, vocab=6, lo=1, hi=9):
    return [f"w{int(i)}" for i in rng.integers(0, vocab, rng.integers(lo, hi))]


class TestBleu:
    def test_perfect_match(self):
        assert bleu(S("a cat sat on the mat"), [S("a cat sat on the mat")]) == [1.0] * 4

    def test_clipped_unigram(self):
        cand, ref = S("the the the the the the the"), S("the cat is on the mat")
        assert clipped_precision_counts(cand, [ref], 1) == (2, 7)
        assert bleu(cand, [ref])[0] == pytest.approx(2 / 7, abs=1e-15)

    def test_no_bigram_overlap(self):
        b = bleu(S("mat the on cat"), [S("the cat on the mat")])
        assert b[0] > 0 and b[1:] == [0.0, 0.0, 0.0]

    def test_no_brevity_penalty(self):
        assert bleu(S("the cat"), [S("the cat sat on the mat today")]) == [1.0, 1.0, 0.0, 0.0]

    def test_empty_candidate(self):
        assert bleu([], [S("a b")]) == [0.0] * 4


class TestRouge:
    def test_identical(self):
        assert rouge_l(S("a b c"), [S("a b c")]) == pytest.approx(1.0, abs=1e-15)

    def test_lcs_example(self):
        assert kernels.lcs_length([0, 1, 2, 3], [0, 2, 1, 3]) == 3
        p = r = 3 / 4
        assert rouge_l(S("a b c d"), [S("a c b d")]) == pytest.approx(2.2 * p * r / (r + 1.2 * p), abs=1e-15)

    def test_disjoint_and_empty(self):
        assert rouge_l(S("a b"), [S("c d")]) == 0.0
        assert rouge_l([], [S("c d")]) == 0.0

    def test_max_over_references(self):
        assert rouge_l(S("a b c"), [S("x y"), S("a b c")]) == pytest.approx(1.0)


class TestCider:
    def test_self_match_is_ten(self):
        for doc in CORPUS:
            assert cider_d(doc[0], doc, CORPUS) == pytest.approx(10.0, abs=1e-9)

    def test_no_overlap(self):
        assert cider_d(S("zebra zebra"), CORPUS[0], CORPUS) == 0.0

    def test_empty_corpus(self):
        with pytest.raises(ContractError):
            CiderD([])

    def test_rescaled_tfidf_leaves_score(self):
        # one gram per order, so unrelated documents only rescale both vectors
        cand, refs = S("x x"), [S("x x x")]
        corpus = [refs, [S("y")]]
        a = cider_d(cand, refs, corpus)
        b = cider_d(cand, refs, corpus + [[S("z")], [S("w")]])
        assert a == pytest.approx(b, abs=1e-12)

    def test_length_penalty(self):
        refs = CORPUS[1]
        short = cider_d(S("two dogs play"), refs, CORPUS)
        assert short < cider_d(S("two dogs play in the"), refs, CORPUS)


def test_random_pairs_match_oracles():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        cand = random_sentence(rng)
        refs = [random_sentence(rng) for _ in range(int(rng.integers(1, 4)))]
        corpus = [refs] + [[random_sentence(rng) for _ in range(2)] for _ in range(4)]
        worst = max(worst, max(abs(a - b) for a, b in zip(bleu(cand, refs), bleu_oracle(cand, refs))))
        worst = max(worst, abs(rouge_l(cand, refs) - rouge_oracle(cand, refs)))
        worst = max(worst, abs(cider_d(cand, refs, corpus) - cider_oracle(cand, refs, corpus)))
    assert worst <= 1e-9


def test_relabeling_invariance():
    rng = np.random.default_rng(5)
    perm = {f"w{i}": f"w{j}" for i, j in enumerate(rng.permutation(6))}
    relabel = lambda s: [perm[t] for t in s]  # noqa: E731
    for _ in range(50):
        cand = random_sentence(rng)
        refs = [random_sentence(rng) for _ in range(2)]
        corpus = [refs] + [[random_sentence(rng)] for _ in range(3)]
        rc, rr = relabel(cand), [relabel(r) for r in refs]
        rcorp = [[relabel(r) for r in doc] for doc in corpus]
        assert bleu(cand, refs) == bleu(rc, rr)
        assert rouge_l(cand, refs) == rouge_l(rc, rr)
        assert cider_d(cand, refs, corpus) == pytest.approx(cider_d(rc, rr, rcorp), abs=1e-12)


def test_bleu_can_rise_with_order():
    # p1 = 3/4, p2 = 3/3: the geometric mean at n=2 exceeds B@1
    cand = S("b b a b")
    refs = [S("a a b a b a a"), S("a a c a b b c")]
    assert clipped_precision_counts(cand, refs, 1) == (3, 4)
    assert clipped_precision_counts(cand, refs, 2) == (3, 3)
    b = bleu(cand, refs)
    assert b[0] == pytest.approx(0.75) and b[1] == pytest.approx(0.75 ** 0.5)


def test_bleu_usually_monotone_and_always_in_range():
    rng = np.random.default_rng(6)
    rises = 0
    for _ in range(200):
        cand = random_sentence(rng, vocab=3)
        refs = [random_sentence(rng, vocab=3) for _ in range(2)]
        b = bleu(cand, refs)
        assert all(0 <= x <= 1 for x in b)
        rises += any(b[i + 1] > b[i] for i in range(3))
        assert 0 <= rouge_l(cand, refs) <= 1
        corpus = [refs, [random_sentence(rng, vocab=3)]]
        assert 0 <= cider_d(cand, refs, corpus) <= 10 + 1e-9
    assert rises < 20


class TestCorpusEval:
    def test_all_perfect(self):
        rep = corpus_eval([(doc[0], doc) for doc in CORPUS])
        assert rep.bleu == [1.0] * 4 and rep.rouge_l == pytest.approx(1.0)
        assert rep.cider_d == pytest.approx(10.0, abs=1e-9) and rep.n == 4

    def test_order_invariant(self):
        rng = np.random.default_rng(8)
        pairs = [(random_sentence(rng), [random_sentence(rng) for _ in range(2)]) for _ in range(12)]
        a = corpus_eval(pairs).to_json()
        for _ in range(5):
            shuffled = [pairs[i] for i in rng.permutation(len(pairs))]
            assert corpus_eval(shuffled).to_json() == a

    def test_single_pair_matches_sentence_level(self):
        cand, refs = S("a man rides a red horse"), CORPUS[0]
        rep = corpus_eval([(cand, refs)])
        assert rep.bleu == bleu(cand, refs)
        assert rep.rouge_l == rouge_l(cand, refs)
        assert rep.cider_d == cider_d(cand, refs, [refs])

    def test_pooled_counts(self):
        rep = corpus_eval([(S("a a"), [S("a b")]), (S("b"), [S("b")])])
        assert rep.bleu[0] == pytest.approx(2 / 3)

    def test_empty(self):
        with pytest.raises(ContractError):
            corpus_eval([])

    def test_json_schema(self):
        assert set(corpus_eval([(S("a"), [S("a")])]).to_json()) == {"bleu", "rouge_l", "cider_d", "n"}
