import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffvqa.metrics import (
    METRIC_KEYS,
    EvalPair,
    ScoreReport,
    bleu,
    cider,
    cider_sentences,
    combined,
    lcs_length,
    make_pairs,
    meteor,
    meteor_sentence,
    rouge_l,
    score_corpus,
    score_texts,
)
from diffvqa.porter import stem
from diffvqa.text import detokenize, tokenize

# Produced offline by a reference implementation of the original algorithm.
PORTER_GOLDEN = {
    "caresses": "caress", "ponies": "poni", "ties": "ti", "caress": "caress", "cats": "cat",
    "feed": "feed", "agreed": "agre", "plastered": "plaster", "bled": "bled", "motoring": "motor",
    "sing": "sing", "conflated": "conflat", "troubled": "troubl", "sized": "size", "hopping": "hop",
    "tanned": "tan", "falling": "fall", "hissing": "hiss", "fizzed": "fizz", "failing": "fail",
    "filing": "file", "happy": "happi", "sky": "sky", "relational": "relat", "conditional": "condit",
    "generalizations": "gener", "oscillators": "oscil", "hopefulness": "hope", "goodness": "good",
    "replacement": "replac",
}


def _pairs(hyps, refs):
    return make_pairs(hyps, refs)


# -- brute-force CIDEr-D oracle ----------------------------------------------------


def _oracle_cider(hyps, refs, sigma=6.0):
    """Materialize every tf-idf vector over the whole n-gram vocabulary."""
    H = [h.split() for h in hyps]
    R = [r.split() for r in refs]
    N = len(R)
    total = 0.0
    for h, r in zip(H, R):
        per_n = []
        for n in range(1, 5):
            vocab = set()
            for sent in H + R:
                for i in range(len(sent) - n + 1):
                    vocab.add(" ".join(sent[i:i + n]))

            def tf(sent, g):
                return sum(1 for i in range(len(sent) - n + 1) if " ".join(sent[i:i + n]) == g)

            def idf(g):
                df = sum(1 for doc in R if tf(doc, g) > 0)
                return math.log(N) - math.log(max(1, df))

            vh = {g: tf(h, g) * idf(g) for g in vocab}
            vr = {g: tf(r, g) * idf(g) for g in vocab}
            num = sum(min(vh[g], vr[g]) * vr[g] for g in vocab)
            nh = math.sqrt(sum(v * v for v in vh.values()))
            nr = math.sqrt(sum(v * v for v in vr.values()))
            cos = num / (nh * nr) if nh > 0 and nr > 0 else num
            per_n.append(cos * math.exp(-((len(h) - len(r)) ** 2) / (2 * sigma ** 2)))
        total += 10.0 * sum(per_n) / 4
    return total / len(H)


def test_oracle_orthogonal_corpus_gives_ten():
    hyps = ["a b c d", "e f g h"]
    refs = ["a b c d", "w x y z"]
    assert _oracle_cider(hyps, refs) == pytest.approx((10 + 0) / 2, abs=1e-12)


def _random_corpus(rng):
    words = [f"w{i}" for i in range(rng.randint(3, 9))]
    n = rng.randint(2, 8)

    def sent():
        return " ".join(rng.choice(words) for _ in range(rng.randint(0, 9)))

    hyps = [sent() for _ in range(n)]
    refs = [sent() or words[0] for _ in range(n)]
    if len(set(refs)) < 2:
        refs[0] = refs[0] + " " + words[1]
    return hyps, refs


def test_cider_matches_bruteforce_oracle():
    rng = random.Random(1234)
    for _ in range(100):
        hyps, refs = _random_corpus(rng)
        got = cider(_pairs(hyps, refs))
        assert abs(got - _oracle_cider(hyps, refs)) <= 1e-9


def test_cider_identical_with_orthogonal_others():
    pairs = _pairs(["the cat sat down", "one two three four"], ["the cat sat down", "x y z w"])
    assert cider_sentences(pairs)[0] == pytest.approx(10.0, abs=1e-12)


def test_cider_no_shared_ngrams_zero():
    pairs = _pairs(["q r s", "a b"], ["a b c", "d e"])
    assert cider_sentences(pairs)[0] == 0.0


def test_cider_degenerate_corpus_raises():
    with pytest.raises(ValueError):
        cider(_pairs(["a b", "a c"], ["a b", "a b"]))
    with pytest.raises(ValueError):
        cider(_pairs(["a b"], ["a b"]))


# -- Porter & tokenization -------------------------------------------------------


@pytest.mark.parametrize("word,expected", sorted(PORTER_GOLDEN.items()))
def test_porter_golden(word, expected):
    assert stem(word) == expected


def test_tokenize_splits_punctuation():
    assert tokenize("What has Changed?") == ["what", "has", "changed", "?"]
    assert detokenize(["what", "has", "changed", "?"]) == "what has changed?"


# -- BLEU ------------------------------------------------------------------------


def test_bleu_identity_corpus():
    sents = ["a new nodule has appeared in the left lower zone", "no change is observed"]
    pairs = _pairs(sents, sents)
    for n in range(1, 5):
        assert bleu(pairs, n) == pytest.approx(1.0, abs=1e-15)


def test_bleu_clipping_example():
    assert bleu(_pairs(["the the the"], ["the cat"]), 1) == pytest.approx(1 / 3, abs=1e-15)


def test_bleu_disjoint_zero():
    pairs = _pairs(["a b c d e"], ["f g h i j"])
    assert all(bleu(pairs, n) == 0.0 for n in range(1, 5))


def test_bleu_errors():
    with pytest.raises(ValueError):
        bleu([], 1)
    with pytest.raises(ValueError):
        bleu(_pairs(["a"], ["a"]), 5)


def test_bleu_monotone_when_matched_suffix_appended():
    ref = "the nodule in the right upper zone has enlarged".split()
    prev = [-1.0] * 4
    for k in range(4, len(ref) + 1):
        pairs = [EvalPair(ref[:k], [ref])]
        cur = [bleu(pairs, n) for n in range(1, 5)]
        assert all(c >= p for c, p in zip(cur, prev))
        prev = cur
    assert prev == pytest.approx([1.0] * 4)


# -- METEOR ----------------------------------------------------------------------


def test_meteor_identical_eight_tokens():
    s = "a b c d e f g h".split()
    assert meteor_sentence(s, s) == pytest.approx(1 - 0.5 / 512, abs=1e-15)


def test_meteor_stem_stage():
    assert meteor(_pairs(["dogs"], ["dog"])) == pytest.approx(0.5, abs=1e-15)


def test_meteor_no_overlap():
    assert meteor(_pairs(["alpha beta"], ["gamma delta"])) == 0.0


def test_meteor_chunks_penalize_reordering():
    straight = meteor_sentence("a b c d".split(), "a b c d".split())
    swapped = meteor_sentence("c d a b".split(), "a b c d".split())
    assert swapped < straight


# -- ROUGE-L ---------------------------------------------------------------------


def test_rouge_identity():
    assert rouge_l(_pairs(["x y z"], ["x y z"])) == pytest.approx(1.0)


def test_rouge_lcs_example():
    assert lcs_length("a b c d".split(), "a c b d".split()) == 3
    assert rouge_l(_pairs(["a b c d"], ["a c b d"])) == pytest.approx(0.75, abs=1e-15)


def test_rouge_empty_intersection():
    assert rouge_l(_pairs(["a b"], ["c d"])) == 0.0


# -- combined --------------------------------------------------------------------


def test_combined_examples():
    assert combined(0.0, 0.0) == 0.0
    assert combined(1.0, 0.5) == 0.5
    assert 0.999 < combined(1e9, 1.0) <= 1.0


def test_combined_rejects_negative():
    with pytest.raises(ValueError):
        combined(-0.1, 0.5)
    with pytest.raises(ValueError):
        combined(0.1, -0.5)


@given(st.floats(0, 1e6), st.floats(0, 1), st.floats(1e-3, 10))
def test_combined_strictly_increasing(c, m, d):
    assert combined(c + d, m) > combined(c, m)
    assert combined(c, m + d) > combined(c, m)


# -- corpus scoring ---------------------------------------------------------------


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_score_corpus_file_vs_itself(tmp_path):
    lines = [
        "the nodule in the left lower zone has enlarged",
        "a new effusion has appeared in the right lower zone",
        "no change is observed",
    ]
    f = _write(tmp_path / "a.txt", lines)
    rep = score_corpus(f, f)
    assert rep.bleu1 == pytest.approx(1.0) and rep.bleu4 == pytest.approx(1.0)
    assert rep.rouge_l == pytest.approx(1.0)
    expected = sum(1 - 0.5 / len(s.split()) ** 3 for s in lines) / 3
    assert rep.meteor == pytest.approx(expected, abs=1e-15)
    assert rep.combined == combined(rep.cider, rep.meteor)


def test_score_corpus_line_mismatch(tmp_path):
    a = _write(tmp_path / "a.txt", ["one", "two"])
    b = _write(tmp_path / "b.txt", ["one"])
    with pytest.raises(ValueError):
        score_corpus(a, b)


def test_score_corpus_empty_hypothesis_lines(tmp_path):
    a = _write(tmp_path / "a.txt", ["", "the cat sat"])
    b = _write(tmp_path / "b.txt", ["a dog ran", "the cat sat"])
    rep = score_corpus(a, b)
    assert rep.meteor == pytest.approx((0 + (1 - 0.5 / 27)) / 2)
    assert rep.rouge_l == pytest.approx(0.5)
    assert cider_sentences(make_pairs(["", "the cat sat"], ["a dog ran", "the cat sat"]))[0] == 0.0


def test_report_json_round_trip():
    rep = score_texts(["the cat sat on the mat", "a b"], ["the cat sat on a mat", "a c"])
    data = json.loads(rep.to_json())
    assert list(data) == list(METRIC_KEYS)
    assert ScoreReport.from_json(rep.to_json()) == rep
    assert "CIDEr-D" in rep.table()


def test_report_ranges():
    rng = random.Random(9)
    for _ in range(20):
        hyps, refs = _random_corpus(rng)
        rep = score_texts(hyps, refs)
        for k in ("bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "combined"):
            assert 0.0 <= getattr(rep, k) <= 1.0
        assert rep.cider >= 0.0


@settings(max_examples=30, deadline=None)
@given(st.randoms(use_true_random=False))
def test_metrics_permutation_invariant(r):
    hyps, refs = _random_corpus(random.Random(r.random()))
    order = list(range(len(hyps)))
    r.shuffle(order)
    a = score_texts(hyps, refs)
    b = score_texts([hyps[i] for i in order], [refs[i] for i in order])
    for k in METRIC_KEYS:
        assert getattr(a, k) == pytest.approx(getattr(b, k), abs=1e-12)
