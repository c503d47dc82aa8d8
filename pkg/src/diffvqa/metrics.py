"""Corpus-level caption metrics and the checkpoint selection score.

Variants: corpus BLEU without smoothing; METEOR with exact and Porter-stem
matching only (no synonyms); ROUGE-L with beta = 1.2; CIDEr-D with
sigma = 6, clipped tf-idf cosine and x10 scaling, document frequencies taken
over the evaluated references.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .porter import stem
from .text import tokenize

METRIC_KEYS = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider", "combined")
VARIANT_NOTE = ("BLEU: corpus, no smoothing | METEOR: exact+stem, alpha=0.9 beta=3 gamma=0.5 | "
                "ROUGE-L: beta=1.2 | CIDEr-D: sigma=6, x10, df over references")


@dataclass
class EvalPair:
    hyp: list[str]
    refs: list[list[str]]

    @classmethod
    def from_text(cls, hyp: str, refs: str | Sequence[str]) -> "EvalPair":
        refs = [refs] if isinstance(refs, str) else list(refs)
        if not refs:
            raise ValueError("EvalPair needs at least one reference")
        return cls(tokenize(hyp), [tokenize(r) for r in refs])


def make_pairs(hyps: Sequence[str], refs: Sequence[str]) -> list[EvalPair]:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    return [EvalPair.from_text(h, r) for h, r in zip(hyps, refs)]


def _mean(values) -> float:
    arr = np.asarray(list(values), dtype=float)
    return float(np.sum(arr) / arr.size) if arr.size else 0.0


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ----------------------------------------------------------------------


def bleu(pairs: Sequence[EvalPair], n: int = 4) -> float:
    if not pairs:
        raise ValueError("bleu of an empty corpus")
    if not 1 <= n <= 4:
        raise ValueError("bleu order must be in 1..4")
    matched = [0] * n
    total = [0] * n
    hyp_len = ref_len = 0
    for p in pairs:
        hyp_len += len(p.hyp)
        ref_len += min((abs(len(r) - len(p.hyp)), len(r)) for r in p.refs)[1]
        for k in range(1, n + 1):
            h = ngrams(p.hyp, k)
            max_ref: Counter = Counter()
            for r in p.refs:
                max_ref |= ngrams(r, k)
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in h.items())
            total[k - 1] += max(len(p.hyp) - k + 1, 0)
    if hyp_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_prec)


# -- METEOR ----------------------------------------------------------------------


def _align(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Greedy two-stage unigram alignment: exact, then Porter stem."""
    used_h: set[int] = set()
    used_r: set[int] = set()
    links = []
    for key in (lambda w: w, stem):
        ref_keys = [key(w) for w in ref]
        for i, w in enumerate(hyp):
            if i in used_h:
                continue
            kw = key(w)
            for j, rk in enumerate(ref_keys):
                if j not in used_r and rk == kw:
                    links.append((i, j))
                    used_h.add(i)
                    used_r.add(j)
                    break
    return sorted(links)


def _count_chunks(links: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in links:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_sentence(hyp: Sequence[str], ref: Sequence[str]) -> float:
    if not hyp or not ref:
        return 0.0
    links = _align(hyp, ref)
    m = len(links)
    if m == 0:
        return 0.0
    p = m / len(hyp)
    r = m / len(ref)
    f = 10.0 * p * r / (r + 9.0 * p)
    penalty = 0.5 * (_count_chunks(links) / m) ** 3
    return f * (1.0 - penalty)


def meteor(pairs: Sequence[EvalPair]) -> float:
    return _mean(max(meteor_sentence(p.hyp, r) for r in p.refs) for p in pairs)


# -- ROUGE-L -------------------------------------------------------------------------


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hyp: Sequence[str], ref: Sequence[str], beta: float = 1.2) -> float:
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(pairs: Sequence[EvalPair], beta: float = 1.2) -> float:
    return _mean(max(rouge_l_sentence(p.hyp, r, beta) for r in p.refs) for p in pairs)


# -- CIDEr-D -----------------------------------------------------------------------------


def _all_ngrams(tokens: Sequence[str], n_max: int) -> Counter:
    out: Counter = Counter()
    for k in range(1, n_max + 1):
        out.update(ngrams(tokens, k))
    return out


def cider_sentences(pairs: Sequence[EvalPair], n_max: int = 4, sigma: float = 6.0) -> list[float]:
    distinct = {tuple(tuple(r) for r in p.refs) for p in pairs}
    if len(pairs) < 2 or len(distinct) < 2:
        raise ValueError("CIDEr needs at least two pairs with distinct references")
    doc_freq: Counter = Counter()
    ref_counts = []
    for p in pairs:
        counts = [_all_ngrams(r, n_max) for r in p.refs]
        ref_counts.append(counts)
        doc_freq.update(set(g for c in counts for g in c))
    log_docs = math.log(float(len(pairs)))

    def vectorize(counts: Counter):
        vec = [dict() for _ in range(n_max)]
        norm = [0.0] * n_max
        for g, tf in counts.items():
            w = tf * (log_docs - math.log(max(1.0, doc_freq[g])))
            vec[len(g) - 1][g] = w
            norm[len(g) - 1] += w * w
        return vec, [math.sqrt(v) for v in norm]

    scores = []
    for p, counts in zip(pairs, ref_counts):
        vh, nh = vectorize(_all_ngrams(p.hyp, n_max))
        total = np.zeros(n_max)
        for r, rc in zip(p.refs, counts):
            vr, nr = vectorize(rc)
            delta = float(len(p.hyp) - len(r))
            for k in range(n_max):
                val = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vh[k].items())
                if nh[k] != 0 and nr[k] != 0:
                    val /= nh[k] * nr[k]
                total[k] += val * math.exp(-(delta ** 2) / (2 * sigma ** 2))
        scores.append(float(np.mean(total)) / len(p.refs) * 10.0)
    return scores


def cider(pairs: Sequence[EvalPair], n_max: int = 4, sigma: float = 6.0) -> float:
    return _mean(cider_sentences(pairs, n_max, sigma))


# -- selection score & reports ----------------------------------------------------------------


def combined(cider_score: float, meteor_score: float) -> float:
    """0.6·CIDEr/(1+CIDEr) + 0.4·METEOR."""
    if cider_score < 0 or meteor_score < 0:
        raise ValueError("combined score needs non-negative inputs")
    return 0.6 * cider_score / (1.0 + cider_score) + 0.4 * meteor_score


@dataclass
class ScoreReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float
    combined: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "ScoreReport":
        data = json.loads(text)
        return cls(**{k: float(data[k]) for k in METRIC_KEYS})

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        head = "  ".join(f"{k:>8}" for k in METRIC_KEYS)
        vals = "  ".join(f"{getattr(self, k):8.4f}" for k in METRIC_KEYS)
        return f"# {VARIANT_NOTE}\n{head}\n{vals}\n"


def score_pairs(pairs: Sequence[EvalPair]) -> ScoreReport:
    try:
        c = cider(pairs)
    except ValueError:
        # a single distinct reference gives no usable idf
        c = 0.0
    m = meteor(pairs)
    return ScoreReport(
        bleu1=bleu(pairs, 1), bleu2=bleu(pairs, 2), bleu3=bleu(pairs, 3), bleu4=bleu(pairs, 4),
        meteor=m, rouge_l=rouge_l(pairs), cider=c, combined=combined(c, m),
    )


def score_texts(hyps: Sequence[str], refs: Sequence[str]) -> ScoreReport:
    return score_pairs(make_pairs(hyps, refs))


def score_corpus(hyp_file, ref_file) -> ScoreReport:
    """Score two UTF-8 files holding one sentence per line."""
    hyps = Path(hyp_file).read_text(encoding="utf-8").split("\n")
    refs = Path(ref_file).read_text(encoding="utf-8").split("\n")
    # a trailing newline is not an extra sentence
    if hyps and hyps[-1] == "":
        hyps.pop()
    if refs and refs[-1] == "":
        refs.pop()
    if len(hyps) != len(refs):
        raise ValueError(f"line count mismatch: {len(hyps)} hypotheses vs {len(refs)} references")
    return score_texts(hyps, refs)
