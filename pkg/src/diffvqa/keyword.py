"""Single-keyword extraction from answer text.

The lexicon extractor is the default and is fully offline.  The LLM client
posts the answer to a JSON completion endpoint and falls back to the lexicon
whenever the reply is unusable.
"""

from __future__ import annotations

import json
import logging
import os
import string
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .saliency import CamTarget
from .text import is_word, tokenize

log = logging.getLogger(__name__)

ENDPOINT_ENV = "DIFFVQA_LLM_ENDPOINT"
DEFAULT_PROMPT = ("Extract exactly one medically salient keyword from this answer. "
                  "Reply with one word only. Answer: {answer}")

DEFAULT_STOPWORDS = frozenset(
    "a an the is are was were be been has have had in on of at to for with and or no not "
    "this that these those it its there their from by as into any some than then what how "
    "which who whom when where why does do did can could may might will would shall should "
    "very more less new".split()
)

DEFAULT_TERMS = {
    # findings rendered by the synthetic generator
    "opacity": 1, "effusion": 1, "nodule": 1, "consolidation": 1,
    # common chest findings, kept for real answers
    "pneumothorax": 1, "atelectasis": 1, "edema": 1, "cardiomegaly": 1, "pneumonia": 1,
    "mass": 1, "fracture": 1, "emphysema": 1, "pleural effusion": 1, "lung opacity": 1,
    "change": 2, "difference": 2,
}


@dataclass(frozen=True)
class KeywordLexicon:
    """Terms ordered by priority (lower = more salient), ties by term."""

    terms: tuple[tuple[str, int], ...]
    stopwords: frozenset = field(default=DEFAULT_STOPWORDS)

    def __post_init__(self):
        names = [t for t, _ in self.terms]
        if any(t != t.lower() or not t.strip() for t in names):
            raise ValueError("lexicon terms must be non-empty lowercase")
        if len(set(names)) != len(names):
            raise ValueError("lexicon terms must be unique")
        ordered = tuple(sorted(self.terms, key=lambda tp: (tp[1], tp[0])))
        object.__setattr__(self, "terms", ordered)
        object.__setattr__(self, "stopwords", frozenset(w.lower() for w in self.stopwords))

    @classmethod
    def from_mapping(cls, mapping: dict[str, int], stopwords: Iterable[str] = DEFAULT_STOPWORDS):
        return cls(tuple(mapping.items()), frozenset(stopwords))

    @classmethod
    def default(cls) -> "KeywordLexicon":
        return cls.from_mapping(DEFAULT_TERMS)


def _find_span(tokens: Sequence, span: Sequence) -> int:
    n = len(span)
    for i in range(len(tokens) - n + 1):
        if list(tokens[i:i + n]) == list(span):
            return i
    return -1


def extract_keyword(answer: str, lex: KeywordLexicon | None = None) -> str:
    lex = lex or KeywordLexicon.default()
    tokens = tokenize(answer)
    if not tokens:
        raise ValueError("cannot extract a keyword from an empty answer")
    best = None
    for term, prio in lex.terms:
        pos = _find_span(tokens, tokenize(term))
        if pos >= 0 and (best is None or (prio, pos) < best[:2]):
            best = (prio, pos, term)
    if best is not None:
        return best[2]
    words = [t for t in tokens if is_word(t)] or tokens
    for tok in words:
        if tok not in lex.stopwords:
            return tok
    return words[0]


@dataclass(frozen=True)
class LlmClientConfig:
    endpoint: str = "http://localhost:11434"
    model: str = "llama3:70b"
    prompt_template: str = DEFAULT_PROMPT
    timeout: float = 10.0
    retries: int = 1
    path: str = "/api/generate"

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if "{answer}" not in self.prompt_template:
            raise ValueError("prompt template needs an {answer} placeholder")

    def url(self) -> str:
        base = os.environ.get(ENDPOINT_ENV) or self.endpoint
        return base.rstrip("/") + self.path


def normalize_reply(text: str) -> str | None:
    """First whitespace token, lowercased, outer punctuation stripped; None if unusable."""
    parts = text.split()
    if not parts:
        return None
    word = parts[0].lower().strip(string.punctuation)
    toks = tokenize(word)
    if len(toks) != 1 or not is_word(toks[0]):
        return None
    return toks[0]


def _post(cfg: LlmClientConfig, answer: str) -> str:
    body = json.dumps({"model": cfg.model, "prompt": cfg.prompt_template.format(answer=answer),
                       "stream": False}).encode("utf-8")
    req = urllib.request.Request(cfg.url(), data=body, method="POST",
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
        payload = json.loads(resp.read().decode("utf-8"))
    reply = payload.get("response") if isinstance(payload, dict) else None
    if not isinstance(reply, str):
        raise ValueError("reply has no string 'response' field")
    return reply


def llm_extract_keyword(answer: str, cfg: LlmClientConfig | None = None,
                        lex: KeywordLexicon | None = None) -> str:
    """Ask the endpoint for a keyword; any failure falls back to :func:`extract_keyword`."""
    cfg = cfg or LlmClientConfig()
    for attempt in range(cfg.retries + 1):
        try:
            word = normalize_reply(_post(cfg, answer))
        except (OSError, urllib.error.URLError, ValueError, TimeoutError) as exc:
            log.warning("keyword endpoint attempt %d failed: %s", attempt + 1, exc)
            continue
        if word is not None:
            return word
        log.warning("keyword endpoint reply unusable; using lexicon")
        break
    return extract_keyword(answer, lex)


def keyword_to_target(keyword: str, vocab, answer_ids: Sequence[int]) -> CamTarget | None:
    """Positions of the keyword span inside ``answer_ids``; None signals absence."""
    try:
        kw_ids = vocab.encode(keyword)
    except KeyError:
        return None
    if not kw_ids:
        return None
    pos = _find_span(list(answer_ids), kw_ids)
    if pos < 0:
        return None
    return CamTarget(tuple(kw_ids), tuple(int(i) for i in answer_ids),
                     tuple(range(pos, pos + len(kw_ids))))
