"""Tokenization shared by the vocabulary, keyword extraction and metrics."""

import re

_TOKEN = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation off as its own token, split on whitespace."""
    return _TOKEN.findall(text.lower())


def is_word(token: str) -> bool:
    return token[:1].isalnum()


def detokenize(tokens: list[str]) -> str:
    out = ""
    for tok in tokens:
        if out and is_word(tok):
            out += " "
        out += tok
    return out
