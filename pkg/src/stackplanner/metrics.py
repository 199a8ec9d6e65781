"""Answer normalization and overlap metrics for short-answer QA."""

from __future__ import annotations

import re
import string
from collections import Counter
from typing import Iterable

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and English articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def normalized_tokens(text: str) -> list[str]:
    return normalize_answer(text).split()


def _f1_single(prediction: str, gold: str) -> float:
    pred_tokens = normalized_tokens(prediction)
    gold_tokens = normalized_tokens(gold)
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def _as_list(gold: str | Iterable[str]) -> list[str]:
    if isinstance(gold, str):
        return [gold]
    golds = list(gold)
    if not golds:
        raise ValueError("at least one gold answer is required")
    return golds


def token_f1(prediction: str, gold: str | Iterable[str]) -> float:
    """Bag-of-tokens F1, maximised over the gold alternatives."""
    return max(_f1_single(prediction, g) for g in _as_list(gold))


def exact_match(prediction: str, gold: str | Iterable[str]) -> int:
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in _as_list(gold)))
