"""Synthetic 3-class classification task used as the abstract-ability workload.

Sentences follow pattern families built from word banks; the label is a
deterministic function of the family (the marker adjective's class), so the
rule is learnable and transfers to unseen word combinations. Train and test
are split over patterns: a test sentence never appears in training.
"""

from __future__ import annotations

import numpy as np

from .errors import RangeError

CLASSES = ("positive", "negative", "neutral")

_MARKERS = {
    "positive": ["stellar", "gleaming", "superb", "delightful", "flawless",
                 "radiant", "splendid", "admirable", "excellent", "charming"],
    "negative": ["dismal", "shoddy", "dreadful", "broken", "miserable",
                 "faulty", "bleak", "wretched", "inferior", "tedious"],
    "neutral": ["standard", "ordinary", "typical", "plain", "routine",
                "average", "common", "usual", "regular", "moderate"],
}
_NOUNS = [
    "kettle", "lantern", "satchel", "compass", "ledger", "teapot", "whistle",
    "carpet", "mirror", "drawer", "basket", "folder", "candle", "bracket",
    "saddle", "funnel", "magnet", "ribbon", "shutter", "anchor", "beacon",
    "crate", "pulley", "stencil", "tripod", "valve", "winch", "easel",
]
_VERBS = [
    "arrived", "shipped", "performed", "operated", "unfolded", "functioned",
    "behaved", "turned out", "held up", "worked",
]
_OPENERS = [
    "The", "This", "Our", "Their", "My", "One",
]

PROMPT_TEMPLATE = "Review: {sentence}\nRating:"


def make_classification_task(
    num_train: int, num_test: int, seed: int
) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    """(train_pairs, test_pairs) of (prompt, label); patterns are disjoint."""
    if num_train < len(CLASSES) or num_test < 1:
        raise RangeError("need at least one example per class and one test example")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAB111]))
    seen: set[tuple] = set()
    pairs: list[tuple[str, str]] = []
    labels = [CLASSES[i % len(CLASSES)] for i in range(num_train + num_test)]
    for label in labels:
        for _ in range(1000):
            pattern = (
                _OPENERS[rng.integers(len(_OPENERS))],
                _MARKERS[label][rng.integers(len(_MARKERS[label]))],
                _NOUNS[rng.integers(len(_NOUNS))],
                _VERBS[rng.integers(len(_VERBS))],
            )
            if pattern not in seen:
                break
        else:
            raise RangeError("pattern space exhausted; ask for fewer examples")
        seen.add(pattern)
        opener, adj, noun, verb = pattern
        sentence = f"{opener} {adj} {noun} {verb} as described."
        pairs.append((PROMPT_TEMPLATE.format(sentence=sentence), label))
    return pairs[:num_train], pairs[num_train:]


def accuracy(state, test_pairs: list[tuple[str, str]]) -> float:
    """Exact-match accuracy of greedy decoding on held-out patterns."""
    from .evaluator import memorization_rate
    from .trainer import EncodedDataset

    data = EncodedDataset.from_pairs(test_pairs, attribute="classification", label="task-test")
    return memorization_rate(state, data).overall_mr
