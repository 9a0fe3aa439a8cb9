"""Greedy decoding, exact-match memorization rate, and held-out evaluation.

Exact match is byte equality after stripping trailing whitespace; no case
folding, since values are synthetic and canonical. Decoding is greedy
(temperature 0) with ties broken toward the lowest token id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import factgen, tokenizer
from .errors import ContaminationError, DegenerateInputError
from .model import ModelState, forward, greedy_continuations
from .trainer import EncodedDataset, make_batch

DECODE_MARGIN = 8  # decode budget beyond the longest gold value


@dataclass
class PredictionRecord:
    key: str
    attribute: str
    prediction: str
    gold: str
    match: bool


@dataclass
class EvalReport:
    overall_mr: float
    per_attribute_mr: dict[str, float]
    per_attribute_counts: dict[str, int]
    mean_heldout_loss: float | None = None
    samples: list[PredictionRecord] = field(default_factory=list)

    def as_csv_row(self) -> dict:
        row = {"overall_mr": self.overall_mr, "mean_heldout_loss": self.mean_heldout_loss}
        for attr in sorted(self.per_attribute_mr):
            row[f"mr:{attr}"] = self.per_attribute_mr[attr]
        return row


def _em(prediction: str, gold: str) -> bool:
    return prediction.rstrip() == gold.rstrip()


def _as_encoded(dataset) -> EncodedDataset:
    if isinstance(dataset, EncodedDataset):
        return dataset
    return EncodedDataset.from_facts(dataset)


def greedy_decode(state: ModelState, prompt: str, max_len: int = 64) -> str:
    """Argmax loop from BOS + prompt until EOS or max_len tokens."""
    toks = np.array([tokenizer.BOS] + tokenizer.encode(prompt), dtype=np.int32)
    cont = greedy_continuations(state, [toks], max_len)[0]
    return tokenizer.decode(cont)


def predict_all(state: ModelState, data: EncodedDataset, max_new: int | None = None) -> list[PredictionRecord]:
    """Batched greedy decode of every example, grouped by prompt length."""
    if max_new is None:
        max_new = data.max_target_len() + DECODE_MARGIN
    buckets: dict[int, list[int]] = {}
    for i, e in enumerate(data.examples):
        buckets.setdefault(e.target_start, []).append(i)
    records: list[PredictionRecord | None] = [None] * len(data.examples)
    for plen in sorted(buckets):
        idxs = buckets[plen]
        for b0 in range(0, len(idxs), 256):
            chunk = idxs[b0:b0 + 256]
            prompts = [data.examples[i].tokens[:plen] for i in chunk]
            conts = greedy_continuations(state, prompts, max_new)
            for i, cont in zip(chunk, conts):
                e = data.examples[i]
                pred = tokenizer.decode(cont)
                records[i] = PredictionRecord(e.key, e.attribute, pred, e.gold, _em(pred, e.gold))
    return records  # type: ignore[return-value]


def _aggregate(records: list[PredictionRecord], loss: float | None = None,
               sample_cap: int = 20) -> EvalReport:
    counts: dict[str, int] = {}
    hits: dict[str, int] = {}
    for r in records:
        counts[r.attribute] = counts.get(r.attribute, 0) + 1
        hits[r.attribute] = hits.get(r.attribute, 0) + int(r.match)
    overall = sum(hits.values()) / sum(counts.values())
    per_attr = {a: hits[a] / counts[a] for a in counts}
    return EvalReport(
        overall_mr=overall,
        per_attribute_mr=per_attr,
        per_attribute_counts=counts,
        mean_heldout_loss=loss,
        samples=records[:sample_cap],
    )


def memorization_rate(state: ModelState, dataset) -> EvalReport:
    """Fraction of facts whose value greedy decoding reproduces exactly."""
    data = _as_encoded(dataset)
    if not data.examples:
        raise DegenerateInputError("empty dataset")
    return _aggregate(predict_all(state, data))


def masked_loss(state: ModelState, dataset, batch_size: int = 256) -> float:
    """Mean cross-entropy over value tokens: the held-out loss statistic."""
    data = _as_encoded(dataset)
    total, count = 0.0, 0
    for b0 in range(0, len(data.examples), batch_size):
        chunk = data.examples[b0:b0 + batch_size]
        tokens, mask = make_batch(chunk)
        logits = forward(state, tokens)
        pos_mask = mask[:, 1:]
        flat = logits[:, :-1, :].reshape(-1, logits.shape[-1]).astype(np.float64)
        targets = tokens[:, 1:].reshape(-1)
        sel = pos_mask.reshape(-1)
        lsel = flat[sel]
        tsel = targets[sel]
        mx = np.max(lsel, axis=-1, keepdims=True)
        logz = mx[:, 0] + np.log(np.sum(np.exp(lsel - mx), axis=-1))
        total += float(np.sum(logz - lsel[np.arange(len(tsel)), tsel]))
        count += len(tsel)
    if count == 0:
        raise DegenerateInputError("no value tokens to score")
    return total / count


def generalization_eval(state: ModelState, heldout, train_keys=None) -> EvalReport:
    """Exact-match accuracy and masked loss on facts of unseen keys."""
    if train_keys is not None:
        held_keys = set(heldout.keys()) if isinstance(heldout, factgen.FactDataset) else {
            e.key for e in heldout.examples
        }
        if isinstance(train_keys, factgen.FactDataset):
            train_keys = set(train_keys.keys())
        overlap = held_keys & set(train_keys)
        if overlap:
            raise ContaminationError(
                f"{len(overlap)} held-out keys appear in training: {sorted(overlap)[:5]}"
            )
    data = _as_encoded(heldout)
    if not data.examples:
        raise DegenerateInputError("empty held-out set")
    records = predict_all(state, data)
    return _aggregate(records, loss=masked_loss(state, data))


def dump_predictions(records: list[PredictionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "key": r.key, "attribute": r.attribute, "prediction": r.prediction,
                "gold": r.gold, "match": r.match,
            }, ensure_ascii=False) + "\n")
