"""Token-level micro-F1, split evaluation and agreement with a reference model."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from .data import Sentence, make_batches
from .model import predict_labels


class Predictor(Protocol):
    num_classes: int

    def predict_proba(self, ids: np.ndarray, mask: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class F1Score:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tokens: int = 0
    degenerate: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def token_micro_f1(predictions, golds, mask=None, outside: int | None = 0) -> F1Score:
    """Micro P/R/F1 over entity-class tokens; the ``outside`` class is never positive.

    Any zero denominator yields 0 for that quantity and sets ``degenerate``.
    """
    pred = np.asarray(predictions)
    gold = np.asarray(golds)
    if pred.shape != gold.shape:
        raise ValueError(f"predictions {pred.shape} and golds {gold.shape} differ in shape")
    m = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != pred.shape:
        raise ValueError(f"mask {m.shape} does not match predictions {pred.shape}")
    pred, gold = pred[m], gold[m]
    pred_ent = pred != outside if outside is not None else np.ones(pred.shape, bool)
    gold_ent = gold != outside if outside is not None else np.ones(gold.shape, bool)
    tp = int((pred_ent & (pred == gold)).sum())
    fp = int(pred_ent.sum()) - tp
    fn = int(gold_ent.sum()) - tp
    p, dp = _ratio(tp, tp + fp)
    r, dr = _ratio(tp, tp + fn)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return F1Score(p, r, f1, tp, fp, fn, int(m.sum()), dp or dr)


def _check_vocab(model: Predictor, label_names: Sequence[str]) -> None:
    if model.num_classes != len(label_names):
        raise ValueError(f"model has {model.num_classes} classes, label vocabulary has {len(label_names)}")


def predict_split(model: Predictor, sentences: Sequence[Sentence], batch_size: int = 64):
    """Yield ``(batch, probs)`` pairs in eval mode."""
    for batch in make_batches(sentences, batch_size):
        yield batch, model.predict_proba(batch.ids, batch.mask)


def evaluate_split(model: Predictor, sentences: Sequence[Sentence], label_names: Sequence[str],
                   batch_size: int = 64) -> F1Score:
    _check_vocab(model, label_names)
    outside = label_names.index("O") if "O" in label_names else None
    preds, golds = [], []
    for batch, probs in predict_split(model, sentences, batch_size):
        preds.append(predict_labels(probs)[batch.mask])
        golds.append(batch.labels[batch.mask])
    if not preds:
        return token_micro_f1(np.zeros(0, int), np.zeros(0, int), outside=outside)
    return token_micro_f1(np.concatenate(preds), np.concatenate(golds), outside=outside)


@dataclass(frozen=True)
class Agreement:
    agreement: float
    tv: float
    tokens: int


def model_agreement(model: Predictor, reference: Predictor, sentences: Sequence[Sentence],
                    batch_size: int = 64) -> Agreement:
    """Argmax agreement rate and mean total-variation distance per token."""
    if model.num_classes != reference.num_classes:
        raise ValueError("models disagree on the label vocabulary")
    same = 0
    tv = 0.0
    n = 0
    for batch in make_batches(sentences, batch_size):
        p = model.predict_proba(batch.ids, batch.mask)[batch.mask]
        q = reference.predict_proba(batch.ids, batch.mask)[batch.mask]
        same += int((predict_labels(p) == predict_labels(q)).sum())
        tv += float(0.5 * np.abs(p - q).sum())
        n += p.shape[0]
    if n == 0:
        return Agreement(1.0, 0.0, 0)
    return Agreement(same / n, tv / n, n)
