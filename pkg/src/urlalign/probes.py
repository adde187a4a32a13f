"""Few-shot probing of frozen representations.

A probe is ``softmax(V act(W x + b) + c)`` trained with cross-entropy on N
examples per class, using fixed hyperparameters (no validation-set tuning).
Features are computed once from the frozen encoder and never updated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import TrainingError, ValidationError

logger = logging.getLogger(__name__)

ACTIVATIONS = {"tanh": nn.Tanh, "relu": nn.ReLU}


@dataclass
class ProbeConfig:
    num_classes: int
    activation: str = "tanh"
    hidden: int = 128
    learning_rate: float = 1e-5
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError("a probe needs at least two classes")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"activation must be one of {sorted(ACTIVATIONS)}")


class ProbeHead(nn.Module):
    def __init__(self, input_dim: int, config: ProbeConfig):
        super().__init__()
        self.config = config
        self.hidden = nn.Linear(input_dim, config.hidden)
        self.act = ACTIVATIONS[config.activation]()
        self.classifier = nn.Linear(config.hidden, config.num_classes)

    def forward(self, x):
        return self.classifier(self.act(self.hidden(x)))

    def predict_proba(self, features) -> np.ndarray:
        x = torch.as_tensor(np.asarray(features), dtype=self.hidden.weight.dtype)
        with torch.no_grad():
            return torch.softmax(self(x), dim=-1).double().numpy()

    def predict(self, features) -> np.ndarray:
        return self.predict_proba(features).argmax(axis=1)


@dataclass
class FewShotSplit:
    train: np.ndarray
    test: np.ndarray


def few_shot_sample(labels, n_per_class: int, seed: int = 0, test_cap: int | None = 10_000) -> FewShotSplit:
    """Per class, draw ``n_per_class`` training indices; the rest (capped per class) is the test pool."""
    labels = np.asarray(labels)
    if n_per_class < 1:
        raise ValidationError("n_per_class must be >= 1")
    rng = np.random.default_rng([seed, 0xF5])
    train, test = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < n_per_class + 1:
            raise ValidationError(f"class {cls} has {len(idx)} instances; need at least {n_per_class + 1}")
        perm = rng.permutation(idx)
        train.append(perm[:n_per_class])
        rest = perm[n_per_class:]
        test.append(rest if test_cap is None else rest[:test_cap])
    return FewShotSplit(np.sort(np.concatenate(train)), np.sort(np.concatenate(test)))


def concat_user_url(user_vec, url_rep) -> np.ndarray:
    """Engagement-task input: user graph vector followed by the page representation."""
    if user_vec is None:
        raise LookupError("user has no graph embedding")
    if url_rep is None:
        raise LookupError("url has no representation")
    return np.concatenate([np.asarray(user_vec, dtype=np.float64), np.asarray(url_rep, dtype=np.float64)], axis=-1)


def user_url_features(user_vectors: np.ndarray, user_ids, url_reps: np.ndarray,
                      known_users: np.ndarray | None = None) -> np.ndarray:
    """Row-wise ``concat_user_url`` for many pairs; ``known_users`` flags users present in the graph."""
    user_ids = np.asarray(user_ids)
    bad = (user_ids < 0) | (user_ids >= len(user_vectors))
    if known_users is not None:
        bad |= ~np.asarray(known_users, dtype=bool)[np.clip(user_ids, 0, len(user_vectors) - 1)]
    if bad.any():
        raise LookupError(f"user {int(user_ids[np.argmax(bad)])} has no graph embedding")
    return concat_user_url(user_vectors[user_ids], url_reps)


@dataclass
class ProbeResult:
    head: ProbeHead
    epoch_losses: list[float] = field(default_factory=list)


def train_probe(features, labels, config: ProbeConfig) -> ProbeResult:
    x = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValidationError("features must be (n, dim) with one label per row")
    if len(y) == 0:
        raise ValidationError("no training examples")
    if y.min() < 0 or y.max() >= config.num_classes:
        raise ValidationError(f"labels must lie in [0, {config.num_classes})")
    if len(np.unique(y)) < 2:
        raise ValidationError("training labels contain a single class")
    y_t = torch.from_numpy(y)
    rng = np.random.default_rng([config.seed, 0x9B0])
    losses = []
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        head = ProbeHead(x.shape[1], config)
    opt = torch.optim.Adam(head.parameters(), lr=config.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    for epoch in range(config.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            opt.zero_grad()
            loss = loss_fn(head(x[idx]), y_t[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite probe loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(y))
    head.eval()
    return ProbeResult(head, losses)


# -- metrics ---------------------------------------------------------------------

def _confusion_counts(predictions, labels, num_classes: int):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValidationError("predictions and labels differ in length")
    if len(labels) == 0:
        raise ValidationError("empty input")
    classes = np.arange(num_classes)
    tp = np.array([np.sum((predictions == c) & (labels == c)) for c in classes], dtype=np.float64)
    fp = np.array([np.sum((predictions == c) & (labels != c)) for c in classes], dtype=np.float64)
    fn = np.array([np.sum((predictions != c) & (labels == c)) for c in classes], dtype=np.float64)
    return tp, fp, fn


def per_class_f1(predictions, labels, num_classes: int) -> np.ndarray:
    tp, fp, fn = _confusion_counts(predictions, labels, num_classes)
    denom = 2 * tp + fp + fn
    # a class never predicted and never present scores 0
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(predictions, labels, num_classes: int) -> float:
    return float(per_class_f1(predictions, labels, num_classes).mean())


def micro_f1(predictions, labels, num_classes: int) -> float:
    tp, fp, fn = _confusion_counts(predictions, labels, num_classes)
    return float(2 * tp.sum() / (2 * tp.sum() + fp.sum() + fn.sum()))


def pr_auc(scores, labels) -> float:
    """Average precision: mean of precision@rank over the ranks of the positives.

    Scores are sorted descending with a stable sort, so tied scores keep input order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be 1-d and equal length")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValidationError("pr_auc needs at least one positive and one negative")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at[hits].sum() / n_pos)
