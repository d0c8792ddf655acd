"""Training loop, evaluation metrics and attention read-out."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import gradcore as gc
from .exceptions import ContractError, TrainingDivergenceError, UndefinedAUCError
from .model import AttentionTree, NmilModel, as_layout, forward, forward_tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 100
    patience: int = 10
    validation_fraction: float = 0.2
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ContractError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        if self.patience < 1:
            raise ContractError(f"patience must be >= 1, got {self.patience}")
        if self.learning_rate < 0:
            raise ContractError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.max_epochs < 0:
            raise ContractError(f"max_epochs must be >= 0, got {self.max_epochs}")


@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False

    def records(self):
        return [dict(r) for r in self.epochs]

    @property
    def train_loss(self):
        return [r["train_loss"] for r in self.epochs]

    @property
    def val_loss(self):
        return [r["val_loss"] for r in self.epochs]


def _labelled(dataset):
    """Accept NestedSample-like objects or (bag, label) pairs."""
    out = []
    for item in dataset:
        if hasattr(item, "weak_label"):
            out.append((as_layout(item), int(item.weak_label)))
        else:
            bag, y = item
            out.append((as_layout(bag), int(y)))
    return out


def stratified_split(labels, fraction, rng):
    """Indices (train, val) with each label contributing ``fraction`` to val."""
    labels = np.asarray(labels)
    val = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        k = int(round(fraction * idx.size))
        if idx.size > 1:
            k = min(max(k, 1), idx.size - 1)
        else:
            k = 0
        val.extend(idx[:k].tolist())
    val = np.array(sorted(val), dtype=np.intp)
    train = np.setdiff1d(np.arange(labels.size), val)
    if val.size == 0 or train.size == 0:
        raise ContractError(f"cannot split {labels.size} samples into non-empty train/validation sets")
    return train, val


def mean_loss(model, data):
    total = 0.0
    for layout, y in data:
        p, _ = forward_tensor(model, layout)
        total += gc.bce_loss(p, y).item()
    return total / len(data)


def train(model: NmilModel, dataset, config: TrainConfig = None, validation=None, callback: Callable = None):
    """Fit ``model`` in place with per-sample SGD and early stopping.

    ``dataset`` holds samples (with ``weak_label``) or ``(bag, y)`` pairs. A
    stratified validation split is carved out of it unless ``validation`` is
    given explicitly. The parameters of the epoch with the lowest validation
    loss are restored before returning ``(model, history)``.
    """
    config = config or TrainConfig()
    data = _labelled(dataset)
    if not data:
        raise ContractError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed)
    if validation is None:
        tr_idx, va_idx = stratified_split([y for _, y in data], config.validation_fraction, rng)
        train_data = [data[i] for i in tr_idx]
        val_data = [data[i] for i in va_idx]
    else:
        train_data, val_data = data, _labelled(validation)
        if not val_data:
            raise ContractError("validation set is empty")

    params = model.parameters()
    for layout, _ in train_data + val_data:
        layout.validate(model.levels, model.input_dim)
    model.zero_grad()

    history = History()
    best_state = model.get_state()
    history.best_val_loss = mean_loss(model, val_data)
    history.best_epoch = 0
    wait = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_data))
        total = 0.0
        for i in order:
            layout, y = train_data[i]
            with gc.Graph() as graph:
                p, _ = forward_tensor(model, layout)
                loss = gc.bce_loss(p, y)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergenceError(epoch, int(i), value)
            gc.backward(loss, graph)
            gc.sgd_step(params, config.learning_rate)
            total += value
        val = mean_loss(model, val_data)
        if not math.isfinite(val):
            raise TrainingDivergenceError(epoch, -1, val)
        record = {"epoch": epoch, "train_loss": total / len(train_data), "val_loss": val}
        history.epochs.append(record)
        if callback is not None:
            callback(record)
        logger.debug("epoch %d train %.5f val %.5f", epoch, record["train_loss"], val)
        if val < history.best_val_loss:
            history.best_val_loss = val
            history.best_epoch = epoch
            best_state = model.get_state()
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                history.stopped_early = True
                break
    model.set_state(best_state)
    return model, history


# --------------------------------------------------------------------- metrics


@dataclass
class Metrics:
    f1: float
    precision: float
    recall: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_counts(cls, tp, fp, tn, fn):
        tp, fp, tn, fn = int(tp), int(fp), int(tn), int(fn)
        n = tp + fp + tn + fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        accuracy = (tp + tn) / n if n else 0.0
        return cls(f1, precision, recall, accuracy, tp, fp, tn, fn)

    @classmethod
    def from_predictions(cls, y_true, y_pred):
        t = np.asarray(y_true, dtype=bool)
        p = np.asarray(y_pred, dtype=bool)
        return cls.from_counts((t & p).sum(), (~t & p).sum(), (~t & ~p).sum(), (t & ~p).sum())

    def to_dict(self):
        return asdict(self)


def predict_proba(model, samples):
    return np.array([forward(model, s)[0] for s in samples])


def evaluate(model, dataset, threshold=0.5) -> Metrics:
    data = _labelled(dataset)
    if not data:
        raise ContractError("cannot evaluate on an empty dataset")
    probs = np.array([forward_tensor(model, layout)[0].item() for layout, _ in data])
    return Metrics.from_predictions([y for _, y in data], probs >= threshold)


# ------------------------------------------------------------------- attention


@dataclass
class AttentionRecord:
    sample_id: int
    tree: AttentionTree
    latent: dict  # latent-label tree, as produced by NestedSample.latent_tree()
    weak_label: int
    probability: float

    def members_at(self, level):
        """[(weights, latent member dicts)] for each bag whose members sit at ``level``.

        Level 1 pairs instance weights with digits, level 2 pairs level-1 bag
        weights with those bags' latent records, and so on.
        """
        bags = _latent_bags(self.latent, level)
        return list(zip(self.tree.levels[level - 1], bags))


def _latent_bags(node, level):
    """Latent records of the bags at ``level`` (1 = innermost), depth-first."""
    depth = _depth(node)
    if depth == level:
        return [node]
    return [b for m in node["members"] for b in _latent_bags(m, level)]


def _depth(node):
    return 1 if "digits" in node else 1 + _depth(node["members"][0])


def extract_attention(model, samples) -> list:
    records = []
    for s in samples:
        p, tree = forward(model, s)
        records.append(AttentionRecord(s.sample_id, tree, s.latent_tree(), int(s.weak_label), p))
    return records


def rank_auc(scores, positive) -> float:
    """Mann-Whitney AUC; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    pos, neg = scores[positive], scores[~positive]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUCError("need at least one positive and one negative score")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def instance_is(digit):
    """Level-1 predicate: instance digit equals ``digit``."""
    return lambda bag, i: bag["digits"][i] == digit


def member_label_is(label):
    """Level >= 2 predicate: member bag's latent label equals ``label``."""
    return lambda bag, i: bag["members"][i]["y"] == label


def attention_localization_auc(records: Sequence[AttentionRecord], predicate, level=1, only_positive=True):
    """Mean within-bag AUC of attention weight as a score for latent positivity.

    ``predicate(bag, i)`` says whether member ``i`` of a latent bag record is
    positive. Only bags containing both kinds of member contribute; by default
    only samples with weak label 1 are scored.
    """
    if not records:
        raise UndefinedAUCError("no attention records")
    aucs = []
    for rec in records:
        if only_positive and rec.weak_label != 1:
            continue
        for weights, bag in rec.members_at(level):
            flags = [bool(predicate(bag, i)) for i in range(len(weights))]
            if any(flags) and not all(flags):
                aucs.append(rank_auc(weights, flags))
    if not aucs:
        raise UndefinedAUCError(f"no bag at level {level} has both positive and negative members")
    return float(np.mean(aucs))
