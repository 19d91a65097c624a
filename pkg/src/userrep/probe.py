"""Frozen-representation probe: a one-hidden-layer MLP plus AUC/ACC metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .optim import Adam


@dataclass
class ProbeConfig:
    hidden: int = 64
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 5
    train_fraction: float = 0.8
    standardize: bool = True
    seed: int = 0


@dataclass
class ProbeTask:
    name: str
    labels: dict[str, int]
    num_classes: int = 0

    def __post_init__(self):
        if not self.num_classes:
            self.num_classes = max(self.labels.values()) + 1 if self.labels else 0
        if self.num_classes < 2:
            raise ValueError(f"task {self.name!r} needs >= 2 classes")

    def split(self, seed: int, train_fraction: float = 0.8) -> tuple[list[str], list[str]]:
        """Seeded shuffle of the labeled users into disjoint train/validation lists."""
        users = sorted(self.labels)
        order = np.random.default_rng(seed).permutation(len(users))
        cut = int(round(train_fraction * len(users)))
        return [users[i] for i in order[:cut]], [users[i] for i in order[cut:]]


def read_labels(path, name: str | None = None) -> ProbeTask:
    """Label file: one ``user_id,class_index`` per line (optional header)."""
    labels = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            try:
                labels[row[0].strip()] = int(row[1])
            except (IndexError, ValueError):
                if not labels:  # header line
                    continue
                raise ValueError(f"{path}: malformed label row {row!r}")
    return ProbeTask(name or str(path), labels)


def write_labels(path, labels: Mapping[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for uid in sorted(labels):
            w.writerow([uid, labels[uid]])


# --- metrics ---------------------------------------------------------------

def auc_binary(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_scores(probs: np.ndarray, labels: np.ndarray, num_classes: int) -> dict:
    """AUC (binary, or unweighted one-vs-rest mean) and argmax accuracy."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    acc = float(np.mean(np.argmax(probs, axis=1) == labels))
    skipped: list[int] = []
    if num_classes == 2:
        try:
            auc = auc_binary(probs[:, 1], labels == 1)
        except ValueError:
            auc, skipped = math.nan, [0, 1]
    else:
        per_class = []
        for c in range(num_classes):
            pos = labels == c
            if pos.all() or not pos.any():
                skipped.append(c)
                continue
            per_class.append(auc_binary(probs[:, c], pos))
        auc = float(np.mean(per_class)) if per_class else math.nan
    return {"auc": auc, "acc": acc, "skipped_classes": skipped}


# --- MLP -------------------------------------------------------------------

class ProbeModel:
    def __init__(self, n_in: int, n_classes: int, hidden: int, rng: np.random.Generator):
        b1, b2 = 1.0 / math.sqrt(n_in), 1.0 / math.sqrt(hidden)
        self.W1 = Tensor(rng.uniform(-b1, b1, (n_in, hidden)), True, "W1")
        self.b1 = Tensor(np.zeros(hidden), True, "b1")
        self.W2 = Tensor(rng.uniform(-b2, b2, (hidden, n_classes)), True, "W2")
        self.b2 = Tensor(np.zeros(n_classes), True, "b2")
        self.mean = np.zeros(n_in)
        self.scale = np.ones(n_in)

    def parameters(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def _probs(self, x: np.ndarray) -> Tensor:
        x = Tensor((x - self.mean) / self.scale)
        h = ad.relu(x @ self.W1 + self.b1)
        return ad.softmax(h @ self.W2 + self.b2, axis=1)

    def loss(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        p = self._probs(x)
        return -ad.mean(ad.log(p[np.arange(len(y)), y]))

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self._probs(np.asarray(x, dtype=np.float64)).data


@dataclass
class ProbeResult:
    model: ProbeModel
    epochs: int
    val_losses: list[float] = field(default_factory=list)


def train_probe(x_train: np.ndarray, y_train: np.ndarray, x_val: np.ndarray, y_val: np.ndarray,
                num_classes: int, config: ProbeConfig) -> ProbeResult:
    """Adam-trained MLP with early stopping on validation loss (best weights kept)."""
    x_train = np.asarray(x_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    if np.unique(y_train).size < 2:
        raise ValueError("training split contains a single class")
    rng = np.random.default_rng(config.seed)
    model = ProbeModel(x_train.shape[1], num_classes, config.hidden, rng)
    if config.standardize:
        model.mean = x_train.mean(axis=0)
        sd = x_train.std(axis=0)
        model.scale = np.where(sd > 1e-12, sd, 1.0)
    opt = Adam(model.parameters(), lr=config.lr)
    best = math.inf
    best_state = [p.data.copy() for p in model.parameters()]
    stale = 0
    history = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(y_train))
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                tape.backward(model.loss(x_train[idx], y_train[idx]))
            opt.step()
        val = model.loss(x_val, y_val).item()
        history.append(val)
        if val < best - 1e-12:
            best, stale = val, 0
            best_state = [p.data.copy() for p in model.parameters()]
        else:
            stale += 1
            if stale >= config.patience:
                break
    for p, s in zip(model.parameters(), best_state):
        p.data = s
    return ProbeResult(model, epoch, history)


def evaluate(model: ProbeModel, x: np.ndarray, y: np.ndarray, num_classes: int) -> dict:
    return evaluate_scores(model.predict_proba(x), y, num_classes)


def run_probe(features: Mapping[str, np.ndarray], task: ProbeTask, config: ProbeConfig) -> dict:
    """Split, train and evaluate; returns a metrics row."""
    missing = [u for u in task.labels if u not in features]
    if missing:
        raise ValueError(f"{len(missing)} labeled users lack a representation, e.g. {missing[0]!r}")
    train, val = task.split(config.seed, config.train_fraction)
    if not val:
        raise ValueError("validation split is empty")
    xt = np.stack([features[u] for u in train])
    yt = np.array([task.labels[u] for u in train])
    xv = np.stack([features[u] for u in val])
    yv = np.array([task.labels[u] for u in val])
    result = train_probe(xt, yt, xv, yv, task.num_classes, config)
    metrics = evaluate(result.model, xv, yv, task.num_classes)
    metrics.update({"task": task.name, "n_train": len(train), "n_val": len(val),
                    "seed": config.seed, "epochs": result.epochs})
    return metrics


METRIC_FIELDS = ("task", "representation_tag", "auc", "acc", "n_train", "n_val", "seed")


def write_metrics(rows: Sequence[Mapping], csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in METRIC_FIELDS})
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(list(rows), fh, indent=1, sort_keys=True)
