"""Child/adult domain classifier over fixed-length speaker embeddings.

Class index 0 is the child domain and index 1 the adult domain, so the
softmax output reads directly as ``p = [p_c, p_a]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .nn import Adam, CyclicLrSchedule, Dense, ReLU, Sequential, batch_cross_entropy, lr_at, softmax

CHILD, ADULT = 0, 1


@dataclass(frozen=True)
class DomainPosterior:
    p_c: float
    p_a: float

    def validate(self) -> None:
        if not (0.0 <= self.p_c <= 1.0 and 0.0 <= self.p_a <= 1.0):
            raise ValueError(f"posterior components must lie in [0, 1]: {self}")
        if abs(self.p_c + self.p_a - 1.0) > 1e-6:
            raise ValueError(f"posterior does not sum to 1: {self}")

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "DomainPosterior":
        p = softmax(np.asarray(logits, dtype=np.float64))
        return cls(float(p[CHILD]), float(p[ADULT]))


@dataclass
class DomainTrainConfig:
    hidden: int = 32
    epochs: int = 20
    batch_size: int = 32
    max_lr: float = 1e-3
    base_lr: float = 1e-8
    weight_decay: float = 2e-6
    eval_fraction: float = 0.2
    seed: int = 0


class DomainClassifier:
    """Two-layer perceptron d -> hidden -> 2 on L2-normalised embeddings."""

    def __init__(self, dim: int, hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim, self.hidden, self.seed = dim, hidden, seed
        self.net = Sequential({"fc1": Dense(dim, hidden, rng), "relu": ReLU(), "fc2": Dense(hidden, 2, rng)})

    @staticmethod
    def _prep(e: np.ndarray) -> np.ndarray:
        e = np.asarray(e, dtype=np.float32)
        norm = np.linalg.norm(e, axis=-1, keepdims=True)
        if np.any(norm == 0):
            raise ValueError("zero-norm embedding")
        return e / norm

    def logits(self, embeddings: np.ndarray, train: bool = False) -> np.ndarray:
        e = self._prep(embeddings)
        if e.ndim != 2 or e.shape[1] != self.dim:
            raise ValueError(f"expected embeddings of dim {self.dim}, got {e.shape}")
        return self.net.forward(e, train)

    def posteriors(self, embeddings: np.ndarray) -> np.ndarray:
        """(n, 2) array of [p_c, p_a] rows."""
        return softmax(self.logits(embeddings).astype(np.float64), axis=1)

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        return np.argmax(self.posteriors(embeddings), axis=1)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.net.named_parameters().items()}

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        header = {"kind": "domain-classifier",
                  "architecture": {"type": "mlp", "dim": self.dim, "hidden": self.hidden},
                  "seed": self.seed}
        header.update(extra or {})
        checkpoint.save(path, header, self.state())

    @classmethod
    def load(cls, path: str | Path) -> tuple["DomainClassifier", dict]:
        header, tensors = checkpoint.load(path)
        if header.get("kind") != "domain-classifier":
            raise ValueError(f"{path}: not a domain-classifier checkpoint")
        arch = header["architecture"]
        clf = cls(arch["dim"], arch["hidden"], header["seed"])
        params = clf.net.named_parameters()
        if set(params) != set(tensors):
            raise ValueError(f"{path}: tensors do not match architecture")
        for k, v in tensors.items():
            if params[k].value.shape != v.shape:
                raise ValueError(f"{path}: shape mismatch for {k}")
            params[k].value = v.copy()
        return clf, header


def classify(embedding: np.ndarray, clf: DomainClassifier) -> DomainPosterior:
    e = np.asarray(embedding)
    if e.ndim != 1 or e.shape[0] != clf.dim:
        raise ValueError(f"embedding dim {e.shape} does not match classifier input {clf.dim}")
    return DomainPosterior.from_logits(clf.logits(e[None])[0])


def f1_score(predictions: Sequence[int], labels: Sequence[int], positive_class: int = CHILD) -> float:
    pred = np.asarray(predictions) == positive_class
    true = np.asarray(labels) == positive_class
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def balanced_accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    accs = [np.mean(predictions[labels == c] == c) for c in (CHILD, ADULT) if np.any(labels == c)]
    return float(np.mean(accs))


@dataclass
class DomainReport:
    accuracy: float
    balanced_accuracy: float
    f1: float
    child_accuracy: float
    adult_accuracy: float
    n_train: int
    n_eval: int
    loss: list[float] = field(default_factory=list)


def stratified_split(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Indices (train, eval) with ``fraction`` of each class held out."""
    train, held = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        held.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def fit(clf: DomainClassifier, x: np.ndarray, y: np.ndarray, cfg: DomainTrainConfig,
        rng: np.random.Generator) -> list[float]:
    """Cross-entropy training with Adam and a single triangular LR cycle."""
    params = clf.net.named_parameters()
    opt = Adam(params, weight_decay=cfg.weight_decay)
    n = x.shape[0]
    total = max(1, -(-n // cfg.batch_size) * cfg.epochs)
    schedule = CyclicLrSchedule(cfg.base_lr, cfg.max_lr, total)
    losses, step = [], 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            opt.zero_grad()
            logits = clf.logits(x[idx], train=True)
            loss, dlogits = batch_cross_entropy(logits, y[idx])
            clf.net.backward(dlogits.astype(np.float32))
            opt.step(lr_at(schedule, step))
            step += 1
            losses.append(loss)
    return losses


def evaluate(clf: DomainClassifier, x: np.ndarray, y: np.ndarray) -> tuple[float, float, float, float, float]:
    pred = clf.predict(x)
    acc = float(np.mean(pred == y))
    child_acc = float(np.mean(pred[y == CHILD] == CHILD)) if np.any(y == CHILD) else float("nan")
    adult_acc = float(np.mean(pred[y == ADULT] == ADULT)) if np.any(y == ADULT) else float("nan")
    return acc, balanced_accuracy(pred, y), f1_score(pred, y, CHILD), child_acc, adult_acc


def train_domain_classifier(embeddings: np.ndarray, labels: np.ndarray, cfg: DomainTrainConfig,
                            augmented: np.ndarray | None = None) -> tuple[DomainClassifier, DomainReport]:
    """Train on a stratified split; report held-out accuracy and child-positive F1.

    ``augmented`` optionally holds extra views, shape (k, n, d), of the same
    utterances; they join the training side only.
    """
    labels = np.asarray(labels, dtype=np.int64)
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if len(np.unique(labels)) < 2:
        raise ValueError("domain classifier needs both child and adult examples")
    rng = np.random.default_rng([cfg.seed, 7])
    tr, ev = stratified_split(labels, cfg.eval_fraction, rng)
    x_tr, y_tr = embeddings[tr], labels[tr]
    if augmented is not None:
        views = [np.asarray(a, dtype=np.float32)[tr] for a in augmented]
        x_tr = np.concatenate([x_tr] + views)
        y_tr = np.concatenate([y_tr] * (1 + len(views)))
    clf = DomainClassifier(embeddings.shape[1], cfg.hidden, cfg.seed)
    losses = fit(clf, x_tr, y_tr, cfg, rng)
    x_ev, y_ev = (embeddings[ev], labels[ev]) if ev.size else (x_tr, y_tr)
    acc, bacc, f1, cacc, aacc = evaluate(clf, x_ev, y_ev)
    return clf, DomainReport(acc, bacc, f1, cacc, aacc, int(x_tr.shape[0]), int(x_ev.shape[0]), losses)


# ---------------------------------------------------------------------------
# data-ratio experiment
# ---------------------------------------------------------------------------


@dataclass
class RatioConfig:
    pairs: list[tuple[int, int]] = field(default_factory=lambda: [(120, 120), (240, 120), (360, 120), (600, 120)])
    seed: int = 0

    def __post_init__(self):
        if not self.pairs or any(a < 1 or c < 1 for a, c in self.pairs):
            raise ValueError("ratio pairs need counts >= 1")


@dataclass
class RatioRow:
    ratio: str
    adult_utts: int
    child_utts: int
    adult_acc: float
    child_acc: float


def _ratio_label(adult: int, child: int) -> str:
    if adult % child == 0:
        return f"{adult // child}:1"
    return f"{adult}:{child}"


def ratio_harness(cfg: RatioConfig, adult_pool: np.ndarray, child_pool: np.ndarray, adult_test: np.ndarray,
                  child_test: np.ndarray, train_cfg: DomainTrainConfig, shuffle: bool = True) -> list[RatioRow]:
    """One classifier per (adult, child) count pair, scored on fixed per-domain test sets.

    Each pair trains on the first ``a`` adult and ``c`` child pool rows (after a
    seeded shuffle unless ``shuffle`` is False), so larger pools extend smaller ones.
    """
    need_a = max(a for a, _ in cfg.pairs)
    need_c = max(c for _, c in cfg.pairs)
    if need_a > len(adult_pool) or need_c > len(child_pool):
        raise ValueError(f"corpus too small: need {need_a} adult / {need_c} child embeddings, "
                         f"have {len(adult_pool)} / {len(child_pool)}")
    rng = np.random.default_rng([cfg.seed, 11])
    adult_order = rng.permutation(len(adult_pool)) if shuffle else np.arange(len(adult_pool))
    child_order = rng.permutation(len(child_pool)) if shuffle else np.arange(len(child_pool))
    rows = []
    for a, c in cfg.pairs:
        x = np.concatenate([child_pool[child_order[:c]], adult_pool[adult_order[:a]]])
        y = np.concatenate([np.full(c, CHILD), np.full(a, ADULT)])
        clf = DomainClassifier(x.shape[1], train_cfg.hidden, train_cfg.seed)
        fit(clf, x.astype(np.float32), y, train_cfg, np.random.default_rng([train_cfg.seed, a, c]))
        adult_acc = float(np.mean(clf.predict(adult_test) == ADULT))
        child_acc = float(np.mean(clf.predict(child_test) == CHILD))
        rows.append(RatioRow(_ratio_label(a, c), a, c, adult_acc, child_acc))
    return rows


def ratio_table_tsv(rows: Sequence[RatioRow]) -> str:
    lines = ["ratio\tadult_utts\tchild_utts\tadult_acc\tchild_acc"]
    lines += [f"{r.ratio}\t{r.adult_utts}\t{r.child_utts}\t{r.adult_acc:.4f}\t{r.child_acc:.4f}" for r in rows]
    return "\n".join(lines) + "\n"
