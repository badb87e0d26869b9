"""Domain-posterior-weighted embedding fusion into the expanded 2d space."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .domain import DomainPosterior


class FusionMode(str, enum.Enum):
    AASV = "aasv"
    PLAIN_CONCAT = "plain-concat"
    CHILD_ONLY = "child-only"
    ADULT_ONLY = "adult-only"


@dataclass(frozen=True)
class FusedEmbedding:
    values: np.ndarray
    utterance_id: str = ""
    p: tuple[float, float] | None = None

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("cannot normalise a zero vector")
    return v / n


def _check_pair(e_c: np.ndarray, e_a: np.ndarray) -> None:
    if e_c.ndim != 1 or e_c.shape != e_a.shape:
        raise ValueError(f"embedding dims differ: {e_c.shape} vs {e_a.shape}")


def fuse(e_c: np.ndarray, e_a: np.ndarray, p: DomainPosterior, utterance_id: str = "") -> FusedEmbedding:
    """[p_c * e_c ; p_a * e_a] on unit-normalised inputs."""
    e_c, e_a = np.asarray(e_c), np.asarray(e_a)
    _check_pair(e_c, e_a)
    p.validate()
    values = np.concatenate([p.p_c * l2_normalize(e_c), p.p_a * l2_normalize(e_a)])
    return FusedEmbedding(values, utterance_id, (p.p_c, p.p_a))


def plain_concat(e_c: np.ndarray, e_a: np.ndarray, utterance_id: str = "") -> FusedEmbedding:
    """The no-classifier ablation: unweighted [e_c ; e_a] of unit vectors."""
    e_c, e_a = np.asarray(e_c), np.asarray(e_a)
    _check_pair(e_c, e_a)
    return FusedEmbedding(np.concatenate([l2_normalize(e_c), l2_normalize(e_a)]), utterance_id, None)


def fused_cosine(f1: FusedEmbedding, f2: FusedEmbedding) -> float:
    if f1.values.shape != f2.values.shape:
        raise ValueError("fused embeddings differ in dimension")
    n1, n2 = np.linalg.norm(f1.values), np.linalg.norm(f2.values)
    if n1 == 0 or n2 == 0:
        raise ValueError("zero-norm fused embedding")
    return float(np.clip(f1.values @ f2.values / (n1 * n2), -1.0, 1.0))


def fuse_batch(e_c: np.ndarray, e_a: np.ndarray, p: np.ndarray | None) -> np.ndarray:
    """Row-wise fusion of (n, d) embedding arrays with (n, 2) posteriors; ``p=None`` concatenates."""
    ec = e_c / np.linalg.norm(e_c, axis=1, keepdims=True)
    ea = e_a / np.linalg.norm(e_a, axis=1, keepdims=True)
    if p is None:
        return np.concatenate([ec, ea], axis=1)
    p = np.asarray(p, dtype=np.float64)
    return np.concatenate([p[:, :1] * ec, p[:, 1:2] * ea], axis=1)
