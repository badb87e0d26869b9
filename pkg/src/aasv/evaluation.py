"""Cosine trial scoring, equal error rate and report tables."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Trial
from .fusion import FusionMode, fuse_batch
from .store import EmbeddingStore


@dataclass
class ScoreSet:
    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self):
        self.target_scores = np.asarray(self.target_scores, dtype=np.float64).ravel()
        self.nontarget_scores = np.asarray(self.nontarget_scores, dtype=np.float64).ravel()

    def validate(self) -> None:
        if self.target_scores.size == 0 or self.nontarget_scores.size == 0:
            raise ValueError("EER needs at least one target and one nontarget score")
        if not (np.all(np.isfinite(self.target_scores)) and np.all(np.isfinite(self.nontarget_scores))):
            raise ValueError("scores must be finite")

    @classmethod
    def concat(cls, sets: Iterable["ScoreSet"]) -> "ScoreSet":
        sets = list(sets)
        return cls(np.concatenate([s.target_scores for s in sets]),
                   np.concatenate([s.nontarget_scores for s in sets]))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _crossing(thresholds: np.ndarray, frr: np.ndarray, far: np.ndarray) -> tuple[float, float]:
    """Interpolated point where FAR - FRR changes sign along increasing thresholds."""
    diff = far - frr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0 or k == 0:
        return float(far[k]), float(thresholds[k])
    d0, d1 = diff[k - 1], diff[k]
    lam = d0 / (d0 - d1)
    value = frr[k - 1] + lam * (frr[k] - frr[k - 1])
    thr = thresholds[k - 1] + lam * (thresholds[k] - thresholds[k - 1])
    return float(value), float(thr)


def eer(scores: ScoreSet) -> tuple[float, float]:
    """(EER as a fraction, threshold).  A trial is accepted when score >= threshold."""
    scores.validate()
    tar = np.sort(scores.target_scores)
    non = np.sort(scores.nontarget_scores)
    uniq = np.unique(np.concatenate([tar, non]))
    span = max(1.0, float(uniq[-1] - uniq[0]))
    thresholds = np.concatenate([[uniq[0] - span], (uniq[:-1] + uniq[1:]) / 2, [uniq[-1] + span]])
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return _crossing(thresholds, frr, far)


def eer_bruteforce(scores: ScoreSet, eps: float | None = None) -> float:
    """Exhaustive O(n^2) EER: counts errors at every distinct score +/- eps."""
    scores.validate()
    tar, non = scores.target_scores, scores.nontarget_scores
    uniq = np.unique(np.concatenate([tar, non]))
    if eps is None:
        gaps = np.diff(uniq)
        eps = float(gaps.min()) / 4 if gaps.size else 0.5
    cands = np.unique(np.concatenate([uniq - eps, uniq + eps]))
    # exhaustive counts: every threshold against every score
    frr = (tar[None, :] < cands[:, None]).sum(axis=1) / tar.size
    far = (non[None, :] >= cands[:, None]).sum(axis=1) / non.size
    diff = far - frr
    for k in range(cands.size):
        if diff[k] <= 0:
            if diff[k] == 0 or k == 0:
                return float(far[k])
            lam = diff[k - 1] / (diff[k - 1] - diff[k])
            return float(frr[k - 1] + lam * (frr[k] - frr[k - 1]))
    raise AssertionError("FAR - FRR never reached zero")


# ---------------------------------------------------------------------------
# trial scoring
# ---------------------------------------------------------------------------


def mode_matrix(store: EmbeddingStore, mode: FusionMode | str, classifier=None) -> np.ndarray:
    """Per-utterance vectors that ``mode`` scores, in ``store.ids`` order."""
    mode = FusionMode(mode)
    if mode is FusionMode.ADULT_ONLY:
        if store.e_a is None:
            raise ValueError("adult-only scoring needs adult-encoder embeddings")
        return np.asarray(store.e_a, dtype=np.float64)
    if mode is FusionMode.CHILD_ONLY:
        if store.e_c is None:
            raise ValueError("child-only scoring needs child-encoder embeddings")
        return np.asarray(store.e_c, dtype=np.float64)
    if store.e_a is None or store.e_c is None:
        raise ValueError(f"{mode.value} scoring needs both specialist embeddings")
    if mode is FusionMode.PLAIN_CONCAT:
        return fuse_batch(store.e_c, store.e_a, None)
    p = store.p
    if p is None:
        if classifier is None:
            raise ValueError("aasv scoring needs posteriors or a domain classifier")
        # posteriors always come from the adult-encoder embedding
        p = classifier.posteriors(store.e_a)
    return fuse_batch(store.e_c, store.e_a, p)


def score_matrix(trials: Sequence[Trial], ids: Sequence[str], matrix: np.ndarray) -> ScoreSet:
    """Cosine-score every trial against rows of ``matrix`` (row i belongs to ids[i])."""
    if len(trials) == 0:
        raise ValueError("empty trial list")
    idx = {u: i for i, u in enumerate(ids)}
    missing = sorted({u for t in trials for u in (t.enroll_id, t.test_id) if u not in idx})
    if missing:
        raise KeyError(f"trial ids missing from the embedding store: {', '.join(missing[:5])}")
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    enroll = np.array([idx[t.enroll_id] for t in trials])
    test = np.array([idx[t.test_id] for t in trials])
    if np.any(norms[enroll] == 0) or np.any(norms[test] == 0):
        raise ValueError("zero-norm embedding in a trial")
    unit = m / np.where(norms == 0, 1.0, norms)[:, None]
    scores = np.clip(np.einsum("ij,ij->i", unit[enroll], unit[test]), -1.0, 1.0)
    labels = np.array([t.label for t in trials])
    return ScoreSet(scores[labels == 1], scores[labels == 0])


def score_trials(trials: Sequence[Trial], store: EmbeddingStore, mode: FusionMode | str,
                 classifier=None) -> ScoreSet:
    return score_matrix(trials, store.ids, mode_matrix(store, mode, classifier))


# ---------------------------------------------------------------------------
# score files
# ---------------------------------------------------------------------------


def format_scores(trials: Sequence[Trial], scores: ScoreSet) -> str:
    """``label score`` lines in trial order (targets and nontargets interleaved as listed)."""
    tar, non = iter(scores.target_scores), iter(scores.nontarget_scores)
    return "".join(f"{t.label} {next(tar) if t.label == 1 else next(non):.8f}\n" for t in trials)


def write_scores(path: str | Path, trials: Sequence[Trial], scores: ScoreSet) -> None:
    Path(path).write_text(format_scores(trials, scores), encoding="utf-8")


def read_scores(path: str | Path) -> ScoreSet:
    tar, non = [], []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in ("0", "1"):
            raise ValueError(f"{path}:{n}: expected 'label score'")
        (tar if parts[0] == "1" else non).append(float(parts[1]))
    return ScoreSet(np.array(tar), np.array(non))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    systems: list[str]
    test_sets: list[str]
    cells: dict[tuple[str, str], float | None]
    metadata: dict = field(default_factory=dict)

    @property
    def rows(self) -> list[tuple[str, str, float | None]]:
        return [(s, t, self.cells.get((s, t))) for s in self.systems for t in self.test_sets]

    def get(self, system: str, test_set: str) -> float | None:
        return self.cells.get((system, test_set))

    def _grid(self) -> list[list[str]]:
        out = [["system"] + list(self.test_sets)]
        for s in self.systems:
            row = [s]
            for t in self.test_sets:
                v = self.cells.get((s, t))
                row.append("-" if v is None else f"{v:.2f}")
            out.append(row)
        return out

    def to_tsv(self) -> str:
        return "".join("\t".join(r) + "\n" for r in self._grid())

    def to_text(self) -> str:
        grid = self._grid()
        widths = [max(len(r[j]) for r in grid) for j in range(len(grid[0]))]
        lines = []
        for i, r in enumerate(grid):
            cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
            if i == 0:
                lines.append("-" * len(lines[0]))
        return "EER (%)\n" + "\n".join(lines) + "\n"


def build_report(cells: Mapping[tuple[str, str], ScoreSet | float | None], systems: Sequence[str],
                 test_sets: Sequence[str], metadata: Mapping | None = None) -> EvalReport:
    """Grid of EER percentages; absent or ``None`` cells render as "-".

    Cells may hold a ScoreSet (its EER is computed) or an EER already in percent.
    """
    out: dict[tuple[str, str], float | None] = {}
    for s in systems:
        for t in test_sets:
            v = cells.get((s, t))
            if isinstance(v, ScoreSet):
                v = 100.0 * eer(v)[0]
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"EER {v} for {s}/{t} outside [0, 100]")
            out[(s, t)] = None if v is None else float(v)
    return EvalReport(list(systems), list(test_sets), out, dict(metadata or {}))
