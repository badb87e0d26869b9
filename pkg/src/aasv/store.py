"""Embedding files and the in-memory store used for trial scoring.

An embedding file uses the checkpoint container with magic ``AASVEMBD``:
the JSON header carries ``ids`` (row order), ``dim`` and free-form
metadata, and the single tensor ``embeddings`` has shape (count, dim).
Fused embeddings add a JSON-lines provenance sidecar next to the file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint

EMB_MAGIC = b"AASVEMBD"
SIDECAR_SUFFIX = ".provenance.jsonl"


@dataclass
class EmbeddingTable:
    ids: list[str]
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise ValueError(f"{len(self.ids)} ids but embedding matrix has shape {self.values.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate utterance ids")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.ids)}

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        idx = self.index()
        missing = [u for u in ids if u not in idx]
        if missing:
            raise KeyError(f"unknown utterance id(s): {', '.join(missing[:5])}")
        return self.values[[idx[u] for u in ids]]


def write_embeddings(path: str | Path, table: EmbeddingTable) -> None:
    header = {"kind": "embeddings", "ids": list(table.ids), "dim": table.dim, "meta": table.meta}
    Path(path).write_bytes(checkpoint.dumps(header, {"embeddings": table.values}, magic=EMB_MAGIC))


def read_embeddings(path: str | Path) -> EmbeddingTable:
    header, tensors = checkpoint.loads(Path(path).read_bytes(), magic=EMB_MAGIC)
    values = tensors["embeddings"]
    if values.shape != (len(header["ids"]), header["dim"]):
        raise ValueError(f"{path}: header and tensor shape disagree")
    return EmbeddingTable(list(header["ids"]), values, header.get("meta", {}))


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + SIDECAR_SUFFIX)


def write_provenance(path: str | Path, ids: Sequence[str], posteriors: np.ndarray) -> None:
    """JSON lines of (utterance_id, p_c, p_a) for a fused embedding file."""
    lines = [json.dumps({"utterance_id": u, "p_c": float(p[0]), "p_a": float(p[1])}, sort_keys=True)
             for u, p in zip(ids, np.asarray(posteriors, dtype=np.float64))]
    sidecar_path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_provenance(path: str | Path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    for line in sidecar_path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            ids.append(rec["utterance_id"])
            rows.append((rec["p_c"], rec["p_a"]))
    return ids, np.array(rows, dtype=np.float64).reshape(-1, 2)


@dataclass
class EmbeddingStore:
    """Per-utterance specialist embeddings and (optionally) domain posteriors.

    All arrays share the row order of ``ids``.
    """

    ids: list[str]
    e_c: np.ndarray | None = None
    e_a: np.ndarray | None = None
    p: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.ids)
        for name in ("e_c", "e_a", "p"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows for {n} ids")
        if self.e_c is not None and self.e_a is not None and self.e_c.shape != self.e_a.shape:
            raise ValueError(f"embedding dims differ: {self.e_c.shape} vs {self.e_a.shape}")

    @classmethod
    def from_tables(cls, child: EmbeddingTable | None, adult: EmbeddingTable | None,
                    posteriors: Mapping[str, tuple[float, float]] | None = None) -> "EmbeddingStore":
        base = adult if adult is not None else child
        if base is None:
            raise ValueError("need at least one embedding table")
        ids = list(base.ids)
        e_c = child.rows(ids) if child is not None else None
        e_a = adult.rows(ids) if adult is not None else None
        p = None
        if posteriors is not None:
            p = np.array([posteriors[u] for u in ids], dtype=np.float64)
        return cls(ids, e_c, e_a, p)
