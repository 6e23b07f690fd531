"""Cosine similarity matrices, stable Top-k and Recall@K."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

I2T = "I2T"
T2I = "T2I"
DEFAULT_KS = (1, 5, 10)


@dataclass
class SimilarityMatrix:
    scores: np.ndarray
    query_ids: list = field(default_factory=list)
    entry_ids: list = field(default_factory=list)

    def __post_init__(self):
        nq, ne = self.scores.shape
        if not self.query_ids:
            self.query_ids = list(range(nq))
        if not self.entry_ids:
            self.entry_ids = list(range(ne))
        if len(self.query_ids) != nq or len(self.entry_ids) != ne:
            raise ValueError("id lists do not match score matrix dimensions")
        if not np.isfinite(self.scores).all():
            raise ValueError("similarity matrix contains non-finite values")


@dataclass
class RetrievalReport:
    direction: str
    recall: dict[int, float]
    n_queries: int
    n_entries: int


def similarity_matrix(queries, entries, query_ids: Sequence | None = None,
                      entry_ids: Sequence | None = None) -> SimilarityMatrix:
    q = np.asarray(queries, dtype=np.float64)
    e = np.asarray(entries, dtype=np.float64)
    if q.ndim != 2 or e.ndim != 2 or len(q) == 0 or len(e) == 0:
        raise ValueError("queries and entries must be non-empty 2-D arrays")
    if q.shape[1] != e.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape[1]} vs {e.shape[1]}")
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    e = e / np.linalg.norm(e, axis=1, keepdims=True)
    return SimilarityMatrix(q @ e.T, list(query_ids or []), list(entry_ids or []))


def topk(row: Sequence[float], k: int) -> list[int]:
    """Indices of the k largest values, descending, ties to the lower index."""
    row = np.asarray(row)
    if not 1 <= k <= len(row):
        raise ValueError(f"k={k} out of range for a row of length {len(row)}")
    return np.argsort(-row, kind="stable")[:k].tolist()


def ranks(scores: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """0-based rank of each query's ground-truth entry under the stable Top-k order."""
    target = scores[np.arange(len(scores)), gt][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    better = (scores > target) | ((scores == target) & (cols < gt[:, None]))
    return better.sum(axis=1)


def recall_at_k(m: SimilarityMatrix, ground_truth: Mapping, ks: Sequence[int] = DEFAULT_KS,
                direction: str = I2T) -> RetrievalReport:
    """``ground_truth`` maps query id -> entry id; each query needs exactly one present match."""
    pos = {e: j for j, e in enumerate(m.entry_ids)}
    gt = np.empty(len(m.query_ids), dtype=np.int64)
    for i, q in enumerate(m.query_ids):
        if q not in ground_truth or ground_truth[q] not in pos:
            raise KeyError(f"query {q!r} has no ground-truth entry among the candidates")
        gt[i] = pos[ground_truth[q]]
    r = ranks(m.scores, gt)
    n = len(gt)
    recall = {}
    for k in ks:
        if not 1 <= k:
            raise ValueError(f"K must be >= 1, got {k}")
        recall[int(k)] = float((r < k).sum()) / n
    return RetrievalReport(direction, recall, n, m.scores.shape[1])


def evaluate_pairs(image_embs, text_embs, ks: Sequence[int] = DEFAULT_KS) -> dict[str, RetrievalReport]:
    """I2T and T2I reports for aligned (image_i, text_i) pairs."""
    ids = list(range(len(image_embs)))
    gt = {i: i for i in ids}
    i2t = similarity_matrix(image_embs, text_embs, ids, ids)
    t2i = SimilarityMatrix(i2t.scores.T.copy(), ids, ids)
    return {I2T: recall_at_k(i2t, gt, ks, I2T), T2I: recall_at_k(t2i, gt, ks, T2I)}


def write_report_csv(path, reports: Sequence[RetrievalReport], header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        w = csv.writer(f)
        w.writerow(["direction", "K", "recall", "n_queries", "n_entries"])
        for rep in reports:
            for k, v in rep.recall.items():
                w.writerow([rep.direction, k, f"{v:.6f}", rep.n_queries, rep.n_entries])
