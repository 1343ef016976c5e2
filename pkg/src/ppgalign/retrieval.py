"""PPG-to-ECG retrieval metrics with one relevant item (the diagonal) per query."""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

METRICS = ("r_at_1", "r_at_5", "r_at_10", "map_at_10", "mrr")
DEFAULT_BATCH = 2560


class AggregateMode(enum.Enum):
    WEIGHTED = "weighted"
    MACRO = "macro"


@dataclass(frozen=True)
class RetrievalReport:
    r_at_1: float
    r_at_5: float
    r_at_10: float
    map_at_10: float
    mrr: float
    n_samples: int
    batch_count: int = 1

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def format(self) -> str:
        return (
            f"n={self.n_samples} batches={self.batch_count} "
            f"R@1={self.r_at_1:.3f} R@5={self.r_at_5:.3f} R@10={self.r_at_10:.3f} "
            f"mAP@10={self.map_at_10:.3f} MRR={self.mrr:.3f}"
        )


def true_match_ranks(sim) -> np.ndarray:
    """1-based rank of column i in row i; tied competitors count as ranked above."""
    sim = np.asarray(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got shape {sim.shape}")
    diag = np.diagonal(sim)[:, None]
    ahead = (sim >= diag).sum(axis=1) - 1  # the diagonal itself always satisfies >=
    return ahead + 1


def retrieval_metrics(sim) -> RetrievalReport:
    ranks = true_match_ranks(sim)
    if ranks.size == 0:
        raise ValueError("empty similarity matrix")
    inv = 1.0 / ranks
    return RetrievalReport(
        r_at_1=float(np.mean(ranks <= 1)),
        r_at_5=float(np.mean(ranks <= 5)),
        r_at_10=float(np.mean(ranks <= 10)),
        map_at_10=float(np.mean(np.where(ranks <= 10, inv, 0.0))),
        mrr=float(np.mean(inv)),
        n_samples=int(ranks.size),
    )


def aggregate_metrics(
    reports: Sequence[tuple[RetrievalReport, int]] | Sequence[RetrievalReport],
    mode: AggregateMode | str = AggregateMode.WEIGHTED,
) -> RetrievalReport:
    """Combine per-batch (or per-dataset) reports by sample-weighted or plain mean."""
    mode = AggregateMode(mode)
    items = [r if isinstance(r, tuple) else (r, r.n_samples) for r in reports]
    if not items:
        raise ValueError("no reports to aggregate")
    counts = np.array([n for _, n in items], dtype=np.float64)
    if mode is AggregateMode.WEIGHTED:
        if (counts <= 0).any():
            raise ValueError("weighted aggregation needs positive sample counts")
        weights = counts / counts.sum()
    else:
        weights = np.full(len(items), 1.0 / len(items))
    values = {
        m: float(sum(w * getattr(r, m) for w, (r, _) in zip(weights, items))) for m in METRICS
    }
    return RetrievalReport(
        **values,
        n_samples=int(counts.sum()),
        batch_count=sum(r.batch_count for r, _ in items),
    )


def batched_reports(ppg_emb: np.ndarray, ecg_emb: np.ndarray, batch_size: int = DEFAULT_BATCH) -> list[RetrievalReport]:
    """Split aligned unit-norm embeddings into consecutive batches; the last may be partial."""
    ppg_emb, ecg_emb = np.asarray(ppg_emb), np.asarray(ecg_emb)
    if ppg_emb.shape != ecg_emb.shape:
        raise ValueError(f"embedding shapes differ: {ppg_emb.shape} vs {ecg_emb.shape}")
    out = []
    for s in range(0, len(ppg_emb), batch_size):
        p, e = ppg_emb[s:s + batch_size], ecg_emb[s:s + batch_size]
        out.append(retrieval_metrics(p @ e.T))
    return out


def evaluate_embeddings(ppg_emb, ecg_emb, batch_size: int = DEFAULT_BATCH):
    """Per-batch reports plus both aggregates."""
    reports = batched_reports(ppg_emb, ecg_emb, batch_size)
    return (
        reports,
        aggregate_metrics(reports, AggregateMode.WEIGHTED),
        aggregate_metrics(reports, AggregateMode.MACRO),
    )
