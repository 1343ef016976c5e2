"""Shared-space alignment objective: normalisation, cosine similarity, symmetric InfoNCE."""
from __future__ import annotations

import torch
import torch.nn as nn

from .encoder import EmbeddingBatch, InputError

TAU_INIT = 0.07
TAU_MIN = 1e-3
TAU_MAX = 1.0


class DegenerateEmbeddingError(ValueError):
    pass


class Temperature(nn.Module):
    """Learnable softmax temperature, stored raw and clamped after each update."""

    def __init__(self, init: float = TAU_INIT, lo: float = TAU_MIN, hi: float = TAU_MAX):
        super().__init__()
        self.lo, self.hi = lo, hi
        self.tau = nn.Parameter(torch.tensor(float(init)))

    def clamp_(self) -> None:
        with torch.no_grad():
            self.tau.clamp_(self.lo, self.hi)

    def forward(self):
        return self.tau


def _values(h):
    return h.values if isinstance(h, EmbeddingBatch) else h


def l2_normalize(h):
    """Scale each row to unit Euclidean norm; zero rows are an error."""
    x = _values(h)
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        bad = int((norms.squeeze(-1) == 0).nonzero()[0])
        raise DegenerateEmbeddingError(f"row {bad} has zero norm")
    out = x / norms
    return EmbeddingBatch(out, h.space) if isinstance(h, EmbeddingBatch) else out


def cosine_similarity_matrix(hp, he) -> torch.Tensor:
    """Entry (i, j) is <hp_i, he_j>; both inputs must already be unit-norm."""
    a, b = _values(hp), _values(he)
    if a.dim() != 2 or b.dim() != 2 or a.shape != b.shape:
        raise InputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a @ b.T


def symmetric_info_nce(hp, he, tau) -> torch.Tensor:
    """Mean of the PPG->ECG and ECG->PPG cross-entropies over in-batch negatives.

    ``hp`` and ``he`` are unit-norm N x D embeddings. Similarities keep the
    input precision; the log-sum-exp runs in float64 with max subtraction.
    """
    tau = tau if torch.is_tensor(tau) else torch.tensor(float(tau), dtype=torch.float64)
    if not bool(tau > 0):
        raise ValueError(f"temperature must be positive, got {float(tau)}")
    sim = cosine_similarity_matrix(hp, he)
    if sim.shape[0] < 1:
        raise InputError("empty batch")
    logits = sim.double() / tau.double()
    diag = logits.diagonal()
    loss_pe = torch.logsumexp(logits, dim=1) - diag  # rows: each PPG against all ECG
    loss_ep = torch.logsumexp(logits, dim=0) - diag  # columns: each ECG against all PPG
    return (loss_pe.sum() + loss_ep.sum()) / (2 * sim.shape[0])
