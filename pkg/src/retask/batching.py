"""Padding and batched-encoding helpers shared by training and evaluation."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone
from .vocab import PAD


def pad_batch(seqs: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-pad to a rectangle; returns (ids, valid mask, last valid index)."""
    n = len(seqs)
    t = max(len(s) for s in seqs)
    ids = torch.full((n, t), PAD, dtype=torch.long)
    valid = torch.zeros((n, t), dtype=torch.bool)
    last = torch.zeros(n, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        valid[i, : len(s)] = True
        last[i] = len(s) - 1
    return ids, valid, last


def final_hidden_batch(model: Backbone, seqs: list[list[int]],
                       pages: np.ndarray | None = None) -> torch.Tensor:
    """Last-layer hidden state at each sequence's final real token. Grad-enabled."""
    ids, valid, last = pad_batch(seqs)
    page_t = torch.from_numpy(pages) if pages is not None else None
    _, hidden = model.core(ids, pages=page_t, valid=valid, collect_hidden=True)
    h = hidden[-1]
    n_prefix = h.shape[1] - ids.shape[1]
    rows = torch.arange(len(seqs))
    return h[rows, n_prefix + last]


def embed_texts(model: Backbone, seqs: list[list[int]], batch_size: int = 32) -> torch.Tensor:
    """Unit-norm final-token embeddings for many sequences (inference only)."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            h = final_hidden_batch(model, seqs[i:i + batch_size])
            outs.append(F.normalize(h, dim=-1))
    return torch.cat(outs, dim=0)
