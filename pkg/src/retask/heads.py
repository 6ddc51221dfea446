"""Task-specific output heads replacing next-token decoding, plus their losses.

Three expression forms: unit-norm embeddings read straight off the final
token's last-layer hidden state, a 4-way sigmoid box regressor, and a
single-logit binary scorer. The MLP heads read the same final hidden state.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Backbone, PatchGrid
from .boxes import BoundingBox
from .errors import BatchError, InputError

HEAD_KINDS = ("embedding", "regression", "classification")


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "embedding"
    mlp_hidden: int = 1024
    mlp_depth: int = 3
    out_dim: int | None = None
    temperature: float = 0.07

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        expected = {"embedding": None, "regression": 4, "classification": 1}[self.kind]
        if self.out_dim is None:
            object.__setattr__(self, "out_dim", expected)
        elif expected is not None and self.out_dim != expected:
            raise ValueError(f"{self.kind} head requires out_dim={expected}")

    def as_meta(self) -> dict:
        return asdict(self)


class EmbeddingHead(nn.Module):
    """Parameter-free: L2-normalize the final hidden state."""

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return F.normalize(h, dim=-1)


class MlpHead(nn.Module):
    """Three-layer MLP with GELU between layers; raw (pre-sigmoid) outputs."""

    def __init__(self, d_model: int, hidden: int, depth: int, out_dim: int):
        super().__init__()
        dims = [d_model] + [hidden] * (depth - 1) + [out_dim]
        layers: list[nn.Module] = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(nn.GELU())
        self.net = nn.Sequential(*layers)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h)


def build_head(config: HeadConfig, d_model: int) -> nn.Module:
    if config.kind == "embedding":
        return EmbeddingHead()
    return MlpHead(d_model, config.mlp_hidden, config.mlp_depth, config.out_dim)


def head_parameter_count(config: HeadConfig, d_model: int) -> int:
    if config.kind == "embedding":
        return 0
    dims = [d_model] + [config.mlp_hidden] * (config.mlp_depth - 1) + [config.out_dim]
    return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


class TaskModel(nn.Module):
    """A backbone plus one task head; the trainable-delta unit."""

    def __init__(self, backbone: Backbone, head_config: HeadConfig, head: nn.Module | None = None):
        super().__init__()
        self.backbone = backbone
        self.head_config = head_config
        self.head = head if head is not None else build_head(head_config, backbone.config.d_model)


def _backbone_of(model) -> Backbone:
    return model.backbone if isinstance(model, TaskModel) else model


def _final_hidden(model, tokens, page: PatchGrid | None) -> torch.Tensor:
    bb = _backbone_of(model)
    hidden, _ = bb.forward(tokens, page=page)
    return hidden.final_token_last_layer()


def embed(model, tokens, page: PatchGrid | None = None) -> torch.Tensor:
    """Unit-norm copy of the final token's last-layer hidden state."""
    if (tokens is None or len(tokens) == 0) and page is None:
        raise InputError("cannot embed an empty input")
    return F.normalize(_final_hidden(model, tokens, page), dim=-1)


def raw_box_outputs(model: TaskModel, page: PatchGrid, instruction) -> torch.Tensor:
    """Sigmoid outputs of the regression head, before ordering repair."""
    with torch.no_grad():
        h = _final_hidden(model, instruction, page)
        return torch.sigmoid(model.head(h))


def repair_box(values) -> BoundingBox:
    """Sort coordinates per axis; nudge degenerate pairs apart minimally."""
    x1, y1, x2, y2 = (float(v) for v in values)
    x1, x2 = min(x1, x2), max(x1, x2)
    y1, y2 = min(y1, y2), max(y1, y2)
    eps = 1e-4
    if x2 <= x1:
        x1, x2 = max(0.0, x1 - eps), min(1.0, x1 + eps)
    if y2 <= y1:
        y1, y2 = max(0.0, y1 - eps), min(1.0, y1 + eps)
    return BoundingBox(min(x1, 1.0 - eps), min(y1, 1.0 - eps), max(x2, eps), max(y2, eps))


def predict_box(model: TaskModel, page: PatchGrid, instruction) -> BoundingBox:
    """One backbone forward pass; four sigmoid coordinates, order-repaired."""
    return repair_box(raw_box_outputs(model, page, instruction).tolist())


def predict_anomaly(model: TaskModel, page: PatchGrid, query) -> float:
    """Sigmoid of the single classification logit."""
    with torch.no_grad():
        h = _final_hidden(model, query, page)
        return float(torch.sigmoid(model.head(h))[0])


# -- losses --------------------------------------------------------------------


def contrastive_loss(query_embs: torch.Tensor, target_embs: torch.Tensor,
                     temperature: float = 0.07) -> torch.Tensor:
    """Symmetric in-batch InfoNCE over the cosine-similarity matrix.

    Matched pairs sit on the diagonal; both softmax directions are averaged.
    """
    if query_embs.shape != target_embs.shape:
        raise BatchError("query and target batches must have equal shapes")
    n = query_embs.shape[0]
    if n < 2:
        raise BatchError("contrastive loss needs at least 2 pairs for in-batch negatives")
    sims = (query_embs @ target_embs.T) / temperature
    labels = torch.arange(n, device=sims.device)
    return 0.5 * (F.cross_entropy(sims, labels) + F.cross_entropy(sims.T, labels))


def _as_coords(box) -> torch.Tensor:
    if isinstance(box, BoundingBox):
        return torch.tensor(box.as_tuple(), dtype=torch.float64)
    return box if isinstance(box, torch.Tensor) else torch.as_tensor(box)


def l1_loss(pred, target) -> torch.Tensor:
    """Mean absolute difference over the four coordinates (and any batch dim)."""
    return (_as_coords(pred) - _as_coords(target)).abs().mean()


def bce_loss(logit, label) -> torch.Tensor:
    """Binary cross-entropy from a raw logit, in log-sum-exp form."""
    x = logit if isinstance(logit, torch.Tensor) else torch.as_tensor(float(logit), dtype=torch.float64)
    y = label if isinstance(label, torch.Tensor) else torch.as_tensor(float(label), dtype=x.dtype)
    return (torch.clamp(x, min=0) - x * y + torch.log1p(torch.exp(-x.abs()))).mean()
