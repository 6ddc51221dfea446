"""Small decoder-only transformer with an optional patch prefix for raster pages.

The model exposes next-token logits, free-running generation, per-token
probabilities and per-layer activation capture. Weights are initialized from
the config seed, so two models built from equal configs are identical.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .boxes import BoundingBox
from .errors import LayerRangeError, SequenceLengthError, VocabularyError
from .io import fingerprint, load_arrays, save_arrays
from .vocab import EOS, MIN_VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    vocab_size: int = 512
    max_seq_len: int = 192
    patch_size: int = 8
    page_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "max_seq_len", "patch_size", "page_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.page_dim % self.patch_size != 0:
            raise ValueError("page_dim must be divisible by patch_size")
        if self.vocab_size < MIN_VOCAB_SIZE:
            raise ValueError(f"vocab_size must cover the fixed alphabet (>= {MIN_VOCAB_SIZE})")

    @property
    def n_patches(self) -> int:
        return (self.page_dim // self.patch_size) ** 2

    def fingerprint(self) -> str:
        return fingerprint(asdict(self))


@dataclass
class PatchGrid:
    """A square grayscale page plus the machine-readable text layer."""

    pixels: np.ndarray
    text_layer: list[tuple[str, BoundingBox]] = field(default_factory=list)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise ValueError(f"page must be square, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel intensities must lie in [0,1]")
        self.pixels = px

    @property
    def dim(self) -> int:
        return self.pixels.shape[0]


@dataclass
class HiddenStates:
    """Activations per layer; index 0 is the embedding output, index L the last block."""

    per_layer: list[torch.Tensor]

    @property
    def n_tokens(self) -> int:
        return self.per_layer[0].shape[0]

    def final_token_last_layer(self) -> torch.Tensor:
        return self.per_layer[-1][-1]


def validate_tokens(ids, config: ModelConfig) -> list[int]:
    ids = [int(i) for i in ids]
    if len(ids) > config.max_seq_len:
        raise SequenceLengthError(f"sequence of {len(ids)} tokens exceeds max_seq_len={config.max_seq_len}")
    for i in ids:
        if not 0 <= i < config.vocab_size:
            raise VocabularyError(f"token id {i} outside vocabulary of size {config.vocab_size}")
    return ids


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.d_model // config.n_heads
        self.wq = nn.Linear(config.d_model, config.d_model, bias=False)
        self.wk = nn.Linear(config.d_model, config.d_model, bias=False)
        self.wv = nn.Linear(config.d_model, config.d_model, bias=False)
        self.wo = nn.Linear(config.d_model, config.d_model, bias=False)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q = self.wq(x).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.wk(x).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.wv(x).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~attn_mask, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.wo(out.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, 4 * config.d_model),
            nn.GELU(),
            nn.Linear(4 * config.d_model, config.d_model),
        )

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), attn_mask)
        return x + self.mlp(self.ln2(x))


class Backbone(nn.Module):
    """Pre-norm decoder; pages are patch-embedded and prepended to the text."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_seq_len + config.n_patches, config.d_model)
        self.patch_proj = nn.Linear(config.patch_size * config.patch_size, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self.forward_calls = 0
        self._init_weights(config.seed)

    def _init_weights(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
                if p.dim() >= 2:
                    p.normal_(0.0, 0.02, generator=g)
                elif name.endswith(".bias"):
                    p.zero_()
                else:  # LayerNorm weights
                    p.fill_(1.0)

    # -- internal batched core ------------------------------------------------

    def _embed_page_batch(self, pages: torch.Tensor) -> torch.Tensor:
        b, dim, _ = pages.shape
        ps = self.config.patch_size
        n_side = dim // ps
        patches = pages.view(b, n_side, ps, n_side, ps).permute(0, 1, 3, 2, 4)
        patches = patches.reshape(b, n_side * n_side, ps * ps)
        return self.patch_proj(patches)

    def core(
        self,
        ids: torch.Tensor,
        pages: torch.Tensor | None = None,
        valid: torch.Tensor | None = None,
        collect_hidden: bool = False,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Batched forward. ids (B,T) int64; pages (B,D,D) float; valid (B,T) bool.

        Returns logits (B,T_total,V) and, if requested, per-layer hidden states.
        Page patches occupy the first n_patches positions of every row.
        """
        self.forward_calls += 1
        b, t = ids.shape
        x = self.tok_emb(ids)
        n_prefix = 0
        if pages is not None:
            page_x = self._embed_page_batch(pages)
            n_prefix = page_x.shape[1]
            x = torch.cat([page_x, x], dim=1)
        total = n_prefix + t
        x = x + self.pos_emb(torch.arange(total, device=x.device)).unsqueeze(0)

        key_valid = torch.ones(b, total, dtype=torch.bool, device=x.device)
        if valid is not None:
            key_valid[:, n_prefix:] = valid
        causal = torch.tril(torch.ones(total, total, dtype=torch.bool, device=x.device))
        attn_mask = causal.unsqueeze(0).unsqueeze(0) & key_valid.view(b, 1, 1, total)

        hidden: list[torch.Tensor] = [x] if collect_hidden else []
        for block in self.blocks:
            x = block(x, attn_mask)
            if collect_hidden:
                hidden.append(x)
        logits = self.lm_head(self.ln_f(x))
        return logits, hidden

    # -- public single-sequence operations ------------------------------------

    def _page_tensor(self, page: PatchGrid | None) -> torch.Tensor | None:
        if page is None:
            return None
        if page.dim != self.config.page_dim:
            raise ValueError(f"page dim {page.dim} != configured page_dim {self.config.page_dim}")
        return torch.from_numpy(page.pixels).unsqueeze(0)

    def forward(self, tokens, page: PatchGrid | None = None) -> tuple[HiddenStates, torch.Tensor]:
        ids = validate_tokens(tokens, self.config)
        with torch.no_grad():
            logits, hidden = self.core(
                torch.tensor([ids], dtype=torch.long),
                pages=self._page_tensor(page),
                collect_hidden=True,
            )
        return HiddenStates([h[0] for h in hidden]), logits[0]

    def generate(self, prompt, page: PatchGrid | None = None, max_new: int = 16,
                 mode: str = "greedy", seed: int | None = None):
        """Extend the prompt by up to max_new ids, stopping at EOS."""
        ids = validate_tokens(prompt, self.config)
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        if len(ids) + max_new > self.config.max_seq_len:
            raise SequenceLengthError(
                f"prompt of {len(ids)} + max_new {max_new} exceeds max_seq_len={self.config.max_seq_len}"
            )
        if mode not in ("greedy", "sampled"):
            raise ValueError(f"unknown generation mode {mode!r}")
        if ids and ids[-1] == EOS:
            return list(ids)
        gen = None
        if mode == "sampled":
            gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
        page_t = self._page_tensor(page)
        out = list(ids)
        with torch.no_grad():
            for _ in range(max_new):
                logits, _ = self.core(torch.tensor([out], dtype=torch.long), pages=page_t)
                row = logits[0, -1]
                if mode == "greedy":
                    nxt = int(row.argmax())
                else:
                    probs = torch.softmax(row, dim=-1)
                    nxt = int(torch.multinomial(probs, 1, generator=gen))
                out.append(nxt)
                if nxt == EOS:
                    break
        return out

    def token_prob(self, prompt, token_id: int, page: PatchGrid | None = None) -> float:
        if not 0 <= int(token_id) < self.config.vocab_size:
            raise VocabularyError(f"token id {token_id} outside vocabulary")
        _, logits = self.forward(prompt, page=page)
        return float(torch.softmax(logits[-1], dim=-1)[int(token_id)])

    def capture(self, tokens, layer_ids, page: PatchGrid | None = None) -> dict[int, torch.Tensor]:
        """Activation matrices for the requested layers (0 = embedding output)."""
        layer_ids = {int(i) for i in layer_ids}
        for i in layer_ids:
            if not 0 <= i <= self.config.n_layers:
                raise LayerRangeError(f"layer {i} outside 0..{self.config.n_layers}")
        if not layer_ids:
            return {}
        hidden, _ = self.forward(tokens, page=page)
        return {i: hidden.per_layer[i] for i in sorted(layer_ids)}


def save_checkpoint(model: Backbone, path) -> None:
    arrays = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    save_arrays(path, arrays, meta={"kind": "backbone", "config": asdict(model.config)})


def load_checkpoint(path) -> Backbone:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "backbone":
        raise ValueError(f"{path}: not a backbone checkpoint")
    model = Backbone(ModelConfig(**meta["config"]))
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    model.load_state_dict(state)
    return model
