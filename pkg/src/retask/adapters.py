"""Low-rank adapters on the attention projections of a frozen backbone.

Attaching returns a new model whose base weights are frozen and whose
adapter matrices are the only trainable backbone parameters. B starts at
zero, so the adapted model reproduces the base model exactly until trained.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Backbone, ModelConfig
from .errors import ConfigurationError, DimensionError
from .io import load_arrays, save_arrays

TARGET_ATTRS = {"query": "wq", "key": "wk", "value": "wv", "output": "wo"}


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("query", "key", "value", "output")

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not self.targets:
            raise ValueError("targets must be non-empty")
        unknown = set(self.targets) - set(TARGET_ATTRS)
        if unknown:
            raise ValueError(f"unknown projection targets {sorted(unknown)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoraLinear(nn.Module):
    """base(x) + (alpha/rank) * B @ A @ x, applied at the projection output."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, generator: torch.Generator):
        super().__init__()
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        d_in, d_out = base.in_features, base.out_features
        a = torch.empty(rank, d_in)
        a.normal_(0.0, 1.0 / math.sqrt(d_in), generator=generator)
        self.lora_a = nn.Parameter(a)
        self.lora_b = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + F.linear(F.linear(x, self.lora_a), self.lora_b) * self.scale


def attach(model: Backbone, config: LoraConfig, seed: int = 0) -> Backbone:
    """Copy the model, freeze it, and wrap the targeted attention projections."""
    for module in model.modules():
        if isinstance(module, LoraLinear):
            raise ConfigurationError("model already carries adapters; double-wrapping rejected")
    adapted = copy.deepcopy(model)
    for p in adapted.parameters():
        p.requires_grad_(False)
    g = torch.Generator().manual_seed(seed)
    wrapped = 0
    for block in adapted.blocks:
        for target in config.targets:
            attr = TARGET_ATTRS[target]
            if not hasattr(block.attn, attr):
                raise ConfigurationError(f"model lacks projection {target!r}")
            base = getattr(block.attn, attr)
            setattr(block.attn, attr, LoraLinear(base, config.rank, config.alpha, g))
            wrapped += 1
    if wrapped == 0:
        raise ConfigurationError("no projections wrapped")
    return adapted


def effective_weight(w_base: torch.Tensor, adapter: LoraLinear) -> torch.Tensor:
    """Merged weight matrix W + (alpha/rank) * B @ A."""
    if w_base.shape != (adapter.lora_b.shape[0], adapter.lora_a.shape[1]):
        raise DimensionError(
            f"base weight {tuple(w_base.shape)} does not conform to adapter "
            f"({adapter.lora_b.shape[0]}, {adapter.lora_a.shape[1]})"
        )
    return w_base + adapter.scale * (adapter.lora_b @ adapter.lora_a)


def adapter_parameters(model: nn.Module):
    for module in model.modules():
        if isinstance(module, LoraLinear):
            yield module.lora_a
            yield module.lora_b


def trainable_fraction(*modules: nn.Module) -> float:
    total = 0
    trainable = 0
    for m in modules:
        if m is None:
            continue
        for p in m.parameters():
            total += p.numel()
            if p.requires_grad:
                trainable += p.numel()
    if total == 0:
        raise ValueError("no parameters found")
    return trainable / total


def backbone_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count of Backbone(config)."""
    d, v = config.d_model, config.vocab_size
    n_pos = config.max_seq_len + config.n_patches
    per_layer = 4 * d * d + (d * 4 * d + 4 * d) + (4 * d * d + d) + 4 * d  # attn + mlp + norms
    return (
        v * d  # token embedding
        + n_pos * d  # positions
        + config.patch_size**2 * d + d  # patch projection
        + config.n_layers * per_layer
        + 2 * d  # final norm
        + d * v  # lm head
    )


def adapter_parameter_count(config: ModelConfig, lora: LoraConfig) -> int:
    return config.n_layers * len(lora.targets) * 2 * lora.rank * config.d_model


def analytic_trainable_fraction(config: ModelConfig, lora: LoraConfig, head_params: int = 0) -> float:
    adapter = adapter_parameter_count(config, lora)
    return (adapter + head_params) / (backbone_parameter_count(config) + adapter + head_params)


def merged_state_dict(adapted: Backbone) -> dict[str, torch.Tensor]:
    """Export-only view with adapter deltas folded into the base weights."""
    out = {}
    for name, module in adapted.named_modules():
        if isinstance(module, LoraLinear):
            out[f"{name}.weight"] = effective_weight(module.base.weight.detach(), module)
    return out


def delta_state(adapted: Backbone, head: nn.Module | None) -> dict[str, torch.Tensor]:
    state = {}
    for name, module in adapted.named_modules():
        if isinstance(module, LoraLinear):
            state[f"adapter.{name}.lora_a"] = module.lora_a.detach()
            state[f"adapter.{name}.lora_b"] = module.lora_b.detach()
    if head is not None:
        for name, p in head.state_dict().items():
            state[f"head.{name}"] = p.detach()
    return state


def save_delta(path, adapted: Backbone, head: nn.Module | None,
               lora: LoraConfig | None, head_meta: dict | None = None) -> None:
    """One file holding adapters and head, tied to the base config fingerprint."""
    arrays = {k: v.cpu().numpy() for k, v in delta_state(adapted, head).items()}
    meta = {
        "kind": "delta",
        "base_fingerprint": adapted.config.fingerprint(),
        "lora": asdict(lora) if lora is not None else None,
        "head": head_meta or {},
    }
    if meta["lora"] is not None:
        meta["lora"]["targets"] = list(meta["lora"]["targets"])
    save_arrays(path, arrays, meta=meta)


def load_delta(path, base: Backbone) -> tuple[Backbone, nn.Module | None, dict]:
    """Rebuild (adapted model, head) from a delta file; config must match."""
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "delta":
        raise ValueError(f"{path}: not a delta checkpoint")
    if meta["base_fingerprint"] != base.config.fingerprint():
        raise ConfigurationError("delta checkpoint was trained on a different model config")
    if meta["lora"] is not None:
        lora = LoraConfig(rank=meta["lora"]["rank"], alpha=meta["lora"]["alpha"],
                          targets=tuple(meta["lora"]["targets"]))
        adapted = attach(base, lora)
        with torch.no_grad():
            for name, module in adapted.named_modules():
                if isinstance(module, LoraLinear):
                    module.lora_a.copy_(torch.from_numpy(arrays[f"adapter.{name}.lora_a"]))
                    module.lora_b.copy_(torch.from_numpy(arrays[f"adapter.{name}.lora_b"]))
    else:
        adapted = base
    head = None
    head_state = {k[len("head."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("head.")}
    if head_state:
        from .heads import HeadConfig, build_head

        head = build_head(HeadConfig(**meta["head"]), base.config.d_model)
        head.load_state_dict(head_state)
    return adapted, head, meta
