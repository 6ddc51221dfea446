import numpy as np
import pytest
import torch

import retask.vocab as V
from retask.adapters import (
    LoraConfig, LoraLinear, adapter_parameter_count, analytic_trainable_fraction,
    attach, backbone_parameter_count, effective_weight, load_delta, save_delta,
    trainable_fraction,
)
from retask.backbone import Backbone, ModelConfig
from retask.errors import ConfigurationError, DimensionError
from retask.heads import HeadConfig, build_head, head_parameter_count
from retask.presets import LARGE_MODEL as LARGE_PRESET


class TestLoraConfig:
    def test_defaults(self):
        cfg = LoraConfig()
        assert cfg.rank == 8 and cfg.alpha == 16.0
        assert set(cfg.targets) == {"query", "key", "value", "output"}
        assert cfg.scale == 2.0

    @pytest.mark.parametrize("kwargs", [
        {"rank": 0}, {"alpha": 0.0}, {"targets": ()}, {"targets": ("gate",)},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            LoraConfig(**kwargs)


class TestAttach:
    def test_zero_init_equivalence(self, small_model):
        adapted = attach(small_model, LoraConfig())
        tokens = [V.BOS, 40, 41, 42]
        base = small_model.forward(tokens)[1]
        after = adapted.forward(tokens)[1]
        assert torch.equal(base, after)

    def test_double_attach_rejected(self, small_model):
        adapted = attach(small_model, LoraConfig())
        with pytest.raises(ConfigurationError):
            attach(adapted, LoraConfig())

    def test_freeze_flags(self, small_model):
        adapted = attach(small_model, LoraConfig())
        for name, p in adapted.named_parameters():
            assert p.requires_grad == ("lora_" in name)

    def test_original_model_untouched(self, small_model):
        attach(small_model, LoraConfig())
        assert not any(isinstance(m, LoraLinear) for m in small_model.modules())
        assert all(p.requires_grad for p in small_model.parameters())

    def test_subset_targets(self, small_model):
        adapted = attach(small_model, LoraConfig(targets=("query", "value")))
        n = sum(1 for m in adapted.modules() if isinstance(m, LoraLinear))
        assert n == small_model.config.n_layers * 2


class TestEffectiveWeight:
    def test_zero_b_identity(self, small_model):
        adapted = attach(small_model, LoraConfig())
        mod = adapted.blocks[0].attn.wq
        w = mod.base.weight.detach()
        assert torch.equal(effective_weight(w, mod), w)

    def test_rank_one_outer_product(self):
        base = torch.nn.Linear(4, 4, bias=False)
        with torch.no_grad():
            base.weight.zero_()
        mod = LoraLinear(base, rank=1, alpha=1.0, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            mod.lora_a.zero_()
            mod.lora_a[0, 0] = 1.0  # A = e1^T
            mod.lora_b.zero_()
            mod.lora_b[0, 0] = 1.0  # B = e1
        expected = torch.zeros(4, 4)
        expected[0, 0] = 1.0
        assert torch.equal(effective_weight(base.weight.detach(), mod), expected)

    def test_linear_in_alpha(self):
        base = torch.nn.Linear(6, 6, bias=False)
        g = torch.Generator().manual_seed(1)
        m1 = LoraLinear(base, rank=2, alpha=4.0, generator=g)
        with torch.no_grad():
            m1.lora_b.normal_(0, 1, generator=torch.Generator().manual_seed(2))
        m2 = LoraLinear(base, rank=2, alpha=8.0, generator=torch.Generator().manual_seed(99))
        with torch.no_grad():
            m2.lora_a.copy_(m1.lora_a)
            m2.lora_b.copy_(m1.lora_b)
        w = base.weight.detach()
        d1 = effective_weight(w, m1) - w
        d2 = effective_weight(w, m2) - w
        assert torch.allclose(d2, 2.0 * d1)

    def test_shape_mismatch(self, small_model):
        adapted = attach(small_model, LoraConfig())
        mod = adapted.blocks[0].attn.wq
        with pytest.raises(DimensionError):
            effective_weight(torch.zeros(3, 3), mod)


class TestTrainableFraction:
    def test_frozen_model_zero(self, small_config):
        model = Backbone(small_config)
        for p in model.parameters():
            p.requires_grad_(False)
        assert trainable_fraction(model) == 0.0

    def test_fully_trainable_one(self, small_config):
        assert trainable_fraction(Backbone(small_config)) == 1.0

    def test_analytic_matches_instantiated(self, small_config):
        model = Backbone(small_config)
        assert backbone_parameter_count(small_config) == sum(p.numel() for p in model.parameters())
        lora = LoraConfig()
        adapted = attach(model, lora)
        counted = sum(p.numel() for p in adapted.parameters() if p.requires_grad)
        assert adapter_parameter_count(small_config, lora) == counted
        head = build_head(HeadConfig(kind="regression", mlp_hidden=64), small_config.d_model)
        assert head_parameter_count(HeadConfig(kind="regression", mlp_hidden=64), small_config.d_model) \
            == sum(p.numel() for p in head.parameters())
        assert trainable_fraction(adapted, head) == pytest.approx(
            analytic_trainable_fraction(small_config, lora,
                                        head_parameter_count(HeadConfig(kind="regression", mlp_hidden=64),
                                                             small_config.d_model)))

    def test_large_preset_below_half_percent(self):
        lora = LoraConfig()
        emb_head = head_parameter_count(HeadConfig(kind="embedding"), LARGE_PRESET.d_model)
        assert emb_head == 0
        frac = analytic_trainable_fraction(LARGE_PRESET, lora, emb_head)
        assert frac < 0.005
        mlp = head_parameter_count(HeadConfig(kind="regression"), LARGE_PRESET.d_model)
        assert analytic_trainable_fraction(LARGE_PRESET, lora, mlp) < 0.005


class TestGradientFlow:
    def test_one_step_changes_only_adapters(self, small_model):
        adapted = attach(small_model, LoraConfig())
        base_before = {n: p.detach().clone() for n, p in adapted.named_parameters() if "lora_" not in n}
        lora_before = {n: p.detach().clone() for n, p in adapted.named_parameters() if "lora_" in n}
        opt = torch.optim.Adam([p for p in adapted.parameters() if p.requires_grad], lr=1e-2)
        ids = torch.tensor([[V.BOS, 40, 41, 42]])
        logits, _ = adapted.core(ids)
        loss = torch.nn.functional.cross_entropy(logits[0, :-1], ids[0, 1:])
        opt.zero_grad()
        loss.backward()
        opt.step()
        for n, p in adapted.named_parameters():
            if "lora_" in n:
                continue
            assert torch.equal(p.detach(), base_before[n]), f"{n} changed"
        changed = any(not torch.equal(p.detach(), lora_before[n])
                      for n, p in adapted.named_parameters() if "lora_" in n)
        assert changed


class TestDeltaCheckpoint:
    def test_round_trip(self, small_model, tmp_path):
        lora = LoraConfig(rank=2)
        adapted = attach(small_model, lora)
        with torch.no_grad():
            for m in adapted.modules():
                if isinstance(m, LoraLinear):
                    m.lora_b.normal_(0, 0.1, generator=torch.Generator().manual_seed(5))
        head_cfg = HeadConfig(kind="classification", mlp_hidden=16)
        head = build_head(head_cfg, small_model.config.d_model)
        path = tmp_path / "delta.rtsk"
        save_delta(path, adapted, head, lora, head_meta=head_cfg.as_meta())
        loaded_model, loaded_head, _ = load_delta(path, small_model)
        tokens = [V.BOS, 40, 41]
        assert torch.equal(adapted.forward(tokens)[1], loaded_model.forward(tokens)[1])
        h = torch.randn(4, small_model.config.d_model, generator=torch.Generator().manual_seed(0))
        assert torch.equal(head(h), loaded_head(h))

    def test_config_mismatch_rejected(self, small_model, tmp_path):
        lora = LoraConfig(rank=2)
        adapted = attach(small_model, lora)
        path = tmp_path / "delta.rtsk"
        save_delta(path, adapted, None, lora)
        other = Backbone(ModelConfig(n_layers=2, d_model=64, n_heads=2, max_seq_len=96))
        with pytest.raises(ConfigurationError):
            load_delta(path, other)
