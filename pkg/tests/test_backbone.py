import numpy as np
import pytest
import torch

import retask.vocab as V
from retask.backbone import (
    Backbone, HiddenStates, ModelConfig, PatchGrid,
    load_checkpoint, save_checkpoint,
)
from retask.errors import LayerRangeError, SequenceLengthError, VocabularyError
from retask.io import file_digest


def make_page(dim=32, seed=0):
    rng = np.random.default_rng(seed)
    return PatchGrid(pixels=rng.random((dim, dim)).astype(np.float32))


class TestModelConfig:
    def test_defaults_valid(self):
        cfg = ModelConfig()
        assert cfg.d_model % cfg.n_heads == 0
        assert cfg.page_dim % cfg.patch_size == 0

    @pytest.mark.parametrize("kwargs", [
        {"n_layers": 0},
        {"d_model": 31, "n_heads": 2},
        {"page_dim": 33, "patch_size": 8},
        {"vocab_size": 100},
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)

    def test_n_patches(self):
        assert ModelConfig(page_dim=64, patch_size=8).n_patches == 64


class TestForward:
    def test_single_bos_softmax_sums_to_one(self, small_model, small_config):
        _, logits = small_model.forward([V.BOS])
        assert logits.shape == (1, small_config.vocab_size)
        assert float(torch.softmax(logits[0], -1).sum()) == pytest.approx(1.0, abs=1e-6)

    def test_fixed_seed_bit_identical(self, small_config):
        tokens = [V.BOS, 40, 41, 42]
        a = Backbone(small_config).forward(tokens)[1]
        b = Backbone(small_config).forward(tokens)[1]
        assert torch.equal(a, b)

    def test_hidden_state_shapes(self):
        cfg = ModelConfig(n_layers=2, d_model=32, n_heads=2, max_seq_len=64)
        hs, _ = Backbone(cfg).forward([V.BOS, 40, 41, 42, 43])
        assert isinstance(hs, HiddenStates)
        assert len(hs.per_layer) == 3
        for h in hs.per_layer:
            assert h.shape == (5, 32)

    def test_page_adds_patch_positions(self, small_model, small_config):
        hs, logits = small_model.forward([V.BOS, 40], page=make_page(small_config.page_dim))
        expected = small_config.n_patches + 2
        assert hs.per_layer[0].shape[0] == expected
        assert logits.shape[0] == expected
        for row in logits:
            assert float(torch.softmax(row, -1).sum()) == pytest.approx(1.0, abs=1e-6)

    def test_too_long_rejected(self, small_model, small_config):
        with pytest.raises(SequenceLengthError):
            small_model.forward([V.BOS] * (small_config.max_seq_len + 1))

    def test_bad_id_rejected(self, small_model, small_config):
        with pytest.raises(VocabularyError):
            small_model.forward([small_config.vocab_size])


class TestGenerate:
    def test_greedy_deterministic(self, small_model):
        a = small_model.generate([V.BOS, 40], max_new=6)
        b = small_model.generate([V.BOS, 40], max_new=6)
        assert a == b

    def test_sampled_seeded_deterministic(self, small_model):
        a = small_model.generate([V.BOS, 40], max_new=6, mode="sampled", seed=3)
        b = small_model.generate([V.BOS, 40], max_new=6, mode="sampled", seed=3)
        assert a == b

    def test_max_new_one_extends_by_one(self, small_model):
        prompt = [V.BOS, 40, 41]
        out = small_model.generate(prompt, max_new=1)
        assert len(out) == len(prompt) + 1
        assert out[:3] == prompt

    def test_eos_final_prompt_unchanged(self, small_model):
        prompt = [V.BOS, 40, V.EOS]
        assert small_model.generate(prompt, max_new=4) == prompt

    def test_capacity_exceeded(self, small_model, small_config):
        prompt = [V.BOS] * (small_config.max_seq_len - 2)
        with pytest.raises(SequenceLengthError):
            small_model.generate(prompt, max_new=3)

    def test_extension_bounded(self, small_model):
        out = small_model.generate([V.BOS, 40], max_new=5)
        assert len(out) <= 2 + 5


class TestTokenProb:
    def test_full_vocab_sums_to_one(self, small_model, small_config):
        total = sum(small_model.token_prob([V.BOS, 40], tid) for tid in range(small_config.vocab_size))
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_matches_forward_log_softmax(self, small_model):
        tokens = [V.BOS, 40, 41]
        _, logits = small_model.forward(tokens)
        expected = float(torch.log_softmax(logits[-1], -1)[99].exp())
        assert small_model.token_prob(tokens, 99) == pytest.approx(expected, rel=1e-6)

    def test_uniform_logits_give_uniform_probs(self, small_config):
        model = Backbone(small_config)
        with torch.no_grad():
            model.lm_head.weight.zero_()
        p = model.token_prob([V.BOS, 40], 123)
        assert p == pytest.approx(1.0 / small_config.vocab_size, rel=1e-5)

    def test_invalid_id(self, small_model, small_config):
        with pytest.raises(VocabularyError):
            small_model.token_prob([V.BOS], small_config.vocab_size)


class TestCapture:
    def test_all_layers_equal_forward(self, small_model, small_config):
        tokens = [V.BOS, 40, 41]
        hs, _ = small_model.forward(tokens)
        captured = small_model.capture(tokens, set(range(small_config.n_layers + 1)))
        assert set(captured) == set(range(small_config.n_layers + 1))
        for i, mat in captured.items():
            assert torch.equal(mat, hs.per_layer[i])

    def test_single_token_shape(self, small_model, small_config):
        captured = small_model.capture([V.BOS], {small_config.n_layers})
        assert captured[small_config.n_layers].shape == (1, small_config.d_model)

    def test_empty_set(self, small_model):
        assert small_model.capture([V.BOS], set()) == {}

    def test_unknown_layer(self, small_model, small_config):
        with pytest.raises(LayerRangeError):
            small_model.capture([V.BOS], {small_config.n_layers + 1})


class TestCheckpoint:
    def test_round_trip(self, small_model, tmp_path):
        path = tmp_path / "model.rtsk"
        save_checkpoint(small_model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == small_model.config
        a = small_model.forward([V.BOS, 40])[1]
        b = loaded.forward([V.BOS, 40])[1]
        assert torch.equal(a, b)

    def test_byte_identical_rewrites(self, small_model, tmp_path):
        p1, p2 = tmp_path / "a.rtsk", tmp_path / "b.rtsk"
        save_checkpoint(small_model, p1)
        save_checkpoint(small_model, p2)
        assert file_digest(p1) == file_digest(p2)


def test_page_pixel_range_validated():
    with pytest.raises(ValueError):
        PatchGrid(pixels=np.full((16, 16), 1.5, dtype=np.float32))
    with pytest.raises(ValueError):
        PatchGrid(pixels=np.zeros((16, 8), dtype=np.float32))
