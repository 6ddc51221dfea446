import pytest
import torch

torch.set_num_threads(1)

from retask.backbone import Backbone, ModelConfig


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(n_layers=2, d_model=32, n_heads=2, vocab_size=512,
                       max_seq_len=96, patch_size=8, page_dim=32, seed=7)


@pytest.fixture(scope="session")
def small_model(small_config):
    return Backbone(small_config)


@pytest.fixture(scope="session")
def _pretrain_bundle():
    """Desk-scale backbone taught the synthetic world (shared; read-only)."""
    import time

    from retask.presets import DESK_MODEL, PRETRAIN_DESK
    from retask.synth import gen_pretrain_corpus
    from retask.train import pretrain_backbone

    model = Backbone(DESK_MODEL)
    examples = gen_pretrain_corpus(PRETRAIN_DESK["n_docs"], seed=7,
                                   n_page=PRETRAIN_DESK["n_page"],
                                   page_dim=PRETRAIN_DESK["page_dim"])
    t0 = time.perf_counter()
    pretrain_backbone(model, examples, epochs=PRETRAIN_DESK["epochs"],
                      batch_size=PRETRAIN_DESK["batch_size"], lr=PRETRAIN_DESK["lr"], seed=0)
    seconds = time.perf_counter() - t0
    for p in model.parameters():
        p.requires_grad_(False)
    return model, seconds


@pytest.fixture(scope="session")
def pretrained_model(_pretrain_bundle):
    return _pretrain_bundle[0]


@pytest.fixture(scope="session")
def pretrain_seconds(_pretrain_bundle):
    return _pretrain_bundle[1]
