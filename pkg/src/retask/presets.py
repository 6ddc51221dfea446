"""Named parameter presets.

Desk presets scale the task corpora down to CPU-trainable sizes while keeping
the evaluation-set shapes (200 detection pages, 20/180 anomaly split) intact.
The large model preset is documentation-only: it is the config against which
the sub-0.5% trainable-fraction contract is stated, and is never instantiated
in tests (its closed-form parameter count is what gets checked).
"""

from __future__ import annotations

from .backbone import ModelConfig

# Backbone used by every desk-scale run.
DESK_MODEL = ModelConfig(n_layers=4, d_model=128, n_heads=4, vocab_size=512,
                         max_seq_len=192, patch_size=8, page_dim=64, seed=0)

# Documentation-only scale-up; see adapters.analytic_trainable_fraction.
LARGE_MODEL = ModelConfig(n_layers=32, d_model=2048, n_heads=16, vocab_size=4096,
                          max_seq_len=1024, patch_size=16, page_dim=448, seed=0)

# Retrieval: 1000 raw training docs; pool of 500 with 100 golden query-doc pairs.
IR_DESK = {"n_docs": 1000, "pool_size": 500, "n_eval_pairs": 100}

# Detection: training pages plus the fixed 200-page evaluation set.
OD_DESK = {"n_train_pages": 160, "n_eval_pages": 200, "page_dim": 64}

# Anomaly detection: training pairs are balanced; the evaluation split keeps
# the 20 positive / 180 negative shape.
AD_DESK = {"n_train_pos": 120, "n_train_neg": 120, "n_eval_pos": 20, "n_eval_neg": 180,
           "page_dim": 64}

# Backbone pretraining (the knowledge-instilling stand-in): text doc->query
# demonstrations plus page demonstrations (title reading, query matching,
# box-string emission) split evenly across the three page variants.
PRETRAIN_DESK = {"n_docs": 2000, "n_page": 1500, "page_dim": 64,
                 "epochs": 5, "batch_size": 16, "lr": 1e-3}

# Fuzzy-localization convergence study: large pages so the bisection has room.
FUZZY_STUDY = {"n_pages": 50, "page_dim": 512, "min_obj_frac": 0.6, "max_obj_frac": 0.8,
               "visibility": 0.95, "stop_px": 8, "sim_threshold": 0.6}
