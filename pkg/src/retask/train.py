"""Fine-tuning of adapters plus task heads on self-annotations, the NTP (SFT)
and head-only baseline trainers, and the two-step pipeline that composes
annotation with re-training.

The base weights are never written: full mode trains adapters and head,
head-only trains the head alone, and sft trains adapters through the
next-token objective. All modes verify the freeze contract by hash.
"""

from __future__ import annotations

import copy
import hashlib
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from . import annotate as ann
from . import vocab
from .adapters import LoraConfig, attach
from .backbone import Backbone
from .batching import final_hidden_batch, pad_batch
from .boxes import BoundingBox
from .errors import ConfigurationError, DataError, TrainingError
from .heads import HeadConfig, TaskModel, bce_loss, contrastive_loss
from .vocab import PAD

TASKS = ("ir", "od", "ad")
MODES = ("full", "sft", "head-only")
DEFAULT_EPOCHS = {"ir": 5, "od": 20, "ad": 50}


@dataclass(frozen=True)
class TrainConfig:
    task: str
    mode: str = "full"
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int | None = None
    split_ratio: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigurationError("split_ratio must lie in (0,1)")
        if self.epochs is None:
            object.__setattr__(self, "epochs", DEFAULT_EPOCHS[self.task])
        elif self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    aborted: bool = False
    skipped_records: int = 0
    checkpoint: str | None = None

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "aborted": self.aborted,
                "skipped_records": self.skipped_records, "checkpoint": self.checkpoint}


def split(records: list, ratio: float, seed: int) -> tuple[list, list]:
    """Disjoint, exhaustive, seeded shuffle split; train gets floor(ratio*n)."""
    if len(records) < 2:
        raise DataError(f"need at least 2 records to split, got {len(records)}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5F11])))
    order = rng.permutation(len(records))
    n_train = int(ratio * len(records))
    train = [records[i] for i in order[:n_train]]
    val = [records[i] for i in order[n_train:]]
    return train, val


def base_weight_hash(model: Backbone | TaskModel) -> str:
    """sha256 over the base weights (adapter matrices excluded).

    Wrapped projections keep their pre-wrap names so hashes are comparable
    between a bare model and its adapted copies.
    """
    bb = model.backbone if isinstance(model, TaskModel) else model
    entries = []
    for name, p in bb.named_parameters():
        if "lora_" in name:
            continue
        entries.append((name.replace(".base.", "."), p))
    h = hashlib.sha256()
    for name, p in sorted(entries, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# -- example assembly -------------------------------------------------------------


def _wrap_query(ids: list[int]) -> list[int]:
    return [vocab.BOS] + list(ids) + [vocab.EOS]


OD_INSTRUCTION = [vocab.BOS, vocab.LOC_ALL]


def _ad_input(query: tuple[int, ...]) -> list[int]:
    return [vocab.BOS, *query, vocab.ASK_YESNO]


def build_examples(task: str, records: list[ann.SelfAnnotationRecord], inputs: dict) -> list:
    """Join annotation records with their corpus items, skipping unusable rows."""
    examples = []
    for rec in records:
        item = inputs.get(rec.input_ref)
        if item is None:
            continue
        if task == "ir":
            qids = vocab.encode(str(rec.label), strict=False)
            if not qids:
                continue
            examples.append((_wrap_query(qids), list(item.tokens)))
        elif task == "od":
            box = rec.label if isinstance(rec.label, BoundingBox) else BoundingBox(*rec.label)
            examples.append((item.grid.pixels, np.asarray(box.as_tuple(), dtype=np.float32)))
        else:
            examples.append((item.page.grid.pixels, _ad_input(item.query), float(rec.label)))
    return examples


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        chunk = order[i:i + batch_size]
        if len(chunk) >= min_size:
            yield chunk


def _task_loss(task: str, model: TaskModel, batch: list, temperature: float) -> torch.Tensor:
    bb = model.backbone
    if task == "ir":
        queries = [ex[0] for ex in batch]
        docs = [ex[1] for ex in batch]
        q = F.normalize(final_hidden_batch(bb, queries), dim=-1)
        d = F.normalize(final_hidden_batch(bb, docs), dim=-1)
        return contrastive_loss(q, d, temperature)
    if task == "od":
        pages = np.stack([ex[0] for ex in batch])
        seqs = [OD_INSTRUCTION] * len(batch)
        h = final_hidden_batch(bb, seqs, pages=pages)
        pred = torch.sigmoid(model.head(h))
        target = torch.from_numpy(np.stack([ex[1] for ex in batch]))
        return (pred - target).abs().mean()
    pages = np.stack([ex[0] for ex in batch])
    seqs = [ex[1] for ex in batch]
    h = final_hidden_batch(bb, seqs, pages=pages)
    logits = model.head(h)[:, 0]
    labels = torch.tensor([ex[2] for ex in batch], dtype=logits.dtype)
    return bce_loss(logits, labels)


def _run_epochs(step_loss, train_set, val_set, config: TrainConfig, params,
                min_batch: int = 1) -> TrainHistory:
    history = TrainHistory()
    params = [p for p in params if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.lr) if params else None
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, epoch])))
        total, count = 0.0, 0
        for idx in _batches(len(train_set), config.batch_size, rng, min_size=min_batch):
            batch = [train_set[i] for i in idx]
            loss = step_loss(batch)
            if not torch.isfinite(loss):
                history.aborted = True
                raise TrainingError(f"non-finite loss at epoch {epoch}", history=history)
            if optimizer is not None:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            total += float(loss.detach())
            count += 1
        with torch.no_grad():
            val_total, val_count = 0.0, 0
            for i in range(0, len(val_set), config.batch_size):
                batch = val_set[i:i + config.batch_size]
                if len(batch) < min_batch:
                    continue
                val_total += float(step_loss(batch))
                val_count += 1
        history.epochs.append({
            "epoch": epoch,
            "train_loss": total / max(count, 1),
            "val_loss": val_total / max(val_count, 1) if val_count else None,
            "seconds": time.perf_counter() - t0,
        })
    return history


def finetune(model: TaskModel, records: list[ann.SelfAnnotationRecord], inputs: dict,
             config: TrainConfig) -> tuple[TaskModel, TrainHistory]:
    """Train the delta (adapters and/or head) with the task loss.

    In full mode the model must already carry adapters; in head-only mode it
    must not. The frozen base is asserted unchanged by hash.
    """
    if config.mode not in ("full", "head-only"):
        raise ConfigurationError("finetune handles modes 'full' and 'head-only'; use finetune_sft for sft")
    examples = build_examples(config.task, records, inputs)
    if config.epochs == 0:
        return model, TrainHistory()
    train_set, val_set = split(examples, config.split_ratio, config.seed)
    before = base_weight_hash(model)
    temperature = model.head_config.temperature
    params = list(model.parameters())
    min_batch = 2 if config.task == "ir" else 1
    history = _run_epochs(lambda b: _task_loss(config.task, model, b, temperature),
                          train_set, val_set, config, params, min_batch=min_batch)
    assert base_weight_hash(model) == before, "freeze contract violated"
    return model, history


# -- SFT baseline -----------------------------------------------------------------


def serialize_label(task: str, label) -> list[int] | None:
    """Token targets for the NTP baseline: queries verbatim, boxes as
    2-decimal "x1, y1, x2, y2" strings, binary labels as yes/no."""
    if task == "ir":
        ids = vocab.encode(str(label), strict=False)
        return ids + [vocab.EOS] if ids else None
    if task == "od":
        box = label if isinstance(label, BoundingBox) else BoundingBox(*label)
        return vocab.digit_string_tokens(ann.box_to_text(box, decimals=2)) + [vocab.EOS]
    return [vocab.YES if int(label) == 1 else vocab.NO, vocab.EOS]


def _sft_example(task: str, rec: ann.SelfAnnotationRecord, item) -> tuple | None:
    target = serialize_label(task, rec.label)
    if not target:
        return None
    if task == "ir":
        prompt = [t for t in item.tokens if t != vocab.EOS] + [vocab.ASK_QUERY]
        return (None, prompt, target)
    if task == "od":
        return (item.grid.pixels, list(OD_INSTRUCTION), target)
    return (item.page.grid.pixels, _ad_input(item.query), target)


def _sft_loss(model: Backbone, batch: list) -> torch.Tensor:
    pages = None
    if batch[0][0] is not None:
        pages = np.stack([ex[0] for ex in batch])
    seqs = [ex[1] + ex[2] for ex in batch]
    prompt_lens = [len(ex[1]) for ex in batch]
    ids, valid, _ = pad_batch(seqs)
    page_t = torch.from_numpy(pages) if pages is not None else None
    logits, _ = model.core(ids, pages=page_t, valid=valid)
    n_prefix = logits.shape[1] - ids.shape[1]
    losses = []
    for i, ex in enumerate(batch):
        t0, t1 = prompt_lens[i], len(seqs[i])
        rows = logits[i, n_prefix + t0 - 1: n_prefix + t1 - 1]
        targets = ids[i, t0:t1]
        losses.append(F.cross_entropy(rows, targets))
    return torch.stack(losses).mean()


def finetune_sft(model: Backbone, records: list[ann.SelfAnnotationRecord], inputs: dict,
                 config: TrainConfig, lora: LoraConfig) -> tuple[Backbone, TrainHistory]:
    """LoRA-adapted next-token training on serialized labels; no task head."""
    examples = []
    skipped = 0
    for rec in records:
        item = inputs.get(rec.input_ref)
        ex = _sft_example(config.task, rec, item) if item is not None else None
        if ex is None:
            skipped += 1
            continue
        examples.append(ex)
    adapted = attach(model, lora, seed=config.seed)
    if config.epochs == 0:
        history = TrainHistory()
        history.skipped_records = skipped
        return adapted, history
    train_set, val_set = split(examples, config.split_ratio, config.seed)
    before = base_weight_hash(adapted)
    history = _run_epochs(lambda b: _sft_loss(adapted, b), train_set, val_set, config,
                          adapted.parameters())
    history.skipped_records = skipped
    assert base_weight_hash(adapted) == before, "freeze contract violated"
    return adapted, history


# -- backbone pretraining (knowledge-instilling stand-in) ---------------------------


def _pretrain_batch_loss(model: Backbone, batch) -> torch.Tensor:
    pages = None
    if batch[0].page is not None:
        pages = torch.from_numpy(np.stack([ex.page for ex in batch]))
    ids, valid, _ = pad_batch([list(ex.ids) for ex in batch])
    logits, _ = model.core(ids, pages=pages, valid=valid)
    n_prefix = logits.shape[1] - ids.shape[1]
    losses = []
    for i, ex in enumerate(batch):
        t1 = len(ex.ids)
        rows = logits[i, n_prefix + ex.loss_from: n_prefix + t1 - 1]
        targets = ids[i, ex.loss_from + 1: t1]
        losses.append(F.cross_entropy(rows, targets))
    return torch.stack(losses).mean()


def pretrain_backbone(model: Backbone, examples, epochs: int = 4, batch_size: int = 16,
                      lr: float = 1e-3, seed: int = 0) -> TrainHistory:
    """NTP on the knowledge-instilling mixture (text and page demonstrations).

    Trains all parameters in place; run before any adaptation. Text-only and
    page examples are batched separately; the batch order is shuffled.
    """
    history = TrainHistory()
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    text_pool = [ex for ex in examples if ex.page is None]
    page_pool = [ex for ex in examples if ex.page is not None]
    for epoch in range(epochs):
        t0 = time.perf_counter()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xBB, epoch])))
        batches = []
        for pool in (text_pool, page_pool):
            if pool:
                batches += [[pool[i] for i in idx]
                            for idx in _batches(len(pool), batch_size, rng)]
        order = rng.permutation(len(batches))
        total, count = 0.0, 0
        for b in order:
            loss = _pretrain_batch_loss(model, batches[b])
            if not torch.isfinite(loss):
                history.aborted = True
                raise TrainingError(f"non-finite pretraining loss at epoch {epoch}", history=history)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            count += 1
        history.epochs.append({"epoch": epoch, "train_loss": total / max(count, 1),
                               "val_loss": None, "seconds": time.perf_counter() - t0})
    return history


# -- two-step pipeline --------------------------------------------------------------


@dataclass
class PipelineResult:
    model: TaskModel | Backbone
    records: list[ann.SelfAnnotationRecord]
    stats: ann.AnnotateStats
    history: TrainHistory
    annotation_counts: dict


def annotate_task(task: str, items, backend, od_strategy: str = "multi-turn",
                  fuzzy_sim: float = 0.6, fuzzy_stop_px: int = 30):
    """Step one: produce one label per item with the requested strategy."""
    if task == "ir":
        return ann.annotate_ir(items, backend)
    if task == "ad":
        return ann.annotate_ad(items, backend)
    if od_strategy in ("one-turn", "multi-turn"):
        return ann.annotate_od_direct(items, backend, mode=od_strategy)
    records, stats = [], ann.AnnotateStats()
    for page in items:
        start = len(backend.transcript)
        if od_strategy == "fuzzy":
            result = ann.fuzzy_locate(page, backend, sim_threshold=fuzzy_sim, stop_px=fuzzy_stop_px)
            strategy = "fuzzy"
        elif od_strategy == "ocr":
            fuzzy = ann.fuzzy_locate(page, backend, sim_threshold=fuzzy_sim, stop_px=fuzzy_stop_px)
            result = ann.ocr_anchor(page, backend, ann.GlyphMapOcr(page),
                                    object_box=None if fuzzy.fallback else fuzzy.box,
                                    sim_threshold=fuzzy_sim, stop_px=fuzzy_stop_px)
            strategy = "ocr"
        else:
            raise ConfigurationError(f"unknown od strategy {od_strategy!r}")
        if getattr(result, "fallback", False):
            stats.fallbacks += 1
        records.append(ann.SelfAnnotationRecord(page.id, "od", strategy, result.box,
                                                ann._take_transcript(backend, start)))
        stats.produced += 1
    return records, stats


def run_pipeline(task: str, items, backend, base_model: Backbone, train_cfg: TrainConfig,
                 head_cfg: HeadConfig | None = None, lora_cfg: LoraConfig | None = None,
                 od_strategy: str = "multi-turn", fuzzy_sim: float = 0.6,
                 fuzzy_stop_px: int = 30) -> PipelineResult:
    """Self-annotate, then re-train the expression path for the task."""
    records, stats = annotate_task(task, items, backend, od_strategy=od_strategy,
                                   fuzzy_sim=fuzzy_sim, fuzzy_stop_px=fuzzy_stop_px)
    inputs = {item.id: item for item in items}
    lora_cfg = lora_cfg or LoraConfig()
    if head_cfg is None:
        head_cfg = HeadConfig(kind={"ir": "embedding", "od": "regression", "ad": "classification"}[task])
    if train_cfg.mode == "sft":
        model, history = finetune_sft(base_model, records, inputs, train_cfg, lora_cfg)
    else:
        if train_cfg.mode == "full":
            backbone = attach(base_model, lora_cfg, seed=train_cfg.seed)
        else:  # head-only: frozen copy, no adapters
            backbone = copy.deepcopy(base_model)
            for p in backbone.parameters():
                p.requires_grad_(False)
        task_model = TaskModel(backbone, head_cfg)
        model, history = finetune(task_model, records, inputs, train_cfg)
    counts = {"produced": stats.produced, "skipped_empty": stats.skipped_empty,
              "parse_errors": stats.parse_errors, "fallbacks": stats.fallbacks}
    return PipelineResult(model=model, records=records, stats=stats, history=history,
                          annotation_counts=counts)


def train_config_meta(config: TrainConfig) -> dict:
    return asdict(config)
