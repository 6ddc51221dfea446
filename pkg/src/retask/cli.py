"""Command-line entry point: data generation, staged runs, and report assembly.

Every run is driven by one JSON config (schema-validated before any work) and
explicit seeds; artifacts are reproducible byte-for-byte from the frozen
config copy written next to them. Stages leave completion markers carrying
the config fingerprint, so `--stage all` resumes cleanly.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import annotate as ann
from . import eval as ev
from . import presets, synth, vocab
from .adapters import LoraConfig, save_delta, load_delta
from .analysis import layer_curve
from .backbone import Backbone, ModelConfig, load_checkpoint, save_checkpoint
from .errors import (
    ConfigurationError, DataError, EvaluationError, RetaskError, StageError,
    TrainingError,
)
from .heads import HeadConfig, TaskModel, predict_box
from .io import canonical_json, fingerprint, read_jsonl, write_jsonl
from .train import (
    TrainConfig, annotate_task, base_weight_hash, build_examples, finetune,
    finetune_sft, pretrain_backbone, run_pipeline,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_EVALUATION = 5

OUTPUT_ROOT_ENV = "RETASK_OUT"

STAGES = ("pretrain", "annotate", "train", "eval", "cka", "all")

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["task", "out_dir"],
    "additionalProperties": False,
    "properties": {
        "task": {"enum": ["ir", "od", "ad"]},
        "out_dir": {"type": "string"},
        "preset_name": {"type": "string"},
        "seeds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "integer"} for k in
                           ("data", "eval_data", "pretrain", "annotate", "train", "lora")},
        },
        "model": {"type": "object"},
        "lora": {"type": "object"},
        "head": {"type": "object"},
        "train": {"type": "object"},
        "pretrain": {"type": "object"},
        "data": {"type": "object"},
        "backend": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["intrinsic", "scripted"]},
                "quality": {"type": "number", "minimum": 0.0, "maximum": 1.0},
                "visibility": {"type": "number"},
            },
        },
        "od_strategy": {"enum": ["one-turn", "multi-turn", "fuzzy", "ocr"]},
        "fuzzy": {"type": "object"},
        "baselines": {"type": "array", "items": {"enum": ["sft", "head-only"]}},
        "timing": {"type": "boolean"},
        "cka_probes": {"type": "integer", "minimum": 2},
    },
}

DEFAULT_SEEDS = {"data": 11, "eval_data": 22, "pretrain": 7, "annotate": 3, "train": 5, "lora": 5}


def default_config(task: str) -> dict:
    data = {
        "ir": dict(presets.IR_DESK),
        "od": dict(presets.OD_DESK),
        "ad": dict(presets.AD_DESK),
    }[task]
    head_kind = {"ir": "embedding", "od": "regression", "ad": "classification"}[task]
    return {
        "task": task,
        "out_dir": f"runs/{task}",
        "preset_name": f"{task}-desk",
        "seeds": dict(DEFAULT_SEEDS),
        "model": asdict(presets.DESK_MODEL),
        "lora": {"rank": 8, "alpha": 16.0, "targets": ["query", "key", "value", "output"]},
        "head": {"kind": head_kind},
        "train": {"mode": "full", "lr": 1e-4, "batch_size": 4, "epochs": None, "split_ratio": 0.9},
        "pretrain": dict(presets.PRETRAIN_DESK),
        "data": data,
        "backend": {"kind": "intrinsic"},
        "od_strategy": "multi-turn",
        "fuzzy": {"sim_threshold": 0.6, "stop_px": 30},
        "baselines": ["sft", "head-only"],
        "timing": False,
        "cka_probes": 64,
    }


def load_config(path: str, seed_override: int | None = None) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if "task" not in user:
        raise ConfigurationError("config must name a task")
    merged = default_config(user["task"])
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key].update(value)
        else:
            merged[key] = value
    try:
        jsonschema.validate(merged, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigurationError(f"config invalid: {exc.message}") from exc
    if seed_override is not None:
        merged["seeds"] = {k: seed_override + i for i, k in
                           enumerate(("data", "eval_data", "pretrain", "annotate", "train", "lora"))}
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(merged["out_dir"]):
        merged["out_dir"] = str(Path(root) / merged["out_dir"])
    ModelConfig(**merged["model"])  # validate eagerly
    merged["lora"]["targets"] = list(merged["lora"]["targets"])
    LoraConfig(rank=merged["lora"]["rank"], alpha=merged["lora"]["alpha"],
               targets=tuple(merged["lora"]["targets"]))
    HeadConfig(**merged["head"])
    return merged


class Paths:
    def __init__(self, config: dict):
        self.out = Path(config["out_dir"])
        self.data = self.out / "data"
        self.vault = self.out / "vault"
        self.markers = self.out / "markers"
        self.reports = self.out / "reports"
        self.base_ckpt = self.out / "base.rtsk"
        self.config_copy = self.out / "config.frozen.json"

    def delta(self, mode: str) -> Path:
        return self.out / f"delta_{mode}.rtsk"

    def annotations(self) -> Path:
        return self.out / "annotations.jsonl"

    def history(self, mode: str) -> Path:
        return self.out / f"history_{mode}.json"

    def marker(self, stage: str) -> Path:
        return self.markers / f"{stage}.json"


def _freeze_config(config: dict, paths: Paths) -> None:
    paths.out.mkdir(parents=True, exist_ok=True)
    paths.config_copy.write_text(canonical_json(config) + "\n", encoding="utf-8")


def _write_marker(paths: Paths, stage: str, config: dict) -> None:
    paths.markers.mkdir(parents=True, exist_ok=True)
    paths.marker(stage).write_text(
        canonical_json({"stage": stage, "config_fingerprint": fingerprint(config)}) + "\n",
        encoding="utf-8")


def _marker_fresh(paths: Paths, stage: str, config: dict) -> bool:
    p = paths.marker(stage)
    if not p.exists():
        return False
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError:
        return False
    return data.get("config_fingerprint") == fingerprint(config)


def _require(paths: Paths, stage: str, artifact: Path) -> None:
    if not artifact.exists():
        raise StageError(f"stage {stage!r} requires missing artifact {artifact}")


# -- data loading -------------------------------------------------------------------


def _load_task_items(config: dict, paths: Paths):
    task = config["task"]
    if task == "ir":
        return synth.read_ir_corpus(paths.data)
    if task == "od":
        return synth.read_pages(paths.data / "train_pages")
    pages = synth.read_pages(paths.data / "train_pages")
    return synth.read_ad_pairs(paths.data / "train_pairs.jsonl", pages)


def _load_eval_items(config: dict, paths: Paths):
    task = config["task"]
    if task == "ir":
        return None  # pool lives in the corpus manifests
    if task == "od":
        return synth.read_pages(paths.data / "eval_pages")
    pages = synth.read_pages(paths.data / "eval_pages")
    return synth.read_ad_pairs(paths.data / "eval_pairs.jsonl", pages)


def make_backend(config: dict, paths: Paths, model: Backbone | None):
    spec = config["backend"]
    if spec["kind"] == "intrinsic":
        if model is None:
            raise StageError("intrinsic backend needs the pretrained base checkpoint")
        return ann.IntrinsicAnnotator(model, seed=config["seeds"]["annotate"])
    vault = synth.read_vault(paths.vault)
    return synth.scripted_annotator(vault, spec.get("quality", 1.0),
                                    seed=config["seeds"]["annotate"],
                                    visibility=spec.get("visibility", 0.6))


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(config: dict) -> None:
    """Generate the task corpus and write the vault to its own directory."""
    paths = Paths(config)
    _freeze_config(config, paths)
    task = config["task"]
    d = config["data"]
    seeds = config["seeds"]
    if task == "ir":
        corpus, vault = synth.gen_ir_corpus(d["n_docs"], d["pool_size"], d["n_eval_pairs"],
                                            seed=seeds["data"])
        synth.write_ir_corpus(paths.data, corpus)
    elif task == "od":
        train_pages, vault = synth.gen_od_pages(d["n_train_pages"], seed=seeds["data"],
                                                page_dim=d["page_dim"])
        eval_pages, eval_vault = synth.gen_od_pages(d["n_eval_pages"], seed=seeds["eval_data"],
                                                    page_dim=d["page_dim"])
        synth.write_pages(paths.data / "train_pages", train_pages)
        synth.write_pages(paths.data / "eval_pages", eval_pages)
        vault.pages.update(eval_vault.pages)
        vault.doc_queries.update(eval_vault.doc_queries)
    else:
        train_pairs, vault = synth.gen_ad_set(d["n_train_pos"], d["n_train_neg"],
                                              seed=seeds["data"], page_dim=d["page_dim"])
        eval_pairs, eval_vault = synth.gen_ad_set(d["n_eval_pos"], d["n_eval_neg"],
                                                  seed=seeds["eval_data"], page_dim=d["page_dim"])
        synth.write_pages(paths.data / "train_pages", [p.page for p in train_pairs])
        synth.write_pages(paths.data / "eval_pages", [p.page for p in eval_pairs])
        synth.write_ad_pairs(paths.data / "train_pairs.jsonl", train_pairs)
        synth.write_ad_pairs(paths.data / "eval_pairs.jsonl", eval_pairs)
        vault.pages.update(eval_vault.pages)
        vault.doc_queries.update(eval_vault.doc_queries)
        vault.ad_labels.update(eval_vault.ad_labels)
    synth.write_vault(paths.vault, vault)
    os.chmod(paths.vault, 0o700)
    (paths.vault / "VAULT").write_text(
        "Ground truth for evaluation only. Annotation and training must not read this directory.\n")
    _write_marker(paths, "gen-data", config)
    print(f"gen-data: wrote {paths.data} and vault")


def stage_pretrain(config: dict, paths: Paths) -> None:
    model = Backbone(ModelConfig(**config["model"]))
    pc = config["pretrain"]
    examples = synth.gen_pretrain_corpus(pc["n_docs"], seed=config["seeds"]["pretrain"],
                                         n_page=pc.get("n_page", 0),
                                         page_dim=pc.get("page_dim", config["model"]["page_dim"]))
    history = pretrain_backbone(model, examples, epochs=pc["epochs"],
                                batch_size=pc["batch_size"], lr=pc["lr"],
                                seed=config["seeds"]["pretrain"])
    save_checkpoint(model, paths.base_ckpt)
    paths.history("pretrain").write_text(canonical_json(history.to_json()) + "\n")
    _write_marker(paths, "pretrain", config)
    print(f"pretrain: loss {history.epochs[-1]['train_loss']:.4f} -> {paths.base_ckpt}")


def stage_annotate(config: dict, paths: Paths) -> None:
    _require(paths, "annotate", paths.marker("gen-data"))
    items = _load_task_items(config, paths)
    if config["task"] == "ir":
        items = items.train_docs
    model = None
    if config["backend"]["kind"] == "intrinsic":
        _require(paths, "annotate", paths.base_ckpt)
        model = load_checkpoint(paths.base_ckpt)
    backend = make_backend(config, paths, model)
    records, stats = annotate_task(config["task"], items, backend,
                                   od_strategy=config["od_strategy"],
                                   fuzzy_sim=config["fuzzy"]["sim_threshold"],
                                   fuzzy_stop_px=config["fuzzy"]["stop_px"])
    ann.write_records(paths.annotations(), records)
    _write_marker(paths, "annotate", config)
    print(f"annotate: {stats.produced} records "
          f"(skipped {stats.skipped_empty}, parse errors {stats.parse_errors}, "
          f"fallbacks {stats.fallbacks}) -> {paths.annotations()}")


def _train_one_mode(config: dict, paths: Paths, mode: str) -> None:
    base = load_checkpoint(paths.base_ckpt)
    records = ann.read_records(paths.annotations())
    items = _load_task_items(config, paths)
    if config["task"] == "ir":
        items = items.train_docs
    inputs = {item.id: item for item in items}
    tcfg = TrainConfig(task=config["task"], mode=mode, lr=config["train"]["lr"],
                       batch_size=config["train"]["batch_size"], epochs=config["train"]["epochs"],
                       split_ratio=config["train"]["split_ratio"], seed=config["seeds"]["train"])
    lora = LoraConfig(rank=config["lora"]["rank"], alpha=config["lora"]["alpha"],
                      targets=tuple(config["lora"]["targets"]))
    head_cfg = HeadConfig(**config["head"])
    if mode == "sft":
        adapted, history = finetune_sft(base, records, inputs, tcfg, lora)
        save_delta(paths.delta(mode), adapted, None, lora)
    else:
        if mode == "full":
            from .adapters import attach

            backbone = attach(base, lora, seed=config["seeds"]["lora"])
        else:
            backbone = copy.deepcopy(base)
            for p in backbone.parameters():
                p.requires_grad_(False)
        tm = TaskModel(backbone, head_cfg)
        _, history = finetune(tm, records, inputs, tcfg)
        save_delta(paths.delta(mode), tm.backbone, tm.head,
                   lora if mode == "full" else None, head_meta=head_cfg.as_meta())
    assert base_weight_hash(load_checkpoint(paths.base_ckpt)) == base_weight_hash(base)
    paths.history(mode).write_text(canonical_json(history.to_json()) + "\n")
    last = history.epochs[-1] if history.epochs else {"train_loss": None}
    print(f"train[{mode}]: final loss {last['train_loss']} -> {paths.delta(mode)}")


def stage_train(config: dict, paths: Paths, modes: list[str] | None = None) -> None:
    _require(paths, "train", paths.base_ckpt)
    _require(paths, "train", paths.annotations())
    for mode in modes or [config["train"]["mode"]]:
        _train_one_mode(config, paths, mode)
    _write_marker(paths, "train", config)


def _load_task_model(paths: Paths, base: Backbone, mode: str) -> TaskModel | Backbone | None:
    p = paths.delta(mode)
    if not p.exists():
        return None
    adapted, head, meta = load_delta(p, base)
    if head is None:
        if meta["head"]:
            head_cfg = HeadConfig(**meta["head"])
            return TaskModel(adapted, head_cfg)
        return adapted  # sft: plain adapted backbone
    return TaskModel(adapted, HeadConfig(**meta["head"]), head=head)


def od_ntp_predict(model: Backbone, page) -> tuple:
    """Decode a coordinate string via next-token generation and parse it."""
    prompt = [vocab.BOS, vocab.LOC_ALL]
    out = model.generate(prompt, page=page.grid, max_new=24, mode="greedy")
    text = vocab.decode([t for t in out[len(prompt):] if t != vocab.EOS])
    try:
        return ann.parse_box_text(text, page.grid.dim), False
    except Exception:
        return None, True


def _eval_ir(config, paths, base, rows, timing):
    corpus = synth.read_ir_corpus(paths.data)
    vault = synth.read_vault(paths.vault)
    pairs = vault.ir_eval_pairs()
    out = {}
    for name, model in rows.items():
        if model is None:
            continue
        ranks = ev.ir_ranks(model, corpus.pool_docs, pairs)
        out[name] = ev.ir_metrics(ranks)
    return out, {}


def _eval_od(config, paths, base, rows, timing):
    pages = _load_eval_items(config, paths)
    vault = synth.read_vault(paths.vault)
    truth = {p.id: vault.page_truth(p.id).truth_box for p in pages}
    out = {}
    times = {}
    instruction = [vocab.BOS, vocab.LOC_ALL]
    for name, model in rows.items():
        if model is None:
            continue
        if isinstance(model, TaskModel):
            preds = {p.id: predict_box(model, p.grid, instruction) for p in pages}
            ious = [ev.iou(preds[p.id], truth[p.id]) for p in pages]
            if timing:
                times[name] = ev.latency(lambda p: predict_box(model, p.grid, instruction),
                                         pages[:100])
        else:  # next-token decoding route (base and sft rows)
            ious = []
            for p in pages:
                box, failed = od_ntp_predict(model, p)
                ious.append(0.0 if failed else ev.iou(box, truth[p.id]))
            if timing:
                times[name] = ev.latency(lambda p: od_ntp_predict(model, p), pages[:100])
        out[name] = {"IoU": float(np.mean(ious)), "Time": times.get(name)}
    return out, times


def _eval_ad(config, paths, base, rows, timing):
    pairs = _load_eval_items(config, paths)
    vault = synth.read_vault(paths.vault)
    labels = [vault.ad_label(p.id) for p in pairs]
    out = {}
    times = {}
    score_sets = {}
    for scheme in ("hard", "softmax"):
        scores, _ = ev.ad_ntp_baseline(base, pairs, scheme=scheme)
        out[f"ntp-{scheme}"] = ev.ad_metrics(scores, labels)
        score_sets[f"ntp-{scheme}"] = scores
    if timing:
        times["ntp-softmax"] = ev.latency(
            lambda p: ev.ad_ntp_baseline(base, [p], scheme="softmax"), pairs[:100])
        out["ntp-softmax"]["Time"] = times["ntp-softmax"]
    for name, model in rows.items():
        if model is None or name == "base":
            continue
        if isinstance(model, TaskModel):
            scores = ev.ad_scores_head(model, pairs)
            if timing:
                times[name] = ev.latency(
                    lambda p: ev.ad_scores_head(model, [p]), pairs[:100])
        else:  # sft: renormalized yes/no token mass of the tuned model
            scores, _ = ev.ad_ntp_baseline(model, pairs, scheme="softmax")
            if timing:
                times[name] = ev.latency(
                    lambda p: ev.ad_ntp_baseline(model, [p], scheme="softmax"), pairs[:100])
        out[name] = ev.ad_metrics(scores, labels, times.get(name))
        score_sets[name] = scores
    return out, score_sets


def stage_eval(config: dict, paths: Paths, emit_plot_data: bool = False) -> None:
    _require(paths, "eval", paths.base_ckpt)
    base = load_checkpoint(paths.base_ckpt)
    rows = {"base": base}
    for mode in ("sft", "head-only", "full"):
        rows[mode] = _load_task_model(paths, base, mode)
    task = config["task"]
    timing = bool(config.get("timing"))
    if task == "ir":
        metrics, extra = _eval_ir(config, paths, base, rows, timing)
    elif task == "od":
        metrics, extra = _eval_od(config, paths, base, rows, timing)
    else:
        metrics, extra = _eval_ad(config, paths, base, rows, timing)
    absent = [mode for mode in ("sft", "head-only", "full") if rows.get(mode) is None]
    report = ev.MetricReport(task=task, rows=metrics, absent=absent,
                             runtime_minutes_per_100={k: v for k, v in
                                                      (extra if task == "od" else {}).items()},
                             config_fingerprint=fingerprint(config),
                             threads=torch.get_num_threads(),
                             preset=config.get("preset_name", ""))
    ev.save_report(paths.reports / f"{task}_metrics.json", report)
    (paths.reports / f"{task}_table.txt").write_text(ev.render_table(report))
    if emit_plot_data and task == "ad":
        vault = synth.read_vault(paths.vault)
        pairs = _load_eval_items(config, paths)
        labels = [vault.ad_label(p.id) for p in pairs]
        for name, scores in extra.items():
            rows_csv = ["x,y"]
            rows_csv += [f"{x:.6f},{y:.6f}" for x, y in ev.roc_curve_points(scores, labels)]
            (paths.reports / f"roc_{name}.csv").write_text("\n".join(rows_csv) + "\n")
            rows_csv = ["x,y"]
            rows_csv += [f"{x:.6f},{y:.6f}" for x, y in ev.pr_curve_points(scores, labels)]
            (paths.reports / f"pr_{name}.csv").write_text("\n".join(rows_csv) + "\n")
    _write_marker(paths, "eval", config)
    print(ev.render_table(report))


def stage_cka(config: dict, paths: Paths) -> None:
    _require(paths, "cka", paths.base_ckpt)
    _require(paths, "cka", paths.delta("full"))
    base = load_checkpoint(paths.base_ckpt)
    adapted = _load_task_model(paths, base, "full")
    n = config["cka_probes"]
    if config["task"] == "ir":
        corpus = synth.read_ir_corpus(paths.data)
        probes = [list(d.tokens) for d in corpus.pool_docs[:n]]
    else:
        pages = _load_task_items(config, paths)
        if config["task"] == "ad":
            pages = [p.page for p in pages]
        probes = [([vocab.BOS, vocab.LOC_ALL], p.grid) for p in pages[:n]]
    curve = layer_curve(base, adapted, probes, policy="full")
    paths.reports.mkdir(parents=True, exist_ok=True)
    (paths.reports / "cka_curve.csv").write_text(curve.to_csv())
    write_jsonl(paths.reports / "cka_curve.jsonl", curve.to_rows())
    _write_marker(paths, "cka", config)
    print(f"cka: {['%.3f' % v for v in curve.values]}")


def cmd_run(config: dict, stage: str, emit_plot_data: bool = False) -> None:
    paths = Paths(config)
    _freeze_config(config, paths)
    if stage == "all":
        plan = ["pretrain", "annotate", "train", "eval", "cka"]
    else:
        plan = [stage]
    for st in plan:
        if stage == "all" and st != "eval" and _marker_fresh(paths, st, config):
            print(f"{st}: marker fresh, skipping")
            continue
        if st == "pretrain":
            stage_pretrain(config, paths)
        elif st == "annotate":
            stage_annotate(config, paths)
        elif st == "train":
            modes = None
            if stage == "all":
                modes = ["full"] + list(config.get("baselines", []))
            stage_train(config, paths, modes)
        elif st == "eval":
            stage_eval(config, paths, emit_plot_data)
        elif st == "cka":
            stage_cka(config, paths)
        else:
            raise ConfigurationError(f"unknown stage {st!r}")


def cmd_report(out_dir: str) -> None:
    reports_dir = Path(out_dir) / "reports"
    found = sorted(reports_dir.glob("*_metrics.json")) if reports_dir.exists() else []
    if not found:
        print("no metric reports found; nothing to do")
        return
    tables = []
    for path in found:
        report = ev.report_from_json(json.loads(path.read_text()))
        tables.append(ev.render_table(report))
    combined = "\n".join(tables)
    (reports_dir / "combined_tables.txt").write_text(combined)
    print(combined)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retask",
        description="Adapt a frozen toy LM to task-native outputs using its own "
                    "generated labels; includes baselines, metrics and reports.",
        epilog=f"Exit codes: 0 ok, {EXIT_CONFIG} config, {EXIT_DATA} data, "
               f"{EXIT_TRAINING} training, {EXIT_EVALUATION} evaluation. "
               f"Set ${OUTPUT_ROOT_ENV} to relocate relative out_dir paths.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the run config JSON")
    common.add_argument("--threads", type=int, default=1, help="torch thread count")
    common.add_argument("--seed", type=int, default=None,
                        help="override every seed in the config (offsets per stream)")
    common.add_argument("--dry-run", action="store_true",
                        help="print the resolved config and exit")

    sub.add_parser("gen-data", parents=[common], help="generate corpus manifests and the vault")
    run = sub.add_parser("run", parents=[common], help="run pipeline stages")
    run.add_argument("--stage", choices=STAGES, default="all")
    run.add_argument("--emit-plot-data", action="store_true",
                     help="write CSV series for layer curves and PR/ROC curves")
    rep = sub.add_parser("report", help="assemble text tables from metric reports")
    rep.add_argument("--out-dir", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.out_dir)
            return EXIT_OK
        torch.set_num_threads(max(1, args.threads))
        config = load_config(args.config, seed_override=args.seed)
        if args.dry_run:
            print(canonical_json(config))
            return EXIT_OK
        if args.command == "gen-data":
            cmd_gen_data(config)
        elif args.command == "run":
            cmd_run(config, args.stage, emit_plot_data=args.emit_plot_data)
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, StageError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVALUATION
    except RetaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
