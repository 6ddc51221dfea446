"""Metrics, ranking, the NTP-probability anomaly baseline, latency, and reports.

Ranking ties break by candidate id ascending; AUROC uses the rank (pairwise)
formulation with ties counting one half; AUPRC is average precision with
equal scores collapsed into a single cut.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import vocab
from .backbone import Backbone, PatchGrid
from .batching import embed_texts
from .boxes import BoundingBox
from .errors import EvaluationError
from .heads import TaskModel, predict_anomaly, predict_box
from .io import canonical_json

IR_COLUMNS = ("MRR", "R@1", "R@3", "R@5", "R@10")
OD_COLUMNS = ("IoU", "Time")
AD_COLUMNS = ("Acc", "AUROC", "AUPRC", "Time")
ROW_ORDER = ("base", "ntp-hard", "ntp-softmax", "sft", "head-only", "full")


@dataclass
class RetrievalIndex:
    ids: list[str]
    embeddings: torch.Tensor  # (n, d), unit rows

    def __post_init__(self):
        if len(self.ids) != len(set(self.ids)):
            raise EvaluationError("candidate ids must be unique")
        norms = self.embeddings.norm(dim=-1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            raise EvaluationError("index embeddings must be unit-norm")


def rank(query_emb: torch.Tensor, index: RetrievalIndex, truth_id: str) -> int:
    """1-based rank of the golden candidate under cosine scoring."""
    if truth_id not in index.ids:
        raise EvaluationError(f"truth id {truth_id!r} missing from index")
    scores = (index.embeddings @ query_emb).numpy()
    t = index.ids.index(truth_id)
    higher = int(np.sum(scores > scores[t]))
    tied_lower_id = sum(1 for j, s in enumerate(scores)
                        if s == scores[t] and index.ids[j] < truth_id)
    return 1 + higher + tied_lower_id


def mrr(ranks) -> float:
    ranks = list(ranks)
    if not ranks:
        raise EvaluationError("mrr needs at least one rank")
    return float(np.mean([1.0 / r for r in ranks]))


def recall_at_k(ranks, k: int) -> float:
    ranks = list(ranks)
    if not ranks:
        raise EvaluationError("recall_at_k needs at least one rank")
    if k < 1:
        raise EvaluationError("k must be >= 1")
    return float(np.mean([1.0 if r <= k else 0.0 for r in ranks]))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def accuracy(preds, labels) -> float:
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise EvaluationError("preds and labels must have equal length")
    if not preds:
        raise EvaluationError("accuracy needs at least one item")
    return float(np.mean([1.0 if int(p) == int(l) else 0.0 for p, l in zip(preds, labels)]))


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counting 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise EvaluationError("auroc needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    r = 1
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (r + r + (j - i))
        r += j - i + 1
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def auprc(scores, labels) -> float:
    """Average precision: precision at each cut weighted by recall increments,
    with equal scores treated as one cut."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise EvaluationError("auprc needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i:j + 1].sum())
        seen += j - i + 1
        recall = tp / n_pos
        precision = tp / seen
        ap += precision * (recall - prev_recall)
        prev_recall = recall
        i = j + 1
    return float(ap)


def roc_curve_points(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) at every distinct threshold, for plot emission."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    points = [(0.0, 0.0)]
    for thr in sorted(set(scores), reverse=True):
        sel = scores >= thr
        tp = int((labels[sel] == 1).sum())
        fp = int((labels[sel] == 0).sum())
        points.append((fp / max(n_neg, 1), tp / max(n_pos, 1)))
    return points


def pr_curve_points(scores, labels) -> list[tuple[float, float]]:
    """(recall, precision) at every distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    points = []
    for thr in sorted(set(scores), reverse=True):
        sel = scores >= thr
        tp = int((labels[sel] == 1).sum())
        points.append((tp / max(n_pos, 1), tp / max(int(sel.sum()), 1)))
    return points


# -- task evaluation ---------------------------------------------------------------


def build_index(model, docs, batch_size: int = 32) -> RetrievalIndex:
    bb = model.backbone if isinstance(model, TaskModel) else model
    embs = embed_texts(bb, [list(d.tokens) for d in docs], batch_size=batch_size)
    return RetrievalIndex(ids=[d.id for d in docs], embeddings=embs)


def ir_ranks(model, pool_docs, eval_pairs) -> list[int]:
    """Ranks of the golden doc for each (query tokens, doc id) evaluation pair."""
    bb = model.backbone if isinstance(model, TaskModel) else model
    index = build_index(bb, pool_docs)
    queries = [[vocab.BOS, *q, vocab.EOS] for q, _ in eval_pairs]
    q_embs = embed_texts(bb, queries)
    return [rank(q_embs[i], index, doc_id) for i, (_, doc_id) in enumerate(eval_pairs)]


def ir_metrics(ranks_list) -> dict:
    return {
        "MRR": mrr(ranks_list),
        "R@1": recall_at_k(ranks_list, 1),
        "R@3": recall_at_k(ranks_list, 3),
        "R@5": recall_at_k(ranks_list, 5),
        "R@10": recall_at_k(ranks_list, 10),
    }


def od_metrics(model: TaskModel, pages, truth_boxes: dict, measure_time: bool = False) -> dict:
    preds = {p.id: predict_box(model, p.grid, list(vocab_od_instruction())) for p in pages}
    ious = [iou(preds[p.id], truth_boxes[p.id]) for p in pages]
    out = {"IoU": float(np.mean(ious)), "Time": None}
    if measure_time and len(pages) >= 10:
        out["Time"] = latency(lambda p: predict_box(model, p.grid, list(vocab_od_instruction())), pages)
    return out


def vocab_od_instruction():
    return (vocab.BOS, vocab.LOC_ALL)


def ad_scores_head(model: TaskModel, pairs) -> list[float]:
    return [predict_anomaly(model, pair.page.grid, [vocab.BOS, *pair.query, vocab.ASK_YESNO])
            for pair in pairs]


def ad_ntp_baseline(model: Backbone, pairs, scheme: str = "softmax") -> tuple[list[float], int]:
    """Scores from the NTP head: hard 1/0 from greedy yes/no generation, or
    the renormalized softmax mass of the yes token against the no token."""
    if scheme not in ("hard", "softmax"):
        raise EvaluationError(f"unknown scheme {scheme!r}")
    scores = []
    flagged = 0
    for pair in pairs:
        prompt = [vocab.BOS, *pair.query, vocab.ASK_YESNO]
        page = pair.page.grid
        if scheme == "hard":
            out = model.generate(prompt, page=page, max_new=1, mode="greedy")
            tok = out[len(prompt)] if len(out) > len(prompt) else None
            if tok == vocab.YES:
                scores.append(1.0)
            elif tok == vocab.NO:
                scores.append(0.0)
            else:
                scores.append(0.0)
                flagged += 1
        else:
            p_yes = model.token_prob(prompt, vocab.YES, page=page)
            p_no = model.token_prob(prompt, vocab.NO, page=page)
            scores.append(p_yes / (p_yes + p_no))
    return scores, flagged


def ad_metrics(scores, labels, times=None) -> dict:
    preds = [1 if s >= 0.5 else 0 for s in scores]
    return {
        "Acc": accuracy(preds, labels),
        "AUROC": auroc(scores, labels),
        "AUPRC": auprc(scores, labels),
        "Time": times,
    }


def latency(fn, cases) -> float:
    """Minutes per 100 cases, single measurement pass after one warm-up call."""
    cases = list(cases)
    if len(cases) < 10:
        raise EvaluationError("latency needs at least 10 cases")
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        fn(cases[0])  # warm-up excluded from timing
        t0 = time.perf_counter()
        for case in cases:
            fn(case)
        total = time.perf_counter() - t0
    finally:
        torch.set_num_threads(n_threads)
    return total * (100.0 / len(cases)) / 60.0


# -- reports ------------------------------------------------------------------------


@dataclass
class MetricReport:
    task: str
    rows: dict[str, dict] = field(default_factory=dict)
    absent: list[str] = field(default_factory=list)
    runtime_minutes_per_100: dict[str, float] = field(default_factory=dict)
    config_fingerprint: str = ""
    threads: int = 1
    preset: str = ""

    def columns(self) -> tuple[str, ...]:
        return {"ir": IR_COLUMNS, "od": OD_COLUMNS, "ad": AD_COLUMNS}[self.task]

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "rows": self.rows,
            "absent": self.absent,
            "runtime_minutes_per_100": self.runtime_minutes_per_100,
            "config_fingerprint": self.config_fingerprint,
            "threads": self.threads,
            "preset": self.preset,
        }

    def validate(self) -> None:
        for name, row in self.rows.items():
            for col, value in row.items():
                if col == "Time" or value is None:
                    continue
                if not 0.0 <= value <= 1.0:
                    raise EvaluationError(f"{name}/{col}={value} outside [0,1]")


def report_from_json(data: dict) -> MetricReport:
    return MetricReport(task=data["task"], rows=data["rows"],
                        absent=data.get("absent", []),
                        runtime_minutes_per_100=data.get("runtime_minutes_per_100", {}),
                        config_fingerprint=data.get("config_fingerprint", ""),
                        threads=data.get("threads", 1), preset=data.get("preset", ""))


def render_table(report: MetricReport) -> str:
    cols = report.columns()
    names = [n for n in ROW_ORDER if n in report.rows]
    names += [n for n in report.rows if n not in names]
    width = max([len("method")] + [len(n) for n in names]) + 2
    header = "method".ljust(width) + "  ".join(c.rjust(8) for c in cols)
    lines = [f"task: {report.task}", header, "-" * len(header)]
    for name in names:
        row = report.rows[name]
        cells = []
        for c in cols:
            v = row.get(c)
            cells.append("absent".rjust(8) if v is None else f"{v:8.3f}")
        lines.append(name.ljust(width) + "  ".join(cells))
    if report.absent:
        lines.append("absent: " + ", ".join(report.absent))
    return "\n".join(lines) + "\n"


def report_to_text(reports: list[MetricReport]) -> str:
    return "\n".join(render_table(r) for r in reports)


def save_report(path, report: MetricReport) -> None:
    report.validate()
    from pathlib import Path

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(canonical_json(report.to_json()) + "\n", encoding="utf-8")
