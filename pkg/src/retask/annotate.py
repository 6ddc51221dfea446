"""Self-annotation: turn unannotated inputs into task labels via a generative backend.

Backends speak text; this module builds instruction token sequences, parses
coordinate strings, runs the bisection-based fuzzy localization, anchors
boxes on OCR text hits, and maps yes/no responses to binary labels. Ground
truth never enters here: backends are sealed oracles or the model itself.
"""

from __future__ import annotations

import json
import re
import subprocess
import sys
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import vocab
from .backbone import Backbone, PatchGrid
from .boxes import BoundingBox, merge_boxes
from .errors import ParseError
from .io import write_jsonl, read_jsonl

STRATEGIES = ("ir-query", "direct-one-turn", "direct-multi-turn", "fuzzy", "ocr", "ad-yesno")


class AnnotatorBackend(Protocol):
    transcript: list[tuple[str, str]]

    def generate_query(self, doc) -> str: ...
    def describe(self, page, region: BoundingBox | None = None) -> str: ...
    def ask_yes_no(self, page, question: str) -> str: ...
    def locate(self, page, instruction) -> str: ...
    def title_of(self, page) -> str: ...
    def source_of(self, page) -> str: ...


@dataclass
class SelfAnnotationRecord:
    input_ref: str
    task: str
    strategy: str
    label: object
    transcript: list[tuple[str, str]] = field(default_factory=list)

    def to_row(self) -> dict:
        label = self.label
        if isinstance(label, BoundingBox):
            label = list(label.as_tuple())
        return {
            "input_ref": self.input_ref,
            "task": self.task,
            "strategy": self.strategy,
            "label": label,
            "transcript": [list(t) for t in self.transcript],
        }


@dataclass
class AnnotateStats:
    produced: int = 0
    skipped_empty: int = 0
    parse_errors: int = 0
    fallbacks: int = 0


def write_records(path, records: list[SelfAnnotationRecord]) -> None:
    write_jsonl(path, [r.to_row() for r in records])


def read_records(path) -> list[SelfAnnotationRecord]:
    out = []
    for row in read_jsonl(path):
        label = row["label"]
        if row["task"] == "od" and isinstance(label, list):
            label = BoundingBox(*label)
        out.append(SelfAnnotationRecord(row["input_ref"], row["task"], row["strategy"],
                                        label, [tuple(t) for t in row["transcript"]]))
    return out


def _take_transcript(backend, start: int) -> list[tuple[str, str]]:
    return list(backend.transcript[start:])


# -- coordinate strings -----------------------------------------------------------

_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")


def parse_box_text(text: str, page_dim: int) -> BoundingBox:
    """Four reals separated by commas/whitespace, optionally bracketed.

    Values greater than 1 are read as pixel units and divided by page_dim.
    """
    numbers = [float(m) for m in _NUMBER_RE.findall(text)]
    if len(numbers) < 4:
        raise ParseError(f"expected four coordinates, got {len(numbers)}: {text!r}")
    x1, y1, x2, y2 = numbers[:4]
    if max(abs(v) for v in (x1, y1, x2, y2)) > 1.0:
        x1, y1, x2, y2 = (v / page_dim for v in (x1, y1, x2, y2))
    coords = [min(max(v, 0.0), 1.0) for v in (x1, y1, x2, y2)]
    if not (coords[0] < coords[2] and coords[1] < coords[3]):
        raise ParseError(f"degenerate box in {text!r}")
    return BoundingBox(*coords)


def box_to_text(box: BoundingBox, decimals: int = 2) -> str:
    return ", ".join(f"{v:.{decimals}f}" for v in box.as_tuple())


# -- token-level similarity ---------------------------------------------------------


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def token_jaccard(a: str, b: str) -> float:
    sa, sb = set(a.split()), set(b.split())
    union = sa | sb
    if not union:
        return 0.0
    return len(sa & sb) / len(union)


def first_token_is_yes(text: str) -> bool:
    m = re.search(r"[A-Za-z]+", text)
    return bool(m) and m.group(0).lower() == "yes"


# -- task annotators ---------------------------------------------------------------


def annotate_ir(docs, backend: AnnotatorBackend) -> tuple[list[SelfAnnotationRecord], AnnotateStats]:
    """One (generated query, doc) pair per document; the raw text is the label."""
    records = []
    stats = AnnotateStats()
    for doc in docs:
        start = len(backend.transcript)
        text = normalize_ws(backend.generate_query(doc))
        if not text or not vocab.encode(text, strict=False):
            stats.skipped_empty += 1
            continue
        records.append(SelfAnnotationRecord(doc.id, "ir", "ir-query", text,
                                            _take_transcript(backend, start)))
        stats.produced += 1
    return records, stats


_MULTI_TURN_MARKERS = (vocab.LOC_OBJECT, vocab.LOC_CAPTION, vocab.LOC_SOURCE)


def annotate_od_direct(pages, backend: AnnotatorBackend,
                       mode: str = "one-turn") -> tuple[list[SelfAnnotationRecord], AnnotateStats]:
    """Coordinate-string annotation; multi-turn merges object/caption/source boxes."""
    if mode not in ("one-turn", "multi-turn"):
        raise ValueError(f"unknown mode {mode!r}")
    records = []
    stats = AnnotateStats()
    for page in pages:
        start = len(backend.transcript)
        dim = page.grid.dim
        try:
            if mode == "one-turn":
                box = parse_box_text(backend.locate(page, [vocab.BOS, vocab.LOC_ALL]), dim)
            else:
                parts = [
                    parse_box_text(backend.locate(page, [vocab.BOS, marker]), dim)
                    for marker in _MULTI_TURN_MARKERS
                ]
                box = merge_boxes(parts)
        except ParseError:
            stats.parse_errors += 1
            continue
        strategy = "direct-one-turn" if mode == "one-turn" else "direct-multi-turn"
        records.append(SelfAnnotationRecord(page.id, "od", strategy, box,
                                            _take_transcript(backend, start)))
        stats.produced += 1
    return records, stats


@dataclass
class FuzzyResult:
    box: BoundingBox
    describe_calls: dict[str, int]
    fallback: bool = False


def fuzzy_locate(page, backend: AnnotatorBackend, sim_threshold: float = 0.6,
                 stop_px: int = 30) -> FuzzyResult:
    """Bisection localization: shrink each boundary while the crop still
    describes like the full page; a failed move backtracks, every move halves.

    Boundaries are processed bottom, top, right, left; a boundary stops once
    its step falls below stop_px.
    """
    dim = page.grid.dim
    if dim <= stop_px:
        raise ValueError(f"page dim {dim} must exceed stop_px {stop_px}")
    try:
        base_desc = normalize_ws(backend.describe(page, None))
    except Exception:
        base_desc = ""
    calls = {"bottom": 0, "top": 0, "right": 0, "left": 0}
    if not base_desc:
        return FuzzyResult(BoundingBox(0.0, 0.0, 1.0, 1.0), calls, fallback=True)

    crop = {"x1": 0.0, "y1": 0.0, "x2": float(dim), "y2": float(dim)}
    plan = [("bottom", "y2", "y1", -1), ("top", "y1", "y2", +1),
            ("right", "x2", "x1", -1), ("left", "x1", "x2", +1)]
    for name, edge, opposite, direction in plan:
        step = abs(crop[edge] - crop[opposite]) / 2.0
        while step >= stop_px:
            candidate = crop[edge] + direction * step
            extent = (candidate - crop[opposite]) if direction < 0 else (crop[opposite] - candidate)
            if extent >= 1.0:
                trial = dict(crop)
                trial[edge] = candidate
                region = BoundingBox(trial["x1"] / dim, trial["y1"] / dim,
                                     trial["x2"] / dim, trial["y2"] / dim)
                calls[name] += 1
                try:
                    desc = normalize_ws(backend.describe(page, region))
                except Exception:
                    return FuzzyResult(BoundingBox(0.0, 0.0, 1.0, 1.0), calls, fallback=True)
                if token_jaccard(desc, base_desc) > sim_threshold:
                    crop = trial
            step /= 2.0
    box = BoundingBox(crop["x1"] / dim, crop["y1"] / dim, crop["x2"] / dim, crop["y2"] / dim)
    return FuzzyResult(box, calls)


@dataclass
class OcrResult:
    box: BoundingBox
    anchors_matched: int
    fallback: bool = False


def ocr_anchor(page, backend: AnnotatorBackend, ocr, object_box: BoundingBox | None = None,
               sim_threshold: float = 0.6, stop_px: int = 30) -> OcrResult:
    """Smallest rectangle covering the OCR-located anchor texts, united with
    the object box when one is supplied; falls back to fuzzy location when
    no anchor matches."""
    anchors: list[BoundingBox] = []
    for getter in (backend.title_of, backend.source_of):
        try:
            text = normalize_ws(getter(page))
        except Exception:
            continue
        if text:
            anchors.extend(ocr.lookup(text))
    if not anchors:
        fuzzy = fuzzy_locate(page, backend, sim_threshold=sim_threshold, stop_px=stop_px)
        return OcrResult(fuzzy.box, anchors_matched=0, fallback=True)
    boxes = list(anchors)
    if object_box is not None:
        boxes.append(object_box)
    return OcrResult(merge_boxes(boxes), anchors_matched=len(anchors))


def annotate_ad(pairs, backend: AnnotatorBackend) -> tuple[list[SelfAnnotationRecord], AnnotateStats]:
    """Label 1 iff the response's first alphabetic token is "yes" (any case)."""
    records = []
    stats = AnnotateStats()
    for pair in pairs:
        start = len(backend.transcript)
        question = vocab.decode(pair.query)
        text = backend.ask_yes_no(pair.page, question)
        if not text.strip():
            stats.fallbacks += 1
            label = 0
        else:
            label = 1 if first_token_is_yes(text) else 0
        records.append(SelfAnnotationRecord(pair.id, "ad", "ad-yesno", label,
                                            _take_transcript(backend, start)))
        stats.produced += 1
    return records, stats


# -- intrinsic backend --------------------------------------------------------------


def _crop_resize(pixels: np.ndarray, region: BoundingBox | None, out_dim: int) -> np.ndarray:
    if region is None and pixels.shape[0] == out_dim:
        return pixels
    dim = pixels.shape[0]
    box = region or BoundingBox(0.0, 0.0, 1.0, 1.0)
    px1, py1, px2, py2 = box.to_pixels(dim)
    px2, py2 = max(px2, px1 + 1), max(py2, py1 + 1)
    crop = pixels[py1:py2, px1:px2]
    ys = np.minimum((np.arange(out_dim) + 0.5) * crop.shape[0] / out_dim, crop.shape[0] - 1).astype(int)
    xs = np.minimum((np.arange(out_dim) + 0.5) * crop.shape[1] / out_dim, crop.shape[1] - 1).astype(int)
    return crop[np.ix_(ys, xs)]


class IntrinsicAnnotator:
    """The backbone labels its own data through next-token generation."""

    def __init__(self, model: Backbone, seed: int = 0, mode: str = "greedy"):
        self.model = model
        self.seed = int(seed)
        self.mode = mode
        self.transcript: list[tuple[str, str]] = []

    def _generate(self, prompt_ids, page_pixels: np.ndarray | None, max_new: int, tag: str) -> str:
        page = None
        if page_pixels is not None:
            page = PatchGrid(pixels=page_pixels)
        seed = (self.seed * 1_000_003 + len(self.transcript)) & 0x7FFFFFFF
        out = self.model.generate(prompt_ids, page=page, max_new=max_new,
                                  mode=self.mode, seed=seed)
        new = [t for t in out[len(prompt_ids):] if t != vocab.EOS]
        text = vocab.decode(new)
        self.transcript.append((f"{tag}:{vocab.decode(prompt_ids)}", text))
        return text

    def _page_pixels(self, page, region: BoundingBox | None = None) -> np.ndarray:
        return _crop_resize(page.grid.pixels, region, self.model.config.page_dim)

    def generate_query(self, doc) -> str:
        prompt = [t for t in doc.tokens if t != vocab.EOS] + [vocab.ASK_QUERY]
        return self._generate(prompt, None, max_new=6, tag="query")

    def describe(self, page, region: BoundingBox | None = None) -> str:
        return self._generate([vocab.BOS, vocab.ASK_DESCRIBE], self._page_pixels(page, region),
                              max_new=6, tag="describe")

    def ask_yes_no(self, page, question: str) -> str:
        ids = [vocab.BOS] + vocab.encode(question, strict=False) + [vocab.ASK_YESNO]
        return self._generate(ids, self._page_pixels(page), max_new=2, tag="yesno")

    def locate(self, page, instruction) -> str:
        return self._generate(list(instruction), self._page_pixels(page), max_new=24, tag="locate")

    def title_of(self, page) -> str:
        return self._generate([vocab.BOS, vocab.ASK_TITLE], self._page_pixels(page), max_new=4, tag="title")

    def source_of(self, page) -> str:
        return self._generate([vocab.BOS, vocab.ASK_SOURCE], self._page_pixels(page), max_new=4, tag="source")


# -- OCR engines --------------------------------------------------------------------


class GlyphMapOcr:
    """In-process OCR stub over the page's text layer.

    Lookup is exact-match, case-sensitive, whitespace-normalized; it answers
    the same requests as the external line-delimited JSON protocol.
    """

    def __init__(self, page):
        self._entries = [(normalize_ws(text), box) for text, box in page.grid.text_layer]

    def lookup(self, text: str) -> list[BoundingBox]:
        wanted = normalize_ws(text)
        return [box for t, box in self._entries if t == wanted]

    def handle_request(self, request: dict) -> dict:
        boxes = self.lookup(request["text"])
        return {"boxes": [list(b.as_tuple()) for b in boxes]}


class ExternalProcessOcr:
    """OCR over a child process: one JSON request line in, one response line out.

    Request: {"text": str}. Response: {"boxes": [[x1,y1,x2,y2], ...]} in
    normalized coordinates.
    """

    def __init__(self, command: list[str]):
        self._proc = subprocess.Popen(command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      text=True, bufsize=1)

    def lookup(self, text: str) -> list[BoundingBox]:
        self._proc.stdin.write(json.dumps({"text": normalize_ws(text)}) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError("external OCR process closed its pipe")
        return [BoundingBox(*vals) for vals in json.loads(line)["boxes"]]

    def close(self) -> None:
        if self._proc.stdin:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def ocr_server_main(mapping_path: str) -> None:
    """Serve a {normalized text -> [[x1,y1,x2,y2], ...]} JSON file over stdio."""
    with open(mapping_path, "r", encoding="utf-8") as fh:
        mapping = json.load(fh)
    for line in sys.stdin:
        if not line.strip():
            continue
        request = json.loads(line)
        boxes = mapping.get(normalize_ws(request["text"]), [])
        sys.stdout.write(json.dumps({"boxes": boxes}) + "\n")
        sys.stdout.flush()
