"""Deterministic generators for the three task corpora, plus scripted annotators.

Every item carries a planted two-token key. Documents hide the key behind a
marker inside filler text; pages render it as glyph cells in a title strip
above a rectangular object, with a source strip below. Ground truth lives in
an EvalVault that only generation and evaluation code may touch; the
annotation and training paths receive stripped corpus views.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .backbone import PatchGrid
from .boxes import BoundingBox, from_pixels, merge_boxes
from .errors import ConfigurationError
from .io import read_jsonl, write_jsonl, load_arrays, save_arrays

GLYPH = 8  # pixel size of one rendered token cell

_SALT_DOC = 11
_SALT_PAGE = 22
_SALT_AD = 33
_SALT_PRETRAIN = 44
_SALT_GLYPH = 55

_KIND_CODES = {
    "query": 1, "describe": 2, "yesno": 3, "locate-object": 4, "locate-caption": 5,
    "locate-source": 6, "locate-all": 7, "title": 8, "source": 9,
}


@dataclass(frozen=True)
class IrDoc:
    id: str
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class PageItem:
    id: str
    grid: PatchGrid


@dataclass(frozen=True)
class AdPair:
    id: str
    page: PageItem
    query: tuple[int, ...]


@dataclass
class IrCorpus:
    train_docs: list[IrDoc]
    pool_docs: list[IrDoc]


@dataclass
class PageTruth:
    object_box: BoundingBox
    title_box: BoundingBox
    source_box: BoundingBox
    truth_box: BoundingBox
    title_text: str
    source_text: str
    keys: tuple[int, int]


class EvalVault:
    """Ground truth per task; annotation and training code never see this.

    Reads go through accessors that bump a counter so pipelines can prove
    they ran annotation and training without touching the vault.
    """

    def __init__(self):
        self.doc_queries: dict[str, tuple[int, ...]] = {}
        self.eval_pairs: list[tuple[tuple[int, ...], str]] = []
        self.pages: dict[str, PageTruth] = {}
        self.ad_labels: dict[str, int] = {}
        self.reads = 0

    def query_for(self, doc_id: str) -> tuple[int, ...]:
        self.reads += 1
        return self.doc_queries[doc_id]

    def ir_eval_pairs(self) -> list[tuple[tuple[int, ...], str]]:
        self.reads += 1
        return list(self.eval_pairs)

    def page_truth(self, page_id: str) -> PageTruth:
        self.reads += 1
        return self.pages[page_id]

    def ad_label(self, pair_id: str) -> int:
        self.reads += 1
        return self.ad_labels[pair_id]


def _rng(*entropy) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def _stable_id_int(item_id: str) -> int:
    return zlib.crc32(item_id.encode("utf-8"))


def _key_pair_from_index(index: int) -> tuple[int, int]:
    a, b = divmod(index, vocab.N_KEYS)
    return vocab.key_token(a), vocab.key_token(b)


def _doc_tokens(rng: np.random.Generator, keys: tuple[int, int]) -> tuple[int, ...]:
    pre = rng.integers(3, 9)
    post = rng.integers(3, 9)
    filler = lambda n: (vocab.FILLER_BASE + rng.integers(0, vocab.N_FILLER, n)).tolist()
    ids = [vocab.BOS] + filler(pre) + [vocab.KEY_MARK, *keys] + filler(post) + [vocab.EOS]
    return tuple(int(i) for i in ids)


def _query_tokens(rng: np.random.Generator, keys: tuple[int, int]) -> tuple[int, ...]:
    qw = int(vocab.QUERY_BASE + rng.integers(0, vocab.N_QUERY_WORDS))
    return (keys[0], keys[1], qw)


def gen_ir_corpus(n_docs: int, pool_size: int, n_eval_pairs: int, seed: int) -> tuple[IrCorpus, EvalVault]:
    """Training docs plus a candidate pool with one golden doc per eval query."""
    n_combos = vocab.N_KEYS * vocab.N_KEYS
    if n_eval_pairs > pool_size:
        raise ConfigurationError("n_eval_pairs cannot exceed pool_size")
    if pool_size > n_combos:
        raise ConfigurationError(f"pool_size {pool_size} exceeds {n_combos} distinct keys")
    rng = _rng(seed, _SALT_DOC)
    vault = EvalVault()

    pool_key_idx = rng.permutation(n_combos)[:pool_size]
    pool_docs = []
    for i, key_idx in enumerate(pool_key_idx):
        keys = _key_pair_from_index(int(key_idx))
        doc = IrDoc(id=f"pool{i:05d}", tokens=_doc_tokens(rng, keys))
        pool_docs.append(doc)
        vault.doc_queries[doc.id] = _query_tokens(rng, keys)

    train_docs = []
    for i in range(n_docs):
        keys = _key_pair_from_index(int(rng.integers(0, n_combos)))
        doc = IrDoc(id=f"train{i:05d}", tokens=_doc_tokens(rng, keys))
        train_docs.append(doc)
        vault.doc_queries[doc.id] = _query_tokens(rng, keys)

    eval_doc_idx = rng.permutation(pool_size)[:n_eval_pairs]
    vault.eval_pairs = [
        (vault.doc_queries[pool_docs[int(i)].id], pool_docs[int(i)].id) for i in eval_doc_idx
    ]
    return IrCorpus(train_docs=train_docs, pool_docs=pool_docs), vault


def token_glyph(token_id: int) -> np.ndarray:
    """Deterministic 8x8 intensity pattern for one token."""
    rng = _rng(_SALT_GLYPH, token_id)
    return (rng.random((GLYPH, GLYPH)) > 0.5).astype(np.float32) * 0.85


def _render_glyph_run(pixels: np.ndarray, x: int, y: int, tokens) -> None:
    for j, t in enumerate(tokens):
        pixels[y:y + GLYPH, x + j * GLYPH:x + (j + 1) * GLYPH] = token_glyph(int(t))


def _snap(v: int) -> int:
    return (v // GLYPH) * GLYPH


def _check_page_geometry(page_dim: int, min_obj_frac: float) -> tuple[int, int, int, int]:
    if page_dim % GLYPH != 0 or page_dim < 4 * GLYPH:
        raise ConfigurationError(f"page_dim must be a multiple of {GLYPH} and at least {4 * GLYPH}")
    margin = max(2, page_dim // 64)
    gap = max(1, page_dim // 64)
    # tallest object that still leaves room for the title and source strips
    max_obj_px = page_dim - 2 * margin - 2 * GLYPH - 2 * gap
    min_px = max(2, int(min_obj_frac * page_dim))
    if min_px > max_obj_px:
        raise ConfigurationError(
            f"min_obj_frac {min_obj_frac} leaves no room for the "
            f"title/source strips on a {page_dim}px page"
        )
    return margin, gap, max_obj_px, min_px


def _build_page(rng: np.random.Generator, page_dim: int, min_obj_frac: float,
                max_obj_frac: float) -> tuple[PatchGrid, PageTruth]:
    margin, gap, max_obj_px, min_px = _check_page_geometry(page_dim, min_obj_frac)
    keys = _key_pair_from_index(int(rng.integers(0, vocab.N_KEYS * vocab.N_KEYS)))
    title_word = int(vocab.TITLE_BASE + rng.integers(0, vocab.N_TITLE_WORDS))
    source_words = (vocab.SOURCE_BASE + rng.integers(0, vocab.N_SOURCE_WORDS, 2)).tolist()
    title_tokens = [keys[0], keys[1], title_word]

    max_w = min(int(max_obj_frac * page_dim), page_dim - 2 * margin)
    max_h = min(int(max_obj_frac * page_dim), max_obj_px)
    obj_w = int(rng.integers(min_px, max_w + 1))
    obj_h = int(rng.integers(min_px, max_h + 1))
    total_h = GLYPH + gap + obj_h + gap + GLYPH
    y_title = _snap(int(rng.integers(margin, page_dim - margin - total_h + 1)))
    x_obj = int(rng.integers(margin, page_dim - margin - obj_w + 1))
    y_obj = y_title + GLYPH + gap

    pixels = (rng.random((page_dim, page_dim)) * 0.08).astype(np.float32)
    border = max(1, page_dim // 64)
    pixels[y_obj:y_obj + obj_h, x_obj:x_obj + obj_w] = 0.95
    inner = rng.random((max(obj_h - 2 * border, 0), max(obj_w - 2 * border, 0))) * 0.3 + 0.25
    pixels[y_obj + border:y_obj + obj_h - border, x_obj + border:x_obj + obj_w - border] = inner
    # the object's fill repeats its key glyphs on the patch grid, so the
    # page identity is visible at many aligned positions, not just the title
    cy0 = -(-(y_obj + border) // GLYPH)
    cx0 = -(-(x_obj + border) // GLYPH)
    cy1 = (y_obj + obj_h - border) // GLYPH
    cx1 = (x_obj + obj_w - border) // GLYPH
    for cy in range(cy0, cy1):
        for cx in range(cx0, cx1):
            glyph = token_glyph(keys[(cx + cy) % 2])
            pixels[cy * GLYPH:(cy + 1) * GLYPH, cx * GLYPH:(cx + 1) * GLYPH] = 0.3 + 0.55 * glyph

    x_title = min(_snap(x_obj), page_dim - len(title_tokens) * GLYPH)
    _render_glyph_run(pixels, x_title, y_title, title_tokens)
    y_source = y_obj + obj_h + gap
    x_source = min(_snap(x_obj), page_dim - len(source_words) * GLYPH)
    _render_glyph_run(pixels, x_source, y_source, source_words)

    object_box = from_pixels(x_obj, y_obj, x_obj + obj_w, y_obj + obj_h, page_dim)
    title_box = from_pixels(x_title, y_title, x_title + len(title_tokens) * GLYPH, y_title + GLYPH, page_dim)
    source_box = from_pixels(x_source, y_source, x_source + len(source_words) * GLYPH, y_source + GLYPH, page_dim)
    title_text = vocab.decode(title_tokens)
    source_text = vocab.decode(source_words)
    grid = PatchGrid(pixels=pixels, text_layer=[(title_text, title_box), (source_text, source_box)])
    truth = PageTruth(
        object_box=object_box,
        title_box=title_box,
        source_box=source_box,
        truth_box=merge_boxes([object_box, title_box, source_box]),
        title_text=title_text,
        source_text=source_text,
        keys=keys,
    )
    return grid, truth


def gen_od_pages(
    n: int,
    seed: int,
    page_dim: int = 64,
    min_obj_frac: float = 0.25,
    max_obj_frac: float = 0.6,
) -> tuple[list[PageItem], EvalVault]:
    """Pages with one object, a title strip above and a source strip below."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    _check_page_geometry(page_dim, min_obj_frac)
    rng = _rng(seed, _SALT_PAGE, page_dim)
    vault = EvalVault()
    pages = []
    for i in range(n):
        grid, truth = _build_page(rng, page_dim, min_obj_frac, max_obj_frac)
        page = PageItem(id=f"page{i:05d}", grid=grid)
        pages.append(page)
        vault.pages[page.id] = truth
        vault.doc_queries[page.id] = _query_tokens(rng, truth.keys)
    return pages, vault


def gen_ad_set(n_pos: int, n_neg: int, seed: int, page_dim: int = 64) -> tuple[list[AdPair], EvalVault]:
    """Query-page pairs: positives match the page's own key, negatives borrow another's."""
    if n_pos < 1 or n_neg < 1:
        raise ConfigurationError("n_pos and n_neg must be >= 1")
    pages, vault = gen_od_pages(n_pos + n_neg, seed=seed ^ _SALT_AD, page_dim=page_dim)
    rng = _rng(seed, _SALT_AD)
    order = rng.permutation(len(pages))
    pairs = []
    for rank, page_idx in enumerate(order):
        page = pages[int(page_idx)]
        positive = rank < n_pos
        if positive:
            query = vault.doc_queries[page.id]
        else:
            donor = pages[int(order[(rank + 1 - n_pos) % len(pages)])]
            while donor.id == page.id or vault.pages[donor.id].keys == vault.pages[page.id].keys:
                donor = pages[int(rng.integers(0, len(pages)))]
            query = vault.doc_queries[donor.id]
        pair = AdPair(id=f"ad{rank:05d}", page=page, query=tuple(query))
        pairs.append(pair)
        vault.ad_labels[pair.id] = 1 if positive else 0
    return pairs, vault


@dataclass
class PretrainExample:
    ids: tuple[int, ...]
    loss_from: int  # first position whose NEXT token contributes to the loss
    page: np.ndarray | None = None  # pixels when the example carries a page prefix


def _box_digit_tokens(box: BoundingBox) -> list[int]:
    text = ", ".join(f"{v:.2f}" for v in box.as_tuple())
    return vocab.digit_string_tokens(text)


def gen_pretrain_corpus(n: int, seed: int, n_page: int = 0, page_dim: int = 64) -> list[PretrainExample]:
    """The knowledge-instilling mixture: document -> query demonstrations, plus
    (when n_page > 0) page -> title, page+query -> yes/no and page -> box-string
    demonstrations that teach the model to read its synthetic world."""
    rng = _rng(seed, _SALT_PRETRAIN)
    out = []
    for _ in range(n):
        keys = _key_pair_from_index(int(rng.integers(0, vocab.N_KEYS * vocab.N_KEYS)))
        doc = list(_doc_tokens(rng, keys))[:-1]  # drop EOS; the ask marker follows
        query = _query_tokens(rng, keys)
        ids = doc + [vocab.ASK_QUERY, *query, vocab.EOS]
        out.append(PretrainExample(ids=tuple(ids), loss_from=len(doc)))
    page_rng = _rng(seed, _SALT_PRETRAIN, 2)
    for i in range(n_page):
        grid, truth = _build_page(page_rng, page_dim, 0.25, 0.6)
        variant = i % 3
        if variant == 0:  # read the title glyphs back as tokens
            title_ids = vocab.encode(truth.title_text)
            ids = [vocab.BOS, vocab.ASK_TITLE, *title_ids, vocab.EOS]
            loss_from = 1
        elif variant == 1:  # match a query against the page
            positive = bool(page_rng.integers(0, 2))
            if positive:
                keys = truth.keys
            else:
                keys = _key_pair_from_index(int(page_rng.integers(0, vocab.N_KEYS * vocab.N_KEYS)))
                while keys == truth.keys:
                    keys = _key_pair_from_index(int(page_rng.integers(0, vocab.N_KEYS * vocab.N_KEYS)))
            query = _query_tokens(page_rng, keys)
            answer = vocab.YES if positive else vocab.NO
            ids = [vocab.BOS, *query, vocab.ASK_YESNO, answer, vocab.EOS]
            loss_from = len(ids) - 3
        else:  # emit the composite box as a digit string
            ids = [vocab.BOS, vocab.LOC_ALL, *_box_digit_tokens(truth.truth_box), vocab.EOS]
            loss_from = 1
        out.append(PretrainExample(ids=tuple(ids), loss_from=loss_from, page=grid.pixels))
    return out


# -- scripted annotator ----------------------------------------------------------


class ScriptedAnnotator:
    """Oracle annotator with a quality knob; answers are bound at construction.

    At quality 1.0 every response matches the generator's truth. Below that,
    each call is independently corrupted with probability 1 - quality:
    queries get a wrong key pair, boxes get jittered by +-0.15, yes/no flips.
    describe() reports the object's words only when at least ``visibility`` of
    the object's area lies inside the queried region.
    """

    def __init__(self, vault: EvalVault, quality: float, seed: int, visibility: float = 0.6):
        if not 0.0 <= quality <= 1.0:
            raise ConfigurationError("quality must lie in [0,1]")
        self.quality = quality
        self.seed = int(seed)
        self.visibility = visibility
        self.transcript: list[tuple[str, str]] = []
        # Eager copies: after construction this object never touches the vault.
        self._doc_queries = {k: tuple(v) for k, v in vault.doc_queries.items()}
        self._pages = dict(vault.pages)
        self._page_keys = {k: t.keys for k, t in vault.pages.items()}

    # each (item, kind) has its own stream so call order cannot change outputs
    def _call_rng(self, item_id: str, kind: str) -> np.random.Generator:
        return _rng(self.seed, _stable_id_int(item_id), _KIND_CODES[kind])

    def _log(self, prompt: str, response: str) -> str:
        self.transcript.append((prompt, response))
        return response

    def _corrupted(self, rng: np.random.Generator) -> bool:
        return bool(rng.random() >= self.quality)

    def generate_query(self, doc) -> str:
        rng = self._call_rng(doc.id, "query")
        query = list(self._doc_queries[doc.id])
        if self._corrupted(rng):
            wrong = _key_pair_from_index(int(rng.integers(0, vocab.N_KEYS * vocab.N_KEYS)))
            query[0], query[1] = wrong
        return self._log(f"query:{doc.id}", vocab.decode(query))

    def describe(self, page, region: BoundingBox | None = None) -> str:
        truth = self._pages[page.id]
        obj = truth.object_box
        if region is None:
            visible = 1.0
        else:
            ix = max(0.0, min(obj.x2, region.x2) - max(obj.x1, region.x1))
            iy = max(0.0, min(obj.y2, region.y2) - max(obj.y1, region.y1))
            visible = (ix * iy) / obj.area
        words = _rng(_SALT_PAGE, _stable_id_int(page.id)).integers(0, vocab.N_FILLER, 5)
        obj_desc = " ".join(f"w{int(w)}" for w in words)
        bg_desc = "s0 s1 s2 s3 s4"
        rng = self._call_rng(page.id + (f":{region.as_tuple()}" if region else ""), "describe")
        flip = self._corrupted(rng)
        saw_object = (visible >= self.visibility) != flip
        return self._log(f"describe:{page.id}:{region.as_tuple() if region else 'full'}",
                         obj_desc if saw_object else bg_desc)

    def ask_yes_no(self, page, question: str) -> str:
        q_keys = tuple(t for t in vocab.encode(question, strict=False)
                       if vocab.KEY_BASE <= t < vocab.FILLER_BASE)
        truth = q_keys == tuple(self._page_keys[page.id])
        rng = self._call_rng(f"{page.id}:{question}", "yesno")
        answer = truth != self._corrupted(rng)
        return self._log(f"yesno:{page.id}:{question}", "yes" if answer else "no")

    def _boxed(self, box: BoundingBox, rng: np.random.Generator) -> str:
        coords = list(box.as_tuple())
        if self._corrupted(rng):
            jit = rng.uniform(-0.15, 0.15, 4)
            x1, y1, x2, y2 = (float(np.clip(c + j, 0.0, 1.0)) for c, j in zip(coords, jit))
            x1, x2 = min(x1, x2), max(x1, x2)
            y1, y2 = min(y1, y2), max(y1, y2)
            eps = 1e-3
            coords = [min(x1, 1 - eps), min(y1, 1 - eps),
                      max(x2, min(x1, 1 - eps) + eps), max(y2, min(y1, 1 - eps) + eps)]
        return ", ".join(f"{c:.4f}" for c in coords)

    def locate(self, page, instruction) -> str:
        kinds = {vocab.LOC_OBJECT: "locate-object", vocab.LOC_CAPTION: "locate-caption",
                 vocab.LOC_SOURCE: "locate-source", vocab.LOC_ALL: "locate-all"}
        kind = next((kinds[t] for t in instruction if t in kinds), "locate-all")
        truth = self._pages[page.id]
        box = {"locate-object": truth.object_box, "locate-caption": truth.title_box,
               "locate-source": truth.source_box, "locate-all": truth.truth_box}[kind]
        rng = self._call_rng(page.id, kind)
        return self._log(f"{kind}:{page.id}", self._boxed(box, rng))

    def title_of(self, page) -> str:
        rng = self._call_rng(page.id, "title")
        truth = self._pages[page.id]
        text = truth.title_text if not self._corrupted(rng) else "w999 w998"
        return self._log(f"title:{page.id}", text)

    def source_of(self, page) -> str:
        rng = self._call_rng(page.id, "source")
        truth = self._pages[page.id]
        text = truth.source_text if not self._corrupted(rng) else "w999 w998"
        return self._log(f"source:{page.id}", text)


def scripted_annotator(vault: EvalVault, quality: float, seed: int,
                       visibility: float = 0.6) -> ScriptedAnnotator:
    return ScriptedAnnotator(vault, quality, seed, visibility=visibility)


# -- manifests -------------------------------------------------------------------


def _box_list(box: BoundingBox) -> list[float]:
    return [box.x1, box.y1, box.x2, box.y2]


def write_ir_corpus(out_dir, corpus: IrCorpus) -> None:
    write_jsonl(f"{out_dir}/ir_train.jsonl", [{"id": d.id, "tokens": list(d.tokens)} for d in corpus.train_docs])
    write_jsonl(f"{out_dir}/ir_pool.jsonl", [{"id": d.id, "tokens": list(d.tokens)} for d in corpus.pool_docs])


def read_ir_corpus(out_dir) -> IrCorpus:
    train = [IrDoc(r["id"], tuple(r["tokens"])) for r in read_jsonl(f"{out_dir}/ir_train.jsonl")]
    pool = [IrDoc(r["id"], tuple(r["tokens"])) for r in read_jsonl(f"{out_dir}/ir_pool.jsonl")]
    return IrCorpus(train, pool)


def write_pages(path_prefix, pages: list[PageItem]) -> None:
    rows = []
    arrays = {}
    for p in pages:
        rows.append({
            "id": p.id,
            "dim": p.grid.dim,
            "text_layer": [[text, _box_list(box)] for text, box in p.grid.text_layer],
        })
        arrays[p.id] = p.grid.pixels
    write_jsonl(f"{path_prefix}.jsonl", rows)
    save_arrays(f"{path_prefix}.bin", arrays, meta={"kind": "pages", "dtype": "float32"})


def read_pages(path_prefix) -> list[PageItem]:
    rows = read_jsonl(f"{path_prefix}.jsonl")
    _, arrays = load_arrays(f"{path_prefix}.bin")
    pages = []
    for r in rows:
        layer = [(text, BoundingBox(*vals)) for text, vals in r["text_layer"]]
        pages.append(PageItem(id=r["id"], grid=PatchGrid(pixels=arrays[r["id"]], text_layer=layer)))
    return pages


def write_ad_pairs(path, pairs: list[AdPair]) -> None:
    write_jsonl(path, [{"id": p.id, "page_id": p.page.id, "query": list(p.query)} for p in pairs])


def read_ad_pairs(path, pages: list[PageItem]) -> list[AdPair]:
    by_id = {p.id: p for p in pages}
    return [AdPair(r["id"], by_id[r["page_id"]], tuple(r["query"])) for r in read_jsonl(path)]


def write_vault(vault_dir, vault: EvalVault) -> None:
    write_jsonl(f"{vault_dir}/doc_queries.jsonl",
                [{"id": k, "query": list(v)} for k, v in sorted(vault.doc_queries.items())])
    write_jsonl(f"{vault_dir}/ir_eval_pairs.jsonl",
                [{"query": list(q), "doc_id": d} for q, d in vault.eval_pairs])
    write_jsonl(f"{vault_dir}/pages.jsonl", [
        {
            "id": k,
            "object": _box_list(t.object_box), "title": _box_list(t.title_box),
            "source": _box_list(t.source_box), "truth": _box_list(t.truth_box),
            "title_text": t.title_text, "source_text": t.source_text,
            "keys": list(t.keys),
        }
        for k, t in sorted(vault.pages.items())
    ])
    write_jsonl(f"{vault_dir}/ad_labels.jsonl",
                [{"id": k, "label": v} for k, v in sorted(vault.ad_labels.items())])


def read_vault(vault_dir) -> EvalVault:
    vault = EvalVault()
    vault.doc_queries = {r["id"]: tuple(r["query"]) for r in read_jsonl(f"{vault_dir}/doc_queries.jsonl")}
    vault.eval_pairs = [(tuple(r["query"]), r["doc_id"]) for r in read_jsonl(f"{vault_dir}/ir_eval_pairs.jsonl")]
    for r in read_jsonl(f"{vault_dir}/pages.jsonl"):
        vault.pages[r["id"]] = PageTruth(
            object_box=BoundingBox(*r["object"]), title_box=BoundingBox(*r["title"]),
            source_box=BoundingBox(*r["source"]), truth_box=BoundingBox(*r["truth"]),
            title_text=r["title_text"], source_text=r["source_text"], keys=tuple(r["keys"]),
        )
    vault.ad_labels = {r["id"]: r["label"] for r in read_jsonl(f"{vault_dir}/ad_labels.jsonl")}
    return vault
