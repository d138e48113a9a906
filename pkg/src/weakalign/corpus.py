"""Synthetic planted worlds, dataset files, checkpoints.

A planted world samples a prototype feature vector per concept. Each image
holds one region per sampled concept (feature = prototype + Gaussian noise,
tag = concept name) in a shuffled order, and its true caption mentions
exactly those concepts through a fixed sentence template, so image-caption
and phrase-region ground truth is known by construction.

File formats are line-delimited JSON with a header record per file:

  images.jsonl  header {schema, feature_dim, region_classes, n_images}
                rows   {image_id, width, height, regions: [{feature, box,
                        tag, class_id, confidence}]}
  texts.jsonl   header {schema, vocabulary, pos_lexicon, n_texts}
                rows   {text_id, text, source}
  pairs.jsonl   header {schema, provider, k, n_pairs, skipped_images}
                rows   {image_id, text_id, rank, score, links, label}
  truth.jsonl   header {schema}
                rows   {image_id, text_id, phrase_regions: [{span, region,
                        concept}]}

Checkpoints are a directory: manifest.json (config echo, counters, rng
states, parameter table, payload digests) plus params.bin / opt.bin holding
the named arrays as little-endian float32 in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .aligner import (
    DEFAULT_DETERMINERS,
    PhraseLink,
    PosLexicon,
    Region,
    RegionSet,
    Sentence,
    Vocabulary,
    WeakPair,
    link_phrases,
    tokenize_words,
)

CONCEPT_NOUNS = [
    "airplane", "ant", "apple", "arch", "armchair", "axe", "backpack", "ball",
    "balloon", "banana", "barn", "barrel", "basket", "bat", "beach", "bear",
    "bed", "bell", "bench", "bike", "bird", "boat", "book", "boot", "bottle",
    "bowl", "box", "bread", "bridge", "broom", "bucket", "bus", "cabin",
    "cactus", "cake", "camel", "camera", "candle", "canoe", "cap", "car",
    "carpet", "castle", "cat", "chair", "cherry", "chicken", "church", "clock",
    "cloud", "coat", "coin", "couch", "cow", "crab", "crane", "crow", "cup",
    "deer", "desk", "dog", "dolphin", "donkey", "door", "dress", "drum",
    "duck", "eagle", "egg", "elephant", "fence", "fish", "flag", "flower",
    "fork", "fountain", "fox", "frog", "gate", "giraffe", "glass", "glove",
    "goat", "grape", "guitar", "hammer", "harbor", "hat", "hawk", "helmet",
    "hill", "horse", "house", "jacket", "jar", "kayak", "kettle", "king",
    "kite", "ladder", "lake", "lamp", "lantern", "leaf", "lemon", "lion",
    "lizard", "mango", "map", "mirror", "monkey", "moon", "mountain", "mouse",
    "mug", "mushroom", "nest", "oven", "owl", "palace", "panda", "peach",
    "pear", "pen", "piano", "pig", "pillow", "pineapple", "pipe", "plane",
    "plate", "pond", "pot", "pumpkin", "rabbit", "raft", "river", "road",
    "rock", "roof", "rope", "rose", "sail", "seal", "shark", "sheep", "shell",
    "ship", "shirt", "shoe", "shovel", "snail", "snake", "sofa", "spider",
    "spoon", "star", "statue", "stool", "stove", "swan", "sword", "table",
    "temple", "tent", "tiger", "toad", "tower", "town", "tractor", "train",
    "tree", "truck", "trumpet", "turtle", "umbrella", "van", "vase", "violin",
    "wagon", "wall", "whale", "wheel", "window", "wolf", "zebra",
]

ADJECTIVES = [
    "red", "blue", "green", "yellow", "black", "white", "orange", "purple",
    "big", "small", "tall", "tiny", "old", "young", "round", "wooden",
]

_SYLLABLE_ONSETS = "bdfgklmnprstvz"
_SYLLABLE_VOWELS = "aeiou"


def concept_names(n: int) -> list[str]:
    """First n concept names; synthesizes extra two-syllable names past the
    built-in noun list."""
    if n <= len(CONCEPT_NOUNS):
        return CONCEPT_NOUNS[:n]
    names = list(CONCEPT_NOUNS)
    taken = set(names) | set(ADJECTIVES)
    for c1 in _SYLLABLE_ONSETS:
        for v1 in _SYLLABLE_VOWELS:
            for c2 in _SYLLABLE_ONSETS:
                for v2 in _SYLLABLE_VOWELS:
                    if len(names) == n:
                        return names
                    cand = c1 + v1 + c2 + v2
                    if cand not in taken:
                        names.append(cand)
                        taken.add(cand)
    raise ValueError(f"cannot synthesize {n} concept names")


# ---------------------------------------------------------------------------
# world generation
# ---------------------------------------------------------------------------


@dataclass
class WorldSpec:
    n_concepts: int = 30
    feature_dim: int = 16
    noise_sigma: float = 0.1
    concepts_per_image: tuple[int, int] = (6, 6)  # inclusive range
    n_images: int = 200
    n_eval_images: int = 0
    n_distractors: int = 1000
    adjective_prob: float = 0.5
    templates: tuple[str, ...] = ("a photo of {items}",)
    image_width: int = 640
    image_height: int = 480
    seed: int = 0

    def __post_init__(self):
        if self.n_concepts < 2:
            raise ValueError("need at least 2 concepts")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        lo, hi = self.concepts_per_image
        if not 1 <= lo <= hi <= self.n_concepts:
            raise ValueError(f"bad concepts_per_image range {self.concepts_per_image}")
        for t in self.templates:
            if "{items}" not in t:
                raise ValueError(f"template {t!r} lacks the {{items}} slot")


@dataclass
class GeneratedText:
    text_id: str
    text: str
    source: str  # 'caption' | 'distractor'


@dataclass
class TruthRecord:
    image_id: str
    text_id: str
    phrase_regions: list[dict]  # {span: [s, e], region: int, concept: str}


@dataclass
class World:
    spec: WorldSpec
    concepts: list[str]
    prototypes: np.ndarray  # (n_concepts, feature_dim)
    lexicon: PosLexicon
    vocabulary_words: list[str]
    images: list[RegionSet]
    texts: list[GeneratedText]
    truth: list[TruthRecord]
    eval_images: list[RegionSet] = field(default_factory=list)
    eval_texts: list[GeneratedText] = field(default_factory=list)
    eval_truth: list[TruthRecord] = field(default_factory=list)


def _caption_words(concepts: list[str], rng, spec: WorldSpec):
    """Caption word list plus the [start, end) span of each concept mention."""
    template = spec.templates[int(rng.integers(len(spec.templates)))]
    prefix, suffix = template.split("{items}")
    words = tokenize_words(prefix)
    spans: list[tuple[int, int]] = []
    for idx, concept in enumerate(concepts):
        if idx > 0:
            words.append("and")
        start = len(words)
        mention = []
        if rng.random() < spec.adjective_prob:
            mention.append(ADJECTIVES[int(rng.integers(len(ADJECTIVES)))])
        mention.append(concept)
        det = "an" if mention[0][0] in "aeiou" else "a"
        words.append(det)
        words.extend(mention)
        spans.append((start, len(words)))
    words.extend(tokenize_words(suffix))
    return words, spans


def _sample_box(rng, width: int, height: int) -> tuple[int, int, int, int]:
    x1 = int(rng.integers(0, width - 8))
    x2 = int(rng.integers(x1 + 4, width + 1))
    y1 = int(rng.integers(0, height - 8))
    y2 = int(rng.integers(y1 + 4, height + 1))
    return (x1, y1, x2, y2)


def generate_world(spec: WorldSpec) -> World:
    """Deterministic planted world from the spec's seed."""
    rng = np.random.default_rng(spec.seed)
    concepts = concept_names(spec.n_concepts)
    prototypes = rng.standard_normal((spec.n_concepts, spec.feature_dim))
    # unit prototypes keep feature-regression losses on the same scale as the
    # classification losses
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    lo, hi = spec.concepts_per_image

    used_sets: set[frozenset] = set()

    def sample_concept_set() -> list[int]:
        for _ in range(100_000):
            size = int(rng.integers(lo, hi + 1))
            ids = rng.choice(spec.n_concepts, size=size, replace=False)
            key = frozenset(int(i) for i in ids)
            if key not in used_sets:
                used_sets.add(key)
                return [int(i) for i in ids]
        raise ValueError("concept space too small for distinct image concept sets")

    def make_image(image_id, text_id, concept_ids):
        caption_order = [concept_ids[int(i)] for i in rng.permutation(len(concept_ids))]
        region_order = [concept_ids[int(i)] for i in rng.permutation(len(concept_ids))]
        regions = []
        for cid in region_order:
            feature = prototypes[cid] + spec.noise_sigma * rng.standard_normal(spec.feature_dim)
            regions.append(Region(
                feature=feature,
                box=_sample_box(rng, spec.image_width, spec.image_height),
                tag=concepts[cid],
                class_id=cid,
                confidence=float(np.round(rng.uniform(0.5, 1.0), 6)),
            ))
        image = RegionSet(image_id=image_id, width=spec.image_width, height=spec.image_height, regions=regions)
        words, spans = _caption_words([concepts[c] for c in caption_order], rng, spec)
        text = GeneratedText(text_id=text_id, text=" ".join(words), source="caption")
        phrase_regions = []
        for span, cid in zip(spans, caption_order):
            phrase_regions.append({
                "span": [span[0], span[1]],
                "region": region_order.index(cid),
                "concept": concepts[cid],
            })
        truth = TruthRecord(image_id=image_id, text_id=text_id, phrase_regions=phrase_regions)
        return image, text, truth

    images, texts, truths = [], [], []
    for i in range(spec.n_images):
        img, txt, tr = make_image(f"img_{i:05d}", f"txt_{i:05d}", sample_concept_set())
        images.append(img)
        texts.append(txt)
        truths.append(tr)

    eval_images, eval_texts, eval_truths = [], [], []
    for i in range(spec.n_eval_images):
        img, txt, tr = make_image(f"eim_{i:05d}", f"etx_{i:05d}", sample_concept_set())
        eval_images.append(img)
        eval_texts.append(txt)
        eval_truths.append(tr)

    for j in range(spec.n_distractors):
        size = int(rng.integers(lo, hi + 1))
        ids = [int(i) for i in rng.choice(spec.n_concepts, size=size, replace=False)]
        while frozenset(ids) in used_sets:
            ids = [int(i) for i in rng.choice(spec.n_concepts, size=size, replace=False)]
        order = [ids[int(i)] for i in rng.permutation(len(ids))]
        words, _ = _caption_words([concepts[c] for c in order], rng, spec)
        texts.append(GeneratedText(text_id=f"dis_{j:05d}", text=" ".join(words), source="distractor"))

    all_text = [t.text for t in texts] + [t.text for t in eval_texts]
    vocab = Vocabulary.build(all_text, extra_words=concepts)
    lexicon = PosLexicon(nouns=frozenset(concepts), adjectives=frozenset(ADJECTIVES))
    return World(
        spec=spec, concepts=concepts, prototypes=prototypes, lexicon=lexicon,
        vocabulary_words=vocab.words, images=images, texts=texts, truth=truths,
        eval_images=eval_images, eval_texts=eval_texts, eval_truth=eval_truths,
    )


def mix_alignment_ratio(
    truth_pairs: list[tuple[str, str]],
    ratio: float,
    seed: int,
) -> list[tuple[str, str, bool]]:
    """Re-pair images with captions at a controlled alignment ratio.

    Exactly round(ratio * n) images keep their true caption; the rest trade
    captions through a cyclic derangement, so the caption multiset is
    preserved and no deranged image keeps its own caption. Returns
    (image_id, text_id, aligned) in the input image order.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0,1], got {ratio}")
    n = len(truth_pairs)
    n_aligned = int(round(ratio * n))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    complement = [int(i) for i in perm[n_aligned:]]
    if len(complement) == 1:
        raise ValueError("exactly one unaligned image cannot be deranged; adjust ratio or corpus size")
    assigned = {int(i): truth_pairs[int(i)][1] for i in perm[:n_aligned]}
    for pos, img_idx in enumerate(complement):
        donor = complement[(pos + 1) % len(complement)]
        assigned[img_idx] = truth_pairs[donor][1]
    aligned_set = {int(i) for i in perm[:n_aligned]}
    return [
        (truth_pairs[i][0], assigned[i], i in aligned_set)
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# file IO and validation
# ---------------------------------------------------------------------------


class SchemaError(Exception):
    def __init__(self, path, line: int, field_path: str, message: str):
        self.path = str(path)
        self.line = line
        self.field_path = field_path
        self.message = message
        super().__init__(f"{self.path}:{line}: {field_path}: {message}")


def _read_jsonl(path, expected_schema: str):
    rows = []
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append((line_no, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise SchemaError(path, line_no, "<line>", f"invalid JSON: {exc}") from exc
    if not rows:
        raise SchemaError(path, 0, "<file>", "empty file, expected a header record")
    line_no, header = rows[0]
    if header.get("record") != "header":
        raise SchemaError(path, line_no, "record", "first record must be the header")
    if header.get("schema") != expected_schema:
        raise SchemaError(path, line_no, "schema", f"expected {expected_schema!r}, got {header.get('schema')!r}")
    return header, rows[1:]


def _require(cond: bool, path, line: int, field_path: str, message: str):
    if not cond:
        raise SchemaError(path, line, field_path, message)


@dataclass
class ImagesData:
    feature_dim: int
    class_names: list[str]
    region_sets: list[RegionSet]

    def __post_init__(self):
        self.by_id = {r.image_id: r for r in self.region_sets}


@dataclass
class TextsData:
    vocab: Vocabulary
    lexicon: PosLexicon
    sentences: list[Sentence]
    raw_texts: list["GeneratedText"] = field(default_factory=list)

    def __post_init__(self):
        self.by_id = {s.text_id: s for s in self.sentences}


def write_images(path, feature_dim: int, class_names: list[str], region_sets: list[RegionSet]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({
            "record": "header", "schema": "images/v1", "feature_dim": feature_dim,
            "region_classes": list(class_names), "n_images": len(region_sets),
        }) + "\n")
        for rs in region_sets:
            fh.write(json.dumps({
                "record": "image", "image_id": rs.image_id,
                "width": rs.width, "height": rs.height,
                "regions": [{
                    "feature": [float(x) for x in r.feature],
                    "box": list(r.box), "tag": r.tag,
                    "class_id": r.class_id, "confidence": r.confidence,
                } for r in rs.regions],
            }) + "\n")


def load_images(path) -> ImagesData:
    header, rows = _read_jsonl(path, "images/v1")
    feature_dim = header.get("feature_dim")
    _require(isinstance(feature_dim, int) and feature_dim >= 1, path, 1, "feature_dim", "positive int required")
    class_names = header.get("region_classes")
    _require(isinstance(class_names, list) and class_names, path, 1, "region_classes", "non-empty list required")
    region_sets = []
    seen_ids = set()
    for line_no, row in rows:
        _require(row.get("record") == "image", path, line_no, "record", "expected an image record")
        image_id = row.get("image_id")
        _require(isinstance(image_id, str) and image_id, path, line_no, "image_id", "non-empty string required")
        _require(image_id not in seen_ids, path, line_no, "image_id", f"duplicate id {image_id}")
        seen_ids.add(image_id)
        width, height = row.get("width"), row.get("height")
        _require(isinstance(width, (int, float)) and width > 0, path, line_no, "width", "positive number required")
        _require(isinstance(height, (int, float)) and height > 0, path, line_no, "height", "positive number required")
        raw_regions = row.get("regions")
        _require(isinstance(raw_regions, list) and raw_regions, path, line_no, "regions",
                 "images with zero regions are rejected")
        regions = []
        for i, rr in enumerate(raw_regions):
            fp = f"regions[{i}]"
            feature = rr.get("feature")
            _require(isinstance(feature, list), path, line_no, f"{fp}.feature", "list of floats required")
            _require(len(feature) == feature_dim, path, line_no, f"{fp}.feature",
                     f"feature dim {len(feature)} does not match header feature_dim {feature_dim}")
            box = rr.get("box")
            _require(isinstance(box, list) and len(box) == 4, path, line_no, f"{fp}.box", "expected [x1,y1,x2,y2]")
            x1, y1, x2, y2 = box
            _require(0 <= x1 < x2 <= width, path, line_no, f"{fp}.box",
                     f"need 0 <= x1 < x2 <= width, got x1={x1} x2={x2} width={width}")
            _require(0 <= y1 < y2 <= height, path, line_no, f"{fp}.box",
                     f"need 0 <= y1 < y2 <= height, got y1={y1} y2={y2} height={height}")
            tag = rr.get("tag")
            _require(isinstance(tag, str) and tag.strip(), path, line_no, f"{fp}.tag", "non-empty string required")
            class_id = rr.get("class_id")
            _require(isinstance(class_id, int) and 0 <= class_id < len(class_names),
                     path, line_no, f"{fp}.class_id", f"must be in [0, {len(class_names)})")
            confidence = rr.get("confidence", 1.0)
            _require(isinstance(confidence, (int, float)) and 0.0 <= confidence <= 1.0,
                     path, line_no, f"{fp}.confidence", "must be in [0, 1]")
            regions.append(Region(
                feature=np.array(feature, dtype=np.float64), box=tuple(box),
                tag=tag, class_id=class_id, confidence=float(confidence),
            ))
        region_sets.append(RegionSet(image_id=image_id, width=width, height=height, regions=regions))
    return ImagesData(feature_dim=feature_dim, class_names=class_names, region_sets=region_sets)


def write_texts(path, vocab_words: list[str], lexicon: PosLexicon, texts: list[GeneratedText]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({
            "record": "header", "schema": "texts/v1",
            "vocabulary": list(vocab_words),
            "pos_lexicon": {
                "nouns": sorted(lexicon.nouns),
                "adjectives": sorted(lexicon.adjectives),
                "determiners": sorted(lexicon.determiners),
            },
            "n_texts": len(texts),
        }) + "\n")
        for t in texts:
            fh.write(json.dumps({
                "record": "text", "text_id": t.text_id, "text": t.text, "source": t.source,
            }) + "\n")


def load_texts(path) -> TextsData:
    header, rows = _read_jsonl(path, "texts/v1")
    vocab_words = header.get("vocabulary")
    _require(isinstance(vocab_words, list) and vocab_words, path, 1, "vocabulary", "non-empty list required")
    lex_raw = header.get("pos_lexicon") or {}
    lexicon = PosLexicon(
        nouns=frozenset(lex_raw.get("nouns", [])),
        adjectives=frozenset(lex_raw.get("adjectives", [])),
        determiners=frozenset(lex_raw.get("determiners", [])) or DEFAULT_DETERMINERS,
    )
    vocab = Vocabulary(vocab_words)
    sentences = []
    raw_texts = []
    seen = set()
    for line_no, row in rows:
        _require(row.get("record") == "text", path, line_no, "record", "expected a text record")
        text_id = row.get("text_id")
        _require(isinstance(text_id, str) and text_id, path, line_no, "text_id", "non-empty string required")
        _require(text_id not in seen, path, line_no, "text_id", f"duplicate id {text_id}")
        seen.add(text_id)
        text = row.get("text")
        _require(isinstance(text, str), path, line_no, "text", "string required")
        _require(bool(tokenize_words(text)), path, line_no, "text", "empty sentences are rejected")
        source = row.get("source", "caption")
        sent = Sentence.from_text(text_id, text, vocab, lexicon)
        sentences.append(sent)
        raw_texts.append(GeneratedText(text_id=text_id, text=text, source=source))
    return TextsData(vocab=vocab, lexicon=lexicon, sentences=sentences, raw_texts=raw_texts)


def write_pairs(path, pairs: list[WeakPair], provider_name: str, k: int, skipped: list[str]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({
            "record": "header", "schema": "pairs/v1", "provider": provider_name,
            "k": k, "n_pairs": len(pairs), "skipped_images": list(skipped),
        }) + "\n")
        for p in pairs:
            fh.write(json.dumps({
                "record": "pair", "image_id": p.image_id, "text_id": p.text_id,
                "rank": p.rank, "score": p.score,
                "links": [{"span": [l.span[0], l.span[1]], "region": l.region, "score": l.score}
                          for l in p.links],
                "label": p.label,
            }) + "\n")


def load_pairs(path, images: ImagesData, texts: TextsData) -> list[WeakPair]:
    _, rows = _read_jsonl(path, "pairs/v1")
    pairs = []
    for line_no, row in rows:
        _require(row.get("record") == "pair", path, line_no, "record", "expected a pair record")
        image_id, text_id = row.get("image_id"), row.get("text_id")
        _require(image_id in images.by_id, path, line_no, "image_id", f"unknown image {image_id!r}")
        _require(text_id in texts.by_id, path, line_no, "text_id", f"unknown text {text_id!r}")
        sentence = texts.by_id[text_id]
        n_regions = images.by_id[image_id].n_regions
        links = []
        for i, lr in enumerate(row.get("links", [])):
            fp = f"links[{i}]"
            span = tuple(lr.get("span", ()))
            _require(span in set(sentence.phrase_spans), path, line_no, f"{fp}.span",
                     f"{list(span)} is not a noun-phrase span of {text_id}")
            region = lr.get("region")
            _require(isinstance(region, int) and 0 <= region < n_regions, path, line_no, f"{fp}.region",
                     f"must be in [0, {n_regions})")
            score = lr.get("score")
            _require(isinstance(score, (int, float)) and 0.0 <= score <= 1.0, path, line_no, f"{fp}.score",
                     "must be in [0, 1]")
            links.append(PhraseLink(span=span, region=region, score=float(score)))
        label = row.get("label", 1)
        _require(label in (0, 1), path, line_no, "label", "must be 0 or 1")
        pairs.append(WeakPair(
            image_id=image_id, text_id=text_id, rank=int(row.get("rank", 0)),
            score=float(row.get("score", 0.0)), links=links, label=label,
        ))
    return pairs


def write_truth(path, truth: list[TruthRecord]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"record": "header", "schema": "truth/v1", "n_records": len(truth)}) + "\n")
        for t in truth:
            fh.write(json.dumps({
                "record": "truth", "image_id": t.image_id, "text_id": t.text_id,
                "phrase_regions": t.phrase_regions,
            }) + "\n")


def load_truth(path) -> list[TruthRecord]:
    _, rows = _read_jsonl(path, "truth/v1")
    out = []
    for line_no, row in rows:
        _require(row.get("record") == "truth", path, line_no, "record", "expected a truth record")
        out.append(TruthRecord(
            image_id=row["image_id"], text_id=row["text_id"],
            phrase_regions=[
                {"span": list(pr["span"]), "region": int(pr["region"]), "concept": pr["concept"]}
                for pr in row.get("phrase_regions", [])
            ],
        ))
    return out


def write_world(world: World, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_images(os.path.join(out_dir, "images.jsonl"),
                 world.spec.feature_dim, world.concepts, world.images)
    write_texts(os.path.join(out_dir, "texts.jsonl"),
                world.vocabulary_words, world.lexicon, world.texts)
    write_truth(os.path.join(out_dir, "truth.jsonl"), world.truth)
    if world.eval_images:
        write_images(os.path.join(out_dir, "eval_images.jsonl"),
                     world.spec.feature_dim, world.concepts, world.eval_images)
        write_texts(os.path.join(out_dir, "eval_texts.jsonl"),
                    world.vocabulary_words, world.lexicon, world.eval_texts)
        write_truth(os.path.join(out_dir, "eval_truth.jsonl"), world.eval_truth)


def attach_links(pairs: list[WeakPair], images: ImagesData, texts: TextsData, word_embedder) -> None:
    """Fill each pair's phrase-region links in place."""
    for p in pairs:
        p.links = link_phrases(texts.by_id[p.text_id], images.by_id[p.image_id], word_embedder)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _pack_arrays(named: dict[str, np.ndarray]) -> tuple[bytes, list[dict]]:
    table = []
    chunks = []
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    return b"".join(chunks), table


def _unpack_arrays(payload: bytes, table: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    offset = 0
    for entry in table:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        out[entry["name"]] = arr.astype(np.float32)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"payload has {len(payload)} bytes, expected {offset}")
    return out


def save_checkpoint(
    out_dir,
    params: dict,
    opt_arrays: dict[str, np.ndarray],
    opt_step_count: int,
    config: dict,
    step: int,
    epoch: int,
    rng_states: dict,
) -> None:
    os.makedirs(out_dir, exist_ok=True)
    named = {k: (v.data if hasattr(v, "data") else np.asarray(v)) for k, v in params.items()}
    payload, table = _pack_arrays(named)
    opt_payload, opt_table = _pack_arrays(opt_arrays)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config,
        "step": int(step),
        "epoch": int(epoch),
        "rng_states": rng_states,
        "params": table,
        "params_sha256": hashlib.sha256(payload).hexdigest(),
        "opt": {"step_count": int(opt_step_count), "entries": opt_table,
                "sha256": hashlib.sha256(opt_payload).hexdigest()},
    }
    with open(os.path.join(out_dir, "params.bin"), "wb") as fh:
        fh.write(payload)
    with open(os.path.join(out_dir, "opt.bin"), "wb") as fh:
        fh.write(opt_payload)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


@dataclass
class Checkpoint:
    manifest: dict
    params: dict[str, np.ndarray]
    opt_arrays: dict[str, np.ndarray]

    @property
    def config(self) -> dict:
        return self.manifest["config"]

    @property
    def step(self) -> int:
        return self.manifest["step"]

    @property
    def epoch(self) -> int:
        return self.manifest["epoch"]


def load_checkpoint(ckpt_dir) -> Checkpoint:
    manifest_path = os.path.join(ckpt_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no manifest.json under {ckpt_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    with open(os.path.join(ckpt_dir, "params.bin"), "rb") as fh:
        payload = fh.read()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["params_sha256"]:
        raise CheckpointError(
            f"refusing to load: params.bin digest {digest[:12]}... does not match manifest"
        )
    with open(os.path.join(ckpt_dir, "opt.bin"), "rb") as fh:
        opt_payload = fh.read()
    opt_digest = hashlib.sha256(opt_payload).hexdigest()
    if opt_digest != manifest["opt"]["sha256"]:
        raise CheckpointError(
            f"refusing to load: opt.bin digest {opt_digest[:12]}... does not match manifest"
        )
    return Checkpoint(
        manifest=manifest,
        params=_unpack_arrays(payload, manifest["params"]),
        opt_arrays=_unpack_arrays(opt_payload, manifest["opt"]["entries"]),
    )


def config_mismatch(expected: dict, actual: dict, prefix: str = "") -> str | None:
    """First differing field path between two config dicts, or None."""
    for key in sorted(set(expected) | set(actual)):
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in expected or key not in actual:
            return path
        a, b = expected[key], actual[key]
        if isinstance(a, dict) and isinstance(b, dict):
            sub = config_mismatch(a, b, path)
            if sub:
                return sub
        elif isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
            if list(a) != list(b):
                return path
        elif a != b:
            return path
    return None
