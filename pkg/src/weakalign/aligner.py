"""Phrase extraction, phrase-region linking, and masking plans.

Text is handled at word level: a lowercase word tokenizer plus the special
tokens [PAD], [UNK], [CLS], [SEP], [MASK]. Part-of-speech tags come from a
small lexicon (closed-class determiner list plus noun/adjective lists that
ship with the synthetic world generator), and noun phrases are maximal
`determiner? adjective* noun+` runs.

Masking comes in three flavours built here as explicit plans:
  * tag/region plans: independent 0.15-style masking on both sides,
    80/10/10 corruption for tokens, feature zeroing for regions;
  * linked-phrase plans: a fair coin picks one modality, then each
    phrase-region link is selected with probability proportional to its
    link score (at least one link always masked);
  * whole-sentence plans: plain masked-language-model corruption.

All randomness flows through an explicit numpy Generator so plans are
reproducible from (example, seed).
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
MASK_TOKEN = "[MASK]"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

_WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)?")

DEFAULT_DETERMINERS = frozenset(
    "a an the this that these those some any each every no another one two three".split()
)


def tokenize_words(text: str) -> list[str]:
    """Lowercase word tokens; punctuation is dropped."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Word vocabulary with the special tokens at fixed low ids."""

    def __init__(self, words: list[str]):
        self._words = list(SPECIAL_TOKENS) + list(words)
        self._ids = {w: i for i, w in enumerate(self._words)}
        if len(self._ids) != len(self._words):
            raise ValueError("duplicate words in vocabulary")

    @classmethod
    def build(cls, texts: list[str], extra_words: list[str] = ()) -> "Vocabulary":
        seen: set[str] = set()
        for t in texts:
            seen.update(tokenize_words(t))
        for w in extra_words:
            seen.update(tokenize_words(w))
        return cls(sorted(seen))

    @property
    def size(self) -> int:
        return len(self._words)

    @property
    def words(self) -> list[str]:
        return self._words[len(SPECIAL_TOKENS):]

    @property
    def first_word_id(self) -> int:
        return len(SPECIAL_TOKENS)

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def word_of(self, token_id: int) -> str:
        return self._words[token_id]

    def encode(self, text: str) -> list[int]:
        return [self.id_of(w) for w in tokenize_words(text)]


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class Region:
    feature: np.ndarray  # (d_v,)
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in pixels
    tag: str
    class_id: int
    confidence: float = 1.0


@dataclass
class RegionSet:
    image_id: str
    width: float
    height: float
    regions: list[Region]

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def tags(self) -> list[str]:
        return [r.tag for r in self.regions]


@dataclass
class Sentence:
    text_id: str
    text: str
    words: list[str]
    token_ids: list[int]
    phrase_spans: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def from_text(cls, text_id: str, text: str, vocab: Vocabulary, lexicon: "PosLexicon | None" = None) -> "Sentence":
        words = tokenize_words(text)
        ids = [vocab.id_of(w) for w in words]
        spans: list[tuple[int, int]] = []
        if lexicon is not None:
            spans = extract_noun_phrases(words, lexicon.tag_words(words))
        return cls(text_id=text_id, text=text, words=words, token_ids=ids, phrase_spans=spans)


@dataclass
class PhraseLink:
    span: tuple[int, int]
    region: int
    score: float  # in [0, 1]


@dataclass
class WeakPair:
    image_id: str
    text_id: str
    rank: int
    score: float
    links: list[PhraseLink] = field(default_factory=list)
    label: int = 1


# ---------------------------------------------------------------------------
# part-of-speech tagging and noun-phrase extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PosLexicon:
    """Word-list tagger. Membership priority: determiner, adjective, noun."""

    nouns: frozenset
    adjectives: frozenset
    determiners: frozenset = DEFAULT_DETERMINERS

    def tag(self, word: str) -> str:
        if word in self.determiners:
            return "DET"
        if word in self.adjectives:
            return "ADJ"
        if word in self.nouns:
            return "NOUN"
        return "OTHER"

    def tag_words(self, words: list[str]) -> list[str]:
        return [self.tag(w) for w in words]


def extract_noun_phrases(words: list[str], pos_tags: list[str]) -> list[tuple[int, int]]:
    """Maximal `DET? ADJ* NOUN+` runs, scanned left to right, non-overlapping.

    Returns [start, end) spans over `words`; every span ends on a noun.
    """
    if len(words) != len(pos_tags):
        raise ValueError(f"{len(words)} words vs {len(pos_tags)} tags")
    spans: list[tuple[int, int]] = []
    n = len(words)
    i = 0
    while i < n:
        j = i
        if pos_tags[j] == "DET":
            j += 1
        while j < n and pos_tags[j] == "ADJ":
            j += 1
        k = j
        while k < n and pos_tags[k] == "NOUN":
            k += 1
        if k > j:
            spans.append((i, k))
            i = k
        else:
            i += 1
    return spans


def link_phrases(sentence: Sentence, regions: RegionSet, word_embedder) -> list[PhraseLink]:
    """Link each noun phrase to its best-matching region by tag similarity.

    Similarity is the embedder cosine between the phrase text and the region
    tag; ties go to the lowest region index. Scores are floored at zero and
    zero-score links are dropped (proportional masking needs positive
    weights), so every returned score is in (0, 1].
    """
    if not sentence.phrase_spans or regions.n_regions == 0:
        return []
    tag_vecs = [word_embedder.embed(tag) for tag in regions.tags]
    links: list[PhraseLink] = []
    for span in sentence.phrase_spans:
        # determiners carry no content; "the dog" should match tag "dog" exactly
        content = [w for w in sentence.words[span[0]:span[1]] if w not in DEFAULT_DETERMINERS]
        phrase = " ".join(content) if content else " ".join(sentence.words[span[0]:span[1]])
        pvec = word_embedder.embed(phrase)
        scores = np.array([float(np.dot(pvec, tv)) for tv in tag_vecs])
        best = int(np.argmax(scores))
        score = max(0.0, float(scores[best]))
        score = min(score, 1.0)
        if score > 0.0:
            links.append(PhraseLink(span=span, region=best, score=score))
    return links


# ---------------------------------------------------------------------------
# mask plans
# ---------------------------------------------------------------------------


@dataclass
class TextMask:
    position: int
    target_id: int
    action: str  # 'mask' | 'random' | 'keep'
    random_id: int | None = None


@dataclass
class RegionMask:
    position: int
    class_id: int
    feature: np.ndarray  # pre-masking input feature, the regression target
    phrase_token_ids: list[int] | None = None  # linked-phrase targets, when planned from links


@dataclass
class MaskPlan:
    modality: str  # 'text' | 'vision' | 'both'
    text_masks: list[TextMask] = field(default_factory=list)
    region_masks: list[RegionMask] = field(default_factory=list)

    def __post_init__(self):
        if self.modality == "text" and self.region_masks:
            raise ValueError("text-modality plan carries region masks")
        if self.modality == "vision" and self.text_masks:
            raise ValueError("vision-modality plan carries text masks")


def _corrupt_action(rng: np.random.Generator) -> str:
    u = rng.random()
    if u < 0.8:
        return "mask"
    if u < 0.9:
        return "random"
    return "keep"


def plan_tag_region_masks(
    tag_ids: list[int],
    regions: RegionSet,
    rate: float,
    rng: np.random.Generator,
    vocab: Vocabulary,
) -> MaskPlan:
    """Independent masking on the tag tokens and the regions.

    Each tag token is masked with probability `rate` and corrupted 80/10/10
    (MASK / random word / keep); each region is masked with probability
    `rate`, recording its class id and input feature as targets.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must be in (0,1), got {rate}")
    text_masks: list[TextMask] = []
    for pos, tid in enumerate(tag_ids):
        if rng.random() < rate:
            action = _corrupt_action(rng)
            rand_id = None
            if action == "random":
                rand_id = int(rng.integers(vocab.first_word_id, vocab.size))
            text_masks.append(TextMask(position=pos, target_id=tid, action=action, random_id=rand_id))
    region_masks: list[RegionMask] = []
    for pos, region in enumerate(regions.regions):
        if rng.random() < rate:
            region_masks.append(
                RegionMask(position=pos, class_id=region.class_id, feature=np.array(region.feature, copy=True))
            )
    return MaskPlan(modality="both", text_masks=text_masks, region_masks=region_masks)


def plan_sentence_masks(
    token_ids: list[int],
    rate: float,
    rng: np.random.Generator,
    vocab: Vocabulary,
) -> MaskPlan:
    """Plain MLM corruption over every sentence token."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must be in (0,1), got {rate}")
    text_masks: list[TextMask] = []
    for pos, tid in enumerate(token_ids):
        if rng.random() < rate:
            action = _corrupt_action(rng)
            rand_id = None
            if action == "random":
                rand_id = int(rng.integers(vocab.first_word_id, vocab.size))
            text_masks.append(TextMask(position=pos, target_id=tid, action=action, random_id=rand_id))
    return MaskPlan(modality="both", text_masks=text_masks)


def select_linked_masks(scores: np.ndarray, base_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli selection with per-link probability min(1, rate*s/mean(s)).

    This is the raw proportional draw; the caller applies the at-least-one
    rule afterwards.
    """
    scores = np.asarray(scores, dtype=np.float64)
    probs = np.minimum(1.0, base_rate * scores / scores.mean())
    return rng.random(len(scores)) < probs


def plan_linked_masks(
    pair: WeakPair,
    sentence: Sentence,
    regions: RegionSet,
    base_rate: float,
    rng: np.random.Generator,
) -> MaskPlan:
    """One-modality masking over the pair's phrase-region links.

    A fair coin picks text or vision. Each link is selected with probability
    proportional to its score; if nothing is drawn the highest-score link is
    masked so the plan is never empty. Text plans mask every token of the
    selected phrases with [MASK]; vision plans zero the selected regions and
    carry the linked phrase's token ids as classification targets.
    """
    if not pair.links:
        raise ValueError(f"pair {pair.image_id}/{pair.text_id} has no links; cannot plan linked masks")
    modality = "text" if rng.random() < 0.5 else "vision"
    scores = np.array([l.score for l in pair.links])
    selected = select_linked_masks(scores, base_rate, rng)
    if not selected.any():
        selected[int(np.argmax(scores))] = True

    if modality == "text":
        text_masks: list[TextMask] = []
        for link, sel in zip(pair.links, selected):
            if not sel:
                continue
            for pos in range(link.span[0], link.span[1]):
                text_masks.append(TextMask(position=pos, target_id=sentence.token_ids[pos], action="mask"))
        return MaskPlan(modality="text", text_masks=text_masks)

    by_region: dict[int, RegionMask] = {}
    for link, sel in zip(pair.links, selected):
        if not sel:
            continue
        phrase_ids = list(sentence.token_ids[link.span[0]:link.span[1]])
        if link.region in by_region:
            by_region[link.region].phrase_token_ids.extend(phrase_ids)
            continue
        region = regions.regions[link.region]
        by_region[link.region] = RegionMask(
            position=link.region,
            class_id=region.class_id,
            feature=np.array(region.feature, copy=True),
            phrase_token_ids=phrase_ids,
        )
    return MaskPlan(modality="vision", region_masks=[by_region[k] for k in sorted(by_region)])


def apply_text_masks(token_ids: list[int], masks: list[TextMask]) -> list[int]:
    """Token ids after corruption; targets stay in the plan."""
    out = list(token_ids)
    for m in masks:
        if m.action == "mask":
            out[m.position] = MASK_ID
        elif m.action == "random":
            out[m.position] = m.random_id
        # 'keep' leaves the token in place
    return out


# ---------------------------------------------------------------------------
# image-text matching negatives
# ---------------------------------------------------------------------------


def sample_itm_pairs(
    pairs: list[WeakPair],
    rng: np.random.Generator,
    swap_prob: float = 0.5,
) -> list[tuple[int, int]]:
    """Per batch slot, decide which sentence it carries and its match label.

    Returns (sentence_source_index, label) per input pair: kept positives
    point at themselves with label 1; negatives take a different example's
    sentence (never one with the pair's own text id) with label 0.
    """
    n = len(pairs)
    if n == 0:
        return []
    if n == 1:
        logger.warning("batch of 1: no swap partner available, keeping positive")
        return [(0, 1)]
    out: list[tuple[int, int]] = []
    for i in range(n):
        if rng.random() >= swap_prob:
            out.append((i, 1))
            continue
        candidates = [j for j in range(n) if j != i and pairs[j].text_id != pairs[i].text_id]
        if not candidates:
            logger.warning("no distinct-sentence swap partner for %s, keeping positive", pairs[i].text_id)
            out.append((i, 1))
            continue
        out.append((candidates[int(rng.integers(len(candidates)))], 0))
    return out


# ---------------------------------------------------------------------------
# link-quality report
# ---------------------------------------------------------------------------


def write_link_report(pairs: list[WeakPair], sentences: dict[str, Sentence], path) -> None:
    """Coverage and score histogram of phrase links, as CSV."""
    total_phrases = 0
    linked = 0
    hist = [0] * 10
    for p in pairs:
        total_phrases += len(sentences[p.text_id].phrase_spans)
        linked += len(p.links)
        for link in p.links:
            hist[min(9, int(link.score * 10))] += 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["total_phrases", total_phrases])
        w.writerow(["linked_phrases", linked])
        w.writerow(["coverage", f"{linked / total_phrases:.6f}" if total_phrases else "0"])
        for b in range(10):
            w.writerow([f"score_{b / 10:.1f}_{(b + 1) / 10:.1f}", hist[b]])
