"""Text-embedding providers and cosine top-K retrieval.

Providers map text to a deterministic unit-norm vector. Two concrete ones
ship here: a bag-of-words provider over a fixed word list (out-of-vocabulary
tokens fall into a shared bucket so the unit-norm contract holds for any
non-empty input) and a feature-hashing provider for open vocabularies. A
neural sentence encoder can be plugged in by implementing the same
`name` / `dimension` / `embed` surface.

Retrieval is exhaustive: one dot product per candidate, O(|candidates| * dim)
per query. Ties are broken by ascending candidate id.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .aligner import RegionSet, Sentence, WeakPair, tokenize_words

logger = logging.getLogger(__name__)


class BagOfWordsProvider:
    """Unit-norm token-count vectors over a fixed word list.

    Index 0 is the shared out-of-vocabulary bucket; word w sits at
    `1 + position of w`.
    """

    name = "bow"

    def __init__(self, words: list[str]):
        self._index = {w: i + 1 for i, w in enumerate(words)}
        self.dimension = len(words) + 1

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize_words(text)
        if not tokens:
            raise ValueError(f"cannot embed empty text: {text!r}")
        vec = np.zeros(self.dimension, dtype=np.float64)
        for t in tokens:
            vec[self._index.get(t, 0)] += 1.0
        return vec / np.linalg.norm(vec)


class HashingProvider:
    """Signed feature hashing into a fixed number of buckets.

    Uses md5 so the mapping is stable across processes and platforms.
    """

    name = "hash"

    def __init__(self, dimension: int = 256):
        if dimension < 2:
            raise ValueError("hashing dimension must be >= 2")
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize_words(text)
        if not tokens:
            raise ValueError(f"cannot embed empty text: {text!r}")
        vec = np.zeros(self.dimension, dtype=np.float64)
        for t in tokens:
            digest = hashlib.md5(t.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:4], "little") % self.dimension
            sign = 1.0 if digest[4] & 1 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:  # opposite-sign collisions cancelled everything
            vec[int.from_bytes(hashlib.md5(text.encode()).digest()[:4], "little") % self.dimension] = 1.0
            norm = 1.0
        return vec / norm


PROVIDERS = {"bow": BagOfWordsProvider, "hash": HashingProvider}


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cosine: dimension mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def embed_tag_query(tags: list[str], provider) -> np.ndarray:
    """Embed the concatenated tag sequence."""
    if not tags or not any(t.strip() for t in tags):
        raise ValueError("cannot build a tag query from an empty tag list")
    return provider.embed(" ".join(tags))


@dataclass(frozen=True)
class RetrievalIndex:
    ids: tuple[str, ...]
    matrix: np.ndarray  # (n, dim), one unit-norm row per candidate
    provider_name: str
    built_at: float = field(default_factory=time.time)

    def __post_init__(self):
        if len(self.ids) != self.matrix.shape[0]:
            raise ValueError(f"{len(self.ids)} ids vs {self.matrix.shape[0]} embeddings")
        self.matrix.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)


def build_index(sentences: list[Sentence], provider) -> RetrievalIndex:
    vecs = np.stack([provider.embed(s.text) for s in sentences])
    return RetrievalIndex(ids=tuple(s.text_id for s in sentences), matrix=vecs, provider_name=provider.name)


def retrieve_topk(query: np.ndarray, index: RetrievalIndex, k: int) -> list[tuple[str, float]]:
    """Top-k candidates by cosine, scores non-increasing, ties by ascending id.

    Scores are one dot product per candidate row, in index order, so a
    brute-force re-check reproduces them bit for bit.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise ValueError("cannot retrieve from an empty index")
    q = np.asarray(query, dtype=np.float64)
    scores = np.array([np.dot(index.matrix[i], q) for i in range(len(index))])
    order = np.lexsort((np.array(index.ids), -scores))
    take = order[: min(k, len(index))]
    return [(index.ids[i], float(scores[i])) for i in take]


def build_weak_corpus(
    images: list[RegionSet],
    sentences: list[Sentence],
    provider,
    k: int = 5,
) -> tuple[list[WeakPair], list[str]]:
    """Retrieve the top-k sentences for every image's tag query.

    Returns the pairs (k per image, rank ascending) and the ids of images
    skipped for having no usable tags. Output is a pure function of the
    inputs, the provider, and k.
    """
    index = build_index(sentences, provider)
    pairs: list[WeakPair] = []
    skipped: list[str] = []
    for image in images:
        tags = [t for t in image.tags if t.strip()]
        if not tags:
            logger.warning("image %s has no tags, skipping", image.image_id)
            skipped.append(image.image_id)
            continue
        query = embed_tag_query(tags, provider)
        for rank, (text_id, score) in enumerate(retrieve_topk(query, index, k)):
            pairs.append(WeakPair(image_id=image.image_id, text_id=text_id, rank=rank, score=score))
    return pairs, skipped
