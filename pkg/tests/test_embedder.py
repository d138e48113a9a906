import numpy as np
import pytest

from weakalign.aligner import RegionSet, Region, Sentence
from weakalign.embedder import (
    BagOfWordsProvider,
    HashingProvider,
    RetrievalIndex,
    build_index,
    build_weak_corpus,
    cosine,
    embed_tag_query,
    retrieve_topk,
)

WORDS = sorted("young woman seated on a couch sofa dog cat tree car road sky green".split())


def brute_force_topk(query, index, k):
    scores = [float(np.dot(index.matrix[i], query)) for i in range(len(index))]
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    return [(index.ids[i], scores[i]) for i in order[:k]]


def test_cosine_basic_identities():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(8)
    assert abs(cosine(v, v) - 1.0) < 1e-12
    assert abs(cosine(v, -v) + 1.0) < 1e-12
    assert abs(cosine(np.array([1.0, 0.0]), np.array([1.0, 1.0])) - 0.7071) < 1e-4


def test_cosine_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = rng.standard_normal(5)
        b = rng.standard_normal(5)
        assert abs(cosine(a, b) - cosine(b, a)) < 1e-7


def test_cosine_rejects_zero_vector():
    with pytest.raises(ValueError):
        cosine(np.zeros(3), np.ones(3))


def test_bow_single_token_is_basis_direction():
    provider = BagOfWordsProvider(WORDS)
    vec = provider.embed("dog")
    assert abs(np.linalg.norm(vec) - 1.0) < 1e-6
    assert vec[1 + WORDS.index("dog")] == 1.0
    assert np.count_nonzero(vec) == 1


def test_bow_repeated_token_same_direction():
    provider = BagOfWordsProvider(WORDS)
    assert np.allclose(provider.embed("dog dog"), provider.embed("dog"))


def test_tag_query_against_sentences_hand_oracle():
    provider = BagOfWordsProvider(WORDS)
    query = embed_tag_query(["woman", "sofa", "couch"], provider)
    related = provider.embed("young woman seated on a couch")
    unrelated = provider.embed("a dog on the road")
    # hand-computed: overlap {woman, couch} of 3x6 unique words -> 2/sqrt(18)
    assert abs(cosine(query, related) - 2.0 / np.sqrt(18)) < 1e-12
    assert cosine(query, related) > cosine(query, unrelated)


def test_unit_norm_for_any_nonempty_input():
    for provider in (BagOfWordsProvider(WORDS), HashingProvider(64)):
        for text in ("dog", "completely unseen words here", "dog sofa dog"):
            assert abs(np.linalg.norm(provider.embed(text)) - 1.0) < 1e-6
            assert np.array_equal(provider.embed(text), provider.embed(text))
        with pytest.raises(ValueError):
            provider.embed("   ")


def test_empty_tag_list_rejected():
    with pytest.raises(ValueError):
        embed_tag_query([], BagOfWordsProvider(WORDS))


def make_index(rng, n, dim=6):
    ids = tuple(f"t{i:04d}" for i in range(n))
    m = rng.standard_normal((n, dim))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return RetrievalIndex(ids=ids, matrix=m, provider_name="test")


def test_topk_equals_brute_force_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        index = make_index(rng, n)
        k = int(rng.integers(1, 8))
        q = rng.standard_normal(6)
        assert retrieve_topk(q, index, k) == brute_force_topk(q, index, k)


def test_topk_tie_break_by_ascending_id():
    m = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    index = RetrievalIndex(ids=("b", "a", "c"), matrix=m, provider_name="test")
    got = retrieve_topk(np.array([1.0, 0.0]), index, 3)
    assert [g[0] for g in got] == ["b", "c", "a"]


def test_k_larger_than_corpus_returns_full_sorted():
    rng = np.random.default_rng(3)
    index = make_index(rng, 4)
    got = retrieve_topk(rng.standard_normal(6), index, 99)
    assert len(got) == 4
    scores = [s for _, s in got]
    assert scores == sorted(scores, reverse=True)


def _mini_world():
    provider = BagOfWordsProvider(WORDS)
    regions = lambda tags: [
        Region(feature=np.zeros(4), box=(0, 0, 10, 10), tag=t, class_id=i) for i, t in enumerate(tags)
    ]
    images = [
        RegionSet("img0", 100, 100, regions(["dog", "tree"])),
        RegionSet("img1", 100, 100, regions(["woman", "couch"])),
        RegionSet("img2", 100, 100, regions([" "])),  # no usable tags
    ]
    texts = [
        Sentence("t0", "a dog under a tree", [], []),
        Sentence("t1", "young woman seated on a couch", [], []),
        Sentence("t2", "a car on the road", [], []),
    ]
    return images, texts, provider


def test_build_weak_corpus_counts_and_skips():
    images, texts, provider = _mini_world()
    pairs, skipped = build_weak_corpus(images, texts, provider, k=2)
    assert skipped == ["img2"]
    assert len(pairs) == 2 * 2
    by_img = {}
    for p in pairs:
        by_img.setdefault(p.image_id, []).append(p)
    assert by_img["img0"][0].text_id == "t0"
    assert by_img["img1"][0].text_id == "t1"
    for plist in by_img.values():
        assert [p.rank for p in plist] == [0, 1]


def test_topk_nesting_k1_prefix_of_k5():
    images, texts, provider = _mini_world()
    p1, _ = build_weak_corpus(images, texts, provider, k=1)
    p3, _ = build_weak_corpus(images, texts, provider, k=3)
    for img in ("img0", "img1"):
        first = [p for p in p1 if p.image_id == img]
        full = [p for p in p3 if p.image_id == img]
        assert (first[0].text_id, first[0].score) == (full[0].text_id, full[0].score)


def test_corpus_build_is_deterministic():
    images, texts, provider = _mini_world()
    a, _ = build_weak_corpus(images, texts, provider, k=3)
    b, _ = build_weak_corpus(images, texts, provider, k=3)
    assert [(p.image_id, p.text_id, p.rank, p.score) for p in a] == [
        (p.image_id, p.text_id, p.rank, p.score) for p in b
    ]


def test_index_matrix_immutable():
    rng = np.random.default_rng(5)
    index = make_index(rng, 3)
    with pytest.raises(ValueError):
        index.matrix[0, 0] = 5.0
