import json
import os

import numpy as np
import pytest

from weakalign import corpus
from weakalign import numkernel as nk
from weakalign.aligner import extract_noun_phrases
from weakalign.corpus import (
    CheckpointError,
    SchemaError,
    WorldSpec,
    concept_names,
    config_mismatch,
    generate_world,
    load_checkpoint,
    load_images,
    load_pairs,
    load_texts,
    load_truth,
    mix_alignment_ratio,
    save_checkpoint,
    write_images,
    write_pairs,
    write_texts,
    write_truth,
    write_world,
)
from weakalign.embedder import BagOfWordsProvider, build_weak_corpus

SMALL = WorldSpec(n_concepts=12, feature_dim=8, noise_sigma=0.1, concepts_per_image=(3, 5),
                  n_images=20, n_eval_images=5, n_distractors=30, seed=7)


def test_concept_names_extend_past_builtin_list():
    names = concept_names(len(corpus.CONCEPT_NOUNS) + 10)
    assert len(names) == len(set(names)) == len(corpus.CONCEPT_NOUNS) + 10


def test_sigma_zero_features_equal_prototypes():
    spec = WorldSpec(n_concepts=8, feature_dim=4, noise_sigma=0.0, concepts_per_image=(2, 3),
                     n_images=10, n_distractors=5, seed=1)
    world = generate_world(spec)
    for image in world.images:
        for region in image.regions:
            assert np.array_equal(region.feature, world.prototypes[region.class_id])


def test_feature_noise_std_within_five_percent():
    spec = WorldSpec(n_concepts=10, feature_dim=8, noise_sigma=0.25, concepts_per_image=(5, 5),
                     n_images=250, n_distractors=0, seed=2)  # 250*5*8 = 10^4 noise draws
    world = generate_world(spec)
    residuals = []
    for image in world.images:
        for region in image.regions:
            residuals.extend(region.feature - world.prototypes[region.class_id])
    std = float(np.std(residuals))
    assert abs(std - 0.25) / 0.25 < 0.05


def test_fixed_seed_gives_bit_identical_files(tmp_path):
    for sub in ("a", "b"):
        write_world(generate_world(SMALL), tmp_path / sub)
    for name in ("images.jsonl", "texts.jsonl", "truth.jsonl", "eval_images.jsonl",
                 "eval_texts.jsonl", "eval_truth.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_truth_spans_match_chunker_output(tmp_path):
    world = generate_world(SMALL)
    write_world(world, tmp_path)
    texts = load_texts(tmp_path / "texts.jsonl")
    for truth in world.truth:
        sent = texts.by_id[truth.text_id]
        expected = extract_noun_phrases(sent.words, texts.lexicon.tag_words(sent.words))
        got = [tuple(pr["span"]) for pr in truth.phrase_regions]
        assert sorted(got) == sorted(expected)
        for pr in truth.phrase_regions:
            region = world.images[world.truth.index(truth)].regions[pr["region"]]
            assert region.tag == pr["concept"]


def test_planted_caption_rank_one_when_sets_distinct():
    spec = WorldSpec(n_concepts=14, feature_dim=8, noise_sigma=0.0, concepts_per_image=(4, 6),
                     n_images=40, n_distractors=200, adjective_prob=0.0, seed=3)
    world = generate_world(spec)
    provider = BagOfWordsProvider(world.vocabulary_words)
    from weakalign.corpus import load_texts as _lt  # sentences via the ingest path
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        write_world(world, d)
        texts = _lt(os.path.join(d, "texts.jsonl"))
        images = load_images(os.path.join(d, "images.jsonl"))
    pairs, skipped = build_weak_corpus(images.region_sets, texts.sentences, provider, k=1)
    assert skipped == []
    truth_by_img = {t.image_id: t.text_id for t in world.truth}
    for p in pairs:
        assert p.text_id == truth_by_img[p.image_id], p


def test_roundtrip_write_read_write_byte_identical(tmp_path):
    world = generate_world(SMALL)
    write_world(world, tmp_path)
    images = load_images(tmp_path / "images.jsonl")
    texts = load_texts(tmp_path / "texts.jsonl")
    truth = load_truth(tmp_path / "truth.jsonl")
    write_images(tmp_path / "images2.jsonl", images.feature_dim, images.class_names, images.region_sets)
    write_texts(tmp_path / "texts2.jsonl", texts.vocab.words, texts.lexicon, texts.raw_texts)
    write_truth(tmp_path / "truth2.jsonl", truth)
    assert (tmp_path / "images.jsonl").read_bytes() == (tmp_path / "images2.jsonl").read_bytes()
    assert (tmp_path / "texts.jsonl").read_bytes() == (tmp_path / "texts2.jsonl").read_bytes()
    assert (tmp_path / "truth.jsonl").read_bytes() == (tmp_path / "truth2.jsonl").read_bytes()


def test_pairs_roundtrip(tmp_path):
    world = generate_world(SMALL)
    write_world(world, tmp_path)
    images = load_images(tmp_path / "images.jsonl")
    texts = load_texts(tmp_path / "texts.jsonl")
    provider = BagOfWordsProvider(texts.vocab.words)
    pairs, skipped = build_weak_corpus(images.region_sets, texts.sentences, provider, k=3)
    corpus.attach_links(pairs, images, texts, provider)
    write_pairs(tmp_path / "pairs.jsonl", pairs, provider.name, 3, skipped)
    loaded = load_pairs(tmp_path / "pairs.jsonl", images, texts)
    write_pairs(tmp_path / "pairs2.jsonl", loaded, provider.name, 3, skipped)
    assert (tmp_path / "pairs.jsonl").read_bytes() == (tmp_path / "pairs2.jsonl").read_bytes()
    assert len(loaded) == len(images.region_sets) * 3


def _corrupt_row(path, out, predicate, mutate):
    lines = path.read_text().splitlines()
    for i, line in enumerate(lines):
        row = json.loads(line)
        if predicate(row):
            mutate(row)
            lines[i] = json.dumps(row)
            break
    out.write_text("\n".join(lines) + "\n")


def test_bad_box_rejected_with_field_path(tmp_path):
    world = generate_world(SMALL)
    write_world(world, tmp_path)

    def flip_box(row):
        box = row["regions"][1]["box"]
        box[0], box[2] = box[2], box[0]  # x2 <= x1

    _corrupt_row(tmp_path / "images.jsonl", tmp_path / "bad.jsonl",
                 lambda r: r.get("record") == "image", flip_box)
    with pytest.raises(SchemaError) as err:
        load_images(tmp_path / "bad.jsonl")
    assert "regions[1].box" in str(err.value)
    assert err.value.line == 2


def test_feature_dim_mismatch_rejected(tmp_path):
    world = generate_world(SMALL)
    write_world(world, tmp_path)

    def shrink(row):
        row["regions"][0]["feature"] = row["regions"][0]["feature"][:-1]

    _corrupt_row(tmp_path / "images.jsonl", tmp_path / "bad.jsonl",
                 lambda r: r.get("record") == "image", shrink)
    with pytest.raises(SchemaError) as err:
        load_images(tmp_path / "bad.jsonl")
    assert "feature" in str(err.value)


def test_zero_region_image_and_empty_sentence_rejected(tmp_path):
    world = generate_world(SMALL)
    write_world(world, tmp_path)
    _corrupt_row(tmp_path / "images.jsonl", tmp_path / "bad_img.jsonl",
                 lambda r: r.get("record") == "image", lambda r: r.__setitem__("regions", []))
    with pytest.raises(SchemaError):
        load_images(tmp_path / "bad_img.jsonl")
    _corrupt_row(tmp_path / "texts.jsonl", tmp_path / "bad_txt.jsonl",
                 lambda r: r.get("record") == "text", lambda r: r.__setitem__("text", "!!!"))
    with pytest.raises(SchemaError):
        load_texts(tmp_path / "bad_txt.jsonl")


def test_mix_ratio_one_keeps_all_planted():
    truth = [(f"i{k}", f"t{k}") for k in range(10)]
    out = mix_alignment_ratio(truth, 1.0, seed=0)
    assert all(aligned for _, _, aligned in out)
    assert [(i, t) for i, t, _ in out] == truth


def test_mix_ratio_zero_no_planted_pairs():
    truth = [(f"i{k}", f"t{k}") for k in range(10)]
    out = mix_alignment_ratio(truth, 0.0, seed=1)
    for (img, txt, aligned), (_, true_txt) in zip(out, truth):
        assert not aligned
        assert txt != true_txt


def test_mix_ratio_exact_count_and_multiset_preserved():
    truth = [(f"i{k:04d}", f"t{k:04d}") for k in range(1000)]
    out = mix_alignment_ratio(truth, 0.5, seed=2)
    aligned = sum(1 for _, _, a in out if a)
    assert aligned == 500
    assert sorted(t for _, t, _ in out) == sorted(t for _, t in truth)
    for (img, txt, a), (_, true_txt) in zip(out, truth):
        assert a == (txt == true_txt)


def test_mix_ratio_single_unaligned_rejected():
    truth = [(f"i{k}", f"t{k}") for k in range(10)]
    with pytest.raises(ValueError):
        mix_alignment_ratio(truth, 0.9, seed=3)


def _fake_params(rng):
    return {
        "b/weight": nk.tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True),
        "a/bias": nk.tensor(rng.standard_normal(5).astype(np.float32), requires_grad=True),
    }


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(4)
    params = _fake_params(rng)
    opt_arrays = {"m/a/bias": np.zeros(5, dtype=np.float32), "v/a/bias": np.ones(5, dtype=np.float32)}
    states = {"order": np.random.default_rng(1).bit_generator.state}
    save_checkpoint(tmp_path / "ck", params, opt_arrays, 17, {"hidden": 8}, step=17, epoch=2,
                    rng_states=states)
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.step == 17 and ck.epoch == 2
    for name, p in params.items():
        assert np.array_equal(ck.params[name], p.numpy())
    assert np.array_equal(ck.opt_arrays["v/a/bias"], np.ones(5, dtype=np.float32))
    assert ck.manifest["rng_states"]["order"] == states["order"]


def test_checkpoint_digest_mismatch_refused(tmp_path):
    rng = np.random.default_rng(5)
    save_checkpoint(tmp_path / "ck", _fake_params(rng), {}, 0, {}, 0, 0, {})
    blob = bytearray((tmp_path / "ck" / "params.bin").read_bytes())
    blob[3] ^= 0xFF
    (tmp_path / "ck" / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(tmp_path / "ck")
    assert "digest" in str(err.value)


def test_config_mismatch_names_field():
    a = {"model": {"hidden": 64, "layers": 2}, "seed": 1}
    b = {"model": {"hidden": 64, "layers": 3}, "seed": 1}
    assert config_mismatch(a, b) == "model.layers"
    assert config_mismatch(a, a) is None
    assert config_mismatch({"x": 1}, {}) == "x"
