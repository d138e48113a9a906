import numpy as np
import pytest

from weakalign import numkernel as nk
from weakalign.aligner import Region, RegionSet
from weakalign.fusion import (
    FusionModel,
    ModelConfig,
    collate,
    encode_box_geometry,
    text_to_region_attention,
)

TOY = ModelConfig(layers=2, hidden=32, heads=4, vocab_size=30, region_feat_dim=8,
                  region_classes=6, max_tokens=12, max_regions=5)


def make_regions(rng, n, d=8, image_id="img0"):
    regions = []
    for i in range(n):
        x1, y1 = rng.integers(0, 50, size=2)
        regions.append(Region(
            feature=rng.standard_normal(d),
            box=(int(x1), int(y1), int(x1) + int(rng.integers(5, 40)), int(y1) + int(rng.integers(5, 40))),
            tag=f"tag{i}", class_id=i % 6,
        ))
    return RegionSet(image_id, 100, 100, regions)


def make_batch(rng, b=2, kt=5, kv=3, config=TOY):
    examples = []
    for _ in range(b):
        tokens = [int(t) for t in rng.integers(5, config.vocab_size, size=kt)]
        examples.append((tokens, make_regions(rng, kv, config.region_feat_dim), []))
    return collate(examples, config, dtype=np.float64)


def test_box_geometry_full_image():
    assert np.allclose(encode_box_geometry((0, 0, 640, 480), 640, 480), [0, 0, 1, 1, 1])


def test_box_geometry_hand_value():
    got = encode_box_geometry((10, 20, 30, 60), 100, 100)
    assert np.allclose(got, [0.1, 0.2, 0.3, 0.6, 0.08])


def test_box_geometry_scale_invariance():
    a = encode_box_geometry((10, 20, 30, 60), 100, 100)
    b = encode_box_geometry((20, 40, 60, 120), 200, 200)
    assert np.allclose(a, b)


def test_box_geometry_rejects_degenerate():
    with pytest.raises(ValueError):
        encode_box_geometry((10, 20, 10, 60), 100, 100)
    with pytest.raises(ValueError):
        encode_box_geometry((10, 20, 120, 60), 100, 100)


def test_config_validates_divisibility():
    with pytest.raises(ValueError):
        ModelConfig(hidden=30, heads=4)


def test_paper_scale_dimensions():
    cfg = ModelConfig.paper_scale()
    assert (cfg.layers, cfg.hidden, cfg.heads) == (12, 768, 12)


def test_collate_rejects_overlong():
    rng = np.random.default_rng(0)
    tokens = [5] * (TOY.max_tokens + 1)
    with pytest.raises(ValueError):
        collate([(tokens, make_regions(rng, 2), [])], TOY)


def test_identical_regions_embed_identically():
    rng = np.random.default_rng(1)
    config = TOY
    model = FusionModel(config, np.random.default_rng(7), dtype=np.float64)
    region = make_regions(rng, 1).regions[0]
    rs = RegionSet("img0", 100, 100, [region, Region(
        feature=region.feature.copy(), box=region.box, tag=region.tag, class_id=region.class_id)])
    batch = collate([([5, 6], rs, [])], config, dtype=np.float64)
    emb = model.embed_fused(batch).numpy()
    t_len = batch.text_len
    assert np.array_equal(emb[0, t_len], emb[0, t_len + 1])


def test_changing_box_changes_embedding():
    config = TOY
    model = FusionModel(config, np.random.default_rng(7), dtype=np.float64)
    feat = np.random.default_rng(2).standard_normal(8)
    rs1 = RegionSet("i", 100, 100, [Region(feature=feat, box=(0, 0, 10, 10), tag="t", class_id=0)])
    rs2 = RegionSet("i", 100, 100, [Region(feature=feat, box=(5, 5, 60, 60), tag="t", class_id=0)])
    b1 = collate([([5], rs1, [])], config, dtype=np.float64)
    b2 = collate([([5], rs2, [])], config, dtype=np.float64)
    e1 = model.embed_fused(b1).numpy()
    e2 = model.embed_fused(b2).numpy()
    assert not np.allclose(e1[0, b1.text_len], e2[0, b2.text_len])


def test_attention_rows_sum_to_one_over_valid():
    rng = np.random.default_rng(3)
    model = FusionModel(TOY, np.random.default_rng(11), dtype=np.float64)
    examples = [([5, 6, 7], make_regions(rng, 2), []), ([8, 9], make_regions(rng, 3), [])]
    batch = collate(examples, TOY, dtype=np.float64)
    out = model.forward(batch, record_attention=True)
    valid = np.concatenate([batch.text_valid, batch.region_valid], axis=1)
    for attn in out.attentions:
        for i in range(batch.batch_size):
            rows = attn[i][:, valid[i], :]
            assert np.abs(rows.sum(axis=-1) - 1.0).max() < 1e-5


def test_padding_never_influences_real_positions():
    rng = np.random.default_rng(4)
    model = FusionModel(TOY, np.random.default_rng(13), dtype=np.float64)
    examples = [([5, 6, 7], make_regions(rng, 2), []), ([8], make_regions(rng, 1), [])]
    batch = collate(examples, TOY, dtype=np.float64)
    base = model.forward(batch)
    base_hidden = np.array(base.hidden.numpy(), copy=True)
    base_itm = np.array(base.itm_logit.numpy(), copy=True)

    # perturb every padded slot: token ids, features, geometry
    batch.token_ids[~batch.text_valid] = 7
    batch.feats[~batch.region_valid] = 99.0
    batch.geoms[~batch.region_valid] = 0.5
    out = model.forward(batch)
    valid = np.concatenate([batch.text_valid, batch.region_valid], axis=1)
    assert np.array_equal(base_hidden[valid], out.hidden.numpy()[valid])
    assert np.array_equal(base_itm, out.itm_logit.numpy())


def test_region_permutation_equivariance():
    rng = np.random.default_rng(5)
    model = FusionModel(TOY, np.random.default_rng(17), dtype=np.float64)
    regions = make_regions(rng, 4)
    tokens = [5, 6, 7]
    perm = [2, 0, 3, 1]
    permuted = RegionSet(regions.image_id, regions.width, regions.height,
                         [regions.regions[p] for p in perm])
    b1 = collate([(tokens, regions, [])], TOY, dtype=np.float64)
    b2 = collate([(tokens, permuted, [])], TOY, dtype=np.float64)
    h1 = model.forward(b1).hidden.numpy()
    h2 = model.forward(b2).hidden.numpy()
    t = b1.text_len
    for new_pos, old_pos in enumerate(perm):
        assert np.allclose(h2[0, t + new_pos], h1[0, t + old_pos], atol=1e-12)
    assert np.allclose(h1[0, :t], h2[0, :t], atol=1e-12)


def test_itm_score_deterministic():
    rng = np.random.default_rng(6)
    model = FusionModel(TOY, np.random.default_rng(19), dtype=np.float64)
    batch = make_batch(rng)
    s1 = model.forward(batch).itm_logit.numpy()
    s2 = model.forward(batch).itm_logit.numpy()
    assert np.array_equal(s1, s2)


def test_masked_region_features_zeroed_targets_kept():
    rng = np.random.default_rng(7)
    regions = make_regions(rng, 3)
    batch = collate([([5], regions, [1])], TOY)
    assert np.array_equal(batch.feats[0, 1], np.zeros(8, dtype=np.float32))
    assert not np.array_equal(batch.feats[0, 0], np.zeros(8, dtype=np.float32))
    # source region set untouched
    assert not np.array_equal(regions.regions[1].feature, np.zeros(8))


def test_text_to_region_attention_shapes_and_rows():
    rng = np.random.default_rng(8)
    model = FusionModel(TOY, np.random.default_rng(23), dtype=np.float64)
    examples = [([5, 6, 7], make_regions(rng, 2), []), ([8, 9], make_regions(rng, 4), [])]
    batch = collate(examples, TOY, dtype=np.float64)
    per_head, averaged = text_to_region_attention(model, batch)
    assert per_head[0].shape == (TOY.heads, 3, 2)
    assert averaged[1].shape == (2, 4)
    for avg in averaged:
        assert np.abs(avg.sum(axis=-1) - 1.0).max() < 1e-6


def head_loss_builders(model, batch, rng):
    v = model.config.vocab_size
    c = model.config.region_classes
    d = model.config.region_feat_dim
    b_idx = np.array([0, 1])
    tok_pos = np.array([1, 2])
    reg_pos = np.array([batch.region_position(0), batch.region_position(1)])
    tok_targets = rng.integers(0, v, size=2)
    cls_targets = rng.integers(0, c, size=2)
    feat_targets = rng.standard_normal((2, d))
    phrase = [[int(t) for t in rng.integers(0, v, size=2)], [int(rng.integers(0, v))]]
    labels = np.array([1.0, 0.0])

    from weakalign import objectives as obj

    def mlm():
        out = model.forward(batch)
        rows = model.gather_rows(out.hidden, b_idx, tok_pos)
        return obj.mlm_loss(model.vocab_logits(rows), tok_targets)

    def mrc():
        out = model.forward(batch)
        rows = model.gather_rows(out.hidden, b_idx, reg_pos)
        return obj.mrc_loss(model.region_class_logits(rows), cls_targets)

    def mrfr():
        out = model.forward(batch)
        rows = model.gather_rows(out.hidden, b_idx, reg_pos)
        return obj.mrfr_loss(model.region_feature_pred(rows), feat_targets)

    def pmrtc():
        out = model.forward(batch)
        rows = model.gather_rows(out.hidden, b_idx, reg_pos)
        return obj.p_mrtc_loss(model.vocab_logits(rows), phrase)

    def itm():
        return obj.itm_loss(model.forward(batch).itm_logit, labels)

    return {"mlm": mlm, "mrc": mrc, "mrfr": mrfr, "p_mrtc": pmrtc, "itm": itm}


@pytest.mark.parametrize("head", ["mlm", "mrc", "mrfr", "p_mrtc", "itm"])
def test_end_to_end_gradcheck_per_head(head):
    """Every head's loss independently passes finite differences (sampled)."""
    config = ModelConfig(layers=1, hidden=8, heads=2, vocab_size=12, region_feat_dim=4,
                         region_classes=5, max_tokens=8, max_regions=4)
    model = FusionModel(config, np.random.default_rng(29), dtype=np.float64)
    rng = np.random.default_rng(31)
    examples = []
    for _ in range(2):
        tokens = [int(t) for t in rng.integers(5, config.vocab_size, size=3)]
        examples.append((tokens, make_regions(rng, 2, d=4), []))
    batch = collate(examples, config, dtype=np.float64)
    loss_fn = head_loss_builders(model, batch, np.random.default_rng(37))[head]
    report = nk.gradcheck.check_gradients(loss_fn, model.params, sample=6, rng=np.random.default_rng(41))
    worst = max(report.values())
    assert worst < 1e-4, report
