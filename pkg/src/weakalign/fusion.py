"""Single-stream fusion transformer over text tokens and image regions.

The fused sequence is [CLS] tokens [SEP] followed by the region slots. Text
positions get learned absolute position embeddings; regions carry no
sequence position, only their projected geometry, which makes region order
a pure relabeling (hidden states permute along with the input). Padding is
excluded from attention with a large negative additive mask, so padded
slots can never influence any real position.

Blocks normalize before each sublayer (pre-LN), with one final layer norm;
this keeps short training schedules stable at the learning rates small
models need.

Heads: vocabulary logits at masked-token positions (also used to classify
masked regions against their linked phrase tokens, same projection),
region-class logits and feature regression at masked-region positions, and
a single match score projected from the [CLS] state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .aligner import CLS_ID, PAD_ID, SEP_ID, RegionSet
from .numkernel import Tensor

NEG_ATTENTION = -1e9  # additive mask; exp() underflows to exactly 0


@dataclass
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    vocab_size: int = 200
    region_feat_dim: int = 16
    region_classes: int = 64
    max_tokens: int = 40
    max_regions: int = 10
    n_modalities: int = 2
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "vocab_size", "region_feat_dim",
                     "region_classes", "max_tokens", "max_regions", "n_modalities"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")

    @classmethod
    def paper_scale(cls, **kw) -> "ModelConfig":
        """12 layers, 768 hidden units, 12 attention heads."""
        return cls(layers=12, hidden=768, heads=12, **kw)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def encode_box_geometry(box, width: float, height: float) -> np.ndarray:
    """[x1/W, y1/H, x2/W, y2/H, area fraction] for a box inside the image."""
    x1, y1, x2, y2 = box
    if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
        raise ValueError(f"invalid box {box} for image {width}x{height}")
    return np.array(
        [x1 / width, y1 / height, x2 / width, y2 / height,
         (y2 - y1) * (x2 - x1) / (width * height)],
        dtype=np.float64,
    )


@dataclass
class FusedBatch:
    """Padded model input. Text block is [CLS] tokens [SEP]; regions follow."""

    token_ids: np.ndarray     # (B, T) int64
    text_valid: np.ndarray    # (B, T) bool
    feats: np.ndarray         # (B, R, d_v), masked slots already zeroed
    geoms: np.ndarray         # (B, R, 5)
    region_valid: np.ndarray  # (B, R) bool

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def text_len(self) -> int:
        return self.token_ids.shape[1]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1] + self.feats.shape[1]

    def text_position(self, token_pos: int) -> int:
        """Fused index of sentence token `token_pos` (0-based, after [CLS])."""
        return 1 + token_pos

    def region_position(self, region_idx: int) -> int:
        return self.text_len + region_idx


def collate(
    examples: list[tuple[list[int], RegionSet, list[int]]],
    config: ModelConfig,
    dtype=np.float32,
) -> FusedBatch:
    """Pack (token_ids, regions, masked_region_positions) triples.

    Token ids arrive already corrupted; masked regions are zeroed here so
    the stored region sets stay untouched.
    """
    b = len(examples)
    max_kt = max(len(t) for t, _, _ in examples)
    max_kv = max(r.n_regions for _, r, _ in examples)
    for tokens, regions, _ in examples:
        if len(tokens) > config.max_tokens:
            raise ValueError(f"sentence of {len(tokens)} tokens exceeds max_tokens={config.max_tokens}")
        if regions.n_regions > config.max_regions:
            raise ValueError(f"{regions.n_regions} regions exceed max_regions={config.max_regions}")
    t_len = max_kt + 2
    token_ids = np.full((b, t_len), PAD_ID, dtype=np.int64)
    text_valid = np.zeros((b, t_len), dtype=bool)
    feats = np.zeros((b, max_kv, config.region_feat_dim), dtype=dtype)
    geoms = np.zeros((b, max_kv, 5), dtype=dtype)
    region_valid = np.zeros((b, max_kv), dtype=bool)
    for i, (tokens, regions, masked) in enumerate(examples):
        token_ids[i, 0] = CLS_ID
        token_ids[i, 1:1 + len(tokens)] = tokens
        token_ids[i, 1 + len(tokens)] = SEP_ID
        text_valid[i, :len(tokens) + 2] = True
        masked_set = set(masked)
        for r, region in enumerate(regions.regions):
            if region.feature.shape != (config.region_feat_dim,):
                raise ValueError(
                    f"region feature dim {region.feature.shape} vs configured {config.region_feat_dim}"
                )
            if r not in masked_set:
                feats[i, r] = region.feature
            geoms[i, r] = encode_box_geometry(region.box, regions.width, regions.height)
            region_valid[i, r] = True
    return FusedBatch(token_ids=token_ids, text_valid=text_valid, feats=feats,
                      geoms=geoms, region_valid=region_valid)


@dataclass
class ForwardOutput:
    hidden: Tensor               # (B, S, H)
    itm_logit: Tensor            # (B,)
    attentions: list[np.ndarray] | None = None  # per layer, (B, A, S, S), detached


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class FusionModel:
    """Transformer encoder plus output heads, parameters in a named dict."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        c = config
        p: dict[str, Tensor] = {}

        def param(name, shape, init="normal"):
            if init == "normal":
                data = _trunc_normal(rng, shape, c.init_std)
            elif init == "zeros":
                data = np.zeros(shape)
            else:  # ones
                data = np.ones(shape)
            p[name] = nk.tensor(data.astype(dtype), requires_grad=True, dtype=dtype, name=name)

        param("tok_emb", (c.vocab_size, c.hidden))
        param("pos_emb", (c.max_tokens + 2, c.hidden))
        param("mod_emb", (c.n_modalities, c.hidden))
        param("vis_proj_w", (c.region_feat_dim, c.hidden))
        param("vis_proj_b", (c.hidden,), "zeros")
        param("geo_proj_w", (5, c.hidden))
        param("geo_proj_b", (c.hidden,), "zeros")
        param("emb_ln_g", (c.hidden,), "ones")
        param("emb_ln_b", (c.hidden,), "zeros")
        for i in range(c.layers):
            for side in ("q", "k", "v", "o"):
                param(f"l{i}.attn_{side}_w", (c.hidden, c.hidden))
                param(f"l{i}.attn_{side}_b", (c.hidden,), "zeros")
            param(f"l{i}.attn_ln_g", (c.hidden,), "ones")
            param(f"l{i}.attn_ln_b", (c.hidden,), "zeros")
            param(f"l{i}.ffn_w1", (c.hidden, 4 * c.hidden))
            param(f"l{i}.ffn_b1", (4 * c.hidden,), "zeros")
            param(f"l{i}.ffn_w2", (4 * c.hidden, c.hidden))
            param(f"l{i}.ffn_b2", (c.hidden,), "zeros")
            param(f"l{i}.ffn_ln_g", (c.hidden,), "ones")
            param(f"l{i}.ffn_ln_b", (c.hidden,), "zeros")
        param("final_ln_g", (c.hidden,), "ones")
        param("final_ln_b", (c.hidden,), "zeros")
        param("vocab_w", (c.hidden, c.vocab_size))
        param("vocab_b", (c.vocab_size,), "zeros")
        param("mrc_w", (c.hidden, c.region_classes))
        param("mrc_b", (c.region_classes,), "zeros")
        param("mrfr_w", (c.hidden, c.region_feat_dim))
        param("mrfr_b", (c.region_feat_dim,), "zeros")
        param("itm_w", (c.hidden, 1))
        param("itm_b", (1,), "zeros")
        self.params = p

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return nk.layer_norm(x, self.params[f"{prefix}_g"], self.params[f"{prefix}_b"],
                             eps=self.config.layer_norm_eps)

    def embed_fused(self, batch: FusedBatch) -> Tensor:
        """Token and region embeddings, concatenated and layer-normalized."""
        p = self.params
        t_len = batch.text_len
        text = p["tok_emb"][batch.token_ids] + p["pos_emb"][np.arange(t_len)] + p["mod_emb"][np.zeros(1, dtype=np.int64)]
        feats = nk.tensor(batch.feats, dtype=self.dtype)
        geoms = nk.tensor(batch.geoms.astype(self.dtype), dtype=self.dtype)
        vision = (feats @ p["vis_proj_w"] + p["vis_proj_b"]) + (geoms @ p["geo_proj_w"] + p["geo_proj_b"]) \
            + p["mod_emb"][np.ones(1, dtype=np.int64)]
        x = nk.concat([text, vision], axis=1)
        return self._ln(x, "emb_ln")

    def forward(self, batch: FusedBatch, record_attention: bool = False) -> ForwardOutput:
        c = self.config
        if batch.token_ids.shape[1] > c.max_tokens + 2:
            raise ValueError(f"text block {batch.token_ids.shape[1]} exceeds max {c.max_tokens + 2}")
        p = self.params
        x = self.embed_fused(batch)
        b, s = batch.batch_size, batch.seq_len
        valid = np.concatenate([batch.text_valid, batch.region_valid], axis=1)
        add_mask = nk.tensor(
            np.where(valid, 0.0, NEG_ATTENTION).astype(self.dtype)[:, None, None, :], dtype=self.dtype
        )
        head_dim = c.hidden // c.heads
        scale = 1.0 / math.sqrt(head_dim)
        attentions: list[np.ndarray] | None = [] if record_attention else None
        for i in range(c.layers):
            normed = self._ln(x, f"l{i}.attn_ln")

            def heads(side):
                y = normed @ p[f"l{i}.attn_{side}_w"] + p[f"l{i}.attn_{side}_b"]
                return y.reshape(b, s, c.heads, head_dim).transpose(0, 2, 1, 3)

            q, k, v = heads("q"), heads("k"), heads("v")
            scores = (q @ k.transpose(0, 1, 3, 2)) * scale + add_mask
            probs = nk.softmax(scores, axis=-1)
            if record_attention:
                attentions.append(np.array(probs.numpy(), copy=True))
            ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, s, c.hidden)
            x = x + (ctx @ p[f"l{i}.attn_o_w"] + p[f"l{i}.attn_o_b"])
            normed = self._ln(x, f"l{i}.ffn_ln")
            ffn = nk.gelu(normed @ p[f"l{i}.ffn_w1"] + p[f"l{i}.ffn_b1"]) @ p[f"l{i}.ffn_w2"] + p[f"l{i}.ffn_b2"]
            x = x + ffn
        x = self._ln(x, "final_ln")
        cls = x[(np.arange(b), np.zeros(b, dtype=np.int64))]
        itm = (cls @ p["itm_w"] + p["itm_b"]).reshape(b)
        return ForwardOutput(hidden=x, itm_logit=itm, attentions=attentions)

    # --- heads over gathered hidden rows (M, H) ---

    def vocab_logits(self, rows: Tensor) -> Tensor:
        """Shared vocabulary projection for masked tokens and linked-phrase
        classification of masked regions."""
        return rows @ self.params["vocab_w"] + self.params["vocab_b"]

    def region_class_logits(self, rows: Tensor) -> Tensor:
        return rows @ self.params["mrc_w"] + self.params["mrc_b"]

    def region_feature_pred(self, rows: Tensor) -> Tensor:
        return rows @ self.params["mrfr_w"] + self.params["mrfr_b"]

    def gather_rows(self, hidden: Tensor, batch_idx: np.ndarray, positions: np.ndarray) -> Tensor:
        return hidden[(np.asarray(batch_idx, dtype=np.int64), np.asarray(positions, dtype=np.int64))]


def text_to_region_attention(
    model: FusionModel, batch: FusedBatch, layer: int = -1
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-example text-to-region attention for one layer.

    Returns (per_head, head_averaged); per_head[i] is (A, k_t, k_v) over the
    example's real tokens and regions, head_averaged[i] is (k_t, k_v). Rows
    are renormalized over the region columns so each row is a distribution
    over regions.
    """
    with nk.no_grad():
        out = model.forward(batch, record_attention=True)
    attn = out.attentions[layer]  # (B, A, S, S)
    t_len = batch.text_len
    per_head: list[np.ndarray] = []
    averaged: list[np.ndarray] = []
    for i in range(batch.batch_size):
        kt = int(batch.text_valid[i].sum()) - 2
        kv = int(batch.region_valid[i].sum())
        block = attn[i, :, 1:1 + kt, t_len:t_len + kv]
        denom = block.sum(axis=-1, keepdims=True)
        denom[denom == 0.0] = 1.0
        block = block / denom
        per_head.append(block)
        averaged.append(block.mean(axis=0))
    return per_head, averaged
