"""Pretraining loop, metrics, probes, and run configuration.

Every step draws a batch of retrieved pairs and builds up to three views of
it: a tag view ([CLS] object tags [SEP] regions, masked on both sides), a
linked-phrase view (the retrieved sentence with one-modality masking over
its phrase-region links), and a sentence view (whole-sentence masking plus
in-batch shuffled match labels). The step loss is the sum of the three
bundles; once the warmup epochs have passed, each example's phrase and
sentence bundles are scaled by the detached logistic match score of its
retrieved pair before the batch mean is taken.

The metrics file records, per step, each raw component (batch mean of the
per-example means), the bundle sums, the mean alignment weight, and the
weighted phrase+sentence term actually optimized, so
`total == loss_rt + weighted_rp_is` holds exactly and during warmup
`total == loss_rt + loss_rp + loss_is` as well.

Determinism: one seed fans out into independent streams for model init,
data order, masking, and match-negative sampling; checkpoints persist all
stream states, so a resumed run continues bit for bit.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import aligner, corpus, numkernel as nk, objectives as obj
from .aligner import Sentence, Vocabulary, WeakPair, apply_text_masks
from .corpus import ImagesData, TextsData
from .fusion import FusedBatch, FusionModel, ModelConfig, collate, text_to_region_attention
from .numkernel import Adam, AdamConfig

logger = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "step", "epoch", "lr",
    "mlm_rt", "mrc", "mrfr", "loss_rt",
    "mlm_rp", "p_mrtc", "loss_rp",
    "mlm_is", "itm", "loss_is",
    "w_itm_mean", "weighted_rp_is", "total",
]


@dataclass
class TrainConfig:
    # model dimensions
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    vocab_size: int = 200
    region_feat_dim: int = 16
    region_classes: int = 64
    max_tokens: int = 40
    max_regions: int = 10
    # optimization
    epochs: int = 5
    batch_size: int = 32
    peak_lr: float = 6e-5
    warmup_frac: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # 0 disables
    # masking and curriculum
    mask_rate: float = 0.15
    linked_mask_rate: float = 0.15
    warmup_epochs: int = 1
    weighted_itm: bool = True
    granularity_mode: str = "sum"  # 'sum' | 'round_robin'
    seed: int = 0

    def __post_init__(self):
        if self.granularity_mode not in ("sum", "round_robin"):
            raise ValueError(f"granularity_mode must be 'sum' or 'round_robin', got {self.granularity_mode!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            layers=self.layers, hidden=self.hidden, heads=self.heads,
            vocab_size=self.vocab_size, region_feat_dim=self.region_feat_dim,
            region_classes=self.region_classes, max_tokens=self.max_tokens,
            max_regions=self.max_regions,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_config_text(text: str) -> dict[str, str]:
    """`key = value` lines; blank lines and # comments ignored."""
    out: dict[str, str] = {}
    for raw_line in text.splitlines():
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key = value): {raw_line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(name: str, raw: str, target_type):
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def config_from_mapping(mapping: dict[str, str]) -> TrainConfig:
    kwargs = {}
    by_name = {f.name: f for f in fields(TrainConfig)}
    for key, raw in mapping.items():
        if key not in by_name:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, raw, type(getattr(TrainConfig, key)))
    return TrainConfig(**kwargs)


def load_config(path_or_preset: str) -> TrainConfig:
    """A filesystem path, or a bundled preset name ('toy', 'paper')."""
    if os.path.exists(path_or_preset):
        with open(path_or_preset) as fh:
            return config_from_mapping(parse_config_text(fh.read()))
    from importlib import resources

    preset = resources.files("weakalign").joinpath(f"presets/{path_or_preset}.cfg")
    if not preset.is_file():
        raise FileNotFoundError(f"{path_or_preset!r} is neither a file nor a bundled preset")
    return config_from_mapping(parse_config_text(preset.read_text()))


class RngStreams:
    """Named random streams fanned out from one seed; state round-trips
    through checkpoints."""

    NAMES = ("order", "mask", "itm")

    def __init__(self, seed: int):
        root = np.random.SeedSequence(seed)
        init_ss, order_ss, mask_ss, itm_ss = root.spawn(4)
        self.init = np.random.default_rng(init_ss)
        self.order = np.random.default_rng(order_ss)
        self.mask = np.random.default_rng(mask_ss)
        self.itm = np.random.default_rng(itm_ss)

    def states(self) -> dict:
        return {name: getattr(self, name).bit_generator.state for name in self.NAMES}

    def load_states(self, states: dict) -> None:
        for name in self.NAMES:
            getattr(self, name).bit_generator.state = states[name]


@dataclass
class TrainingExample:
    pair: WeakPair
    image: "aligner.RegionSet"
    sentence: Sentence
    tag_ids: list[int]


@dataclass
class _ViewLoss:
    """Per-example component values (length B arrays) plus graph terms."""

    graph_terms: list = field(default_factory=list)
    per_example: dict[str, np.ndarray] = field(default_factory=dict)


def _format_float(x: float) -> str:
    return repr(float(x))


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        images: ImagesData,
        texts: TextsData,
        pairs: list[WeakPair],
        out_dir,
        resume_from: str | None = None,
    ):
        self.config = config
        self.out_dir = str(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        self.vocab: Vocabulary = texts.vocab
        if self.vocab.size > config.vocab_size:
            raise ValueError(f"data vocabulary ({self.vocab.size}) exceeds configured vocab_size ({config.vocab_size})")
        if images.feature_dim != config.region_feat_dim:
            raise ValueError(f"data feature dim {images.feature_dim} != configured region_feat_dim {config.region_feat_dim}")
        if len(images.class_names) > config.region_classes:
            raise ValueError(f"{len(images.class_names)} region classes exceed configured {config.region_classes}")
        self.examples = [
            TrainingExample(
                pair=p,
                image=images.by_id[p.image_id],
                sentence=texts.by_id[p.text_id],
                tag_ids=[tid for r in images.by_id[p.image_id].regions for tid in self.vocab.encode(r.tag)],
            )
            for p in pairs
        ]
        if not self.examples:
            raise ValueError("no training pairs")
        self.rngs = RngStreams(config.seed)
        self.model = FusionModel(config.model_config(), self.rngs.init, dtype=np.float32)
        n = len(self.examples)
        self.steps_per_epoch = math.ceil(n / config.batch_size)
        total_steps = config.epochs * self.steps_per_epoch
        self.optimizer = Adam(self.model.params, AdamConfig(
            peak_lr=config.peak_lr, warmup_frac=config.warmup_frac, total_steps=total_steps,
            weight_decay=config.weight_decay,
            grad_clip=config.grad_clip if config.grad_clip > 0 else None,
        ))
        self.step = 0
        self.start_epoch = 0
        if resume_from is not None:
            self._resume(resume_from)

    def _resume(self, ckpt_dir: str) -> None:
        ck = corpus.load_checkpoint(ckpt_dir)
        mismatch = corpus.config_mismatch(ck.config, self.config.to_dict())
        if mismatch:
            raise ValueError(f"resume config mismatch at field {mismatch!r}")
        for name, p in self.model.params.items():
            if name not in ck.params:
                raise corpus.CheckpointError(f"checkpoint missing parameter {name}")
            if ck.params[name].shape != p.shape:
                raise corpus.CheckpointError(f"parameter {name}: checkpoint shape {ck.params[name].shape} vs {p.shape}")
            p.data = ck.params[name].astype(p.dtype, copy=True)
        self.optimizer.load_state_arrays(ck.opt_arrays, ck.manifest["opt"]["step_count"])
        self.rngs.load_states(ck.manifest["rng_states"])
        self.step = ck.step
        self.start_epoch = ck.epoch
        logger.info("resumed from %s at epoch %d, step %d", ckpt_dir, self.start_epoch, self.step)

    # --- view assembly -------------------------------------------------

    def _weighted_rows(self, nll: "nk.Tensor", example_idx, per_counts, coefs, batch_size):
        """Graph term sum(rows * w) with w = coef_e / (B * M_e), plus the raw
        per-example means for logging."""
        weights = coefs[example_idx] / (batch_size * per_counts[example_idx])
        term = (nll * nk.tensor(weights.astype(np.float32), dtype=nll.dtype)).sum()
        raw = np.zeros(batch_size, dtype=np.float64)
        np.add.at(raw, example_idx, nll.detach().numpy().astype(np.float64) / per_counts[example_idx])
        return term, raw

    def _tag_view(self, batch, coefs):
        b = len(batch)
        plans = [aligner.plan_tag_region_masks(ex.tag_ids, ex.image, self.config.mask_rate,
                                               self.rngs.mask, self.vocab) for ex in batch]
        collate_input = []
        for ex, plan in zip(batch, plans):
            corrupted = apply_text_masks(ex.tag_ids, plan.text_masks)
            collate_input.append((corrupted, ex.image, [m.position for m in plan.region_masks]))
        fused = collate(collate_input, self.model.config, dtype=self.model.dtype)
        out = self.model.forward(fused)
        result = _ViewLoss()
        ones = np.ones(b, dtype=np.float64)

        tb, tp, tt = [], [], []
        for i, plan in enumerate(plans):
            for m in plan.text_masks:
                tb.append(i)
                tp.append(fused.text_position(m.position))
                tt.append(m.target_id)
        if tb:
            rows = self.model.gather_rows(out.hidden, np.array(tb), np.array(tp))
            nll = nk.nll_rows(self.model.vocab_logits(rows), np.array(tt))
            counts = np.bincount(np.array(tb), minlength=b).astype(np.float64)
            term, raw = self._weighted_rows(nll, np.array(tb), counts, ones, b)
            result.graph_terms.append(term)
            result.per_example["mlm_rt"] = raw

        rb, rp_, rc, rf = [], [], [], []
        for i, plan in enumerate(plans):
            for m in plan.region_masks:
                rb.append(i)
                rp_.append(fused.region_position(m.position))
                rc.append(m.class_id)
                rf.append(m.feature)
        if rb:
            rows = self.model.gather_rows(out.hidden, np.array(rb), np.array(rp_))
            counts = np.bincount(np.array(rb), minlength=b).astype(np.float64)
            nll = nk.nll_rows(self.model.region_class_logits(rows), np.array(rc))
            term, raw = self._weighted_rows(nll, np.array(rb), counts, ones, b)
            result.graph_terms.append(term)
            result.per_example["mrc"] = raw
            pred = self.model.region_feature_pred(rows)
            diff = pred - nk.tensor(np.stack(rf).astype(self.model.dtype), dtype=pred.dtype)
            sq = (diff * diff).sum(axis=1)
            term, raw = self._weighted_rows(sq, np.array(rb), counts, ones, b)
            result.graph_terms.append(term)
            result.per_example["mrfr"] = raw
        return result

    def _linked_view(self, batch, coefs):
        b = len(batch)
        result = _ViewLoss()
        planned = []
        for i, ex in enumerate(batch):
            if not ex.pair.links:
                continue
            plan = aligner.plan_linked_masks(ex.pair, ex.sentence, ex.image,
                                             self.config.linked_mask_rate, self.rngs.mask)
            planned.append((i, ex, plan))
        if not planned:
            return result
        collate_input = []
        for _, ex, plan in planned:
            corrupted = apply_text_masks(ex.sentence.token_ids, plan.text_masks)
            collate_input.append((corrupted, ex.image, [m.position for m in plan.region_masks]))
        fused = collate(collate_input, self.model.config, dtype=self.model.dtype)
        out = self.model.forward(fused)

        tb, tp, tt, torig = [], [], [], []
        for slot, (i, ex, plan) in enumerate(planned):
            for m in plan.text_masks:
                tb.append(slot)
                tp.append(fused.text_position(m.position))
                tt.append(m.target_id)
                torig.append(i)
        if tb:
            rows = self.model.gather_rows(out.hidden, np.array(tb), np.array(tp))
            nll = nk.nll_rows(self.model.vocab_logits(rows), np.array(tt))
            slot_counts = np.bincount(np.array(tb), minlength=len(planned)).astype(np.float64)
            weights = coefs[np.array(torig)] / (b * slot_counts[np.array(tb)])
            term = (nll * nk.tensor(weights.astype(np.float32), dtype=nll.dtype)).sum()
            result.graph_terms.append(term)
            raw = np.zeros(b, dtype=np.float64)
            np.add.at(raw, np.array(torig), nll.detach().numpy().astype(np.float64) / slot_counts[np.array(tb)])
            result.per_example["mlm_rp"] = raw

        rb, rp_, phrase_ids, rorig = [], [], [], []
        for slot, (i, ex, plan) in enumerate(planned):
            for m in plan.region_masks:
                rb.append(slot)
                rp_.append(fused.region_position(m.position))
                phrase_ids.append(m.phrase_token_ids)
                rorig.append(i)
        if rb:
            rows = self.model.gather_rows(out.hidden, np.array(rb), np.array(rp_))
            logits = self.model.vocab_logits(rows)
            expand_rows, expand_targets, expand_w, expand_orig = [], [], [], []
            slot_region_counts = np.bincount(np.array(rb), minlength=len(planned)).astype(np.float64)
            for j, (slot, ids, i) in enumerate(zip(rb, phrase_ids, rorig)):
                for t in ids:
                    expand_rows.append(j)
                    expand_targets.append(t)
                    expand_w.append(1.0 / (slot_region_counts[slot] * len(ids)))
                    expand_orig.append(i)
            nll = nk.nll_rows(logits[np.array(expand_rows)], np.array(expand_targets))
            w_arr = np.array(expand_w)
            weights = coefs[np.array(expand_orig)] * w_arr / b
            term = (nll * nk.tensor(weights.astype(np.float32), dtype=nll.dtype)).sum()
            result.graph_terms.append(term)
            raw = np.zeros(b, dtype=np.float64)
            np.add.at(raw, np.array(expand_orig), nll.detach().numpy().astype(np.float64) * w_arr)
            result.per_example["p_mrtc"] = raw
        return result

    def _sentence_view(self, batch, coefs):
        b = len(batch)
        assignment = aligner.sample_itm_pairs([ex.pair for ex in batch], self.rngs.itm)
        plans, tokens = [], []
        for i, (src, _) in enumerate(assignment):
            sent = batch[src].sentence
            plan = aligner.plan_sentence_masks(sent.token_ids, self.config.mask_rate,
                                               self.rngs.mask, self.vocab)
            plans.append(plan)
            tokens.append(sent.token_ids)
        collate_input = []
        for i, (plan, toks) in enumerate(zip(plans, tokens)):
            collate_input.append((apply_text_masks(toks, plan.text_masks), batch[i].image, []))
        fused = collate(collate_input, self.model.config, dtype=self.model.dtype)
        out = self.model.forward(fused)
        result = _ViewLoss()

        tb, tp, tt = [], [], []
        for i, plan in enumerate(plans):
            for m in plan.text_masks:
                tb.append(i)
                tp.append(fused.text_position(m.position))
                tt.append(m.target_id)
        if tb:
            rows = self.model.gather_rows(out.hidden, np.array(tb), np.array(tp))
            nll = nk.nll_rows(self.model.vocab_logits(rows), np.array(tt))
            counts = np.bincount(np.array(tb), minlength=b).astype(np.float64)
            term, raw = self._weighted_rows(nll, np.array(tb), counts, coefs, b)
            result.graph_terms.append(term)
            result.per_example["mlm_is"] = raw

        labels = np.array([y for _, y in assignment], dtype=np.float64)
        y_t = nk.tensor(labels.astype(np.float32), dtype=out.itm_logit.dtype)
        per_bce = nk.softplus(out.itm_logit) - y_t * out.itm_logit
        weights = coefs / b
        term = (per_bce * nk.tensor(weights.astype(np.float32), dtype=per_bce.dtype)).sum()
        result.graph_terms.append(term)
        result.per_example["itm"] = per_bce.detach().numpy().astype(np.float64)
        return result

    # --- training ------------------------------------------------------

    def _alignment_weights(self, batch) -> np.ndarray:
        """Detached logistic match scores of the original retrieved pairs."""
        collate_input = [(list(ex.sentence.token_ids), ex.image, []) for ex in batch]
        fused = collate(collate_input, self.model.config, dtype=self.model.dtype)
        return obj.compute_w_itm(self.model, fused)

    def run(self) -> str:
        cfg = self.config
        metrics_path = os.path.join(self.out_dir, "metrics.csv")
        mode = "a" if self.start_epoch > 0 and os.path.exists(metrics_path) else "w"
        metrics = open(metrics_path, mode)
        if mode == "w":
            metrics.write(",".join(METRICS_COLUMNS) + "\n")
        n = len(self.examples)
        try:
            for epoch in range(self.start_epoch, cfg.epochs):
                order = self.rngs.order.permutation(n)
                weighting = cfg.weighted_itm and epoch >= cfg.warmup_epochs
                for start in range(0, n, cfg.batch_size):
                    batch = [self.examples[int(i)] for i in order[start:start + cfg.batch_size]]
                    row = self._train_step(batch, epoch, weighting)
                    metrics.write(",".join(_format_float(row[c]) if c not in ("step", "epoch")
                                           else str(int(row[c])) for c in METRICS_COLUMNS) + "\n")
                metrics.flush()
                self._save_checkpoint(epoch + 1)
        finally:
            metrics.close()
        return metrics_path

    def _train_step(self, batch, epoch: int, weighting: bool) -> dict:
        cfg = self.config
        b = len(batch)
        if weighting:
            coefs = self._alignment_weights(batch)
        else:
            coefs = np.ones(b, dtype=np.float64)
        ones = np.ones(b, dtype=np.float64)

        views = {}
        if cfg.granularity_mode == "sum":
            views["rt"] = self._tag_view(batch, ones)
            views["rn"] = self._linked_view(batch, coefs)
            views["is"] = self._sentence_view(batch, coefs)
        else:
            kind = ("rt", "rn", "is")[self.step % 3]
            if kind == "rt":
                views["rt"] = self._tag_view(batch, ones)
            elif kind == "rn":
                views["rn"] = self._linked_view(batch, coefs)
            else:
                views["is"] = self._sentence_view(batch, coefs)

        terms = [t for v in views.values() for t in v.graph_terms]
        self.optimizer.zero_grad()
        if terms:
            total_graph = terms[0]
            for t in terms[1:]:
                total_graph = total_graph + t
            total_graph.backward()
        lr = self.optimizer.step()

        per = {name: np.zeros(b, dtype=np.float64) for name in
               ("mlm_rt", "mrc", "mrfr", "mlm_rp", "p_mrtc", "mlm_is", "itm")}
        for v in views.values():
            for name, arr in v.per_example.items():
                per[name] = arr
        rp_e = per["mlm_rp"] + per["p_mrtc"]
        is_e = per["mlm_is"] + per["itm"]
        row = {
            "step": self.step, "epoch": epoch, "lr": lr,
            "mlm_rt": float(np.mean(per["mlm_rt"])),
            "mrc": float(np.mean(per["mrc"])),
            "mrfr": float(np.mean(per["mrfr"])),
            "mlm_rp": float(np.mean(per["mlm_rp"])),
            "p_mrtc": float(np.mean(per["p_mrtc"])),
            "mlm_is": float(np.mean(per["mlm_is"])),
            "itm": float(np.mean(per["itm"])),
            "w_itm_mean": float(np.mean(coefs)),
        }
        row["loss_rt"] = row["mlm_rt"] + row["mrc"] + row["mrfr"]
        row["loss_rp"] = row["mlm_rp"] + row["p_mrtc"]
        row["loss_is"] = row["mlm_is"] + row["itm"]
        row["weighted_rp_is"] = float(np.mean(coefs * rp_e)) + float(np.mean(coefs * is_e))
        row["total"] = row["loss_rt"] + row["weighted_rp_is"]
        self.step += 1
        return row

    def _save_checkpoint(self, completed_epochs: int) -> str:
        ck_dir = os.path.join(self.out_dir, "checkpoints", f"epoch_{completed_epochs:03d}")
        corpus.save_checkpoint(
            ck_dir,
            params=self.model.params,
            opt_arrays=self.optimizer.state_arrays(),
            opt_step_count=self.optimizer.step_count,
            config=self.config.to_dict(),
            step=self.step,
            epoch=completed_epochs,
            rng_states=self.rngs.states(),
        )
        return ck_dir

    def final_checkpoint_dir(self) -> str:
        return os.path.join(self.out_dir, "checkpoints", f"epoch_{self.config.epochs:03d}")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def build_gradcheck_problem(config: ModelConfig, seed: int = 0):
    """A double-precision model plus a fixed loss touching every head.

    The loss is the warmup-form bundle sum over a two-example batch: masked
    token prediction, masked-region class and feature targets, linked-phrase
    token classification, and both match labels.
    """
    model = FusionModel(config, np.random.default_rng(seed), dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    v, c, d = config.vocab_size, config.region_classes, config.region_feat_dim

    def make_regions(n: int, image_id: str) -> aligner.RegionSet:
        regions = []
        for _ in range(n):
            x1, y1 = int(rng.integers(0, 40)), int(rng.integers(0, 40))
            regions.append(aligner.Region(
                feature=rng.standard_normal(d),
                box=(x1, y1, x1 + int(rng.integers(5, 30)), y1 + int(rng.integers(5, 30))),
                tag="object", class_id=int(rng.integers(0, c)),
            ))
        return aligner.RegionSet(image_id, 100, 100, regions)

    tokens0 = [int(t) for t in rng.integers(5, v, size=6)]
    tokens1 = [int(t) for t in rng.integers(5, v, size=5)]
    regions0, regions1 = make_regions(3, "g0"), make_regions(2, "g1")
    corrupted0 = list(tokens0)
    corrupted0[1] = corrupted0[4] = aligner.MASK_ID
    corrupted1 = list(tokens1)
    corrupted1[2] = aligner.MASK_ID
    batch = collate([(corrupted0, regions0, [1]), (corrupted1, regions1, [0])], config, dtype=np.float64)
    text_b = np.array([0, 0, 1])
    text_pos = np.array([batch.text_position(1), batch.text_position(4), batch.text_position(2)])
    text_targets = np.array([tokens0[1], tokens0[4], tokens1[2]])
    reg_b = np.array([0, 1])
    reg_pos = np.array([batch.region_position(1), batch.region_position(0)])
    mrc_targets = np.array([regions0.regions[1].class_id, regions1.regions[0].class_id])
    mrfr_targets = np.stack([regions0.regions[1].feature, regions1.regions[0].feature])
    phrase_targets = [[tokens0[0], tokens0[1]], [tokens1[0]]]
    labels = np.array([1.0, 0.0])

    def loss_fn():
        out = model.forward(batch)
        t_rows = model.gather_rows(out.hidden, text_b, text_pos)
        r_rows = model.gather_rows(out.hidden, reg_b, reg_pos)
        loss = obj.mlm_loss(model.vocab_logits(t_rows), text_targets)
        loss = loss + obj.mrc_loss(model.region_class_logits(r_rows), mrc_targets)
        loss = loss + obj.mrfr_loss(model.region_feature_pred(r_rows), mrfr_targets)
        loss = loss + obj.p_mrtc_loss(model.vocab_logits(r_rows), phrase_targets)
        loss = loss + obj.itm_loss(out.itm_logit, labels)
        return loss

    return loss_fn, model


def run_grad_check(config: ModelConfig, seed: int = 0, eps: float = 1e-5,
                   samples: int = 128) -> dict[str, float]:
    """Max relative error per parameter, analytic vs central differences.

    Every named parameter is checked; `samples` bounds the number of
    finite-differenced components per parameter (0 checks all of them,
    which takes minutes at full vocabulary size).
    """
    loss_fn, model = build_gradcheck_problem(config, seed)
    sample = None if samples <= 0 else samples
    return nk.gradcheck.check_gradients(loss_fn, model.params, eps=eps, sample=sample,
                                        rng=np.random.default_rng(seed + 17))


# ---------------------------------------------------------------------------
# model loading and probes
# ---------------------------------------------------------------------------


def model_from_checkpoint(ckpt_dir) -> tuple[FusionModel, TrainConfig]:
    ck = corpus.load_checkpoint(ckpt_dir)
    cfg = TrainConfig(**ck.config)
    model = FusionModel(cfg.model_config(), np.random.default_rng(0), dtype=np.float32)
    for name, p in model.params.items():
        p.data = ck.params[name].astype(np.float32, copy=True)
    return model, cfg


@dataclass
class ProbeResult:
    accuracy: float
    n: int
    chance: float = 0.5


def _batched(seq, size):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


def itm_probe(
    model: FusionModel,
    images: ImagesData,
    texts: TextsData,
    truth: list[corpus.TruthRecord],
    seed: int = 0,
    batch_size: int = 64,
) -> ProbeResult:
    """Matched-vs-shuffled accuracy on held-out pairs, balanced 50/50.

    Each image contributes its true caption (label 1) and a deranged
    caption (label 0); prediction is match score > 0.
    """
    truth_pairs = [(t.image_id, t.text_id) for t in truth]
    deranged = corpus.mix_alignment_ratio(truth_pairs, 0.0, seed)
    cases = []
    for (img_id, txt_id), (_, neg_txt, _) in zip(truth_pairs, deranged):
        cases.append((img_id, txt_id, 1))
        cases.append((img_id, neg_txt, 0))
    correct = 0
    for chunk in _batched(cases, batch_size):
        collate_input = [
            (list(texts.by_id[txt].token_ids), images.by_id[img], []) for img, txt, _ in chunk
        ]
        fused = collate(collate_input, model.config, dtype=model.dtype)
        with nk.no_grad():
            logits = model.forward(fused).itm_logit.numpy()
        for (_, _, y), s in zip(chunk, logits):
            correct += int((s > 0) == bool(y))
    return ProbeResult(accuracy=correct / len(cases), n=len(cases), chance=0.5)


def grounding_probe(
    model: FusionModel,
    images: ImagesData,
    texts: TextsData,
    truth: list[corpus.TruthRecord],
    batch_size: int = 64,
) -> ProbeResult:
    """Planted-region hit rate of head-averaged last-layer attention.

    For each ground-truth phrase, the attention rows of its tokens (into the
    region block) are averaged; a hit is argmax landing on the planted
    region. Chance is the mean of 1/k_v over the probed images.
    """
    hits = 0
    total = 0
    inv_kv = []
    for chunk in _batched(truth, batch_size):
        collate_input = [
            (list(texts.by_id[t.text_id].token_ids), images.by_id[t.image_id], []) for t in chunk
        ]
        fused = collate(collate_input, model.config, dtype=model.dtype)
        _, averaged = text_to_region_attention(model, fused, layer=-1)
        for t, attn in zip(chunk, averaged):
            inv_kv.append(1.0 / images.by_id[t.image_id].n_regions)
            for pr in t.phrase_regions:
                s, e = pr["span"]
                block = attn[s:e, :]
                if block.size == 0:
                    continue
                picked = int(np.argmax(block.mean(axis=0)))
                hits += int(picked == pr["region"])
                total += 1
    chance = float(np.mean(inv_kv)) if inv_kv else 0.0
    return ProbeResult(accuracy=hits / total if total else 0.0, n=total, chance=chance)
