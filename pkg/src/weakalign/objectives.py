"""Loss functions, granularity bundles, and the weighted curriculum.

Seven scalar components feed three bundles: the tag-level bundle is masked
token prediction plus masked-region class prediction plus masked-region
feature regression; the phrase-level bundle is phrase-token prediction plus
region-to-phrase-token classification; the sentence-level bundle is whole
sentence masked prediction plus the match loss. During warmup the step loss
is the plain sum of the three bundles; afterwards the phrase and sentence
bundles are scaled by the detached, logistic-squashed match score of each
example's retrieved pair before the batch is reduced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .fusion import FusedBatch, FusionModel
from .numkernel import Tensor


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return nk.tensor(np.asarray(x), dtype=dtype)


def mlm_loss(logits: Tensor, target_ids: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked positions; exactly 0 with none."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if target_ids.size == 0:
        return nk.tensor(0.0, dtype=logits.dtype if isinstance(logits, Tensor) else None)
    return nk.nll_rows(logits, target_ids).mean()


# identical contract over region classes
mrc_loss = mlm_loss


def mrfr_loss(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over masked regions of the squared L2 distance to the input feature."""
    targets = np.asarray(targets)
    if targets.size == 0:
        return nk.tensor(0.0)
    if pred.shape != targets.shape:
        raise ValueError(f"mrfr: prediction {pred.shape} vs target {targets.shape}")
    diff = pred - nk.tensor(targets, dtype=pred.dtype)
    return (diff * diff).sum(axis=1).mean()


def p_mrtc_loss(logits: Tensor, phrase_token_ids: list[list[int]]) -> Tensor:
    """Classify each masked region against its linked phrase's tokens.

    Per region: mean cross-entropy of that region's logits against each
    token id of the phrase; then mean over regions.
    """
    if len(phrase_token_ids) == 0:
        return nk.tensor(0.0, dtype=logits.dtype if isinstance(logits, Tensor) else None)
    if logits.shape[0] != len(phrase_token_ids):
        raise ValueError(f"p_mrtc: {logits.shape[0]} logit rows vs {len(phrase_token_ids)} regions")
    rows: list[int] = []
    targets: list[int] = []
    weights: list[float] = []
    n_regions = len(phrase_token_ids)
    for r, ids in enumerate(phrase_token_ids):
        if not ids:
            raise ValueError(f"p_mrtc: region {r} has an empty phrase target list")
        for t in ids:
            rows.append(r)
            targets.append(t)
            weights.append(1.0 / (n_regions * len(ids)))
    expanded = logits[np.array(rows, dtype=np.int64)]
    nll = nk.nll_rows(expanded, np.array(targets, dtype=np.int64))
    return (nll * nk.tensor(np.array(weights), dtype=nll.dtype)).sum()


def itm_loss(score, label) -> Tensor:
    """Binary cross-entropy of the logistic match probability against y."""
    score_t = _as_tensor(score)
    y = np.asarray(label, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError(f"itm label must be 0 or 1, got {label}")
    y_t = nk.tensor(y, dtype=score_t.dtype)
    # -y log(sigmoid(s)) - (1-y) log(1 - sigmoid(s)) = softplus(s) - y*s
    per = nk.softplus(score_t) - y_t * score_t
    if per.shape == ():
        return per
    return per.mean()


def itm_scores_to_probs(score: Tensor) -> np.ndarray:
    return nk.sigmoid(score.detach()).numpy()


@dataclass
class LossBundle:
    mlm_rt: float = 0.0
    mrc: float = 0.0
    mrfr: float = 0.0
    mlm_rp: float = 0.0
    p_mrtc: float = 0.0
    mlm_is: float = 0.0
    itm: float = 0.0

    @property
    def tag_level(self) -> float:
        return self.mlm_rt + self.mrc + self.mrfr

    @property
    def phrase_level(self) -> float:
        return self.mlm_rp + self.p_mrtc

    @property
    def sentence_level(self) -> float:
        return self.mlm_is + self.itm


@dataclass
class CurriculumState:
    """Epoch counter plus the alignment weight once warmup has passed.

    `w_itm` is the logistic match score of the example's retrieved pair,
    computed without gradient flow; it is None during warmup.
    """

    epoch: int
    warmup_epochs: int = 1
    w_itm: float | None = None

    @property
    def weighting_active(self) -> bool:
        return self.epoch >= self.warmup_epochs


def curriculum_total(bundle: LossBundle, state: CurriculumState) -> float:
    """Case formula: plain bundle sum during warmup, afterwards the phrase
    and sentence bundles are scaled by the alignment weight."""
    if not state.weighting_active:
        return bundle.tag_level + bundle.phrase_level + bundle.sentence_level
    if state.w_itm is None:
        raise ValueError(f"epoch {state.epoch} >= warmup {state.warmup_epochs} but no alignment weight")
    return bundle.tag_level + state.w_itm * (bundle.phrase_level + bundle.sentence_level)


def compute_w_itm(model: FusionModel, batch: FusedBatch) -> np.ndarray:
    """Per-example logistic match score of the unmasked retrieved pair.

    Evaluated with the tape off, so no gradient ever flows through the
    weights these scores produce.
    """
    with nk.no_grad():
        out = model.forward(batch)
        probs = nk.sigmoid(out.itm_logit).numpy()
    return np.asarray(probs, dtype=np.float64)
