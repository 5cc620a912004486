"""Training objectives: smoothed cross-entropy and the contrastive losses.

The contrastive losses follow one scheme at two granularities. Sentence
level: mean-pooled token states against image class tokens, one group per
language so negatives never cross languages. Token level: per-token states
against their attention-selected patch mixtures, positives on the diagonal
of each sentence's token-by-token similarity matrix.

Similarities are cosines; dividing by a small temperature can push logits
past exp() range, so they are clamped to [-80, 80] before normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (ConfigError, ContractError, DimensionError, DomainError,
                     VocabularyError)
from .model import EncodedImage, EncodedText
from .tensor import Tensor

LOGIT_CLAMP = 80.0


@dataclass(frozen=True)
class ContrastConfig:
    """Temperatures and weights of the two contrastive terms.

    The sentence temperature runs much hotter than 1/100; lower values blow
    up gradients, higher ones wash out the hardest negatives.
    """

    tau_s: float = 0.007
    tau_t: float = 0.1
    lambda_s: float = 5.0
    lambda_t: float = 1.0
    include_target_contrast: bool = True

    def __post_init__(self):
        if self.tau_s <= 0.0 or self.tau_t <= 0.0:
            raise ConfigError("temperatures must be positive")
        if self.lambda_s < 0.0 or self.lambda_t < 0.0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class AlignedGroup:
    """One language's image-text pairs inside a batch.

    `image` and `text` are batched over the group's M items in the same
    order, so row i of each is a positive pair. Groups built from the
    high-resource triples' reference captions set `is_target`.
    """

    lang: str
    image: EncodedImage
    text: EncodedText
    is_target: bool = False


@dataclass
class AlignedBatch:
    groups: list[AlignedGroup]


# ----------------------------------------------------------------------
# cross-entropy
# ----------------------------------------------------------------------


def _smoothed_position_nll(lp: Tensor, targets: np.ndarray, smoothing: float,
                           vocab: int) -> Tensor:
    onehot = np.eye(vocab)[targets]
    nll_target = -(lp * Tensor(onehot)).sum(axis=-1)
    nll_uniform = -lp.mean(axis=-1)
    return nll_target * (1.0 - smoothing) + nll_uniform * smoothing


def _check_ce_inputs(logits: Tensor, targets: np.ndarray, smoothing: float,
                     expected_ndim: int) -> np.ndarray:
    if logits.data.ndim != expected_ndim:
        raise DimensionError(f"expected {expected_ndim}-d logits")
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise DimensionError("targets must match logits positions")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError("smoothing must lie in [0, 1)")
    vocab = logits.data.shape[-1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise VocabularyError("target id outside the vocabulary")
    return targets.astype(np.int64)


def cross_entropy(logits: Tensor, targets: np.ndarray, smoothing: float = 0.1,
                  pad_id: int = 0) -> Tensor:
    """Label-smoothed negative log-likelihood of one sequence.

    logits: (n, vocab); targets: (n,). Positions whose target is `pad_id`
    are excluded; the rest are averaged. The smoothed term spreads
    `smoothing` mass uniformly over the whole vocabulary.
    """
    targets = _check_ce_inputs(logits, targets, smoothing, 2)
    keep = targets != pad_id
    if not keep.any():
        raise ContractError("all positions are padding")
    lp = T.log_softmax(logits, axis=-1)
    per_pos = _smoothed_position_nll(lp, targets, smoothing, logits.data.shape[-1])
    return (per_pos * Tensor(keep.astype(np.float64))).sum() / float(keep.sum())


def sequence_cross_entropy(logits: Tensor, targets: np.ndarray,
                           smoothing: float = 0.1, pad_id: int = 0) -> Tensor:
    """Mean over sequences of their per-position-averaged smoothed NLL.

    logits: (B, t, vocab); targets: (B, t). Equals averaging
    `cross_entropy` over the batch, computed in one pass.
    """
    targets = _check_ce_inputs(logits, targets, smoothing, 3)
    keep = targets != pad_id
    counts = keep.sum(axis=1)
    if (counts == 0).any():
        raise ContractError("a sequence consists entirely of padding")
    lp = T.log_softmax(logits, axis=-1)
    per_pos = _smoothed_position_nll(lp, targets, smoothing, logits.data.shape[-1])
    masked = per_pos * Tensor(keep.astype(np.float64))
    per_seq = masked.sum(axis=1) / Tensor(counts.astype(np.float64))
    return per_seq.mean()


# ----------------------------------------------------------------------
# contrastive building blocks
# ----------------------------------------------------------------------


def _normalize_rows(x: Tensor, required: np.ndarray | None = None) -> Tensor:
    """Scale last-axis rows to unit norm, floored at 1e-12.

    `required` marks rows that must be non-zero; zero rows elsewhere (padding)
    map to zero rows, which downstream masks discard anyway.
    """
    sq = (x * x).sum(axis=-1, keepdims=True)
    zero = sq.data[..., 0] == 0.0
    if required is None:
        if zero.any():
            raise DomainError("zero vector has no direction to contrast")
    elif (zero & required).any():
        raise DomainError("zero vector has no direction to contrast")
    return x / (sq + 1e-24) ** 0.5


def info_nce(x: Tensor, y: Tensor, tau: float) -> Tensor:
    """Noise-contrastive loss over M aligned pairs, x rows as queries.

    Row i of x must match row i of y; every other y row is a negative.
    Similarity is cosine over temperature, clamped to +-80. The result is
    the sum over queries of -log softmax probability of the positive;
    asymmetric in (x, y), add both directions for a symmetric loss.
    """
    if tau <= 0.0:
        raise ConfigError("temperature must be positive")
    if x.data.ndim != 2 or y.data.ndim != 2:
        raise DimensionError("info_nce expects (M, d) matrices")
    if x.data.shape != y.data.shape:
        raise DimensionError(
            f"aligned matrices differ: {x.data.shape} vs {y.data.shape}")
    m = x.data.shape[0]
    if m == 0:
        raise ContractError("info_nce needs at least one pair")
    xn = _normalize_rows(x)
    yn = _normalize_rows(y)
    logits = T.clip((xn @ yn.transpose((1, 0))) * (1.0 / tau),
                    -LOGIT_CLAMP, LOGIT_CLAMP)
    lp = T.log_softmax(logits, axis=-1)
    return -(lp * Tensor(np.eye(m))).sum()


def sentence_repr(text: EncodedText) -> Tensor:
    """Mean of encoder states over real tokens, one (d_model,) row per sentence."""
    mask = text.pad_mask.astype(np.float64)
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ContractError("cannot pool a fully padded sentence")
    summed = (text.states * Tensor(mask[:, :, None])).sum(axis=1)
    return summed / Tensor(counts)


def sentence_contrast(batch: AlignedBatch, cfg: ContrastConfig) -> Tensor:
    """Both-direction sentence-image InfoNCE, one term per language group.

    Negatives stay inside each group, so a caption competes only against
    images of its own language's batch slice. Group losses are summed.
    When `include_target_contrast` is off, target-caption groups are skipped
    entirely, as if their items were deleted from the batch.
    """
    total = Tensor(0.0)
    for group in batch.groups:
        if group.is_target and not cfg.include_target_contrast:
            continue
        w = sentence_repr(group.text)
        v = group.image.v0
        total = total + info_nce(w, v, cfg.tau_s) + info_nce(v, w, cfg.tau_s)
    return total


def token_contrast(text: EncodedText, vt: Tensor, tau: float) -> Tensor:
    """Token-level InfoNCE between token states and their patch mixtures.

    For each sentence, token i's state pairs with row i of `vt`
    (selective-attention output); other real tokens of the same sentence are
    the negatives. Padded positions are excluded on both sides. Per-sentence
    losses (both directions) are summed across the batch.
    """
    if tau <= 0.0:
        raise ConfigError("temperature must be positive")
    states, mask = text.states, text.pad_mask
    if vt.data.shape != states.data.shape:
        raise DimensionError(
            f"vt shape {vt.data.shape} must match states {states.data.shape}")
    if not mask.any():
        raise ContractError("no unpadded positions to contrast")
    n = states.data.shape[1]
    wn = _normalize_rows(states, required=mask)
    vn = _normalize_rows(vt, required=mask)
    sims = T.clip((wn @ vn.transpose((0, 2, 1))) * (1.0 / tau),
                  -LOGIT_CLAMP, LOGIT_CLAMP)
    col_bias = Tensor(np.where(mask, 0.0, -1e30)[:, None, :])
    row_mask = Tensor(mask.astype(np.float64))
    eye = Tensor(np.eye(n))

    def one_direction(logits: Tensor) -> Tensor:
        lp = T.log_softmax(logits + col_bias, axis=-1)
        diag = (lp * eye).sum(axis=-1)
        return (diag * row_mask).sum()

    fwd = one_direction(sims)
    bwd = one_direction(sims.transpose((0, 2, 1)))
    return -(fwd + bwd)


def l2_align(x: Tensor, y: Tensor) -> Tensor:
    """Sum of squared distances between aligned rows; the non-contrastive
    stand-in used for ablation."""
    if x.data.shape != y.data.shape:
        raise ContractError(
            f"aligned matrices differ: {x.data.shape} vs {y.data.shape}")
    diff = x - y
    return (diff * diff).sum()
