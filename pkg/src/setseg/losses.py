"""Padding-aware dice, focal, and classification losses plus the weighted total.

Every mask loss restricts its reductions to the validity mask, so appending
padded pixels never changes a value. Reductions accumulate in float64 (see
tensor.tensor_sum), which is what makes that invariance exact rather than
approximate.

Class logits are laid out with contiguous class c at column c-1 and the
no-object class at the last column (index K).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pipeline import TargetSet, downsample_mask
from .tensor import Tensor

_P_CLAMP = 1e-7


class LossError(ValueError):
    pass


@dataclass
class LossStats:
    degenerate_dice_calls: int = 0

    def reset(self):
        self.degenerate_dice_calls = 0


LOSS_STATS = LossStats()


@dataclass
class LossConfig:
    class_weight: float = 1.0
    focal_weight: float = 20.0
    dice_weight: float = 1.0
    dice_eps: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    no_object_weight: float = 1e-4
    pair_reduction: str = "mean"      # "mean" or "sum" over matched pairs


@dataclass
class LossBundle:
    classification: float
    focal: float
    dice: float
    total: float
    weights: tuple[float, float, float]
    no_object_weight: float
    total_tensor: Tensor          # differentiable; drive backward() from here


def _valid_tensor(valid: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.asarray(valid, dtype=like.dtype))


def dice_loss(pred_logits: Tensor, gt: np.ndarray, valid: np.ndarray,
              eps: float = 1.0) -> Tensor:
    """Soft dice on sigmoid(pred_logits), sums restricted to valid pixels."""
    gt = np.asarray(gt)
    valid = np.asarray(valid, dtype=bool)
    if pred_logits.shape != gt.shape or pred_logits.shape != valid.shape:
        raise T.ShapeError(
            f"dice_loss: logits {pred_logits.shape}, gt {gt.shape}, valid {valid.shape}"
        )
    if not valid.any():
        LOSS_STATS.degenerate_dice_calls += 1
        return Tensor(np.zeros((), dtype=pred_logits.dtype))
    m = _valid_tensor(valid, pred_logits)
    g = Tensor(np.asarray(gt, dtype=pred_logits.dtype))
    p = T.mul(T.sigmoid(pred_logits), m)
    inter = T.mul(p, g).sum()
    denom = T.add(p.sum(), T.mul(g, m).sum())
    return T.sub(
        Tensor(np.ones((), dtype=pred_logits.dtype)),
        T.div(T.add(T.mul(inter, 2.0), eps), T.add(denom, eps)),
    )


def focal_loss(pred_logits: Tensor, gt: np.ndarray, valid: np.ndarray,
               alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Modulated cross-entropy, mean over valid pixels."""
    if not (0.0 <= alpha <= 1.0):
        raise LossError(f"alpha must be in [0, 1], got {alpha}")
    if gamma < 0.0:
        raise LossError(f"gamma must be >= 0, got {gamma}")
    gt = np.asarray(gt)
    valid = np.asarray(valid, dtype=bool)
    if pred_logits.shape != gt.shape or pred_logits.shape != valid.shape:
        raise T.ShapeError(
            f"focal_loss: logits {pred_logits.shape}, gt {gt.shape}, valid {valid.shape}"
        )
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(np.zeros((), dtype=pred_logits.dtype))
    dt = pred_logits.dtype
    g = np.asarray(gt, dtype=dt)
    gp = Tensor(g)
    gn = Tensor(1.0 - g)
    p = T.clip(T.sigmoid(pred_logits), _P_CLAMP, 1.0 - _P_CLAMP)
    p_t = T.add(T.mul(p, gp), T.mul(T.sub(Tensor(np.ones_like(g)), p), gn))
    alpha_t = Tensor(np.asarray(alpha * g + (1.0 - alpha) * (1.0 - g), dtype=dt))
    term = T.mul(T.mul(alpha_t, T.pow_scalar(T.sub(Tensor(np.ones_like(g)), p_t), gamma)),
                 T.mul(T.log(p_t), -1.0))
    masked = T.mul(term, _valid_tensor(valid, pred_logits))
    return T.mul(masked.sum(), 1.0 / n_valid)


def classification_loss(class_logits: Tensor, matched_labels: np.ndarray,
                        no_object_weight: float = 1e-4) -> Tensor:
    """Weighted cross-entropy over queries, normalized by the weight sum.

    ``matched_labels[q]`` is a contiguous class in 1..K for matched queries
    and K+1 for no-object; no-object targets carry ``no_object_weight``.
    """
    labels = np.asarray(matched_labels, dtype=np.int64)
    n_q, n_cols = class_logits.shape
    k = n_cols - 1
    if labels.shape != (n_q,):
        raise T.ShapeError(f"labels shape {labels.shape} does not match {n_q} queries")
    if labels.min() < 1 or labels.max() > k + 1:
        bad = labels[(labels < 1) | (labels > k + 1)][0]
        raise LossError(f"label {int(bad)} out of range 1..{k + 1}")
    cols = labels - 1                      # class c -> column c-1, no-object -> K
    onehot = np.zeros((n_q, n_cols), dtype=class_logits.dtype)
    onehot[np.arange(n_q), cols] = 1.0
    weights = np.where(cols == k, no_object_weight, 1.0).astype(class_logits.dtype)
    w_sum = float(weights.sum())
    logp = T.log_softmax(class_logits, axis=-1)
    picked = T.mul(logp, Tensor(onehot)).sum(axis=-1)     # [N_q]
    weighted = T.mul(picked, Tensor(weights))
    return T.mul(weighted.sum(), -1.0 / w_sum)


def total_loss(outputs, targets: TargetSet, assignment, cfg: LossConfig,
               valid_mask: np.ndarray, batch_index: int = 0) -> LossBundle:
    """Combine the three losses for one image of a batch.

    Mask losses are means over matched pairs (at mask-logit resolution, with
    targets and the validity mask downsampled by nearest-neighbor);
    classification covers all queries.
    """
    mask_logits = outputs.mask_logits       # [B, N_q, h, w]
    class_logits = outputs.class_logits     # [B, N_q, K+1]
    _, n_q, mh, mw = mask_logits.shape
    k = class_logits.shape[-1] - 1

    factor = valid_mask.shape[0] // mh
    valid_small = downsample_mask(valid_mask, factor).astype(bool)

    matched_labels = np.full(n_q, k + 1, dtype=np.int64)
    dice_terms = []
    focal_terms = []
    for i, q in enumerate(assignment.query_for_gt):
        gt_small = downsample_mask(targets.masks[i], factor)
        logits_i = mask_logits[batch_index, int(q)]
        dice_terms.append(dice_loss(logits_i, gt_small, valid_small, eps=cfg.dice_eps))
        focal_terms.append(
            focal_loss(logits_i, gt_small, valid_small,
                       alpha=cfg.focal_alpha, gamma=cfg.focal_gamma)
        )
        matched_labels[int(q)] = targets.labels[i]

    if cfg.pair_reduction not in ("mean", "sum"):
        raise LossError(f"pair_reduction must be 'mean' or 'sum', got {cfg.pair_reduction!r}")
    dtype = mask_logits.dtype
    if dice_terms:
        reduce = _mean_of if cfg.pair_reduction == "mean" else _sum_of
        dice_t = reduce(dice_terms)
        focal_t = reduce(focal_terms)
    else:
        dice_t = Tensor(np.zeros((), dtype=dtype))
        focal_t = Tensor(np.zeros((), dtype=dtype))
    cls_t = classification_loss(class_logits[batch_index], matched_labels,
                                no_object_weight=cfg.no_object_weight)

    total_t = T.add(
        T.add(T.mul(cls_t, cfg.class_weight), T.mul(focal_t, cfg.focal_weight)),
        T.mul(dice_t, cfg.dice_weight),
    )
    cls_v, focal_v, dice_v = cls_t.item(), focal_t.item(), dice_t.item()
    return LossBundle(
        classification=cls_v,
        focal=focal_v,
        dice=dice_v,
        total=cfg.class_weight * cls_v + cfg.focal_weight * focal_v + cfg.dice_weight * dice_v,
        weights=(cfg.class_weight, cfg.focal_weight, cfg.dice_weight),
        no_object_weight=cfg.no_object_weight,
        total_tensor=total_t,
    )


def _sum_of(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return acc


def _mean_of(terms):
    return T.mul(_sum_of(terms), 1.0 / len(terms))
