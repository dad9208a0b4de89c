"""Cost-matrix construction, square padding, Hungarian assignment, brute oracle.

The model emits a fixed number of queries while images carry a variable
number of ground-truth segments, so the real cost block is rectangular
[N, n_queries]. The solver wants a square matrix: padded rows/columns all
carry a constant cost strictly above every real entry, so no padded cell can
ever displace a real optimum and totals restricted to real rows are
unchanged. Differential testing compares totals (and, when unique, the
matching itself) against exhaustive enumeration of injections.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, _P_CLAMP
from .pipeline import TargetSet, downsample_mask
from .tensor import ContractError


class MatcherError(ValueError):
    pass


class NanCostError(MatcherError):
    """A matching cost came out NaN (usually a diverged model)."""


@dataclass
class MatcherWeights:
    class_weight: float = 1.0
    focal_weight: float = 20.0
    dice_weight: float = 1.0


@dataclass
class CostMatrix:
    values: np.ndarray            # [n_queries, n_queries] after padding
    real_rows: int                # ground-truth count N
    weights: MatcherWeights
    pad_cost: float


@dataclass
class Assignment:
    query_for_gt: np.ndarray      # length N, distinct query indices
    total_real_cost: float


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def build_cost_matrix(outputs, targets: TargetSet, weights: MatcherWeights,
                      valid_mask: np.ndarray, loss_cfg: LossConfig,
                      batch_index: int = 0) -> CostMatrix:
    """Square-padded per-pair matching costs for one image.

    cell (i, q) = w_class * (-p_q[label_i]) + w_focal * focal(mask_q, gt_i)
                + w_dice * dice(mask_q, gt_i), mask terms over valid pixels
    only, then padded to [n_queries, n_queries] with max(real) + 1.
    """
    mask_logits = outputs.mask_logits.data[batch_index]    # [N_q, h, w]
    class_logits = outputs.class_logits.data[batch_index]  # [N_q, K+1]
    n_q = mask_logits.shape[0]
    n = targets.count
    if n > n_q:
        raise MatcherError(f"{n} targets exceed {n_q} queries")

    if n == 0:
        pad = 1.0
        values = np.full((n_q, n_q), pad, dtype=np.float64)
        return CostMatrix(values, 0, weights, pad)

    h, w = mask_logits.shape[1:]
    factor = valid_mask.shape[0] // h
    vmask = downsample_mask(valid_mask, factor).astype(bool).reshape(-1)
    n_valid = int(vmask.sum())

    shifted = class_logits - class_logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    labels = np.asarray(targets.labels, dtype=np.int64)
    class_cost = -probs[:, labels - 1].T.astype(np.float64)        # [N, N_q]

    logits_flat = mask_logits.reshape(n_q, -1)[:, vmask]
    p = np.clip(_sigmoid(logits_flat), _P_CLAMP, 1.0 - _P_CLAMP)
    gt = np.stack(
        [downsample_mask(m, factor).reshape(-1)[vmask] for m in targets.masks]
    ).astype(np.float64)                                            # [N, V]

    # dice, with the same epsilon smoothing as the training loss
    p64 = p.astype(np.float64)
    inter = gt @ p64.T
    sp = p64.sum(axis=1)
    sg = gt.sum(axis=1)
    eps = loss_cfg.dice_eps
    dice_cost = 1.0 - (2.0 * inter + eps) / (sp[None, :] + sg[:, None] + eps)

    # focal, split by ground-truth polarity so pairs reduce to two matmuls
    alpha, gamma = loss_cfg.focal_alpha, loss_cfg.focal_gamma
    dt = logits_flat.dtype
    term_pos = (alpha * (1.0 - p) ** gamma * -np.log(p)).astype(dt).astype(np.float64)
    term_neg = ((1.0 - alpha) * p ** gamma * -np.log(1.0 - p)).astype(dt).astype(np.float64)
    focal_cost = (gt @ term_pos.T + (1.0 - gt) @ term_neg.T) / n_valid

    real = (
        weights.class_weight * class_cost
        + weights.focal_weight * focal_cost
        + weights.dice_weight * dice_cost
    )
    if np.isnan(real).any():
        i, q = np.argwhere(np.isnan(real))[0]
        raise NanCostError(f"NaN matching cost at (gt={int(i)}, query={int(q)})")

    pad = float(real.max()) + 1.0
    values = np.full((n_q, n_q), pad, dtype=np.float64)
    values[:n, :] = real
    return CostMatrix(values, n, weights, pad)


def pad_square(real_costs: np.ndarray, n_queries: int | None = None) -> CostMatrix:
    """Square-pad a raw rectangular cost block (test/CLI convenience)."""
    real_costs = np.asarray(real_costs, dtype=np.float64)
    n, n_q = real_costs.shape
    if n_queries is None:
        n_queries = n_q
    if n > n_queries or n_q > n_queries:
        raise MatcherError(f"cannot pad {real_costs.shape} into {n_queries} queries")
    pad = float(real_costs.max()) + 1.0 if real_costs.size else 1.0
    values = np.full((n_queries, n_queries), pad, dtype=np.float64)
    values[:n, :n_q] = real_costs
    return CostMatrix(values, n, MatcherWeights(), pad)


def _solve_square(a: np.ndarray) -> np.ndarray:
    """Min-cost perfect matching via shortest augmenting paths with potentials.

    Deterministic: argmin picks the lowest-index column, so ties always break
    toward lower indices. Returns the matched column for each row.
    """
    n = a.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_for_col = np.zeros(n + 1, dtype=np.int64)   # 1-based; 0 = unmatched
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_for_col[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        work = np.full(n + 1, inf)                   # minv with used columns masked
        used = []
        while True:
            work[j0] = inf
            used.append(j0)
            i0 = row_for_col[j0]
            cur = a[i0 - 1, :] - u[i0] - v[1:]
            better = cur < minv[1:]
            if better.any():
                idx = np.nonzero(better)[0] + 1
                minv[idx] = cur[idx - 1]
                way[idx] = j0
                np.minimum(work[1:], minv[1:], out=work[1:])
                work[np.asarray(used)] = inf
            j1 = int(np.argmin(work))
            delta = work[j1]
            ju = np.asarray(used)
            u[row_for_col[ju]] += delta
            v[ju] -= delta
            minv[1:] -= delta
            work[1:] -= delta
            work[ju] = inf
            j0 = j1
            if row_for_col[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            row_for_col[j0] = row_for_col[j1]
            j0 = j1
    col_for_row = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_for_row[row_for_col[j] - 1] = j - 1
    return col_for_row


def hungarian(costs) -> Assignment:
    """Optimal assignment on a square cost matrix, restricted to real rows."""
    if isinstance(costs, CostMatrix):
        values, real_rows = costs.values, costs.real_rows
    else:
        values = np.asarray(costs, dtype=np.float64)
        real_rows = values.shape[0]
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ContractError(f"hungarian requires a square matrix, got {values.shape}")
    if values.size and not np.isfinite(values).all():
        raise ContractError("hungarian requires finite costs")
    if values.size == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    col_for_row = _solve_square(values)
    query_for_gt = col_for_row[:real_rows]
    total = float(values[np.arange(real_rows), query_for_gt].sum())
    return Assignment(query_for_gt, total)


def brute_force_match(costs: np.ndarray) -> Assignment:
    """Exact minimum over all injections of rows into columns (oracle).

    Guarded to n_q <= 9; enumeration is factorial.
    """
    costs = np.asarray(costs, dtype=np.float64)
    n, n_q = costs.shape
    if not (n <= n_q <= 9):
        raise MatcherError(f"brute force guard: need N <= n_q <= 9, got {costs.shape}")
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    best_total = np.inf
    best = None
    rows = np.arange(n)
    for perm in itertools.permutations(range(n_q), n):
        total = costs[rows, list(perm)].sum()
        if total < best_total:
            best_total = total
            best = perm
    return Assignment(np.asarray(best, dtype=np.int64), float(best_total))
