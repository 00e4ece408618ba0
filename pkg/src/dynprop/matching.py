"""Optimal one-to-one assignment between predictions and ground truth.

``hungarian`` solves the rectangular linear sum assignment problem (scipy's
Jonker-Volgenant solver) and then, on desk-scale instances, canonicalizes
among cost ties so the returned pair list is the lexicographically smallest
optimal one.  ``brute_force`` is the exhaustive oracle used by tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxes import Box, giou, l1_box

LAMBDA_CLS = 2.0
LAMBDA_L1 = 5.0
LAMBDA_GIOU = 2.0

# canonicalization pass runs only at sizes where the extra solves are cheap
_CANON_MAX_GT = 8
_CANON_MAX_PRED = 64

_TIE_TOL = 1e-9


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray  # [num_predictions x num_ground_truth]

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"cost matrix must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("cost matrix contains non-finite entries")
        if arr.shape[0] < arr.shape[1]:
            raise ValueError(
                f"need predictions >= ground truth, got {arr.shape[0]} < {arr.shape[1]}")
        object.__setattr__(self, "entries", arr)

    @property
    def num_predictions(self) -> int:
        return self.entries.shape[0]

    @property
    def num_ground_truth(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class Assignment:
    """Pairs (prediction_index, ground_truth_index), sorted by ground truth."""

    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    def pred_for_gt(self) -> dict[int, int]:
        return {g: p for p, g in self.pairs}


def build_cost(pred_logits: np.ndarray, pred_boxes: list[Box], gt_classes: list[int],
               gt_boxes: list[Box]) -> CostMatrix:
    """Match cost: -lambda_cls * p(class) + lambda_l1 * L1 + lambda_giou * (-GIoU).

    Class probabilities come from sigmoid scores; the classification term uses
    the raw probability rather than the focal value.
    """
    logits = np.asarray(pred_logits, dtype=np.float64)
    p = logits.shape[0]
    g = len(gt_classes)
    if p < g:
        raise ValueError(f"need predictions >= ground truth objects, got {p} < {g}")
    prob = 1.0 / (1.0 + np.exp(-logits))
    cost = np.zeros((p, g), dtype=np.float64)
    for j in range(g):
        cls_term = -prob[:, gt_classes[j]]
        for i in range(p):
            cost[i, j] = (LAMBDA_CLS * cls_term[i]
                          + LAMBDA_L1 * l1_box(pred_boxes[i], gt_boxes[j])
                          + LAMBDA_GIOU * (-giou(pred_boxes[i], gt_boxes[j])))
    return CostMatrix(cost)


def _total(cost: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> float:
    order = np.argsort(cols)
    return float(cost[rows[order], cols[order]].sum())


def hungarian(cost: CostMatrix) -> Assignment:
    """Globally minimal assignment covering every ground-truth column.

    Tie-break: among optimal assignments the lexicographically smallest pair
    list (pairs ordered by ground-truth index).  The canonicalization step is
    skipped above _CANON_MAX_* sizes, where real-valued costs make exact ties
    vanishingly unlikely and the solver output is already deterministic.
    """
    c = cost.entries
    rows, cols = linear_sum_assignment(c)
    best_total = _total(c, rows, cols)

    p, g = c.shape
    if g <= _CANON_MAX_GT and p <= _CANON_MAX_PRED:
        pairs = _canonicalize(c, best_total)
    else:
        pairs = tuple(sorted(((int(r), int(cc)) for r, cc in zip(rows, cols)),
                             key=lambda rc: rc[1]))
    total = float(sum(c[r, j] for r, j in sorted(pairs, key=lambda rc: rc[1])))
    return Assignment(pairs=pairs, total_cost=total)


def _canonicalize(c: np.ndarray, best_total: float) -> tuple[tuple[int, int], ...]:
    """Fix columns left to right, choosing the smallest row that still admits
    an optimal completion."""
    p, g = c.shape
    scale = max(1.0, float(np.abs(c).max()))
    tol = _TIE_TOL * scale * max(1, g)
    fixed: list[tuple[int, int]] = []
    used_rows: list[int] = []
    fixed_cost = 0.0
    for j in range(g):
        free_rows = [r for r in range(p) if r not in used_rows]
        rest_cols = list(range(j + 1, g))
        for r in free_rows:
            cand_cost = fixed_cost + c[r, j]
            if rest_cols:
                sub_rows = [rr for rr in free_rows if rr != r]
                sub = c[np.ix_(sub_rows, rest_cols)]
                sr, sc = linear_sum_assignment(sub)
                cand_cost += float(sub[sr, sc].sum())
            if cand_cost <= best_total + tol:
                fixed.append((r, j))
                used_rows.append(r)
                fixed_cost += float(c[r, j])
                break
    return tuple(fixed)


def brute_force(cost: CostMatrix) -> Assignment:
    """Exhaustive minimum over all injections of columns into rows.

    Same tie-break as hungarian.  Rejected above the size where enumeration
    stops being a sane oracle.
    """
    c = cost.entries
    p, g = c.shape
    if g > 8:
        raise ValueError(f"brute_force: ground-truth count {g} exceeds limit 8")
    count = 1
    for k in range(g):
        count *= (p - k)
        if count > 500_000:
            raise ValueError(f"brute_force: instance {p}x{g} too large to enumerate")
    if g == 0:
        return Assignment(pairs=(), total_cost=0.0)
    # itertools yields permutations in lexicographic order, so the first
    # occurrence of the minimal total is the lexicographically smallest optimum
    perms = np.array(list(itertools.permutations(range(p), g)), dtype=np.intp)
    totals = c[perms, np.arange(g)].sum(axis=1)
    best = perms[int(np.argmin(totals))]
    pairs = tuple((int(best[j]), j) for j in range(g))
    total = float(sum(c[r, j] for r, j in pairs))
    return Assignment(pairs=pairs, total_cost=total)
