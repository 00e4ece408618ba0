"""Training objectives: matched set loss, count regression, inplace distillation.

The set loss matches each stage's predictions one-to-one to ground truth and
applies focal classification over all proposals plus L1 and GIoU regression
over matched pairs, each normalized by the object count and summed over
stages.  Loss weights follow the usual set-prediction defaults:
lambda_cls=2, lambda_l1=5, lambda_giou=2, focal alpha=0.25 / gamma=2.

Distillation compares teacher and student proposal features and region
features stage by stage (coefficients c1=0.1 on region features, c2=1 on
proposal features); teacher-side tensors are detached so no gradient can
reach teacher activations through this term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import Box, boxes_to_array, giou_t, iou, l1_t
from .data import Scene
from .matching import LAMBDA_CLS, LAMBDA_GIOU, LAMBDA_L1, build_cost, hungarian
from .model import CountEstimate, FeatureGrid, StageOutput, TwoStageProposals, roi_pool_multi
from .proposals import SwitchConfig, sample_indices

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2  # applied as two explicit multiplications
LAMBDA_EST = 1.0
DISTILL_C1 = 0.1
DISTILL_C2 = 1.0

RPN_POSITIVE_IOU = 0.25

_LOG_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    """Unweighted task components plus the already-weighted distill term.

    total = lambda_cls*cls + lambda_l1*l1 + lambda_giou*giou + lambda_est*est + dst
    """

    cls: float = 0.0
    l1: float = 0.0
    giou: float = 0.0
    est: float = 0.0
    dst: float = 0.0

    @property
    def total(self) -> float:
        return (LAMBDA_CLS * self.cls + LAMBDA_L1 * self.l1 + LAMBDA_GIOU * self.giou
                + LAMBDA_EST * self.est + self.dst)

    def add(self, other: "LossBreakdown") -> None:
        self.cls += other.cls
        self.l1 += other.l1
        self.giou += other.giou
        self.est += other.est
        self.dst += other.dst

    def scaled(self, s: float) -> "LossBreakdown":
        return LossBreakdown(cls=self.cls * s, l1=self.l1 * s, giou=self.giou * s,
                             est=self.est * s, dst=self.dst * s)

    def csv_fields(self) -> str:
        return (f"{self.cls:.6f},{self.l1:.6f},{self.giou:.6f},"
                f"{self.est:.6f},{self.dst:.6f},{self.total:.6f}")


@dataclass
class LossTerms:
    """Tensor-valued components; combine() builds the weighted scalar."""

    cls: T.Tensor
    l1: T.Tensor
    giou: T.Tensor
    est: T.Tensor | None = None
    dst: T.Tensor | None = None

    def combine(self) -> T.Tensor:
        out = T.add(T.add(T.scale(self.cls, LAMBDA_CLS), T.scale(self.l1, LAMBDA_L1)),
                    T.scale(self.giou, LAMBDA_GIOU))
        if self.est is not None:
            out = T.add(out, T.scale(self.est, LAMBDA_EST))
        if self.dst is not None:
            out = T.add(out, self.dst)
        return out

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(
            cls=self.cls.item(), l1=self.l1.item(), giou=self.giou.item(),
            est=self.est.item() if self.est is not None else 0.0,
            dst=self.dst.item() if self.dst is not None else 0.0)


def _zero() -> T.Tensor:
    return T.Tensor.const(np.zeros(()))


def _focal(logits: T.Tensor, target_onehot: np.ndarray, norm: float) -> T.Tensor:
    """Sigmoid focal loss summed over proposals x classes, divided by norm."""
    p = T.sigmoid(logits)
    shape = logits.shape
    tgt = T.Tensor.const(target_onehot)
    inv_tgt = T.Tensor.const(1.0 - target_onehot)
    one = T.Tensor.const(np.ones(shape))
    floor = T.Tensor.const(np.full(shape, _LOG_FLOOR))
    one_minus_p = T.sub(one, p)
    log_p = T.log(T.maximum(p, floor))
    log_not_p = T.log(T.maximum(one_minus_p, floor))
    pos = T.mul(T.mul(tgt, T.mul(one_minus_p, one_minus_p)), T.scale(log_p, -1.0))
    neg = T.mul(T.mul(inv_tgt, T.mul(p, p)), T.scale(log_not_p, -1.0))
    focal = T.add(T.scale(pos, FOCAL_ALPHA), T.scale(neg, 1.0 - FOCAL_ALPHA))
    return T.scale(T.total_sum(focal), 1.0 / norm)


def stage_loss(stage: StageOutput, gt: Scene) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """(cls, l1, giou) tensors for one stage against one scene."""
    m = stage.count
    g = gt.count
    if m < g:
        raise ValueError(f"stage has {m} proposals but scene has {g} objects")
    num_classes = stage.class_logits.shape[1]
    norm = float(max(1, g))

    onehot = np.zeros((m, num_classes))
    if g > 0:
        gt_classes = [cls for cls, _ in gt.objects]
        gt_boxes = [box for _, box in gt.objects]
        cost = build_cost(stage.class_logits.values, stage.boxes_list(), gt_classes, gt_boxes)
        assignment = hungarian(cost)
        pred_rows = [p for p, _ in assignment.pairs]
        for p_idx, g_idx in assignment.pairs:
            onehot[p_idx, gt_classes[g_idx]] = 1.0
        matched = T.gather_rows(stage.proposal_boxes, pred_rows)
        gt_arr = T.Tensor.const(boxes_to_array([gt_boxes[g_idx] for _, g_idx in assignment.pairs]))
        l1 = T.scale(l1_t(matched, gt_arr), 1.0 / norm)
        ones = T.Tensor.const(np.ones((g, 1)))
        giou_term = T.scale(T.total_sum(T.sub(ones, giou_t(matched, gt_arr))), 1.0 / norm)
    else:
        l1 = _zero()
        giou_term = _zero()
    cls = _focal(stage.class_logits, onehot, norm)
    return cls, l1, giou_term


def set_loss(stage_outputs: list[StageOutput], gt: Scene) -> LossTerms:
    """Matched set loss summed over refinement stages."""
    cls_total, l1_total, giou_total = _zero(), _zero(), _zero()
    for stage in stage_outputs:
        c, l, gi = stage_loss(stage, gt)
        cls_total = T.add(cls_total, c)
        l1_total = T.add(l1_total, l)
        giou_total = T.add(giou_total, gi)
    return LossTerms(cls=cls_total, l1=l1_total, giou=giou_total)


def count_loss(estimate: CountEstimate, n_gt: int) -> T.Tensor:
    """Squared error between estimated and true object count."""
    target = T.Tensor.const(np.full((1, 1), float(n_gt)))
    return T.mse(estimate.tensor, target)


def distill_loss(teacher_stages: list[StageOutput], student_stages: list[StageOutput],
                 count: int, grid: FeatureGrid, cfg: SwitchConfig,
                 strategy: str | None = None) -> T.Tensor:
    """Feature-level inplace distillation, summed over stages.

    Per stage: c1 * MSE(sliced teacher region features, student region
    features) + c2 * MSE(sliced teacher proposal features, student proposal
    features).  Region features are pooled from each model's own stage boxes.
    Teacher-side tensors are detached; only proposal/region features are
    compared, never logits or boxes.
    """
    if len(teacher_stages) != len(student_stages):
        raise ValueError(
            f"stage count mismatch: teacher {len(teacher_stages)} vs student {len(student_stages)}")
    rows = sample_indices(cfg, count, strategy)
    total = _zero()
    detached_grid = FeatureGrid(features=grid.features.detach(), grid=grid.grid,
                                image_size=grid.image_size)
    for t_stage, s_stage in zip(teacher_stages, student_stages):
        if s_stage.count != count:
            raise ValueError(f"student stage ran {s_stage.count} proposals, expected {count}")
        t_feats = T.gather_rows(t_stage.proposal_features.detach(), rows)
        t_boxes = t_stage.proposal_boxes.values[rows]
        t_roi = roi_pool_multi(detached_grid, t_boxes)
        s_roi = roi_pool_multi(grid, s_stage.proposal_boxes.values)
        term = T.add(T.scale(T.mse(s_roi, t_roi), DISTILL_C1),
                     T.scale(T.mse(s_stage.proposal_features, t_feats), DISTILL_C2))
        total = T.add(total, term)
    return total


def rpn_loss(props: TwoStageProposals, gt: Scene) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """Auxiliary supervision for the dense scorer of the two-stage arch.

    Objectness regresses (via MSE on the sigmoid score) to the anchor's best
    IoU with ground truth; candidates whose anchor IoU passes the positive
    threshold get L1+GIoU pulled toward their best-matching object.  Returned
    as (cls, l1, giou) contributions folded into the same weighted buckets as
    the set loss.
    """
    r = len(props.scored)
    targets = np.zeros((r, 1))
    best_gt = np.full(r, -1, dtype=np.intp)
    if gt.count > 0:
        anchors = [Box(*row) for row in props.anchor_boxes]
        for i, anchor in enumerate(anchors):
            ious = [iou(anchor, box) for _, box in gt.objects]
            j = int(np.argmax(ious))
            targets[i, 0] = ious[j]
            best_gt[i] = j
    score_mse = T.mse(T.sigmoid(props.score_logits_t), T.Tensor.const(targets))
    positives = np.nonzero(targets[:, 0] >= RPN_POSITIVE_IOU)[0]
    if positives.size and gt.count > 0:
        cand_rows = T.gather_rows(props.boxes_t, positives.tolist())
        gt_rows = T.Tensor.const(boxes_to_array(
            [gt.objects[best_gt[i]][1] for i in positives]))
        norm = float(positives.size)
        l1 = T.scale(l1_t(cand_rows, gt_rows), 0.1 / norm)
        ones = T.Tensor.const(np.ones((positives.size, 1)))
        giou_term = T.scale(T.total_sum(T.sub(ones, giou_t(cand_rows, gt_rows))), 0.1 / norm)
    else:
        l1 = _zero()
        giou_term = _zero()
    return score_mse, l1, giou_term
