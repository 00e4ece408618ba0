"""The toy detection networks.

Both architectures share a patch-attention backbone: the image is split into
8x8-pixel patches, linearly embedded, given a learned position embedding and
run through two self-attention encoder blocks, yielding a G x G grid of
d-dimensional features (stored flat as [G*G x d], row-major in y).

query arch      learnable proposal bank -> T refinement stages; each stage
                runs self-attention across proposals, pools a region feature
                per box, fuses both through an MLP, and emits class logits
                plus box deltas.
two_stage arch  a dense scorer predicts objectness + deltas for A anchor
                shapes at every grid cell; the top candidates (sorted by
                score) go through a single per-box refinement head with no
                cross-proposal interaction.

A small count estimator (global max pool -> two-layer MLP -> relu) reads the
feature grid to drive dynamic proposal-count selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import Box, apply_deltas_t, array_to_boxes
from .proposals import (ProposalBank, ScoredProposals, SwitchConfig, bank_init,
                        sample, sample_scored_rows)
from .rng import Xoshiro256pp


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Overflow-safe sigmoid on plain arrays."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out

ARCH_QUERY = "query"
ARCH_TWO_STAGE = "two_stage"

# square anchor side lengths, matched to the dataset's object size range
ANCHOR_SIDES = (0.12, 0.22, 0.35)

_FOCAL_PRIOR_BIAS = -4.59511985013459  # -log((1 - 0.01) / 0.01)


@dataclass
class ModelConfig:
    arch: str = ARCH_QUERY
    n_total: int = 40
    theta: int = 4
    k_objects: float = 8.0
    dim: int = 64
    stages: int = 3
    classes: int = 3
    patch: int = 8
    image_size: int = 64
    strategy: str = "first"
    block_estimator_grad: bool = False

    def __post_init__(self):
        if self.arch not in (ARCH_QUERY, ARCH_TWO_STAGE):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.image_size % self.patch != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.n_total < 1 or self.n_total % self.theta != 0:
            raise ValueError(
                f"proposal count {self.n_total} must be a positive multiple of theta={self.theta}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def anchors(self) -> int:
        return len(ANCHOR_SIDES)

    def switch(self) -> SwitchConfig:
        return SwitchConfig(self.n_total, self.theta, self.strategy)


@dataclass
class FeatureGrid:
    features: T.Tensor  # [G*G x d]
    grid: int
    image_size: tuple[int, int]

    def cell_centers(self) -> np.ndarray:
        g = self.grid
        ys, xs = np.divmod(np.arange(g * g), g)
        return np.stack([(xs + 0.5) / g, (ys + 0.5) / g], axis=1)


@dataclass
class StageOutput:
    proposal_features: T.Tensor  # [M x d]
    proposal_boxes: T.Tensor     # [M x 4]
    class_logits: T.Tensor       # [M x C]

    @property
    def count(self) -> int:
        return self.proposal_features.shape[0]

    def boxes_list(self) -> list[Box]:
        return array_to_boxes(self.proposal_boxes.values)


@dataclass
class CountEstimate:
    n_est: float
    tensor: T.Tensor  # [1 x 1], differentiable


@dataclass
class TwoStageProposals:
    """Dense RPN output kept in both sorted-plain and tensor form."""

    scored: ScoredProposals
    boxes_t: T.Tensor         # [R x 4] candidates in score order (differentiable)
    score_logits_t: T.Tensor  # [R x 1] objectness logits in score order
    anchor_boxes: np.ndarray  # [R x 4] anchors in score order


# -- parameter initialization -----------------------------------------------------

def _xavier(rng: Xoshiro256pp, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    vals = [rng.uniform_range(-bound, bound) for _ in range(fan_in * fan_out)]
    return np.array(vals, dtype=np.float64).reshape(fan_in, fan_out)


def _attn_params(p: dict, rng, prefix: str, dim: int) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.{name}"] = T.Tensor.param(_xavier(rng, dim, dim))
        p[f"{prefix}.{name[-1]}b"] = T.Tensor.param(np.zeros(dim))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Expected parameter names and shapes, in checkpoint order."""
    d = cfg.dim
    shapes: dict[str, tuple[int, ...]] = {}

    def attn(prefix):
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{name}"] = (d, d)
            shapes[f"{prefix}.{name[-1]}b"] = (d,)

    shapes["enc.embed.w"] = (3 * cfg.patch * cfg.patch, d)
    shapes["enc.embed.b"] = (d,)
    shapes["enc.pos"] = (cfg.grid * cfg.grid, d)
    for i in range(2):
        attn(f"enc.blk{i}.attn")
        shapes[f"enc.blk{i}.mlp.w1"] = (d, 2 * d)
        shapes[f"enc.blk{i}.mlp.b1"] = (2 * d,)
        shapes[f"enc.blk{i}.mlp.w2"] = (2 * d, d)
        shapes[f"enc.blk{i}.mlp.b2"] = (d,)
    if cfg.arch == ARCH_QUERY:
        shapes["bank.features"] = (cfg.n_total, d)
        shapes["bank.boxes"] = (cfg.n_total, 4)
        for t in range(cfg.stages):
            attn(f"stage{t}.attn")
            shapes[f"stage{t}.inter.w1"] = (2 * d, 2 * d)
            shapes[f"stage{t}.inter.b1"] = (2 * d,)
            shapes[f"stage{t}.inter.w2"] = (2 * d, d)
            shapes[f"stage{t}.inter.b2"] = (d,)
            shapes[f"stage{t}.box.w1"] = (d, d)
            shapes[f"stage{t}.box.b1"] = (d,)
            shapes[f"stage{t}.box.w2"] = (d, 4)
            shapes[f"stage{t}.box.b2"] = (4,)
            shapes[f"stage{t}.cls.w"] = (d, cfg.classes)
            shapes[f"stage{t}.cls.b"] = (cfg.classes,)
    else:
        shapes["rpn.w"] = (d, cfg.anchors * 5)
        shapes["rpn.b"] = (cfg.anchors * 5,)
        shapes["head.w1"] = (d, d)
        shapes["head.b1"] = (d,)
        shapes["head.cls.w"] = (d, cfg.classes)
        shapes["head.cls.b"] = (cfg.classes,)
        shapes["head.box.w"] = (d, 4)
        shapes["head.box.b"] = (4,)
    shapes["est.w1"] = (d, d // 2)
    shapes["est.b1"] = (d // 2,)
    shapes["est.w2"] = (d // 2, 1)
    shapes["est.b2"] = (1,)
    return shapes


def build_params(cfg: ModelConfig, seed: int) -> dict[str, T.Tensor]:
    """All learnable tensors, in a stable name order (checkpoint order)."""
    rng = Xoshiro256pp(seed)
    d = cfg.dim
    p: dict[str, T.Tensor] = {}

    pdim = 3 * cfg.patch * cfg.patch
    p["enc.embed.w"] = T.Tensor.param(_xavier(rng, pdim, d))
    p["enc.embed.b"] = T.Tensor.param(np.zeros(d))
    p["enc.pos"] = T.Tensor.param(rng.normal((cfg.grid * cfg.grid, d), scale=0.02))
    for i in range(2):
        _attn_params(p, rng, f"enc.blk{i}.attn", d)
        p[f"enc.blk{i}.mlp.w1"] = T.Tensor.param(_xavier(rng, d, 2 * d))
        p[f"enc.blk{i}.mlp.b1"] = T.Tensor.param(np.zeros(2 * d))
        p[f"enc.blk{i}.mlp.w2"] = T.Tensor.param(_xavier(rng, 2 * d, d))
        p[f"enc.blk{i}.mlp.b2"] = T.Tensor.param(np.zeros(d))

    if cfg.arch == ARCH_QUERY:
        feats, boxes = bank_init(cfg.n_total, d, rng)
        p["bank.features"] = T.Tensor.param(feats)
        p["bank.boxes"] = T.Tensor.param(boxes)
        for t in range(cfg.stages):
            _attn_params(p, rng, f"stage{t}.attn", d)
            p[f"stage{t}.inter.w1"] = T.Tensor.param(_xavier(rng, 2 * d, 2 * d))
            p[f"stage{t}.inter.b1"] = T.Tensor.param(np.zeros(2 * d))
            p[f"stage{t}.inter.w2"] = T.Tensor.param(_xavier(rng, 2 * d, d))
            p[f"stage{t}.inter.b2"] = T.Tensor.param(np.zeros(d))
            p[f"stage{t}.box.w1"] = T.Tensor.param(_xavier(rng, d, d))
            p[f"stage{t}.box.b1"] = T.Tensor.param(np.zeros(d))
            p[f"stage{t}.box.w2"] = T.Tensor.param(np.zeros((d, 4)))
            p[f"stage{t}.box.b2"] = T.Tensor.param(np.zeros(4))
            p[f"stage{t}.cls.w"] = T.Tensor.param(_xavier(rng, d, cfg.classes))
            p[f"stage{t}.cls.b"] = T.Tensor.param(np.full(cfg.classes, _FOCAL_PRIOR_BIAS))
    else:
        p["rpn.w"] = T.Tensor.param(_xavier(rng, d, cfg.anchors * 5))
        p["rpn.b"] = T.Tensor.param(np.zeros(cfg.anchors * 5))
        p["head.w1"] = T.Tensor.param(_xavier(rng, d, d))
        p["head.b1"] = T.Tensor.param(np.zeros(d))
        p["head.cls.w"] = T.Tensor.param(_xavier(rng, d, cfg.classes))
        p["head.cls.b"] = T.Tensor.param(np.full(cfg.classes, _FOCAL_PRIOR_BIAS))
        p["head.box.w"] = T.Tensor.param(np.zeros((d, 4)))
        p["head.box.b"] = T.Tensor.param(np.zeros(4))

    p["est.w1"] = T.Tensor.param(_xavier(rng, d, d // 2))
    p["est.b1"] = T.Tensor.param(np.zeros(d // 2))
    p["est.w2"] = T.Tensor.param(_xavier(rng, d // 2, 1))
    p["est.b2"] = T.Tensor.param(np.zeros(1))
    return p


# -- shared building blocks --------------------------------------------------------

def _linear(x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    return T.add(T.matmul(x, w), T.tile_rows(b, x.shape[0]))


def _attention(x: T.Tensor, p: dict, prefix: str, dim: int) -> T.Tensor:
    q = _linear(x, p[f"{prefix}.wq"], p[f"{prefix}.qb"])
    k = _linear(x, p[f"{prefix}.wk"], p[f"{prefix}.kb"])
    v = _linear(x, p[f"{prefix}.wv"], p[f"{prefix}.vb"])
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dim))
    attn = T.matmul(T.softmax(scores, axis=-1), v)
    return _linear(attn, p[f"{prefix}.wo"], p[f"{prefix}.ob"])


def _mlp(x: T.Tensor, p: dict, prefix: str) -> T.Tensor:
    h = T.relu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return _linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def patches_from_image(image: np.ndarray, patch: int) -> np.ndarray:
    """[3 x H x W] image -> [G*G x 3*patch*patch] rows, y-major."""
    c, h, w = image.shape
    gy, gx = h // patch, w // patch
    x = image.reshape(c, gy, patch, gx, patch)
    x = x.transpose(1, 3, 0, 2, 4).reshape(gy * gx, c * patch * patch)
    return np.ascontiguousarray(x)


def encode(image: np.ndarray, params: dict, cfg: ModelConfig) -> FeatureGrid:
    """Backbone: patch embedding + position embedding + 2 encoder blocks."""
    c, h, w = image.shape
    if h % cfg.patch or w % cfg.patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {cfg.patch}")
    patches = T.Tensor.const(patches_from_image(image, cfg.patch))
    x = _linear(patches, params["enc.embed.w"], params["enc.embed.b"])
    x = T.add(x, params["enc.pos"])
    for i in range(2):
        x = T.add(x, _attention(T.layer_norm(x), params, f"enc.blk{i}.attn", cfg.dim))
        x = T.add(x, _mlp(T.layer_norm(x), params, f"enc.blk{i}.mlp"))
    x = T.layer_norm(x)
    return FeatureGrid(features=x, grid=h // cfg.patch, image_size=(h, w))


# -- region pooling -----------------------------------------------------------------

def _cells_for_box(centers: np.ndarray, box_row: np.ndarray) -> np.ndarray:
    x1, y1, x2, y2 = box_row
    inside = ((centers[:, 0] >= x1) & (centers[:, 0] <= x2)
              & (centers[:, 1] >= y1) & (centers[:, 1] <= y2))
    idx = np.nonzero(inside)[0]
    if idx.size:
        return idx
    bx, by = 0.5 * (x1 + x2), 0.5 * (y1 + y2)
    d2 = (centers[:, 0] - bx) ** 2 + (centers[:, 1] - by) ** 2
    return np.array([int(np.argmin(d2))], dtype=np.intp)


def roi_pool_multi(grid: FeatureGrid, boxes: np.ndarray) -> T.Tensor:
    """[M x d] average of cells whose centers fall in each box (nearest cell
    when empty); differentiable w.r.t. the grid features."""
    centers = grid.cell_centers()
    groups = [_cells_for_box(centers, row) for row in np.asarray(boxes).reshape(-1, 4)]
    return T.rows_mean_groups(grid.features, groups)


def roi_pool(grid: FeatureGrid, box: Box) -> T.Tensor:
    """Single-box pooling, returned as a [d] vector."""
    pooled = roi_pool_multi(grid, np.array([[box.x1, box.y1, box.x2, box.y2]]))
    return T.reshape(pooled, (grid.features.shape[1],))


# -- query-based path ---------------------------------------------------------------

def refine_stage(grid: FeatureGrid, q_prev: T.Tensor, b_prev: T.Tensor,
                 params: dict, stage: int, cfg: ModelConfig) -> StageOutput:
    """One refinement stage: cross-proposal attention, region pooling,
    feature interaction, box-delta and class heads."""
    pre = f"stage{stage}"
    attended = T.add(q_prev, _attention(T.layer_norm(q_prev), params, f"{pre}.attn", cfg.dim))
    pooled = roi_pool_multi(grid, b_prev.values)
    fused = T.concat([T.layer_norm(attended), pooled], axis=1)
    q_new = T.add(attended, _mlp(fused, params, f"{pre}.inter"))
    q_norm = T.layer_norm(q_new)
    deltas = _linear(T.relu(_linear(q_norm, params[f"{pre}.box.w1"], params[f"{pre}.box.b1"])),
                     params[f"{pre}.box.w2"], params[f"{pre}.box.b2"])
    b_new = apply_deltas_t(b_prev, deltas)
    logits = _linear(q_norm, params[f"{pre}.cls.w"], params[f"{pre}.cls.b"])
    return StageOutput(proposal_features=q_new, proposal_boxes=b_new, class_logits=logits)


def forward_cascade(grid: FeatureGrid, feats: T.Tensor, boxes: T.Tensor,
                    params: dict, cfg: ModelConfig) -> list[StageOutput]:
    """Chain the refinement stages; returns every stage's output."""
    outputs = []
    q, b = feats, boxes
    for t in range(cfg.stages):
        out = refine_stage(grid, q, b, params, t, cfg)
        outputs.append(out)
        q, b = out.proposal_features, out.proposal_boxes
    return outputs


# -- two-stage path ------------------------------------------------------------------

def anchor_grid(grid_size: int) -> np.ndarray:
    """[G*G*A x 4] anchors: A square shapes centered at each cell, clipped."""
    centers_y, centers_x = np.divmod(np.arange(grid_size * grid_size), grid_size)
    rows = []
    for i in range(grid_size * grid_size):
        cx = (centers_x[i] + 0.5) / grid_size
        cy = (centers_y[i] + 0.5) / grid_size
        for side in ANCHOR_SIDES:
            half = side / 2
            rows.append([max(0.0, cx - half), max(0.0, cy - half),
                         min(1.0, cx + half), min(1.0, cy + half)])
    return np.array(rows, dtype=np.float64)


def two_stage_propose(grid: FeatureGrid, params: dict, cfg: ModelConfig) -> TwoStageProposals:
    """Score every (cell, anchor) candidate and sort by descending objectness.

    Ties preserve (cell, anchor) order.  Box deltas stay differentiable so the
    candidate boxes can be trained.
    """
    g = grid.grid
    a = cfg.anchors
    raw = _linear(grid.features, params["rpn.w"], params["rpn.b"])  # [G*G x A*5]
    per_anchor = T.reshape(raw, (g * g * a, 5))
    logits = T.matmul(per_anchor, T.Tensor.const(np.eye(5)[:, :1]))          # [R x 1]
    deltas = T.matmul(per_anchor, T.Tensor.const(np.eye(5)[:, 1:]))          # [R x 4]
    anchors = anchor_grid(g)
    cand = apply_deltas_t(T.Tensor.const(anchors), deltas)
    scores = sigmoid_np(logits.values[:, 0])
    order = np.argsort(-scores, kind="stable")
    scored = ScoredProposals(
        boxes=tuple(array_to_boxes(cand.values[order])),
        scores=tuple(float(s) for s in scores[order]))
    return TwoStageProposals(
        scored=scored,
        boxes_t=T.gather_rows(cand, order.tolist()),
        score_logits_t=T.gather_rows(logits, order.tolist()),
        anchor_boxes=anchors[order])


def two_stage_head(grid: FeatureGrid, boxes: T.Tensor, params: dict,
                   cfg: ModelConfig) -> StageOutput:
    """Per-box refinement with no cross-proposal interaction."""
    pooled = roi_pool_multi(grid, boxes.values)
    h = T.relu(_linear(pooled, params["head.w1"], params["head.b1"]))
    logits = _linear(h, params["head.cls.w"], params["head.cls.b"])
    deltas = _linear(h, params["head.box.w"], params["head.box.b"])
    return StageOutput(proposal_features=h, proposal_boxes=apply_deltas_t(boxes, deltas),
                       class_logits=logits)


# -- count estimator -----------------------------------------------------------------

def estimate_count(grid: FeatureGrid, params: dict,
                   block_backbone_grad: bool = False) -> CountEstimate:
    """Global max pool -> FC(d -> d/2) -> relu -> FC(d/2 -> 1) -> relu."""
    feats = grid.features.detach() if block_backbone_grad else grid.features
    pooled = T.reshape(T.max_rows(feats), (1, feats.shape[1]))
    h = T.relu(_linear(pooled, params["est.w1"], params["est.b1"]))
    out = T.relu(_linear(h, params["est.w2"], params["est.b2"]))
    return CountEstimate(n_est=float(out.values[0, 0]), tensor=out)


# -- the assembled model --------------------------------------------------------------

@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, T.Tensor] = field(repr=False)

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "Model":
        return cls(cfg=cfg, params=build_params(cfg, seed))

    def bank(self) -> ProposalBank:
        return ProposalBank(features=self.params["bank.features"],
                            boxes=self.params["bank.boxes"])

    def encode(self, image: np.ndarray) -> FeatureGrid:
        return encode(image, self.params, self.cfg)

    def forward_query(self, grid: FeatureGrid, count: int,
                      strategy: str | None = None) -> list[StageOutput]:
        feats, boxes = sample(self.bank(), self.cfg.switch(), count, strategy)
        return forward_cascade(grid, feats, boxes, self.params, self.cfg)

    def forward_two_stage(self, grid: FeatureGrid, count: int,
                          strategy: str | None = None) -> tuple[StageOutput, TwoStageProposals]:
        props = two_stage_propose(grid, self.params, self.cfg)
        rows = sample_scored_rows(props.scored, self.cfg.switch(), count, strategy)
        picked = T.gather_rows(props.boxes_t, rows)
        return two_stage_head(grid, picked, self.params, self.cfg), props

    def final_stage(self, grid: FeatureGrid, count: int,
                    strategy: str | None = None) -> StageOutput:
        if self.cfg.arch == ARCH_QUERY:
            return self.forward_query(grid, count, strategy)[-1]
        return self.forward_two_stage(grid, count, strategy)[0]

    def estimate(self, grid: FeatureGrid) -> CountEstimate:
        return estimate_count(grid, self.params, self.cfg.block_estimator_grad)

    def detections(self, stage: StageOutput) -> list[tuple[int, float, Box]]:
        """One (class, score, box) per proposal: argmax class, sigmoid score."""
        probs = sigmoid_np(stage.class_logits.values)
        classes = probs.argmax(axis=1)
        boxes = stage.boxes_list()
        return [(int(c), float(probs[i, c]), boxes[i]) for i, c in enumerate(classes)]
