"""Training loops for the four regimes.

individual  one fixed proposal count (the bank simply has that size)
switchable  per step, draw delta ~ U(0,1], run the sliced model; for the
            query arch with distillation on, also run the full-width model
            as the in-step teacher (task loss on both + feature distillation)
dynamic     per image, estimate the object count, pick the budget from it,
            and add the count-regression term; the discrete budget selection
            itself carries no gradient

The naive-selection baseline needs no loop of its own: it is an individual
full-width model evaluated with fewer proposals.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import save_model
from .data import Dataset, Scene, load_dataset
from .losses import (LossBreakdown, LossTerms, count_loss, distill_loss, rpn_loss,
                     set_loss)
from .model import (ARCH_QUERY, ARCH_TWO_STAGE, FeatureGrid, Model, ModelConfig)
from .proposals import dynamic_count, switch_count
from .optim import Adam
from .rng import Xoshiro256pp


@dataclass
class TrainConfig:
    mode: str = "individual"          # individual | switchable | dynamic
    arch: str = ARCH_QUERY
    n_total: int = 40
    theta: int = 4
    k_objects: float = 8.0
    stages: int = 3
    dim: int = 64
    steps: int = 3000
    batch: int = 8
    lr: float = 1e-3
    seed: int = 1
    distill: bool = False
    teacher_task: bool = True
    strategy: str = "first"
    oracle_count: bool = False        # dynamic mode: use n_gt instead of the estimate
    log_every: int = 50
    ckpt_every: int = 1000

    def __post_init__(self):
        if self.mode not in ("individual", "switchable", "dynamic"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.arch not in (ARCH_QUERY, ARCH_TWO_STAGE):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.distill and self.arch != ARCH_QUERY:
            raise ValueError("distillation applies to the query arch only")
        if self.n_total % self.theta != 0:
            raise ValueError(
                f"proposals {self.n_total} must be divisible by theta {self.theta}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(arch=self.arch, n_total=self.n_total, theta=self.theta,
                           k_objects=self.k_objects, dim=self.dim, stages=self.stages,
                           strategy=self.strategy)


def _forward_terms(model: Model, grid: FeatureGrid, scene: Scene, count: int,
                   tc: TrainConfig) -> tuple[LossTerms, list]:
    """Task terms for one image at one proposal count, for either arch."""
    if tc.arch == ARCH_QUERY:
        stages = model.forward_query(grid, count, tc.strategy)
        return set_loss(stages, scene), stages
    head_out, props = model.forward_two_stage(grid, count, tc.strategy)
    terms = set_loss([head_out], scene)
    r_cls, r_l1, r_giou = rpn_loss(props, scene)
    terms.cls = T.add(terms.cls, r_cls)
    terms.l1 = T.add(terms.l1, r_l1)
    terms.giou = T.add(terms.giou, r_giou)
    return terms, [head_out]


def _image_loss(model: Model, scene: Scene, image: np.ndarray, count: int,
                tc: TrainConfig, with_teacher: bool,
                est_target: int | None = None,
                use_oracle_count: bool = False) -> tuple[T.Tensor, LossBreakdown, int]:
    """Build the full per-image loss graph; returns (scalar, numbers, count used)."""
    grid = model.encode(image)

    est = None
    if est_target is not None:
        est = model.estimate(grid)
        n_for_count = float(est_target) if use_oracle_count else est.n_est
        count = dynamic_count(model.cfg.switch(), n_for_count, tc.k_objects)

    terms, student_stages = _forward_terms(model, grid, scene, count, tc)
    if est is not None:
        terms.est = count_loss(est, est_target)

    if with_teacher:
        teacher_terms, teacher_stages = _forward_terms(model, grid, scene, tc.n_total, tc)
        dst = distill_loss(teacher_stages, student_stages, count, model.cfg.switch(),
                           tc.strategy)
        if tc.teacher_task:
            terms.cls = T.add(terms.cls, teacher_terms.cls)
            terms.l1 = T.add(terms.l1, teacher_terms.l1)
            terms.giou = T.add(terms.giou, teacher_terms.giou)
        terms.dst = dst

    return terms.combine(), terms.breakdown(), count


def run_training(tc: TrainConfig, data_dir: str, out_dir: str,
                 progress: bool = False) -> str:
    """Train per the config; returns the checkpoint path.

    Writes `config.json` (the fully resolved run config) before any work,
    `train_log.csv` during, and `ckpt.bin` at every checkpoint interval and
    at the end.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump({"command": "train", "data": data_dir, "out": out_dir, **asdict(tc)},
                  fh, sort_keys=True, indent=2)
        fh.write("\n")

    dataset = load_dataset(data_dir, "train")
    if len(dataset) == 0:
        raise ValueError("empty training split")
    model = Model.build(tc.model_config(), tc.seed)
    opt = Adam(lr=tc.lr)
    rng = Xoshiro256pp(tc.seed ^ 0x7E57A11)

    ckpt_path = os.path.join(out_dir, "ckpt.bin")
    log_path = os.path.join(out_dir, "train_log.csv")
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("step,mode,delta_or_nd,cls,l1,giou,est,dst,total\n")
        window = LossBreakdown()
        window_n = 0
        for step in range(1, tc.steps + 1):
            if tc.mode == "switchable":
                delta = rng.uniform_open()
                count = switch_count(model.cfg.switch(), delta)
                schedule_field = f"{delta:.4f}"
            else:
                delta = None
                count = tc.n_total
                schedule_field = str(count)

            teacher = (tc.mode in ("switchable", "dynamic") and tc.distill
                       and tc.arch == ARCH_QUERY)
            batch_break = LossBreakdown()
            nd_seen = []
            for _ in range(tc.batch):
                idx = rng.randint(len(dataset))
                scene = dataset.scenes[idx]
                image = dataset.image(idx)
                est_target = scene.count if tc.mode == "dynamic" else None
                loss, breakdown, used = _image_loss(
                    model, scene, image, count, tc, with_teacher=teacher,
                    est_target=est_target, use_oracle_count=tc.oracle_count)
                T.backward(T.scale(loss, 1.0 / tc.batch))
                batch_break.add(breakdown.scaled(1.0 / tc.batch))
                nd_seen.append(used)
            opt.step(model.params)

            if tc.mode == "dynamic":
                schedule_field = f"{float(np.mean(nd_seen)):.1f}"
            window.add(batch_break)
            window_n += 1
            if step % tc.log_every == 0 or step == tc.steps:
                avg = window.scaled(1.0 / max(1, window_n))
                log.write(f"{step},{tc.mode},{schedule_field},{avg.csv_fields()}\n")
                window = LossBreakdown()
                window_n = 0
                if progress:
                    print(f"step {step}/{tc.steps} total={avg.total:.4f}", flush=True)
            if step % tc.ckpt_every == 0 or step == tc.steps:
                save_model(ckpt_path, model)
    return ckpt_path
