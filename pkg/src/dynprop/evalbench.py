"""Detection metrics, count-estimator accuracy, latency measurement, sweeps.

AP follows the COCO recipe at desk scale: detections are pooled across the
split per class, sorted by descending score (ties broken by image then
emission order), greedily matched to at most one ground truth each at the
IoU threshold, and the precision/recall curve is summarized by 101-point
interpolation.  `map` averages thresholds 0.50:0.05:0.95; `ar` is the
class-averaged recall of ground truth at IoU 0.5 using every emitted
detection.

Latency measurement is strictly single-threaded: median and p90 of
per-image forward time per configuration, with a backbone/heads phase
split.  If the monotonic clock is too coarse to resolve one forward, the
measurement batches several forwards and divides.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import Box, iou
from .data import Dataset, Scene
from .model import ARCH_QUERY, Model
from .proposals import dynamic_count

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

EVAL_HEADER = "config,count,ap50,map,ar"
COUNT_HEADER = "mae,acc4"
BENCH_HEADER = "config,count,median_ms,p90_ms,backbone_ms,heads_ms"
SWEEP_HEADER = "count,ap50,median_ms"

Detection = tuple[int, float, Box]  # class, score, box


@dataclass
class ApResult:
    ap_per_threshold: dict[float, float]
    ar50: float

    @property
    def ap50(self) -> float:
        return self.ap_per_threshold[0.5]

    @property
    def map(self) -> float:
        return float(np.mean([self.ap_per_threshold[t] for t in IOU_THRESHOLDS]))


RECALL_POINTS = np.arange(101) / 100.0


def _interpolated_ap(tp_flags: np.ndarray, npos: int) -> float:
    """101-point interpolated AP from per-detection TP flags (already sorted)."""
    if npos == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / npos
    precision = tp / np.maximum(tp + fp, 1)
    ap = 0.0
    for r in RECALL_POINTS:
        mask = recall >= r
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / 101.0


def compute_ap(detections: list[list[Detection]], gts: list[list[tuple[int, Box]]],
               thresholds=IOU_THRESHOLDS) -> ApResult:
    """Class-averaged AP at each threshold, plus recall at IoU 0.5.

    `detections[i]` and `gts[i]` describe image i.  Classes without ground
    truth anywhere in the split are skipped in the averages.
    """
    classes = sorted({c for g in gts for c, _ in g})
    ap_by_thr = {t: [] for t in thresholds}
    recalls = []
    for cls in classes:
        entries = []  # (-score, image, emit order, box)
        for img, dets in enumerate(detections):
            for order, (c, score, box) in enumerate(dets):
                if c == cls:
                    entries.append((-score, img, order, box))
        entries.sort(key=lambda e: (e[0], e[1], e[2]))
        gt_boxes = {img: [b for c, b in g if c == cls] for img, g in enumerate(gts)}
        npos = sum(len(v) for v in gt_boxes.values())
        if npos == 0:
            continue
        ious = [np.array([iou(e[3], gb) for gb in gt_boxes[e[1]]]) for e in entries]
        for thr in thresholds:
            taken: dict[int, set[int]] = {}
            flags = np.zeros(len(entries), dtype=bool)
            for i, e in enumerate(entries):
                img = e[1]
                used = taken.setdefault(img, set())
                best_j, best_iou = -1, thr
                for j, v in enumerate(ious[i]):
                    if j in used:
                        continue
                    if v >= best_iou:
                        best_j, best_iou = j, v
                if best_j >= 0:
                    used.add(best_j)
                    flags[i] = True
            ap_by_thr[thr].append(_interpolated_ap(flags, npos))
            if thr == 0.5:
                recalls.append(float(flags.sum()) / npos)
    ap_per_threshold = {t: float(np.mean(v)) if v else 0.0 for t, v in ap_by_thr.items()}
    ar50 = float(np.mean(recalls)) if recalls else 0.0
    return ApResult(ap_per_threshold=ap_per_threshold, ar50=ar50)


def _resolve_count(model: Model, grid, proposals: str | int, oracle_n: int | None):
    if proposals == "auto":
        if oracle_n is not None:
            return dynamic_count(model.cfg.switch(), float(oracle_n), model.cfg.k_objects)
        est = model.estimate(grid)
        return dynamic_count(model.cfg.switch(), est.n_est, model.cfg.k_objects)
    return int(proposals)


def run_detections(model: Model, dataset: Dataset, proposals: str | int,
                   sampling: str | None = None,
                   oracle_count: bool = False) -> list[list[Detection]]:
    """Forward the whole split at a fixed count, or 'auto' via the estimator."""
    out = []
    with T.no_grad():
        for i in range(len(dataset)):
            grid = model.encode(dataset.image(i))
            oracle_n = dataset.scenes[i].count if oracle_count else None
            count = _resolve_count(model, grid, proposals, oracle_n)
            stage = model.final_stage(grid, count, sampling)
            out.append(model.detections(stage))
    return out


def gts_of(dataset: Dataset) -> list[list[tuple[int, Box]]]:
    return [[(c, b) for c, b in s.objects] for s in dataset.scenes]


def evaluate(model: Model, dataset: Dataset, proposals: str | int,
             sampling: str | None = None, oracle_count: bool = False) -> ApResult:
    dets = run_detections(model, dataset, proposals, sampling, oracle_count)
    return compute_ap(dets, gts_of(dataset))


def count_report(model: Model, dataset: Dataset) -> tuple[float, float]:
    """(mean absolute count error, fraction selecting the same budget as truth)."""
    errors = []
    agree = 0
    sw = model.cfg.switch()
    with T.no_grad():
        for i in range(len(dataset)):
            grid = model.encode(dataset.image(i))
            est = model.estimate(grid)
            n_gt = dataset.scenes[i].count
            errors.append(abs(est.n_est - n_gt))
            if dynamic_count(sw, est.n_est, model.cfg.k_objects) == \
                    dynamic_count(sw, float(n_gt), model.cfg.k_objects):
                agree += 1
    n = max(1, len(dataset))
    return float(np.mean(errors)) if errors else 0.0, agree / n


# -- latency -------------------------------------------------------------------------

def _timer_batch_factor(sample_ms: float) -> int:
    """How many forwards to batch per timing sample so >= 10 clock ticks elapse."""
    res_ns = 1.0
    t0 = time.perf_counter_ns()
    while time.perf_counter_ns() == t0:
        pass
    res_ns = max(1.0, float(time.perf_counter_ns() - t0))
    need_ms = 10.0 * res_ns / 1e6
    if sample_ms >= need_ms:
        return 1
    return int(np.ceil(need_ms / max(sample_ms, 1e-6)))


@dataclass
class BenchRow:
    config: str
    count: int
    median_ms: float
    p90_ms: float
    backbone_ms: float
    heads_ms: float

    def csv(self) -> str:
        return (f"{self.config},{self.count},{self.median_ms:.4f},{self.p90_ms:.4f},"
                f"{self.backbone_ms:.4f},{self.heads_ms:.4f}")


def _timed_forward(model: Model, image: np.ndarray, proposals: str | int,
                   sampling: str | None) -> tuple[float, float, int]:
    """(backbone_ms, heads_ms, count) for one forward."""
    t0 = time.perf_counter_ns()
    grid = model.encode(image)
    t1 = time.perf_counter_ns()
    count = _resolve_count(model, grid, proposals, None)
    model.final_stage(grid, count, sampling)
    t2 = time.perf_counter_ns()
    return (t1 - t0) / 1e6, (t2 - t1) / 1e6, count


def bench_latency(model: Model, dataset: Dataset, configs: list[tuple[str, str | int]],
                  repeats: int = 3, warmup: int = 5,
                  sampling: str | None = None) -> list[BenchRow]:
    """Per config: median and p90 per-image forward time plus the phase split.

    `configs` holds (label, proposals) pairs where proposals is an int or
    'auto'.  Warmup forwards are excluded.  Single-threaded by design.
    """
    rows = []
    n = len(dataset)
    if n == 0:
        raise ValueError("empty benchmark split")
    with T.no_grad():
        for label, proposals in configs:
            bfac = 1
            for w in range(min(warmup, n)):
                bb, hh, _ = _timed_forward(model, dataset.image(w % n), proposals, sampling)
            bfac = _timer_batch_factor(bb + hh)
            totals, backbones, heads, counts = [], [], [], []
            for r in range(repeats):
                for i in range(n):
                    if bfac == 1:
                        bb, hh, cnt = _timed_forward(model, dataset.image(i), proposals, sampling)
                    else:
                        bbs = hhs = 0.0
                        for _ in range(bfac):
                            b1, h1, cnt = _timed_forward(model, dataset.image(i), proposals,
                                                         sampling)
                            bbs += b1
                            hhs += h1
                        bb, hh = bbs / bfac, hhs / bfac
                    totals.append(bb + hh)
                    backbones.append(bb)
                    heads.append(hh)
                    counts.append(cnt)
            rows.append(BenchRow(
                config=label,
                count=int(round(float(np.mean(counts)))),
                median_ms=float(np.median(totals)),
                p90_ms=float(np.percentile(totals, 90)),
                backbone_ms=float(np.mean(backbones)),
                heads_ms=float(np.mean(heads))))
    return rows


def sweep(model: Model, dataset: Dataset, start: int, stop: int, step: int = 1,
          repeats: int = 1) -> list[tuple[int, float, float]]:
    """(count, ap50, median_ms) for every count in [start, stop] inclusive."""
    if start > stop:
        raise ValueError(f"sweep range reversed: {start} > {stop}")
    if model.cfg.arch != ARCH_QUERY:
        raise ValueError("sweep expects a query-arch (switchable-trained) model")
    out = []
    for count in range(start, stop + 1, step):
        res = evaluate(model, dataset, count, sampling="first")
        bench = bench_latency(model, dataset, [("sweep", count)], repeats=repeats,
                              warmup=3, sampling="first")
        out.append((count, res.ap50, bench[0].median_ms))
    return out


def write_csv(path: str, header: str, rows: list[str]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")
