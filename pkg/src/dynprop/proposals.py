"""Choosing how many proposals to run, and which ones.

The switch function quantizes a ratio delta in (0,1] to one of theta
proposal budgets {N/theta, 2N/theta, ..., N}.  The dynamic variant derives
delta from an estimated object count: delta(n) = min(n/K, 1), with the
bucket count floored at 1 so an empty-looking image still runs the smallest
configuration.  Sampling strategies pick which rows of the bank run:

  first - rows 0..count (the prefix; what makes one parameter set serve
          every budget)
  last  - the trailing rows
  bin   - split the N rows into N/theta consecutive buckets of theta rows
          and take the first count*theta/N rows of each bucket
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import Box

STRATEGIES = ("first", "last", "bin")


@dataclass(frozen=True)
class SwitchConfig:
    n_total: int
    theta: int
    strategy: str = "first"

    def __post_init__(self):
        if self.theta < 1:
            raise ValueError(f"theta must be >= 1, got {self.theta}")
        if self.n_total < 1 or self.n_total % self.theta != 0:
            raise ValueError(
                f"total proposals {self.n_total} must be a positive multiple of theta={self.theta}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.strategy!r}; use one of {STRATEGIES}")

    @property
    def bucket(self) -> int:
        return self.n_total // self.theta

    def counts(self) -> list[int]:
        return [self.bucket * k for k in range(1, self.theta + 1)]


@dataclass
class ProposalBank:
    """Learnable proposal features [N x d] and boxes [N x 4] (query arch)."""

    features: T.Tensor
    boxes: T.Tensor

    def __post_init__(self):
        if self.features.shape[0] != self.boxes.shape[0]:
            raise ValueError(
                f"bank rows disagree: features {self.features.shape} vs boxes {self.boxes.shape}")
        if self.boxes.shape[1] != 4:
            raise ValueError(f"bank boxes must be [N x 4], got {self.boxes.shape}")

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class ScoredProposals:
    """Dense candidates sorted by descending confidence (two-stage arch)."""

    boxes: tuple[Box, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.boxes) != len(self.scores):
            raise ValueError("boxes and scores length mismatch")
        for a, b in zip(self.scores, self.scores[1:]):
            if b > a:
                raise ValueError("scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.boxes)


def switch_count(cfg: SwitchConfig, delta: float) -> int:
    """N_s = ceil(ceil(delta * theta) * N / theta) for delta in (0, 1]."""
    if not (0.0 < delta <= 1.0):
        raise ValueError(f"delta must be in (0, 1], got {delta}")
    buckets = math.ceil(delta * cfg.theta)
    return math.ceil(buckets * cfg.n_total / cfg.theta)


def dynamic_delta(n_est: float, k_objects: float) -> float:
    """delta(n) = min(n / K, 1); the bucket floor is applied in dynamic_count."""
    if k_objects <= 0:
        raise ValueError(f"K must be positive, got {k_objects}")
    return min(max(float(n_est), 0.0) / k_objects, 1.0)


def dynamic_count(cfg: SwitchConfig, n_est: float, k_objects: float) -> int:
    """N_d = ceil(ceil(theta * delta(n)) * N / theta), floored at one bucket."""
    delta = dynamic_delta(n_est, k_objects)
    buckets = max(1, math.ceil(cfg.theta * delta))
    return math.ceil(buckets * cfg.n_total / cfg.theta)


def _bin_indices(n_total: int, theta: int, count: int) -> list[int]:
    bucket_count = n_total // theta
    if count % bucket_count != 0:
        raise ValueError(
            f"bin sampling needs count divisible by {bucket_count} (N/theta), got {count}")
    per_bucket = count // bucket_count
    return [b * theta + i for b in range(bucket_count) for i in range(per_bucket)]


def sample_indices(cfg: SwitchConfig, count: int, strategy: str | None = None) -> list[int]:
    """Row indices selected by the strategy, in ascending order."""
    strategy = strategy or cfg.strategy
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown sampling strategy {strategy!r}; use one of {STRATEGIES}")
    if count < 1 or count > cfg.n_total:
        raise ValueError(f"count {count} out of range [1, {cfg.n_total}]")
    if strategy == "first":
        return list(range(count))
    if strategy == "last":
        return list(range(cfg.n_total - count, cfg.n_total))
    return _bin_indices(cfg.n_total, cfg.theta, count)


def sample(bank: ProposalBank, cfg: SwitchConfig, count: int,
           strategy: str | None = None) -> tuple[T.Tensor, T.Tensor]:
    """Slice (features, boxes) for the selected rows; differentiable into the bank."""
    idx = sample_indices(cfg, count, strategy)
    if idx == list(range(count)):
        return T.slice_rows(bank.features, 0, count), T.slice_rows(bank.boxes, 0, count)
    if idx == list(range(bank.size - count, bank.size)):
        return (T.slice_rows(bank.features, bank.size - count, bank.size),
                T.slice_rows(bank.boxes, bank.size - count, bank.size))
    return T.gather_rows(bank.features, idx), T.gather_rows(bank.boxes, idx)


def sample_scored(props: ScoredProposals, cfg: SwitchConfig, count: int,
                  strategy: str | None = None) -> list[Box]:
    """Apply a strategy to score-sorted candidates (first = top confidence).

    Asking for more than is available returns everything with a warning.
    """
    if count > len(props):
        warnings.warn(
            f"requested {count} proposals but only {len(props)} available; returning all",
            RuntimeWarning, stacklevel=2)
        return list(props.boxes)
    idx = sample_indices(cfg, count, strategy)
    return [props.boxes[i] for i in idx]


def sample_scored_rows(props: ScoredProposals, cfg: SwitchConfig, count: int,
                       strategy: str | None = None) -> list[int]:
    """Index variant of sample_scored, for callers that track tensor rows."""
    if count > len(props):
        warnings.warn(
            f"requested {count} proposals but only {len(props)} available; returning all",
            RuntimeWarning, stacklevel=2)
        return list(range(len(props)))
    return sample_indices(cfg, count, strategy)


def bank_init(n_total: int, dim: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Initial bank state: full-image boxes, small-normal features."""
    feats = rng.normal((n_total, dim), scale=0.02)
    boxes = np.tile(np.array([0.0, 0.0, 1.0, 1.0]), (n_total, 1))
    return feats, boxes
