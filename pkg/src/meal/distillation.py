"""Similarity losses between aligned teacher and student outputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from meal import autodiff as ad
from meal.network import ForwardResult

METRICS = ("l1", "l2", "kl", "ce")

# Per-block coefficients for the block counts the method was tuned on.
DEFAULT_BLOCK_WEIGHTS = {
    1: (1.0,),
    3: (0.01, 0.05, 1.0),
    5: (0.001, 0.01, 0.05, 0.1, 1.0),
}


def default_block_weights(num_blocks: int) -> tuple[float, ...]:
    if num_blocks in DEFAULT_BLOCK_WEIGHTS:
        return DEFAULT_BLOCK_WEIGHTS[num_blocks]
    five = DEFAULT_BLOCK_WEIGHTS[5]
    if num_blocks < 5:
        return five[-num_blocks:]
    return (five[0],) * (num_blocks - 5) + five


@dataclass(frozen=True)
class AlignmentConfig:
    """Which blocks are compared, how they are pooled and how they are weighted.

    Block indices run over the network's blocks; the last index always stands
    for the probability output rather than the last block's activation.
    """

    block_set: tuple[int, ...]
    pool_mode: str = "avg"
    block_weights: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "block_set", tuple(int(i) for i in self.block_set))
        object.__setattr__(self, "block_weights", tuple(float(w) for w in self.block_weights))
        if not self.block_set:
            raise ValueError("block_set must not be empty")
        if len(self.block_weights) != len(self.block_set):
            raise ValueError(f"{len(self.block_weights)} weights for {len(self.block_set)} blocks")
        if any(w <= 0 for w in self.block_weights):
            raise ValueError("block weights must be positive")
        if list(self.block_set) != sorted(set(self.block_set)):
            raise ValueError("block_set must be strictly increasing")
        if self.pool_mode not in ("avg", "max"):
            raise ValueError(f"unknown pool mode {self.pool_mode!r}")

    @classmethod
    def for_blocks(cls, num_blocks: int, intermediate: bool = True, pool_mode: str = "avg",
                   weights: Optional[Sequence[float]] = None) -> "AlignmentConfig":
        weights = tuple(weights) if weights is not None else default_block_weights(num_blocks)
        if intermediate:
            return cls(tuple(range(num_blocks)), pool_mode, weights)
        return cls((num_blocks - 1,), pool_mode, (weights[-1],))


def _check_distribution(name, node, tol=1e-6):
    d = node.data
    if np.any(d < -tol) or np.any(np.abs(d.sum(axis=1) - 1.0) > tol):
        raise ValueError(f"{name} rows are not probability distributions")


def sim_distance(metric: str, teacher_out: ad.Node, student_out: ad.Node) -> ad.Node:
    """Row-averaged distance between two [n x c] tensors.

    l1 and l2 sum absolute / squared differences over classes. kl is the true
    KL(teacher || student) with 0 log 0 = 0, and ce is the teacher-weighted
    negative log of the student, so ``ce - kl`` is the teacher entropy.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if teacher_out.shape != student_out.shape or teacher_out.data.ndim != 2:
        raise ad.ShapeError(f"cannot compare {teacher_out.shape} with {student_out.shape}")
    n = teacher_out.shape[0]
    if metric == "l1":
        total = ad.sum_(ad.abs_(ad.sub(teacher_out, student_out)))
    elif metric == "l2":
        total = ad.sum_(ad.square(ad.sub(teacher_out, student_out)))
    else:
        _check_distribution("teacher", teacher_out)
        _check_distribution("student", student_out)
        log_s = ad.log(student_out, floor=ad.LOG_FLOOR)
        if metric == "ce":
            total = ad.negate(ad.sum_(ad.mul(teacher_out, log_s)))
        else:
            # t * log(max(t, floor)) is exactly 0 where t == 0
            log_t = ad.log(teacher_out, floor=ad.LOG_FLOOR)
            total = ad.sum_(ad.mul(teacher_out, ad.sub(log_t, log_s)))
    return ad.scale(total, 1.0 / n)


def align(block: ad.Node, target_len: int, pool_mode: str = "avg") -> ad.Node:
    return ad.adaptive_pool(block, target_len, pool_mode)


def aligned_block_loss(metric: str, teacher_block: ad.Node, student_block: ad.Node,
                       pool_mode: str, target_len: int) -> ad.Node:
    """Pool both blocks to ``target_len`` then compare them.

    For kl/ce the pooled features are turned into distributions with a row
    softmax first; l1/l2 compare the raw pooled activations.
    """
    t = align(teacher_block, target_len, pool_mode)
    s = align(student_block, target_len, pool_mode)
    if metric in ("kl", "ce"):
        t, s = ad.softmax(t), ad.softmax(s)
    return sim_distance(metric, t, s)


def aligned_pair(teacher: ForwardResult, student: ForwardResult, index: int,
                 pool_mode: str) -> tuple[ad.Node, ad.Node]:
    """Teacher/student features for block ``index``, pooled to the student width.

    The final block is represented by the probability rows.
    """
    last = len(student.block_outputs) - 1
    if index == last:
        return teacher.probabilities, student.probabilities
    s = student.block_outputs[index]
    width = s.shape[1]
    return align(teacher.block_outputs[index], width, pool_mode), align(s, width, pool_mode)


def block_sim_losses(metric: str, teacher: ForwardResult, student: ForwardResult,
                     cfg: AlignmentConfig) -> list[ad.Node]:
    """Unweighted per-block similarity losses, one per entry of ``cfg.block_set``."""
    k = len(student.block_outputs)
    if len(teacher.block_outputs) != k:
        raise ValueError(f"teacher has {len(teacher.block_outputs)} blocks, student has {k}")
    if cfg.block_set[-1] != k - 1 or cfg.block_set[0] < 0:
        raise ValueError(f"block_set {cfg.block_set} must end at the final block {k - 1}")
    losses = []
    for j in cfg.block_set:
        t, s = aligned_pair(teacher, student, j, cfg.pool_mode)
        if j != k - 1 and metric in ("kl", "ce"):
            t, s = ad.softmax(t), ad.softmax(s)
        losses.append(sim_distance(metric, t, s))
    return losses


def weighted_sum(nodes: Sequence[ad.Node], weights: Sequence[float]) -> ad.Node:
    total = None
    for node, w in zip(nodes, weights):
        term = ad.scale(node, w)
        total = term if total is None else ad.add(total, term)
    return total


def total_sim_loss(metric: str, teacher: ForwardResult, student: ForwardResult,
                   cfg: AlignmentConfig) -> ad.Node:
    return weighted_sum(block_sim_losses(metric, teacher, student, cfg), cfg.block_weights)
