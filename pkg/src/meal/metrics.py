"""Per-iteration training telemetry and its CSV sink."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable


@dataclass
class MetricsRecord:
    iteration: int
    teacher_index: int
    total_loss: float
    sim_loss_per_block: list[float]
    gan_loss_per_block: list[float]
    train_error: float
    test_error: float = math.nan
    # effective coefficients, kept so the objective can be re-derived from a row
    sim_weights: list[float] = field(default_factory=list, repr=False)
    gan_weights: list[float] = field(default_factory=list, repr=False)

    def recomputed_total(self, alpha: float, beta: float) -> float:
        sim = sum(w * v for w, v in zip(self.sim_weights, self.sim_loss_per_block))
        gan = sum(w * v for w, v in zip(self.gan_weights, self.gan_loss_per_block))
        return alpha * sim + beta * gan


def header(num_blocks: int) -> list[str]:
    return (["iteration", "teacher_index", "total_loss"]
            + [f"sim_{j}" for j in range(num_blocks)]
            + [f"gan_{j}" for j in range(num_blocks)]
            + ["train_error", "test_error"])


def _fmt(v: float) -> str:
    return repr(float(v))


class MetricsSink:
    """Append-only CSV writer; rows are buffered and flushed on :meth:`flush`."""

    def __init__(self, path, num_blocks: int):
        self.path = Path(path)
        self.num_blocks = num_blocks
        self._pending: list[list[str]] = []
        try:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(header(num_blocks))
        except OSError as exc:
            raise OSError(f"cannot write metrics file {self.path}: {exc}") from exc

    def write(self, record: MetricsRecord) -> None:
        if len(record.sim_loss_per_block) != self.num_blocks:
            raise ValueError(f"record has {len(record.sim_loss_per_block)} blocks, "
                             f"sink expects {self.num_blocks}")
        self._pending.append([str(record.iteration), str(record.teacher_index),
                              _fmt(record.total_loss)]
                             + [_fmt(v) for v in record.sim_loss_per_block]
                             + [_fmt(v) for v in record.gan_loss_per_block]
                             + [_fmt(record.train_error), _fmt(record.test_error)])

    def write_all(self, records: Iterable[MetricsRecord]) -> None:
        for r in records:
            self.write(r)
        self.flush()

    def flush(self) -> None:
        if not self._pending:
            return
        try:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerows(self._pending)
        except OSError as exc:
            raise OSError(f"cannot write metrics file {self.path}: {exc}") from exc
        self._pending.clear()


def read_metrics(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
