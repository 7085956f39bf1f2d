"""Training observations written as linear residual specifications.

A sample states that ``sum_k c_k f(x_k) - b_tilde`` should have zero mean
given the instrument point ``x2``.  Single-point samples (``c = (1,)``) cover
IV regression; two-point samples with ``c = (+1, -1)`` cover first-differenced
panels.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class Sample:
    eval_points: tuple  # ((c_1, x_1), (c_2, x_2), ...)
    x2: np.ndarray
    b_tilde: float
    ridge_index: int = 0

    def __post_init__(self):
        if not self.eval_points:
            raise ConfigError("a sample needs at least one evaluation point")
        if not 0 <= self.ridge_index < len(self.eval_points):
            raise ConfigError(f"ridge_index {self.ridge_index} out of range")
        d = np.shape(self.x2)
        for _, x in self.eval_points:
            if np.shape(x) != d:
                raise DimensionError("all sample points must have the same length")

    @property
    def dim(self) -> int:
        return len(self.x2)


class SampleBatch(Sequence):
    """Struct-of-arrays container for many samples with a common point count.

    Samples with fewer evaluation points are padded with zero coefficients,
    which leaves residuals and gradients unchanged.
    """

    def __init__(self, coefs, points, x2, b_tilde, ridge_index=None, n_points=None):
        self.coefs = np.ascontiguousarray(coefs, dtype=np.float64)
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.x2 = np.ascontiguousarray(x2, dtype=np.float64)
        self.b_tilde = np.ascontiguousarray(b_tilde, dtype=np.float64)
        n, P = self.coefs.shape
        if self.points.shape[:2] != (n, P) or self.x2.shape[0] != n or self.b_tilde.shape != (n,):
            raise DimensionError("inconsistent sample batch shapes")
        if self.points.shape[2] != self.x2.shape[1]:
            raise DimensionError("evaluation and instrument points differ in length")
        if ridge_index is None:
            ridge_index = np.zeros(n, dtype=np.int64)
        self.ridge_index = np.ascontiguousarray(ridge_index, dtype=np.int64)
        self.n_points = (
            np.full(n, P, dtype=np.int64) if n_points is None else np.asarray(n_points, dtype=np.int64)
        )
        if n and (self.ridge_index.min() < 0 or np.any(self.ridge_index >= self.n_points)):
            raise ConfigError("ridge_index out of range")

    @property
    def dim(self) -> int:
        return self.x2.shape[1]

    @property
    def max_points(self) -> int:
        return self.coefs.shape[1]

    def __len__(self) -> int:
        return self.b_tilde.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, slice) or isinstance(idx, np.ndarray):
            return SampleBatch(
                self.coefs[idx],
                self.points[idx],
                self.x2[idx],
                self.b_tilde[idx],
                self.ridge_index[idx],
                self.n_points[idx],
            )
        i = int(idx)
        k = int(self.n_points[i])
        pts = tuple((float(self.coefs[i, j]), self.points[i, j].copy()) for j in range(k))
        return Sample(pts, self.x2[i].copy(), float(self.b_tilde[i]), int(self.ridge_index[i]))

    @classmethod
    def from_samples(cls, samples: Iterable[Sample]) -> "SampleBatch":
        samples = list(samples)
        if not samples:
            raise ConfigError("cannot build a batch from zero samples")
        d = samples[0].dim
        P = max(len(s.eval_points) for s in samples)
        n = len(samples)
        coefs = np.zeros((n, P))
        points = np.zeros((n, P, d))
        x2 = np.empty((n, d))
        bt = np.empty(n)
        ridge = np.empty(n, dtype=np.int64)
        npts = np.empty(n, dtype=np.int64)
        for i, s in enumerate(samples):
            if s.dim != d:
                raise DimensionError("samples of different dimensions in one batch")
            for j, (c, x) in enumerate(s.eval_points):
                coefs[i, j] = c
                points[i, j] = x
            x2[i] = s.x2
            bt[i] = s.b_tilde
            ridge[i] = s.ridge_index
            npts[i] = len(s.eval_points)
        return cls(coefs, points, x2, bt, ridge, npts)

    def max_norm(self) -> float:
        """Largest Euclidean norm over all evaluation and instrument points."""
        a = np.linalg.norm(self.points, axis=2)
        mask = np.arange(self.max_points)[None, :] < self.n_points[:, None]
        b = np.linalg.norm(self.x2, axis=1)
        return float(max(a[mask].max(initial=0.0), b.max(initial=0.0)))

    def csv_header(self) -> list[str]:
        cols = ["n_points"]
        for k in range(1, self.max_points + 1):
            cols.append(f"c_{k}")
            cols += [f"x_{k}_{j}" for j in range(1, self.dim + 1)]
        cols += [f"x2_{j}" for j in range(1, self.dim + 1)]
        cols.append("b_tilde")
        return cols

    def to_csv(self, fh=None, comment: str | None = None) -> str | None:
        """Write one row per sample; floats use 17 significant digits."""
        out = io.StringIO() if fh is None else fh
        if comment:
            out.write(f"# {comment}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(self.csv_header())
        fmt = lambda v: f"{v:.17g}"
        for i in range(len(self)):
            row = [str(int(self.n_points[i]))]
            for k in range(self.max_points):
                row.append(fmt(self.coefs[i, k]))
                row += [fmt(v) for v in self.points[i, k]]
            row += [fmt(v) for v in self.x2[i]]
            row.append(fmt(self.b_tilde[i]))
            w.writerow(row)
        return out.getvalue() if fh is None else None

    @classmethod
    def from_csv(cls, fh) -> "SampleBatch":
        lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.reader(lines)
        header = next(reader)
        d = sum(1 for h in header if h.startswith("x2_"))
        P = sum(1 for h in header if h.startswith("c_"))
        rows = np.array([[float(v) for v in r] for r in reader if r])
        if rows.size == 0:
            raise ConfigError("sample file has no rows")
        npts = rows[:, 0].astype(np.int64)
        block = rows[:, 1 : 1 + P * (d + 1)].reshape(len(rows), P, d + 1)
        x2 = rows[:, 1 + P * (d + 1) : 1 + P * (d + 1) + d]
        return cls(block[:, :, 0], block[:, :, 1:], x2, rows[:, -1], None, npts)


def concat(batches: Sequence[SampleBatch]) -> SampleBatch:
    P = max(b.max_points for b in batches)

    def pad(a, P_):
        if a.shape[1] == P_:
            return a
        width = [(0, 0), (0, P_ - a.shape[1])] + [(0, 0)] * (a.ndim - 2)
        return np.pad(a, width)

    return SampleBatch(
        np.concatenate([pad(b.coefs, P) for b in batches]),
        np.concatenate([pad(b.points, P) for b in batches]),
        np.concatenate([b.x2 for b in batches]),
        np.concatenate([b.b_tilde for b in batches]),
        np.concatenate([b.ridge_index for b in batches]),
        np.concatenate([b.n_points for b in batches]),
    )
