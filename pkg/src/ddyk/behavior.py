"""Hankel-matrix internal model built from a single input/output record.

For a record ``{u_t, y_t}`` of length ``N`` and window length ``L`` the model
keeps ``H_L(u)`` and ``H_L(y)`` over samples ``0..N-2`` and the shifted
``H'_L(y)`` over ``1..N-1`` (``N - L`` columns each). A window
``(ubar, ybar)`` is expressed as ``[H_L(u); H_L(y)] alpha`` and its next
output is read from ``H'_L(y) alpha``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RANK_TOL = 1e-8


class PersistentExcitationError(ValueError):
    """Raised when data is not persistently exciting of the required order."""


@dataclass(frozen=True)
class Trajectory:
    """Paired input/output samples with a fixed sample period (seconds)."""

    u: np.ndarray
    y: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64).ravel()
        y = np.asarray(self.y, dtype=np.float64).ravel()
        if u.shape != y.shape:
            raise ValueError(f"input and output lengths differ: {u.size} vs {y.size}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
            raise ValueError("trajectory samples must be finite")
        if not self.dt > 0:
            raise ValueError("sample period must be positive")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.u.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "u", "y"])
            for k, (uk, yk) in enumerate(zip(self.u, self.y)):
                w.writerow([repr(k * self.dt), repr(float(uk)), repr(float(yk))])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["t", "u", "y"]:
                raise ValueError(f"{path}: expected header t,u,y, got {header}")
            rows = np.array([[float(x) for x in row] for row in reader if row], dtype=np.float64)
        if rows.shape[0] < 2:
            raise ValueError(f"{path}: need at least two samples")
        steps = np.diff(rows[:, 0])
        dt = float(steps[0])
        if dt <= 0 or not np.allclose(steps, dt, rtol=1e-9, atol=1e-12):
            raise ValueError(f"{path}: time column is not uniformly spaced")
        return cls(rows[:, 1], rows[:, 2], dt)


def build_hankel(z, L: int) -> np.ndarray:
    """Hankel matrix with ``L`` rows; entry ``(i, j)`` is ``z[i + j]``."""
    z = np.asarray(z, dtype=np.float64).ravel()
    L = int(L)
    if L < 1:
        raise ValueError("L must be a positive integer")
    if L > z.size:
        raise ValueError(f"order L={L} exceeds sequence length {z.size}")
    return np.lib.stride_tricks.sliding_window_view(z, z.size - L + 1).copy()


def excitation_rank(z, L: int) -> tuple[int, np.ndarray]:
    """Numerical rank of ``H_L(z)`` and its singular values."""
    s = np.linalg.svd(build_hankel(z, L), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0, s
    return int(np.sum(s > RANK_TOL * s[0])), s


def is_persistently_exciting(z, L: int) -> bool:
    """True when ``H_L(z)`` has full row rank ``L`` (scalar signals)."""
    rank, _ = excitation_rank(z, L)
    return rank == int(L)


class HankelModel:
    """Data-driven model of a strictly proper SISO system.

    Args:
        trajectory: collected record; ``len(trajectory) = N``.
        L: window length, also used as the upper bound on the system order.
        ridge: Tikhonov weight; 0 gives the minimum-norm least-squares solve.
        order_bound: upper bound ``n`` on the system order (defaults to ``L``);
            the input must be persistently exciting of order ``L + n + 1``.
    """

    def __init__(self, trajectory: Trajectory, L: int, ridge: float = 0.0, order_bound: int | None = None):
        L = int(L)
        n = L if order_bound is None else int(order_bound)
        N = len(trajectory)
        if ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if N - L < 1:
            raise ValueError(f"record of length {N} too short for L={L}")
        required = L + n + 1
        if N < required:
            raise PersistentExcitationError(f"record of length {N} cannot be exciting of order {required}")
        rank, s = excitation_rank(trajectory.u, required)
        if rank != required:
            raise PersistentExcitationError(
                f"input is not persistently exciting of order {required}: rank {rank} "
                f"(smallest singular value ratio {s[-1] / s[0] if s.size and s[0] else 0.0:.3e})"
            )
        self.trajectory = trajectory
        self.L = L
        self.order_bound = n
        self.ridge = float(ridge)
        self.Hu = build_hankel(trajectory.u[:-1], L)
        self.Hy = build_hankel(trajectory.y[:-1], L)
        self.Hy_next = build_hankel(trajectory.y[1:], L)
        self.stacked = np.vstack([self.Hu, self.Hy])

        # alpha = V diag(s / (s^2 + ridge)) U^T b, truncated at the numerical rank
        U, sv, Vt = np.linalg.svd(self.stacked, full_matrices=False)
        keep = sv > RANK_TOL * sv[0]
        inv = np.zeros_like(sv)
        inv[keep] = sv[keep] / (sv[keep] ** 2 + self.ridge)
        self.rank = int(keep.sum())
        self._solve = (Vt.T * inv) @ U.T
        self._predictor = self.Hy_next[-1] @ self._solve
        for arr in (self.Hu, self.Hy, self.Hy_next, self.stacked, self._solve, self._predictor):
            arr.setflags(write=False)

    @property
    def n_columns(self) -> int:
        return self.Hu.shape[1]

    @property
    def predictor(self) -> np.ndarray:
        """Row vector ``w`` with ``ybar_L = w @ [ubar; ybar]``."""
        return self._predictor

    def _rhs(self, u_bar, y_bar) -> np.ndarray:
        u_bar = np.asarray(u_bar, dtype=np.float64).ravel()
        y_bar = np.asarray(y_bar, dtype=np.float64).ravel()
        if u_bar.size != self.L or y_bar.size != self.L:
            raise ValueError(f"window must hold {self.L} inputs and {self.L} outputs")
        b = np.concatenate([u_bar, y_bar])
        if not np.all(np.isfinite(b)):
            raise ValueError("window contains non-finite samples")
        return b


def solve_alpha(model: HankelModel, u_bar, y_bar) -> tuple[np.ndarray, float]:
    """Minimum-norm (or ridge) coefficients for a window, and the fit residual."""
    b = model._rhs(u_bar, y_bar)
    alpha = model._solve @ b
    residual = float(np.linalg.norm(model.stacked @ alpha - b))
    return alpha, residual


def predict_next_output(model: HankelModel, u_bar, y_bar) -> float:
    """Next output after the window, read from the shifted Hankel matrix."""
    return float(model._predictor @ model._rhs(u_bar, y_bar))
