"""Data-driven Youla-Kucera controller around a Hankel internal model.

Each sample the controller predicts the internal model's next output from
its rolling window, feeds ``r_hat = e_t + ybar_L`` to the stable Q operator,
and appends the resulting ``(u_L, ybar_L)`` pair to the window. The window
only ever holds the controller's own inputs and model predictions; plant
measurements enter through the tracking error alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .behavior import HankelModel, predict_next_output


class ControllerState:
    """Rolling-window state of the data-driven controller.

    Args:
        model: Hankel internal model of the stable plant.
        q: stable operator exposing ``step(r_hat) -> u`` and ``reset()``.
        u_window, y_window: initial window of length ``model.L`` (zeros if omitted).
        reset_q: put ``q`` in its zero state.
    """

    def __init__(self, model: HankelModel, q, u_window=None, y_window=None, reset_q: bool = True):
        L = model.L
        u_window = np.zeros(L) if u_window is None else np.asarray(u_window, dtype=np.float64).ravel().copy()
        y_window = np.zeros(L) if y_window is None else np.asarray(y_window, dtype=np.float64).ravel().copy()
        if u_window.size != L or y_window.size != L:
            raise ValueError(f"initial window must have length L={L}, got {u_window.size} and {y_window.size}")
        if not (np.all(np.isfinite(u_window)) and np.all(np.isfinite(y_window))):
            raise ValueError("initial window must be finite")
        self.model = model
        self.q = q
        self.u_window = u_window
        self.y_window = y_window
        self.u_prev = float(u_window[-1])
        if reset_q:
            q.reset()

    @property
    def L(self) -> int:
        return self.model.L

    def reset(self, reset_q: bool = True) -> None:
        self.u_window[:] = 0.0
        self.y_window[:] = 0.0
        self.u_prev = 0.0
        if reset_q:
            self.q.reset()

    def predict(self) -> float:
        return predict_next_output(self.model, self.u_window, self.y_window)

    def observe(self, e: float) -> tuple[float, float]:
        """Internal-model prediction ``ybar_L`` and the Q input ``r_hat = e + ybar_L``."""
        if not np.isfinite(e):
            raise ValueError("non-finite tracking error")
        y_next = self.predict()
        return y_next, e + y_next

    def commit(self, u: float, y_next: float) -> None:
        """Shift the window by one, appending the applied input and the model output."""
        if not (np.isfinite(u) and np.isfinite(y_next)):
            raise ValueError("non-finite sample appended to controller window")
        self.u_window[:-1] = self.u_window[1:]
        self.u_window[-1] = u
        self.y_window[:-1] = self.y_window[1:]
        self.y_window[-1] = y_next
        self.u_prev = float(u)


def controller_init(model: HankelModel, q, u_window=None, y_window=None, reset_q: bool = True) -> ControllerState:
    return ControllerState(model, q, u_window, y_window, reset_q)


def control_step(state: ControllerState, e_t: float) -> float:
    """One pass of the loop; returns the Q output (``u`` or ``du_q`` in incremental use)."""
    y_next, r_hat = state.observe(e_t)
    u = float(state.q.step(r_hat))
    state.commit(u, y_next)
    return u


@dataclass(frozen=True)
class Limits:
    lower: float = -np.inf
    upper: float = np.inf


def compose_incremental(du_q: float, du_pid: float, u_prev: float, limits: Limits | tuple = Limits()) -> tuple[float, bool]:
    """``u = clamp(u_prev + du_q + du_pid)``; the flag reports whether clamping happened."""
    lo, hi = (limits.lower, limits.upper) if isinstance(limits, Limits) else limits
    u = u_prev + du_q + du_pid
    clamped = min(max(u, lo), hi)
    return clamped, clamped != u
