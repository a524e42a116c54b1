"""Two-tank level-control simulator with a cascaded PI(D) loop.

States: pump speed ``p`` (%), inflow and outflow (m^3/s), level (m) and the
filtered level measurement ``m`` (m). Every control period the level
controller produces an increment on the flow setpoint, the Q operator adds
its own increment, and the flow controller converts the setpoint error into
a pump-speed setpoint that is held while the ODEs are integrated with RK4.

The flow setpoint ``u`` is expressed in L/s (``flow_unit`` m^3/s per unit).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .behavior import Trajectory, excitation_rank, PersistentExcitationError
from .youla import compose_incremental

REWARD_ERROR_WEIGHT = 0.1
REWARD_ACTION_WEIGHT = 0.01


@dataclass(frozen=True)
class TankParams:
    tau_p: float = 2.0
    tau_in: float = 5.0
    tau_out: float = 10.0
    tau_m: float = 1.0
    r_tank: float = 0.25
    r_pipe: float = 0.02
    f_c: float = 0.6
    f_max: float = 5e-3
    g: float = 9.81
    dt: float = 0.5
    noise_var: float = 0.015
    substeps: int = 5
    flow_unit: float = 1e-3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "f_c":
                if value < 0:
                    raise ValueError("f_c must be nonnegative")
            elif name == "noise_var":
                if value < 0:
                    raise ValueError("noise_var must be nonnegative")
            elif not value > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def tank_area(self) -> float:
        return np.pi * self.r_tank**2

    @property
    def drain_coefficient(self) -> float:
        return np.pi * self.r_pipe**2 * self.f_c

    @property
    def u_max(self) -> float:
        return self.f_max / self.flow_unit

    def outflow_at(self, level: float) -> float:
        return self.drain_coefficient * math.sqrt(2.0 * self.g * max(level, 0.0))


@dataclass
class TankState:
    p: float
    f_in: float
    f_out: float
    level: float
    m: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p, self.f_in, self.f_out, self.level, self.m])

    @classmethod
    def from_array(cls, x) -> "TankState":
        return cls(*(float(v) for v in x))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_array())))


@dataclass
class PIDController:
    """Discrete PID with output clamping and integral hold.

    ``step`` is the positional form; ``increment`` is the velocity form used
    for incremental control (no accumulator, the caller integrates).
    """

    kp: float
    ki: float
    kd: float = 0.0
    lower: float = -np.inf
    upper: float = np.inf
    integral: float = 0.0
    prev_error: float | None = None
    prev_prev_error: float | None = None

    def reset(self, integral: float = 0.0) -> None:
        self.integral = integral
        self.prev_error = None
        self.prev_prev_error = None

    def step(self, error: float, dt: float) -> float:
        prev = error if self.prev_error is None else self.prev_error
        derivative = (error - prev) / dt
        candidate = self.integral + self.ki * error * dt
        out = self.kp * error + candidate + self.kd * derivative
        clamped = min(max(out, self.lower), self.upper)
        # integral hold: only accept the new integral if it does not push further into saturation
        if clamped == out or (out > self.upper and error < 0) or (out < self.lower and error > 0):
            self.integral = candidate
        self.prev_prev_error, self.prev_error = self.prev_error, error
        return clamped

    def increment(self, error: float, dt: float) -> float:
        e1 = error if self.prev_error is None else self.prev_error
        e2 = e1 if self.prev_prev_error is None else self.prev_prev_error
        du = self.kp * (error - e1) + self.ki * dt * error + self.kd * (error - 2.0 * e1 + e2) / dt
        self.prev_prev_error, self.prev_error = e1, error
        return du


@dataclass(frozen=True)
class EnvConfig:
    """Tank constants, controller gains and the episode schedule."""

    tank: TankParams = field(default_factory=TankParams)
    level_kp: float = 1.0
    level_ki: float = 0.03
    level_kd: float = 0.0
    flow_kp: float = 10.0
    flow_ki: float = 10.0
    initial_level: float = 0.5
    setpoints: tuple = (0.6, 0.4)
    episode_steps: int = 300
    noise: bool = True

    def setpoint(self, t: int) -> float:
        """Piecewise-constant schedule: equal-length blocks, one per setpoint."""
        block = max(self.episode_steps // len(self.setpoints), 1)
        return float(self.setpoints[min(t // block, len(self.setpoints) - 1)])


def reward(l_sp: float, m: float, du_q: float) -> float:
    return -REWARD_ERROR_WEIGHT * abs(l_sp - m) - REWARD_ACTION_WEIGHT * du_q * du_q


def derivatives(params: TankParams, x, p_sp: float) -> np.ndarray:
    return np.array(_rates(params, tuple(float(v) for v in x), p_sp))


def _rates(prm: TankParams, x: tuple, p_sp: float) -> tuple:
    p, f_in, f_out, level, m = x
    target_out = prm.drain_coefficient * math.sqrt(2.0 * prm.g * level) if level > 0.0 else 0.0
    return (
        (p_sp - p) / prm.tau_p,
        (prm.f_max * p / 100.0 - f_in) / prm.tau_in,
        (target_out - f_out) / prm.tau_out,
        (f_in - f_out) / prm.tank_area,
        (level - m) / prm.tau_m,
    )


def integrate(params: TankParams, state: TankState, p_sp: float, duration: float | None = None) -> TankState:
    """Advance the ODEs with ``p_sp`` held, using RK4 substeps."""
    duration = params.dt if duration is None else duration
    h = duration / params.substeps
    x = (state.p, state.f_in, state.f_out, state.level, state.m)
    for _ in range(params.substeps):
        k1 = _rates(params, x, p_sp)
        k2 = _rates(params, tuple(a + 0.5 * h * b for a, b in zip(x, k1)), p_sp)
        k3 = _rates(params, tuple(a + 0.5 * h * b for a, b in zip(x, k2)), p_sp)
        k4 = _rates(params, tuple(a + h * b for a, b in zip(x, k3)), p_sp)
        x = tuple(a + (h / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4) for a, b1, b2, b3, b4 in zip(x, k1, k2, k3, k4))
        if x[3] <= 0.0:
            # empty tank: no level below zero and nothing left to drain
            x = (x[0], x[1], 0.0, 0.0, x[4])
    return TankState(*x)


@dataclass
class StepInfo:
    l_sp: float
    du_q: float
    du_pid: float
    u: float
    p_sp: float
    clamped: bool
    reward: float


class TankEnv:
    """Closed PID loop seen from the Q operator: input ``du_q``, output noisy level."""

    def __init__(self, config: EnvConfig | None = None, rng=None):
        self.config = config or EnvConfig()
        self.params = self.config.tank
        self.rng = np.random.default_rng(rng)
        self.level_pid = PIDController(self.config.level_kp, self.config.level_ki, self.config.level_kd)
        self.flow_pid = PIDController(self.config.flow_kp, self.config.flow_ki, lower=0.0, upper=100.0)
        self.reset()

    @property
    def noise_std(self) -> float:
        return float(np.sqrt(self.params.noise_var)) if self.config.noise else 0.0

    def equilibrium(self, level: float) -> TankState:
        """Steady state at ``level``: all filters settled, inflow matching outflow."""
        f = self.params.outflow_at(level)
        return TankState(p=100.0 * f / self.params.f_max, f_in=f, f_out=f, level=level, m=level)

    def reset(self, level: float | None = None) -> float:
        level = self.config.initial_level if level is None else level
        self.state = self.equilibrium(level)
        self.u = self.state.f_in / self.params.flow_unit
        self.level_pid.reset()
        self.flow_pid.reset(integral=self.state.p)
        self.t = 0
        self.measurement = self._measure()
        return self.measurement

    def _measure(self) -> float:
        noise = self.rng.normal(0.0, self.noise_std) if self.noise_std > 0 else 0.0
        return self.state.m + noise

    def step(self, du_q: float, l_sp: float | None = None) -> tuple[TankState, float, float, StepInfo]:
        return env_step(self, du_q, l_sp)


def env_step(env: TankEnv, du_q: float, l_sp: float | None = None) -> tuple[TankState, float, float, StepInfo]:
    """Advance the tank by one control period.

    Returns:
        ``(next_state, reward, measurement, info)``; the measurement is the
        filtered level plus Gaussian noise (when enabled).
    """
    du_q = float(du_q)
    if not np.isfinite(du_q):
        raise ValueError("non-finite Q increment")
    cfg, prm = env.config, env.params
    l_sp = cfg.setpoint(env.t) if l_sp is None else float(l_sp)
    du_pid = env.level_pid.increment(l_sp - env.measurement, prm.dt)
    env.u, clamped = compose_incremental(du_q, du_pid, env.u, (0.0, prm.u_max))
    p_sp = env.flow_pid.step(env.u - env.state.f_in / prm.flow_unit, prm.dt)
    env.state = integrate(prm, env.state, p_sp)
    env.t += 1
    env.measurement = env._measure()
    r = reward(l_sp, env.measurement, du_q)
    return env.state, r, env.measurement, StepInfo(l_sp, du_q, du_pid, env.u, p_sp, clamped, r)


def prbs(n: int, amplitude: float, rng, hold: int = 1) -> np.ndarray:
    """Random +-amplitude sequence that may switch every ``hold`` samples."""
    rng = np.random.default_rng(rng)
    levels = rng.choice([-1.0, 1.0], size=-(-n // hold))
    return amplitude * np.repeat(levels, hold)[:n]


def collect_excitation(
    env: TankEnv,
    n_samples: int,
    amplitude: float = 1.0,
    rng=None,
    L: int = 10,
    order_bound: int | None = None,
    hold: int = 20,
    setpoint: float | None = None,
    mode: str = "step",
) -> Trajectory:
    """Excite the PID loop through ``du_q`` at a fixed setpoint and record ``(du_q, m - setpoint)``.

    ``mode="step"`` holds a +-amplitude offset on the flow setpoint for ``hold``
    samples at a time and feeds its increments as ``du_q``, so the flow stays
    near the operating point. ``mode="increment"`` feeds the PRBS directly as
    ``du_q``. Outputs are deviations of the noisy level from the setpoint.

    Raises:
        PersistentExcitationError: the input is not exciting of order ``L + n + 1``.
    """
    n = L if order_bound is None else order_bound
    order = L + n + 1
    if n_samples < 2 * order:
        raise ValueError(f"need at least {2 * order} samples for order {order}, got {n_samples}")
    if mode not in ("step", "increment"):
        raise ValueError(f"unknown excitation mode {mode!r}")
    rng = np.random.default_rng(rng)
    sp = env.config.initial_level if setpoint is None else setpoint
    env.reset(sp)
    if mode == "step":
        u = np.diff(prbs(n_samples + 1, amplitude, rng, hold))
    else:
        u = prbs(n_samples, amplitude, rng, hold)
    y = np.empty(n_samples)
    for k in range(n_samples):
        y[k] = env.measurement - sp
        env_step(env, u[k], sp)
    rank, s = excitation_rank(u, order)
    if rank != order:
        ratio = s[-1] / s[0] if s.size and s[0] > 0 else 0.0
        raise PersistentExcitationError(
            f"excitation is not persistently exciting of order {order}: rank {rank} (singular value ratio {ratio:.3e})"
        )
    return Trajectory(u, y, env.params.dt)


def with_tank(config: EnvConfig, **changes) -> EnvConfig:
    return replace(config, tank=replace(config.tank, **changes))
