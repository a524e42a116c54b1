"""Oracle suites run by ``ddyk verify`` and by the acceptance tests.

Each suite returns a :class:`SuiteResult` holding the largest error it saw
and the tolerance it was held to.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import nn
from .behavior import HankelModel, Trajectory, predict_next_output, solve_alpha
from .lti import StateSpace, YoulaControllerLTI, random_stable_system, simulate, spectral_radius, yk_control_step
from .nn import DenseNet, GradientTape
from .stablenet import QParameter, StableDynamics, decrease_violation, stable_forward
from .youla import ControllerState, control_step


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: max error {self.max_error:.3e} (tolerance {self.tolerance:.1e}){extra}"


# ---------------------------------------------------------------------------
# Behavioral model
# ---------------------------------------------------------------------------


def _lemma_runs(n_systems: int, N: int, L: int, windows: int, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(n_systems):
        sys = random_stable_system(int(rng.integers(1, 4)), rng)
        u = rng.standard_normal(N)
        model = HankelModel(Trajectory(u, simulate(sys, u)), L)
        for _ in range(windows):
            x0 = rng.standard_normal(sys.order)
            uw = rng.standard_normal(L + 1)
            yw = simulate(sys, uw, x0)
            yield model, uw, yw


def fundamental_lemma_suite(n_systems: int = 50, N: int = 200, L: int = 10, windows: int = 20, seed: int = 0) -> SuiteResult:
    """Fresh length-``L`` windows of the same systems lie in the Hankel column span."""
    worst = 0.0
    for model, uw, yw in _lemma_runs(n_systems, N, L, windows, seed):
        _, residual = solve_alpha(model, uw[:L], yw[:L])
        worst = max(worst, residual)
    return SuiteResult("fundamental lemma residual", worst, 1e-8, f"{n_systems} systems x {windows} windows")


def prediction_suite(n_systems: int = 50, N: int = 200, L: int = 10, windows: int = 20, seed: int = 1) -> SuiteResult:
    """Hankel prediction of the sample after a window against the state-space recursion."""
    worst = 0.0
    for model, uw, yw in _lemma_runs(n_systems, N, L, windows, seed):
        worst = max(worst, abs(predict_next_output(model, uw[:L], yw[:L]) - yw[L]))
    return SuiteResult("next-output prediction", worst, 1e-6, f"{n_systems * windows} windows")


# ---------------------------------------------------------------------------
# Youla loop equivalence
# ---------------------------------------------------------------------------


def controller_realization(plant: StateSpace, q: StateSpace) -> np.ndarray:
    """State matrix of the feedback controller ``Q / (1 - Q P)`` seen from ``e``."""
    Ap, Bp, Cp = plant.A, plant.B[:, None], plant.C[None, :]
    Aq, Bq, Cq = q.A, q.B[:, None], q.C[None, :]
    return np.block([[Ap + q.D * Bp @ Cp, Bp @ Cq], [Bq @ Cp, Aq]])


def random_youla_pair(rng, max_radius: float = 0.98, max_tries: int = 1000) -> tuple[StateSpace, StateSpace]:
    """Stable plant and stable Q whose combined controller is also stable.

    The two realizations agree in exact arithmetic for any pair, but with an
    unstable controller and a random error sequence both signals grow without
    bound and the comparison turns into a test of float overflow.
    """
    for _ in range(max_tries):
        plant = random_stable_system(int(rng.integers(1, 4)), rng)
        q = random_stable_system(int(rng.integers(1, 4)), rng, strictly_proper=False)
        if spectral_radius(controller_realization(plant, q)) < max_radius:
            return plant, q
    raise RuntimeError("no admissible (P, Q) pair found")


def youla_equivalence_suite(n_pairs: int = 20, steps: int = 200, L: int = 10, N: int = 200, seed: int = 2) -> SuiteResult:
    """Data-driven controller against the state-space Youla loop on random error sequences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        plant, q = random_youla_pair(rng)
        u_data = rng.standard_normal(N)
        model = HankelModel(Trajectory(u_data, simulate(plant, u_data)), L)
        classical = YoulaControllerLTI(plant, q)
        data_driven = ControllerState(model, q.copy())
        e = rng.standard_normal(steps)
        for et in e:
            u1 = control_step(data_driven, et)
            u2 = yk_control_step(classical, et)
            worst = max(worst, abs(u1 - u2))
    return SuiteResult("Youla equivalence |u_data - u_classical|", worst, 1e-6, f"{n_pairs} pairs x {steps} steps")


# ---------------------------------------------------------------------------
# Stable dynamics
# ---------------------------------------------------------------------------


def scale_weights(d: StableDynamics, factor: float) -> StableDynamics:
    """Copy of ``d`` with the transition network's weights multiplied by ``factor``."""
    out = d.copy()
    for p in out.fnet.parameters():
        p.value = p.value * factor
    return out


def _perturbed_draws(n_draws: int, n_q: int, rng) -> Iterable[StableDynamics]:
    """Fresh initializations spread over weight scales, plus optimizer-updated copies.

    The updated copies push ``fhat`` outward with Adam, which is what a critic
    rewarding large states would do mid-training.
    """
    scales = np.geomspace(0.3, 10.0, max(n_draws // 2, 1))
    for s in scales:
        yield scale_weights(StableDynamics(n_q, rng=rng), s)
    for k in range(n_draws - len(scales)):
        d = StableDynamics(n_q, rng=rng)
        opt = nn.AdamState(d.parameters(), lr=1e-2)
        z = rng.normal(0.0, 1.0, (64, n_q))
        for _ in range(5 * (k + 1)):
            with GradientTape() as tape:
                loss = -(d.fhat(z) * d.fhat(z)).mean()
            nn.adam_step(opt, tape.gradient(loss, opt.params))
        yield d


def certificate_suite(
    n_states: int = 10_000, n_draws: int = 20, n_q: int = 4, seed: int = 3, extra: Iterable[StableDynamics] = ()
) -> SuiteResult:
    """``V(f(z)) - beta V(z)`` over random states and weight draws; must stay <= 1e-9."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    count = 0
    for d in [*_perturbed_draws(n_draws, n_q, rng), *extra]:
        z = rng.normal(0.0, 1.0, (n_states, d.n)) * np.geomspace(1e-3, 1e2, n_states)[:, None]
        worst = max(worst, float(decrease_violation(d, z).max()))
        count += 1
    return SuiteResult("Lyapunov decrease V(f(z)) - beta V(z)", worst, 1e-9, f"{count} weight draws x {n_states} states")


def lyapunov_structure_suite(n_samples: int = 10_000, n_q: int = 4, seed: int = 4) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    V = StableDynamics(n_q, rng=rng).V
    v0 = abs(float(V(np.zeros((1, n_q))).value[0]))
    z = rng.normal(0.0, 1.0, (n_samples, n_q)) * np.geomspace(1e-3, 1e2, n_samples)[:, None]
    lower = float(np.max(V.eps * np.sum(z * z, axis=1) - V(z).value))
    a = rng.normal(0.0, 3.0, (n_samples, n_q))
    b = rng.normal(0.0, 3.0, (n_samples, n_q))
    gap = V((a + b) / 2).value - 0.5 * (V(a).value + V(b).value)
    return [
        SuiteResult("V(0) = 0", v0, 0.0),
        SuiteResult("V(z) >= eps |z|^2", max(lower, 0.0), 0.0, f"{n_samples} samples"),
        SuiteResult("midpoint convexity of V", max(float(gap.max()), 0.0), 1e-9, f"{n_samples} pairs"),
    ]


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def finite_difference(fn: Callable[[], float], params: list, h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of the scalar ``fn()`` with respect to each parameter entry."""
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn()
            flat[i] = old - h
            down = fn()
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a: list[np.ndarray], b: list[np.ndarray]) -> float:
    x = np.concatenate([v.ravel() for v in a])
    y = np.concatenate([v.ravel() for v in b])
    return float(np.linalg.norm(x - y) / max(np.linalg.norm(x) + np.linalg.norm(y), 1e-12))


def _check(loss_fn: Callable[[], nn.Tensor], params: list) -> float:
    with GradientTape() as tape:
        loss = loss_fn()
    analytic = tape.gradient(loss, params)
    numeric = finite_difference(lambda: float(loss_fn().value), params)
    return relative_error(analytic, numeric)


def gradient_suite(seed: int = 5) -> list[SuiteResult]:
    """Tape gradients against central differences for plain nets and through the scale ``gamma``."""
    rng = np.random.default_rng(seed)
    plain = 0.0
    for acts in (["tanh", "identity"], ["softplus", "softplus", "identity"], ["relu", "identity"]):
        widths = [3] + [5] * (len(acts) - 1) + [2]
        net = DenseNet(widths, acts, rng=rng)
        x = rng.standard_normal((7, 3))
        w = rng.standard_normal((7, 2))
        plain = max(plain, _check(lambda: (net(x) * w).sum(), net.parameters()))

    # stress the gamma branch: large transition weights make most proposals expand V
    d = scale_weights(StableDynamics(3, hidden=(8, 8), rng=rng), 6.0)
    z = rng.normal(0.0, 1.0, (64, 3))
    Vf = d.V(d.fhat(z)).value
    bV = d.beta * d.V(z).value
    z = z[(Vf - bV) > 1e-2 * bV][:16]
    w = rng.standard_normal(z.shape)
    through_gamma = _check(lambda: (stable_forward(d, z) * w).sum(), d.parameters())

    q = QParameter(3, hidden=(8, 8), rng=rng)
    for p in q.dynamics.fnet.parameters():
        p.value = p.value * 6.0
    zq = rng.normal(0.0, 1.0, (16, 3))
    r = rng.standard_normal(16)
    r2 = rng.standard_normal(16)
    through_q = _check(lambda: (q.output(q.transition(zq, r), r2) ** 2).sum(), q.parameters())
    return [
        SuiteResult("gradient check, dense nets", plain, 1e-4),
        SuiteResult("gradient check, through gamma", through_gamma, 1e-3, f"{len(z)} states off the switching surface"),
        SuiteResult("gradient check, Q one-step unroll", through_q, 1e-3),
    ]


def run_all(extra_dynamics: Iterable[StableDynamics] = ()) -> list[SuiteResult]:
    return [
        fundamental_lemma_suite(),
        prediction_suite(),
        youla_equivalence_suite(),
        certificate_suite(extra=extra_dynamics),
        *lyapunov_structure_suite(),
        *gradient_suite(),
    ]
