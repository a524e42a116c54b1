"""Stable-by-construction nonlinear dynamics and the control-affine Q operator.

A convex Lyapunov network ``V`` certifies the learned transition map: the raw
proposal ``fhat(z)`` is kept when it decreases ``V`` by the factor ``beta``
and is otherwise scaled back onto the level set ``V = beta V(z)``. Because
``V`` is convex with ``V(0) = 0``, the rescaled point satisfies the decrease
condition for every parameter value.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import nn
from .nn import DenseNet, Tensor

DEFAULT_BETA = 0.99
DEFAULT_EPS = 1e-3


def _as_batch(z) -> tuple[Tensor, bool]:
    t = nn.as_tensor(z)
    if t.ndim == 1:
        return nn.reshape(t, (1, -1)), True
    return t, False


def _check_finite(x, what: str):
    v = x.value if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(v)):
        raise nn.NonFiniteError(f"non-finite {what}")


class LyapunovNet:
    """Input-convex network turned into a Lyapunov candidate.

    ``V(z) = smooth_relu(g(z) - g(0)) + eps * |z|^2`` where ``g`` is an ICNN:
    hidden-to-hidden and hidden-to-output weights pass through softplus so
    they stay nonnegative, and every hidden activation is the convex,
    nondecreasing smooth ReLU.
    """

    def __init__(self, n: int, hidden=(16, 16), eps: float = DEFAULT_EPS, rng=None, name: str = "V"):
        if eps <= 0:
            raise ValueError("eps must be positive")
        rng = np.random.default_rng(rng)
        self.n = int(n)
        self.eps = float(eps)
        self.hidden = tuple(int(h) for h in hidden)
        self.name = name
        widths = (self.n, *self.hidden)
        self.W: list[Tensor] = []  # input passthrough weights, one per layer (incl. output)
        self.b: list[Tensor] = []
        self.U_raw: list[Tensor] = []  # raw hidden-to-hidden weights, softplus'd at use
        out_sizes = (*self.hidden, 1)
        for k, size in enumerate(out_sizes):
            bound = 1.0 / np.sqrt(self.n)
            self.W.append(Tensor(rng.uniform(-bound, bound, (size, self.n)), f"{name}.W{k}"))
            self.b.append(Tensor(rng.uniform(-bound, bound, size), f"{name}.b{k}"))
            if k > 0:
                fan_in = widths[k]
                # softplus(raw) lands roughly in (0, 2/fan_in)
                raw = np.log(np.expm1(rng.uniform(0.1, 2.0, (size, fan_in)) / fan_in))
                self.U_raw.append(Tensor(raw, f"{name}.U{k}"))

    def parameters(self) -> list[Tensor]:
        return [*self.W, *self.b, *self.U_raw]

    def icnn(self, z: Tensor) -> Tensor:
        """Raw convex body ``g`` on a batch ``(B, n)``; returns ``(B,)``."""
        h = nn.smooth_relu(z @ self.W[0].T + self.b[0])
        for k in range(1, len(self.W)):
            pre = h @ nn.softplus(self.U_raw[k - 1]).T + z @ self.W[k].T + self.b[k]
            h = nn.smooth_relu(pre) if k < len(self.W) - 1 else pre
        return h[:, 0]

    def __call__(self, z) -> Tensor:
        zb, single = _as_batch(z)
        g0 = self.icnn(Tensor(np.zeros((1, self.n))))
        v = nn.smooth_relu(self.icnn(zb) - g0) + self.eps * (zb * zb).sum(axis=1)
        return v[0] if single else v

    def copy(self) -> "LyapunovNet":
        new = LyapunovNet.__new__(LyapunovNet)
        new.__dict__.update(self.__dict__)
        new.W = [Tensor(p.value, p.name) for p in self.W]
        new.b = [Tensor(p.value, p.name) for p in self.b]
        new.U_raw = [Tensor(p.value, p.name) for p in self.U_raw]
        return new


def lyapunov_value(V: LyapunovNet, z) -> Tensor:
    """``V(z)`` for a state ``(n,)`` or batch ``(B, n)``; rejects non-finite input."""
    zv = z.value if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if zv.shape[-1] != V.n:
        raise ValueError(f"expected state dimension {V.n}, got shape {zv.shape}")
    _check_finite(zv, "state passed to lyapunov_value")
    return V(z)


class StableDynamics:
    """Transition ``z -> gamma(z) * fhat(z)`` with ``V(next) <= beta V(z)``.

    ``fhat(z) = net(z) - net(0)`` so the origin is an equilibrium.
    """

    def __init__(self, n: int, hidden=(16, 16), beta: float = DEFAULT_BETA, eps: float = DEFAULT_EPS, rng=None):
        if not 0.0 < beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        rng = np.random.default_rng(rng)
        self.n = int(n)
        self.beta = float(beta)
        self.fnet = DenseNet([self.n, *hidden, self.n], ["tanh"] * len(hidden) + ["identity"], rng=rng, name="fhat")
        self.V = LyapunovNet(self.n, hidden=hidden, eps=eps, rng=rng)

    def parameters(self) -> list[Tensor]:
        return [*self.fnet.parameters(), *self.V.parameters()]

    def fhat(self, z) -> Tensor:
        zb, single = _as_batch(z)
        out = self.fnet(zb) - self.fnet(Tensor(np.zeros((1, self.n))))
        return out[0] if single else out

    def __call__(self, z) -> Tensor:
        return stable_forward(self, z)

    def copy(self) -> "StableDynamics":
        new = StableDynamics.__new__(StableDynamics)
        new.n, new.beta = self.n, self.beta
        new.fnet = self.fnet.copy()
        new.V = self.V.copy()
        return new


def stable_forward(d: StableDynamics, z) -> Tensor:
    """Corrected transition for a state ``(n,)`` or batch ``(B, n)``.

    The scale is ``gamma = (bV - relu(bV - Vf)) / Vf`` with ``bV = beta V(z)``
    and ``Vf = V(fhat(z))``. Where ``Vf <= bV`` the proposal is returned
    untouched, which also covers ``Vf = 0``.
    """
    zb, single = _as_batch(z)
    _check_finite(zb, "state passed to stable_forward")
    fz = d.fhat(zb)
    bV = d.beta * d.V(zb)
    Vf = d.V(fz)
    _check_finite(fz, "proposal fhat(z)")
    _check_finite(Vf, "V(fhat(z))")
    keep = Vf.value <= bV.value
    Vf_safe = nn.where(Vf.value > 0.0, Vf, 1.0)
    gamma = (bV - nn.relu(bV - Vf)) / Vf_safe
    out = nn.where(keep[:, None], fz, gamma.reshape((-1, 1)) * fz)
    return out[0] if single else out


def decrease_violation(d: StableDynamics, z: np.ndarray) -> np.ndarray:
    """``V(f(z)) - beta V(z)`` per row; nonpositive wherever the certificate holds."""
    z = np.atleast_2d(z)
    return d.V(stable_forward(d, z)).value - d.beta * d.V(z).value


class QParameter:
    """Control-affine stable operator used as the policy.

    State update ``z' = f(z) + B r``, output ``du = C z + D r`` where ``f`` is
    a :class:`StableDynamics` map.
    """

    def __init__(
        self,
        n_q: int = 4,
        hidden=(16, 16),
        beta: float = DEFAULT_BETA,
        eps: float = DEFAULT_EPS,
        io_scale: float = 0.1,
        rng=None,
    ):
        rng = np.random.default_rng(rng)
        self.n_q = int(n_q)
        self.hidden = tuple(hidden)
        self.dynamics = StableDynamics(self.n_q, hidden=hidden, beta=beta, eps=eps, rng=rng)
        self.B = Tensor(rng.uniform(-io_scale, io_scale, self.n_q), "q.B")
        self.C = Tensor(rng.uniform(-io_scale, io_scale, self.n_q), "q.C")
        self.D = Tensor(np.zeros(1), "q.D")
        self.z = np.zeros(self.n_q)

    @property
    def beta(self) -> float:
        return self.dynamics.beta

    @property
    def eps(self) -> float:
        return self.dynamics.V.eps

    def parameters(self) -> list[Tensor]:
        return [*self.dynamics.parameters(), self.B, self.C, self.D]

    def step(self, r_hat: float) -> float:
        du, _ = q_step(self, r_hat)
        return du

    def reset(self) -> None:
        q_reset(self)

    def output(self, z, r_hat) -> Tensor:
        """Batched ``C z + D r`` for ``z (B, n_q)`` and ``r (B,)``."""
        return nn.as_tensor(z) @ self.C + self.D[0] * nn.as_tensor(r_hat)

    def transition(self, z, r_hat) -> Tensor:
        """Batched ``f(z) + B r``."""
        r = nn.reshape(nn.as_tensor(r_hat), (-1, 1))
        return stable_forward(self.dynamics, z) + r * nn.reshape(self.B, (1, -1))

    def copy(self) -> "QParameter":
        new = QParameter.__new__(QParameter)
        new.n_q, new.hidden = self.n_q, self.hidden
        new.dynamics = self.dynamics.copy()
        new.B = Tensor(self.B.value, self.B.name)
        new.C = Tensor(self.C.value, self.C.name)
        new.D = Tensor(self.D.value, self.D.name)
        new.z = self.z.copy()
        return new

    def save(self, path) -> Path:
        header = {
            "kind": "QParameter",
            "beta": self.beta,
            "eps": self.eps,
            "n_q": self.n_q,
            "hidden": list(self.hidden),
            "layers": {"fhat": self.dynamics.fnet.layer_metadata()},
        }
        return nn.save_checkpoint(path, nn.named_arrays(self.parameters()), header)

    @classmethod
    def load(cls, path) -> "QParameter":
        header, arrays = nn.load_checkpoint(path)
        if header.get("kind") != "QParameter":
            raise ValueError(f"{path} does not hold a QParameter checkpoint")
        q = cls(header["n_q"], hidden=header["hidden"], beta=header["beta"], eps=header["eps"], rng=0)
        nn.assign_arrays(q.parameters(), arrays)
        return q


def q_step(q: QParameter, r_hat: float) -> tuple[float, np.ndarray]:
    """Advance ``q`` by one sample; returns ``(du, new_state)``."""
    r_hat = float(r_hat)
    if not np.isfinite(r_hat):
        raise nn.NonFiniteError("non-finite Q input")
    z = q.z
    du = float(z @ q.C.value + q.D.value[0] * r_hat)
    z_next = stable_forward(q.dynamics, z).value + q.B.value * r_hat
    _check_finite(z_next, "Q state")
    q.z = z_next
    return du, z_next


def q_reset(q: QParameter) -> None:
    q.z = np.zeros(q.n_q)
