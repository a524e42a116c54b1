"""Discrete-time SISO state-space oracle and the classical Youla-Kucera loop."""

from __future__ import annotations

import numpy as np


class StateSpace:
    """``x+ = A x + B u``, ``y = C x + D u`` with a mutable state ``x``."""

    def __init__(self, A, B, C, D=0.0, x0=None):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        B = np.asarray(B, dtype=np.float64).reshape(-1)
        C = np.asarray(C, dtype=np.float64).reshape(-1)
        if B.size != n or C.size != n:
            raise ValueError(f"B and C must have {n} entries, got {B.size} and {C.size}")
        self.A, self.B, self.C = A, B, C
        self.D = float(np.asarray(D, dtype=np.float64).reshape(()))
        self.x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).reshape(n).copy()

    @property
    def order(self) -> int:
        return self.A.shape[0]

    @property
    def strictly_proper(self) -> bool:
        return self.D == 0.0

    def is_stable(self) -> bool:
        return spectral_radius(self.A) < 1.0

    def reset(self, x0=None) -> None:
        self.x = np.zeros(self.order) if x0 is None else np.asarray(x0, dtype=np.float64).reshape(self.order).copy()

    def output(self, u: float = 0.0) -> float:
        return float(self.C @ self.x + self.D * u)

    def step(self, u: float) -> float:
        """Emit ``y_t`` for input ``u_t`` and advance the state."""
        y = self.output(u)
        self.x = self.A @ self.x + self.B * u
        return y

    def impulse_response(self, n_samples: int) -> np.ndarray:
        h = np.empty(n_samples)
        if n_samples == 0:
            return h
        h[0] = self.D
        v = self.B.copy()
        for k in range(1, n_samples):
            h[k] = self.C @ v
            v = self.A @ v
        return h

    def copy(self) -> "StateSpace":
        return StateSpace(self.A.copy(), self.B.copy(), self.C.copy(), self.D, self.x)


def simulate(sys: StateSpace, u, x0=None) -> np.ndarray:
    """Roll the recurrence over ``u`` from ``x0`` (zero if omitted); leaves ``sys.x`` at the final state."""
    u = np.asarray(u, dtype=np.float64).ravel()
    if not np.all(np.isfinite(u)):
        raise ValueError("inputs must be finite")
    sys.reset(x0)
    y = np.empty(u.size)
    for t, ut in enumerate(u):
        y[t] = sys.step(ut)
    return y


class YoulaControllerLTI:
    """Classical realization of ``u = Q (e + P u)`` with an exact plant model."""

    def __init__(self, plant: StateSpace, q: StateSpace, check: bool = True):
        if not plant.strictly_proper:
            raise ValueError("plant model must be strictly proper (D = 0)")
        if check and not (plant.is_stable() and q.is_stable()):
            raise ValueError("plant model and Q must both be stable")
        self.plant = plant.copy()
        self.q = q.copy()
        self.reset()

    def reset(self) -> None:
        self.plant.reset()
        self.q.reset()


def yk_control_step(ctrl: YoulaControllerLTI, e: float) -> float:
    """One sample of the classical loop; returns ``u_t``."""
    if not np.isfinite(e):
        raise ValueError("non-finite error signal")
    r_hat = e + ctrl.plant.output()
    u = ctrl.q.step(r_hat)
    ctrl.plant.step(u)
    return u


# ---------------------------------------------------------------------------
# Spectral radius via shifted QR iteration (small dense matrices only)
# ---------------------------------------------------------------------------


def _hessenberg(A: np.ndarray) -> np.ndarray:
    H = A.astype(np.complex128)
    n = H.shape[0]
    for k in range(n - 2):
        x = H[k + 1 :, k].copy()
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        phase = x[0] / abs(x[0]) if x[0] != 0 else 1.0
        v = x.copy()
        v[0] += phase * alpha
        v /= np.linalg.norm(v)
        H[k + 1 :, :] -= 2.0 * np.outer(v, v.conj() @ H[k + 1 :, :])
        H[:, k + 1 :] -= 2.0 * np.outer(H[:, k + 1 :] @ v, v.conj())
    return H


def _eig2(a, b, c, d):
    tr = a + d
    disc = np.sqrt((a - d) ** 2 / 4.0 + b * c + 0j)
    return tr / 2.0 + disc, tr / 2.0 - disc


def eigenvalues(A, max_iter: int = 10_000) -> np.ndarray:
    """Eigenvalues of a small square matrix by Wilkinson-shifted complex QR."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got shape {A.shape}")
    n = A.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.complex128)
    H = _hessenberg(A)
    scale = max(np.abs(A).max(), 1e-300)

    def negligible(k):
        return abs(H[k, k - 1]) <= 1e-15 * (abs(H[k, k]) + abs(H[k - 1, k - 1])) + 1e-17 * scale

    eigs = []
    hi = n
    it = 0
    while hi > 0:
        if hi == 1:
            eigs.append(H[0, 0])
            break
        if negligible(hi - 1):
            eigs.append(H[hi - 1, hi - 1])
            hi -= 1
            it = 0
            continue
        it += 1
        if it > max_iter:
            raise RuntimeError("QR iteration failed to converge")
        # start of the unreduced block ending at hi - 1
        lo = hi - 2
        while lo > 0 and not negligible(lo):
            lo -= 1
        blk = H[lo:hi, lo:hi]
        m = hi - lo
        l1, l2 = _eig2(blk[-2, -2], blk[-2, -1], blk[-1, -2], blk[-1, -1])
        mu = l1 if abs(l1 - blk[-1, -1]) < abs(l2 - blk[-1, -1]) else l2
        if it % 11 == 0:
            mu = blk[-1, -1] + 0.75 * abs(blk[-1, -2]) * (1 + 1j)  # exceptional shift
        Q, R = np.linalg.qr(blk - mu * np.eye(m))
        H[lo:hi, lo:hi] = R @ Q + mu * np.eye(m)
        H[:lo, lo:hi] = H[:lo, lo:hi] @ Q
        H[lo:hi, hi:] = Q.conj().T @ H[lo:hi, hi:]
    return np.array(eigs[::-1])


def spectral_radius(A) -> float:
    """Largest eigenvalue modulus of a square matrix (intended for n <= 8)."""
    ev = eigenvalues(A)
    return float(np.max(np.abs(ev))) if ev.size else 0.0


# ---------------------------------------------------------------------------
# Random stable systems for tests and verification
# ---------------------------------------------------------------------------


def random_stable_matrix(n: int, rng, modulus=(0.1, 0.9)) -> np.ndarray:
    """Real ``n x n`` matrix with eigenvalue moduli drawn uniformly in ``modulus``.

    Eigenvalues come as real values or conjugate pairs, placed in a real
    block-diagonal form and rotated by a random orthogonal similarity.
    """
    rng = np.random.default_rng(rng)
    lo, hi = modulus
    blocks = np.zeros((n, n))
    k = 0
    while k < n:
        r = rng.uniform(lo, hi)
        if k + 1 < n and rng.random() < 0.5:
            th = rng.uniform(0.1, np.pi - 0.1)
            blocks[k : k + 2, k : k + 2] = r * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
            k += 2
        else:
            blocks[k, k] = r * rng.choice([-1.0, 1.0])
            k += 1
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Q @ blocks @ Q.T


def random_stable_system(n: int, rng, strictly_proper: bool = True, modulus=(0.1, 0.9)) -> StateSpace:
    rng = np.random.default_rng(rng)
    A = random_stable_matrix(n, rng, modulus)
    B = rng.standard_normal(n)
    C = rng.standard_normal(n)
    D = 0.0 if strictly_proper else rng.standard_normal()
    return StateSpace(A, B, C, D)
