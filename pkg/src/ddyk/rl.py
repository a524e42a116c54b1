"""TD3 training of the Q-parameter policy on the tank loop.

The observation fed to the critics is ``(e_t, ybar_L, r_hat_t, z_t)``. The
stable actor is evaluated on minibatches by unrolling one Q transition from
the stored context ``(z_{t-1}, r_hat_{t-1})``, so the actor loss reaches the
transition network, the Lyapunov network and ``B`` as well as ``C`` and ``D``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import nn
from .behavior import HankelModel
from .env import EnvConfig, TankEnv
from .nn import AdamState, DenseNet, GradientTape, NonFiniteError, Tensor
from .stablenet import QParameter, decrease_violation
from .youla import ControllerState

log = logging.getLogger(__name__)

ROLLOUT_COLUMNS = ["t", "lsp", "l", "m", "fin", "fout", "p", "du_q", "du_pid", "u", "reward"]
CONTROLLER_COLUMNS = ["t", "e", "ybar", "rhat", "du_q", "du_pid", "u", "clamp"]


@dataclass(frozen=True)
class TD3Config:
    """TD3 settings. Only ``policy_delay = 4`` and the critic shape come from the source experiment;
    the rest are the usual TD3 defaults."""

    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 4
    batch_size: int = 64
    buffer_size: int = 100_000
    expl_noise: float = 0.1
    target_noise: float = 0.2
    noise_clip: float = 0.5
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    critic_hidden: int = 64
    warmup_episodes: int = 2

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.policy_delay < 1 or self.batch_size < 1 or self.buffer_size < 1:
            raise ValueError("policy_delay, batch_size and buffer_size must be positive")


@dataclass(frozen=True)
class ActorConfig:
    n_q: int = 4
    hidden: int = 16
    beta: float = 0.99
    eps: float = 1e-3
    io_scale: float = 0.1
    baseline_hidden: int = 64


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------


class Batch(NamedTuple):
    obs: np.ndarray
    ctx: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    next_ctx: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling without replacement."""

    def __init__(self, capacity: int, obs_dim: int, ctx_dim: int, rng=None):
        self.capacity = int(capacity)
        self.rng = np.random.default_rng(rng)
        self.obs = np.zeros((capacity, obs_dim))
        self.ctx = np.zeros((capacity, ctx_dim))
        self.act = np.zeros(capacity)
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.next_ctx = np.zeros((capacity, ctx_dim))
        self.done = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, obs, ctx, act, rew, next_obs, next_ctx, done=False) -> None:
        vals = (obs, ctx, act, rew, next_obs, next_ctx)
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise NonFiniteError("refusing to store a non-finite transition")
        i = self.cursor
        self.obs[i], self.ctx[i], self.act[i], self.rew[i] = obs, ctx, act, rew
        self.next_obs[i], self.next_ctx[i], self.done[i] = next_obs, next_ctx, float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} transitions from a buffer holding {self.size}")
        return self.rng.choice(self.size, size=batch_size, replace=False)

    def sample(self, batch_size: int) -> Batch:
        idx = self.sample_indices(batch_size)
        return Batch(
            self.obs[idx], self.ctx[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.next_ctx[idx], self.done[idx]
        )


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


class Critic:
    """State-action value network ``Q(s, a)`` with softplus hidden layers."""

    def __init__(self, obs_dim: int, hidden: int = 64, rng=None, name: str = "critic"):
        self.net = DenseNet([obs_dim + 1, hidden, hidden, 1], ["softplus", "softplus", "identity"], rng=rng, name=name)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def value(self, obs, act) -> Tensor:
        a = nn.reshape(nn.as_tensor(act), (-1, 1))
        return self.net(nn.concat([nn.as_tensor(obs), a], axis=1))[:, 0]

    def copy(self) -> "Critic":
        new = Critic.__new__(Critic)
        new.net = self.net.copy()
        return new


class StableActor:
    """Policy backed by a :class:`QParameter`.

    Runtime: ``du = C z + D r_hat`` followed by ``z <- f(z) + B r_hat``.
    """

    kind = "stable"

    def __init__(self, q: QParameter):
        self.q = q

    @property
    def n_q(self) -> int:
        return self.q.n_q

    @property
    def state(self) -> np.ndarray:
        return self.q.z

    def parameters(self) -> list[Tensor]:
        return self.q.parameters()

    def reset(self) -> None:
        self.q.reset()

    def step(self, r_hat: float) -> float:
        return self.q.step(r_hat)

    def action(self, obs: np.ndarray) -> float:
        r_hat, z = obs[2], obs[3:]
        return float(z @ self.q.C.value + self.q.D.value[0] * r_hat)

    def advance(self, r_hat: float) -> None:
        self.q.step(r_hat)

    def act(self, obs, ctx) -> Tensor:
        """Batched action from a one-step unroll of the Q state."""
        ctx = nn.as_tensor(ctx)
        z_prev, r_prev = ctx[:, : self.n_q], ctx[:, self.n_q]
        z = self.q.transition(z_prev, r_prev)
        r_hat = nn.as_tensor(obs)[:, 2]
        return self.q.output(z, r_hat)

    def copy(self) -> "StableActor":
        return StableActor(self.q.copy())

    def save(self, path) -> Path:
        return self.q.save(path)


class FeedforwardActor:
    """Unconstrained comparison policy: ``du = net(obs)`` with no internal state."""

    kind = "baseline"

    def __init__(self, obs_dim: int, n_q: int, hidden: int = 64, rng=None):
        self.n_q = n_q
        self.net = DenseNet([obs_dim, hidden, hidden, 1], ["softplus", "softplus", "identity"], rng=rng, name="actor")
        self.state = np.zeros(n_q)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def reset(self) -> None:
        pass

    def step(self, r_hat: float) -> float:
        raise TypeError("the feedforward actor needs a full observation; use action()")

    def action(self, obs: np.ndarray) -> float:
        return float(self.net(obs).value[0])

    def advance(self, r_hat: float) -> None:
        pass

    def act(self, obs, ctx) -> Tensor:
        return self.net(nn.as_tensor(obs))[:, 0]

    def copy(self) -> "FeedforwardActor":
        new = FeedforwardActor.__new__(FeedforwardActor)
        new.n_q = self.n_q
        new.net = self.net.copy()
        new.state = np.zeros(self.n_q)
        return new

    def save(self, path) -> Path:
        header = {"kind": "FeedforwardActor", "layers": {"actor": self.net.layer_metadata()}, "n_q": self.n_q}
        return nn.save_checkpoint(path, nn.named_arrays(self.parameters()), header)


def make_actor(cfg: ActorConfig, baseline: bool, rng) -> StableActor | FeedforwardActor:
    if baseline:
        return FeedforwardActor(3 + cfg.n_q, cfg.n_q, cfg.baseline_hidden, rng=rng)
    q = QParameter(cfg.n_q, hidden=(cfg.hidden, cfg.hidden), beta=cfg.beta, eps=cfg.eps, io_scale=cfg.io_scale, rng=rng)
    return StableActor(q)


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------


def soft_update(target: list[Tensor], source: list[Tensor], tau: float) -> None:
    for t, s in zip(target, source):
        t.value = (1.0 - tau) * t.value + tau * s.value


def critic_update(
    batch: Batch,
    critics: list[Critic],
    critic_targets: list[Critic],
    actor_target,
    optimizers: list[AdamState],
    cfg: TD3Config,
    rng,
    hook: Callable | None = None,
) -> tuple[float, float]:
    """Regress both critics on ``r + gamma (1 - done) min(Q1', Q2')`` at a smoothed target action.

    Raises:
        NonFiniteError: a loss or gradient is not finite; no critic is updated.
    """
    noise = np.clip(rng.normal(0.0, cfg.target_noise, batch.act.shape), -cfg.noise_clip, cfg.noise_clip)
    next_act = actor_target.act(batch.next_obs, batch.next_ctx).value + noise
    q1_t = critic_targets[0].value(batch.next_obs, next_act).value
    q2_t = critic_targets[1].value(batch.next_obs, next_act).value
    target = batch.rew + cfg.gamma * (1.0 - batch.done) * np.minimum(q1_t, q2_t)
    if hook is not None:
        hook(q1_t, q2_t, target)

    updates, losses = [], []
    for critic, opt in zip(critics, optimizers):
        with GradientTape() as tape:
            err = critic.value(batch.obs, batch.act) - target
            loss = (err * err).mean()
        grads = tape.gradient(loss, opt.params)
        if not np.isfinite(loss.value) or not all(np.all(np.isfinite(g)) for g in grads):
            raise NonFiniteError(f"non-finite critic loss {float(loss.value)}")
        updates.append(grads)
        losses.append(float(loss.value))
    for opt, grads in zip(optimizers, updates):
        nn.adam_step(opt, grads)
    return losses[0], losses[1]


def actor_update(batch: Batch, actor, critic, optimizer: AdamState) -> float:
    """Deterministic policy-gradient step: descend ``-mean Q(s, pi(s))``.

    Returns the loss, or NaN when the step was skipped for non-finite gradients.
    """
    with GradientTape() as tape:
        loss = -critic.value(batch.obs, actor.act(batch.obs, batch.ctx)).mean()
    grads = tape.gradient(loss, optimizer.params)
    try:
        nn.adam_step(optimizer, grads)
    except NonFiniteError as exc:
        log.warning("actor update skipped: %s", exc)
        return float("nan")
    return float(loss.value)


class TD3Agent:
    """Twin critics, target networks and delayed actor updates around one actor."""

    def __init__(self, actor, obs_dim: int, cfg: TD3Config, rng=None):
        rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.rng = rng
        self.actor = actor
        self.actor_target = actor.copy()
        self.critics = [Critic(obs_dim, cfg.critic_hidden, rng=rng, name=f"critic{i}") for i in range(2)]
        self.critic_targets = [c.copy() for c in self.critics]
        self.actor_opt = AdamState(actor.parameters(), lr=cfg.actor_lr)
        self.critic_opts = [AdamState(c.parameters(), lr=cfg.critic_lr) for c in self.critics]
        self.critic_updates = 0
        self.actor_updates = 0
        self.skipped = 0
        self.target_hook: Callable | None = None

    def update(self, buffer: ReplayBuffer) -> None:
        if len(buffer) < self.cfg.batch_size:
            return
        batch = buffer.sample(self.cfg.batch_size)
        try:
            critic_update(
                batch, self.critics, self.critic_targets, self.actor_target, self.critic_opts, self.cfg, self.rng, self.target_hook
            )
        except NonFiniteError as exc:
            self.skipped += 1
            log.warning("critic update aborted: %s", exc)
            return
        self.critic_updates += 1
        if self.critic_updates % self.cfg.policy_delay == 0:
            actor_update(batch, self.actor, self.critics[0], self.actor_opt)
            self.actor_updates += 1
            soft_update(self.actor_target.parameters(), self.actor.parameters(), self.cfg.tau)
            for tgt, src in zip(self.critic_targets, self.critics):
                soft_update(tgt.parameters(), src.parameters(), self.cfg.tau)


# ---------------------------------------------------------------------------
# Rollouts and training
# ---------------------------------------------------------------------------


def certificate_violation(actor, rng, n: int = 1000, scales=(0.01, 0.1, 1.0, 10.0)) -> float:
    """Largest ``V(f(z)) - beta V(z)`` over ``n`` random states per scale (stable actors only)."""
    if not isinstance(actor, StableActor):
        return float("nan")
    rng = np.random.default_rng(rng)
    worst = -np.inf
    for s in scales:
        z = rng.normal(0.0, s, (n, actor.n_q))
        worst = max(worst, float(decrease_violation(actor.q.dynamics, z).max()))
    return worst


@dataclass
class EpisodeResult:
    cumulative_reward: float
    aborted: bool
    steps: int
    rows: list = field(default_factory=list)
    controller_rows: list = field(default_factory=list)


def rollout(
    env: TankEnv,
    controller: ControllerState,
    actor,
    rng=None,
    explore_std: float = 0.0,
    buffer: ReplayBuffer | None = None,
    agent: TD3Agent | None = None,
    record: bool = False,
) -> EpisodeResult:
    """Run one episode of the Youla loop with ``actor`` supplying ``du_q``."""
    cfg = env.config
    n_q = actor.n_q
    m = env.reset()
    controller.reset(reset_q=False)
    actor.reset()
    z_prev, r_prev = np.zeros(n_q), 0.0
    e = cfg.setpoint(0) - m
    ybar, rhat = controller.observe(e)
    obs = np.concatenate([[e, ybar, rhat], actor.state])
    total, rows, crow = 0.0, [], []
    for t in range(cfg.episode_steps):
        try:
            lsp = cfg.setpoint(t)
            ctx = np.concatenate([z_prev, [r_prev]])
            a = actor.action(obs)
            if explore_std > 0:
                a += rng.normal(0.0, explore_std)
            z_prev, r_prev = actor.state.copy(), rhat
            actor.advance(rhat)
            controller.commit(a, ybar)
            state, r, m, info = env.step(a, lsp)
            e = cfg.setpoint(t + 1) - m
            ybar, rhat = controller.observe(e)
            next_obs = np.concatenate([[e, ybar, rhat], actor.state])
            if not (state.is_finite() and np.all(np.isfinite(next_obs)) and np.isfinite(r)):
                raise NonFiniteError(f"non-finite state at step {t}")
        except (NonFiniteError, ValueError, FloatingPointError) as exc:
            log.warning("episode aborted: %s", exc)
            return EpisodeResult(total, True, t, rows, crow)
        total += r
        if record:
            rows.append([t * env.params.dt, lsp, state.level, m, state.f_in, state.f_out, state.p, a, info.du_pid, info.u, r])
            crow.append([t * env.params.dt, obs[0], obs[1], obs[2], a, info.du_pid, info.u, int(info.clamped)])
        if buffer is not None:
            buffer.add(obs, ctx, a, r, next_obs, np.concatenate([z_prev, [r_prev]]), False)
            if agent is not None:
                agent.update(buffer)
        obs = next_obs
    return EpisodeResult(total, False, cfg.episode_steps, rows, crow)


@dataclass
class TrainResult:
    seed: int
    rewards: list
    aborted: list
    eval_reward: float
    certificate: list
    actor_updates: int
    critic_updates: int


def _write_rows(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def train(
    env_cfg: EnvConfig,
    model: HankelModel,
    td3: TD3Config,
    actor_cfg: ActorConfig,
    seed: int,
    episodes: int,
    baseline: bool = False,
    out_dir=None,
    checkpoint_every: int = 10,
    record_every: int = 1,
) -> TrainResult:
    """Train one policy for ``episodes`` episodes and evaluate it without exploration.

    Args:
        env_cfg: tank configuration (noise, gains, schedule).
        model: Hankel internal model of the PID loop (in level deviations).
        td3, actor_cfg: learner and policy settings.
        seed: master seed; all randomness derives from it.
        episodes: training episodes; the first ``td3.warmup_episodes`` only collect data.
        baseline: use the unconstrained feedforward actor.
        out_dir: when given, per-episode rollouts, checkpoints and the evaluation rollout go here.
    """
    ss = np.random.SeedSequence(seed)
    init_rng, env_rng, explore_rng, sample_rng, agent_rng, cert_rng, eval_rng = (np.random.default_rng(s) for s in ss.spawn(7))
    actor = make_actor(actor_cfg, baseline, init_rng)
    obs_dim = 3 + actor.n_q
    agent = TD3Agent(actor, obs_dim, td3, agent_rng)
    buffer = ReplayBuffer(td3.buffer_size, obs_dim, actor.n_q + 1, sample_rng)
    env = TankEnv(env_cfg, env_rng)
    controller = ControllerState(model, actor, reset_q=False)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rewards, aborted, certificate = [], [], []
    certificate.append((0, certificate_violation(actor, cert_rng)))
    for ep in range(episodes):
        learn = ep >= td3.warmup_episodes
        record = out is not None and (ep % record_every == 0 or ep == episodes - 1)
        res = rollout(env, controller, actor, explore_rng, td3.expl_noise, buffer, agent if learn else None, record)
        rewards.append(res.cumulative_reward)
        aborted.append(res.aborted)
        if record:
            _write_rows(out / f"rollout_{ep}.csv", ROLLOUT_COLUMNS, res.rows)
            _write_rows(out / f"controller_{ep}.csv", CONTROLLER_COLUMNS, res.controller_rows)
        if (ep + 1) % checkpoint_every == 0 or ep == episodes - 1:
            certificate.append((ep + 1, certificate_violation(actor, cert_rng)))
            if out is not None:
                actor.save(out / f"checkpoint_{ep}")
        log.info("seed %d episode %d reward %.4f%s", seed, ep, res.cumulative_reward, " (aborted)" if res.aborted else "")

    # evaluation uses its own noise stream so it is comparable across training lengths
    ev = rollout(TankEnv(env_cfg, eval_rng), controller, actor, None, 0.0, None, None, out is not None)
    if out is not None:
        _write_rows(out / "rollout_eval.csv", ROLLOUT_COLUMNS, ev.rows)
        _write_rows(out / "controller_eval.csv", CONTROLLER_COLUMNS, ev.controller_rows)
    return TrainResult(seed, rewards, aborted, ev.cumulative_reward, certificate, agent.actor_updates, agent.critic_updates)
