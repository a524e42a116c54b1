import numpy as np
import pytest
from scipy import stats

from ddyk import nn
from ddyk.behavior import HankelModel
from ddyk.env import EnvConfig, TankEnv, collect_excitation
from ddyk.nn import AdamState, Tensor
from ddyk.rl import (
    ActorConfig,
    Batch,
    Critic,
    FeedforwardActor,
    ReplayBuffer,
    StableActor,
    TD3Agent,
    TD3Config,
    actor_update,
    certificate_violation,
    critic_update,
    make_actor,
    rollout,
    soft_update,
    train,
)
from ddyk.stablenet import QParameter
from ddyk.youla import ControllerState

OBS, CTX = 7, 5
SHORT = EnvConfig(episode_steps=40)


@pytest.fixture(scope="module")
def model():
    traj = collect_excitation(TankEnv(EnvConfig(), rng=0), 400, rng=1, L=10)
    return HankelModel(traj, 10, ridge=1e-6)


def filled_buffer(n, rng, capacity=None, reward=None, done=0.0):
    buf = ReplayBuffer(capacity or n, OBS, CTX, rng)
    for _ in range(n):
        r = rng.normal() if reward is None else reward
        buf.add(rng.normal(size=OBS), rng.normal(size=CTX), rng.normal(), r, rng.normal(size=OBS), rng.normal(size=CTX), done)
    return buf


class ConstantCritic:
    def value(self, obs, act):
        return nn.as_tensor(np.full(len(obs), 2.0)) + 0.0 * nn.as_tensor(act).sum()


class NegSquareCritic:
    def value(self, obs, act):
        a = nn.as_tensor(act)
        return -(a * a)


def test_buffer_ring_semantics(rng):
    buf = filled_buffer(10, rng, capacity=4)
    assert len(buf) == 4 and buf.cursor == 10 % 4
    idx = buf.sample_indices(4)
    assert sorted(idx) == [0, 1, 2, 3]
    with pytest.raises(ValueError, match="cannot sample"):
        buf.sample_indices(5)


def test_buffer_samples_only_filled_region(rng):
    buf = ReplayBuffer(100, OBS, CTX, rng)
    for _ in range(10):
        buf.add(np.zeros(OBS), np.zeros(CTX), 0.0, 0.0, np.zeros(OBS), np.zeros(CTX))
    for _ in range(50):
        assert buf.sample_indices(5).max() < 10


def test_buffer_rejects_non_finite(rng):
    buf = ReplayBuffer(4, OBS, CTX, rng)
    with pytest.raises(nn.NonFiniteError):
        buf.add(np.full(OBS, np.nan), np.zeros(CTX), 0.0, 0.0, np.zeros(OBS), np.zeros(CTX))
    assert len(buf) == 0


def test_buffer_sampling_is_uniform(rng):
    buf = filled_buffer(50, rng)
    counts = np.zeros(50)
    for _ in range(4000):
        idx = buf.sample_indices(8)
        assert len(set(idx)) == 8
        counts += np.bincount(idx, minlength=50)
    assert stats.chisquare(counts).pvalue > 0.01


def make_critics(rng, obs_dim=OBS):
    critics = [Critic(obs_dim, 16, rng=rng) for _ in range(2)]
    return critics, [c.copy() for c in critics]


def test_zero_discount_targets_equal_rewards(rng):
    cfg = TD3Config(gamma=1e-300, batch_size=32)
    buf = filled_buffer(64, rng, reward=-0.3)
    critics, targets = make_critics(rng)
    opts = [AdamState(c.parameters(), lr=1e-2) for c in critics]
    actor = StableActor(QParameter(4, rng=rng))
    seen = []
    losses = []
    for _ in range(300):
        losses.append(critic_update(buf.sample(32), critics, targets, actor, opts, cfg, rng, lambda q1, q2, y: seen.append(y)))
    assert all(np.all(y == -0.3) for y in seen)
    assert max(losses[-1]) < 1e-4 < max(losses[0])


def test_terminal_transitions_drop_bootstrap(rng):
    buf = filled_buffer(32, rng, done=1.0)
    critics, targets = make_critics(rng)
    opts = [AdamState(c.parameters()) for c in critics]
    seen = []
    batch = buf.sample(32)
    critic_update(batch, critics, targets, StableActor(QParameter(4, rng=rng)), opts, TD3Config(), rng, lambda *a: seen.append(a[2]))
    np.testing.assert_array_equal(seen[0], batch.rew)


def test_targets_use_twin_minimum(rng):
    buf = filled_buffer(32, rng)
    critics, targets = make_critics(rng)
    # make the twins disagree strongly
    targets[1].net.biases[-1].value = targets[1].net.biases[-1].value + 5.0
    opts = [AdamState(c.parameters()) for c in critics]
    cfg = TD3Config()
    seen = []
    batch = buf.sample(32)
    critic_update(batch, critics, targets, StableActor(QParameter(4, rng=rng)), opts, cfg, rng, lambda *a: seen.append(a))
    q1, q2, y = seen[0]
    assert np.all(q1 < q2)
    np.testing.assert_allclose(y, batch.rew + cfg.gamma * np.minimum(q1, q2), rtol=1e-15)


def test_single_terminal_transition_fixed_point(rng):
    buf = filled_buffer(1, rng, reward=-0.7, done=1.0)
    critic, target = make_critics(rng)
    opts = [AdamState(c.parameters()) for c in critic]
    actor = StableActor(QParameter(4, rng=rng))
    for _ in range(2000):
        critic_update(buf.sample(1), critic, target, actor, opts, TD3Config(batch_size=1), rng)
    s = buf.sample(1)
    for c in critic:
        assert c.value(s.obs, s.act).value[0] == pytest.approx(-0.7, abs=1e-2)


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_non_finite_critic_loss_aborts_update(rng):
    buf = filled_buffer(8, rng)
    buf.rew[0] = np.inf  # corrupt storage behind the buffer's back
    critics, targets = make_critics(rng)
    before = [p.value.copy() for p in critics[0].parameters()]
    opts = [AdamState(c.parameters()) for c in critics]
    with pytest.raises(nn.NonFiniteError):
        critic_update(buf.sample(8), critics, targets, StableActor(QParameter(4, rng=rng)), opts, TD3Config(), rng)
    for b, p in zip(before, critics[0].parameters()):
        np.testing.assert_array_equal(b, p.value)


def test_constant_critic_leaves_actor_unchanged(rng):
    actor = StableActor(QParameter(4, rng=rng))
    before = [p.value.copy() for p in actor.parameters()]
    opt = AdamState(actor.parameters())
    batch = filled_buffer(16, rng).sample(16)
    for _ in range(5):
        actor_update(batch, actor, ConstantCritic(), opt)
    for b, p in zip(before, actor.parameters()):
        np.testing.assert_array_equal(b, p.value)


def test_quadratic_critic_shrinks_action(rng):
    q = QParameter(4, rng=rng)
    q.D.value[:] = 1.0
    actor = StableActor(q)
    opt = AdamState(actor.parameters(), lr=1e-2)
    batch = filled_buffer(32, rng).sample(32)
    norms = [np.linalg.norm(actor.act(batch.obs, batch.ctx).value)]
    for _ in range(50):
        actor_update(batch, actor, NegSquareCritic(), opt)
        norms.append(np.linalg.norm(actor.act(batch.obs, batch.ctx).value))
    assert np.all(np.diff(norms) < 0)
    assert abs(q.D.value[0]) < 1.0


def test_actor_update_skips_non_finite_gradients(rng):
    actor = StableActor(QParameter(4, rng=rng))
    batch = filled_buffer(4, rng).sample(4)

    class Broken:
        def value(self, obs, act):
            return nn.as_tensor(act) * np.nan

    before = [p.value.copy() for p in actor.parameters()]
    assert np.isnan(actor_update(batch, actor, Broken(), AdamState(actor.parameters())))
    for b, p in zip(before, actor.parameters()):
        np.testing.assert_array_equal(b, p.value)


def test_policy_delay_counter(rng):
    actor = StableActor(QParameter(4, rng=rng))
    agent = TD3Agent(actor, OBS, TD3Config(batch_size=8, critic_hidden=8), rng)
    buf = filled_buffer(20, rng)
    for k in range(1, 23):
        agent.update(buf)
        assert agent.critic_updates == k and agent.actor_updates == k // 4


def test_soft_update_blend():
    t, s = Tensor(np.zeros(3)), Tensor(np.ones(3))
    soft_update([t], [s], 0.25)
    np.testing.assert_allclose(t.value, 0.25)


def test_stable_actor_replay_reproduces_runtime_actions(model, rng):
    actor = make_actor(ActorConfig(), False, rng)
    actor.q.D.value[:] = 0.3
    env = TankEnv(SHORT, rng=1)
    buf = ReplayBuffer(100, 7, 5, rng)
    rollout(env, ControllerState(model, actor, reset_q=False), actor, rng, explore_std=0.0, buffer=buf)
    batch = Batch(buf.obs[:40], buf.ctx[:40], buf.act[:40], buf.rew[:40], buf.next_obs[:40], buf.next_ctx[:40], buf.done[:40])
    np.testing.assert_allclose(actor.act(batch.obs, batch.ctx).value, batch.act, atol=1e-12)
    # next context is the following step's context
    np.testing.assert_array_equal(batch.next_ctx[:-1], batch.ctx[1:])
    np.testing.assert_array_equal(batch.next_obs[:-1], batch.obs[1:])


def test_feedforward_actor_batch_matches_runtime(rng):
    actor = FeedforwardActor(7, 4, 16, rng=rng)
    obs = rng.normal(size=(5, 7))
    batched = actor.act(obs, np.zeros((5, 5))).value
    np.testing.assert_allclose(batched, [actor.action(o) for o in obs], rtol=1e-14)


def test_train_is_deterministic(model):
    a = train(SHORT, model, TD3Config(batch_size=16), ActorConfig(), seed=4, episodes=4)
    b = train(SHORT, model, TD3Config(batch_size=16), ActorConfig(), seed=4, episodes=4)
    assert a.rewards == b.rewards and a.eval_reward == b.eval_reward
    assert a.critic_updates > 0 and a.actor_updates == a.critic_updates // 4
    assert all(r <= 0 for r in a.rewards)


def test_warmup_episodes_do_not_update(model):
    res = train(SHORT, model, TD3Config(batch_size=16), ActorConfig(), seed=0, episodes=2)
    assert res.critic_updates == 0


def test_zero_episodes_evaluates_initial_policy(model):
    short = train(SHORT, model, TD3Config(), ActorConfig(), seed=9, episodes=0)
    longer = train(SHORT, model, TD3Config(warmup_episodes=5), ActorConfig(), seed=9, episodes=3)
    # warmup-only training never updates the policy, so evaluation is unchanged
    assert short.rewards == [] and short.eval_reward == longer.eval_reward


def test_certificate_holds_through_training(model, tmp_path):
    res = train(SHORT, model, TD3Config(batch_size=16), ActorConfig(), seed=1, episodes=6, out_dir=tmp_path, checkpoint_every=2)
    assert len(res.certificate) == 4
    assert all(v <= 1e-9 for _, v in res.certificate)
    for ep in (1, 3, 5):
        q = QParameter.load(tmp_path / f"checkpoint_{ep}.npz")
        assert certificate_violation(StableActor(q), 0) <= 1e-9
    header = (tmp_path / "rollout_0.csv").read_text().splitlines()[0]
    assert header == "t,lsp,l,m,fin,fout,p,du_q,du_pid,u,reward"
    assert len((tmp_path / "rollout_0.csv").read_text().splitlines()) == SHORT.episode_steps + 1


def test_baseline_trains(model):
    res = train(SHORT, model, TD3Config(batch_size=16), ActorConfig(), seed=2, episodes=3, baseline=True)
    assert len(res.rewards) == 3 and np.isnan(res.certificate[0][1])


def test_non_finite_episode_is_aborted(model, rng):
    actor = make_actor(ActorConfig(), False, rng)
    actor.q.D.value[:] = np.inf
    res = rollout(TankEnv(SHORT, rng=0), ControllerState(model, actor, reset_q=False), actor, rng)
    assert res.aborted and res.steps < SHORT.episode_steps
