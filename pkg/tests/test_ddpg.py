"""DDPG agent: replay buffer, updates, per-cycle session and persistence."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from engine_lab.core import RawAction, StateRanges
from engine_lab.ddpg import (
    STATE_DIM,
    AgentHyperParams,
    AgentParams,
    AgentSession,
    DdpgAgent,
    Experience,
    ReplayBuffer,
    discounted_return,
    end_of_episode_training,
    load_buffer,
    load_checkpoint,
    make_batch,
    save_buffer,
    save_checkpoint,
)
from engine_lab.error_service import CheckpointError, ConfigError, ContractViolation
from engine_lab.nn import forward

from .conftest import activation_pattern, central_difference, make_state, relative_error

HYPER = AgentHyperParams(hidden=(8, 8), batch_size=4, replay_batches=2, buffer_capacity=100)


def _agent(seed: int = 0, hyper: AgentHyperParams = HYPER) -> DdpgAgent:
    rng = np.random.default_rng(seed)
    return DdpgAgent(AgentParams.create(hyper, rng), StateRanges(), np.random.default_rng(seed + 1))


def _experience(reward: float = -0.5, done: int = 0, alpha50: float = 6.0) -> Experience:
    return Experience(make_state(alpha50=alpha50), RawAction((0.1, -0.2, 0.0)), make_state(alpha50=alpha50 + 1), reward, done)


class TestHyperParams:
    def test_defaults(self) -> None:
        hp = AgentHyperParams()
        assert hp.gamma == 0.9
        assert hp.sigma0 == 0.5
        assert hp.batch_size == 64
        assert hp.polyak == 1e-3
        assert hp.buffer_capacity == 50_000
        assert hp.hidden == (64, 64)

    @pytest.mark.parametrize(
        "overrides",
        [{"gamma": 0.0}, {"polyak": 1.5}, {"sigma0": -0.1}, {"batch_size": 0}, {"hidden": ()}],
    )
    def test_invalid(self, overrides: dict[str, object]) -> None:
        with pytest.raises(ConfigError):
            replace(AgentHyperParams(), **overrides)


class TestReplayBuffer:
    def test_positive_reward_rejected(self) -> None:
        with pytest.raises(ContractViolation):
            _experience(reward=0.1)
        with pytest.raises(ContractViolation):
            _experience(done=2)

    def test_fifo_eviction(self) -> None:
        buffer = ReplayBuffer(3, np.random.default_rng(0))
        for k in range(5):
            buffer.push(_experience(alpha50=float(k)))
        assert len(buffer) == 3
        assert [e.s_prev.alpha50_prev for e in buffer] == [2.0, 3.0, 4.0]

    def test_sampling_without_replacement(self) -> None:
        buffer = ReplayBuffer(50, np.random.default_rng(0))
        buffer.extend(_experience(alpha50=float(k)) for k in range(20))
        _, idx = buffer.sample(10)
        assert len(set(idx.tolist())) == 10

    def test_small_buffer_samples_with_replacement(self) -> None:
        buffer = ReplayBuffer(50, np.random.default_rng(0))
        buffer.push(_experience())
        exps, idx = buffer.sample(4)
        assert len(exps) == 4
        assert set(idx.tolist()) == {0}

    def test_empty_buffer_cannot_sample(self) -> None:
        with pytest.raises(ContractViolation):
            ReplayBuffer(5, np.random.default_rng(0)).sample(2)


def test_discounted_return() -> None:
    assert discounted_return([-1.0, -1.0, -1.0], 0.5) == pytest.approx(-1.75)
    assert discounted_return([], 0.9) == 0.0


class TestExplorationNoise:
    def test_sigma_after_twenty_episodes(self) -> None:
        agent = _agent()
        for _ in range(20):
            agent.decay_sigma()
        assert agent.sigma == pytest.approx(0.5 * 0.95**20, rel=1e-12)

    def test_noise_is_zero_mean_with_scale_sigma(self) -> None:
        agent = _agent(seed=11)
        state = make_state()
        mu = agent.act(state, sigma=0.0).as_array()
        draws = np.array([agent.act(state).as_array() for _ in range(20_000)]) - mu
        assert np.all(np.abs(draws.mean(axis=0)) < 0.02)
        assert np.allclose(draws.std(axis=0), 0.5, rtol=0.02)
        assert abs(np.corrcoef(draws.T)[0, 1]) < 0.05


class TestUpdates:
    def test_noise_free_action_is_actor_output(self) -> None:
        agent = _agent()
        state = make_state()
        before = agent.noise_rng.bit_generator.state
        action = agent.act(state, sigma=0.0)
        assert agent.noise_rng.bit_generator.state == before
        expected = forward(agent.params.actor, make_batch([_experience()], agent.ranges).states[0])
        assert np.allclose(action.as_array(), expected)

    def test_terminal_target_is_reward(self) -> None:
        agent = _agent()
        assert agent.critic_target(_experience(reward=-0.7, done=1)) == pytest.approx(-0.7)

    def test_bootstrap_target_uses_target_networks(self) -> None:
        agent = _agent()
        exp = _experience(reward=-0.2, done=0)
        batch = make_batch([exp], agent.ranges)
        u_next = forward(agent.params.target_actor, batch.next_states)
        q_next = forward(agent.params.target_critic, np.hstack([batch.next_states, u_next]))[0, 0]
        assert agent.critic_target(exp) == pytest.approx(-0.2 + 0.9 * q_next)

    def test_polyak_update_is_exact(self) -> None:
        rho = 1e-3
        agent = _agent(hyper=replace(HYPER, polyak=rho))
        p = agent.params
        for theta in p.actor.parameters():
            theta += 1.0
        for theta in p.critic.parameters():
            theta -= 0.5
        pairs = ((p.actor, p.target_actor), (p.critic, p.target_critic))
        online = [[theta.copy() for theta in src.parameters()] for src, _ in pairs]
        targets = [[theta.copy() for theta in dst.parameters()] for _, dst in pairs]
        agent.polyak_update()
        for (src, dst), before_src, before_dst in zip(pairs, online, targets, strict=True):
            for t_new, theta, t_old in zip(dst.parameters(), before_src, before_dst, strict=True):
                assert np.array_equal(t_new, rho * theta + (1.0 - rho) * t_old)
                assert not np.array_equal(t_new, t_old)
            for now, was in zip(src.parameters(), before_src, strict=True):
                assert np.array_equal(now, was)

    @pytest.mark.parametrize("hidden", [(8, 8), (16, 16)])
    @pytest.mark.parametrize("seed", range(10))
    def test_actor_gradient_matches_finite_differences(self, hidden: tuple[int, int], seed: int) -> None:
        agent = _agent(seed, replace(HYPER, hidden=hidden, actor_final_scale=1.0))
        actor, critic = agent.params.actor, agent.params.critic
        states = np.random.default_rng(100 + seed).normal(size=(6, STATE_DIM))
        grads, _ = agent.actor_gradient(states)

        def mean_q() -> float:
            return float(np.mean(forward(critic, np.hstack([states, forward(actor, states)]))))

        def pattern() -> bytes:
            joint = np.hstack([states, forward(actor, states)])
            return activation_pattern(actor, states) + activation_pattern(critic, joint)

        checked = total = 0
        for param, grad in zip(actor.parameters(), grads.parameters(), strict=True):
            flat, gflat = param.reshape(-1), grad.reshape(-1)
            total += flat.size
            for j in range(flat.size):
                numeric = central_difference(mean_q, flat, j, pattern)
                if numeric is None:
                    continue
                checked += 1
                assert relative_error(gflat[j], numeric) < 1e-4
        assert checked >= 0.95 * total

    def test_actor_step_leaves_critic_alone(self) -> None:
        agent = _agent(hyper=replace(HYPER, lr_actor=1e-2))
        p = agent.params
        nets = (p.critic, p.target_critic, p.target_actor)
        before = [[theta.copy() for theta in net.parameters()] for net in nets]
        critic_step = p.critic_opt.step
        actor_before = [theta.copy() for theta in p.actor.parameters()]
        agent.train_actor(make_batch([_experience(alpha50=float(k)) for k in range(8)], agent.ranges))
        for net, saved in zip(nets, before, strict=True):
            for now, was in zip(net.parameters(), saved, strict=True):
                assert np.array_equal(now, was)
        assert p.critic_opt.step == critic_step
        assert any(not np.array_equal(now, was) for now, was in zip(p.actor.parameters(), actor_before, strict=True))

    def test_critic_step_reduces_loss_on_fixed_batch(self) -> None:
        agent = _agent()
        batch = make_batch([_experience(reward=-1.0, done=1, alpha50=float(k)) for k in range(8)], agent.ranges)
        first = agent.train_critic(batch)
        for _ in range(50):
            last = agent.train_critic(batch)
        assert last < first

    def test_actor_step_raises_q(self) -> None:
        agent = _agent(hyper=replace(HYPER, lr_actor=1e-2))
        states = make_batch([_experience(alpha50=float(k)) for k in range(8)], agent.ranges).states
        first = agent.train_actor(make_batch([_experience(alpha50=float(k)) for k in range(8)], agent.ranges))
        for _ in range(30):
            agent.train_actor(make_batch([_experience(alpha50=float(k)) for k in range(8)], agent.ranges))
        _, mean_q = agent.actor_gradient(states)
        assert mean_q >= first

    def test_end_of_episode_training_batches_and_decay(self) -> None:
        agent = _agent()
        buffer = ReplayBuffer(100, np.random.default_rng(3))
        episode = [_experience(alpha50=float(k)) for k in range(10)]
        buffer.extend(episode)
        report = end_of_episode_training(agent, buffer, episode, replay_batches=2)
        assert len(report.critic_losses) == 3
        assert len(report.sampled) == 3
        assert report.sigma == pytest.approx(0.5 * 0.95)
        assert agent.sigma == report.sigma


class TestSession:
    def test_first_cycle_pushes_nothing(self) -> None:
        agent = _agent()
        session = AgentSession(agent, ReplayBuffer(100, np.random.default_rng(0)))
        session.on_cycle(make_state(), 0.0, 0)
        assert len(session.buffer) == 0
        session.on_cycle(make_state(alpha50=7.0), -0.3, 0)
        assert len(session.buffer) == 1
        exp = session.buffer.items()[0]
        assert exp.reward == -0.3
        assert exp.s_next.alpha50_prev == 7.0

    def test_positive_reward_is_clamped(self) -> None:
        session = AgentSession(_agent(), ReplayBuffer(100, np.random.default_rng(0)))
        session.on_cycle(make_state(), 0.0, 0)
        session.on_cycle(make_state(), 0.4, 0)
        assert session.buffer.items()[0].reward == 0.0

    def test_evaluation_actions_are_not_stored(self) -> None:
        agent = _agent()
        session = AgentSession(agent, ReplayBuffer(100, np.random.default_rng(0)))
        first = session.on_cycle(make_state(), 0.0, 0, evaluation=True)
        second = session.on_cycle(make_state(), -0.1, 0, evaluation=True)
        assert len(session.buffer) == 0
        assert first == second

    def test_done_trains_and_returns_next_action(self) -> None:
        agent = _agent()
        session = AgentSession(agent, ReplayBuffer(100, np.random.default_rng(0)))
        session.on_cycle(make_state(), 0.0, 0)
        for _ in range(5):
            session.on_cycle(make_state(), -0.2, 0)
        action = session.on_cycle(make_state(), -0.2, 1)
        assert isinstance(action, RawAction)
        assert len(session.buffer) == 6
        assert session.buffer.items()[-1].done == 1
        report = session.pop_report()
        assert report is not None
        assert session.pop_report() is None
        assert agent.sigma == pytest.approx(0.5 * 0.95)
        assert session.episode == []

    def test_validation_episode_does_not_train(self) -> None:
        agent = _agent()
        session = AgentSession(agent, ReplayBuffer(100, np.random.default_rng(0)))
        digest = agent.parameter_digest()
        session.on_cycle(make_state(), 0.0, 0, evaluation=True)
        for _ in range(4):
            session.on_cycle(make_state(), -0.2, 0, evaluation=True)
        session.on_cycle(make_state(), -0.2, 1, evaluation=False)
        assert agent.parameter_digest() == digest
        assert session.pop_report() is None

    def test_quantized_session_emits_float32_actions(self) -> None:
        session = AgentSession(_agent(), ReplayBuffer(100, np.random.default_rng(0)), quantize=True)
        action = session.on_cycle(make_state(alpha50=6.123456789), 0.0, 0)
        arr = action.as_array()
        assert np.array_equal(arr, arr.astype(np.float32).astype(np.float64))

    def test_restore_pending(self) -> None:
        session = AgentSession(_agent(), ReplayBuffer(100, np.random.default_rng(0)))
        session.restore_pending(make_state(), RawAction((0.0, 0.0, 0.0)), evaluation=False)
        session.on_cycle(make_state(alpha50=8.0), -0.1, 0)
        assert len(session.buffer) == 1
        assert session.buffer.items()[0].u.values == (0.0, 0.0, 0.0)


class TestPersistence:
    def test_checkpoint_roundtrip(self, tmp_path: Path) -> None:
        agent = _agent()
        agent.sigma = 0.123
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, agent, {"config_hash": "abc"})
        restored, meta = load_checkpoint(path, HYPER, StateRanges(), expected_hash="abc")
        assert restored.parameter_digest() == agent.parameter_digest()
        assert restored.sigma == 0.123
        assert meta["config_hash"] == "abc"
        assert restored.noise_rng.normal() == agent.noise_rng.normal()

    def test_checkpoint_hash_mismatch(self, tmp_path: Path) -> None:
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, _agent(), {"config_hash": "abc"})
        with pytest.raises(CheckpointError):
            load_checkpoint(path, HYPER, StateRanges(), expected_hash="other")

    def test_checkpoint_topology_mismatch(self, tmp_path: Path) -> None:
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, _agent(), {})
        with pytest.raises(CheckpointError):
            load_checkpoint(path, replace(HYPER, hidden=(4, 4)), StateRanges())

    def test_missing_checkpoint(self, tmp_path: Path) -> None:
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.npz", HYPER, StateRanges())

    def test_buffer_roundtrip(self, tmp_path: Path) -> None:
        buffer = ReplayBuffer(10, np.random.default_rng(4))
        buffer.extend(_experience(alpha50=float(k), done=k % 2) for k in range(6))
        path = tmp_path / "buffer.npz"
        save_buffer(path, buffer)
        restored = load_buffer(path)
        assert restored.digest() == buffer.digest()
        assert restored.capacity == 10
        assert restored.sample(3)[1].tolist() == buffer.sample(3)[1].tolist()
