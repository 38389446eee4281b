import math

import numpy as np
import pytest

import grad_core as gc
from config import (AblationFlags, EpisodeConfig, PPOConfig, RunConfig, ScheduleConfig, SceneConfig,
                    ShapingConfig, WorldModelConfig)
from policy_ppo import (AUX, CURVE_COLUMNS, EVAL_COLUMNS, HIDDEN, LOOKAHEAD_DIM, BufferNotSealedError,
                        NonFiniteLogitsError, PolicyNet, RolloutBuffer, RolloutCollector, WorldModelRequiredError,
                        _choose, act, aux_features, collect_policy_episodes, encode_obs, evaluate_policy, gae,
                        imagine_lookahead, ppo_loss, ppo_update, scene_pool, shape_reward, shard_gradients,
                        train_policy)
from replay_store import ReplayStore
from socialnav_sim import N_ACTIONS, N_RAYS, Observation, RewardTerms
from world_model import WorldModel, predict_next

BASE = AblationFlags(lookahead=False, traj_reward=False)


def observation(prev_action=-1):
    return Observation(depth=np.linspace(0.2, 0.8, N_RAYS), goal_polar=(3.0, 0.5),
                       pose=np.array([2.0, 3.0, 0.25]), prev_action=prev_action)


def filled_buffer(net, n_envs=4, length=3, seed=0):
    """Random rollout whose stored log-probs come from `net` on the same flattened batch"""
    rng = np.random.default_rng(seed)
    depth = rng.uniform(0, 1, (length, n_envs, N_RAYS))
    aux = rng.normal(size=(length, n_envs, AUX))
    goal = rng.normal(size=(length, n_envs, 2))
    hidden = rng.normal(0, 0.3, (length, n_envs, HIDDEN))
    lookahead = rng.normal(size=(length, n_envs, LOOKAHEAD_DIM))
    actions = rng.integers(0, N_ACTIONS, (length, n_envs))
    with gc.no_grad():
        e, _ = net.encode(depth.reshape(-1, N_RAYS), aux.reshape(-1, AUX), hidden.reshape(-1, HIDDEN))
        logits, values = net.heads(e, lookahead.reshape(-1, LOOKAHEAD_DIM), goal.reshape(-1, 2))
        log_probs = gc.categorical_logprob(logits, actions.reshape(-1)).data.reshape(length, n_envs)
    values = values.data.reshape(length, n_envs)

    buffer = RolloutBuffer(n_envs, length)
    for t in range(length):
        terms = [RewardTerms(r_goal=float(rng.normal(0, 0.1))) for _ in range(n_envs)]
        buffer.add(depth[t], aux[t], goal[t], hidden[t], lookahead[t], actions[t], log_probs[t], values[t],
                   terms, rng.random(n_envs) < 0.2)
    buffer.seal(np.zeros(n_envs), 0.99, 0.95)
    return buffer


def normalized(adv):
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def tiny_run_config(**overrides):
    settings = dict(
        episodes=EpisodeConfig(n_humans=1, max_steps=10, n_train_scenes=1, n_eval_scenes=1),
        ppo=PPOConfig(n_envs=2, minibatches=1, rollout_len=8, epochs=1, eval_episodes=2),
        ablation=BASE,
        schedule=ScheduleConfig(policy_steps=16),
    )
    settings.update(overrides)
    return RunConfig(**settings)


# ---------------------------------------------------------------------------
# observation features and acting
# ---------------------------------------------------------------------------

def test_aux_features_layout():
    start = aux_features(observation(), -1, 12.0, 12.0)
    assert start.shape == (AUX,)
    assert start[:N_ACTIONS].tolist() == [0.0] * N_ACTIONS
    assert start[N_ACTIONS:N_ACTIONS + 2] == pytest.approx([0.3, 0.5 / math.pi])
    assert start[-3:] == pytest.approx([2.0 / 12.0, 3.0 / 12.0, 0.25 / math.pi])
    assert aux_features(observation(), 2, 12.0, 12.0)[:N_ACTIONS].tolist() == [0.0, 0.0, 1.0, 0.0]


def test_previous_action_changes_the_embedding():
    net = PolicyNet(seed=3)
    e0, h0 = encode_obs(observation(), -1, np.zeros(HIDDEN), net)
    e1, _ = encode_obs(observation(), 1, np.zeros(HIDDEN), net)
    assert e0.shape == (HIDDEN,) and h0.shape == (HIDDEN,)
    assert not np.allclose(e0.data, e1.data)


def test_uniform_logits_argmax_picks_the_lowest_action():
    net = PolicyNet(seed=0)
    net.params['policy.actor.w'].data[:] = 0.0
    action, log_prob, value = act(np.zeros(HIDDEN), np.zeros(LOOKAHEAD_DIM), np.zeros(2), net, mode='argmax')
    assert action == 0
    assert log_prob == pytest.approx(math.log(0.25))
    assert math.isfinite(value)


def test_sampled_log_prob_matches_log_softmax():
    net = PolicyNet(seed=1)
    rng = np.random.default_rng(0)
    e, l_t, goal = rng.normal(size=HIDDEN), rng.normal(size=LOOKAHEAD_DIM), rng.normal(size=2)
    action, log_prob, _ = act(e, l_t, goal, net, mode='sample', rng=rng)
    with gc.no_grad():
        logits, _ = net.heads(e[None, :], l_t[None, :], goal[None, :])
    assert log_prob == pytest.approx(float(gc.log_softmax(logits).data[0, action]))


def test_sample_frequencies_follow_softmax():
    logits = np.array([0.5, -1.0, 1.2, 0.0])
    probs = np.exp(logits) / np.exp(logits).sum()
    n = 20000
    draws = _choose(np.tile(logits, (n, 1)), 'sample', np.random.default_rng(5))
    counts = np.bincount(draws, minlength=N_ACTIONS)
    sigma = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) < 4 * sigma)


def test_policy_gradients_match_finite_differences():
    net = PolicyNet(seed=7)
    rng = np.random.default_rng(3)
    depth, aux = rng.uniform(0, 1, (3, N_RAYS)), rng.normal(size=(3, AUX))
    hidden, lookahead = rng.normal(0, 0.3, (3, HIDDEN)), rng.normal(size=(3, LOOKAHEAD_DIM))
    goal, actions, returns = rng.normal(size=(3, 2)), np.array([0, 2, 3]), rng.normal(size=3)

    def loss_fn():
        e, _ = net.encode(depth, aux, hidden)
        logits, values = net.heads(e, lookahead, goal)
        return gc.add(gc.scale(gc.mean(gc.categorical_logprob(logits, actions)), -1.0), gc.mse(values, returns))

    assert gc.grad_check_params(loss_fn, net.params, step=1e-6, coords_per_param=2, seed=3) < 1e-3


def test_non_finite_logits():
    with pytest.raises(NonFiniteLogitsError):
        _choose(np.array([0.0, np.nan, 1.0, 2.0]), 'argmax', None)
    with pytest.raises(ValueError):
        _choose(np.zeros(N_ACTIONS), 'greedy', None)


def test_lookahead_blocks_follow_action_order():
    wm = WorldModel(WorldModelConfig(), seed=2)
    depth = np.random.default_rng(1).uniform(0, 1, (3, N_RAYS))
    frames = [wm.encoder.encode(d) for d in depth]
    l_t = imagine_lookahead(frames, [1, 3], wm)
    assert l_t.shape == (LOOKAHEAD_DIM,)
    blocks = l_t.reshape(N_ACTIONS, -1)
    with gc.no_grad():
        for a in range(N_ACTIONS):
            expected = predict_next(np.stack(frames), [1, 3, a], wm).data.mean(axis=0)
            assert np.allclose(blocks[a], expected, atol=1e-10)
    single = imagine_lookahead(frames[-1:], [], wm)
    assert single.shape == (LOOKAHEAD_DIM,)


def test_first_step_lookahead_uses_the_current_frame():
    wm = WorldModel(WorldModelConfig(), seed=2)
    depth = np.random.default_rng(4).uniform(0, 1, N_RAYS)
    fallback = imagine_lookahead([], [], wm, current_depth=depth)
    assert np.array_equal(fallback, imagine_lookahead([wm.encoder.encode(depth)], [], wm))
    with pytest.raises(ValueError):
        imagine_lookahead([], [], wm)


# ---------------------------------------------------------------------------
# reward shaping
# ---------------------------------------------------------------------------

def test_predicted_human_at_the_robot():
    terms = shape_reward(RewardTerms(r_goal=0.2), np.zeros((1, 4, 2)), np.array([True]), ShapingConfig())
    assert terms.r_traj == pytest.approx(0.0860, abs=1e-4)
    assert terms.r_traj == pytest.approx(0.1 * (1 + 0.9 + 0.81 + 0.729) / 4)
    assert terms.total == pytest.approx(0.2 - terms.r_traj)


def test_distant_or_invalid_humans_cost_nothing():
    far = np.full((2, 4, 2), 2.0)
    assert shape_reward(RewardTerms(), far, np.array([True, True]), ShapingConfig()).r_traj == 0.0
    near = np.zeros((2, 4, 2))
    assert shape_reward(RewardTerms(), near, np.array([False, False]), ShapingConfig()).r_traj == 0.0


def test_shaping_is_linear_in_weight():
    rng = np.random.default_rng(0)
    traj, valid = rng.normal(0, 0.5, (3, 4, 2)), np.array([True, False, True])
    once = shape_reward(RewardTerms(), traj, valid, ShapingConfig(w_traj=0.1)).r_traj
    twice = shape_reward(RewardTerms(), traj, valid, ShapingConfig(w_traj=0.2)).r_traj
    assert once > 0
    assert twice == pytest.approx(2 * once)


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------

def brute_force_gae(rewards, values, dones, bootstrap, gamma, lam):
    n = len(rewards)
    next_values = np.append(values[1:], bootstrap)
    deltas = rewards + gamma * next_values * (1 - dones) - values
    advantages = np.zeros(n)
    for t in range(n):
        weight = 1.0
        for k in range(t, n):
            advantages[t] += weight * deltas[k]
            weight *= gamma * lam * (1 - dones[k])
    return advantages


def test_single_terminal_step():
    adv, ret = gae([1.0], [0.0], [True], 0.0, 0.99, 0.95)
    assert adv.tolist() == [1.0]
    assert ret.tolist() == [1.0]


def test_gae_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(1, 21))
        rewards, values = rng.normal(size=n), rng.normal(size=n)
        dones = (rng.random(n) < 0.15).astype(float)
        bootstrap = float(rng.normal())
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.5, 1.0)
        adv, ret = gae(rewards, values, dones, bootstrap, gamma, lam)
        assert np.abs(adv - brute_force_gae(rewards, values, dones, bootstrap, gamma, lam)).max() < 1e-9
        assert np.allclose(ret, adv + values)


def test_gae_telescopes_without_dones():
    rng = np.random.default_rng(2)
    rewards, values, gamma = rng.normal(size=6), rng.normal(size=6), 0.9
    adv, _ = gae(rewards, values, np.zeros(6), 1.5, gamma, 1.0)
    for t in range(6):
        discounted = sum(gamma ** (k - t) * rewards[k] for k in range(t, 6))
        assert adv[t] == pytest.approx(discounted + gamma ** (6 - t) * 1.5 - values[t])


def test_gae_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        gae([1.0, 2.0], [0.0], [False, False], 0.0, 0.99, 0.95)


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------

def test_buffer_contracts():
    buffer = RolloutBuffer(n_envs=2, rollout_len=1)
    with pytest.raises(ValueError):
        buffer.seal(np.zeros(2), 0.99, 0.95)
    with pytest.raises(BufferNotSealedError):
        ppo_update(buffer, PolicyNet(), gc.OptimizerState.create('adam', PolicyNet().params, lr=1e-3),
                   PPOConfig(n_envs=2, minibatches=1), np.random.default_rng(0))
    terms = [RewardTerms(r_goal=0.1), RewardTerms(r_succ=2.5)]
    buffer.add(np.zeros((2, N_RAYS)), np.zeros((2, AUX)), np.zeros((2, 2)), np.zeros((2, HIDDEN)),
               np.zeros((2, LOOKAHEAD_DIM)), [0, 1], [0.0, 0.0], [0.0, 0.0], terms, [False, True])
    assert buffer.rewards[0].tolist() == [0.1, 2.5]
    with pytest.raises(ValueError):
        buffer.add(np.zeros((2, N_RAYS)), np.zeros((2, AUX)), np.zeros((2, 2)), np.zeros((2, HIDDEN)),
                   np.zeros((2, LOOKAHEAD_DIM)), [0, 1], [0.0, 0.0], [0.0, 0.0], terms, [False, False])


def test_unchanged_parameters_give_unit_ratio():
    net = PolicyNet(seed=4)
    buffer = filled_buffer(net)
    config = PPOConfig(n_envs=4, minibatches=1)
    _, stats = ppo_loss(buffer, np.arange(4), normalized(buffer.advantages), net, config)
    assert stats['max_ratio_dev'] < 1e-9
    assert stats['policy_loss'] == pytest.approx(0.0, abs=1e-9)

    optimizer = gc.OptimizerState.create('adam', net.params, lr=1e-3)
    summary = ppo_update(buffer, net, optimizer, PPOConfig(n_envs=4, minibatches=2, epochs=2),
                         np.random.default_rng(0))
    assert summary['first_ratio_dev'] < 1e-9
    assert optimizer.step_count == 4


def test_zero_clip_sends_no_policy_gradient():
    net = PolicyNet(seed=5)
    buffer = filled_buffer(net, seed=1)
    config = PPOConfig.model_construct(clip_eps=0.0, value_coef=0.0, entropy_coef=0.0)
    gc.zero_grad(net.params)
    total, _ = ppo_loss(buffer, np.arange(4), normalized(buffer.advantages), net, config)
    gc.backward(total)
    for p in net.params.values():
        assert p.grad is None or not p.grad.any()


def test_shard_average_equals_full_batch_gradient():
    net = PolicyNet(seed=6)
    buffer = filled_buffer(net, seed=2)
    adv = normalized(buffer.advantages)
    envs = np.arange(4)
    full, _ = shard_gradients(buffer, envs, adv, net, PPOConfig(n_envs=4, minibatches=1, shards=1))
    split, _ = shard_gradients(buffer, envs, adv, net, PPOConfig(n_envs=4, minibatches=1, shards=2))
    for name in full:
        assert np.abs(full[name] - split[name]).max() < 1e-9


def test_shards_must_divide_the_minibatch():
    with pytest.raises(ValueError):
        PPOConfig(n_envs=6, minibatches=2, shards=2)


# ---------------------------------------------------------------------------
# rollouts with a world model
# ---------------------------------------------------------------------------

def test_collection_needs_a_world_model_when_imagining():
    scenes = scene_pool(0, 'scenes', 1, SceneConfig())
    with pytest.raises(WorldModelRequiredError):
        RolloutCollector(scenes, EpisodeConfig(), PolicyNet(), None, PPOConfig(n_envs=2, minibatches=1),
                         ShapingConfig(), AblationFlags(), seed=0)
    with pytest.raises(WorldModelRequiredError):
        train_policy(tiny_run_config(ablation=AblationFlags(lookahead=True, traj_reward=False)), None, seed=0,
                     verbose=False)


def test_policy_update_leaves_the_world_model_untouched():
    wm = WorldModel(WorldModelConfig(), seed=0)
    before = gc.parameter_checksum(wm.parameters())
    net = PolicyNet(seed=1)
    ppo = PPOConfig(n_envs=2, minibatches=1, rollout_len=4, epochs=1)
    collector = RolloutCollector(scene_pool(0, 'scenes', 1, SceneConfig()),
                                 EpisodeConfig(n_humans=2, max_steps=6), net, wm, ppo, ShapingConfig(),
                                 AblationFlags(), seed=0)
    buffer, _ = collector.collect()
    assert buffer.sealed
    assert np.abs(buffer.lookahead).sum() > 0
    for t, row in enumerate(buffer.reward_terms):
        for i, terms in enumerate(row):
            assert terms.total == terms.r_goal + terms.r_succ - terms.r_coll - terms.r_traj
            assert buffer.rewards[t, i] == terms.total

    ppo_update(buffer, net, gc.OptimizerState.create('adam', net.params, lr=ppo.lr), ppo,
               np.random.default_rng(0))
    assert gc.parameter_checksum(wm.parameters()) == before
    assert all(p.grad is None for p in wm.trainable().values())


def test_lookahead_off_feeds_zeros_even_with_a_world_model():
    wm = WorldModel(WorldModelConfig(), seed=0)
    collector = RolloutCollector(scene_pool(0, 'scenes', 1, SceneConfig()),
                                 EpisodeConfig(n_humans=2, max_steps=6), PolicyNet(seed=1), wm,
                                 PPOConfig(n_envs=2, minibatches=1, rollout_len=4, epochs=1), ShapingConfig(),
                                 AblationFlags(lookahead=False, traj_reward=True), seed=0)
    assert collector.wm is wm
    buffer, _ = collector.collect()
    assert buffer.lookahead.shape == (4, 2, LOOKAHEAD_DIM)
    assert not buffer.lookahead.any()


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def test_zero_updates_evaluate_the_initial_policy():
    config = tiny_run_config(schedule=ScheduleConfig(policy_steps=0))
    result = train_policy(config, None, seed=3, verbose=False)
    assert result.updates == 0
    assert result.curve.empty and list(result.curve.columns) == CURVE_COLUMNS
    assert result.report.n_episodes == 2

    scenes = scene_pool(3, 'eval_scenes', 1, config.scene)
    again = evaluate_policy(PolicyNet(seed=result.net.seed), None, scenes, config.episodes, 2, 3, BASE, n_robots=1)
    assert again.aggregate() == result.report.aggregate()


def test_short_training_run(tmp_path):
    result = train_policy(tiny_run_config(), None, seed=0, checkpoint_dir=tmp_path, verbose=False)
    assert result.updates == 1
    assert len(result.curve) == 1
    assert result.curve['env_steps'].tolist() == [16]
    assert list(result.evals.columns) == EVAL_COLUMNS
    assert len(result.evals) == 1
    assert (tmp_path / 'policy_update1.ntck').exists()

    loaded = PolicyNet.from_checkpoint(tmp_path / 'policy_update1.ntck')
    assert gc.parameter_checksum(loaded.params) == gc.parameter_checksum(result.net.params)


def test_evaluation_writes_one_trace_per_episode(tmp_path):
    config = tiny_run_config()
    scenes = scene_pool(0, 'eval_scenes', 1, config.scene)
    report = evaluate_policy(PolicyNet(seed=2), None, scenes, config.episodes, 3, 0, BASE, n_robots=2,
                             trace_dir=tmp_path)
    assert report.n_episodes == 3
    assert sorted(p.name for p in tmp_path.iterdir()) == [f'episode_{k:05d}.jsonl' for k in range(3)]


def test_policy_episodes_extend_the_replay():
    config = tiny_run_config()
    replay = ReplayStore(n_humans=4, horizon=4)
    scenes = scene_pool(0, 'scenes', 1, config.scene)
    next_id = collect_policy_episodes(PolicyNet(seed=0), None, scenes, config.episodes, BASE, replay,
                                      n_episodes=2, first_episode_id=10, seed=0)
    assert next_id == 12
    assert replay.episode_ids() == [10, 11]
    for eid in (10, 11):
        episode = replay.episode(eid)
        assert episode['done'][-1] and not episode['done'][:-1].any()
        assert len(episode) <= config.episodes.max_steps
