"""
Imagination-augmented actor-critic trained with PPO + GAE.

Every step the world model imagines the next latent under each of the four
actions; the mean-pooled imagined latents form a detached lookahead feature
that is fused with a recurrent observation embedding. The executed action's
imagined latent is also decoded into human trajectories for the predictive
social cost. Shards of a minibatch compute gradients separately and are
averaged before one shared Adam step.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import grad_core as gc
from config import (VERBOSE, AblationFlags, EpisodeConfig, PPOConfig, RunConfig, SceneConfig,
                    ShapingConfig, derive_seed)
from replay_store import ReplayStore, record_rollout
from socialnav_sim import (N_ACTIONS, N_RAYS, EpisodeRecord, MetricsReport, Observation, RewardTerms, Scene,
                           SocialNavEnv, cached_scene, compute_metrics, export_trace)
from world_model import WorldModel, imagine_candidates

HIDDEN = 64
CONV_FEATURES = 48
FUSION = 128
AUX = N_ACTIONS + 2 + 3  # prev-action one-hot, goal polar, pose
LOOKAHEAD_DIM = N_ACTIONS * 32
GOAL_SCALE = 10.0
ADV_EPS = 1e-8

CURVE_COLUMNS = ['env_steps', 'SR', 'SPL', 'PSC', 'H-Coll', 'mean_reward', 'policy_loss', 'value_loss', 'entropy']
EVAL_COLUMNS = ['env_steps', 'SR', 'SPL', 'PSC', 'H-Coll', 'T-SR', 'T-SPL', 'episodes']


class NonFiniteLogitsError(ValueError):
    pass


class BufferNotSealedError(ValueError):
    pass


class WorldModelRequiredError(ValueError):
    pass


def goal_features(obs: Observation) -> np.ndarray:
    rho, phi = obs.goal_polar
    return np.array([rho / GOAL_SCALE, phi / math.pi])


def aux_features(obs: Observation, prev_action: int, scene_width: float, scene_height: float) -> np.ndarray:
    """prev-action one-hot (zeros at episode start), scaled goal, normalized pose"""
    one_hot = np.zeros(N_ACTIONS)
    if prev_action >= 0:
        one_hot[prev_action] = 1.0
    x, y, heading = obs.pose
    pose = np.array([x / scene_width, y / scene_height, heading / math.pi])
    return np.concatenate([one_hot, goal_features(obs), pose])


class PolicyNet:
    """Conv scan encoder, gated recurrent cell, fusion trunk, actor and critic heads"""

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.seed = seed
        shapes = {
            'policy.conv1.w': ((8, 1, 5), 5),
            'policy.conv2.w': ((16, 8, 5), 40),
            'policy.proj.w': ((256, CONV_FEATURES), 256),
            'policy.embed.w': ((CONV_FEATURES + AUX, HIDDEN), CONV_FEATURES + AUX),
            'policy.cell.w': ((2 * HIDDEN, HIDDEN), 2 * HIDDEN),
            'policy.cell.u': ((2 * HIDDEN, HIDDEN), 2 * HIDDEN),
            'policy.fuse1.w': ((HIDDEN + LOOKAHEAD_DIM + 2, FUSION), HIDDEN + LOOKAHEAD_DIM + 2),
            'policy.fuse2.w': ((FUSION, FUSION), FUSION),
            'policy.actor.w': ((FUSION, N_ACTIONS), FUSION),
            'policy.critic.w': ((FUSION, 1), FUSION),
        }
        biases = {
            'policy.conv1.b': 8, 'policy.conv2.b': 16, 'policy.proj.b': CONV_FEATURES,
            'policy.embed.b': HIDDEN, 'policy.cell.wb': HIDDEN, 'policy.cell.ub': HIDDEN,
            'policy.fuse1.b': FUSION, 'policy.fuse2.b': FUSION, 'policy.actor.b': N_ACTIONS,
            'policy.critic.b': 1,
        }
        self.params: Dict[str, gc.Tensor] = {}
        for name, (shape, fan_in) in shapes.items():
            self.params[name] = gc.init_weight(rng, shape, fan_in, name)
        self.params['policy.actor.w'].data *= 0.01  # near-uniform initial policy
        for name, size in biases.items():
            self.params[name] = gc.init_zeros((size,), name)

    def save(self, path):
        gc.save_checkpoint(path, self.params)

    @classmethod
    def from_checkpoint(cls, path) -> 'PolicyNet':
        net = cls()
        gc.load_into(net.params, path)
        return net

    def encode(self, depth, aux, hidden) -> Tuple[gc.Tensor, gc.Tensor]:
        """(B, 64) scans, (B, 9) aux, (B, 64) hidden -> (e_t, hidden'); here e_t is hidden'"""
        p = self.params
        depth = gc.as_tensor(depth)
        batch = depth.shape[0]
        x = gc.reshape(depth, (batch, 1, N_RAYS))
        x = gc.relu(gc.conv1d(x, p['policy.conv1.w'], p['policy.conv1.b'], stride=2, padding=2))
        x = gc.relu(gc.conv1d(x, p['policy.conv2.w'], p['policy.conv2.b'], stride=2, padding=2))
        x = gc.linear(gc.reshape(x, (batch, 256)), p['policy.proj.w'], p['policy.proj.b'])
        x = gc.linear(gc.concat([x, gc.as_tensor(aux)], axis=-1), p['policy.embed.w'], p['policy.embed.b'])

        hidden = gc.as_tensor(hidden)
        xh = gc.concat([x, hidden], axis=-1)
        update = gc.sigmoid(gc.linear(xh, p['policy.cell.u'], p['policy.cell.ub']))
        candidate = gc.tanh(gc.linear(xh, p['policy.cell.w'], p['policy.cell.wb']))
        new_hidden = gc.add(hidden, gc.mul(update, gc.sub(candidate, hidden)))
        return new_hidden, new_hidden

    def heads(self, e, lookahead, goal) -> Tuple[gc.Tensor, gc.Tensor]:
        """Late fusion of (e_t, l_t, goal) -> (logits (B, 4), values (B,))"""
        p = self.params
        x = gc.concat([gc.as_tensor(e), gc.as_tensor(lookahead), gc.as_tensor(goal)], axis=-1)
        x = gc.relu(gc.linear(x, p['policy.fuse1.w'], p['policy.fuse1.b']))
        x = gc.relu(gc.linear(x, p['policy.fuse2.w'], p['policy.fuse2.b']))
        logits = gc.linear(x, p['policy.actor.w'], p['policy.actor.b'])
        values = gc.reshape(gc.linear(x, p['policy.critic.w'], p['policy.critic.b']), (x.shape[0],))
        return logits, values


def encode_obs(obs: Observation, prev_action: int, hidden: np.ndarray, net: PolicyNet,
               scene_size: Tuple[float, float] = (12.0, 12.0)) -> Tuple[gc.Tensor, gc.Tensor]:
    """Single observation -> (e_t (64,), hidden' (64,))"""
    aux = aux_features(obs, prev_action, *scene_size)
    e, h = net.encode(obs.depth[None, :], aux[None, :], np.asarray(hidden, dtype=np.float64)[None, :])
    return gc.reshape(e, (HIDDEN,)), gc.reshape(h, (HIDDEN,))


def imagine_lookahead(z_ctx: Sequence[np.ndarray], a_ctx: Sequence[int], wm: WorldModel,
                      current_depth: Optional[np.ndarray] = None) -> np.ndarray:
    """l_t: mean-pooled imagined latent of every action, in action-id order (detached numpy)

    An empty context (first step of an episode) falls back to the current frame alone.
    """
    if len(z_ctx) == 0:
        if current_depth is None:
            raise ValueError('empty lookahead context and no current depth scan to fall back on')
        z_ctx, a_ctx = [wm.encoder.encode(current_depth)], []
    imagined = imagine_candidates(wm, [np.stack(z_ctx)], [list(a_ctx)])[0]
    return imagined.mean(axis=1).reshape(-1)


def _choose(logits: np.ndarray, mode: str, rng: Optional[np.random.Generator]) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLogitsError(f'policy produced non-finite logits: {logits.tolist()}')
    if mode == 'argmax':
        return np.argmax(logits, axis=-1)
    if mode != 'sample':
        raise ValueError(f'unknown action mode {mode!r}')
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs = shifted / shifted.sum(axis=-1, keepdims=True)
    return np.array([rng.choice(N_ACTIONS, p=row) for row in probs.reshape(-1, N_ACTIONS)]).reshape(
        logits.shape[:-1])


def act(e_t, l_t, goal, net: PolicyNet, mode: str = 'sample',
        rng: Optional[np.random.Generator] = None) -> Tuple[int, float, float]:
    """(action, log_prob, value) for one step; argmax ties resolve to the lowest action id"""
    with gc.no_grad():
        logits, value = net.heads(np.asarray(gc.as_tensor(e_t).data)[None, :],
                                  np.asarray(l_t, dtype=np.float64)[None, :],
                                  np.asarray(goal, dtype=np.float64)[None, :])
    action = int(_choose(logits.data[0], mode, rng))
    log_prob = float(gc.log_softmax(logits).data[0, action])
    return action, log_prob, float(value.data[0])


def shape_reward(terms: RewardTerms, traj: np.ndarray, validity: np.ndarray,
                 cfg: ShapingConfig) -> RewardTerms:
    """Predictive social cost from imagined human trajectories (robot frame)"""
    traj = np.asarray(traj, dtype=np.float64)
    valid = np.asarray(validity, dtype=bool)
    if not valid.any():
        return terms.with_traj(0.0)
    horizon = traj.shape[1]
    discount = cfg.gamma_p ** np.arange(horizon)
    hinge = np.maximum(0.0, cfg.d_safe - np.linalg.norm(traj[valid], axis=-1))
    r_traj = cfg.w_traj * float((hinge * discount).sum()) / (int(valid.sum()) * horizon)
    return terms.with_traj(r_traj)


def gae(rewards, values, dones, bootstrap_value, gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation along axis 0 (extra axes are independent envs)"""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError(f'gae inputs differ in shape: rewards {rewards.shape}, values {values.shape}, '
                         f'dones {dones.shape}')
    advantages = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap_value, dtype=np.float64)
    next_adv = np.zeros_like(next_value)
    for t in reversed(range(len(rewards))):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        advantages[t] = next_adv
        next_value = values[t]
    return advantages, advantages + values


@dataclass
class RolloutBuffer:
    """Per-step, per-env records of one rollout; arrays are (rollout_len, n_envs, ...)"""
    n_envs: int
    rollout_len: int
    depth: Optional[np.ndarray] = None
    aux: Optional[np.ndarray] = None
    goal: Optional[np.ndarray] = None
    hidden: Optional[np.ndarray] = None
    lookahead: Optional[np.ndarray] = None
    actions: Optional[np.ndarray] = None
    log_probs: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    rewards: Optional[np.ndarray] = None
    dones: Optional[np.ndarray] = None
    reward_terms: List[List[RewardTerms]] = field(default_factory=list)
    step: int = 0
    sealed: bool = False
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __post_init__(self):
        t, n = self.rollout_len, self.n_envs
        self.depth = np.zeros((t, n, N_RAYS))
        self.aux = np.zeros((t, n, AUX))
        self.goal = np.zeros((t, n, 2))
        self.hidden = np.zeros((t, n, HIDDEN))
        self.lookahead = np.zeros((t, n, LOOKAHEAD_DIM))
        self.actions = np.zeros((t, n), dtype=np.int64)
        self.log_probs = np.zeros((t, n))
        self.values = np.zeros((t, n))
        self.rewards = np.zeros((t, n))
        self.dones = np.zeros((t, n), dtype=bool)

    @property
    def full(self) -> bool:
        return self.step == self.rollout_len

    def add(self, depth, aux, goal, hidden, lookahead, actions, log_probs, values,
            terms: List[RewardTerms], dones):
        if self.sealed or self.full:
            raise ValueError(f'rollout buffer is {"sealed" if self.sealed else "full"}')
        t = self.step
        self.depth[t], self.aux[t], self.goal[t] = depth, aux, goal
        self.hidden[t], self.lookahead[t] = hidden, lookahead
        self.actions[t], self.log_probs[t], self.values[t] = actions, log_probs, values
        self.rewards[t] = [tm.total for tm in terms]
        self.dones[t] = dones
        self.reward_terms.append(list(terms))
        self.step += 1

    def seal(self, bootstrap_values: np.ndarray, gamma: float, lam: float):
        if not self.full:
            raise ValueError(f'cannot seal a rollout after {self.step}/{self.rollout_len} steps')
        self.advantages, self.returns = gae(self.rewards, self.values, self.dones, bootstrap_values, gamma, lam)
        self.sealed = True


def ppo_loss(buffer: RolloutBuffer, envs: np.ndarray, advantages: np.ndarray, net: PolicyNet,
             config: PPOConfig) -> Tuple[gc.Tensor, Dict[str, float]]:
    """Clipped surrogate + value + entropy on every step of the given envs"""
    def flat(a):
        picked = a[:, envs]
        return picked.reshape((-1,) + picked.shape[2:])

    e, _ = net.encode(flat(buffer.depth), flat(buffer.aux), flat(buffer.hidden))
    logits, values = net.heads(e, flat(buffer.lookahead), flat(buffer.goal))
    actions = flat(buffer.actions)
    adv = flat(advantages)

    logp = gc.categorical_logprob(logits, actions)
    ratio = gc.exp(gc.sub(logp, flat(buffer.log_probs)))
    surr1 = gc.mul(ratio, adv)
    surr2 = gc.mul(gc.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps), adv)
    policy_loss = gc.scale(gc.mean(gc.minimum(surr1, surr2)), -1.0)
    value_loss = gc.mse(values, flat(buffer.returns))
    entropy = gc.mean(gc.categorical_entropy(logits))
    total = gc.sub(gc.add(policy_loss, gc.scale(value_loss, config.value_coef)),
                   gc.scale(entropy, config.entropy_coef))
    stats = {'policy_loss': policy_loss.item(), 'value_loss': value_loss.item(), 'entropy': entropy.item(),
             'max_ratio_dev': float(np.abs(ratio.data - 1.0).max())}
    return total, stats


def shard_gradients(buffer: RolloutBuffer, envs: np.ndarray, advantages: np.ndarray, net: PolicyNet,
                    config: PPOConfig) -> Tuple[Dict[str, np.ndarray], Dict[str, float]]:
    """Average of per-shard gradients over an even split of the minibatch's envs"""
    summed: Dict[str, np.ndarray] = {name: np.zeros(p.shape) for name, p in net.params.items()}
    shard_stats = []
    shards = np.array_split(envs, config.shards)
    for shard in shards:
        gc.zero_grad(net.params)
        total, stats = ppo_loss(buffer, shard, advantages, net, config)
        gc.backward(total)
        for name, p in net.params.items():
            if p.grad is not None:
                summed[name] += p.grad
        shard_stats.append(stats)
    grads = {name: g / len(shards) for name, g in summed.items()}
    merged = {key: float(np.mean([s[key] for s in shard_stats])) for key in shard_stats[0]}
    merged['max_ratio_dev'] = max(s['max_ratio_dev'] for s in shard_stats)
    return grads, merged


def ppo_update(buffer: RolloutBuffer, net: PolicyNet, optimizer: gc.OptimizerState, config: PPOConfig,
               rng: np.random.Generator) -> Dict[str, float]:
    """Epochs of env-sequence minibatches; one shared optimizer step per minibatch"""
    if not buffer.sealed:
        raise BufferNotSealedError('ppo_update needs a sealed rollout (call seal() first)')
    adv = buffer.advantages
    adv = (adv - adv.mean()) / (adv.std() + ADV_EPS)
    history = []
    first_ratio_dev = None
    for _ in range(config.epochs):
        order = rng.permutation(buffer.n_envs)
        for envs in np.array_split(order, config.minibatches):
            grads, stats = shard_gradients(buffer, envs, adv, net, config)
            if first_ratio_dev is None:
                first_ratio_dev = stats['max_ratio_dev']
            for name, p in net.params.items():
                p.grad = grads[name]
            gc.clip_grad_norm(net.params, config.grad_clip)
            gc.optimizer_step(optimizer, net.params)
            gc.zero_grad(net.params)
            history.append(stats)
    summary = {key: float(np.mean([h[key] for h in history])) for key in ('policy_loss', 'value_loss', 'entropy')}
    summary['first_ratio_dev'] = first_ratio_dev
    return summary


class AgentState:
    """Recurrent state, previous action and world-model context of one robot"""

    def __init__(self, wm: Optional[WorldModel], obs: Observation):
        self.hidden = np.zeros(HIDDEN)
        self.prev_action = -1
        self.window = wm.config.context + 1 if wm is not None else 1
        self.frames: List[np.ndarray] = []
        self.actions: List[int] = []
        self.wm = wm
        self.observe(obs)

    def observe(self, obs: Observation):
        if self.wm is not None:
            self.frames.append(self.wm.encoder.encode(obs.depth))
            self.frames = self.frames[-self.window:]
            self.actions = self.actions[-(len(self.frames) - 1):] if len(self.frames) > 1 else []

    def acted(self, action: int, hidden: np.ndarray):
        self.hidden = hidden
        self.prev_action = action
        if self.wm is not None:
            self.actions.append(action)


def policy_step(net: PolicyNet, wm: Optional[WorldModel], ablation: AblationFlags, agents: List[AgentState],
                observations: List[Observation], scenes: List[Scene]):
    """Shared inference for a batch of robots; returns inputs, imagined latents and network outputs"""
    depth = np.stack([obs.depth for obs in observations])
    aux = np.stack([aux_features(obs, ag.prev_action, sc.width, sc.height)
                    for obs, ag, sc in zip(observations, agents, scenes)])
    goal = np.stack([goal_features(obs) for obs in observations])
    hidden = np.stack([ag.hidden for ag in agents])
    imagined = None
    if wm is not None and ablation.needs_world_model:
        imagined = imagine_candidates(wm, [np.stack(ag.frames) for ag in agents], [ag.actions for ag in agents])
    if ablation.lookahead:
        lookahead = imagined.mean(axis=2).reshape(len(agents), LOOKAHEAD_DIM)
    else:
        lookahead = np.zeros((len(agents), LOOKAHEAD_DIM))
    with gc.no_grad():
        e, new_hidden = net.encode(depth, aux, hidden)
        logits, values = net.heads(e, lookahead, goal)
    return depth, aux, goal, hidden, lookahead, imagined, logits.data, values.data, new_hidden.data


def decoded_trajectories(wm: WorldModel, imagined: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Decode the imagined latent of each executed action into (n, N_h, T, 2) trajectories"""
    with gc.no_grad():
        _, traj, _ = wm.decode_batch(imagined[np.arange(len(actions)), actions])
    return traj.data


def scene_pool(seed: int, stream: str, count: int, config: SceneConfig) -> List[Scene]:
    base = derive_seed(seed, stream)
    return [cached_scene((base + i) % 2 ** 64, config) for i in range(count)]


class RolloutCollector:
    """Steps n_envs single-robot environments in lockstep, auto-resetting finished episodes"""

    def __init__(self, scenes: List[Scene], episodes: EpisodeConfig, net: PolicyNet, wm: Optional[WorldModel],
                 ppo: PPOConfig, shaping: ShapingConfig, ablation: AblationFlags, seed: int):
        if ablation.needs_world_model and wm is None:
            raise WorldModelRequiredError(f'ablation {ablation.label} needs a world model')
        self.scenes = scenes
        self.episodes = episodes
        self.net = net
        self.wm = wm if ablation.needs_world_model else None
        self.ppo = ppo
        self.shaping = shaping
        self.ablation = ablation
        self.episode_rng = np.random.default_rng(derive_seed(seed, 'episodes'))
        self.action_rng = np.random.default_rng(derive_seed(seed, 'policy_actions'))
        self.envs: List[SocialNavEnv] = []
        self.agents: List[AgentState] = []
        self.episode_count = 0
        self.env_steps = 0
        for _ in range(ppo.n_envs):
            env, agent = self._new_episode()
            self.envs.append(env)
            self.agents.append(agent)

    def _new_episode(self) -> Tuple[SocialNavEnv, AgentState]:
        scene = self.scenes[int(self.episode_rng.integers(len(self.scenes)))]
        env = SocialNavEnv(scene, n_robots=1, n_humans=self.episodes.n_humans, max_steps=self.episodes.max_steps,
                           min_goal_distance=self.episodes.min_goal_distance,
                           max_goal_distance=self.episodes.max_goal_distance)
        observations = env.reset(int(self.episode_rng.integers(2 ** 63)))
        return env, AgentState(self.wm, observations[0])

    def collect(self) -> Tuple[RolloutBuffer, List[EpisodeRecord]]:
        buffer = RolloutBuffer(self.ppo.n_envs, self.ppo.rollout_len)
        finished: List[EpisodeRecord] = []
        n_pred = self.wm.config.n_humans_pred if self.wm is not None else 0
        for _ in range(self.ppo.rollout_len):
            observations = [env.observations[0] for env in self.envs]
            scenes = [env.scene for env in self.envs]
            depth, aux, goal, hidden, lookahead, imagined, logits, values, new_hidden = policy_step(
                self.net, self.wm, self.ablation, self.agents, observations, scenes)
            actions = _choose(logits, 'sample', self.action_rng)
            log_probs = gc.log_softmax(logits).data[np.arange(len(actions)), actions]
            validity = [env.nearest_humans(0, n_pred)[1] for env in self.envs] if n_pred else None
            traj = decoded_trajectories(self.wm, imagined, actions) if self.ablation.traj_reward else None

            terms, dones = [], []
            for i, env in enumerate(self.envs):
                result = env.step([int(actions[i])])
                tm = result.reward_terms[0]
                if self.ablation.traj_reward:
                    tm = shape_reward(tm, traj[i], validity[i], self.shaping)
                terms.append(tm)
                dones.append(result.done[0])
                self.agents[i].acted(int(actions[i]), new_hidden[i])
            buffer.add(depth, aux, goal, hidden, lookahead, actions, log_probs, values, terms, dones)
            self.env_steps += len(self.envs)

            for i, env in enumerate(self.envs):
                if dones[i]:
                    finished.extend(env.episode_records(self.episode_count))
                    self.episode_count += 1
                    self.envs[i], self.agents[i] = self._new_episode()
                else:
                    self.agents[i].observe(env.observations[0])

        observations = [env.observations[0] for env in self.envs]
        *_, bootstrap, _ = policy_step(self.net, self.wm, self.ablation, self.agents, observations,
                                       [env.scene for env in self.envs])
        buffer.seal(bootstrap, self.ppo.gamma, self.ppo.gae_lambda)
        return buffer, finished


def run_policy_episode(env: SocialNavEnv, net: PolicyNet, wm: Optional[WorldModel], ablation: AblationFlags,
                       mode: str = 'argmax', rng: Optional[np.random.Generator] = None,
                       on_step: Optional[Callable] = None):
    """Drive every robot of a reset env with the policy, each with its own state and no sharing"""
    if ablation.needs_world_model and wm is None:
        raise WorldModelRequiredError(f'ablation {ablation.label} needs a world model')
    wm = wm if ablation.needs_world_model else None
    agents = [AgentState(wm, obs) for obs in env.observations]
    while not env.all_done:
        active = [i for i, robot in enumerate(env.robots) if not robot.done]
        observations = [env.observations[i] for i in active]
        *_, logits, _, new_hidden = policy_step(net, wm, ablation, [agents[i] for i in active], observations,
                                                [env.scene] * len(active))
        chosen = _choose(logits, mode, rng)
        actions: List[Optional[int]] = [None] * env.n_robots
        for slot, i in enumerate(active):
            actions[i] = int(chosen[slot])
        if on_step is not None:
            on_step(env, actions)
        env.step(actions)
        for slot, i in enumerate(active):
            agents[i].acted(actions[i], new_hidden[slot])
            agents[i].observe(env.observations[i])


def evaluate_policy(net: PolicyNet, wm: Optional[WorldModel], scenes: List[Scene], episodes: EpisodeConfig,
                    n_episodes: int, seed: int, ablation: AblationFlags, n_robots: Optional[int] = None,
                    trace_dir=None) -> MetricsReport:
    """Argmax rollouts on held-out episode seeds; optional per-episode trace export"""
    n_robots = n_robots or episodes.n_robots
    base = derive_seed(seed, 'eval_episodes')
    records: List[EpisodeRecord] = []
    for k in range(n_episodes):
        env = SocialNavEnv(scenes[k % len(scenes)], n_robots=n_robots, n_humans=episodes.n_humans,
                           max_steps=episodes.max_steps, min_goal_distance=episodes.min_goal_distance,
                           max_goal_distance=episodes.max_goal_distance)
        env.reset((base + k) % 2 ** 64)
        run_policy_episode(env, net, wm, ablation)
        records.extend(env.episode_records(k))
        if trace_dir is not None:
            export_trace(f'{trace_dir}/episode_{k:05d}.jsonl', env, k)
    return compute_metrics(records)


def collect_policy_episodes(net: PolicyNet, wm: Optional[WorldModel], scenes: List[Scene],
                            episodes: EpisodeConfig, ablation: AblationFlags, replay: ReplayStore,
                            n_episodes: int, first_episode_id: int, seed: int) -> int:
    """Sampled policy rollouts appended to the replay store; returns the next free episode id"""
    rng = np.random.default_rng(derive_seed(seed, 'collect'))
    wm = wm if ablation.needs_world_model else None
    episode_id = first_episode_id
    for _ in range(n_episodes):
        scene = scenes[int(rng.integers(len(scenes)))]
        env = SocialNavEnv(scene, n_robots=1, n_humans=episodes.n_humans, max_steps=episodes.max_steps,
                           min_goal_distance=episodes.min_goal_distance,
                           max_goal_distance=episodes.max_goal_distance)
        env.reset(int(rng.integers(2 ** 63)))
        driver = _PolicyDriver(net, wm, ablation, env, rng)
        replay.append_episode(record_rollout(env, driver, episode_id, replay.n_humans, replay.horizon))
        episode_id += 1
    return episode_id


class _PolicyDriver:
    """Single-robot action callback for record_rollout"""

    def __init__(self, net, wm, ablation, env, rng):
        self.net, self.wm, self.ablation, self.rng = net, wm, ablation, rng
        self.agent = AgentState(wm, env.observations[0])

    def __call__(self, env: SocialNavEnv) -> int:
        if env.t > 0:
            self.agent.observe(env.observations[0])
        *_, logits, _, new_hidden = policy_step(self.net, self.wm, self.ablation, [self.agent],
                                                [env.observations[0]], [env.scene])
        action = int(_choose(logits, 'sample', self.rng)[0])
        self.agent.acted(action, new_hidden[0])
        return action


@dataclass
class PolicyTrainingResult:
    net: PolicyNet
    curve: pd.DataFrame
    evals: pd.DataFrame
    report: MetricsReport
    updates: int


def _curve_row(env_steps: int, records: List[EpisodeRecord], buffer: RolloutBuffer, stats: Dict) -> Dict:
    if records:
        agg = compute_metrics(records).aggregate()
        metrics = {key: agg[key] for key in ('SR', 'SPL', 'PSC', 'H-Coll')}
    else:
        metrics = {key: float('nan') for key in ('SR', 'SPL', 'PSC', 'H-Coll')}
    return {'env_steps': env_steps, **metrics, 'mean_reward': float(buffer.rewards.mean()),
            'policy_loss': stats['policy_loss'], 'value_loss': stats['value_loss'], 'entropy': stats['entropy']}


def train_policy(config: RunConfig, wm: Optional[WorldModel], seed: int, net: Optional[PolicyNet] = None,
                 checkpoint_dir=None, verbose: bool = VERBOSE) -> PolicyTrainingResult:
    """PPO over collected rollouts with periodic argmax evaluation on held-out episodes"""
    ablation = config.ablation
    if ablation.needs_world_model and wm is None:
        raise WorldModelRequiredError(f'ablation {ablation.label} needs a world model checkpoint')
    ppo = config.ppo
    scenes = scene_pool(seed, 'scenes', config.episodes.n_train_scenes, config.scene)
    eval_scenes = scene_pool(seed, 'eval_scenes', config.episodes.n_eval_scenes, config.scene)
    net = net or PolicyNet(seed=derive_seed(seed, 'policy'))
    optimizer = gc.OptimizerState.create('adam', net.params, lr=ppo.lr)
    update_rng = np.random.default_rng(derive_seed(seed, 'policy'))
    steps_per_update = ppo.n_envs * ppo.rollout_len
    updates = math.ceil(config.schedule.policy_steps / steps_per_update)

    collector = RolloutCollector(scenes, config.episodes, net, wm, ppo, config.shaping, ablation, seed) \
        if updates else None
    rows, eval_rows = [], []
    report = None
    for update in range(1, updates + 1):
        buffer, finished = collector.collect()
        stats = ppo_update(buffer, net, optimizer, ppo, update_rng)
        rows.append(_curve_row(collector.env_steps, finished, buffer, stats))
        if verbose:
            print(f'[INFO] policy update {update}/{updates} steps={collector.env_steps} '
                  f'episodes={len(finished)} reward={rows[-1]["mean_reward"]:.4f} '
                  f'entropy={stats["entropy"]:.3f}')
        if update % ppo.eval_every == 0 or update == updates:
            report = evaluate_policy(net, wm, eval_scenes, config.episodes, ppo.eval_episodes, seed, ablation,
                                     n_robots=1)
            eval_rows.append({'env_steps': collector.env_steps, **report.aggregate(), 'episodes': report.n_episodes})
            if verbose:
                print(f'[STATUS] eval SR={report.sr:.1f} SPL={report.spl:.1f} H-Coll={report.h_coll:.1f}')
            if checkpoint_dir is not None:
                net.save(f'{checkpoint_dir}/policy_update{update}.ntck')
    if report is None:
        report = evaluate_policy(net, wm, eval_scenes, config.episodes, ppo.eval_episodes, seed, ablation,
                                 n_robots=1)
    return PolicyTrainingResult(net=net, curve=pd.DataFrame(rows, columns=CURVE_COLUMNS),
                                evals=pd.DataFrame(eval_rows, columns=EVAL_COLUMNS), report=report,
                                updates=updates)
