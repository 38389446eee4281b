"""
Action-conditioned latent world model over patch tokens of the depth scan.

A frozen seeded projection turns each 64-ray scan into P patch latents; a
small pre-LN transformer with one action token per frame predicts the next
frame's latents under a frame-causal mask; decoder heads read depth, human
trajectories and reward from (true or imagined) latents.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

import grad_core as gc
from config import VERBOSE, WorldModelConfig, derive_seed
from replay_store import InsufficientDataError, ReplayStore, WindowBatch
from socialnav_sim import N_ACTIONS, N_RAYS

CURVE_COLUMNS = ['step', 'total', 'L_f', 'L_d', 'L_ξ', 'L_r']
EVAL_COLUMNS = ['step', 'cos_sim', 'depth_rmse', 'traj_ade', 'traj_fde', 'baseline_ade', 'n_windows']


class FrozenEncoder:
    """Seeded orthogonal per-patch projection plus positional table; never trained"""

    def __init__(self, config: WorldModelConfig, seed: int):
        rng = np.random.default_rng([seed, 0])
        self.patch_count = config.patch_count
        self.patch_width = config.patch_width
        projection = np.stack([gc.orthogonal(rng, config.patch_width, config.embed_dim)
                               for _ in range(config.patch_count)])
        self.projection = gc.Tensor(projection, name='encoder.projection')
        self.positional = gc.Tensor(rng.normal(0.0, 0.1, size=(config.patch_count, config.embed_dim)),
                                    name='encoder.positional')

    def parameters(self) -> Dict[str, gc.Tensor]:
        return {'encoder.projection': self.projection, 'encoder.positional': self.positional}

    def encode(self, depth: np.ndarray) -> np.ndarray:
        """(..., 64) scans -> (..., P, D) latents"""
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape[-1] != self.patch_count * self.patch_width:
            raise gc.ShapeError(f'depth scan needs {self.patch_count * self.patch_width} rays, '
                                f'got shape {depth.shape}')
        patches = depth.reshape(depth.shape[:-1] + (self.patch_count, self.patch_width))
        return np.einsum('...pw,pwd->...pd', patches, self.projection.data) + self.positional.data


def encode_observation(depth: np.ndarray, encoder: FrozenEncoder) -> gc.Tensor:
    """One scan -> z (P, D); constant tensor, nothing flows back into the encoder"""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (N_RAYS,):
        raise gc.ShapeError(f'expected a ({N_RAYS},) depth scan, got {depth.shape}')
    if depth.min() < 0.0 or depth.max() > 1.0:
        raise ValueError(f'depth values must lie in [0, 1], got [{depth.min()}, {depth.max()}]')
    return gc.Tensor(encoder.encode(depth))


def frame_causal_mask(n_frames: int, tokens_per_frame: int) -> np.ndarray:
    """mask[i, j] is True when token i may attend to token j (frame(j) <= frame(i))"""
    frame = np.repeat(np.arange(n_frames), tokens_per_frame)
    return frame[None, :] <= frame[:, None]


@dataclass
class WMBatch:
    z: np.ndarray  # (B, H+2, P, D)
    actions: np.ndarray  # (B, H+1)
    depth_next: np.ndarray  # (B, 64)
    traj: np.ndarray  # (B, N_h, T, 2)
    traj_valid: np.ndarray  # (B, N_h)
    reward: np.ndarray  # (B,)
    human_now: Optional[np.ndarray] = None  # (B, N_h, 2), evaluation only


@dataclass
class WMLosses:
    total: gc.Tensor
    l_f: gc.Tensor
    l_d: gc.Tensor
    l_traj: gc.Tensor
    l_r: gc.Tensor

    def row(self, step: int) -> Dict[str, float]:
        return dict(zip(CURVE_COLUMNS, [step, self.total.item(), self.l_f.item(), self.l_d.item(),
                                        self.l_traj.item(), self.l_r.item()]))


class WMEvalReport(BaseModel):
    cos_sim: float
    depth_rmse: float
    traj_ade: Optional[float] = None
    traj_fde: Optional[float] = None
    baseline_ade: Optional[float] = None
    n_windows: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([self.model_dump()])


class WorldModel:
    """Frozen encoder, transition transformer and decoder heads with named parameters"""

    def __init__(self, config: Optional[WorldModelConfig] = None, seed: int = 0):
        self.config = config or WorldModelConfig()
        cfg = self.config
        self.seed = seed
        self.encoder = FrozenEncoder(cfg, seed)
        self.tokens_per_frame = cfg.patch_count + 1
        self.transition = self._init_transition(np.random.default_rng([seed, 1]))
        self.decoder = self._init_decoder(np.random.default_rng([seed, 2]))

    def _init_transition(self, rng: np.random.Generator) -> Dict[str, gc.Tensor]:
        cfg = self.config
        d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
        p = {
            'transition.action_embedding': gc.Tensor(rng.normal(0.0, 1.0, size=(N_ACTIONS, d)),
                                                     requires_grad=True, name='transition.action_embedding'),
            'transition.frame_embedding': gc.Tensor(rng.normal(0.0, 0.1, size=(cfg.context + 1, d)),
                                                    requires_grad=True, name='transition.frame_embedding'),
        }
        for layer in range(cfg.layers):
            pre = f'transition.block{layer}.'
            p[pre + 'ln1.gain'] = gc.init_ones((d,), pre + 'ln1.gain')
            p[pre + 'ln1.bias'] = gc.init_zeros((d,), pre + 'ln1.bias')
            for name in ('wq', 'wk', 'wv', 'wo'):
                p[pre + name] = gc.init_weight(rng, (d, d), d, pre + name)
            p[pre + 'bo'] = gc.init_zeros((d,), pre + 'bo')
            p[pre + 'ln2.gain'] = gc.init_ones((d,), pre + 'ln2.gain')
            p[pre + 'ln2.bias'] = gc.init_zeros((d,), pre + 'ln2.bias')
            p[pre + 'mlp.w1'] = gc.init_weight(rng, (d, hidden), d, pre + 'mlp.w1')
            p[pre + 'mlp.b1'] = gc.init_zeros((hidden,), pre + 'mlp.b1')
            p[pre + 'mlp.w2'] = gc.init_weight(rng, (hidden, d), hidden, pre + 'mlp.w2')
            p[pre + 'mlp.b2'] = gc.init_zeros((d,), pre + 'mlp.b2')
        p['transition.ln_out.gain'] = gc.init_ones((d,), 'transition.ln_out.gain')
        p['transition.ln_out.bias'] = gc.init_zeros((d,), 'transition.ln_out.bias')
        p['transition.head.w'] = gc.init_weight(rng, (d, d), d, 'transition.head.w')
        p['transition.head.b'] = gc.init_zeros((d,), 'transition.head.b')
        return p

    def _init_decoder(self, rng: np.random.Generator) -> Dict[str, gc.Tensor]:
        cfg = self.config
        d = cfg.embed_dim
        traj_out = cfg.n_humans_pred * cfg.horizon * 2
        shapes = {
            'decoder.depth.w1': (d, 64), 'decoder.depth.w2': (64, cfg.patch_width),
            'decoder.traj.w1': (d, 64), 'decoder.traj.w2': (64, traj_out),
            'decoder.reward.w1': (d, 32), 'decoder.reward.w2': (32, 1),
        }
        p = {}
        for name, shape in shapes.items():
            p[name] = gc.init_weight(rng, shape, shape[0], name)
            bias = name[:-2] + 'b' + name[-1]
            p[bias] = gc.init_zeros((shape[1],), bias)
        return p

    # -- parameters ---------------------------------------------------------

    def trainable(self) -> Dict[str, gc.Tensor]:
        return {**self.transition, **self.decoder}

    def parameters(self) -> Dict[str, gc.Tensor]:
        return {**self.encoder.parameters(), **self.trainable()}

    def save(self, path):
        gc.save_checkpoint(path, self.parameters())

    @classmethod
    def from_checkpoint(cls, path, config: Optional[WorldModelConfig] = None) -> 'WorldModel':
        model = cls(config)
        gc.load_into(model.parameters(), path)
        return model

    # -- transition ---------------------------------------------------------

    def _block(self, x: gc.Tensor, layer: int, mask: np.ndarray) -> gc.Tensor:
        cfg = self.config
        p = self.transition
        pre = f'transition.block{layer}.'
        batch, n, d = x.shape
        heads, dk = cfg.heads, d // cfg.heads

        h = gc.layer_norm(x, p[pre + 'ln1.gain'], p[pre + 'ln1.bias'])

        def split(t):
            return gc.transpose(gc.reshape(t, (batch, n, heads, dk)), (0, 2, 1, 3))

        q = split(gc.matmul(h, p[pre + 'wq']))
        k = split(gc.matmul(h, p[pre + 'wk']))
        v = split(gc.matmul(h, p[pre + 'wv']))
        att = gc.reshape(gc.transpose(gc.attention(q, k, v, mask), (0, 2, 1, 3)), (batch, n, d))
        x = gc.add(x, gc.linear(att, p[pre + 'wo'], p[pre + 'bo']))

        h = gc.layer_norm(x, p[pre + 'ln2.gain'], p[pre + 'ln2.bias'])
        h = gc.gelu(gc.linear(h, p[pre + 'mlp.w1'], p[pre + 'mlp.b1']))
        return gc.add(x, gc.linear(h, p[pre + 'mlp.w2'], p[pre + 'mlp.b2']))

    def token_outputs(self, z_ctx, actions: np.ndarray) -> gc.Tensor:
        """(B, F, P, D) latents and (B, F) actions -> (B, F*(P+1), D) normalized token features"""
        cfg = self.config
        p = self.transition
        z_ctx = gc.as_tensor(z_ctx)
        actions = np.asarray(actions, dtype=np.int64)
        batch, frames = z_ctx.shape[0], z_ctx.shape[1]
        if frames < 1 or frames > cfg.context + 1:
            raise gc.ShapeError(f'context holds {frames} frames, allowed 1..{cfg.context + 1}')
        if actions.shape != (batch, frames):
            raise gc.ShapeError(f'need one action per frame: actions {actions.shape}, frames {z_ctx.shape[:2]}')
        if actions.min() < 0 or actions.max() >= N_ACTIONS:
            raise ValueError(f'action ids must lie in 0..{N_ACTIONS - 1}, got {actions.tolist()}')

        action_tokens = gc.reshape(gc.getitem(p['transition.action_embedding'], actions),
                                   (batch, frames, 1, cfg.embed_dim))
        tokens = gc.concat([z_ctx, action_tokens], axis=2)
        n = frames * self.tokens_per_frame
        tokens = gc.reshape(tokens, (batch, n, cfg.embed_dim))
        frame_index = np.repeat(np.arange(frames), self.tokens_per_frame)
        x = gc.add(tokens, gc.getitem(p['transition.frame_embedding'], frame_index))

        mask = frame_causal_mask(frames, self.tokens_per_frame)
        for layer in range(cfg.layers):
            x = self._block(x, layer, mask)
        return gc.layer_norm(x, p['transition.ln_out.gain'], p['transition.ln_out.bias'])

    def predict_batch(self, z_ctx, actions: np.ndarray) -> gc.Tensor:
        """(B, F, P, D), (B, F) -> predicted next latents (B, P, D)"""
        h = self.token_outputs(z_ctx, actions)
        frames = h.shape[1] // self.tokens_per_frame
        start = (frames - 1) * self.tokens_per_frame
        last = gc.getitem(h, (slice(None), slice(start, start + self.config.patch_count)))
        return gc.linear(last, self.transition['transition.head.w'], self.transition['transition.head.b'])

    # -- decoders -----------------------------------------------------------

    def _mlp(self, x: gc.Tensor, name: str) -> gc.Tensor:
        p = self.decoder
        hidden = gc.relu(gc.linear(x, p[f'decoder.{name}.w1'], p[f'decoder.{name}.b1']))
        return gc.linear(hidden, p[f'decoder.{name}.w2'], p[f'decoder.{name}.b2'])

    def decode_batch(self, z) -> Tuple[gc.Tensor, gc.Tensor, gc.Tensor]:
        """(B, P, D) -> depth (B, 64), trajectories (B, N_h, T, 2), reward (B,)"""
        cfg = self.config
        z = gc.as_tensor(z)
        batch = z.shape[0]
        depth = gc.reshape(gc.sigmoid(self._mlp(z, 'depth')), (batch, N_RAYS))
        pooled = gc.mean(z, axis=1)
        traj = gc.reshape(self._mlp(pooled, 'traj'), (batch, cfg.n_humans_pred, cfg.horizon, 2))
        reward = gc.reshape(self._mlp(pooled, 'reward'), (batch,))
        return depth, traj, reward


def predict_next(z_ctx, a_ctx: Sequence[int], model: WorldModel) -> gc.Tensor:
    """Single context (F, P, D) with one action per frame -> ẑ_next (P, D)"""
    z_ctx = gc.as_tensor(z_ctx)
    if z_ctx.ndim != 3:
        raise gc.ShapeError(f'context must be (frames, P, D), got {z_ctx.shape}')
    batched = gc.reshape(z_ctx, (1,) + z_ctx.shape)
    out = model.predict_batch(batched, np.asarray(a_ctx, dtype=np.int64)[None, :])
    return gc.reshape(out, out.shape[1:])


def imagine_rollout(z_ctx, a_ctx: Sequence[int], future_actions: Sequence[int],
                    model: WorldModel) -> List[gc.Tensor]:
    """Autoregressive imagination over a sliding window of H+1 frames.

    a_ctx holds the actions taken after every context frame except the last;
    future_actions[k] is applied to the latest (real or imagined) frame.
    """
    frames = [np.asarray(f, dtype=np.float64) for f in np.asarray(gc.as_tensor(z_ctx).data)]
    actions = [int(a) for a in a_ctx]
    if len(actions) != len(frames) - 1:
        raise gc.ShapeError(f'{len(frames)} context frames need {len(frames) - 1} actions, got {len(actions)}')
    if not future_actions:
        raise ValueError('imagine_rollout needs at least one future action')
    window = model.config.context + 1
    predictions = []
    with gc.no_grad():
        for a in future_actions:
            actions.append(int(a))
            frames, acts = frames[-window:], actions[-window:]
            z_next = predict_next(np.stack(frames), acts, model)
            predictions.append(z_next)
            frames.append(z_next.data)
    return predictions


def imagine_candidates(model: WorldModel, contexts: Sequence[np.ndarray],
                       context_actions: Sequence[Sequence[int]]) -> np.ndarray:
    """One-step imagination of every candidate action for many contexts.

    contexts[i] is (F_i, P, D) with F_i - 1 actions in context_actions[i];
    returns (n, |A|, P, D). Contexts of equal length are batched together.
    """
    cfg = model.config
    out = np.zeros((len(contexts), N_ACTIONS, cfg.patch_count, cfg.embed_dim))
    groups: Dict[int, List[int]] = {}
    for i, ctx in enumerate(contexts):
        groups.setdefault(len(ctx), []).append(i)
    with gc.no_grad():
        for frames, members in groups.items():
            z = np.repeat(np.stack([contexts[i] for i in members]), N_ACTIONS, axis=0)
            prefix = np.array([list(context_actions[i]) for i in members],
                              dtype=np.int64).reshape(len(members), frames - 1)
            actions = np.concatenate([np.repeat(prefix, N_ACTIONS, axis=0),
                                      np.tile(np.arange(N_ACTIONS), len(members))[:, None]], axis=1)
            pred = model.predict_batch(z, actions).data
            out[members] = pred.reshape(len(members), N_ACTIONS, cfg.patch_count, cfg.embed_dim)
    return out


def decode(z, model: WorldModel) -> Tuple[gc.Tensor, gc.Tensor, gc.Tensor]:
    """Single latent (P, D) -> (depth (64,), trajectories (N_h, T, 2), scalar reward)"""
    z = gc.as_tensor(z)
    if z.shape != (model.config.patch_count, model.config.embed_dim):
        raise gc.ShapeError(f'decode expects ({model.config.patch_count}, {model.config.embed_dim}), got {z.shape}')
    depth, traj, reward = model.decode_batch(gc.reshape(z, (1,) + z.shape))
    return (gc.reshape(depth, (N_RAYS,)), gc.reshape(traj, traj.shape[1:]), gc.reshape(reward, ()))


def batch_from_windows(windows: WindowBatch, model: WorldModel) -> WMBatch:
    """Frozen-encode a window batch and cut out the context, target and reward"""
    context = model.config.context
    return WMBatch(
        z=model.encoder.encode(windows.depth),
        actions=windows.actions[:, :context + 1],
        depth_next=windows.depth[:, context + 1],
        traj=windows.human_future[:, context + 1],
        traj_valid=windows.validity[:, context + 1],
        reward=windows.reward_task[:, context],
        human_now=windows.human_now[:, context + 1],
    )


def loss_weights(config: WorldModelConfig) -> Tuple[float, float, float, float]:
    """(λ_f, depth weight, λ_ξ, λ_r) after the auxiliary-loss switches"""
    return (config.lambda_f,
            1.0 if config.use_depth_loss else 0.0,
            config.lambda_traj if config.use_traj_loss else 0.0,
            config.lambda_reward)


def wm_loss(batch: WMBatch, model: WorldModel) -> WMLosses:
    """Latent consistency on the transition output plus decoder losses on the true target latent"""
    context = model.config.context
    lam_f, lam_d, lam_traj, lam_r = loss_weights(model.config)
    z = batch.z
    pred = model.predict_batch(z[:, :context + 1], batch.actions)
    l_f = gc.mse(pred, z[:, context + 1])

    depth, traj, reward = model.decode_batch(z[:, context + 1])
    l_d = gc.mse(depth, batch.depth_next)
    weight = np.broadcast_to(batch.traj_valid[:, :, None, None], traj.shape).astype(np.float64)
    if weight.sum() > 0:
        l_traj = gc.masked_mse(traj, batch.traj, weight)
    elif lam_traj > 0:
        raise gc.EmptyMaskError('every trajectory target in the batch is invalid')
    else:
        l_traj = gc.Tensor(0.0)
    l_r = gc.mse(reward, batch.reward)

    total = gc.add(gc.add(gc.add(gc.scale(l_f, lam_f), gc.scale(l_d, lam_d)),
                          gc.scale(l_traj, lam_traj)), gc.scale(l_r, lam_r))
    return WMLosses(total=total, l_f=l_f, l_d=l_d, l_traj=l_traj, l_r=l_r)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine of flattened (..., P, D) latents"""
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    denom = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-12)
    return np.clip((a * b).sum(axis=1) / denom, -1.0, 1.0)


def evaluate_wm(model: WorldModel, replay: ReplayStore, split: str = 'heldout',
                max_episodes: Optional[int] = None) -> WMEvalReport:
    """CosSim, depth RMSE and ADE/FDE of one-step predictions over every held-out window"""
    window = model.config.context + 2
    max_episodes = max_episodes or model.config.eval_max_episodes
    cos, sq_err, depth_count = [], 0.0, 0
    ade_sum = fde_sum = base_sum = 0.0
    pairs = finals = 0
    with gc.no_grad():
        for windows in replay.iter_windows(split, window, max_episodes):
            batch = batch_from_windows(windows, model)
            pred = model.predict_batch(batch.z[:, :-1], batch.actions).data
            depth, traj, _ = model.decode_batch(pred)
            cos.append(cosine_similarity(pred, batch.z[:, -1]))
            sq_err += float(((depth.data - batch.depth_next) ** 2).sum())
            depth_count += batch.depth_next.size
            err = np.linalg.norm(traj.data - batch.traj, axis=-1)  # (B, N_h, T)
            base = np.linalg.norm(batch.human_now[:, :, None, :] - batch.traj, axis=-1)
            valid = batch.traj_valid
            ade_sum += float(err[valid].sum())
            base_sum += float(base[valid].sum())
            pairs += int(valid.sum()) * err.shape[-1]
            fde_sum += float(err[..., -1][valid].sum())
            finals += int(valid.sum())
    if not cos:
        raise InsufficientDataError(f'no {split} windows of {window} records to evaluate on')
    return WMEvalReport(
        cos_sim=float(np.mean(np.concatenate(cos))),
        depth_rmse=float(np.sqrt(sq_err / depth_count)),
        traj_ade=ade_sum / pairs if pairs else None,
        traj_fde=fde_sum / finals if finals else None,
        baseline_ade=base_sum / pairs if pairs else None,
        n_windows=int(sum(len(c) for c in cos)),
    )


def train_wm(replay: ReplayStore, config: WorldModelConfig, seed: int, steps: Optional[int] = None,
             model: Optional[WorldModel] = None, checkpoint_dir=None,
             verbose: bool = VERBOSE) -> Tuple[WorldModel, pd.DataFrame, pd.DataFrame]:
    """Adam on wm_loss over sampled training windows; returns the model, loss curve and eval curve"""
    window = config.context + 2
    available = replay.count_windows('train', window)
    if available < config.min_windows:
        raise InsufficientDataError(f'replay holds {available} training windows of {window} records, '
                                    f'need at least {config.min_windows}')
    steps = config.train_steps if steps is None else steps
    model = model or WorldModel(config, seed=derive_seed(seed, 'world_model'))
    params = model.trainable()
    optimizer = gc.OptimizerState.create('adam', params, lr=config.lr)
    rng = np.random.default_rng(derive_seed(seed, 'wm_batches'))
    has_heldout = replay.count_windows('heldout', window) > 0
    if not has_heldout and verbose:
        print('[WARNING] no held-out windows, skipping periodic evaluation')

    rows, eval_rows = [], []
    for step in range(1, steps + 1):
        windows = replay.sample_windows('train', config.batch_size, window, seed=int(rng.integers(2 ** 63)))
        gc.zero_grad(params)
        losses = wm_loss(batch_from_windows(windows, model), model)
        gc.backward(losses.total)
        gc.clip_grad_norm(params, config.grad_clip)
        gc.optimizer_step(optimizer, params)
        rows.append(losses.row(step))

        if has_heldout and (step % config.eval_every == 0 or step == steps):
            report = evaluate_wm(model, replay)
            eval_rows.append({'step': step, **report.model_dump()})
            if verbose:
                print(f'[INFO] wm step {step}/{steps} total={losses.total.item():.4f} '
                      f'cos_sim={report.cos_sim:.3f} depth_rmse={report.depth_rmse:.4f}')
        elif verbose and step % config.eval_every == 0:
            print(f'[INFO] wm step {step}/{steps} total={losses.total.item():.4f}')
        if checkpoint_dir is not None and step % config.checkpoint_every == 0:
            model.save(f'{checkpoint_dir}/world_model_step{step}.ntck')

    return model, pd.DataFrame(rows, columns=CURVE_COLUMNS), pd.DataFrame(eval_rows, columns=EVAL_COLUMNS)
