"""
Run configuration for every pipeline stage.

All settings live in pydantic models with the documented defaults; unknown
keys are rejected so typos in ablation scripts surface immediately. Local
defaults (output directory, master seed, verbosity) come from the
environment / a .env file.
"""

import hashlib
import json
import os
import platform
from importlib import metadata
from pathlib import Path
from typing import Dict, Iterable, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

load_dotenv()

DEFAULT_OUT_DIR = os.getenv('NAVTHINKER_OUT_DIR', 'runs')
DEFAULT_SEED = int(os.getenv('NAVTHINKER_SEED', '0'))
VERBOSE = os.getenv('NAVTHINKER_VERBOSE', '1').lower() not in ('0', 'false', 'no')

SEED_STREAMS = (
    'scenes', 'eval_scenes', 'episodes', 'eval_episodes', 'collect',
    'world_model', 'wm_batches', 'policy', 'policy_actions',
)


class ConfigError(ValueError):
    pass


class StrictModel(BaseModel):
    model_config = ConfigDict(extra='forbid')


class SceneConfig(StrictModel):
    """Procedural floor plan family"""
    family: str = 'standard'
    width: float = Field(12.0, ge=4.0, le=40.0)
    height: float = Field(12.0, ge=4.0, le=40.0)
    min_rooms: int = Field(2, ge=1, le=5)
    max_rooms: int = Field(5, ge=1, le=5)
    corridor_width: float = Field(1.0, ge=1.0)
    n_pillars: int = Field(2, ge=0, le=12)

    @model_validator(mode='after')
    def check_rooms(self):
        if self.min_rooms > self.max_rooms:
            raise ValueError(f'min_rooms ({self.min_rooms}) exceeds max_rooms ({self.max_rooms})')
        return self

    @classmethod
    def preset(cls, name: str) -> 'SceneConfig':
        if name == 'standard':
            return cls()
        if name == 'transfer':
            # larger, busier floor plans used only for zero-shot evaluation
            return cls(family='transfer', width=16.0, height=16.0, min_rooms=4, max_rooms=5, n_pillars=5)
        raise ConfigError(f'unknown scene preset {name!r}')


class EpisodeConfig(StrictModel):
    n_robots: int = Field(1, ge=1, le=4)
    n_humans: int = Field(4, ge=0, le=12)
    max_steps: int = Field(200, ge=1)
    min_goal_distance: float = Field(3.0, gt=0)
    max_goal_distance: float = Field(15.0, gt=0)
    n_train_scenes: int = Field(32, ge=1)
    n_eval_scenes: int = Field(8, ge=1)
    eval_episodes: int = Field(100, ge=0)
    collect_episodes: int = Field(2000, ge=0)
    collect_random_prob: float = Field(0.3, ge=0.0, le=1.0)


class WorldModelConfig(StrictModel):
    patch_count: int = 8
    patch_width: int = 8
    embed_dim: int = 32
    heads: int = 2
    layers: int = 2
    mlp_ratio: int = 4
    context: int = Field(4, ge=1)
    n_humans_pred: int = Field(4, ge=1)
    horizon: int = Field(4, ge=1)
    lambda_f: float = Field(1.0, ge=0)
    lambda_traj: float = Field(0.5, ge=0)
    lambda_reward: float = Field(0.1, ge=0)
    use_depth_loss: bool = True
    use_traj_loss: bool = True
    lr: float = Field(3e-4, gt=0)
    batch_size: int = Field(32, ge=1)
    grad_clip: float = Field(1.0, gt=0)
    train_steps: int = Field(2000, ge=0)
    eval_every: int = Field(250, ge=1)
    checkpoint_every: int = Field(500, ge=1)
    min_windows: int = Field(64, ge=1)
    eval_max_episodes: int = Field(200, ge=1)

    @model_validator(mode='after')
    def check_layout(self):
        if self.patch_count * self.patch_width != 64:
            raise ValueError('patch_count * patch_width must cover the 64-ray scan')
        if self.embed_dim % self.heads:
            raise ValueError(f'embed_dim {self.embed_dim} is not divisible by heads {self.heads}')
        return self


class PPOConfig(StrictModel):
    gamma: float = Field(0.99, gt=0.0, le=1.0)
    gae_lambda: float = Field(0.95, gt=0.0, le=1.0)
    clip_eps: float = Field(0.2, gt=0.0, lt=1.0)
    epochs: int = Field(4, ge=1)
    minibatches: int = Field(4, ge=1)
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = Field(2.5e-4, gt=0)
    grad_clip: float = Field(0.5, gt=0)
    n_envs: int = Field(8, ge=1)
    rollout_len: int = Field(128, ge=1)
    shards: int = Field(1, ge=1, le=4)
    eval_every: int = Field(10, ge=1)
    eval_episodes: int = Field(20, ge=0)

    @model_validator(mode='after')
    def check_split(self):
        if self.n_envs % self.minibatches:
            raise ValueError(f'n_envs {self.n_envs} is not divisible by minibatches {self.minibatches}')
        if (self.n_envs // self.minibatches) % self.shards:
            raise ValueError(f'envs per minibatch ({self.n_envs // self.minibatches}) '
                             f'is not divisible by shards {self.shards}')
        return self


class ShapingConfig(StrictModel):
    d_safe: float = Field(1.0, gt=0)
    w_traj: float = Field(0.1, ge=0)
    gamma_p: float = Field(0.9, gt=0, le=1.0)


class AblationFlags(StrictModel):
    lookahead: bool = True
    traj_reward: bool = True

    @property
    def needs_world_model(self) -> bool:
        return self.lookahead or self.traj_reward

    @property
    def label(self) -> str:
        if self.lookahead and self.traj_reward:
            return '+LookH+TrajR'
        if self.lookahead:
            return '+LookH'
        if self.traj_reward:
            return '+TrajR'
        return 'base'


class ScheduleConfig(StrictModel):
    wm_steps: int = Field(2000, ge=0)
    policy_steps: int = Field(150_000, ge=0)
    interleave_rounds: int = Field(1, ge=1)
    interleave_collect_episodes: int = Field(200, ge=0)


class PathsConfig(StrictModel):
    replay: Optional[str] = None
    wm_checkpoint: Optional[str] = None
    policy_checkpoint: Optional[str] = None


class RunConfig(StrictModel):
    scene: SceneConfig = SceneConfig()
    eval_scene: Optional[SceneConfig] = None
    episodes: EpisodeConfig = EpisodeConfig()
    world_model: WorldModelConfig = WorldModelConfig()
    ppo: PPOConfig = PPOConfig()
    shaping: ShapingConfig = ShapingConfig()
    ablation: AblationFlags = AblationFlags()
    schedule: ScheduleConfig = ScheduleConfig()
    paths: PathsConfig = PathsConfig()
    n_seeds: int = Field(5, ge=1)
    seed: int = Field(DEFAULT_SEED, ge=0, lt=2 ** 64)
    out_dir: str = DEFAULT_OUT_DIR


def _format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = '.'.join(str(part) for part in err['loc']) or '<root>'
        lines.append(f'{path}: {err["msg"]}')
    return '; '.join(lines)


def parse_config(text: str) -> RunConfig:
    try:
        return RunConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f'invalid config: {_format_validation_error(exc)}') from exc


def load_config(path) -> RunConfig:
    """Read a JSON run config; a missing file is a config error too"""
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f'config file not found: {config_path}')
    return parse_config(config_path.read_text(encoding='utf-8'))


def derive_seed(master: int, name: str) -> int:
    """Named seed stream: adding streams never perturbs existing ones"""
    digest = hashlib.sha256(f'{master}:{name}'.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


def seed_streams(master: int, names: Iterable[str] = SEED_STREAMS) -> Dict[str, int]:
    return {name: derive_seed(master, name) for name in names}


def package_versions() -> Dict[str, str]:
    versions = {'python': platform.python_version()}
    for package in ('numpy', 'scipy', 'pandas', 'pydantic', 'python-dotenv'):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = 'not installed'
    return versions


def write_resolved(config: RunConfig, run_dir: Path):
    """config.json + seeds.json + versions.json, everything needed to rerun"""
    run_dir = Path(run_dir)
    (run_dir / 'config.json').write_text(config.model_dump_json(indent=2), encoding='utf-8')
    seeds = {'master': config.seed, **seed_streams(config.seed)}
    (run_dir / 'seeds.json').write_text(json.dumps(seeds, indent=2), encoding='utf-8')
    (run_dir / 'versions.json').write_text(json.dumps(package_versions(), indent=2), encoding='utf-8')
