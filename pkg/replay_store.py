"""
NTRB replay store: episodes of transition records on disk, a hash-based
train/heldout split and length-(H+2) training windows for the world model.

File layout (little-endian):
    magic "NTRB" | version u32 | record count u64 | n_humans u16 | horizon u16
    fixed-width records (count of them)
    index: episode count u64, then per episode id u64 | first record u64 | length u32
"""

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from socialnav_sim import N_ACTIONS, N_RAYS, to_robot_frame

MAGIC = b'NTRB'
VERSION = 1
HEADER = struct.Struct('<4sIQHH')
INDEX_COUNT = struct.Struct('<Q')
INDEX_ENTRY = struct.Struct('<QQI')

SPLIT_MULTIPLIER = 2654435761
HELDOUT_FRACTION = 0.1
SPLITS = ('train', 'heldout')


class ReplayError(ValueError):
    pass


class BadMagicError(ReplayError):
    pass


class TruncatedReplayError(ReplayError):
    pass


class VersionMismatchError(ReplayError):
    pass


class DuplicateEpisodeError(ReplayError):
    pass


class NonContiguousEpisodeError(ReplayError):
    pass


class EmptyEpisodeError(ReplayError):
    pass


class InsufficientDataError(ReplayError):
    pass


def record_dtype(n_humans: int, horizon: int) -> np.dtype:
    if not 1 <= n_humans <= 8:
        raise ReplayError(f'validity bitmask holds 1..8 humans, got {n_humans}')
    return np.dtype([
        ('episode_id', '<u8'),
        ('t', '<u4'),
        ('depth', '<f4', (N_RAYS,)),
        ('action', 'u1'),
        ('reward_task', '<f4'),
        ('pose', '<f4', (3,)),
        ('human_future', '<f4', (n_humans, horizon, 2)),
        ('validity', 'u1'),
        ('human_now', '<f4', (n_humans, 2)),
        ('done', 'u1'),
    ])


def split_of(episode_id: int) -> str:
    """Stable split assignment from the episode id alone"""
    hashed = (int(episode_id) * SPLIT_MULTIPLIER) % (2 ** 32)
    return 'heldout' if hashed < HELDOUT_FRACTION * 2 ** 32 else 'train'


def pack_validity(valid: Sequence[bool]) -> int:
    return int(sum(1 << i for i, v in enumerate(valid) if v))


def unpack_validity(bits: np.ndarray, n_humans: int) -> np.ndarray:
    """(...,) u8 bitmask -> (..., n_humans) bool"""
    return ((np.asarray(bits, dtype=np.uint8)[..., None] >> np.arange(n_humans, dtype=np.uint8)) & 1).astype(bool)


@dataclass
class TransitionRecord:
    episode_id: int
    t: int
    depth: np.ndarray
    action: int
    reward_task: float
    pose: np.ndarray
    human_future: np.ndarray
    validity: np.ndarray
    human_now: np.ndarray
    done: bool


def records_to_array(records: Sequence[TransitionRecord], n_humans: int, horizon: int) -> np.ndarray:
    out = np.zeros(len(records), dtype=record_dtype(n_humans, horizon))
    for i, rec in enumerate(records):
        out['episode_id'][i] = rec.episode_id
        out['t'][i] = rec.t
        out['depth'][i] = rec.depth
        out['action'][i] = rec.action
        out['reward_task'][i] = rec.reward_task
        out['pose'][i] = rec.pose
        out['human_future'][i] = rec.human_future
        out['validity'][i] = pack_validity(rec.validity)
        out['human_now'][i] = rec.human_now
        out['done'][i] = bool(rec.done)
    return out


def build_records(episode_id: int, steps: Sequence[Dict], human_history: Sequence[np.ndarray],
                  n_humans: int, horizon: int) -> List[TransitionRecord]:
    """Transition records for one robot's episode.

    steps[t] holds depth, action, reward_task, pose and done for step t;
    human_history[k] are the world positions of every human at time k and
    must reach at least len(steps) + horizon - 1 entries past the start.
    """
    records = []
    for t, step in enumerate(steps):
        pose = np.asarray(step['pose'], dtype=np.float64)
        now = np.asarray(human_history[t]).reshape(-1, 2)
        future = np.zeros((n_humans, horizon, 2))
        current = np.zeros((n_humans, 2))
        valid = np.zeros(n_humans, dtype=bool)
        if len(now):
            order = np.argsort(np.hypot(*(now - pose[:2]).T), kind='stable')[:n_humans]
            for slot, k in enumerate(order):
                current[slot] = to_robot_frame(now[k], pose[:2], pose[2])
                for h in range(horizon):
                    future[slot, h] = to_robot_frame(human_history[t + 1 + h][k], pose[:2], pose[2])
                valid[slot] = True
        records.append(TransitionRecord(
            episode_id=episode_id, t=t, depth=np.asarray(step['depth']), action=int(step['action']),
            reward_task=float(step['reward_task']), pose=pose, human_future=future, validity=valid,
            human_now=current, done=bool(step['done'])))
    return records


def record_rollout(env, choose_action: Callable, episode_id: int, n_humans: int,
                   horizon: int) -> List[TransitionRecord]:
    """Run robot 0 of a freshly reset env to the end of its episode and turn it into records.

    choose_action(env) returns the action for the current step. Humans are
    rolled `horizon` steps past the end so every record gets full futures.
    """
    steps = []
    while not env.robots[0].done:
        obs = env.observations[0]
        action = int(choose_action(env))
        result = env.step([action])
        steps.append({'depth': obs.depth, 'action': action, 'reward_task': result.reward_terms[0].task,
                      'pose': obs.pose, 'done': result.done[0]})
    env.advance_humans(horizon)
    return build_records(episode_id, steps, env.human_history, n_humans, horizon)


@dataclass
class WindowBatch:
    """Consecutive records of one episode per row; numpy only, float64"""
    episode_id: np.ndarray  # (B,)
    start: np.ndarray  # (B,)
    depth: np.ndarray  # (B, W, 64)
    actions: np.ndarray  # (B, W)
    reward_task: np.ndarray  # (B, W)
    pose: np.ndarray  # (B, W, 3)
    human_future: np.ndarray  # (B, W, N_h, T, 2)
    validity: np.ndarray  # (B, W, N_h)
    human_now: np.ndarray  # (B, W, N_h, 2)
    done: np.ndarray  # (B, W)

    def __len__(self):
        return len(self.episode_id)


class ReplayStats(BaseModel):
    split: str = 'all'
    episodes: int = 0
    transitions: int = 0
    action_histogram: List[int] = [0] * N_ACTIONS
    mean_episode_length: float = 0.0

    def to_lines(self) -> List[str]:
        lines = [f'split={self.split}', f'episodes={self.episodes}', f'transitions={self.transitions}']
        lines += [f'action_{a}={n}' for a, n in enumerate(self.action_histogram)]
        lines.append(f'mean_episode_length={self.mean_episode_length:.6f}')
        return lines


class ReplayStore:
    """Single-writer episode store; readers only ever see sealed (appended) episodes"""

    def __init__(self, n_humans: int = 4, horizon: int = 4, path: Optional[Path] = None):
        self.n_humans = n_humans
        self.horizon = horizon
        self.dtype = record_dtype(n_humans, horizon)
        self.path = Path(path) if path is not None else None
        self._chunks: List[np.ndarray] = []
        self._records: Optional[np.ndarray] = None
        self.index: Dict[int, Tuple[int, int]] = {}  # id -> (first record, length)
        self.count = 0
        self._starts: Dict[Tuple[str, int], np.ndarray] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, path, n_humans: int = 4, horizon: int = 4) -> 'ReplayStore':
        store = cls(n_humans, horizon, path)
        store.save(path)
        return store

    @classmethod
    def load(cls, path) -> 'ReplayStore':
        """Validate and read a whole NTRB file; nothing is returned unless every part parses"""
        path = Path(path)
        blob = path.read_bytes()
        if len(blob) < 4 or blob[:4] != MAGIC:
            raise BadMagicError(f'{path}: not an NTRB replay file (magic {blob[:4]!r})')
        if len(blob) < HEADER.size:
            raise TruncatedReplayError(f'{path}: header truncated ({len(blob)} bytes)')
        _, version, count, n_humans, horizon = HEADER.unpack_from(blob, 0)
        if version != VERSION:
            raise VersionMismatchError(f'{path}: replay version {version}, expected {VERSION}')
        store = cls(n_humans, horizon, path)
        body = HEADER.size + count * store.dtype.itemsize
        if len(blob) < body + INDEX_COUNT.size:
            raise TruncatedReplayError(f'{path}: expected {count} records, file holds {len(blob)} bytes')
        if count:
            records = np.frombuffer(blob, dtype=store.dtype, count=count, offset=HEADER.size).copy()
        else:
            records = np.zeros(0, dtype=store.dtype)
        (n_episodes,) = INDEX_COUNT.unpack_from(blob, body)
        offset = body + INDEX_COUNT.size
        if len(blob) < offset + n_episodes * INDEX_ENTRY.size:
            raise TruncatedReplayError(f'{path}: index block truncated ({n_episodes} episodes announced)')
        index = {}
        for i in range(n_episodes):
            episode_id, first, length = INDEX_ENTRY.unpack_from(blob, offset + i * INDEX_ENTRY.size)
            if first + length > count:
                raise TruncatedReplayError(f'{path}: episode {episode_id} points past the last record')
            index[int(episode_id)] = (int(first), int(length))
        store._records = records
        store._chunks = [records] if count else []
        store.index = index
        store.count = int(count)
        return store

    # -- writing ------------------------------------------------------------

    def _header(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, self.count, self.n_humans, self.horizon)

    def _index_block(self) -> bytes:
        parts = [INDEX_COUNT.pack(len(self.index))]
        parts += [INDEX_ENTRY.pack(eid, first, length) for eid, (first, length) in self.index.items()]
        return b''.join(parts)

    def save(self, path=None):
        path = Path(path or self.path)
        with open(path, 'wb') as fh:
            fh.write(self._header())
            fh.write(self.records.tobytes())
            fh.write(self._index_block())
            fh.flush()
            os.fsync(fh.fileno())
        self.path = path

    def _validate(self, array: np.ndarray) -> int:
        if len(array) == 0:
            raise EmptyEpisodeError('cannot append an episode without records')
        ids = np.unique(array['episode_id'])
        if len(ids) != 1:
            raise ReplayError(f'records mix several episode ids: {ids.tolist()}')
        episode_id = int(ids[0])
        if episode_id in self.index:
            raise DuplicateEpisodeError(f'episode {episode_id} is already stored')
        expected = np.arange(len(array))
        if not np.array_equal(array['t'].astype(np.int64), expected):
            raise NonContiguousEpisodeError(
                f'episode {episode_id}: t must run 0..{len(array) - 1}, got {array["t"].tolist()[:10]}...')
        return episode_id

    def append_episode(self, records) -> int:
        """Append one episode (TransitionRecords or a structured array); durable when file-backed"""
        if isinstance(records, np.ndarray):
            array = records.astype(self.dtype)
        else:
            array = records_to_array(records, self.n_humans, self.horizon)
        episode_id = self._validate(array)
        first = self.count
        self._chunks.append(array)
        self._records = None
        self.index[episode_id] = (first, len(array))
        self.count += len(array)
        self._starts.clear()
        if self.path is not None:
            self._append_to_file(array, first)
        return episode_id

    def _append_to_file(self, array: np.ndarray, first: int):
        body_end = HEADER.size + first * self.dtype.itemsize
        with open(self.path, 'r+b') as fh:
            fh.seek(body_end)
            fh.write(array.tobytes())
            fh.write(self._index_block())
            fh.truncate()
            fh.flush()
            fh.seek(0)
            fh.write(self._header())
            fh.flush()
            os.fsync(fh.fileno())

    # -- reading ------------------------------------------------------------

    @property
    def records(self) -> np.ndarray:
        if self._records is None:
            self._records = np.concatenate(self._chunks) if self._chunks else np.zeros(0, dtype=self.dtype)
            self._chunks = [self._records] if len(self._records) else []
        return self._records

    def episode_ids(self, split: Optional[str] = None) -> List[int]:
        if split is not None and split not in SPLITS:
            raise ReplayError(f'unknown split {split!r}, expected one of {SPLITS}')
        return sorted(eid for eid in self.index if split is None or split_of(eid) == split)

    def episode(self, episode_id: int) -> np.ndarray:
        first, length = self.index[episode_id]
        return self.records[first:first + length]

    def _window_starts(self, split: str, window: int) -> np.ndarray:
        """(n, 2) array of (first record, episode id) for every valid window start"""
        key = (split, window)
        if key not in self._starts:
            records = self.records
            starts = []
            for eid in self.episode_ids(split):
                first, length = self.index[eid]
                done = records['done'][first:first + length].astype(bool)
                for s in range(0, length - window + 1):
                    if not done[s:s + window - 1].any():
                        starts.append((first + s, eid))
            self._starts[key] = np.array(starts, dtype=np.int64).reshape(-1, 2)
        return self._starts[key]

    def count_windows(self, split: str, window: int) -> int:
        return len(self._window_starts(split, window))

    def _gather(self, rows: np.ndarray, window: int) -> WindowBatch:
        records = self.records
        idx = rows[:, 0][:, None] + np.arange(window)[None, :]
        chunk = records[idx]
        return WindowBatch(
            episode_id=rows[:, 1].copy(),
            start=chunk['t'][:, 0].astype(np.int64),
            depth=chunk['depth'].astype(np.float64),
            actions=chunk['action'].astype(np.int64),
            reward_task=chunk['reward_task'].astype(np.float64),
            pose=chunk['pose'].astype(np.float64),
            human_future=chunk['human_future'].astype(np.float64),
            validity=unpack_validity(chunk['validity'], self.n_humans),
            human_now=chunk['human_now'].astype(np.float64),
            done=chunk['done'].astype(bool),
        )

    def sample_windows(self, split: str, batch: int, window: int, seed: int) -> WindowBatch:
        """Uniform over valid window starts, with replacement; deterministic in seed"""
        starts = self._window_starts(split, window)
        if len(starts) == 0:
            raise InsufficientDataError(f'no {split} episode holds a window of {window} records')
        rng = np.random.default_rng(seed)
        picks = rng.integers(0, len(starts), size=batch)
        return self._gather(starts[picks], window)

    def iter_windows(self, split: str, window: int, max_episodes: Optional[int] = None,
                     chunk: int = 256) -> Iterator[WindowBatch]:
        """Every valid window of the first max_episodes episodes of a split, in order"""
        starts = self._window_starts(split, window)
        if max_episodes is not None:
            allowed = set(self.episode_ids(split)[:max_episodes])
            starts = starts[np.isin(starts[:, 1], list(allowed))]
        for i in range(0, len(starts), chunk):
            yield self._gather(starts[i:i + chunk], window)

    def stats(self, split: Optional[str] = None) -> ReplayStats:
        ids = self.episode_ids(split)
        if not ids:
            return ReplayStats(split=split or 'all')
        records = self.records
        lengths = [self.index[eid][1] for eid in ids]
        selected = np.concatenate([np.arange(self.index[eid][0], self.index[eid][0] + self.index[eid][1])
                                   for eid in ids])
        histogram = np.bincount(records['action'][selected], minlength=N_ACTIONS)[:N_ACTIONS]
        return ReplayStats(split=split or 'all', episodes=len(ids), transitions=int(sum(lengths)),
                           action_histogram=[int(n) for n in histogram],
                           mean_episode_length=float(np.mean(lengths)))
