import struct

import numpy as np
import pytest

from replay_store import (HEADER, BadMagicError, DuplicateEpisodeError, EmptyEpisodeError, InsufficientDataError,
                          NonContiguousEpisodeError, ReplayError, ReplayStore, TransitionRecord,
                          TruncatedReplayError, VersionMismatchError, pack_validity, record_rollout,
                          records_to_array, split_of, unpack_validity)
from socialnav_sim import N_RAYS, Scene, SocialNavEnv, greedy_action
from verify_replay import check_episodes, verify_replay

N_HUMANS = 2
HORIZON = 3


def fake_episode(episode_id, length, t=None, done_last=True, n_humans=N_HUMANS, horizon=HORIZON):
    rng = np.random.default_rng(episode_id)
    ts = list(range(length)) if t is None else t
    return [TransitionRecord(
        episode_id=episode_id, t=ts[k], depth=rng.uniform(0, 1, N_RAYS), action=int(rng.integers(0, 4)),
        reward_task=float(rng.normal()), pose=rng.normal(size=3), human_future=rng.normal(size=(n_humans, horizon, 2)),
        validity=np.array([True] + [False] * (n_humans - 1)), human_now=rng.normal(size=(n_humans, 2)),
        done=done_last and k == length - 1) for k in range(length)]


def box_scene(nx=60, ny=40):
    grid = np.zeros((ny, nx), dtype=bool)
    grid[0, :] = grid[-1, :] = True
    grid[:, 0] = grid[:, -1] = True
    return Scene(grid=grid)


def filled_store(path, lengths):
    store = ReplayStore.create(path, n_humans=N_HUMANS, horizon=HORIZON)
    for eid, length in enumerate(lengths):
        store.append_episode(fake_episode(eid, length))
    return store


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def test_new_store_is_empty_and_loadable(tmp_path):
    path = tmp_path / "replay.ntrb"
    ReplayStore.create(path, n_humans=N_HUMANS, horizon=HORIZON)
    store = ReplayStore.load(path)
    assert store.count == 0
    assert store.index == {}
    assert len(store.records) == 0
    assert (store.n_humans, store.horizon) == (N_HUMANS, HORIZON)


def test_appended_episodes_survive_reload(tmp_path):
    path = tmp_path / "replay.ntrb"
    store = filled_store(path, [5, 3, 7])
    loaded = ReplayStore.load(path)
    assert loaded.count == 15
    assert loaded.index == {0: (0, 5), 1: (5, 3), 2: (8, 7)}
    assert loaded.records.tobytes() == store.records.tobytes()
    assert np.allclose(loaded.episode(1)['depth'], store.episode(1)['depth'])


def test_every_append_leaves_a_valid_file(tmp_path):
    path = tmp_path / "replay.ntrb"
    store = ReplayStore.create(path, n_humans=N_HUMANS, horizon=HORIZON)
    for eid in range(4):
        store.append_episode(fake_episode(eid, 2 + eid))
        assert ReplayStore.load(path).count == store.count


def test_bad_magic(tmp_path):
    path = tmp_path / "replay.ntrb"
    filled_store(path, [3])
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagicError):
        ReplayStore.load(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "replay.ntrb"
    filled_store(path, [3])
    blob = bytearray(path.read_bytes())
    struct.pack_into("<I", blob, 4, 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatchError):
        ReplayStore.load(path)


@pytest.mark.parametrize("cut", [HEADER.size - 2, HEADER.size + 10, -4])
def test_truncated_file(tmp_path, cut):
    path = tmp_path / "replay.ntrb"
    filled_store(path, [4, 4])
    blob = path.read_bytes()
    path.write_bytes(blob[:cut])
    with pytest.raises(TruncatedReplayError):
        ReplayStore.load(path)


def test_index_pointing_past_records_is_truncation(tmp_path):
    path = tmp_path / "replay.ntrb"
    filled_store(path, [4])
    blob = bytearray(path.read_bytes())
    # the single index entry is the last 20 bytes: id, first, length
    struct.pack_into("<I", blob, len(blob) - 4, 50)
    path.write_bytes(bytes(blob))
    with pytest.raises(TruncatedReplayError):
        ReplayStore.load(path)


# ---------------------------------------------------------------------------
# append contracts
# ---------------------------------------------------------------------------

def test_duplicate_episode_is_rejected(tmp_path):
    store = filled_store(tmp_path / "replay.ntrb", [3])
    with pytest.raises(DuplicateEpisodeError):
        store.append_episode(fake_episode(0, 2))
    assert store.count == 3


def test_non_contiguous_t_is_rejected():
    store = ReplayStore(N_HUMANS, HORIZON)
    with pytest.raises(NonContiguousEpisodeError):
        store.append_episode(fake_episode(1, 3, t=[0, 2, 3]))
    with pytest.raises(NonContiguousEpisodeError):
        store.append_episode(fake_episode(2, 2, t=[1, 2]))
    assert store.count == 0


def test_empty_episode_is_rejected():
    store = ReplayStore(N_HUMANS, HORIZON)
    with pytest.raises(EmptyEpisodeError):
        store.append_episode([])


def test_mixed_episode_ids_are_rejected():
    store = ReplayStore(N_HUMANS, HORIZON)
    array = records_to_array(fake_episode(3, 3), N_HUMANS, HORIZON)
    array["episode_id"][2] = 4
    with pytest.raises(ReplayError):
        store.append_episode(array)


def test_validity_bitmask():
    bits = pack_validity([True, False, True, True])
    assert bits == 0b1101
    assert unpack_validity(np.array([bits]), 4).tolist() == [[True, False, True, True]]
    with pytest.raises(ReplayError):
        ReplayStore(n_humans=9)


# ---------------------------------------------------------------------------
# splits and windows
# ---------------------------------------------------------------------------

def test_split_depends_on_the_id_only():
    assert [split_of(i) for i in range(200)] == [split_of(i) for i in range(200)]
    heldout = sum(split_of(i) == "heldout" for i in range(1000))
    assert 50 <= heldout <= 150


def test_windows_never_cross_episode_boundaries(tmp_path):
    lengths = [6, 2, 9, 4]
    store = filled_store(tmp_path / "replay.ntrb", lengths)
    window = 4
    for split in ("train", "heldout"):
        expected = sum(max(0, lengths[eid] - window + 1) for eid in store.episode_ids(split))
        assert store.count_windows(split, window) == expected
        if expected == 0:
            continue
        batch = store.sample_windows(split, batch=32, window=window, seed=1)
        assert batch.depth.shape == (32, window, N_RAYS)
        assert batch.human_future.shape == (32, window, N_HUMANS, HORIZON, 2)
        for row in range(32):
            eid = int(batch.episode_id[row])
            start = int(batch.start[row])
            assert split_of(eid) == split
            assert start + window <= lengths[eid]
            assert not batch.done[row, :-1].any()
            episode = store.episode(eid)
            assert np.allclose(batch.depth[row], episode["depth"][start:start + window])


def test_sampling_is_deterministic_in_seed(tmp_path):
    store = filled_store(tmp_path / "replay.ntrb", [8, 8, 8, 8, 8])
    a = store.sample_windows("train", batch=16, window=3, seed=7)
    b = store.sample_windows("train", batch=16, window=3, seed=7)
    assert np.array_equal(a.episode_id, b.episode_id)
    assert np.array_equal(a.start, b.start)


def test_iter_windows_covers_every_start(tmp_path):
    store = filled_store(tmp_path / "replay.ntrb", [5, 6, 7, 8])
    total = sum(len(batch) for batch in store.iter_windows("train", 3, chunk=4))
    assert total == store.count_windows("train", 3)


def test_no_windows_raises_insufficient_data():
    store = ReplayStore(N_HUMANS, HORIZON)
    store.append_episode(fake_episode(1, 2))
    with pytest.raises(InsufficientDataError):
        store.sample_windows(split_of(1), batch=4, window=6, seed=0)


def test_unknown_split():
    with pytest.raises(ReplayError):
        ReplayStore(N_HUMANS, HORIZON).episode_ids("validation")


# ---------------------------------------------------------------------------
# stats and verification
# ---------------------------------------------------------------------------

def test_stats_match_recount(tmp_path):
    store = filled_store(tmp_path / "replay.ntrb", [5, 3, 7, 2, 6])
    every = store.stats()
    assert every.episodes == 5
    assert every.transitions == 23
    assert sum(every.action_histogram) == 23
    assert every.mean_episode_length == pytest.approx(23 / 5)
    parts = [store.stats(split) for split in ("train", "heldout")]
    assert sum(s.transitions for s in parts) == 23
    assert sum(s.episodes for s in parts) == 5


def test_empty_stats_lines():
    lines = ReplayStore(N_HUMANS, HORIZON).stats().to_lines()
    assert lines[:3] == ["split=all", "episodes=0", "transitions=0"]
    assert lines[-1] == "mean_episode_length=0.000000"


def test_verify_replay_accepts_a_clean_file(tmp_path):
    path = tmp_path / "replay.ntrb"
    filled_store(path, [4, 5, 6])
    lines = verify_replay(path)
    assert "split=all" in lines and "split=train" in lines and "split=heldout" in lines
    assert "transitions=15" in lines


def test_verify_replay_flags_missing_done(tmp_path):
    path = tmp_path / "replay.ntrb"
    store = ReplayStore.create(path, n_humans=N_HUMANS, horizon=HORIZON)
    store.append_episode(fake_episode(0, 4, done_last=False))
    assert check_episodes(store)
    with pytest.raises(ReplayError):
        verify_replay(path)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

def test_recorded_rollout_is_a_valid_episode():
    env = SocialNavEnv(box_scene(), n_robots=1, n_humans=2, max_steps=40, min_goal_distance=1.0)
    env.reset(3)
    records = record_rollout(env, lambda e: greedy_action(e, 0), episode_id=11, n_humans=4, horizon=HORIZON)
    assert [r.t for r in records] == list(range(len(records)))
    assert records[-1].done and not any(r.done for r in records[:-1])
    assert all(r.validity.tolist() == [True, True, False, False] for r in records)
    assert len(env.human_history) >= len(records) + HORIZON + 1

    store = ReplayStore(4, HORIZON)
    store.append_episode(records)
    assert check_episodes(store) == []
