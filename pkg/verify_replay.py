"""
Quick script to verify a replay file
Shows per-split stats and checks episode contiguity and done flags
"""

import sys
from pathlib import Path
from typing import List

import numpy as np

from replay_store import ReplayError, ReplayStore, split_of


def check_episodes(replay: ReplayStore) -> List[str]:
    """Problems found in the index and records; empty when the file is consistent"""
    problems = []
    records = replay.records
    covered = 0
    for episode_id, (first, length) in replay.index.items():
        rows = records[first:first + length]
        covered += length
        if (rows['episode_id'] != episode_id).any():
            problems.append(f'episode {episode_id}: records carry another episode id')
        if not np.array_equal(rows['t'].astype(np.int64), np.arange(length)):
            problems.append(f'episode {episode_id}: t is not contiguous from 0')
        done = rows['done'].astype(bool)
        if length and (not done[-1] or done[:-1].any()):
            problems.append(f'episode {episode_id}: done flag is not set on the last record only')
    if covered != replay.count:
        problems.append(f'index covers {covered} records, header announces {replay.count}')
    return problems


def recount(replay: ReplayStore, split: str) -> int:
    ids = replay.records['episode_id']
    keep = np.array([split_of(int(eid)) == split for eid in ids], dtype=bool)
    return int(keep.sum())


def verify_replay(path) -> List[str]:
    """Print key=value stats per split and raise ReplayError on any inconsistency"""
    replay = ReplayStore.load(path)

    print("=" * 60)
    print("Replay Verification")
    print("=" * 60)
    print(f"\n[OK] File: {Path(path)}")
    print(f"[OK] Shape: n_humans={replay.n_humans} horizon={replay.horizon}")

    lines = []
    for split in (None, "train", "heldout"):
        stats = replay.stats(split)
        lines += stats.to_lines()
        print()
        for line in stats.to_lines():
            print(f"  {line}")
        if split is not None and recount(replay, split) != stats.transitions:
            raise ReplayError(f"{split}: stats report {stats.transitions} transitions, "
                              f"recount gives {recount(replay, split)}")

    print("\nChecking episodes...")
    problems = check_episodes(replay)
    if problems:
        print(f"[WARNING] Found {len(problems)} problem(s):")
        for problem in problems[:5]:
            print(f"  {problem}")
        raise ReplayError(f"{path}: {problems[0]}")
    print("[OK] Episodes are contiguous and terminated")

    print("\n" + "=" * 60)
    print("[OK] Replay is ready!")
    print("=" * 60)
    return lines


if __name__ == "__main__":
    if len(sys.argv) != 2:
        print("Usage: python verify_replay.py <replay.ntrb>")
        sys.exit(2)
    try:
        verify_replay(sys.argv[1])
    except ReplayError as e:
        print(f"\n[ERROR] {e}")
        sys.exit(1)
