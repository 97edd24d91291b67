"""Offline datasets: episode-aware transition storage, generation, mixing, file I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError

DATASET_MAGIC = b"MOPPDS1\x00"
DATASET_VERSION = 1
_HEADER = struct.Struct("<IIIII")  # version, state dim, action dim, count, episodes


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    episode_id: int


@dataclass
class DatasetStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    reward_min: float
    reward_max: float
    episode_returns: np.ndarray


class Dataset:
    """Column-typed transitions ordered by episode."""

    def __init__(self, states, actions, rewards, next_states, dones, episode_ids):
        self.states = np.asarray(states, dtype=np.float32)
        self.actions = np.asarray(actions, dtype=np.float32)
        self.rewards = np.asarray(rewards, dtype=np.float32).ravel()
        self.next_states = np.asarray(next_states, dtype=np.float32)
        self.dones = np.asarray(dones, dtype=bool).ravel()
        self.episode_ids = np.asarray(episode_ids, dtype=np.uint32).ravel()
        n = len(self.rewards)
        if self.states.ndim != 2 or self.next_states.shape != self.states.shape:
            raise DataError("state arrays must be 2-D and matching")
        if self.actions.ndim != 2 or len(self.actions) != n or len(self.states) != n:
            raise DataError("column lengths disagree")
        if len(self.dones) != n or len(self.episode_ids) != n:
            raise DataError("column lengths disagree")
        self.stats = self.compute_stats()

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def n_episodes(self) -> int:
        return len(np.unique(self.episode_ids)) if len(self) else 0

    def episode_slices(self):
        """Contiguous [start, stop) ranges of each episode, in storage order."""
        if len(self) == 0:
            return []
        ids = self.episode_ids
        breaks = np.flatnonzero(ids[1:] != ids[:-1]) + 1
        starts = np.concatenate([[0], breaks])
        stops = np.concatenate([breaks, [len(ids)]])
        return list(zip(starts.tolist(), stops.tolist()))

    def compute_stats(self) -> DatasetStats:
        if len(self) == 0:
            zs = np.zeros(self.states.shape[1] if self.states.ndim == 2 else 0)
            za = np.zeros(self.actions.shape[1] if self.actions.ndim == 2 else 0)
            return DatasetStats(zs, np.ones_like(zs), za, np.ones_like(za), 0.0, 0.0, np.zeros(0))
        returns = np.array(
            [float(self.rewards[a:b].sum(dtype=np.float64)) for a, b in self.episode_slices()]
        )
        return DatasetStats(
            state_mean=self.states.mean(axis=0, dtype=np.float64),
            state_std=self.states.std(axis=0, dtype=np.float64),
            action_mean=self.actions.mean(axis=0, dtype=np.float64),
            action_std=self.actions.std(axis=0, dtype=np.float64),
            reward_min=float(self.rewards.min()),
            reward_max=float(self.rewards.max()),
            episode_returns=returns,
        )

    def transitions(self):
        for i in range(len(self)):
            yield Transition(
                self.states[i],
                self.actions[i],
                float(self.rewards[i]),
                self.next_states[i],
                bool(self.dones[i]),
                int(self.episode_ids[i]),
            )


def generate_dataset(env, policy, episodes: int, seed: int = 0) -> Dataset:
    """Roll whole episodes with ``policy`` and record every transition."""
    if episodes < 1:
        raise DataError("need at least one episode")
    states, actions, rewards, next_states, dones, ep_ids = [], [], [], [], [], []
    for ep in range(episodes):
        s = env.reset(seed=[seed, ep])
        done = False
        while not done:
            a = np.clip(policy(s), env.spec.action_low, env.spec.action_high)
            s_next, r, done = env.step(a)
            states.append(s.astype(np.float32))
            actions.append(np.asarray(a, dtype=np.float32))
            rewards.append(r)
            next_states.append(s_next.astype(np.float32))
            dones.append(done)
            ep_ids.append(ep)
            s = s_next
    return Dataset(states, actions, rewards, next_states, dones, ep_ids)


def mix(datasets, ratios) -> Dataset:
    """Combine whole episodes from several datasets at the given ratios.

    Keeps the largest episode total compatible with every ratio, apportions
    counts by largest remainder, and interleaves sources proportionally.
    """
    if not datasets or not ratios or len(datasets) != len(ratios):
        raise DataError("need matching non-empty datasets and ratios")
    if any(len(d) == 0 for d in datasets):
        raise DataError("cannot mix an empty dataset")
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios < 0) or abs(float(ratios.sum()) - 1.0) > 1e-9:
        raise ValueError("ratios must be non-negative and sum to 1")

    counts = [d.n_episodes for d in datasets]
    total = min(
        int(n / r) for n, r in zip(counts, ratios) if r > 0
    )
    if total < 1:
        raise DataError("ratios leave no complete episode to take")
    exact = ratios * total
    take = np.floor(exact).astype(int)
    remainder = exact - take
    for i in np.argsort(-remainder)[: total - int(take.sum())]:
        take[i] += 1

    slices = [d.episode_slices() for d in datasets]
    placed = np.zeros(len(datasets), dtype=int)
    order = []
    for _ in range(int(take.sum())):
        deficit = ratios * (placed.sum() + 1) - placed
        deficit[placed >= take] = -np.inf
        src = int(np.argmax(deficit))
        order.append((src, placed[src]))
        placed[src] += 1

    cols = ([], [], [], [], [], [])
    for new_id, (src, ep_idx) in enumerate(order):
        a, b = slices[src][ep_idx]
        d = datasets[src]
        cols[0].append(d.states[a:b])
        cols[1].append(d.actions[a:b])
        cols[2].append(d.rewards[a:b])
        cols[3].append(d.next_states[a:b])
        cols[4].append(d.dones[a:b])
        cols[5].append(np.full(b - a, new_id, dtype=np.uint32))
    return Dataset(*(np.concatenate(c) for c in cols))


def _record_dtype(state_dim: int, action_dim: int) -> np.dtype:
    return np.dtype(
        [
            ("s", "<f4", (state_dim,)),
            ("a", "<f4", (action_dim,)),
            ("r", "<f4"),
            ("sn", "<f4", (state_dim,)),
            ("done", "u1"),
            ("ep", "<u4"),
        ]
    )


def save_dataset(dataset: Dataset, path) -> None:
    rec = np.zeros(len(dataset), dtype=_record_dtype(dataset.state_dim, dataset.action_dim))
    rec["s"] = dataset.states
    rec["a"] = dataset.actions
    rec["r"] = dataset.rewards
    rec["sn"] = dataset.next_states
    rec["done"] = dataset.dones.astype(np.uint8)
    rec["ep"] = dataset.episode_ids
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(
            _HEADER.pack(
                DATASET_VERSION,
                dataset.state_dim,
                dataset.action_dim,
                len(dataset),
                dataset.n_episodes,
            )
        )
        f.write(rec.tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    if len(data) < 8 + _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte offset {len(data)}")
    version, state_dim, action_dim, count, episodes = _HEADER.unpack_from(data, 8)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 8")
    body = 8 + _HEADER.size
    dtype = _record_dtype(state_dim, action_dim)
    expected = body + count * dtype.itemsize
    if len(data) != expected:
        bad = min(len(data), expected)
        raise FormatError(
            f"{path}: expected {expected} bytes for {count} records, "
            f"got {len(data)} (error at byte offset {bad})"
        )
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=body)
    ds = Dataset(
        rec["s"].reshape(count, state_dim),
        rec["a"].reshape(count, action_dim),
        rec["r"],
        rec["sn"].reshape(count, state_dim),
        rec["done"].astype(bool),
        rec["ep"],
    )
    if ds.n_episodes != episodes:
        raise FormatError(
            f"{path}: header claims {episodes} episodes, records contain "
            f"{ds.n_episodes} (error at byte offset 20)"
        )
    return ds
