"""Offline transition datasets and their binary file format.

Files are self-describing: magic "SAQD", u16 version, length-prefixed UTF-8
JSON metadata, fixed-width little-endian float64 records, trailing CRC32 of
everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SAQD"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised on corrupt or truncated dataset files; message names the byte offset."""


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class TransitionDataset:
    """Columnar storage of (s, a, r, s', done) with provenance metadata."""

    states: np.ndarray       # (N, state_dim)
    actions: np.ndarray      # (N, action_dim)
    rewards: np.ndarray      # (N,)
    next_states: np.ndarray  # (N, state_dim)
    terminals: np.ndarray    # (N,) bool
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.next_states = np.asarray(self.next_states, dtype=np.float64)
        self.terminals = np.asarray(self.terminals, dtype=bool)
        n = len(self.states)
        if not (len(self.actions) == len(self.rewards) == len(self.next_states) == len(self.terminals) == n):
            raise ValueError("dataset columns have inconsistent lengths")
        if n and self.states.shape[1] != self.next_states.shape[1]:
            raise ValueError("state and next_state dimensions differ")

    def __len__(self):
        return len(self.states)

    @property
    def state_dim(self):
        return self.states.shape[1] if self.states.ndim == 2 else int(self.metadata.get("state_dim", 0))

    @property
    def action_dim(self):
        return self.actions.shape[1] if self.actions.ndim == 2 else int(self.metadata.get("action_dim", 0))

    def transitions(self):
        for i in range(len(self)):
            yield Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                             self.next_states[i], bool(self.terminals[i]))

    @classmethod
    def from_transitions(cls, transitions: list[Transition], metadata: dict | None = None):
        if not transitions:
            raise ValueError("cannot build a dataset from zero transitions")
        return cls(
            states=np.stack([t.state for t in transitions]),
            actions=np.stack([t.action for t in transitions]),
            rewards=np.array([t.reward for t in transitions]),
            next_states=np.stack([t.next_state for t in transitions]),
            terminals=np.array([t.terminal for t in transitions]),
            metadata=dict(metadata or {}),
        )

    def equal(self, other: "TransitionDataset") -> bool:
        return (
            np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.next_states, other.next_states)
            and np.array_equal(self.terminals, other.terminals)
            and self.metadata == other.metadata
        )


@dataclass
class DiscreteTransitionDataset:
    """A TransitionDataset whose actions have been replaced by code indices.

    Original continuous actions are retained for audit.
    """

    states: np.ndarray
    codes: np.ndarray            # (N,) int in [0, K)
    original_actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    num_codes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.terminals = np.asarray(self.terminals, dtype=bool)
        if len(self.codes) and (self.codes.min() < 0 or self.codes.max() >= self.num_codes):
            raise ValueError(f"code index outside [0, {self.num_codes})")

    def __len__(self):
        return len(self.states)

    @property
    def state_dim(self):
        return self.states.shape[1]


def _pack(dataset) -> bytes:
    discrete = isinstance(dataset, DiscreteTransitionDataset)
    n = len(dataset)
    state_dim = dataset.states.shape[1] if n else int(dataset.metadata.get("state_dim", 0))
    if discrete:
        action_dim = dataset.original_actions.shape[1] if n else int(dataset.metadata.get("action_dim", 0))
    else:
        action_dim = dataset.actions.shape[1] if n else int(dataset.metadata.get("action_dim", 0))
    meta = {
        "n": n,
        "state_dim": state_dim,
        "action_dim": action_dim,
        "discrete": discrete,
        "user": dict(dataset.metadata),
    }
    if discrete:
        meta["num_codes"] = dataset.num_codes
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", FORMAT_VERSION)
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    cols = [dataset.states]
    if discrete:
        cols += [dataset.codes.astype(np.float64).reshape(n, 1), dataset.original_actions]
    else:
        cols += [dataset.actions]
    cols += [
        dataset.rewards.reshape(n, 1),
        dataset.next_states,
        dataset.terminals.astype(np.float64).reshape(n, 1),
    ]
    records = np.concatenate([c.reshape(n, -1) for c in cols], axis=1) if n else np.zeros((0, 0))
    out += records.astype("<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_dataset(dataset, path) -> None:
    with open(path, "wb") as f:
        f.write(_pack(dataset))


def load_dataset(path):
    """Load a TransitionDataset or DiscreteTransitionDataset (per its metadata)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 10:
        raise DatasetFormatError(f"file truncated at offset {len(blob)}: no header")
    if blob[:4] != MAGIC:
        raise DatasetFormatError("bad magic at offset 0")
    version = struct.unpack_from("<H", blob, 4)[0]
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version} at offset 4")
    meta_len = struct.unpack_from("<I", blob, 6)[0]
    body_start = 10 + meta_len
    if len(blob) < body_start + 4:
        raise DatasetFormatError(f"file truncated at offset {len(blob)}: metadata incomplete")
    stored_crc = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    actual_crc = zlib.crc32(blob[:-4])
    if stored_crc != actual_crc:
        raise DatasetFormatError(f"CRC mismatch at offset {len(blob) - 4}")
    try:
        meta = json.loads(blob[10:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"corrupt metadata at offset 10: {e}") from e

    n = int(meta["n"])
    state_dim = int(meta["state_dim"])
    action_dim = int(meta["action_dim"])
    discrete = bool(meta["discrete"])
    user_meta = meta.get("user", {})
    width = 2 * state_dim + action_dim + 2 + (1 if discrete else 0)
    body = blob[body_start:-4]
    expected = n * width * 8
    if len(body) != expected:
        raise DatasetFormatError(
            f"record block at offset {body_start} has {len(body)} bytes, expected {expected}")
    records = np.frombuffer(body, dtype="<f8").reshape(n, width) if n else np.zeros((n, width))

    i = 0
    states = records[:, i:i + state_dim]; i += state_dim
    if discrete:
        codes = records[:, i].astype(np.int64); i += 1
    actions = records[:, i:i + action_dim]; i += action_dim
    rewards = records[:, i]; i += 1
    next_states = records[:, i:i + state_dim]; i += state_dim
    terminals = records[:, i].astype(bool)

    if discrete:
        num_codes = int(meta["num_codes"])
        return DiscreteTransitionDataset(
            states=states.copy(), codes=codes, original_actions=actions.copy(),
            rewards=rewards.copy(), next_states=next_states.copy(), terminals=terminals,
            num_codes=num_codes, metadata=user_meta)
    return TransitionDataset(
        states=states.copy(), actions=actions.copy(), rewards=rewards.copy(),
        next_states=next_states.copy(), terminals=terminals, metadata=user_meta)
