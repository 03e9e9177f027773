"""Trajectory records, the traj-v1 file codecs, dataset statistics and the CoT side-file."""

from __future__ import annotations

import json
import logging
import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np

from .const import COT_FORMAT, PROMPT_VERSION, ROSTER_HASH, STATE_DIM, STATE_FEATURES, TRAJ_FORMAT, TRAJ_MAGIC
from .exceptions import ArtifactMismatchError, IncompleteEpisodeError, MissingArtifactError

_LOGGER = logging.getLogger(__name__)

_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")
_ARRAY_FIELDS = ("actions", "rewards", "returns_to_go", "costs", "perfs")


def returns_to_go(rewards: np.ndarray) -> np.ndarray:
    """Return R_t = sum of rewards from t to the end."""
    return np.cumsum(np.asarray(rewards, dtype=np.float64)[::-1])[::-1].astype(np.float32)


# pylint: disable=too-many-instance-attributes
@dataclass
class Trajectory:
    """One episode as recorded for offline training."""

    traj_id: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    perfs: np.ndarray
    budget: float
    cpa_constraint: float
    seed: int
    policy_id: str
    num_steps: int
    returns_to_go: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=np.float32).reshape(-1, STATE_DIM)
        for name in ("actions", "rewards", "costs", "perfs"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32).reshape(-1))
        length = len(self.actions)
        if any(len(getattr(self, name)) != length for name in ("states", "rewards", "costs", "perfs")):
            raise ValueError(f"trajectory {self.traj_id} has inconsistent lengths")
        if len(self.returns_to_go) != length:
            self.returns_to_go = returns_to_go(self.rewards)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def is_complete(self) -> bool:
        """Return True when every step of the episode was recorded."""
        return len(self) == self.num_steps

    @property
    def metadata(self) -> dict[str, Any]:
        """Return the scalar fields written next to the arrays."""
        return {
            "budget": float(self.budget),
            "cpa_constraint": float(self.cpa_constraint),
            "seed": int(self.seed),
            "policy_id": self.policy_id,
            "num_steps": int(self.num_steps),
        }

    def require_complete(self) -> None:
        """Raise IncompleteEpisodeError unless the trajectory is complete."""
        if not self.is_complete:
            raise IncompleteEpisodeError(
                f"trajectory {self.traj_id} has {len(self)} of {self.num_steps} steps"
            )

    def to_json(self) -> dict[str, Any]:
        """Return the JSON-lines representation."""
        data: dict[str, Any] = {"id": self.traj_id, "meta": self.metadata}
        data["states"] = [[float(x) for x in row] for row in self.states]
        for name in _ARRAY_FIELDS:
            data[name] = [float(x) for x in getattr(self, name)]
        return data

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> Trajectory:
        """Rebuild a trajectory from to_json() output."""
        meta = data["meta"]
        return cls(
            traj_id=data["id"],
            states=np.asarray(data["states"], dtype=np.float32),
            actions=np.asarray(data["actions"], dtype=np.float32),
            rewards=np.asarray(data["rewards"], dtype=np.float32),
            costs=np.asarray(data["costs"], dtype=np.float32),
            perfs=np.asarray(data["perfs"], dtype=np.float32),
            returns_to_go=np.asarray(data["returns_to_go"], dtype=np.float32),
            budget=meta["budget"],
            cpa_constraint=meta["cpa_constraint"],
            seed=meta["seed"],
            policy_id=meta["policy_id"],
            num_steps=meta["num_steps"],
        )

    def to_bytes(self) -> bytes:
        """Return the binary record body (without its length prefix)."""
        ident = self.traj_id.encode()
        meta = json.dumps(self.metadata, sort_keys=True).encode()
        parts = [_U32.pack(len(ident)), ident, _U32.pack(len(meta)), meta, _U32.pack(len(self))]
        parts.append(self.states.astype(_F32).tobytes())
        parts.extend(getattr(self, name).astype(_F32).tobytes() for name in _ARRAY_FIELDS)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, body: bytes) -> Trajectory:
        """Rebuild a trajectory from to_bytes() output."""
        offset = 0

        def _chunk(size: int) -> bytes:
            nonlocal offset
            if offset + size > len(body):
                raise ArtifactMismatchError("truncated trajectory record")
            piece = body[offset : offset + size]
            offset += size
            return piece

        ident = _chunk(_U32.unpack(_chunk(4))[0]).decode()
        meta = json.loads(_chunk(_U32.unpack(_chunk(4))[0]))
        length = _U32.unpack(_chunk(4))[0]
        states = np.frombuffer(_chunk(4 * length * STATE_DIM), dtype=_F32).reshape(length, STATE_DIM)
        arrays = {name: np.frombuffer(_chunk(4 * length), dtype=_F32) for name in _ARRAY_FIELDS}
        return cls(traj_id=ident, states=states, **arrays, **_meta_kwargs(meta))


def _meta_kwargs(meta: dict[str, Any]) -> dict[str, Any]:
    return {
        "budget": meta["budget"],
        "cpa_constraint": meta["cpa_constraint"],
        "seed": meta["seed"],
        "policy_id": meta["policy_id"],
        "num_steps": meta["num_steps"],
    }


@dataclass
class Dataset:
    """A traj-v1 file: its header and its trajectories in file order."""

    header: dict[str, Any]
    trajectories: list[Trajectory]

    def __len__(self) -> int:
        return len(self.trajectories)


def dataset_header(count: int, extra: dict[str, Any] | None = None) -> dict[str, Any]:
    """Return the header written at the top of every traj-v1 file."""
    header: dict[str, Any] = {
        "format": TRAJ_FORMAT,
        "roster_hash": ROSTER_HASH,
        "state_features": list(STATE_FEATURES),
        "count": count,
    }
    header.update(extra or {})
    return header


def write_dataset(
    path: str | Path,
    trajectories: Sequence[Trajectory],
    binary: bool = False,
    extra_header: dict[str, Any] | None = None,
) -> Path:
    """
    Write trajectories to a traj-v1 file.

    Parameters:
        path: output file
        trajectories: records in the order they should appear
        binary: length-prefixed little-endian records instead of JSON lines
        extra_header: additional header keys (config hash, seed, ...)
    """
    path = Path(path)
    header = dataset_header(len(trajectories), extra_header)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as handle:
            if binary:
                _write_binary(handle, header, trajectories)
            else:
                handle.write((json.dumps(header, sort_keys=True) + "\n").encode())
                for traj in trajectories:
                    handle.write((json.dumps(traj.to_json(), sort_keys=True) + "\n").encode())
    except OSError as error:
        _LOGGER.error("Could not write dataset %s: %s", path, error)
        raise
    _LOGGER.info("Wrote %s trajectories to %s", len(trajectories), path)
    return path


def _write_binary(handle: BinaryIO, header: dict[str, Any], trajectories: Sequence[Trajectory]) -> None:
    encoded = json.dumps(header, sort_keys=True).encode()
    handle.write(TRAJ_MAGIC + _U32.pack(len(encoded)) + encoded)
    for traj in trajectories:
        body = traj.to_bytes()
        handle.write(_U32.pack(len(body)) + body)


def read_dataset(path: str | Path) -> Dataset:
    """Read a traj-v1 file in either mode, detected from the leading magic bytes."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"dataset not found: {path}")
    raw = path.read_bytes()
    if raw.startswith(TRAJ_MAGIC):
        header, trajectories = _read_binary(raw)
    else:
        lines = [line for line in raw.decode().splitlines() if line.strip()]
        if not lines:
            raise ArtifactMismatchError(f"{path} is empty")
        header = json.loads(lines[0])
        trajectories = [Trajectory.from_json(json.loads(line)) for line in lines[1:]]
    check_header(header, str(path))
    return Dataset(header, trajectories)


def _read_binary(raw: bytes) -> tuple[dict[str, Any], list[Trajectory]]:
    offset = len(TRAJ_MAGIC)
    (size,) = _U32.unpack_from(raw, offset)
    offset += 4
    header = json.loads(raw[offset : offset + size])
    offset += size
    trajectories = []
    while offset < len(raw):
        (size,) = _U32.unpack_from(raw, offset)
        offset += 4
        trajectories.append(Trajectory.from_bytes(raw[offset : offset + size]))
        offset += size
    return header, trajectories


def check_header(header: dict[str, Any], source: str) -> None:
    """Refuse files of another format or state roster."""
    if header.get("format") != TRAJ_FORMAT:
        raise ArtifactMismatchError(f"{source}: format {header.get('format')}, expected {TRAJ_FORMAT}")
    if header.get("roster_hash") != ROSTER_HASH:
        raise ArtifactMismatchError(
            f"{source}: state roster {header.get('roster_hash')} differs from {ROSTER_HASH}"
        )


@dataclass(frozen=True)
class DatasetStats:
    """Normalization constants and ranges measured on a training dataset."""

    state_mean: tuple[float, ...]
    state_std: tuple[float, ...]
    max_return: float
    action_low: float
    action_high: float
    num_trajectories: int
    roster_hash: str = ROSTER_HASH

    def normalize(self, states: np.ndarray) -> np.ndarray:
        """Standardize states feature by feature."""
        mean = np.asarray(self.state_mean, dtype=np.float32)
        std = np.asarray(self.state_std, dtype=np.float32)
        return ((np.asarray(states, dtype=np.float32) - mean) / std).astype(np.float32)

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-compatible dict."""
        return {
            "state_mean": list(self.state_mean),
            "state_std": list(self.state_std),
            "max_return": self.max_return,
            "action_low": self.action_low,
            "action_high": self.action_high,
            "num_trajectories": self.num_trajectories,
            "roster_hash": self.roster_hash,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DatasetStats:
        """Rebuild from to_dict() output, refusing another state roster."""
        if data.get("roster_hash") != ROSTER_HASH:
            raise ArtifactMismatchError(
                f"statistics computed for roster {data.get('roster_hash')}, expected {ROSTER_HASH}"
            )
        return cls(
            state_mean=tuple(data["state_mean"]),
            state_std=tuple(data["state_std"]),
            max_return=float(data["max_return"]),
            action_low=float(data["action_low"]),
            action_high=float(data["action_high"]),
            num_trajectories=int(data["num_trajectories"]),
        )


def compute_stats(trajectories: Sequence[Trajectory]) -> DatasetStats:
    """Measure DatasetStats over a non-empty list of trajectories."""
    if not trajectories:
        raise ValueError("cannot compute statistics of an empty dataset")
    states = np.concatenate([t.states for t in trajectories]).astype(np.float64)
    actions = np.concatenate([t.actions for t in trajectories])
    std = states.std(axis=0)
    std[std < 1e-6] = 1.0
    return DatasetStats(
        state_mean=tuple(float(x) for x in states.mean(axis=0)),
        state_std=tuple(float(x) for x in std),
        max_return=float(max(t.returns_to_go[0] for t in trajectories if len(t))),
        action_low=float(actions.min()),
        action_high=float(actions.max()),
        num_trajectories=len(trajectories),
    )


# CoT side-file


@dataclass(frozen=True)
class CotEntry:
    """One reasoning text attached to step t of a trajectory."""

    trajectory_id: str
    t: int
    text: str
    direction: str
    claimed_cpa_ratio: float | None = None

    @property
    def key(self) -> tuple[str, int]:
        """Return the (trajectory id, t) lookup key."""
        return (self.trajectory_id, self.t)


def write_cot_file(
    path: str | Path, entries: Iterable[CotEntry], extra_header: dict[str, Any] | None = None
) -> Path:
    """Write CoT entries as JSON lines sorted by key, after a header line."""
    path = Path(path)
    header: dict[str, Any] = {"format": COT_FORMAT, "prompt_version": PROMPT_VERSION}
    header.update(extra_header or {})
    ordered = sorted(entries, key=lambda entry: entry.key)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for entry in ordered:
            record = {
                "trajectory_id": entry.trajectory_id,
                "t": entry.t,
                "text": entry.text,
                "direction": entry.direction,
                "claimed_cpa_ratio": entry.claimed_cpa_ratio,
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    _LOGGER.info("Wrote %s CoT entries to %s", len(ordered), path)
    return path


def read_cot_file(path: str | Path) -> dict[tuple[str, int], CotEntry]:
    """Read a CoT side-file into a dict keyed by (trajectory id, t)."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"CoT side-file not found: {path}")
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines or json.loads(lines[0]).get("format") != COT_FORMAT:
        raise ArtifactMismatchError(f"{path} is not a {COT_FORMAT} side-file")
    entries: dict[tuple[str, int], CotEntry] = {}
    for line in lines[1:]:
        data = json.loads(line)
        entry = CotEntry(
            trajectory_id=data["trajectory_id"],
            t=int(data["t"]),
            text=data["text"],
            direction=data["direction"],
            claimed_cpa_ratio=data.get("claimed_cpa_ratio"),
        )
        entries[entry.key] = entry
    return entries
