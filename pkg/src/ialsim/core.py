"""Shared abstractions for networked-environment simulators.

Every simulator in this package, whether it models the full global system or
only the agent's local region, sits behind the same small interface: binary
observation vectors, integer actions, scalar rewards, and a strict
determinism contract (equal seeds followed by equal action sequences must
produce bit-identical trajectories).

The module also provides the history containers used by influence
predictors: truncated action/local-state windows and their d-separating-set
(d-set) projections, plus the labeled seed-splitting helpers that all
randomness in the package flows through.
"""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

Bits = np.ndarray  # flat uint8 vector with values in {0, 1}

MOVE_ACTIONS = ("up", "down", "left", "right", "stay")


def as_bits(values: Iterable[int]) -> Bits:
    """Materialize an iterable of 0/1 values as a uint8 bit vector."""
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                     dtype=np.uint8)
    if arr.ndim != 1:
        raise ValueError(f"bit vectors must be flat, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("bit vectors may only contain 0 or 1")
    return arr


def bits_to_str(bits: Bits) -> str:
    return "".join("1" if b else "0" for b in bits)


def bits_from_str(text: str) -> Bits:
    return np.frombuffer(text.encode("ascii"), dtype=np.uint8) - ord("0")


# ---------------------------------------------------------------------------
# Deterministic randomness
# ---------------------------------------------------------------------------

_U64 = np.uint64
_MASK64 = _U64(0xFFFFFFFFFFFFFFFF)


def derive_seed(seed: int, *labels: object) -> int:
    """Derive a child seed from a root seed and a sequence of labels.

    Hash based so the mapping is stable across platforms and sessions.
    Distinct label paths give independent streams; identical paths give
    identical streams.
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(seed: int, *labels: object) -> np.random.Generator:
    """Seeded generator for the stream identified by (seed, *labels)."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = (z + _U64(0x9E3779B97F4A7C15)) & _MASK64
    z = ((z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)) & _MASK64
    z = ((z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)) & _MASK64
    return z ^ (z >> _U64(31))


def hash_uniform(seed: int, ids: np.ndarray, step: int) -> np.ndarray:
    """Counter-based uniforms in [0, 1), one per id, for a given timestep.

    The draw for a given (seed, id, step) triple is a pure function, which
    lets a local simulator reproduce exactly the per-cell randomness a global
    simulator used, without sharing any generator state.
    """
    ids64 = np.asarray(ids, dtype=np.uint64)
    base = _U64(derive_seed(seed, "hash-stream") & 0xFFFFFFFFFFFFFFFF)
    step_term = _U64((int(step) * 0x2545F4914F6CDD1D) & 0xFFFFFFFFFFFFFFFF)
    z = (ids64 * _U64(0xD1342543DE82EF95)) & _MASK64
    z = (z + step_term) & _MASK64
    z = _splitmix64((z ^ base) & _MASK64)
    return (z >> _U64(11)).astype(np.float64) * (2.0 ** -53)


# ---------------------------------------------------------------------------
# History windows
# ---------------------------------------------------------------------------


class PairWindow:
    """Truncated history of (action, vector) pairs with a fixed capacity.

    Holds the episode-initial vector separately plus up to ``capacity`` of
    the most recent pairs, oldest first. Appending beyond capacity evicts
    the oldest pair.
    """

    __slots__ = ("capacity", "initial", "_entries")

    def __init__(self, initial: Bits, capacity: int):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.capacity = capacity
        self.initial = np.array(initial, dtype=np.uint8)
        self._entries: deque[tuple[int, Bits]] = deque(maxlen=capacity)

    def append(self, action: int, value: Bits) -> None:
        self._entries.append((int(action), np.array(value, dtype=np.uint8)))

    @property
    def entries(self) -> list[tuple[int, Bits]]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


class AlshWindow(PairWindow):
    """Truncated action/local-state history."""


class AohWindow(PairWindow):
    """Truncated action/observation history.

    Kept distinct from :class:`AlshWindow` even in environments where the
    observation and the local state coincide; policies consume this one,
    influence predictors consume the other.
    """


class DsetWindow:
    """Rolling window of per-step d-set rows, oldest first, capacity k."""

    __slots__ = ("capacity", "width", "_rows")

    def __init__(self, width: int, capacity: int):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.capacity = capacity
        self.width = width
        self._rows: deque[Bits] = deque(maxlen=capacity)

    def append(self, row: Bits) -> None:
        row = np.asarray(row, dtype=np.uint8)
        if row.shape != (self.width,):
            raise ValueError(f"d-set row has width {row.shape}, expected {self.width}")
        self._rows.append(row)

    def rows(self) -> np.ndarray:
        """Stacked rows, shape (len, width)."""
        if not self._rows:
            return np.zeros((0, self.width), dtype=np.uint8)
        return np.stack(list(self._rows))

    def clear(self) -> None:
        self._rows.clear()

    def __len__(self) -> int:
        return len(self._rows)


# ---------------------------------------------------------------------------
# Simulator interfaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimDescriptor:
    """Static shape information a trainer needs to drive a simulator."""

    env_id: str
    obs_width: int
    action_count: int
    local_width: int
    dset_width: int
    influence_classes: tuple[int, ...]  # class count per influence head

    @property
    def influence_heads(self) -> int:
        return len(self.influence_classes)

    def fingerprint(self) -> str:
        payload = (f"{self.env_id}|{self.obs_width}|{self.action_count}|"
                   f"{self.local_width}|{self.dset_width}|{self.influence_classes}")
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


class Simulator(ABC):
    """Steppable environment with the package-wide determinism contract.

    ``reset(seed)`` followed by a fixed action sequence must yield a
    bit-identical trajectory every time. Instances are single-owner: one
    driver at a time; parallelism comes from independent instances with
    split seeds.
    """

    descriptor: SimDescriptor

    @abstractmethod
    def reset(self, seed: int) -> Bits:
        """Start a new episode; returns the initial observation."""

    @abstractmethod
    def step(self, action: int) -> tuple[Bits, float, bool]:
        """Advance one step; returns (observation, reward, done)."""


class GlobalSimulator(Simulator):
    """Simulator that also exposes the hidden state's local projections.

    The extra accessors report quantities consistent with the current
    (pre-step) global state: the agent-region state variables, the influence
    source values that will act on the local region during the next
    transition, and the current d-set row.
    """

    @abstractmethod
    def current_local_state(self) -> Bits:
        ...

    @abstractmethod
    def current_influence(self) -> tuple[int, ...]:
        ...

    @abstractmethod
    def current_dset_row(self) -> Bits:
        ...


def replay(sim: Simulator, seed: int, actions: Sequence[int]):
    """Run an action sequence from a fresh reset; returns the trajectory.

    Convenience used by determinism and consistency tests; the trajectory is
    the list of (observation, reward, done) triples.
    """
    out = [(sim.reset(seed), 0.0, False)]
    for a in actions:
        out.append(sim.step(int(a)))
    return out
