"""Fixed-capacity ring buffer of transitions with uniform sampling."""

from __future__ import annotations

import numpy as np

from . import nn_core
from .mdp_env import SearchState, Transition


class InsufficientDataError(ValueError):
    pass


class ReplayBuffer:
    """Single-writer ring store; sampling is uniform with replacement."""

    DEFAULT_CAPACITY = 100_000

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._cursor = 0  # next slot to overwrite once full

    def __len__(self) -> int:
        return len(self._items)

    def push(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._cursor] = t
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        if n < 1:
            raise ValueError(f"sample size must be >= 1, got {n}")
        if len(self._items) < n:
            raise InsufficientDataError(
                f"buffer holds {len(self._items)} transitions, need {n}"
            )
        idx = rng.integers(0, len(self._items), size=n)
        return [self._items[i] for i in idx]

    def items(self) -> tuple[Transition, ...]:
        return tuple(self._items)

    # -- persistence ---------------------------------------------------------

    def to_section(self, name: str = "buffer") -> tuple[str, dict, bytes]:
        """Encode contents, cursor, and size as one container section."""
        n = len(self._items)
        psr_dim = self._items[0].state.psr.size if n else 0
        action_dim = self._items[0].action.size if n else 0

        def states_payload(states: list[SearchState]) -> np.ndarray:
            head = np.array([[s.depth, s.is_score, s.fid_score] for s in states])
            psr = np.stack([s.psr for s in states])
            return np.concatenate([head, psr], axis=1)

        cols = []
        if n:
            cols = [
                states_payload([t.state for t in self._items]),
                np.stack([t.action for t in self._items]),
                np.array([[t.reward] for t in self._items]),
                states_payload([t.next_state for t in self._items]),
                np.array([[float(t.done)] for t in self._items]),
            ]
        payload = np.concatenate(cols, axis=1).astype("<f8").tobytes() if n else b""
        meta = {
            "kind": "replay_buffer",
            "capacity": self.capacity,
            "cursor": self._cursor,
            "size": n,
            "psr_dim": psr_dim,
            "action_dim": action_dim,
        }
        return name, meta, payload

    def save(self, path) -> None:
        nn_core.write_container(path, [self.to_section()])

    @classmethod
    def from_section(cls, meta: dict, payload: bytes) -> "ReplayBuffer":
        if meta.get("kind") != "replay_buffer":
            raise nn_core.CheckpointError(f"unexpected section kind: {meta.get('kind')}")
        buf = cls(meta["capacity"])
        n, psr_dim, action_dim = meta["size"], meta["psr_dim"], meta["action_dim"]
        width = 2 * (3 + psr_dim) + action_dim + 2
        data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        if data.size != n * width:
            raise nn_core.CheckpointError(
                f"buffer payload has {data.size} values, expected {n * width}"
            )
        data = data.reshape(n, width) if n else data.reshape(0, width)

        def read_state(row: np.ndarray, offset: int) -> SearchState:
            return SearchState(
                int(row[offset]), row[offset + 1], row[offset + 2],
                row[offset + 3 : offset + 3 + psr_dim],
            )

        state_w = 3 + psr_dim
        for row in data:
            s = read_state(row, 0)
            a = row[state_w : state_w + action_dim]
            r = row[state_w + action_dim]
            s2 = read_state(row, state_w + action_dim + 1)
            done = bool(row[-1])
            buf._items.append(Transition(s, a, float(r), s2, done))
        buf._cursor = int(meta["cursor"])
        return buf

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        sections = nn_core.read_container(path)
        by_name = {name: (meta, payload) for name, meta, payload in sections}
        if "buffer" not in by_name:
            raise nn_core.CheckpointError("no buffer section in container")
        return cls.from_section(*by_name["buffer"])
