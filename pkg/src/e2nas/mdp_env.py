"""MDP over generator-cell trajectories.

A state is (depth, current scores, progressive state representation); the
initial state is all zeros. A step decodes the agent's action into the gene
for the next cell, evaluates the extended prefix, and pays the performance
improvement as reward:

    r = (is - prev_is) + alpha * (prev_fid - fid)

With the zero initial baseline the per-step rewards of a complete episode
telescope to is_final - alpha * fid_final.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import genotype as gt
from .evaluator_iface import EvaluationError, Evaluator, EvaluatorError


class EpisodeDoneError(RuntimeError):
    """step() was called on a finished episode."""


@dataclass(frozen=True, eq=False)
class SearchState:
    depth: int
    is_score: float
    fid_score: float
    psr: np.ndarray

    def __post_init__(self):
        psr = np.asarray(self.psr, dtype=np.float64)
        psr.setflags(write=False)
        object.__setattr__(self, "psr", psr)
        object.__setattr__(self, "is_score", float(self.is_score))
        object.__setattr__(self, "fid_score", float(self.fid_score))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SearchState):
            return NotImplemented
        return (
            self.depth == other.depth
            and self.is_score == other.is_score
            and self.fid_score == other.fid_score
            and np.array_equal(self.psr, other.psr)
        )


@dataclass(frozen=True)
class Transition:
    state: SearchState
    action: np.ndarray
    reward: float
    next_state: SearchState
    done: bool

    def __post_init__(self):
        action = np.asarray(self.action, dtype=np.float64)
        action.setflags(write=False)
        object.__setattr__(self, "action", action)


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.01  # FID weight; alpha=0 is the IS-only ablation

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")


def reward(prev_is: float, prev_fid: float, is_score: float, fid_score: float,
           cfg: RewardConfig) -> float:
    """Performance improvement of the extended architecture over the previous one."""
    values = (prev_is, prev_fid, is_score, fid_score)
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"reward inputs must be finite, got {values}")
    return (is_score - prev_is) + cfg.alpha * (prev_fid - fid_score)


class SearchEnv:
    """Single-threaded environment owning its evaluator.

    States are immutable values; step() never mutates anything it returned
    earlier. Evaluation failures abort the episode (no penalty substitution).
    """

    def __init__(
        self,
        evaluator: Evaluator,
        reward_cfg: RewardConfig,
        max_cells: int = gt.DEFAULT_MAX_CELLS,
        epochs_per_step: int = 1,
        is_norm: float = 10.0,
        fid_norm: float = 100.0,
    ):
        self.evaluator = evaluator
        self.reward_cfg = reward_cfg
        self.max_cells = max_cells
        self.epochs_per_step = epochs_per_step
        self.is_norm = is_norm
        self.fid_norm = fid_norm
        _, self.psr_dim = evaluator.descriptor()
        self._cells: tuple[gt.CellGene, ...] = ()
        self._state = self._initial_state()

    def _initial_state(self) -> SearchState:
        return SearchState(0, 0.0, 0.0, np.zeros(self.psr_dim))

    @property
    def state_dim(self) -> int:
        return 3 + self.psr_dim

    @property
    def action_dim(self) -> int:
        return gt.action_dim(self.max_cells)

    @property
    def genotype(self) -> gt.Genotype:
        return gt.Genotype(self._cells, self.max_cells)

    @property
    def state(self) -> SearchState:
        return self._state

    def state_vector(self, s: SearchState) -> np.ndarray:
        """Normalized network input: [depth, is, fid] scaled to ~unit range, then psr."""
        head = np.array(
            [s.depth / self.max_cells, s.is_score / self.is_norm, s.fid_score / self.fid_norm]
        )
        return np.concatenate([head, s.psr])

    def reset(self) -> SearchState:
        self._cells = ()
        self._state = self._initial_state()
        return self._state

    def step(self, action: np.ndarray) -> tuple[SearchState, float, bool]:
        depth = self._state.depth
        if depth >= self.max_cells:
            raise EpisodeDoneError("episode is complete; call reset() first")
        gene = gt.decode_action(action, depth, self.max_cells)
        prefix = gt.Genotype(self._cells + (gene,), self.max_cells)
        try:
            result = self.evaluator.evaluate(prefix, self.epochs_per_step)
        except EvaluatorError as exc:
            raise EvaluationError(str(exc), genotype=prefix) from exc
        next_state = SearchState(depth + 1, result.is_score, result.fid_score, result.psr)
        r = reward(
            self._state.is_score, self._state.fid_score,
            result.is_score, result.fid_score, self.reward_cfg,
        )
        self._cells = prefix.cells
        self._state = next_state
        return next_state, r, next_state.depth == self.max_cells


def cumulative_return(trajectory: list[Transition]) -> float:
    """Sum of rewards over a complete episode; validates contiguity."""
    if not trajectory:
        raise ValueError("empty trajectory")
    first = trajectory[0].state
    if first.depth != 0 or first.is_score != 0.0 or first.fid_score != 0.0:
        raise ValueError("trajectory does not start at the initial state")
    for i, t in enumerate(trajectory):
        if t.state.depth != i or t.next_state.depth != i + 1:
            raise ValueError(f"transition {i} has inconsistent depths")
        if i + 1 < len(trajectory):
            if t.done:
                raise ValueError(f"transition {i} is terminal but not last")
            if t.next_state != trajectory[i + 1].state:
                raise ValueError(f"transition {i} does not chain to transition {i + 1}")
    if not trajectory[-1].done:
        raise ValueError("trajectory is incomplete (last transition not terminal)")
    return float(sum(t.reward for t in trajectory))
