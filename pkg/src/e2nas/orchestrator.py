"""End-to-end search loop.

Each iteration resets the evaluator weights and the environment, rolls out
one full trajectory (stochastic actions during the exploration period,
deterministic during exploitation), pushes every transition into the replay
buffer, and interleaves agent updates per environment step once the buffer
holds enough data: one update per exploration step, ten per exploitation
step. A uniform random-search baseline consumes the identical evaluation
budget for fair comparison.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import genotype as gt
from . import nn_core
from .evaluator_iface import EvaluationError, Evaluator, external_connect
from .mdp_env import RewardConfig, SearchEnv, Transition
from .mdp_env import reward as step_reward
from .replay_buffer import ReplayBuffer
from .sac_agent import AgentConfig, SacAgent, TransitionBatch
from .surrogate_bench import SurrogateSpec, build_surrogate

REPORT_HEADER = ("iter", "phase", "genotype_index", "is", "fid", "return", "best_return")
CHECKPOINT_NAME = "run.ckpt"


class ConfigMismatchError(RuntimeError):
    """Checkpoint belongs to a different configuration."""


@dataclass
class SearchConfig:
    total_iterations: int = 1000
    explore_fraction: float = 0.7
    updates_per_explore_step: int = 1
    updates_per_exploit_step: int = 10
    min_buffer_fill: int = 256
    seed: int = 0
    alpha: float = 0.01
    max_cells: int = gt.DEFAULT_MAX_CELLS
    epochs_per_eval: int = 1
    buffer_capacity: int = ReplayBuffer.DEFAULT_CAPACITY
    top_k: int = 3
    checkpoint_every: int = 200
    is_norm: float = 10.0
    fid_norm: float = 100.0
    evaluator: str = "surrogate"  # or "external:<endpoint>"
    agent: AgentConfig = field(default_factory=AgentConfig)
    surrogate: SurrogateSpec = field(default_factory=lambda: SurrogateSpec(seed=0))
    out_dir: str | None = None

    def __post_init__(self):
        if not 0.0 < self.explore_fraction < 1.0:
            raise ValueError("explore_fraction must be in (0, 1)")
        if self.min_buffer_fill < self.agent.batch_size:
            raise ValueError("min_buffer_fill must be >= agent batch_size")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")

    @property
    def explore_iterations(self) -> int:
        return int(round(self.total_iterations * self.explore_fraction))


def config_to_dict(cfg: SearchConfig) -> dict:
    d = asdict(cfg)
    d.pop("out_dir")  # output location does not change run identity
    return d


def config_hash(cfg: SearchConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(canonical.encode(), digest_size=8).hexdigest()


def make_evaluator(cfg: SearchConfig) -> Evaluator:
    if cfg.evaluator == "surrogate":
        return build_surrogate(cfg.surrogate)
    if cfg.evaluator.startswith("external:"):
        return external_connect(cfg.evaluator[len("external:") :])
    raise ValueError(f"unknown evaluator spec {cfg.evaluator!r}")


@dataclass
class IterationRecord:
    iteration: int
    phase: str
    genotype_index: int  # -1 for aborted iterations
    is_final: float
    fid_final: float
    ret: float
    best_return: float

    def __post_init__(self):
        for name in ("is_final", "fid_final", "ret", "best_return"):
            setattr(self, name, float(getattr(self, name)))


@dataclass
class TopEntry:
    genotype_index: int
    objective: float
    is_final: float
    fid_final: float

    def __post_init__(self):
        for name in ("objective", "is_final", "fid_final"):
            setattr(self, name, float(getattr(self, name)))


@dataclass
class SearchReport:
    records: list[IterationRecord]
    top_genotypes: list[TopEntry]
    evaluations: int
    reeval_evaluations: int
    update_counts: list[list[int]]
    first_update_iteration: int | None
    failures: list[tuple[int, str]]
    wall_clock_seconds: float
    config_hash: str
    seed: int
    max_cells: int
    complete: bool

    @property
    def best_return(self) -> float:
        return self.records[-1].best_return if self.records else math.nan

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(REPORT_HEADER)
            for r in self.records:
                writer.writerow(
                    [r.iteration, r.phase, r.genotype_index, repr(r.is_final),
                     repr(r.fid_final), repr(r.ret), repr(r.best_return)]
                )


def read_report_csv(path) -> list[IterationRecord]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != REPORT_HEADER:
            raise ValueError(f"unexpected report header {header!r} in {path}")
        return [
            IterationRecord(int(row[0]), row[1], int(row[2]), float(row[3]),
                            float(row[4]), float(row[5]), float(row[6]))
            for row in reader
        ]


class _RunState:
    """Everything that must survive an interrupt/resume cycle."""

    def __init__(self, cfg: SearchConfig, evaluator: Evaluator):
        self.cfg = cfg
        self.evaluator = evaluator
        self.env = SearchEnv(
            evaluator, RewardConfig(cfg.alpha), cfg.max_cells,
            cfg.epochs_per_eval, cfg.is_norm, cfg.fid_norm,
        )
        streams = np.random.SeedSequence(cfg.seed).spawn(2)
        self.agent = SacAgent(
            self.env.state_dim, self.env.action_dim, cfg.agent,
            np.random.default_rng(streams[0]),
        )
        self.sample_rng = np.random.default_rng(streams[1])
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.next_iteration = 0
        self.evaluations = 0
        self.best = math.nan
        self.records: list[IterationRecord] = []
        self.update_counts: list[list[int]] = []
        self.first_update_iteration: int | None = None
        self.failures: list[tuple[int, str]] = []
        self.elapsed = 0.0

    # -- checkpointing -------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "kind": "search_run",
            "config_hash": config_hash(self.cfg),
            "next_iteration": self.next_iteration,
            "evaluations": self.evaluations,
            "best": self.best,
            "records": [asdict(r) for r in self.records],
            "update_counts": self.update_counts,
            "first_update_iteration": self.first_update_iteration,
            "failures": self.failures,
            "elapsed": self.elapsed,
            "agent_rng": self.agent.rng.bit_generator.state,
            "sample_rng": self.sample_rng.bit_generator.state,
        }
        sections = [("run", meta, b"")]
        sections.extend(self.agent.checkpoint_sections(config_hash(self.cfg)))
        sections.append(self.buffer.to_section())
        nn_core.write_container(path, sections)

    def restore(self, path) -> None:
        sections = nn_core.read_container(path)
        by_name = {name: (meta, payload) for name, meta, payload in sections}
        meta, _ = by_name["run"]
        if meta["config_hash"] != config_hash(self.cfg):
            raise ConfigMismatchError(
                f"checkpoint config hash {meta['config_hash']} != current {config_hash(self.cfg)}"
            )
        self.next_iteration = meta["next_iteration"]
        self.evaluations = meta["evaluations"]
        self.best = meta["best"]
        self.records = [IterationRecord(**r) for r in meta["records"]]
        self.update_counts = [list(c) for c in meta["update_counts"]]
        self.first_update_iteration = meta["first_update_iteration"]
        self.failures = [tuple(f) for f in meta["failures"]]
        self.elapsed = meta["elapsed"]
        self.agent.rng.bit_generator.state = meta["agent_rng"]
        self.sample_rng.bit_generator.state = meta["sample_rng"]
        self.agent.restore_sections(sections)
        self.buffer = ReplayBuffer.from_section(*by_name["buffer"])


def _make_batch(state: _RunState) -> TransitionBatch:
    sampled = state.buffer.sample(state.cfg.agent.batch_size, state.sample_rng)
    env = state.env
    return TransitionBatch(
        states=np.stack([env.state_vector(t.state) for t in sampled]),
        actions=np.stack([t.action for t in sampled]),
        rewards=np.array([t.reward for t in sampled]),
        next_states=np.stack([env.state_vector(t.next_state) for t in sampled]),
        dones=np.array([t.done for t in sampled]),
    )


def _reevaluate_top(state: _RunState) -> list[TopEntry]:
    """Re-run the top-k distinct genotypes once to record their final scores."""
    cfg = state.cfg
    completed = [(r.ret, r.genotype_index) for r in state.records if r.genotype_index >= 0]
    completed.sort(key=lambda p: -p[0])
    entries: list[TopEntry] = []
    seen = set()
    for ret, gi in completed:
        if gi in seen:
            continue
        seen.add(gi)
        g = gt.genotype_from_index(gi, cfg.max_cells, cfg.max_cells)
        try:
            state.evaluator.reset_weights()
            result = None
            for depth in range(1, len(g.cells) + 1):
                prefix = gt.Genotype(g.cells[:depth], cfg.max_cells)
                result = state.evaluator.evaluate(prefix, cfg.epochs_per_eval)
                state.evaluations += 1
        except EvaluationError:
            continue
        objective = result.is_score - cfg.alpha * result.fid_score
        entries.append(TopEntry(gi, objective, result.is_score, result.fid_score))
        if len(entries) >= cfg.top_k:
            break
    return entries


def _finalize(state: _RunState, complete: bool, reeval: bool = True) -> SearchReport:
    evals_before = state.evaluations
    top = _reevaluate_top(state) if (complete and reeval) else []
    return SearchReport(
        records=list(state.records),
        top_genotypes=top,
        evaluations=evals_before,
        reeval_evaluations=state.evaluations - evals_before,
        update_counts=[list(c) for c in state.update_counts],
        first_update_iteration=state.first_update_iteration,
        failures=list(state.failures),
        wall_clock_seconds=state.elapsed,
        config_hash=config_hash(state.cfg),
        seed=state.cfg.seed,
        max_cells=state.cfg.max_cells,
        complete=complete,
    )


def _run_loop(state: _RunState, stop_after: int | None) -> SearchReport:
    cfg = state.cfg
    env = state.env
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    explore_iters = cfg.explore_iterations
    end = cfg.total_iterations if stop_after is None else min(stop_after, cfg.total_iterations)

    while state.next_iteration < end:
        it = state.next_iteration
        explore = it < explore_iters
        phase = "explore" if explore else "exploit"
        updates_per_step = (
            cfg.updates_per_explore_step if explore else cfg.updates_per_exploit_step
        )
        if explore:
            state.agent.policy_lr_scale = 1.0
        else:
            # decay the policy step size over the first half of exploitation
            # so the locked-in architecture stays stable while the critics
            # keep tracking
            progress = (it - explore_iters) / max(cfg.total_iterations - explore_iters, 1)
            state.agent.policy_lr_scale = max(0.02, 1.0 - 2.0 * progress)
        state.evaluator.reset_weights()
        s = env.reset()
        step_updates: list[int] = []
        transitions: list[Transition] = []
        aborted: str | None = None
        for _ in range(cfg.max_cells):
            action, _ = state.agent.sample_action(
                env.state_vector(s), deterministic=not explore
            )
            try:
                s2, r, done = env.step(action)
            except EvaluationError as exc:
                aborted = str(exc)
                break
            state.evaluations += 1
            tr = Transition(s, action, r, s2, done)
            state.buffer.push(tr)
            transitions.append(tr)
            n_updates = 0
            if len(state.buffer) >= cfg.min_buffer_fill:
                n_updates = updates_per_step
                if state.first_update_iteration is None:
                    state.first_update_iteration = it
                for _ in range(n_updates):
                    state.agent.update(_make_batch(state))
            step_updates.append(n_updates)
            s = s2

        if aborted is None:
            ret = float(sum(t.reward for t in transitions))
            gi = gt.genotype_index(env.genotype)
            final = transitions[-1].next_state
            if math.isnan(state.best) or ret > state.best:
                state.best = ret
            state.records.append(
                IterationRecord(it, phase, gi, final.is_score, final.fid_score, ret, state.best)
            )
        else:
            state.failures.append((it, aborted))
            state.records.append(
                IterationRecord(it, phase, -1, math.nan, math.nan, math.nan, state.best)
            )
        state.update_counts.append(step_updates)
        state.next_iteration = it + 1
        if out_dir and cfg.checkpoint_every and state.next_iteration % cfg.checkpoint_every == 0:
            state.elapsed += time.monotonic() - start
            start = time.monotonic()
            state.save(out_dir / CHECKPOINT_NAME)

    state.elapsed += time.monotonic() - start
    complete = state.next_iteration >= cfg.total_iterations
    if out_dir:
        state.save(out_dir / CHECKPOINT_NAME)
    report = _finalize(state, complete)
    if out_dir:
        write_run_outputs(cfg, report, out_dir, agent=state.agent, buffer=state.buffer)
    return report


def run_search(
    cfg: SearchConfig, evaluator: Evaluator | None = None, stop_after: int | None = None
) -> SearchReport:
    """Execute the full search; `stop_after` ends early with a checkpointed partial run."""
    state = _RunState(cfg, evaluator if evaluator is not None else make_evaluator(cfg))
    return _run_loop(state, stop_after)


def resume(cfg: SearchConfig, evaluator: Evaluator | None = None) -> SearchReport:
    """Continue a checkpointed run from cfg.out_dir; a finished run re-emits its report."""
    if not cfg.out_dir:
        raise ValueError("resume requires cfg.out_dir")
    ckpt = Path(cfg.out_dir) / CHECKPOINT_NAME
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    state = _RunState(cfg, evaluator if evaluator is not None else make_evaluator(cfg))
    state.restore(ckpt)
    return _run_loop(state, None)


def run_random_baseline(cfg: SearchConfig, evaluator: Evaluator | None = None) -> SearchReport:
    """Uniform random search under the same budget accounting (one evaluate per step)."""
    state = _RunState(cfg, evaluator if evaluator is not None else make_evaluator(cfg))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA5E]))
    start = time.monotonic()
    n_space = gt.space_size(cfg.max_cells)
    reward_cfg = RewardConfig(cfg.alpha)
    for it in range(cfg.total_iterations):
        gi = int(rng.integers(0, n_space))
        g = gt.genotype_from_index(gi, cfg.max_cells, cfg.max_cells)
        aborted: str | None = None
        prev_is, prev_fid, ret, final = 0.0, 0.0, 0.0, None
        state.evaluator.reset_weights()
        try:
            for depth in range(1, cfg.max_cells + 1):
                prefix = gt.Genotype(g.cells[:depth], cfg.max_cells)
                final = state.evaluator.evaluate(prefix, cfg.epochs_per_eval)
                state.evaluations += 1
                ret += step_reward(prev_is, prev_fid, final.is_score, final.fid_score, reward_cfg)
                prev_is, prev_fid = final.is_score, final.fid_score
        except EvaluationError as exc:
            aborted = str(exc)
        if aborted is None:
            if math.isnan(state.best) or ret > state.best:
                state.best = ret
            state.records.append(
                IterationRecord(it, "baseline", gi, final.is_score, final.fid_score,
                                ret, state.best)
            )
        else:
            state.failures.append((it, aborted))
            state.records.append(
                IterationRecord(it, "baseline", -1, math.nan, math.nan, math.nan, state.best)
            )
        state.update_counts.append([])
        state.next_iteration = it + 1
    state.elapsed = time.monotonic() - start
    report = _finalize(state, complete=True)
    if cfg.out_dir:
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_run_outputs(cfg, report, out_dir)
    return report


def write_run_outputs(
    cfg: SearchConfig, report: SearchReport, out_dir, agent: SacAgent | None = None,
    buffer: ReplayBuffer | None = None,
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "report.csv")
    with open(out_dir / "topk.txt", "w") as f:
        for rank, entry in enumerate(report.top_genotypes, 1):
            g = gt.genotype_from_index(entry.genotype_index, report.max_cells, report.max_cells)
            f.write(
                f"top {rank}: objective={entry.objective!r} is={entry.is_final!r} "
                f"fid={entry.fid_final!r} index={entry.genotype_index}\n"
            )
            f.write(gt.serialize(g) + "\n\n")
    snapshot = {"config": config_to_dict(cfg), "hash": report.config_hash}
    with open(out_dir / "config.snapshot", "w") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True)
        f.write("\n")
    if agent is not None:
        agent.save(out_dir / "agent.ckpt", report.config_hash)
    if buffer is not None:
        buffer.save(out_dir / "buffer.ckpt")
