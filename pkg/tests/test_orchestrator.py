"""Search-loop tests: schedule, determinism, persistence, baseline parity."""

import copy
import dataclasses
import math

import numpy as np
import pytest

from e2nas import genotype as gt
from e2nas.evaluator_iface import EvaluationError
from e2nas.orchestrator import (
    ConfigMismatchError,
    SearchConfig,
    config_hash,
    make_evaluator,
    read_report_csv,
    resume,
    run_random_baseline,
    run_search,
)
from e2nas.sac_agent import AgentConfig
from e2nas.surrogate_bench import SurrogateSpec, build_surrogate


def small_config(**kw):
    agent = kw.pop("agent", AgentConfig(hidden_dims=(16, 16), batch_size=16))
    defaults = dict(
        total_iterations=60,
        min_buffer_fill=32,
        seed=0,
        surrogate=SurrogateSpec(seed=0, psr_dim=8),
        checkpoint_every=0,
        agent=agent,
    )
    defaults.update(kw)
    return SearchConfig(**defaults)


class FlakyEvaluator:
    """Fails on a fixed set of call indices."""

    def __init__(self, inner, fail_calls):
        self.inner = inner
        self.fail_calls = set(fail_calls)
        self.calls = 0

    def evaluate(self, prefix, epochs=1):
        self.calls += 1
        if self.calls in self.fail_calls:
            raise EvaluationError("synthetic outage", genotype=prefix)
        return self.inner.evaluate(prefix, epochs)

    def reset_weights(self):
        self.inner.reset_weights()

    def descriptor(self):
        return self.inner.descriptor()


def test_phase_boundary_at_70_percent():
    cfg = small_config(total_iterations=60)
    report = run_search(cfg)
    phases = [r.phase for r in report.records]
    assert phases[:42] == ["explore"] * 42
    assert phases[42:] == ["exploit"] * 18


def test_explore_iterations_rounding():
    assert small_config(total_iterations=60).explore_iterations == 42
    assert SearchConfig(total_iterations=1000).explore_iterations == 700
    assert small_config(total_iterations=10).explore_iterations == 7


def test_first_update_iteration_matches_fill_arithmetic():
    # 3 transitions per iteration; fill 256 is first reached during the
    # 86th iteration (index 85), at its first step (still exploration here)
    cfg = small_config(total_iterations=130, min_buffer_fill=256)
    report = run_search(cfg)
    assert report.first_update_iteration == 85
    assert report.update_counts[84] == [0, 0, 0]
    assert report.update_counts[85] == [1, 1, 1]


def test_update_counts_per_phase():
    cfg = small_config(total_iterations=60)
    report = run_search(cfg)
    fill_iter = report.first_update_iteration
    for it, counts in enumerate(report.update_counts):
        expected = 1 if it < 42 else 10
        for step, n in enumerate(counts):
            if it > fill_iter or (it == fill_iter and n > 0):
                assert n in (0, expected)
    # all steps after the fill iteration must update at the phase rate
    assert all(n == 1 for c in report.update_counts[fill_iter + 1 : 42] for n in c)
    assert all(n == 10 for c in report.update_counts[43:] for n in c)


def test_same_seed_bit_identical_reports():
    cfg = small_config()
    rep1 = run_search(cfg)
    rep2 = run_search(small_config())
    assert rep1.records == rep2.records
    assert rep1.update_counts == rep2.update_counts
    assert [dataclasses.astuple(t) for t in rep1.top_genotypes] == [
        dataclasses.astuple(t) for t in rep2.top_genotypes
    ]


def test_different_seeds_differ():
    rep1 = run_search(small_config(seed=0))
    rep2 = run_search(small_config(seed=1))
    assert rep1.records != rep2.records


def test_best_return_non_decreasing_and_evaluation_budget():
    cfg = small_config()
    report = run_search(cfg)
    bests = [r.best_return for r in report.records]
    assert all(b2 >= b1 for b1, b2 in zip(bests, bests[1:]))
    assert report.evaluations == cfg.total_iterations * cfg.max_cells
    rets = [r.ret for r in report.records]
    assert report.best_return == max(rets)


def test_every_transition_pushed_once():
    cfg = small_config(total_iterations=20, min_buffer_fill=10_000)  # no updates
    evaluator = build_surrogate(cfg.surrogate)
    counted = FlakyEvaluator(evaluator, fail_calls=())
    report = run_search(cfg, evaluator=counted)
    assert report.evaluations == 60
    # loop calls plus the final top-k re-evaluation passes
    assert counted.calls == 60 + report.reeval_evaluations
    assert report.reeval_evaluations <= cfg.top_k * cfg.max_cells


def test_aborted_iterations_consume_slots():
    cfg = small_config(total_iterations=20, min_buffer_fill=10_000)
    evaluator = FlakyEvaluator(build_surrogate(cfg.surrogate), fail_calls={5, 20})
    report = run_search(cfg, evaluator=evaluator)
    assert len(report.records) == 20
    failed = [r for r in report.records if r.genotype_index < 0]
    assert len(failed) == 2
    assert all(math.isnan(r.ret) for r in failed)
    assert len(report.failures) == 2
    # failed steps consumed no evaluation budget beyond the successful calls
    # call 5 aborts its iteration after one step (2 steps lost); call 20
    # is a third step, so only that step is lost
    assert report.evaluations == 20 * 3 - 2 - 1


def test_top_genotypes_match_direct_evaluation():
    cfg = small_config()
    report = run_search(cfg)
    assert 1 <= len(report.top_genotypes) <= cfg.top_k
    evaluator = build_surrogate(cfg.surrogate)
    bests = sorted(
        {r.genotype_index: r.ret for r in report.records if r.genotype_index >= 0}.items(),
        key=lambda kv: -kv[1],
    )
    expected_indices = [gi for gi, _ in bests[: len(report.top_genotypes)]]
    assert [t.genotype_index for t in report.top_genotypes] == expected_indices
    for entry in report.top_genotypes:
        g = gt.genotype_from_index(entry.genotype_index, 3)
        res = evaluator.evaluate(g)
        assert entry.objective == pytest.approx(
            res.is_score - cfg.alpha * res.fid_score, abs=1e-9
        )


def test_run_outputs_written(tmp_path):
    out = tmp_path / "run"
    cfg = small_config(total_iterations=30, out_dir=str(out), checkpoint_every=10)
    report = run_search(cfg)
    assert (out / "report.csv").exists()
    records = read_report_csv(out / "report.csv")
    assert len(records) == 30
    assert records == report.records
    topk_text = (out / "topk.txt").read_text()
    assert "cell 0:" in topk_text and "objective=" in topk_text
    assert (out / "agent.ckpt").exists()
    assert (out / "buffer.ckpt").exists()
    snapshot = (out / "config.snapshot").read_text()
    assert config_hash(cfg) in snapshot


def test_report_csv_header_contract(tmp_path):
    cfg = small_config(total_iterations=5, min_buffer_fill=10_000, out_dir=str(tmp_path))
    run_search(cfg)
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert header == "iter,phase,genotype_index,is,fid,return,best_return"
    with pytest.raises(ValueError):
        bad = tmp_path / "bad.csv"
        bad.write_text("iter,phase\n")
        read_report_csv(bad)


def test_config_hash_ignores_out_dir_and_key_order():
    a = small_config(out_dir="/tmp/a")
    b = small_config(out_dir="/tmp/b")
    assert config_hash(a) == config_hash(b)
    c = small_config(alpha=0.02)
    assert config_hash(a) != config_hash(c)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    full_cfg = small_config(total_iterations=60)
    full = run_search(full_cfg)

    out = tmp_path / "resumable"
    part_cfg = small_config(total_iterations=60, out_dir=str(out), checkpoint_every=25)
    partial = run_search(part_cfg, stop_after=30)
    assert not partial.complete
    assert len(partial.records) == 30

    resumed = resume(small_config(total_iterations=60, out_dir=str(out), checkpoint_every=25))
    assert resumed.complete
    assert resumed.records == full.records


def test_resume_with_altered_config_refused(tmp_path):
    out = tmp_path / "run"
    cfg = small_config(total_iterations=40, out_dir=str(out))
    run_search(cfg, stop_after=20)
    altered = small_config(total_iterations=40, out_dir=str(out), alpha=0.5)
    with pytest.raises(ConfigMismatchError):
        resume(altered)


def test_resume_from_finished_run_reemits_report(tmp_path):
    out = tmp_path / "run"
    cfg = small_config(total_iterations=25, out_dir=str(out))
    first = run_search(cfg)
    (out / "report.csv").unlink()
    again = resume(small_config(total_iterations=25, out_dir=str(out)))
    assert again.records == first.records
    assert (out / "report.csv").exists()


def test_resume_requires_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        resume(small_config(out_dir=str(tmp_path / "missing")))


def test_baseline_same_seed_same_sequence():
    cfg = small_config(total_iterations=40)
    rep1 = run_random_baseline(cfg)
    rep2 = run_random_baseline(small_config(total_iterations=40))
    assert [r.genotype_index for r in rep1.records] == [
        r.genotype_index for r in rep2.records
    ]


def test_baseline_budget_matches_search():
    cfg = small_config(total_iterations=40)
    base = run_random_baseline(cfg)
    search = run_search(cfg)
    assert base.evaluations == search.evaluations == 40 * 3
    assert base.records[0].phase == "baseline"
    assert all(len(c) == 0 for c in base.update_counts)


def test_baseline_returns_telescope():
    cfg = small_config(total_iterations=30)
    base = run_random_baseline(cfg)
    for r in base.records:
        assert r.ret == pytest.approx(r.is_final - cfg.alpha * r.fid_final, abs=1e-9)


def test_baseline_per_variable_marginals_near_uniform():
    cfg = small_config(total_iterations=2000, min_buffer_fill=10**9)
    base = run_random_baseline(
        dataclasses.replace(cfg, total_iterations=2000)
    )
    genos = [gt.genotype_from_index(r.genotype_index, 3) for r in base.records]
    n = len(genos)
    for cell in range(3):
        conv_freq = sum(g.cells[cell].conv == "pre" for g in genos) / n
        assert abs(conv_freq - 0.5) <= 0.05
        for norm in gt.NORM_CHOICES:
            freq = sum(g.cells[cell].norm == norm for g in genos) / n
            assert abs(freq - 1 / 3) <= 0.05


def test_make_evaluator_specs():
    cfg = small_config()
    ev = make_evaluator(cfg)
    assert ev.descriptor() == ("surrogate", 8)
    bad = small_config()
    bad.evaluator = "warp-drive"
    with pytest.raises(ValueError):
        make_evaluator(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(explore_fraction=0.0)
    with pytest.raises(ValueError):
        small_config(min_buffer_fill=4)  # below batch size
    with pytest.raises(ValueError):
        small_config(total_iterations=0)
