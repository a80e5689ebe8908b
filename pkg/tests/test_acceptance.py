"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Every test gathers its measurements first, prints a single summary line,
then asserts. Run ``pytest tests/test_acceptance.py -v`` to see the lines.
"""

import io
import math
from pathlib import Path

import numpy as np
import pytest

from splitfrozen import rng
from splitfrozen.datapart import PartitionSpec, partition
from splitfrozen.harness import load_config, run_experiment
from splitfrozen.harness.cli import main
from splitfrozen.harness.runner import simulate_all
from splitfrozen.harness.toyruns import centralized_train, make_toy_dataset
from splitfrozen.lora import TrainConfig
from splitfrozen.numerics import ToyConfig, ToyModel, backward_B, cross_entropy, forward_prefix, head_forward
from splitfrozen.protocol import run_splitfrozen
from splitfrozen.scheduler import (SERVER, allocate_layers, simulate_baseline, simulate_splitfrozen,
                                   validate_schedule)

from conftest import fuzz_cases
from oracles import (b_then_w_matches_fused, finite_difference_grads, plain_frozen_prefix_training,
                     random_toy_config, randomize_trainables, toy_batch)

# Rounding slack when comparing two schedules of identical work.
SAME_WORK_RTOL = 1e-12


@pytest.fixture
def verdict(capsys):
    def report(criterion: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        assert ok, f"criterion {criterion}: {detail}"
    return report


@pytest.fixture(scope="module")
def preset_sims():
    cfg = load_config("paper.gpt2")
    return cfg, simulate_all(cfg, ["splitfrozen", "cenlora", "fedlora", "splitlora"])


def test_criterion_01_device_compute_reduction(preset_sims, verdict):
    _, sims = preset_sims
    fed = sims["fedlora"].device_flops_per_sample
    sf = sims["splitfrozen"].device_flops_per_sample / fed
    sl = sims["splitlora"].device_flops_per_sample / fed
    ok = 0.05 <= sf <= 0.12 and abs(sl - 0.25) <= 0.02 and 1 - sf >= 0.85
    verdict("1", ok, f"splitfrozen/fedlora = {sf:.4f} (want [0.05, 0.12]), splitlora/fedlora = {sl:.4f} "
                     f"(want 0.25 +- 0.02), reduction = {1 - sf:.2%} (want >= 85%)")


def test_criterion_02_total_time_reduction(preset_sims, verdict):
    _, sims = preset_sims
    best = min(sims[b].total_time for b in ("fedlora", "splitlora"))
    ratio = sims["splitfrozen"].total_time / best
    strict_fail = equal_fail = 0
    for cluster, depths, mb in fuzz_cases():
        piped = simulate_splitfrozen(cluster, depths, mb).makespan
        seq = simulate_splitfrozen(cluster, depths, mb, mode="sequential").makespan
        if mb == 1:
            equal_fail += not math.isclose(piped, seq, rel_tol=SAME_WORK_RTOL)
        else:
            strict_fail += not piped < seq
    ok = ratio <= 0.55 and strict_fail == 0 and equal_fail == 0
    verdict("2", ok, f"splitfrozen / best baseline makespan = {ratio:.4f} (want <= 0.55); fuzz 1000: "
                     f"{strict_fail} pipelined >= sequential at >1 microbatch, {equal_fail} unequal at 1")


def test_criterion_03_non_iid_resilience(verdict):
    cfg = ToyConfig(depth=6, width=16, num_classes=3, seq_len=4, seed=7)
    tc = TrainConfig(learning_rate=0.01)
    x, y = make_toy_dataset(cfg, 360, seed=0)
    depths = [1, 3] * 5
    worst_loss = worst_adapter = 0.0
    mismatched_lengths = 0
    for seed in range(20):
        shards = partition(y, PartitionSpec(10, "dirichlet", alpha=0.1, seed=seed))
        run = run_splitfrozen(cfg, x, y, shards, depths, tc, rounds=3, lora_rank=2, lora_seed=seed,
                              pooled_batch_size=12, device_batch_size=8, shuffle_seed=seed)
        want_losses, want_model = plain_frozen_prefix_training(
            cfg, x, y, tc, start_layer=3, rounds=3, lora_rank=2, lora_seed=seed, batch_size=12,
            shuffle_seed=seed)
        central = centralized_train(cfg, x, y, tc, rounds=3, start_layer=3, lora_rank=2, lora_seed=seed,
                                    pooled_batch_size=12, shuffle_seed=seed)
        for losses, model in ((want_losses, want_model), (central.step_losses, central.model)):
            if len(losses) != len(run.step_losses):
                mismatched_lengths += 1
                continue
            a, b = np.asarray(run.step_losses), np.asarray(losses)
            worst_loss = max(worst_loss, float(np.max(np.abs(a - b) / np.abs(b))))
            got, want = run.model.trainable_params(), model.trainable_params()
            worst_adapter = max(worst_adapter, max(float(np.max(np.abs(got[k] - want[k]))) for k in want))
    ok = mismatched_lengths == 0 and worst_loss <= 1e-9 and worst_adapter <= 1e-9
    verdict("3", ok, f"20 Dirichlet(0.1) partitions x 10 devices at depths {{1,3}}: max loss rel err "
                     f"{worst_loss:.2e}, max adapter err {worst_adapter:.2e} (want <= 1e-9)")


def test_criterion_04_bw_decomposition(verdict):
    mismatches = sum(not b_then_w_matches_fused(random_toy_config(seed), seed) for seed in range(100))
    worse = 0
    for cluster, depths, mb in fuzz_cases():
        zb = simulate_splitfrozen(cluster, depths, mb)
        fused = simulate_splitfrozen(cluster, depths, mb, mode="fused")
        slack = SAME_WORK_RTOL * max(zb.makespan, fused.makespan)
        worse += zb.bubble_time.get(SERVER, 0.0) > fused.bubble_time.get(SERVER, 0.0) + slack
    ok = mismatches == 0 and worse == 0
    verdict("4", ok, f"B-then-W vs fused SGD: {mismatches}/100 configs differ (want 0 bit differences); "
                     f"split-W bubble > fused bubble on {worse}/1000 fuzzed schedules")


def test_criterion_05_gradient_correctness(verdict):
    worst = 0.0
    checked = 0
    for seed in range(10):
        for attention in (False, True):
            cfg = ToyConfig(depth=3, width=8, seq_len=3, attention=attention, seed=seed)
            m = ToyModel(cfg)
            m.attach_adapters(range(3), 2, seed)
            randomize_trainables(m, seed + 100)
            x, y = toy_batch(cfg, 4, seed + 200)
            fd = finite_difference_grads(m, x, y, eps=1e-5)
            _, dl = cross_entropy(head_forward(m, forward_prefix(m, x, 0, 3, cache=True), cache=True), y)
            grads = backward_B(m, dl, 0, 3)[1].gradients()
            for k, g in grads.items():
                worst = max(worst, float(np.linalg.norm(g - fd[k]) / np.linalg.norm(fd[k])))
                checked += g.size
    verdict("5", worst < 1e-4, f"{checked} adapter+head parameters over 10 seeds x 2 layer variants: "
                               f"max relative error {worst:.2e} (want < 1e-4)")


def test_criterion_06_split_soundness_and_frozen_contract(verdict):
    cut_failures = 0
    for attention in (False, True):
        cfg = ToyConfig(depth=8, width=16, attention=attention, seed=3)
        m = ToyModel(cfg)
        m.attach_adapters(range(8), 2, 0)
        randomize_trainables(m, 1)
        x = rng.normals(2, (16, 16))
        whole = forward_prefix(m, x, 0, 8)
        cut_failures += sum(not np.array_equal(forward_prefix(m, forward_prefix(m, x, 0, k), k, 8), whole)
                            for k in range(9))
    cfg = ToyConfig(depth=4, width=8, num_classes=3, seq_len=2, seed=5)
    x, y = make_toy_dataset(cfg, 24, seed=1)
    shards = partition(y, PartitionSpec(3, "dirichlet", alpha=0.1, seed=0))
    run = run_splitfrozen(cfg, x, y, shards, [1, 3, 2], TrainConfig(learning_rate=0.01), rounds=100,
                          lora_rank=2, pooled_batch_size=8, device_batch_size=4)
    frozen = run.device_digest_before == run.device_digest_after == ToyModel(cfg).base_digest()
    ok = cut_failures == 0 and frozen and len(run.round_losses) == 100
    verdict("6", ok, f"{cut_failures} of 18 cuts differ from the whole forward; device base weights "
                     f"{'bit-identical' if frozen else 'CHANGED'} after {len(run.round_losses)} rounds")


def test_criterion_07_allocation(preset_sims, verdict):
    cfg, _ = preset_sims
    depths = allocate_layers(cfg.cluster_spec())
    ok = depths == [1, 1, 1, 3, 3, 3, 3, 3, 3, 3]
    verdict("7", ok, f"preset fleet (3 x 10%, 7 x 20%) with bounds [1, 3] -> {depths}")


def test_criterion_08_partitioner_statistics(verdict):
    labels = np.arange(600) % 3

    def shares(alpha, seed):
        out = []
        for s in partition(labels, PartitionSpec(10, "dirichlet", alpha=alpha, seed=seed)):
            h = np.asarray(s.class_histogram, dtype=float)
            out.append(h / h.sum())
        return out
    big = max(float(np.abs(p - 1 / 3).max()) for seed in range(20) for p in shares(10_000, seed))
    median = float(np.median([np.median([p.max() for p in shares(0.1, seed)]) for seed in range(20)]))
    skew = [float(np.mean([p.max() for seed in range(20) for p in shares(a, seed)]))
            for a in (0.1, 1, 10, 10_000)]
    monotone = all(a >= b for a, b in zip(skew, skew[1:]))
    ok = big < 0.05 and median >= 0.8 and monotone
    verdict("8", ok, f"alpha=1e4 max deviation {big:.4f} (want < 0.05); alpha=0.1 median top-class share "
                     f"{median:.3f} (want >= 0.8); mean top share over alpha 0.1/1/10/1e4 = "
                     f"{', '.join(f'{v:.3f}' for v in skew)} ({'monotone' if monotone else 'NOT monotone'})")


def test_criterion_09_schedule_validity(preset_sims, verdict):
    _, sims = preset_sims
    checked = violations = 0
    for r in sims.values():
        checked += 1
        violations += len(validate_schedule(r.schedule))
    for k, (cluster, depths, mb) in enumerate(fuzz_cases()):
        schedules = [simulate_splitfrozen(cluster, depths, mb, mode=m) for m in ("pipelined", "fused", "sequential")]
        if k % 4 == 0:
            schedules += [simulate_baseline(cluster, s, mb).schedule for s in ("cenlora", "fedlora", "splitlora")]
        for s in schedules:
            checked += 1
            violations += len(validate_schedule(s))
    verdict("9", violations == 0, f"{violations} violations across {checked} schedules "
                                  f"(preset + 1000-instance fuzz)")


def test_criterion_10_reproducibility(tmp_path, verdict):
    outs = [tmp_path / "first", tmp_path / "second"]
    codes = [main(["run", "paper.gpt2", "--seed", "42", "--out", str(o)]) for o in outs]
    files = ["report.csv", "report.json"]
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    ok = codes == [0, 0] and same
    verdict("10", ok, f"two runs of `run paper.gpt2 --seed 42`: exit codes {codes}, report.csv and "
                      f"report.json {'byte-identical' if same else 'DIFFER'}")
