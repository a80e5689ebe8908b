from __future__ import annotations

from functools import lru_cache

import numpy as np
import pytest

from splitfrozen import costmodel as cm
from splitfrozen.scheduler import ClusterSpec, allocate_layers, balanced_utilization

FLEET_FRACTIONS = [0.1] * 3 + [0.2] * 7


def gpt2_profile() -> cm.ModelProfile:
    return cm.ModelProfile("gpt2", num_layers=12, hidden_dim=768, num_heads=12, ffn_dim=3072,
                           vocab_size=50257)


def fleet_cluster(utilization: float | str = "balanced", fractions=FLEET_FRACTIONS) -> ClusterSpec:
    server = cm.ServerProfile(330.4e12)
    spec = ClusterSpec(
        devices=tuple(cm.fleet_from_fractions(fractions, server)),
        channel=cm.ChannelProfile(600e6),
        server=server,
        model=gpt2_profile(),
        workload=cm.WorkloadSpec(batch_size=72, seq_len=128, lora_rank=4, rounds=6),
        layer_bounds=(1, 3),
    )
    if utilization == "balanced":
        return spec.with_utilization(balanced_utilization(spec))
    return spec.with_utilization(utilization)


@pytest.fixture(scope="session")
def fleet():
    return fleet_cluster()


def random_cluster(gen: np.random.Generator, max_devices: int = 5) -> ClusterSpec:
    """Small random cluster for fuzzing: capacities, link and model vary over decades."""
    server = cm.ServerProfile(float(10 ** gen.uniform(12, 15)))
    D = int(gen.integers(1, max_devices + 1))
    devices = tuple(cm.DeviceProfile(i, float(10 ** gen.uniform(10, 13))) for i in range(D))
    layers = int(gen.integers(4, 13))
    d = int(gen.choice([64, 128, 256, 768]))
    model = cm.ModelProfile("fuzz", layers, d, 1, 4 * d, 1000)
    work = cm.WorkloadSpec(int(gen.integers(1, 33)), int(gen.choice([16, 64, 128])), int(gen.integers(1, 9)))
    hi = max(1, layers // 4)
    return ClusterSpec(devices, cm.ChannelProfile(float(10 ** gen.uniform(7, 10))), server, model, work,
                       utilization=float(gen.uniform(0.05, 1.0)), layer_bounds=(1, hi),
                       splitlora_cut=min(3, layers - 1))


@lru_cache(maxsize=None)
def fuzz_cases(n: int = 1000) -> tuple:
    """Fixed fuzz corpus of ``(cluster, depths, num_microbatches)`` triples."""
    gen = np.random.default_rng(20240611)
    out = []
    for _ in range(n):
        cluster = random_cluster(gen)
        out.append((cluster, allocate_layers(cluster), int(gen.integers(1, 13))))
    return tuple(out)
