"""Label partitioning across devices and the server's pooled shuffle."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from . import rng

MAX_REDRAWS = 100


@dataclass(frozen=True)
class PartitionSpec:
    num_devices: int
    mode: Literal["iid", "dirichlet"] = "iid"
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_devices < 1:
            raise ValueError("num_devices must be >= 1")
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.mode == "dirichlet" and not self.alpha > 0:
            raise ValueError("dirichlet alpha must be > 0")

    @property
    def label(self) -> str:
        return "iid" if self.mode == "iid" else f"dirichlet(alpha={self.alpha:g})"


@dataclass
class DeviceShard:
    device_id: int
    sample_indices: list[int]
    class_histogram: list[int] = field(default_factory=list)


def _histogram(labels: np.ndarray, idx: list[int], num_classes: int) -> list[int]:
    return np.bincount(labels[idx], minlength=num_classes).astype(int).tolist() if idx else [0] * num_classes


def _dirichlet_draw(labels: np.ndarray, spec: PartitionSpec, gen: np.random.Generator) -> list[list[int]]:
    shards: list[list[int]] = [[] for _ in range(spec.num_devices)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        gen.shuffle(idx)
        p = gen.dirichlet(np.full(spec.num_devices, spec.alpha))
        cuts = (np.cumsum(p)[:-1] * len(idx)).astype(int)
        for dev, part in enumerate(np.split(idx, cuts)):
            shards[dev].extend(part.tolist())
    return shards


def _top_up(shards: list[list[int]]) -> None:
    # move one sample at a time from the largest shard to each empty one
    for dev in range(len(shards)):
        if not shards[dev]:
            donor = max(range(len(shards)), key=lambda d: (len(shards[d]), -d))
            shards[dev].append(shards[donor].pop())


def partition(labels: Sequence[int], spec: PartitionSpec) -> list[DeviceShard]:
    """Split sample indices ``0..len(labels)-1`` into one shard per device.

    ``iid`` deals a class-stratified shuffled ordering round-robin, so shard
    sizes differ by at most one and class counts by at most one.
    ``dirichlet`` draws, for every class, device proportions from
    ``Dirichlet(alpha, ..., alpha)``. Empty shards trigger a redraw (up to
    ``MAX_REDRAWS``) and are then topped up from the largest shard.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot partition an empty dataset")
    if labels.size < spec.num_devices:
        raise ValueError(f"{labels.size} samples cannot cover {spec.num_devices} devices")
    num_classes = int(labels.max()) + 1
    gen = np.random.default_rng(spec.seed)

    if spec.mode == "iid":
        order = []
        for c in range(num_classes):
            idx = np.flatnonzero(labels == c)
            gen.shuffle(idx)
            order.extend(idx.tolist())
        shards = [order[d::spec.num_devices] for d in range(spec.num_devices)]
    else:
        for _ in range(MAX_REDRAWS):
            shards = _dirichlet_draw(labels, spec, gen)
            if all(shards):
                break
        _top_up(shards)

    return [DeviceShard(d, sorted(s), _histogram(labels, sorted(s), num_classes))
            for d, s in enumerate(shards)]


def manifest_csv(shards: Iterable[DeviceShard]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["device_id", "sample_id"])
    for shard in sorted(shards, key=lambda s: s.device_id):
        for sid in shard.sample_indices:
            w.writerow([shard.device_id, sid])
    return out.getvalue()


@dataclass(frozen=True)
class PooledItem:
    sample_id: int
    source: object
    row: int


def pooled_shuffle(batches: Iterable, seed: int) -> list[PooledItem]:
    """Interleave every sample of ``batches`` into one seeded stream.

    Each batch must expose ``sample_ids``. Samples are first put in
    ascending sample-id order, so the result depends only on the id multiset
    and ``seed``, never on which device sent what or in which order.
    """
    items = [PooledItem(int(sid), b, row)
             for b in batches for row, sid in enumerate(b.sample_ids)]
    if not items:
        return []
    # a sample seen in several pooled rounds is ordered by round
    items.sort(key=lambda it: (it.sample_id, getattr(it.source, "round", 0)))
    return [items[i] for i in rng.permutation(len(items), seed)]
