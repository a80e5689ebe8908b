"""Low-rank adapters and the optimizers that update them.

Weights follow the ``(d_out, d_in)`` layout, so a projection maps row
vectors as ``y = x @ W.T``. An adapter adds ``s * (x @ down.T) @ up.T`` with
``s = scale_alpha / rank``; ``down`` is ``A`` (rank x d_in) and ``up`` is
``B`` (d_out x rank).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import rng


@dataclass
class LoRAAdapter:
    down: np.ndarray
    up: np.ndarray
    scale_alpha: float
    target: str = ""

    def __post_init__(self):
        r = self.down.shape[0]
        if r < 1:
            raise ValueError("adapter rank must be >= 1")
        if self.up.shape[1] != r:
            raise ValueError(
                f"adapter {self.target!r}: up has inner dim {self.up.shape[1]}, down has {r}")

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def d_in(self) -> int:
        return self.down.shape[1]

    @property
    def d_out(self) -> int:
        return self.up.shape[0]

    @property
    def scaling(self) -> float:
        return self.scale_alpha / self.rank

    @property
    def num_params(self) -> int:
        return self.down.size + self.up.size


def adapter_init(rank: int, dims: tuple[int, int], seed: int,
                 scale_alpha: float | None = None, target: str = "") -> LoRAAdapter:
    """Fresh adapter for a ``(d_out, d_in)`` projection.

    ``down`` is Gaussian with variance ``1/rank``; ``up`` is zero, so the
    adapter contributes nothing until it is trained. ``scale_alpha`` defaults
    to ``rank`` (scaling 1).
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    d_out, d_in = dims
    down = rng.normals(seed, (rank, d_in), scale=1.0 / np.sqrt(rank))
    up = np.zeros((d_out, rank))
    return LoRAAdapter(down=down, up=up,
                       scale_alpha=float(rank if scale_alpha is None else scale_alpha),
                       target=target)


def adapter_forward(a: LoRAAdapter, x: np.ndarray) -> np.ndarray:
    return a.scaling * ((x @ a.down.T) @ a.up.T)


def adapter_input_grad(a: LoRAAdapter, upstream: np.ndarray) -> np.ndarray:
    return a.scaling * ((upstream @ a.up) @ a.down)


def adapter_grads(a: LoRAAdapter, x: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients ``(grad_down, grad_up)`` given the projection input and the
    gradient arriving at its output."""
    h = x @ a.down.T
    grad_up = a.scaling * (upstream.T @ h)
    grad_down = a.scaling * ((upstream @ a.up).T @ x)
    return grad_down, grad_up


def merge(a: LoRAAdapter, base: np.ndarray) -> np.ndarray:
    """Fold the adapter into a copy of ``base``.

    Not idempotent: merging twice adds the delta twice.
    """
    if base.shape != (a.d_out, a.d_in):
        raise ValueError(f"base shape {base.shape} does not match adapter {(a.d_out, a.d_in)}")
    return base + a.scaling * (a.up @ a.down)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    optimizer: Literal["sgd", "adamw"] = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class OptimizerState:
    """Per-parameter optimizer state, keyed by a stable parameter name."""
    cfg: TrainConfig
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place. Iterates names in sorted order."""
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        for name in sorted(grads):
            p, g = params[name], grads[name]
            if cfg.optimizer == "sgd":
                p -= cfg.learning_rate * g
                continue
            m, v = self.moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            self.moments[name] = (m, v)
            m_hat = m / (1 - cfg.beta1 ** t)
            v_hat = v / (1 - cfg.beta2 ** t)
            p *= 1 - cfg.learning_rate * cfg.weight_decay
            p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
