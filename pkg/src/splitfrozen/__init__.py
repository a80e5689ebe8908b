"""Split learning with a frozen device-side prefix.

Submodules:

* :mod:`splitfrozen.costmodel` — analytic FLOP / byte / time costs;
* :mod:`splitfrozen.numerics` — toy transformer with B/W-split backward;
* :mod:`splitfrozen.lora` — low-rank adapters and optimizers;
* :mod:`splitfrozen.datapart` — IID / Dirichlet partitioning, pooled shuffle;
* :mod:`splitfrozen.protocol` — device/server state machines and wire format;
* :mod:`splitfrozen.scheduler` — layer allocation and pipeline simulation;
* :mod:`splitfrozen.harness` — configs, experiment runner and CLI.
"""

__version__ = "0.1.0"
