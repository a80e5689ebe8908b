"""Experiment configuration: YAML files validated against a versioned schema.

Unknown keys are rejected and every validation error is reported with the
line of the offending YAML node. ``load_config("paper.gpt2")`` loads the
shipped preset; any other argument is treated as a file path.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .. import costmodel as cm
from ..datapart import PartitionSpec
from ..lora import TrainConfig
from ..numerics import ToyConfig
from ..protocol.wire import DTYPE_F32, DTYPE_F64
from ..scheduler import ClusterSpec, allocate_layers, balanced_utilization
from ..scheduler.simulate import SCHEMES

SCHEMA_VERSION = 1
PRESETS = {"paper.gpt2": "paper_gpt2.yaml"}


class ConfigError(ValueError):
    """Invalid configuration; the message carries file and line."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    name: str = "gpt2"
    num_layers: int = Field(gt=0)
    hidden_dim: int = Field(gt=0)
    num_heads: int = Field(gt=0)
    ffn_dim: int = Field(gt=0)
    vocab_size: int = Field(gt=0)
    bytes_per_activation_element: int = Field(4, gt=0)


class ServerSection(_Strict):
    peak_tflops: float = Field(gt=0)
    gpus: int = Field(4, gt=0)


class ChannelSection(_Strict):
    rate_mbps: float = Field(gt=0)
    per_message_overhead_s: float = Field(0.0, ge=0)


class WorkloadSection(_Strict):
    batch_size: int = Field(72, gt=0)
    seq_len: int = Field(128, gt=0)
    lora_rank: int = Field(4, ge=0)
    train_samples: int = Field(gt=0, description="samples per epoch across the fleet")


class ClusterSection(_Strict):
    model: ModelSection
    server: ServerSection
    channel: ChannelSection
    workload: WorkloadSection
    device_fractions: list[float] = Field(min_length=1, description="fraction of one GPU per device")
    utilization: Union[Literal["balanced"], float] = "balanced"
    layer_bounds: tuple[int, int] | None = None
    splitlora_cut: int = 3
    device_buffer: int = Field(1, ge=0)

    @field_validator("device_fractions")
    @classmethod
    def _positive(cls, v):
        if any(f <= 0 for f in v):
            raise ValueError("device fractions must be > 0")
        return v

    @field_validator("utilization")
    @classmethod
    def _util(cls, v):
        if not isinstance(v, str) and not 0 < v <= 1:
            raise ValueError("utilization must be in (0, 1] or 'balanced'")
        return v


class ToyModelSection(_Strict):
    depth: int = Field(6, ge=1)
    width: int = Field(16, ge=1)
    num_classes: int = Field(3, ge=2)
    seq_len: int = Field(4, ge=1)
    ffn_mult: int = Field(2, ge=1)
    attention: bool = False
    seed: int = 0


class TrainSection(_Strict):
    learning_rate: float = Field(0.01, gt=0)
    optimizer: Literal["adamw", "sgd"] = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = Field(0.0, ge=0)


class ToySection(_Strict):
    model: ToyModelSection = ToyModelSection()
    train: TrainSection = TrainSection()
    num_samples: int = Field(360, ge=1)
    noise: float = Field(3.0, ge=0)
    data_seed: int = 0
    lora_rank: int = Field(2, ge=1)
    pooled_batch_size: int = Field(12, ge=1)
    device_batch_size: int = Field(8, ge=1)
    shuffle_window: int = Field(1, ge=1)
    wire_dtype: Literal["float32", "float64"] = "float64"
    transport: Literal["loopback", "socket"] = "loopback"


class DataMode(_Strict):
    kind: Literal["iid", "dirichlet"]
    alpha: float | None = None

    @model_validator(mode="after")
    def _alpha(self):
        if self.kind == "dirichlet" and (self.alpha is None or self.alpha <= 0):
            raise ValueError("dirichlet mode needs alpha > 0")
        if self.kind == "iid" and self.alpha is not None:
            raise ValueError("iid mode takes no alpha")
        return self

    @property
    def label(self) -> str:
        return "iid" if self.kind == "iid" else f"dirichlet_{self.alpha:g}"


class ExperimentConfig(_Strict):
    schema_version: Literal[1]
    name: str
    cluster: ClusterSection
    toy: ToySection = ToySection()
    modes: list[DataMode] = Field(min_length=1)
    schemes: list[Literal["splitfrozen", "cenlora", "fedlora", "splitlora"]] = list(SCHEMES)
    rounds: int = Field(3, ge=0)
    seeds: list[int] = Field([0], min_length=1)
    output_dir: str = "out"

    @model_validator(mode="after")
    def _consistent(self):
        if len(set(self.schemes)) != len(self.schemes):
            raise ValueError("schemes must be unique")
        hi = (self.cluster.layer_bounds[1] if self.cluster.layer_bounds is not None
              else max(1, self.cluster.model.num_layers // 4))
        if hi >= self.toy.model.depth:
            raise ValueError("toy model must be deeper than the largest device prefix")
        if self.cluster.splitlora_cut >= self.cluster.model.num_layers:
            raise ValueError("splitlora_cut must be below num_layers")
        return self

    # -- conversions ---------------------------------------------------------

    def cluster_spec(self) -> ClusterSpec:
        c = self.cluster
        server = cm.ServerProfile(c.server.peak_tflops * 1e12)
        spec = ClusterSpec(
            devices=tuple(cm.fleet_from_fractions(c.device_fractions, server, c.server.gpus)),
            channel=cm.ChannelProfile(c.channel.rate_mbps * 1e6, c.channel.per_message_overhead_s),
            server=server,
            model=cm.ModelProfile(**c.model.model_dump()),
            workload=cm.WorkloadSpec(c.workload.batch_size, c.workload.seq_len, c.workload.lora_rank,
                                     self.epoch_rounds),
            utilization=1.0,
            layer_bounds=c.layer_bounds,
            splitlora_cut=c.splitlora_cut,
        )
        u = balanced_utilization(spec) if c.utilization == "balanced" else float(c.utilization)
        return spec.with_utilization(u)

    @property
    def epoch_rounds(self) -> int:
        """Mini-batches per device per epoch."""
        w, D = self.cluster.workload, len(self.cluster.device_fractions)
        return -(-w.train_samples // (w.batch_size * D))

    @property
    def num_microbatches(self) -> int:
        return self.epoch_rounds * len(self.cluster.device_fractions)

    def toy_config(self) -> ToyConfig:
        return ToyConfig(**self.toy.model.model_dump())

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(seed=seed, **self.toy.train.model_dump())

    def partition_spec(self, mode: DataMode, seed: int) -> PartitionSpec:
        return PartitionSpec(len(self.cluster.device_fractions), mode.kind,
                             mode.alpha if mode.alpha is not None else 1.0, seed)

    def toy_depths(self) -> list[int]:
        return allocate_layers(self.cluster_spec())

    @property
    def wire_dtype(self) -> int:
        return DTYPE_F64 if self.toy.wire_dtype == "float64" else DTYPE_F32


# -- loading -----------------------------------------------------------------

def _node_line(root: yaml.Node | None, loc: tuple) -> int | None:
    node, line = root, None
    for part in loc:
        if node is None:
            break
        line = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(part):
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
        else:
            node = None
    if node is not None:
        line = node.start_mark.line + 1
    return line


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-")))
            # drop pydantic's union-branch tags such as 'float' / 'literal[...]'
            loc = tuple(p for p in loc if not (isinstance(p, str) and (p in ("float", "int") or p.startswith("literal["))))
            line = _node_line(root, loc) or 1
            path = ".".join(str(p) for p in loc) or "<root>"
            lines.append(f"{source}:{line}: {path}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None


def preset_text(name: str) -> str:
    return resources.files(__package__).joinpath("presets").joinpath(PRESETS[name]).read_text()


def load_config(ref: str | Path) -> ExperimentConfig:
    ref = str(ref)
    if ref in PRESETS:
        return parse_config(preset_text(ref), ref)
    path = Path(ref)
    if not path.is_file():
        raise ConfigError(f"{ref}: no such config file or preset (presets: {', '.join(PRESETS)})")
    return parse_config(path.read_text(), str(path))
