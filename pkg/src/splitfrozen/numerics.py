"""Toy transformer-like model with a frozen base and a decomposed backward.

Activations are 2-D float64 arrays of shape ``(batch * seq_len, width)``,
rows grouped sample-major. A layer is ``x + MLP(x)`` (Linear -> GELU ->
Linear), optionally preceded by a single-head attention sub-block
``x + Attn(x)``. The classifier head mean-pools each sample's rows and is
trainable; every base weight is frozen.

The backward is split in two phases:

``backward_B``
    propagates input gradients down through the layers and records, per
    adapted projection, the pair (projection input, output gradient). It
    never touches a weight.
``backward_W``
    turns the recorded pairs into adapter/head gradients and applies the
    optimizer, exactly once.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .lora import LoRAAdapter, OptimizerState, adapter_forward, adapter_grads, adapter_init, adapter_input_grad

MLP_TARGETS = ("w1", "w2")
ATTN_TARGETS = ("wq", "wk", "wv", "wo")

_GELU_C = np.sqrt(2.0 / np.pi)


class DimensionError(ValueError):
    def __init__(self, layer_index: int, expected: int, actual: int):
        super().__init__(
            f"layer {layer_index}: expected input width {expected}, got {actual}")
        self.layer_index = layer_index
        self.expected = expected
        self.actual = actual


class OrderingError(RuntimeError):
    """A phase was run out of order (B without forward, W without B, W twice)."""


@dataclass(frozen=True)
class ToyConfig:
    depth: int = 4
    width: int = 16
    num_classes: int = 3
    seq_len: int = 4
    ffn_mult: int = 2
    attention: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.depth, self.width, self.num_classes, self.seq_len, self.ffn_mult) < 1:
            raise ValueError(f"invalid toy config {self}")

    @property
    def targets(self) -> tuple[str, ...]:
        """Default adapted projections: Q/K/V/O when attention is on (the
        cost model's convention), otherwise the two MLP projections."""
        return ATTN_TARGETS if self.attention else MLP_TARGETS


def gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u ** 3)))


def gelu_grad(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {what}")
    return a


class ToyLayer:
    def __init__(self, layer_index: int, cfg: ToyConfig):
        self.layer_index = layer_index
        self.width = cfg.width
        self.seq_len = cfg.seq_len
        self.attention = cfg.attention
        d, h = cfg.width, cfg.width * cfg.ffn_mult
        seed = lambda k: rng.derive_seed(cfg.seed, layer_index, k)  # noqa: E731
        self.base: dict[str, np.ndarray] = {
            "w1": rng.normals(seed(1), (h, d), 1.0 / np.sqrt(d)),
            "b1": rng.normals(seed(2), (h,), 0.1),
            "w2": rng.normals(seed(3), (d, h), 0.5 / np.sqrt(h)),
            "b2": rng.normals(seed(4), (d,), 0.1),
        }
        if cfg.attention:
            for k, name in enumerate(ATTN_TARGETS):
                self.base[name] = rng.normals(seed(10 + k), (d, d), 1.0 / np.sqrt(d))
        self.adapters: dict[str, LoRAAdapter] = {}
        self.cached: dict[str, np.ndarray] | None = None

    @property
    def cached_input(self) -> np.ndarray | None:
        return None if self.cached is None else self.cached["x"]

    def _proj(self, x: np.ndarray, name: str) -> np.ndarray:
        y = x @ self.base[name].T
        a = self.adapters.get(name)
        if a is not None:
            y = y + adapter_forward(a, x)
        return y

    def _proj_back(self, g: np.ndarray, name: str, x: np.ndarray, ctx: list) -> np.ndarray:
        dx = g @ self.base[name]
        a = self.adapters.get(name)
        if a is not None:
            dx = dx + adapter_input_grad(a, g)
            ctx.append((self.layer_index, name, a, x, g))
        return dx

    def forward(self, x: np.ndarray, cache: bool) -> np.ndarray:
        c: dict[str, np.ndarray] = {"x": x}
        x1 = x
        if self.attention:
            s, d = self.seq_len, self.width
            q, k, v = (self._proj(x, n) for n in ("wq", "wk", "wv"))
            q3, k3, v3 = (t.reshape(-1, s, d) for t in (q, k, v))
            scores = q3 @ k3.transpose(0, 2, 1) / np.sqrt(d)
            scores = scores - scores.max(axis=-1, keepdims=True)
            p = np.exp(scores)
            p = p / p.sum(axis=-1, keepdims=True)
            attn_ctx = (p @ v3).reshape(-1, d)
            x1 = x + self._proj(attn_ctx, "wo")
            c.update(q3=q3, k3=k3, v3=v3, p=p, attn_ctx=attn_ctx)
        u = self._proj(x1, "w1") + self.base["b1"]
        g = gelu(u)
        out = x1 + self._proj(g, "w2") + self.base["b2"]
        if cache:
            c.update(x1=x1, u=u, g=g)
            self.cached = c
        return out

    def backward(self, dout: np.ndarray, ctx: list) -> np.ndarray:
        if self.cached is None:
            raise OrderingError(f"layer {self.layer_index}: backward without forward")
        c, self.cached = self.cached, None
        dg = self._proj_back(dout, "w2", c["g"], ctx)
        du = dg * gelu_grad(c["u"])
        dx1 = dout + self._proj_back(du, "w1", c["x1"], ctx)
        if not self.attention:
            return dx1
        s, d = self.seq_len, self.width
        dctx = self._proj_back(dx1, "wo", c["attn_ctx"], ctx).reshape(-1, s, d)
        p = c["p"]
        dp = dctx @ c["v3"].transpose(0, 2, 1)
        dv3 = p.transpose(0, 2, 1) @ dctx
        dscores = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) / np.sqrt(d)
        dq3 = dscores @ c["k3"]
        dk3 = dscores.transpose(0, 2, 1) @ c["q3"]
        x = c["x"]
        dx = dx1
        for name, grad in (("wq", dq3), ("wk", dk3), ("wv", dv3)):
            dx = dx + self._proj_back(grad.reshape(-1, d), name, x, ctx)
        return dx


class ToyModel:
    def __init__(self, config: ToyConfig):
        self.config = config
        self.layers = [ToyLayer(i, config) for i in range(config.depth)]
        self.head = {
            "weight": np.zeros((config.num_classes, config.width)),
            "bias": np.zeros(config.num_classes),
        }
        self.head_cache: np.ndarray | None = None

    @property
    def depth(self) -> int:
        return len(self.layers)

    def attach_adapters(self, layers, rank: int, seed: int,
                        scale_alpha: float | None = None, targets=None) -> None:
        targets = tuple(targets) if targets is not None else self.config.targets
        for li in layers:
            layer = self.layers[li]
            for name in targets:
                if name not in layer.base:
                    raise ValueError(f"layer {li} has no projection {name!r}")
                layer.adapters[name] = adapter_init(
                    rank, layer.base[name].shape, rng.derive_seed(seed, li, (ATTN_TARGETS + MLP_TARGETS).index(name)),
                    scale_alpha=scale_alpha, target=f"layer{li}.{name}")

    def adapted_layers(self) -> list[int]:
        return [l.layer_index for l in self.layers if l.adapters]

    def trainable_params(self) -> dict[str, np.ndarray]:
        out = {f"head.{k}": v for k, v in self.head.items()}
        for layer in self.layers:
            for name, a in layer.adapters.items():
                out[f"layer{layer.layer_index}.{name}.down"] = a.down
                out[f"layer{layer.layer_index}.{name}.up"] = a.up
        return out

    def base_digest(self, upto: int | None = None) -> str:
        """SHA-256 over the frozen weights of layers ``[0, upto)``."""
        h = hashlib.sha256()
        for layer in self.layers[: self.depth if upto is None else upto]:
            for name in sorted(layer.base):
                h.update(name.encode())
                h.update(np.ascontiguousarray(layer.base[name]).tobytes())
        return h.hexdigest()


def forward_prefix(model: ToyModel, x: np.ndarray, from_layer: int, to_layer: int,
                   cache: bool = False) -> np.ndarray:
    """Run layers ``[from_layer, to_layer)``.

    With ``cache`` off nothing is retained and the model is only read, so
    several devices may share one frozen prefix.
    """
    if not 0 <= from_layer <= to_layer <= model.depth:
        raise ValueError(f"invalid layer range [{from_layer}, {to_layer}) for depth {model.depth}")
    if x.ndim != 2 or x.shape[1] != model.config.width:
        raise DimensionError(from_layer, model.config.width, x.shape[-1] if x.ndim else 0)
    if x.shape[0] % model.config.seq_len:
        raise ValueError(f"row count {x.shape[0]} is not a multiple of seq_len {model.config.seq_len}")
    for layer in model.layers[from_layer:to_layer]:
        x = layer.forward(x, cache)
    return _check_finite(x, f"forward [{from_layer}, {to_layer})")


def head_forward(model: ToyModel, acts: np.ndarray, cache: bool = False) -> np.ndarray:
    s = model.config.seq_len
    pooled = acts.reshape(-1, s, acts.shape[1]).mean(axis=1)
    if cache:
        model.head_cache = pooled
    return pooled @ model.head["weight"].T + model.head["bias"]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class GradContexts:
    entries: list = field(default_factory=list)
    head: tuple[np.ndarray, np.ndarray] | None = None
    head_params: dict | None = None
    complete: bool = False
    consumed: bool = False

    def gradients(self) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        if self.head is not None:
            pooled, dlogits = self.head
            grads["head.weight"] = dlogits.T @ pooled
            grads["head.bias"] = dlogits.sum(axis=0)
        for layer_index, name, a, x, g in self.entries:
            gd, gu = adapter_grads(a, x, g)
            grads[f"layer{layer_index}.{name}.down"] = gd
            grads[f"layer{layer_index}.{name}.up"] = gu
        return grads

    def params(self) -> dict[str, np.ndarray]:
        out = {f"head.{k}": v for k, v in (self.head_params or {}).items()}
        for layer_index, name, a, _, _ in self.entries:
            out[f"layer{layer_index}.{name}.down"] = a.down
            out[f"layer{layer_index}.{name}.up"] = a.up
        return out


def backward_B(model: ToyModel, loss_grad: np.ndarray, from_layer: int, to_layer: int,
               through_head: bool = True) -> tuple[np.ndarray, GradContexts]:
    """Input-gradient pass over layers ``[from_layer, to_layer)``, top down.

    ``loss_grad`` is the gradient w.r.t. the logits when ``through_head`` is
    set, otherwise w.r.t. the activations leaving ``to_layer``.
    """
    ctx = GradContexts()
    g = loss_grad
    if through_head:
        if model.head_cache is None:
            raise OrderingError("head: backward without forward")
        pooled, model.head_cache = model.head_cache, None
        ctx.head = (pooled, loss_grad)
        ctx.head_params = model.head
        s = model.config.seq_len
        g = np.repeat(loss_grad @ model.head["weight"] / s, s, axis=0)
    for layer in reversed(model.layers[from_layer:to_layer]):
        g = layer.backward(g, ctx.entries)
    ctx.complete = True
    return _check_finite(g, "backward_B"), ctx


def backward_W(ctx: GradContexts, opt: OptimizerState) -> dict[str, np.ndarray]:
    """Compute trainable-weight gradients from ``ctx`` and apply ``opt``."""
    if not ctx.complete:
        raise OrderingError("backward_W before backward_B completed")
    if ctx.consumed:
        raise OrderingError("gradient contexts already applied")
    grads = ctx.gradients()
    opt.apply(ctx.params(), grads)
    ctx.consumed = True
    for name, p in ctx.params().items():
        _check_finite(p, name)
    return grads


def trainable_start(model: ToyModel, start_layer: int = 0) -> int:
    adapted = model.adapted_layers()
    return max(start_layer, min(adapted) if adapted else model.depth)


def train_step(model: ToyModel, x: np.ndarray, labels: np.ndarray, opt: OptimizerState,
               start_layer: int = 0) -> float:
    """One forward / B / W step on activations entering ``start_layer``."""
    t = trainable_start(model, start_layer)
    acts = forward_prefix(model, x, start_layer, t, cache=False)
    acts = forward_prefix(model, acts, t, model.depth, cache=True)
    loss, dlogits = cross_entropy(head_forward(model, acts, cache=True), labels)
    _, ctx = backward_B(model, dlogits, t, model.depth)
    backward_W(ctx, opt)
    return loss


def predict(model: ToyModel, x: np.ndarray) -> np.ndarray:
    acts = forward_prefix(model, x, 0, model.depth)
    return head_forward(model, acts).argmax(axis=1)


# -- checkpoint -------------------------------------------------------------

CKPT_MAGIC = b"SFZCKPT\x00"
CKPT_VERSION = 1


def _write_array(buf: list, arr: np.ndarray) -> None:
    buf.append(struct.pack("<I", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _section(buf: list, tag: bytes, name: str) -> int:
    raw = name.encode()
    buf.append(tag + struct.pack("<H", len(raw)) + raw)
    return 1


def save_checkpoint(model: ToyModel) -> bytes:
    cfg = model.config
    sections: list[bytes] = []
    n_sections = 0
    for layer in model.layers:
        for name in sorted(layer.base):
            n_sections += _section(sections, b"BASE", f"layer{layer.layer_index}.{name}")
            _write_array(sections, layer.base[name])
    for name in sorted(model.head):
        n_sections += _section(sections, b"HEAD", name)
        _write_array(sections, model.head[name])
    for layer in model.layers:
        for name in sorted(layer.adapters):
            a = layer.adapters[name]
            n_sections += _section(sections, b"LORA", f"layer{layer.layer_index}.{name}")
            sections.append(struct.pack("<d", a.scale_alpha))
            _write_array(sections, a.down)
            _write_array(sections, a.up)
    header = CKPT_MAGIC + struct.pack(
        "<I6IQI", CKPT_VERSION, cfg.depth, cfg.width, cfg.num_classes, cfg.seq_len,
        cfg.ffn_mult, int(cfg.attention), cfg.seed, n_sections)
    return header + b"".join(sections)


def load_checkpoint(data: bytes) -> ToyModel:
    if data[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    off = 8
    version, depth, width, ncls, seq, ffn, attn, seed, nsec = struct.unpack_from("<I6IQI", data, off)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<I6IQI")
    model = ToyModel(ToyConfig(depth, width, ncls, seq, ffn, bool(attn), seed))

    def read_array():
        nonlocal off
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
        return arr

    for _ in range(nsec):
        tag = data[off:off + 4]
        (nlen,) = struct.unpack_from("<H", data, off + 4)
        name = data[off + 6: off + 6 + nlen].decode()
        off += 6 + nlen
        if tag == b"HEAD":
            model.head[name] = read_array()
            continue
        layer_part, proj = name.split(".", 1)
        layer = model.layers[int(layer_part[len("layer"):])]
        if tag == b"BASE":
            layer.base[proj] = read_array()
        elif tag == b"LORA":
            (alpha,) = struct.unpack_from("<d", data, off)
            off += 8
            down = read_array()
            up = read_array()
            layer.adapters[proj] = LoRAAdapter(down=down, up=up, scale_alpha=alpha, target=name)
        else:
            raise ValueError(f"unknown checkpoint section tag {tag!r}")
    return model
