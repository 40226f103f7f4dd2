"""Functional model engine.

Models are immutable layer lists (:class:`ModelGraph`); weights live in a
separate ordered ``dict[str, torch.Tensor]`` (a *ParamSet*).  Every
operation here is a pure function of its arguments, which is what lets the
federation code hand weights around as plain values.

Parameter names are ``"<layer index>.weight"`` / ``"<layer index>.bias"``
where the index is the layer's position in the *original* graph, so the
head and tail of a split model use the same names as the fused model.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

ParamSet = Dict[str, torch.Tensor]

DTYPE = torch.float32


class ShapeError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, loss: float, batch_id=None):
        self.loss = loss
        self.batch_id = batch_id
        super().__init__(f"non-finite loss {loss!r} on batch {batch_id!r}")


class SplitError(ValueError):
    pass


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    block: Optional[str] = None


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    block: Optional[str] = None


@dataclass(frozen=True)
class ReLU:
    block: Optional[str] = None


@dataclass(frozen=True)
class MaxPool:
    size: int = 2
    block: Optional[str] = None


@dataclass(frozen=True)
class AvgPool:
    size: int = 2
    block: Optional[str] = None


@dataclass(frozen=True)
class Upsample:
    """Nearest-neighbour upsampling by an integer factor."""

    scale: int = 2
    block: Optional[str] = None


@dataclass(frozen=True)
class Flatten:
    block: Optional[str] = None


Layer = Union[Dense, Conv2d, ReLU, MaxPool, AvgPool, Upsample, Flatten]

LOSS_KINDS = ("cross_entropy", "mse", "mae")
OUTPUT_KINDS = ("class_logits", "scalar_regression", "features")


@dataclass(frozen=True)
class ModelGraph:
    layers: Tuple[Layer, ...]
    input_shape: Tuple[int, ...]
    loss_kind: str = "cross_entropy"
    output_kind: str = "class_logits"
    first_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.output_kind not in OUTPUT_KINDS:
            raise ValueError(f"unknown output_kind {self.output_kind!r}")
        # validates composition eagerly
        self.layer_shapes()

    def __len__(self):
        return len(self.layers)

    def layer_shapes(self) -> list[Tuple[int, ...]]:
        """Per-sample shapes: entry 0 is the input, entry i+1 the output of layer i."""
        shape = self.input_shape
        shapes = [shape]
        for offset, layer in enumerate(self.layers):
            shape = _output_shape(layer, shape, self.first_index + offset)
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.layer_shapes()[-1]

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        out = {}
        for offset, layer in enumerate(self.layers):
            idx = self.first_index + offset
            if isinstance(layer, Dense):
                out[f"{idx}.weight"] = (layer.out_features, layer.in_features)
                out[f"{idx}.bias"] = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                k = layer.kernel_size
                out[f"{idx}.weight"] = (layer.out_channels, layer.in_channels, k, k)
                out[f"{idx}.bias"] = (layer.out_channels,)
        return out


def _output_shape(layer: Layer, shape: Tuple[int, ...], idx: int) -> Tuple[int, ...]:
    name = f"layer {idx} ({type(layer).__name__})"
    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise ShapeError(f"{name} expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"{name} expects ({layer.in_channels}, H, W), got {shape}")
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        h = (shape[1] + 2 * p - k) // s + 1
        w = (shape[2] + 2 * p - k) // s + 1
        if h < 1 or w < 1:
            raise ShapeError(f"{name} produces empty output from {shape}")
        return (layer.out_channels, h, w)
    if isinstance(layer, (MaxPool, AvgPool)):
        if len(shape) != 3 or shape[1] % layer.size or shape[2] % layer.size:
            raise ShapeError(f"{name} needs (C, H, W) divisible by {layer.size}, got {shape}")
        return (shape[0], shape[1] // layer.size, shape[2] // layer.size)
    if isinstance(layer, Upsample):
        if len(shape) != 3:
            raise ShapeError(f"{name} needs (C, H, W), got {shape}")
        return (shape[0], shape[1] * layer.scale, shape[2] * layer.scale)
    if isinstance(layer, Flatten):
        return (math.prod(shape),)
    if isinstance(layer, ReLU):
        return shape
    raise TypeError(f"unsupported layer {layer!r}")


# ---------------------------------------------------------------------------
# parameters


def init_params(model: ModelGraph, seed: int) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init drawn from ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    params: ParamSet = {}
    for name, shape in model.param_shapes().items():
        layer = model.layers[int(name.split(".")[0]) - model.first_index]
        if isinstance(layer, Dense):
            fan_in = layer.in_features
        else:
            fan_in = layer.in_channels * layer.kernel_size**2
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound
    return params


def check_compatible(a: ParamSet, b: ParamSet, what: str = "parameter sets") -> None:
    if list(a) != list(b):
        raise ShapeError(f"{what} have different names: {list(a)} vs {list(b)}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise ShapeError(
                f"{what} disagree on {name}: {tuple(a[name].shape)} vs {tuple(b[name].shape)}"
            )


def check_params(model: ModelGraph, params: ParamSet) -> None:
    expected = model.param_shapes()
    missing = [n for n in expected if n not in params]
    if missing:
        raise ShapeError(f"missing parameters {missing}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"parameter {name} has shape {tuple(params[name].shape)}, expected {shape}")


def clone_params(params: ParamSet) -> ParamSet:
    return {k: v.detach().clone() for k, v in params.items()}


def subset_params(model: ModelGraph, params: ParamSet) -> ParamSet:
    return {name: params[name] for name in model.param_shapes()}


def flatten_params(params: ParamSet) -> torch.Tensor:
    if not params:
        return torch.zeros(0)
    return torch.cat([v.reshape(-1) for v in params.values()])


def param_distance(a: ParamSet, b: ParamSet) -> float:
    """Largest absolute elementwise difference."""
    check_compatible(a, b)
    if not a:
        return 0.0
    return max(float((a[n] - b[n]).abs().max()) if a[n].numel() else 0.0 for n in a)


def params_equal(a: ParamSet, b: ParamSet) -> bool:
    return list(a) == list(b) and all(torch.equal(a[n], b[n]) for n in a)


# ---------------------------------------------------------------------------
# forward / backward


def _apply(layer: Layer, idx: int, params: ParamSet, x: torch.Tensor) -> torch.Tensor:
    if isinstance(layer, Dense):
        return F.linear(x, params[f"{idx}.weight"], params[f"{idx}.bias"])
    if isinstance(layer, Conv2d):
        return F.conv2d(
            x, params[f"{idx}.weight"], params[f"{idx}.bias"],
            stride=layer.stride, padding=layer.padding,
        )
    if isinstance(layer, ReLU):
        return F.relu(x)
    if isinstance(layer, MaxPool):
        return F.max_pool2d(x, layer.size)
    if isinstance(layer, AvgPool):
        return F.avg_pool2d(x, layer.size)
    if isinstance(layer, Upsample):
        return F.interpolate(x, scale_factor=layer.scale, mode="nearest")
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    raise TypeError(f"unsupported layer {layer!r}")


def forward(model: ModelGraph, params: ParamSet, batch: torch.Tensor) -> torch.Tensor:
    """Run ``batch`` (leading batch dim) through ``model``.

    Autograd-transparent: gradients flow if the inputs require them.
    """
    if tuple(batch.shape[1:]) != model.input_shape:
        raise ShapeError(
            f"layer {model.first_index} input expects per-sample shape "
            f"{model.input_shape}, got {tuple(batch.shape[1:])}"
        )
    x = batch
    for offset, layer in enumerate(model.layers):
        idx = model.first_index + offset
        try:
            x = _apply(layer, idx, params, x)
        except KeyError as exc:
            raise ShapeError(f"layer {idx} ({type(layer).__name__}) missing parameter {exc}") from None
        except RuntimeError as exc:
            raise ShapeError(f"layer {idx} ({type(layer).__name__}): {exc}") from None
    return x


def loss_from_outputs(model: ModelGraph, outputs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if model.output_kind == "scalar_regression" and outputs.dim() == 2 and outputs.shape[1] == 1:
        outputs = outputs[:, 0]
    if model.loss_kind == "cross_entropy":
        if targets.dtype.is_floating_point:
            raise ShapeError("cross_entropy targets must be integer class indices")
        return F.cross_entropy(outputs, targets)
    targets = targets.to(outputs.dtype)
    if outputs.shape != targets.shape:
        raise ShapeError(f"predictions {tuple(outputs.shape)} vs targets {tuple(targets.shape)}")
    if model.loss_kind == "mse":
        return ((outputs - targets) ** 2).mean()
    return (outputs - targets).abs().mean()


def loss_and_grad(
    model: ModelGraph,
    params: ParamSet,
    batch: torch.Tensor,
    targets: torch.Tensor,
    batch_id=None,
) -> Tuple[float, ParamSet]:
    """Batch-mean loss and its gradient with respect to every parameter."""
    check_params(model, params)
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    with torch.enable_grad():
        loss = loss_from_outputs(model, forward(model, leaves, batch), targets)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(value, batch_id)
        names = list(model.param_shapes())
        grads = torch.autograd.grad(loss, [leaves[n] for n in names]) if names else ()
    return value, dict(zip(names, (g.detach() for g in grads)))


def backward_from(
    model: ModelGraph,
    params: ParamSet,
    batch: torch.Tensor,
    upstream: torch.Tensor,
) -> Tuple[ParamSet, torch.Tensor]:
    """Vector-Jacobian product: gradients of ``<forward(batch), upstream>``.

    Returns (parameter grads, input grad).  Used by the head side of a split
    model once the server has sent back gradients at the cut layer.
    """
    leaves = {k: v.detach().requires_grad_(True) for k, v in subset_params(model, params).items()}
    x = batch.detach().requires_grad_(True)
    names = list(leaves)
    with torch.enable_grad():
        out = forward(model, leaves, x)
        grads = torch.autograd.grad(out, [leaves[n] for n in names] + [x], upstream, allow_unused=True)
    pgrads = {n: (g if g is not None else torch.zeros_like(leaves[n])).detach() for n, g in zip(names, grads)}
    xg = grads[-1] if grads[-1] is not None else torch.zeros_like(x)
    return pgrads, xg.detach()


def loss_grad_and_input_grad(
    model: ModelGraph,
    params: ParamSet,
    batch: torch.Tensor,
    targets: torch.Tensor,
    batch_id=None,
) -> Tuple[float, ParamSet, torch.Tensor]:
    """Like :func:`loss_and_grad` but also returns d(loss)/d(batch)."""
    leaves = {k: v.detach().requires_grad_(True) for k, v in subset_params(model, params).items()}
    x = batch.detach().requires_grad_(True)
    names = list(leaves)
    with torch.enable_grad():
        loss = loss_from_outputs(model, forward(model, leaves, x), targets)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(value, batch_id)
        grads = torch.autograd.grad(loss, [leaves[n] for n in names] + [x])
    return value, {n: g.detach() for n, g in zip(names, grads[:-1])}, grads[-1].detach()


def finite_diff_check(
    model: ModelGraph,
    params: ParamSet,
    batch: torch.Tensor,
    targets: torch.Tensor,
    epsilon: float = 1e-6,
) -> float:
    """Max relative error between central differences and :func:`loss_and_grad`.

    Both sides are evaluated in float64; denominators are floored at 1e-8.
    """
    if not 1e-6 <= epsilon <= 1e-2:
        raise ValueError("epsilon must lie in [1e-6, 1e-2]")
    p64 = {k: v.detach().to(torch.float64).clone() for k, v in params.items()}
    x64 = batch.to(torch.float64)
    _, analytic = loss_and_grad(model, p64, x64, targets)

    def loss_at(p):
        with torch.no_grad():
            return float(loss_from_outputs(model, forward(model, p, x64), targets))

    worst = 0.0
    for name, tensor in p64.items():
        flat = tensor.view(-1)
        agrad = analytic[name].reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + epsilon
            up = loss_at(p64)
            flat[i] = orig - epsilon
            down = loss_at(p64)
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = float(agrad[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizers

OPTIMIZER_KINDS = ("sgd", "sgd_momentum", "adaptive")


@dataclass(frozen=True)
class OptimizerState:
    kind: str
    learning_rate: float
    momentum: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    first_moment: ParamSet = field(default_factory=dict)
    second_moment: ParamSet = field(default_factory=dict)
    step_count: int = 0
    epoch: int = 0
    decay_interval: int = 0
    decay_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @property
    def current_lr(self) -> float:
        if self.decay_interval <= 0:
            return self.learning_rate
        return self.learning_rate * self.decay_scale ** (self.epoch // self.decay_interval)


def init_optimizer(kind: str, params: ParamSet, learning_rate: float, **kwargs) -> OptimizerState:
    zeros = {k: torch.zeros_like(v) for k, v in params.items()}
    second = {k: torch.zeros_like(v) for k, v in params.items()} if kind == "adaptive" else {}
    first = zeros if kind != "sgd" else {}
    return OptimizerState(kind, learning_rate, first_moment=first, second_moment=second, **kwargs)


def next_epoch(state: OptimizerState) -> OptimizerState:
    return replace(state, epoch=state.epoch + 1)


def optimizer_step(state: OptimizerState, params: ParamSet, grads: ParamSet) -> Tuple[OptimizerState, ParamSet]:
    check_compatible(params, grads, "params and grads")
    lr = state.current_lr
    step = state.step_count + 1
    if state.kind == "sgd":
        new = {n: params[n] - lr * grads[n] for n in params}
        return replace(state, step_count=step), new
    check_compatible(params, state.first_moment, "params and optimizer state")
    if state.kind == "sgd_momentum":
        buf = {n: state.momentum * state.first_moment[n] + grads[n] for n in params}
        new = {n: params[n] - lr * buf[n] for n in params}
        return replace(state, first_moment=buf, step_count=step), new
    b1, b2 = state.betas
    m = {n: b1 * state.first_moment[n] + (1 - b1) * grads[n] for n in params}
    v = {n: b2 * state.second_moment[n] + (1 - b2) * grads[n] * grads[n] for n in params}
    c1 = 1 - b1**step
    c2 = 1 - b2**step
    new = {
        n: params[n] - lr * (m[n] / c1) / ((v[n] / c2).sqrt() + state.eps)
        for n in params
    }
    return replace(state, first_moment=m, second_moment=v, step_count=step), new


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class CutSplit:
    head: ModelGraph
    tail: ModelGraph
    cut_index: int


def split_at_cut_layer(model: ModelGraph, cut_index: int) -> CutSplit:
    if not 0 < cut_index < len(model.layers):
        raise SplitError(f"cut_index must lie in (0, {len(model.layers)}), got {cut_index}")
    before, after = model.layers[cut_index - 1], model.layers[cut_index]
    if before.block is not None and before.block == after.block:
        raise SplitError(f"cut_index {cut_index} falls inside fused block {before.block!r}")
    shapes = model.layer_shapes()
    head = ModelGraph(
        model.layers[:cut_index], model.input_shape, model.loss_kind, "features", model.first_index
    )
    tail = ModelGraph(
        model.layers[cut_index:], shapes[cut_index], model.loss_kind, model.output_kind,
        model.first_index + cut_index,
    )
    return CutSplit(head, tail, cut_index)


def identity_head(model: ModelGraph) -> ModelGraph:
    """Zero-layer graph; its forward is the identity."""
    return ModelGraph((), model.input_shape, model.loss_kind, "features", model.first_index)


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"HFSM"
VERSION = 1


def write_tensor(buf: io.BytesIO, name: str, tensor: torch.Tensor) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    shape = tuple(tensor.shape)
    buf.write(struct.pack("<B", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(tensor.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f"truncated while reading {what}", self.offset)
        out = self.data[self.offset:self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensor(reader: _Reader) -> Tuple[str, torch.Tensor]:
    (nlen,) = reader.unpack("<H", "name length")
    start = reader.offset
    try:
        name = reader.take(nlen, "name").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("tensor name is not valid UTF-8", start) from None
    (rank,) = reader.unpack("<B", f"rank of {name!r}")
    dims = reader.unpack(f"<{rank}I", f"dims of {name!r}")
    count = math.prod(dims)
    payload = reader.take(4 * count, f"payload of {name!r}")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return name, torch.from_numpy(arr.copy())


def params_to_bytes(params: ParamSet) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(params)))
    for name, tensor in params.items():
        write_tensor(buf, name, tensor)
    return buf.getvalue()


def params_from_bytes(data: bytes) -> ParamSet:
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic", 0)
    version, count = reader.unpack("<HI", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    params: ParamSet = {}
    for _ in range(count):
        at = reader.offset
        name, tensor = read_tensor(reader)
        if name in params:
            raise CheckpointError(f"duplicate tensor name {name!r}", at)
        params[name] = tensor
    if reader.offset != len(data):
        raise CheckpointError("trailing bytes after last tensor", reader.offset)
    return params


def save_params(params: ParamSet, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> ParamSet:
    return params_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# model builders


def toy_cnn(
    input_shape: Sequence[int],
    num_outputs: int,
    channels: Sequence[int] = (8,),
    hidden: int = 0,
    loss_kind: str = "cross_entropy",
) -> ModelGraph:
    """conv-relu-pool blocks followed by a dense head.

    Each conv block is tagged as fused so a split can only land between
    blocks or in the head.
    """
    c, h, w = input_shape
    layers: list[Layer] = []
    in_ch = c
    for i, out_ch in enumerate(channels):
        tag = f"conv{i + 1}"
        layers += [Conv2d(in_ch, out_ch, 3, 1, 1, block=tag), ReLU(block=tag), MaxPool(2, block=tag)]
        in_ch = out_ch
        h, w = h // 2, w // 2
    layers.append(Flatten())
    width = in_ch * h * w
    if hidden:
        layers += [Dense(width, hidden), ReLU()]
        width = hidden
    layers.append(Dense(width, num_outputs))
    output_kind = "class_logits" if loss_kind == "cross_entropy" else "scalar_regression"
    return ModelGraph(tuple(layers), tuple(input_shape), loss_kind, output_kind)


def mlp(in_features: int, widths: Sequence[int], loss_kind: str = "cross_entropy") -> ModelGraph:
    layers: list[Layer] = []
    prev = in_features
    for i, width in enumerate(widths):
        layers.append(Dense(prev, width))
        if i < len(widths) - 1:
            layers.append(ReLU())
        prev = width
    output_kind = "class_logits" if loss_kind == "cross_entropy" else "scalar_regression"
    return ModelGraph(tuple(layers), (in_features,), loss_kind, output_kind)
