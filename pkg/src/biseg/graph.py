"""Layer graph, parameter store, optimizer protocol, and checkpoints.

A model is a sequence of LayerSpec records forming a DAG over named values:
each spec consumes previously produced (or externally supplied) value names
and produces one new name. Execution walks the sequence in order; the
backward pass walks it in exact reverse, accumulating gradients by addition
wherever a value fans out.

Supported kinds: conv, bn, relu, sigmoid, gap, upsample, concat, add, mul.
conv and bn own parameters in the ParamStore under "<layer name>." prefixes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .errors import (
    ArgumentError,
    ConsistencyError,
    FormatError,
    GraphError,
    ShapeError,
)
from .tensor import Rng, Shape, init_kaiming

KINDS = ("conv", "bn", "relu", "sigmoid", "gap", "upsample", "concat", "add", "mul")


@dataclass(frozen=True)
class LayerSpec:
    """One node of the model DAG.

    conv uses in_channels/out_channels/kernel/stride/padding/groups/bias;
    bn uses in_channels; upsample uses factor. The remaining kinds are fully
    described by their inputs.
    """

    kind: str
    name: str
    inputs: tuple[str, ...]
    output: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False
    factor: int = 1


_ARITY = {
    "conv": 1, "bn": 1, "relu": 1, "sigmoid": 1, "gap": 1, "upsample": 1,
    "concat": 2, "add": 2, "mul": 2,
}


def validate_graph(specs, input_names) -> None:
    """Structural checks: non-empty, every input bound before use, no dups."""
    if not specs:
        raise GraphError("layer graph is empty")
    bound = set(input_names)
    names = set()
    for spec in specs:
        if spec.kind not in KINDS:
            raise GraphError(f"layer {spec.name!r} has unknown kind {spec.kind!r}")
        if len(spec.inputs) != _ARITY[spec.kind]:
            raise GraphError(
                f"layer {spec.name!r} kind {spec.kind} expects "
                f"{_ARITY[spec.kind]} inputs, got {len(spec.inputs)}"
            )
        if spec.name in names:
            raise GraphError(f"duplicate layer name {spec.name!r}")
        names.add(spec.name)
        for src in spec.inputs:
            if src not in bound:
                raise GraphError(f"layer {spec.name!r} consumes unbound value {src!r}")
        if spec.output in bound:
            raise GraphError(f"layer {spec.name!r} rebinds existing value {spec.output!r}")
        bound.add(spec.output)


def _infer_one(spec: LayerSpec, shapes: dict) -> tuple[int, int, int, int]:
    a = shapes[spec.inputs[0]]
    if spec.kind == "conv":
        n, c, h, w = a
        if c != spec.in_channels:
            raise ShapeError(
                f"layer {spec.name!r} expects {spec.in_channels} channels, got {c}"
            )
        oh = ops.conv_out_extent(h, spec.kernel, spec.stride, spec.padding)
        ow = ops.conv_out_extent(w, spec.kernel, spec.stride, spec.padding)
        return (n, spec.out_channels, oh, ow)
    if spec.kind == "bn":
        if a[1] != spec.in_channels:
            raise ShapeError(f"layer {spec.name!r} normalizes {spec.in_channels} channels, got {a[1]}")
        return a
    if spec.kind in ("relu", "sigmoid"):
        return a
    if spec.kind == "gap":
        return (a[0], a[1], 1, 1)
    if spec.kind == "upsample":
        return (a[0], a[1], a[2] * spec.factor, a[3] * spec.factor)
    b = shapes[spec.inputs[1]]
    if spec.kind == "concat":
        if a[0] != b[0] or a[2:] != b[2:]:
            raise ShapeError(f"layer {spec.name!r} concat operands {a} / {b} misaligned")
        return (a[0], a[1] + b[1], a[2], a[3])
    # add / mul: equal shapes, or second operand broadcast as (n, c, 1, 1)
    if a == b or b == (a[0], a[1], 1, 1):
        return a
    raise ShapeError(f"layer {spec.name!r} operands {a} / {b} do not align")


def infer_shapes(specs, input_shapes: dict) -> dict:
    """Static NCHW shape for every value name; raises ShapeError on misfit."""
    validate_graph(specs, input_shapes.keys())
    shapes = dict(input_shapes)
    for spec in specs:
        shapes[spec.output] = _infer_one(spec, shapes)
    return shapes


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ParamEntry:
    value: np.ndarray
    momentum: np.ndarray | None = None
    trainable: bool = True
    decay: bool = True


class ParamStore:
    """Ordered name -> ParamEntry map; iteration order is insertion order."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True, decay: bool = True):
        if name in self._entries:
            raise ConsistencyError(f"parameter {name!r} registered twice")
        self._entries[name] = ParamEntry(value=value, trainable=trainable, decay=decay)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, name: str) -> ParamEntry:
        try:
            return self._entries[name]
        except KeyError:
            raise ConsistencyError(f"parameter {name!r} is not registered") from None

    def names(self):
        return list(self._entries.keys())

    def items(self):
        return self._entries.items()

    def param_count(self, trainable_only: bool = True) -> int:
        return sum(
            int(e.value.size)
            for e in self._entries.values()
            if e.trainable or not trainable_only
        )

    def as_dtype(self, dtype) -> "ParamStore":
        """Copy of the store with values converted (for verification runs)."""
        out = ParamStore()
        for name, e in self._entries.items():
            out.add(name, e.value.astype(dtype), trainable=e.trainable, decay=e.decay)
        return out


def init_params(specs, store: ParamStore, rng: Rng) -> None:
    """Allocate parameters for every conv/bn spec, in graph order.

    Conv weights are He-normal with fan_in = (c_in / groups) * k * k; biases
    start at zero and are exempt from weight decay, as are BN gamma/beta.
    Running statistics are stored as non-trainable entries so checkpoints
    carry them.
    """
    for spec in specs:
        if spec.kind == "conv":
            fan_in = (spec.in_channels // spec.groups) * spec.kernel * spec.kernel
            w_shape = Shape(spec.out_channels, spec.in_channels // spec.groups,
                            spec.kernel, spec.kernel)
            store.add(f"{spec.name}.weight", init_kaiming(w_shape, fan_in, rng).data)
            if spec.bias:
                store.add(f"{spec.name}.bias", np.zeros(spec.out_channels, np.float32),
                          decay=False)
        elif spec.kind == "bn":
            c = spec.in_channels
            store.add(f"{spec.name}.gamma", np.ones(c, np.float32), decay=False)
            store.add(f"{spec.name}.beta", np.zeros(c, np.float32), decay=False)
            store.add(f"{spec.name}.running_mean", np.zeros(c, np.float32),
                      trainable=False, decay=False)
            store.add(f"{spec.name}.running_var", np.ones(c, np.float32),
                      trainable=False, decay=False)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


class OpCounter:
    """Instrumented-execution tally: per-layer (macs, flops) from live arrays."""

    def __init__(self):
        self.rows: dict[str, tuple[int, int]] = {}

    def record(self, name: str, macs: int, flops: int):
        prev = self.rows.get(name, (0, 0))
        self.rows[name] = (prev[0] + macs, prev[1] + flops)


def _count_runtime(counter: OpCounter | None, spec: LayerSpec, store, x, out):
    """Cost of one executed layer, measured from the arrays involved."""
    if counter is None:
        return
    if spec.kind == "conv":
        w = store.get(f"{spec.name}.weight").value
        macs = w.size * out.shape[0] * out.shape[2] * out.shape[3]
        counter.record(spec.name, int(macs), int(2 * macs))
    elif spec.kind == "bn":
        counter.record(spec.name, 0, int(2 * out.size))
    elif spec.kind == "relu":
        counter.record(spec.name, 0, int(out.size))
    elif spec.kind == "sigmoid":
        counter.record(spec.name, 0, int(4 * out.size))
    elif spec.kind == "gap":
        counter.record(spec.name, 0, int(x.size + out.size))
    elif spec.kind == "upsample":
        counter.record(spec.name, 0, int(7 * out.size))
    elif spec.kind in ("add", "mul"):
        counter.record(spec.name, 0, int(out.size))
    else:  # concat moves memory only
        counter.record(spec.name, 0, 0)


class GraphRun:
    """One forward (and optional backward) execution of a spec sequence."""

    def __init__(self, specs, store: ParamStore, mode: str = "infer"):
        if mode not in ("train", "infer"):
            raise ArgumentError(f"unknown mode {mode!r}")
        self.specs = list(specs)
        self.store = store
        self.mode = mode
        self.values: dict[str, np.ndarray] = {}
        self._input_names: tuple[str, ...] = ()

    def _conv_params(self, spec: LayerSpec) -> ops.Conv2dParams:
        bias = self.store.get(f"{spec.name}.bias").value if spec.bias else None
        return ops.Conv2dParams(
            weight=self.store.get(f"{spec.name}.weight").value,
            bias=bias, stride=spec.stride, padding=spec.padding, groups=spec.groups,
        )

    def _bn_params(self, spec: LayerSpec) -> ops.BatchNormParams:
        return ops.BatchNormParams(
            gamma=self.store.get(f"{spec.name}.gamma").value,
            beta=self.store.get(f"{spec.name}.beta").value,
            running_mean=self.store.get(f"{spec.name}.running_mean").value,
            running_var=self.store.get(f"{spec.name}.running_var").value,
            mode=self.mode,
        )

    def forward(self, inputs: dict, counter: OpCounter | None = None) -> dict:
        validate_graph(self.specs, inputs.keys())
        self._input_names = tuple(inputs.keys())
        vals = dict(inputs)
        for spec in self.specs:
            x = vals[spec.inputs[0]]
            if spec.kind == "conv":
                out = ops.conv2d_forward(x, self._conv_params(spec))
            elif spec.kind == "bn":
                out = ops.batchnorm_forward(x, self._bn_params(spec))
            elif spec.kind == "relu":
                out = ops.relu(x)
            elif spec.kind == "sigmoid":
                out = ops.sigmoid(x)
            elif spec.kind == "gap":
                out = ops.global_avg_pool(x)
            elif spec.kind == "upsample":
                out = ops.bilinear_upsample(x, spec.factor)
            elif spec.kind == "concat":
                b = vals[spec.inputs[1]]
                if x.shape[0] != b.shape[0] or x.shape[2:] != b.shape[2:]:
                    raise ShapeError(f"layer {spec.name!r} concat operands misaligned")
                out = np.concatenate([x, b], axis=1)
            else:  # add / mul
                b = vals[spec.inputs[1]]
                if x.shape != b.shape and b.shape != (x.shape[0], x.shape[1], 1, 1):
                    raise ShapeError(f"layer {spec.name!r} operands do not align")
                out = x + b if spec.kind == "add" else x * b
            _count_runtime(counter, spec, self.store, x, out)
            vals[spec.output] = out
        self.values = vals
        return vals

    def backward(self, seed_grads: dict) -> tuple[dict, dict]:
        """Reverse pass from value-name -> grad seeds.

        Returns (param_grads, input_grads). Parameter grads cover every
        trainable entry touched by the graph; values with no incoming grad
        contribute zeros.
        """
        if not self.values:
            raise GraphError("backward called before forward")
        vgrads: dict[str, np.ndarray] = {}
        for name, g in seed_grads.items():
            if name not in self.values:
                raise GraphError(f"gradient seeded for unknown value {name!r}")
            if g.shape != self.values[name].shape:
                raise ShapeError(f"seed grad for {name!r} has wrong shape")
            vgrads[name] = g.copy()
        param_grads: dict[str, np.ndarray] = {}

        def _accum(name: str, g: np.ndarray):
            if name in vgrads:
                vgrads[name] += g
            else:
                vgrads[name] = g

        for spec in reversed(self.specs):
            gy = vgrads.pop(spec.output, None)
            x = self.values[spec.inputs[0]]
            if gy is None:
                gy = np.zeros_like(self.values[spec.output])
            if spec.kind == "conv":
                gx, gw, gb = ops.conv2d_backward(x, self._conv_params(spec), gy)
                param_grads[f"{spec.name}.weight"] = gw
                if spec.bias:
                    param_grads[f"{spec.name}.bias"] = gb
                _accum(spec.inputs[0], gx)
            elif spec.kind == "bn":
                gx, dgamma, dbeta = ops.batchnorm_backward(x, self._bn_params(spec), gy)
                param_grads[f"{spec.name}.gamma"] = dgamma
                param_grads[f"{spec.name}.beta"] = dbeta
                _accum(spec.inputs[0], gx)
            elif spec.kind == "relu":
                _accum(spec.inputs[0], ops.relu_backward(x, gy))
            elif spec.kind == "sigmoid":
                _accum(spec.inputs[0], ops.sigmoid_backward(self.values[spec.output], gy))
            elif spec.kind == "gap":
                _accum(spec.inputs[0], ops.global_avg_pool_backward(x.shape, gy))
            elif spec.kind == "upsample":
                _accum(spec.inputs[0], ops.bilinear_upsample_backward(x.shape, spec.factor, gy))
            elif spec.kind == "concat":
                ca = x.shape[1]
                _accum(spec.inputs[0], np.ascontiguousarray(gy[:, :ca]))
                _accum(spec.inputs[1], np.ascontiguousarray(gy[:, ca:]))
            else:  # add / mul
                b = self.values[spec.inputs[1]]
                if spec.kind == "add":
                    ga, gb_ = gy, gy.copy()
                else:
                    ga, gb_ = gy * b, gy * x
                if b.shape != x.shape:  # broadcast second operand
                    gb_ = gb_.sum(axis=(2, 3), keepdims=True)
                _accum(spec.inputs[0], ga if spec.kind == "mul" else gy.copy())
                _accum(spec.inputs[1], gb_)
        input_grads = {
            name: vgrads.get(name, np.zeros_like(self.values[name]))
            for name in self._input_names
        }
        return param_grads, input_grads


def run_forward(specs, store: ParamStore, inputs: dict, mode: str = "infer",
                counter: OpCounter | None = None) -> dict:
    return GraphRun(specs, store, mode).forward(inputs, counter=counter)


@dataclass
class ForwardBackward:
    loss: float
    terms: dict
    param_grads: dict
    input_grads: dict
    values: dict


def forward_backward(specs, store: ParamStore, inputs: dict, loss_fn,
                     mode: str = "train") -> ForwardBackward:
    """Forward pass, loss evaluation, reverse pass.

    loss_fn(values) must return (loss: float, seed_grads: {value: grad},
    terms: dict of reported scalars). Every trainable parameter of the graph
    receives a gradient (zero where the loss does not reach it).
    """
    run = GraphRun(specs, store, mode)
    values = run.forward(inputs)
    loss, seed_grads, terms = loss_fn(values)
    param_grads, input_grads = run.backward(seed_grads)
    for spec in specs:
        if spec.kind == "conv":
            param_grads.setdefault(f"{spec.name}.weight",
                                   np.zeros_like(store.get(f"{spec.name}.weight").value))
            if spec.bias:
                param_grads.setdefault(f"{spec.name}.bias",
                                       np.zeros_like(store.get(f"{spec.name}.bias").value))
        elif spec.kind == "bn":
            for p in ("gamma", "beta"):
                param_grads.setdefault(f"{spec.name}.{p}",
                                       np.zeros_like(store.get(f"{spec.name}.{p}").value))
    return ForwardBackward(loss, terms, param_grads, input_grads, values)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    """Momentum SGD with polynomial learning-rate decay.

    The step for each trainable entry is
        g' = grad + weight_decay * value   (decay only where the entry opts in)
        v' = momentum * v + g'
        value -= lr * v'
    """

    base_lr: float = 2.5e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    max_iter: int = 1000
    decay_all: bool = False

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ArgumentError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ArgumentError("weight_decay must be non-negative")
        if self.power <= 0:
            raise ArgumentError("power must be positive")
        if self.max_iter < 1:
            raise ArgumentError("max_iter must be >= 1")


def poly_lr(cfg: SgdConfig, iteration: int) -> float:
    """base_lr * (1 - iteration / max_iter) ** power, defined on [0, max_iter]."""
    if iteration < 0 or iteration > cfg.max_iter:
        raise ArgumentError(f"iteration {iteration} outside [0, {cfg.max_iter}]")
    return cfg.base_lr * (1.0 - iteration / cfg.max_iter) ** cfg.power


def sgd_step(store: ParamStore, grads: dict, lr: float, cfg: SgdConfig) -> None:
    """One in-place update over all trainable entries, in insertion order."""
    if lr < 0:
        raise ArgumentError("lr must be non-negative")
    for name, entry in store.items():
        if not entry.trainable:
            continue
        if name not in grads:
            raise ConsistencyError(f"missing gradient for trainable parameter {name!r}")
        g = grads[name].astype(np.float32, copy=True)
        if g.shape != entry.value.shape:
            raise ConsistencyError(f"gradient shape mismatch for {name!r}")
        if cfg.weight_decay != 0.0 and (entry.decay or cfg.decay_all):
            g += np.float32(cfg.weight_decay) * entry.value
        if entry.momentum is None:
            entry.momentum = np.zeros_like(entry.value)
        entry.momentum *= np.float32(cfg.momentum)
        entry.momentum += g
        entry.value -= np.float32(lr) * entry.momentum


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"BSNT"
_VERSION = 1
_DTYPE_F32 = 0


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    iteration: int
    config_hash: int


def save_checkpoint(store: ParamStore, path, iteration: int = 0, config_hash: int = 0) -> None:
    """Binary dump: magic, version, tensor table, iteration + config hash.

    Layout (all little-endian): "BSNT", u16 version, u32 tensor count, then
    per tensor u16 name length, UTF-8 name, u8 dtype tag (0 = float32),
    u8 rank, u32 dims, raw payload; trailing u64 iteration and u64 hash.
    """
    entries = list(store.items())
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HI", _VERSION, len(entries)))
        for name, entry in entries:
            raw = name.encode("utf-8")
            value = np.ascontiguousarray(entry.value, dtype="<f4")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", _DTYPE_F32, value.ndim))
            f.write(struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(value.tobytes())
        f.write(struct.pack("<QQ", iteration, config_hash & ((1 << 64) - 1)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()

    def need(offset, count, what):
        if offset + count > len(blob):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=offset)
        return blob[offset : offset + count]

    if need(0, 4, "magic") != _MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}", offset=0)
    version, count = struct.unpack("<HI", need(4, 6, "header"))
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = 10
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(pos, 2, "name length"))
        pos += 2
        name = need(pos, name_len, "name").decode("utf-8")
        pos += name_len
        dtype_tag, rank = struct.unpack("<BB", need(pos, 2, "dtype/rank"))
        pos += 2
        if dtype_tag != _DTYPE_F32:
            raise FormatError(f"unknown dtype tag {dtype_tag} for {name!r}", offset=pos - 2)
        dims = struct.unpack(f"<{rank}I", need(pos, 4 * rank, "dims"))
        pos += 4 * rank
        numel = int(np.prod(dims)) if rank else 1
        payload = need(pos, 4 * numel, f"payload of {name!r}")
        pos += 4 * numel
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    iteration, config_hash = struct.unpack("<QQ", need(pos, 16, "trailer"))
    return Checkpoint(tensors=tensors, iteration=iteration, config_hash=config_hash)


def restore_into(store: ParamStore, ckpt: Checkpoint, permissive: bool = False) -> list[str]:
    """Copy checkpoint tensors into a prepared store.

    Every store entry must be present in the file. Names in the file that the
    store does not know are an error unless permissive, in which case they are
    returned as warnings.
    """
    warnings = []
    for name, _entry in store.items():
        if name not in ckpt.tensors:
            raise ConsistencyError(f"checkpoint lacks parameter {name!r}")
    for name, value in ckpt.tensors.items():
        if name not in store:
            msg = f"checkpoint tensor {name!r} has no matching parameter; skipped"
            if not permissive:
                raise ConsistencyError(msg)
            warnings.append(msg)
            continue
        entry = store.get(name)
        if entry.value.shape != value.shape:
            raise ConsistencyError(
                f"checkpoint tensor {name!r} shape {value.shape} does not match "
                f"{entry.value.shape}"
            )
        entry.value[...] = value
    return warnings
