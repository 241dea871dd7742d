"""Lightweight separable-convolution backbone with stride-8/16/32 taps.

Layout: a stride-4 stem of two 3x3 stride-2 convolutions, then three stages.
Each stage opens with a stride-2 block and continues with stride-1 residual
blocks; a block is depthwise 3x3 -> BN -> ReLU -> pointwise 1x1 -> BN plus a
shortcut (identity, or a 1x1 stride-2 projection with BN when the block
changes resolution or width), joined by addition and a final ReLU.

The default configuration (stages 64/128/728 with 4/8/4 blocks) keeps the
count of weighted layers near 39 while placing most parameters at stride 32
where they are cheap to evaluate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph, ops
from .errors import ArgumentError, ShapeError
from .graph import LayerSpec, ParamStore
from .tensor import Rng, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 8
    stage_channels: tuple[int, int, int] = (64, 128, 728)
    blocks_per_stage: tuple[int, int, int] = (4, 8, 4)
    input_channels: int = 3

    def __post_init__(self):
        if self.stem_channels < 1 or self.input_channels < 1:
            raise ArgumentError("channel counts must be positive")
        if len(self.stage_channels) != 3 or len(self.blocks_per_stage) != 3:
            raise ArgumentError("backbone has exactly three stages")
        if any(c < 1 for c in self.stage_channels):
            raise ArgumentError("stage channels must be positive")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ArgumentError("every stage needs at least one block")

    @property
    def stem_out(self) -> int:
        return 2 * self.stem_channels


@dataclass
class StageOutputs:
    """Features at strides 8, 16, and 32 of the input resolution."""

    feat8: Tensor
    feat16: Tensor
    feat32: Tensor


class GraphBuilder:
    """Incremental LayerSpec list with value-name plumbing."""

    def __init__(self):
        self.specs: list[LayerSpec] = []

    def _emit(self, spec: LayerSpec) -> str:
        self.specs.append(spec)
        return spec.output

    def conv(self, name, x, c_in, c_out, k=3, s=1, p=None, groups=1, bias=False):
        if p is None:
            p = k // 2
        return self._emit(LayerSpec(
            kind="conv", name=name, inputs=(x,), output=name,
            in_channels=c_in, out_channels=c_out, kernel=k, stride=s,
            padding=p, groups=groups, bias=bias,
        ))

    def bn(self, name, x, c):
        return self._emit(LayerSpec(kind="bn", name=name, inputs=(x,), output=name,
                                    in_channels=c, out_channels=c))

    def relu(self, name, x):
        return self._emit(LayerSpec(kind="relu", name=name, inputs=(x,), output=name))

    def sigmoid(self, name, x):
        return self._emit(LayerSpec(kind="sigmoid", name=name, inputs=(x,), output=name))

    def gap(self, name, x):
        return self._emit(LayerSpec(kind="gap", name=name, inputs=(x,), output=name))

    def upsample(self, name, x, factor):
        return self._emit(LayerSpec(kind="upsample", name=name, inputs=(x,), output=name,
                                    factor=factor))

    def concat(self, name, a, b):
        return self._emit(LayerSpec(kind="concat", name=name, inputs=(a, b), output=name))

    def add(self, name, a, b):
        return self._emit(LayerSpec(kind="add", name=name, inputs=(a, b), output=name))

    def mul(self, name, a, b):
        return self._emit(LayerSpec(kind="mul", name=name, inputs=(a, b), output=name))

    def conv_bn_relu(self, name, x, c_in, c_out, k=3, s=1, groups=1):
        y = self.conv(f"{name}.conv", x, c_in, c_out, k=k, s=s, groups=groups)
        y = self.bn(f"{name}.bn", y, c_out)
        return self.relu(f"{name}.relu", y)


def _sep_block(g: GraphBuilder, name: str, x: str, c_in: int, c_out: int, stride: int) -> str:
    d = g.conv(f"{name}.dw", x, c_in, c_in, k=3, s=stride, groups=c_in)
    d = g.bn(f"{name}.dw_bn", d, c_in)
    d = g.relu(f"{name}.dw_relu", d)
    m = g.conv(f"{name}.pw", d, c_in, c_out, k=1)
    m = g.bn(f"{name}.pw_bn", m, c_out)
    if stride != 1 or c_in != c_out:
        s = g.conv(f"{name}.proj", x, c_in, c_out, k=1, s=stride, p=0)
        s = g.bn(f"{name}.proj_bn", s, c_out)
    else:
        s = x
    y = g.add(f"{name}.add", m, s)
    return g.relu(f"{name}.relu", y)


def backbone_specs(cfg: BackboneConfig, prefix: str = "cp.", input_name: str = "x"):
    """Build the backbone graph. Returns (specs, taps) where taps maps
    stride 8/16/32 to the producing value names."""
    g = GraphBuilder()
    stem = cfg.stem_channels
    y = g.conv_bn_relu(f"{prefix}stem1", input_name, cfg.input_channels, stem, k=3, s=2)
    y = g.conv_bn_relu(f"{prefix}stem2", y, stem, cfg.stem_out, k=3, s=2)
    taps = {}
    c_in = cfg.stem_out
    for idx, (c_out, blocks) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage), start=1):
        y = _sep_block(g, f"{prefix}s{idx}.b1", y, c_in, c_out, stride=2)
        for b in range(2, blocks + 1):
            y = _sep_block(g, f"{prefix}s{idx}.b{b}", y, c_out, c_out, stride=1)
        taps[8 * 2 ** (idx - 1)] = y
        c_in = c_out
    return g.specs, taps


def check_input_extents(h: int, w: int) -> None:
    """The backbone needs both spatial extents to be multiples of 32."""
    if h % 32:
        raise ShapeError(f"input height {h} is not a multiple of 32")
    if w % 32:
        raise ShapeError(f"input width {w} is not a multiple of 32")


def init_backbone_params(cfg: BackboneConfig, store: ParamStore, rng: Rng,
                         prefix: str = "cp.") -> None:
    specs, _ = backbone_specs(cfg, prefix=prefix)
    graph.init_params(specs, store, rng)


def backbone_forward(x: Tensor, cfg: BackboneConfig, store: ParamStore,
                     mode: str = "infer") -> StageOutputs:
    n, c, h, w = x.data.shape
    if c != cfg.input_channels:
        raise ShapeError(f"backbone expects {cfg.input_channels} input channels, got {c}")
    check_input_extents(h, w)
    specs, taps = backbone_specs(cfg)
    values = graph.run_forward(specs, store, {"x": x.data}, mode=mode)
    return StageOutputs(
        feat8=Tensor(values[taps[8]]),
        feat16=Tensor(values[taps[16]]),
        feat32=Tensor(values[taps[32]]),
    )


# ---------------------------------------------------------------------------
# Receptive fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _RfState:
    jump: int      # distance between neighboring output centers, in input px
    rf: int        # receptive field extent, in input px
    start: float   # center of output index 0, in input coordinates


def rf_walk(specs, input_names) -> dict[str, _RfState]:
    """Receptive-field recurrence over a spec list.

    conv: rf' = rf + (k - 1) * jump, jump' = jump * stride; pointwise ops
    keep the state; joins take the branch maximum. Only kinds that appear in
    tap-producing backbones are supported.
    """
    states = {name: _RfState(1, 1, 0.0) for name in input_names}
    for spec in specs:
        a = states[spec.inputs[0]]
        if spec.kind == "conv":
            k, s, p = spec.kernel, spec.stride, spec.padding
            states[spec.output] = _RfState(
                jump=a.jump * s,
                rf=a.rf + (k - 1) * a.jump,
                start=a.start + ((k - 1) / 2.0 - p) * a.jump,
            )
        elif spec.kind in ("bn", "relu", "sigmoid"):
            states[spec.output] = a
        elif spec.kind in ("add", "mul", "concat"):
            b = states[spec.inputs[1]]
            if a.jump != b.jump:
                raise ShapeError(f"layer {spec.name!r} joins branches of unequal stride")
            states[spec.output] = _RfState(a.jump, max(a.rf, b.rf), a.start)
        else:
            raise ArgumentError(f"receptive-field walk does not support kind {spec.kind!r}")
    return states


def receptive_field(cfg: BackboneConfig) -> dict[int, int]:
    """Theoretical receptive field (pixels) of each stage tap."""
    specs, taps = backbone_specs(cfg)
    states = rf_walk(specs, ("x",))
    return {stride: states[name].rf for stride, name in taps.items()}


def rf_center_of(cfg: BackboneConfig, stride: int, index_h: int, index_w: int):
    """Input-space center and state for one output location of a tap."""
    specs, taps = backbone_specs(cfg)
    st = rf_walk(specs, ("x",))[taps[stride]]
    return (st.start + index_h * st.jump, st.start + index_w * st.jump), st
