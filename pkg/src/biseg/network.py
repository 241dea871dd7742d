"""Two-path segmentation network.

A shallow spatial path (three stride-2 conv+BN+ReLU layers) keeps detail at
stride 8 while a deep context path (the separable backbone plus a top-down
decoder) supplies semantics. Stage features pass through channel-attention
refinement, the deepest feature receives a pooled global context, both paths
meet in a fusion block at stride 8, and a 3x3+1x1 head produces logits.
Training adds 1x1 auxiliary heads on the stride-16/32 taps; the joint loss
is main + aux_weight * (sum of aux terms).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import graph, ops
from .backbone import BackboneConfig, GraphBuilder, backbone_specs, check_input_extents
from .errors import ArgumentError, DataError, ShapeError
from .graph import LayerSpec, ParamStore
from .tensor import Rng, Tensor

_FUSIONS = ("ffm", "sum")
_GATES = ("sigmoid", "relu")
_CONTEXT_FUSIONS = ("ushape8s", "ushape4s")
_AUX_TAPS = ("refined", "raw")
_LOSS_MODES = ("plain", "bootstrap")


@dataclass(frozen=True)
class NetConfig:
    """Architecture and loss knobs for the full network."""

    num_classes: int = 19
    sp_channels: tuple[int, int, int] = (64, 64, 128)
    cp_channels: int = 128
    ffm_channels: int = 256
    ffm_reduction: int = 4
    head_channels: int = 64
    use_spatial_path: bool = True
    fusion: str = "ffm"
    use_global_pool: bool = True
    use_arm: bool = True
    arm_gate: str = "sigmoid"
    context_fusion: str = "ushape8s"
    aux_weight: float = 1.0
    aux_tap: str = "refined"
    loss_mode: str = "plain"
    bootstrap_keep: float = 1.0 / 16.0
    bootstrap_min_kept: int = 256
    loss_at_full: bool = False
    ignore_index: int = 255
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ArgumentError("num_classes must be at least 2")
        if len(self.sp_channels) != 3 or any(c < 1 for c in self.sp_channels):
            raise ArgumentError("sp_channels must be three positive widths")
        if self.cp_channels < 1 or self.ffm_channels < 1 or self.head_channels < 1:
            raise ArgumentError("channel widths must be positive")
        if self.ffm_reduction < 1 or self.ffm_channels % self.ffm_reduction:
            raise ArgumentError("ffm_reduction must divide ffm_channels")
        if self.fusion not in _FUSIONS:
            raise ArgumentError(f"fusion must be one of {_FUSIONS}")
        if self.arm_gate not in _GATES:
            raise ArgumentError(f"arm_gate must be one of {_GATES}")
        if self.context_fusion not in _CONTEXT_FUSIONS:
            raise ArgumentError(f"context_fusion must be one of {_CONTEXT_FUSIONS}")
        if self.aux_tap not in _AUX_TAPS:
            raise ArgumentError(f"aux_tap must be one of {_AUX_TAPS}")
        if self.loss_mode not in _LOSS_MODES:
            raise ArgumentError(f"loss_mode must be one of {_LOSS_MODES}")
        if self.aux_weight < 0:
            raise ArgumentError("aux_weight must be non-negative")
        if not 0 <= self.ignore_index <= 255:
            raise ArgumentError("ignore_index must fit in a byte")


@dataclass(frozen=True)
class GraphDef:
    """Built topology plus the value names other code needs to find."""

    specs: tuple[LayerSpec, ...]
    input: str
    main_logits: str
    aux_logits: tuple[str, ...]
    fused: str
    attention: tuple[tuple[str, str], ...]  # (label, value name) per gate


@dataclass
class ForwardArtifacts:
    """Outputs of one network forward pass."""

    main_logits: Tensor
    aux_logits: list[Tensor]
    fused_feature: Tensor
    attention_vectors: dict[str, Tensor]


# ---------------------------------------------------------------------------
# Sub-graph builders
# ---------------------------------------------------------------------------


def spatial_path_specs(g: GraphBuilder, cfg: NetConfig, x: str) -> str:
    """Three stride-2 conv+BN+ReLU layers: stride 8, detail-preserving."""
    c1, c2, c3 = cfg.sp_channels
    y = g.conv_bn_relu("sp.l1", x, cfg.backbone.input_channels, c1, k=3, s=2)  # 1/2
    y = g.conv_bn_relu("sp.l2", y, c1, c2, k=3, s=2)                           # 1/4
    y = g.conv_bn_relu("sp.l3", y, c2, c3, k=3, s=2)                           # 1/8
    return y


def arm_specs(g: GraphBuilder, name: str, feature: str, channels: int,
              gate: str = "sigmoid") -> tuple[str, str]:
    """Channel-attention refinement: feature * gate(BN(1x1(pooled feature))).

    Returns (refined value name, gate value name). The gate squashes with a
    sigmoid by default; "relu" is available for the unclamped variant.
    """
    pooled = g.gap(f"{name}.pool", feature)
    a = g.conv(f"{name}.conv", pooled, channels, channels, k=1, p=0)
    a = g.bn(f"{name}.bn", a, channels)
    if gate == "sigmoid":
        a = g.sigmoid(f"{name}.gate", a)
    else:
        a = g.relu(f"{name}.gate", a)
    refined = g.mul(f"{name}.apply", feature, a)
    return refined, a


def global_context_specs(g: GraphBuilder, name: str, feature: str, channels: int) -> str:
    """Pooled global context: GAP -> 1x1 conv -> BN -> ReLU, shape (n,c,1,1)."""
    pooled = g.gap(f"{name}.pool", feature)
    y = g.conv(f"{name}.conv", pooled, channels, channels, k=1, p=0)
    y = g.bn(f"{name}.bn", y, channels)
    return g.relu(f"{name}.relu", y)


def context_path_specs(g: GraphBuilder, cfg: NetConfig, x: str):
    """Backbone plus top-down decoder; output sits at stride 8.

    Returns (cp output name, tap16 name, tap32 name, attention list).
    ushape8s folds the stride-16/32 taps only; ushape4s additionally folds
    the stride-8 tap, upsamples to stride 4, and realigns to stride 8 with a
    stride-2 conv (slower, for the decoder-depth comparison).
    """
    bb_specs, taps = backbone_specs(cfg.backbone, prefix="cp.", input_name=x)
    g.specs.extend(bb_specs)
    c8, c16, c32 = cfg.backbone.stage_channels
    attention = []

    feat32 = taps[32]
    refined32 = feat32
    if cfg.use_arm:
        refined32, gate32 = arm_specs(g, "cp.arm32", feat32, c32, cfg.arm_gate)
        attention.append(("arm32", gate32))
    if cfg.use_global_pool:
        ctx = global_context_specs(g, "cp.gp", feat32, c32)
        refined32 = g.add("cp.gp.apply", refined32, ctx)

    refined16 = taps[16]
    if cfg.use_arm:
        refined16, gate16 = arm_specs(g, "cp.arm16", taps[16], c16, cfg.arm_gate)
        attention.append(("arm16", gate16))

    cpw = cfg.cp_channels
    p32 = g.conv_bn_relu("cp.proj32", refined32, c32, cpw, k=1)
    p16 = g.conv_bn_relu("cp.proj16", refined16, c16, cpw, k=1)
    up32 = g.upsample("cp.up32", p32, 2)
    merged16 = g.add("cp.merge16", p16, up32)
    refined = g.conv_bn_relu("cp.refine16", merged16, cpw, cpw, k=3)
    out8 = g.upsample("cp.up16", refined, 2)

    if cfg.context_fusion == "ushape4s":
        p8 = g.conv_bn_relu("cp.proj8", taps[8], c8, cpw, k=1)
        merged8 = g.add("cp.merge8", p8, out8)
        refined8 = g.conv_bn_relu("cp.refine8", merged8, cpw, cpw, k=3)
        out4 = g.upsample("cp.up8", refined8, 2)
        out8 = g.conv_bn_relu("cp.align8", out4, cpw, cpw, k=3, s=2)

    tap16 = refined16 if cfg.aux_tap == "refined" else taps[16]
    tap32 = refined32 if cfg.aux_tap == "refined" else taps[32]
    return out8, tap16, tap32, attention


def ffm_specs(g: GraphBuilder, cfg: NetConfig, sp: str, cp: str,
              sp_c: int, cp_c: int) -> str:
    """Feature fusion: concat -> 1x1+BN+ReLU, then a pooled channel gate.

    f = ReLU(BN(1x1(concat))); w = sigmoid(1x1(ReLU(1x1(GAP(f)))));
    output = f + f * w.
    """
    f = g.concat("ffm.cat", sp, cp)
    f = g.conv_bn_relu("ffm.fuse", f, sp_c + cp_c, cfg.ffm_channels, k=1)
    mid = cfg.ffm_channels // cfg.ffm_reduction
    w = g.gap("ffm.pool", f)
    w = g.conv("ffm.gate1", w, cfg.ffm_channels, mid, k=1, p=0, bias=True)
    w = g.relu("ffm.gate1_relu", w)
    w = g.conv("ffm.gate2", w, mid, cfg.ffm_channels, k=1, p=0, bias=True)
    w = g.sigmoid("ffm.gate", w)
    scaled = g.mul("ffm.scale", f, w)
    return g.add("ffm.out", f, scaled)


def sum_fusion_specs(g: GraphBuilder, cfg: NetConfig, sp: str, cp: str,
                     sp_c: int, cp_c: int) -> str:
    """Plain fusion baseline: project both paths to ffm_channels and add."""
    a = g.conv("fuse.sp_proj", sp, sp_c, cfg.ffm_channels, k=1, p=0)
    a = g.bn("fuse.sp_bn", a, cfg.ffm_channels)
    b = g.conv("fuse.cp_proj", cp, cp_c, cfg.ffm_channels, k=1, p=0)
    b = g.bn("fuse.cp_bn", b, cfg.ffm_channels)
    y = g.add("fuse.add", a, b)
    return g.relu("fuse.relu", y)


def build_network(cfg: NetConfig, train: bool = True) -> GraphDef:
    """Assemble the full graph. Aux heads exist only in training graphs."""
    g = GraphBuilder()
    x = "x"
    cp_out, tap16, tap32, attention = context_path_specs(g, cfg, x)
    cp_c = cfg.cp_channels
    fused = cp_out
    fused_c = cp_c
    if cfg.use_spatial_path:
        sp_out = spatial_path_specs(g, cfg, x)
        sp_c = cfg.sp_channels[2]
        if cfg.fusion == "ffm":
            fused = ffm_specs(g, cfg, sp_out, cp_out, sp_c, cp_c)
        else:
            fused = sum_fusion_specs(g, cfg, sp_out, cp_out, sp_c, cp_c)
        fused_c = cfg.ffm_channels
    h = g.conv_bn_relu("head.mix", fused, fused_c, cfg.head_channels, k=3)
    main = g.conv("head.cls", h, cfg.head_channels, cfg.num_classes, k=1, p=0, bias=True)
    aux = []
    if train:
        c16, c32 = cfg.backbone.stage_channels[1], cfg.backbone.stage_channels[2]
        aux.append(g.conv("aux16.cls", tap16, c16, cfg.num_classes, k=1, p=0, bias=True))
        aux.append(g.conv("aux32.cls", tap32, c32, cfg.num_classes, k=1, p=0, bias=True))
    return GraphDef(
        specs=tuple(g.specs),
        input=x,
        main_logits=main,
        aux_logits=tuple(aux),
        fused=fused,
        attention=tuple(attention),
    )


def init_network_params(cfg: NetConfig, store: ParamStore, rng: Rng) -> None:
    graph.init_params(build_network(cfg, train=True).specs, store, rng)


def param_count(cfg: NetConfig, trainable_only: bool = True) -> int:
    """Trainable parameter count of the training-time topology."""
    store = ParamStore()
    init_network_params(cfg, store, Rng(0))
    return store.param_count(trainable_only=trainable_only)


# ---------------------------------------------------------------------------
# Functional wrappers
# ---------------------------------------------------------------------------


def _check_net_input(x: Tensor, cfg: NetConfig):
    n, c, h, w = x.data.shape
    if c != cfg.backbone.input_channels:
        raise ShapeError(f"network expects {cfg.backbone.input_channels} channels, got {c}")
    check_input_extents(h, w)


def network_forward(x: Tensor, store: ParamStore, cfg: NetConfig,
                    mode: str = "infer") -> ForwardArtifacts:
    """Run the network; aux logits are produced only in train mode."""
    _check_net_input(x, cfg)
    net = build_network(cfg, train=(mode == "train"))
    values = graph.run_forward(net.specs, store, {net.input: x.data}, mode=mode)
    return ForwardArtifacts(
        main_logits=Tensor(values[net.main_logits]),
        aux_logits=[Tensor(values[name]) for name in net.aux_logits],
        fused_feature=Tensor(values[net.fused]),
        attention_vectors={label: Tensor(values[name]) for label, name in net.attention},
    )


def spatial_path(x: Tensor, store: ParamStore, cfg: NetConfig,
                 mode: str = "infer", rng: Rng | None = None) -> Tensor:
    _check_net_input(x, cfg)
    g = GraphBuilder()
    out = spatial_path_specs(g, cfg, "x")
    if rng is not None:
        graph.init_params(g.specs, store, rng)
    return Tensor(graph.run_forward(g.specs, store, {"x": x.data}, mode=mode)[out])


def attention_refine(feature: Tensor, store: ParamStore, name: str,
                     gate: str = "sigmoid", mode: str = "infer",
                     rng: Rng | None = None) -> tuple[Tensor, Tensor]:
    """Standalone refinement block; returns (refined, gate vector)."""
    c = feature.data.shape[1]
    g = GraphBuilder()
    refined, gate_name = arm_specs(g, name, "feat", c, gate)
    if rng is not None:
        graph.init_params(g.specs, store, rng)
    values = graph.run_forward(g.specs, store, {"feat": feature.data}, mode=mode)
    return Tensor(values[refined]), Tensor(values[gate_name])


def context_path(x: Tensor, store: ParamStore, cfg: NetConfig,
                 mode: str = "infer", rng: Rng | None = None):
    """Standalone context path; returns (stride-8 feature, tap16, tap32)."""
    _check_net_input(x, cfg)
    g = GraphBuilder()
    out, tap16, tap32, _ = context_path_specs(g, cfg, "x")
    if rng is not None:
        graph.init_params(g.specs, store, rng)
    values = graph.run_forward(g.specs, store, {"x": x.data}, mode=mode)
    return Tensor(values[out]), Tensor(values[tap16]), Tensor(values[tap32])


def feature_fusion(sp: Tensor, cp: Tensor, store: ParamStore, cfg: NetConfig,
                   mode: str = "infer", rng: Rng | None = None) -> Tensor:
    g = GraphBuilder()
    out = ffm_specs(g, cfg, "sp", "cp", sp.data.shape[1], cp.data.shape[1])
    if rng is not None:
        graph.init_params(g.specs, store, rng)
    values = graph.run_forward(g.specs, store, {"sp": sp.data, "cp": cp.data}, mode=mode)
    return Tensor(values[out])


# ---------------------------------------------------------------------------
# Loss and prediction
# ---------------------------------------------------------------------------


@dataclass
class JointLoss:
    total: float
    main: float
    aux: tuple[float, ...]
    seed_grads: dict  # value name -> grad array
    all_ignored: bool


def _single_ce(logits: np.ndarray, labels: np.ndarray, cfg: NetConfig) -> ops.CeLoss:
    if cfg.loss_mode == "bootstrap":
        return ops.bootstrap_ce_loss(
            logits, labels,
            keep_fraction=cfg.bootstrap_keep,
            min_kept=cfg.bootstrap_min_kept,
            ignore_index=cfg.ignore_index,
        )
    return ops.softmax_ce_loss(logits, labels, ignore_index=cfg.ignore_index)


def joint_loss_on_values(values: dict, net: GraphDef, labels: np.ndarray,
                         cfg: NetConfig):
    """Joint loss over the value dict of a training forward pass.

    Labels arrive at input resolution. The main term runs at stride 8
    against center-picked labels, or at full resolution through a bilinear
    x8 upsample when loss_at_full is set. Aux terms always run at their tap
    resolutions. Gradients are scaled by aux_weight, so a zero weight yields
    exactly zero aux gradients.
    """
    main = values[net.main_logits]
    n, _, h8, w8 = main.shape
    if labels.shape != (n, h8 * 8, w8 * 8):
        raise ShapeError(
            f"labels {labels.shape} do not match logits at stride 8 ({n},{h8},{w8})"
        )
    if cfg.loss_at_full:
        up = ops.bilinear_upsample(main, 8)
        ce = _single_ce(up, labels, cfg)
        main_grad = ops.bilinear_upsample_backward(main.shape, 8, ce.grad)
    else:
        ce = _single_ce(main, ops.nearest_downsample_labels(labels, 8), cfg)
        main_grad = ce.grad
    seeds = {net.main_logits: main_grad}
    aux_losses = []
    all_ignored = ce.all_ignored
    total = ce.loss
    for name in net.aux_logits:
        logits = values[name]
        factor = (h8 * 8) // logits.shape[2]
        aux_ce = _single_ce(logits, ops.nearest_downsample_labels(labels, factor), cfg)
        aux_losses.append(aux_ce.loss)
        seeds[name] = cfg.aux_weight * aux_ce.grad
        total = total + cfg.aux_weight * aux_ce.loss
        all_ignored = all_ignored and aux_ce.all_ignored
    return JointLoss(
        total=float(total), main=float(ce.loss), aux=tuple(aux_losses),
        seed_grads=seeds, all_ignored=all_ignored,
    )


def joint_loss(artifacts: ForwardArtifacts, labels: np.ndarray, cfg: NetConfig) -> JointLoss:
    """Joint loss over forward artifacts (grads keyed main/aux0/aux1)."""
    net_like = GraphDef(
        specs=(), input="x", main_logits="main",
        aux_logits=tuple(f"aux{i}" for i in range(len(artifacts.aux_logits))),
        fused="fused", attention=(),
    )
    values = {"main": artifacts.main_logits.data}
    for i, t in enumerate(artifacts.aux_logits):
        values[f"aux{i}"] = t.data
    return joint_loss_on_values(values, net_like, labels, cfg)


def predict_full_res(main_logits: Tensor, input_h: int, input_w: int) -> np.ndarray:
    """Bilinear x8 upsample then per-pixel argmax (ties pick the lowest id)."""
    n, _, h8, w8 = main_logits.data.shape
    if (h8 * 8, w8 * 8) != (input_h, input_w):
        raise ShapeError(
            f"logits {main_logits.shape} do not upsample to ({input_h},{input_w})"
        )
    up = ops.bilinear_upsample(main_logits.data, 8)
    return np.argmax(up, axis=1).astype(np.int32)


# ---------------------------------------------------------------------------
# Component ablations
# ---------------------------------------------------------------------------


def ablation_configs(base: NetConfig) -> dict[str, NetConfig]:
    """The six-row component matrix, ordered by growing topology.

    Rows: context path alone; + spatial path with sum fusion; fusion block
    instead of sum; + global context; + attention refinement (without the
    global context); everything together.
    """
    rows = {
        "cp": replace(base, use_spatial_path=False, use_global_pool=False, use_arm=False),
        "cp_sp_sum": replace(base, use_spatial_path=True, fusion="sum",
                             use_global_pool=False, use_arm=False),
        "cp_sp_ffm": replace(base, use_spatial_path=True, fusion="ffm",
                             use_global_pool=False, use_arm=False),
        "cp_sp_ffm_gp": replace(base, use_spatial_path=True, fusion="ffm",
                                use_global_pool=True, use_arm=False),
        "cp_sp_ffm_arm": replace(base, use_spatial_path=True, fusion="ffm",
                                 use_global_pool=False, use_arm=True),
        "full": replace(base, use_spatial_path=True, fusion="ffm",
                        use_global_pool=True, use_arm=True),
    }
    return rows
