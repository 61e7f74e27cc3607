"""Concrete layer graphs for genotypes: wiring, shapes, parameter accounting.

`instantiate` expands a genotype into a flat list of primitive nodes (convs,
norms, activations, pooling, fusion adds) wired as a DAG.  The pyramid runs
encoders top-down (stride-2 entry per deeper scale), then decodes bottom-up:
the refined output of scale s+1 is upsampled, projected to the encoder
channel width of scale s when they differ, add-fused with that encoder
output, and decoded.  The scale-1 refine output feeds the prediction head.

`count_params_spec` computes the exact learnable-parameter count of a
genotype from closed forms alone, without building the node graph; the
tensor engine independently allocates buffers from the node list, and the
two tallies must agree exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .search_space import (
    BlockKind,
    BlockSpec,
    ConvKind,
    HeadKind,
    LayerSpec,
    NetworkSpec,
    SkipOp,
    block_template,
)


class ShapeError(ValueError):
    """Input spatial size incompatible with the pyramid depth."""


class NodeKind(str, Enum):
    INPUT = "input"
    CONV = "conv"
    NORM = "norm"
    RELU = "relu"
    SIGMOID = "sigmoid"
    GAP = "gap"
    MUL = "mul"
    ADD = "add"
    AVGPOOL2 = "avgpool2"
    UPSAMPLE2 = "upsample2"
    PIXELSHUFFLE = "pixelshuffle"


@dataclass(frozen=True)
class ParamSlot:
    name: str
    shape: tuple[int, ...]

    @property
    def count(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class LayerNode:
    """One primitive op with resolved channels and spatial bookkeeping.

    Spatial size at input resolution (H, W) is (H*up_factor/scale_div,
    W*up_factor/scale_div), except `fixed_spatial` nodes (the squeeze branch)
    which are always 1x1.
    """

    index: int
    name: str
    kind: NodeKind
    inputs: tuple[int, ...]
    out_channels: int
    scale_div: int = 1
    up_factor: int = 1
    fixed_spatial: bool = False
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    groups: int = 1
    factor: int = 1
    params: tuple[ParamSlot, ...] = ()

    @property
    def param_count(self) -> int:
        return sum(slot.count for slot in self.params)

    def out_shape(self, height: int, width: int) -> tuple[int, int, int]:
        if self.fixed_spatial:
            return (self.out_channels, 1, 1)
        return (
            self.out_channels,
            height * self.up_factor // self.scale_div,
            width * self.up_factor // self.scale_div,
        )


@dataclass
class GraphPlan:
    """Instantiated network: ordered nodes, single input, single output."""

    spec: NetworkSpec
    input_hw: tuple[int, int]
    nodes: tuple[LayerNode, ...]
    output_index: int
    total_params: int = field(init=False)
    relu_unit_count: int = field(init=False)

    def __post_init__(self):
        self.total_params = sum(node.param_count for node in self.nodes)
        self.relu_unit_count = relu_units(self, self.input_hw)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.spec.in_channels, self.input_hw[0], self.input_hw[1])

    def output_shape(self, height: int | None = None, width: int | None = None):
        h = self.input_hw[0] if height is None else height
        w = self.input_hw[1] if width is None else width
        return self.nodes[self.output_index].out_shape(h, w)


class _Builder:
    def __init__(self):
        self.nodes: list[LayerNode] = []

    def add(self, kind, name, inputs, out_channels, scale_div, **kw) -> int:
        node = LayerNode(
            index=len(self.nodes),
            name=name,
            kind=kind,
            inputs=tuple(inputs),
            out_channels=out_channels,
            scale_div=scale_div,
            **kw,
        )
        self.nodes.append(node)
        return node.index

    def conv(self, name, x, cin, cout, kernel, stride, groups, div,
             fixed=False, up=1) -> int:
        kh, kw = kernel
        weight = ParamSlot("weight", (cout, cin // groups, kh, kw))
        bias = ParamSlot("bias", (cout,))
        return self.add(
            NodeKind.CONV, name, (x,), cout, div,
            kernel=kernel, stride=stride, groups=groups,
            params=(weight, bias), fixed_spatial=fixed, up_factor=up,
        )

    def norm(self, name, x, channels, div) -> int:
        params = (ParamSlot("gamma", (channels,)), ParamSlot("beta", (channels,)))
        return self.add(NodeKind.NORM, name, (x,), channels, div, params=params)

    def relu(self, name, x, channels, div, fixed=False) -> int:
        return self.add(NodeKind.RELU, name, (x,), channels, div, fixed_spatial=fixed)


def se_hidden(channels: int, ratio: float) -> int:
    return int(math.ceil(ratio * channels))


def _add_layer(b: _Builder, prefix: str, layer: LayerSpec, cin: int,
               stride: int, x: int, div: int) -> int:
    """Expand one searched layer into primitive nodes; returns the output node."""
    op = layer.conv_op
    k = layer.kernel_size
    f = layer.out_channels
    layer_in = x

    if op.kind is ConvKind.VANILLA:
        x = b.conv(f"{prefix}.conv", x, cin, f, (k, k), (stride, stride), 1, div)
        x = b.norm(f"{prefix}.norm", x, f, div)
        x = b.relu(f"{prefix}.relu", x, f, div)
    elif op.kind is ConvKind.DWSEP:
        x = b.conv(f"{prefix}.dw", x, cin, cin, (k, k), (stride, stride), cin, div)
        x = b.norm(f"{prefix}.dw_norm", x, cin, div)
        x = b.relu(f"{prefix}.dw_relu", x, cin, div)
        x = b.conv(f"{prefix}.pw", x, cin, f, (1, 1), (1, 1), 1, div)
        x = b.norm(f"{prefix}.pw_norm", x, f, div)
        x = b.relu(f"{prefix}.pw_relu", x, f, div)
    elif op.kind is ConvKind.IBCONV:
        hidden = op.expansion * cin
        x = b.conv(f"{prefix}.expand", x, cin, hidden, (1, 1), (1, 1), 1,
                   div if stride == 1 else div // 2)
        x = b.norm(f"{prefix}.expand_norm", x, hidden, div if stride == 1 else div // 2)
        x = b.relu(f"{prefix}.expand_relu", x, hidden, div if stride == 1 else div // 2)
        x = b.conv(f"{prefix}.dw", x, hidden, hidden, (k, k), (stride, stride), hidden, div)
        x = b.norm(f"{prefix}.dw_norm", x, hidden, div)
        x = b.relu(f"{prefix}.dw_relu", x, hidden, div)
        x = b.conv(f"{prefix}.project", x, hidden, f, (1, 1), (1, 1), 1, div)
        x = b.norm(f"{prefix}.project_norm", x, f, div)
        # linear projection output: no activation
    elif op.kind is ConvKind.MICRO:
        groups = 4 if cin % 4 == 0 else 1
        # the vertical stage carries the full stride so every node sits on a
        # single resolution level
        x = b.conv(f"{prefix}.fdw_v", x, cin, cin, (k, 1), (stride, stride), cin, div)
        x = b.norm(f"{prefix}.fdw_v_norm", x, cin, div)
        x = b.conv(f"{prefix}.fdw_h", x, cin, cin, (1, k), (1, 1), cin, div)
        x = b.norm(f"{prefix}.fdw_h_norm", x, cin, div)
        x = b.relu(f"{prefix}.fdw_relu", x, cin, div)
        x = b.conv(f"{prefix}.gpw", x, cin, f, (1, 1), (1, 1), groups, div)
        x = b.norm(f"{prefix}.gpw_norm", x, f, div)
        x = b.relu(f"{prefix}.gpw_relu", x, f, div)
    else:  # pragma: no cover
        raise AssertionError(op.kind)

    if layer.se_ratio > 0:
        hidden = se_hidden(f, layer.se_ratio)
        pooled = b.add(NodeKind.GAP, f"{prefix}.se_pool", (x,), f, div, fixed_spatial=True)
        q = b.conv(f"{prefix}.se_reduce", pooled, f, hidden, (1, 1), (1, 1), 1, div, fixed=True)
        q = b.relu(f"{prefix}.se_relu", q, hidden, div, fixed=True)
        q = b.conv(f"{prefix}.se_expand", q, hidden, f, (1, 1), (1, 1), 1, div, fixed=True)
        gate = b.add(NodeKind.SIGMOID, f"{prefix}.se_gate", (q,), f, div, fixed_spatial=True)
        x = b.add(NodeKind.MUL, f"{prefix}.se_scale", (x, gate), f, div)

    if layer.skip_op is SkipOp.RESIDUAL:
        if cin == f and stride == 1:
            skip = layer_in
        elif cin == f:
            skip = b.add(NodeKind.AVGPOOL2, f"{prefix}.skip_pool", (layer_in,), f, div, factor=2)
        else:
            skip = b.conv(f"{prefix}.skip_proj", layer_in, cin, f, (1, 1),
                          (stride, stride), 1, div)
        x = b.add(NodeKind.ADD, f"{prefix}.skip_add", (x, skip), f, div)
    return x


def _add_block(b: _Builder, key: tuple[int, int], block: BlockSpec, cin: int,
               x: int, div: int) -> tuple[int, int, int]:
    """Expand a block; returns (output node, output channels, output divisor)."""
    scale, j = key
    name = f"s{scale}.b{j}.{block.kind.value}"
    if block.kind is BlockKind.UPSAMPLE:
        div //= 2
        x = b.add(NodeKind.UPSAMPLE2, f"{name}.nn_up", (x,), cin, div, factor=2)
    for li in range(block.num_layers):
        stride = 2 if (block.kind is BlockKind.DOWNSAMPLE and li == 0) else 1
        if stride == 2:
            div *= 2
        x = _add_layer(b, f"{name}.l{li}", block.layer, cin, stride, x, div)
        cin = block.layer.out_channels
    return x, cin, div


def instantiate(spec: NetworkSpec, input_shape: tuple[int, int]) -> GraphPlan:
    """Build the layer graph for `spec` at spatial size (height, width)."""
    height, width = input_shape
    need = 2 ** (spec.num_scales - 1)
    if height % need != 0 or width % need != 0 or height < need or width < need:
        raise ShapeError(
            f"input {height}x{width} not divisible by 2^(scales-1)={need}"
        )
    b = _Builder()
    x = b.add(NodeKind.INPUT, "input", (), spec.in_channels, 1)

    enc_out: dict[int, tuple[int, int]] = {}
    cin = spec.in_channels
    div = 1
    for j in (1, 2):
        x, cin, div = _add_block(b, (1, j), spec.block(1, j), cin, x, div)
    enc_out[1] = (x, cin)
    for s in range(2, spec.num_scales + 1):
        for j in (1, 2, 3):
            x, cin, div = _add_block(b, (s, j), spec.block(s, j), cin, x, div)
        enc_out[s] = (x, cin)

    x, cin = enc_out[spec.num_scales]
    div = 2 ** (spec.num_scales - 1)
    refine = (x, cin)
    for s in range(spec.num_scales, 0, -1):
        keys = ((1, 3), (1, 4), (1, 5)) if s == 1 else ((s, 4), (s, 5), (s, 6))
        for key in keys:
            x, cin, div = _add_block(b, key, spec.block(*key), cin, x, div)
        refine = (x, cin)
        if s > 1:
            up_key = (s, 7)
            x, cin, div = _add_block(b, up_key, spec.block(*up_key), cin, x, div)
            enc_idx, enc_ch = enc_out[s - 1]
            if cin != enc_ch:
                x = b.conv(f"s{s - 1}.fuse_proj", x, cin, enc_ch, (1, 1), (1, 1), 1, div)
            x = b.add(NodeKind.ADD, f"s{s - 1}.fuse_add", (x, enc_idx), enc_ch, div)
            cin = enc_ch

    out_idx, out_ch = refine
    head = spec.task_head
    if head.kind is HeadKind.REGRESS:
        out_idx = b.conv("head.conv", out_idx, out_ch, 1, (1, 1), (1, 1), 1, 1)
    elif head.kind is HeadKind.CLASSIFY:
        out_idx = b.conv("head.conv", out_idx, out_ch, head.classes, (1, 1), (1, 1), 1, 1)
    else:
        r = head.factor
        expanded = r * r * spec.in_channels
        out_idx = b.conv("head.conv", out_idx, out_ch, expanded, (3, 3), (1, 1), 1, 1)
        out_idx = b.add(
            NodeKind.PIXELSHUFFLE, "head.shuffle", (out_idx,),
            spec.in_channels, 1, factor=r, up_factor=r,
        )
    return GraphPlan(spec, (height, width), tuple(b.nodes), out_idx)


# --- analytic parameter accounting ------------------------------------------


def layer_param_count(layer: LayerSpec, cin: int) -> int:
    """Closed-form learnable-parameter count of one layer at `cin` inputs.

    Convs carry biases; each conv stage is followed by a 2-per-channel
    normalization; SE adds its two FC stages; a residual with a channel
    mismatch adds a 1x1 projection.
    """
    k = layer.kernel_size
    f = layer.out_channels
    op = layer.conv_op
    if op.kind is ConvKind.VANILLA:
        total = (k * k * cin * f + f) + 2 * f
    elif op.kind is ConvKind.DWSEP:
        total = (k * k * cin + cin) + 2 * cin + (cin * f + f) + 2 * f
    elif op.kind is ConvKind.IBCONV:
        hidden = op.expansion * cin
        total = (cin * hidden + hidden) + 2 * hidden
        total += (k * k * hidden + hidden) + 2 * hidden
        total += (hidden * f + f) + 2 * f
    elif op.kind is ConvKind.MICRO:
        groups = 4 if cin % 4 == 0 else 1
        total = 2 * (k * cin + cin) + 4 * cin  # two factorized stages + norms
        total += (cin * f // groups + f) + 2 * f
    else:  # pragma: no cover
        raise AssertionError(op.kind)
    if layer.se_ratio > 0:
        hidden = se_hidden(f, layer.se_ratio)
        total += f * hidden + hidden + hidden * f + f
    if layer.skip_op is SkipOp.RESIDUAL and cin != f:
        total += cin * f + f
    return total


def block_param_count(block: BlockSpec, cin: int) -> int:
    f = block.layer.out_channels
    total = layer_param_count(block.layer, cin)
    total += (block.num_layers - 1) * layer_param_count(block.layer, f)
    return total


def param_breakdown(spec: NetworkSpec) -> dict:
    """Per-block (and fusion/head) parameter counts from closed forms."""
    out: dict = {}
    enc_ch: dict[int, int] = {}
    cin = spec.in_channels
    for j in (1, 2):
        block = spec.block(1, j)
        out[(1, j)] = block_param_count(block, cin)
        cin = block.layer.out_channels
    enc_ch[1] = cin
    for s in range(2, spec.num_scales + 1):
        for j in (1, 2, 3):
            block = spec.block(s, j)
            out[(s, j)] = block_param_count(block, cin)
            cin = block.layer.out_channels
        enc_ch[s] = cin

    cin = enc_ch[spec.num_scales]
    refine_ch = cin
    for s in range(spec.num_scales, 0, -1):
        keys = ((1, 3), (1, 4), (1, 5)) if s == 1 else ((s, 4), (s, 5), (s, 6))
        for key in keys:
            block = spec.block(*key)
            out[key] = block_param_count(block, cin)
            cin = block.layer.out_channels
        refine_ch = cin
        if s > 1:
            up = spec.block(s, 7)
            out[(s, 7)] = block_param_count(up, cin)
            cin = up.layer.out_channels
            ce = enc_ch[s - 1]
            if cin != ce:
                out[f"fusion_s{s - 1}"] = cin * ce + ce
            cin = ce

    head = spec.task_head
    if head.kind is HeadKind.REGRESS:
        out["head"] = refine_ch * 1 + 1
    elif head.kind is HeadKind.CLASSIFY:
        out["head"] = refine_ch * head.classes + head.classes
    else:
        expanded = head.factor * head.factor * spec.in_channels
        out["head"] = 9 * refine_ch * expanded + expanded
    return out


def count_params_spec(spec: NetworkSpec) -> int:
    """Exact total parameter count from closed forms (no graph required)."""
    return sum(param_breakdown(spec).values())


def count_params(plan: GraphPlan) -> int:
    """Closed-form parameter count of an instantiated plan."""
    return count_params_spec(plan.spec)


def relu_units(plan: GraphPlan, probe_shape: tuple[int, int]) -> int:
    """Total scalar ReLU outputs per batch element at the probe resolution."""
    height, width = probe_shape
    need = 2 ** (plan.spec.num_scales - 1)
    if height % need != 0 or width % need != 0 or height < need or width < need:
        raise ShapeError(
            f"probe {height}x{width} not divisible by 2^(scales-1)={need}"
        )
    total = 0
    for node in plan.nodes:
        if node.kind is NodeKind.RELU:
            c, h, w = node.out_shape(height, width)
            total += c * h * w
    return total


def describe(plan: GraphPlan) -> str:
    """Stable per-node table (name, op, shapes, params) with a total row."""
    height, width = plan.input_hw
    rows = []
    for node in plan.nodes:
        if node.inputs:
            src = plan.nodes[node.inputs[0]]
            ishape = "x".join(str(d) for d in src.out_shape(height, width))
        else:
            ishape = "-"
        oshape = "x".join(str(d) for d in node.out_shape(height, width))
        rows.append((node.name, node.kind.value, ishape, oshape, node.param_count))
    widths = [max(len(str(r[i])) for r in rows) for i in range(4)]
    lines = []
    for name, kind, ishape, oshape, count in rows:
        lines.append(
            f"{name:<{widths[0]}}  {kind:<{widths[1]}}  "
            f"{ishape:>{widths[2]}}  {oshape:>{widths[3]}}  {count}"
        )
    lines.append(f"total params: {plan.total_params}")
    return "\n".join(lines) + "\n"
