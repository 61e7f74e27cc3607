"""Architecture genotypes over a fixed multi-scale dense-prediction backbone.

The backbone is a pyramid of scales: scale 1 holds five blocks (two encoder,
two decoder, one refine) and every deeper scale adds a downsample and an
upsample block (seven total).  A block is a stack of identical layers, and a
layer is one point of the searchable operation pool (conv variant, kernel
size, squeeze-excitation ratio, skip connection, output channels).

This module defines, validates, samples, mutates, hashes and (de)serializes
genotypes.  Everything is a pure function of its inputs plus an explicit seed,
so specs can be shared freely between workers.
"""
from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Mapping


class SpaceConfigError(ValueError):
    """The configured space admits no valid genotype (or is malformed)."""


class MutationFailed(RuntimeError):
    """No constraint-satisfying mutation was found within the retry budget."""


class SpecParseError(ValueError):
    """Malformed canonical spec text."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConvKind(str, Enum):
    VANILLA = "vanilla"
    DWSEP = "dwsep"
    IBCONV = "ibconv"
    MICRO = "micro"


class SkipOp(str, Enum):
    NONE = "none"
    RESIDUAL = "residual"


class BlockKind(str, Enum):
    ENCODER = "encoder"
    DECODER = "decoder"
    REFINE = "refine"
    DOWNSAMPLE = "downsample"
    UPSAMPLE = "upsample"


class HeadKind(str, Enum):
    REGRESS = "regress"
    CLASSIFY = "class"
    SUPERRES = "sr"


@dataclass(frozen=True)
class ConvOp:
    """One convolution variant; only inverted bottlenecks use `expansion`."""

    kind: ConvKind
    expansion: int = 6

    def __post_init__(self):
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")
        if self.kind is not ConvKind.IBCONV and self.expansion != 6:
            # normalize so equality/hashing ignore the unused field
            object.__setattr__(self, "expansion", 6)

    def canonical(self) -> str:
        if self.kind is ConvKind.IBCONV:
            return f"ibconv:{self.expansion}"
        return self.kind.value

    @staticmethod
    def parse(text: str) -> "ConvOp":
        if text.startswith("ibconv:"):
            try:
                t = int(text.split(":", 1)[1])
            except ValueError:
                raise ValueError(f"bad expansion in conv op {text!r}")
            return ConvOp(ConvKind.IBCONV, t)
        try:
            return ConvOp(ConvKind(text))
        except ValueError:
            raise ValueError(f"unknown conv op {text!r}")


@dataclass(frozen=True)
class LayerSpec:
    """One searchable layer: op variant, kernel, SE ratio, skip, out channels."""

    conv_op: ConvOp
    kernel_size: int
    se_ratio: float
    skip_op: SkipOp
    out_channels: int

    def __post_init__(self):
        if self.kernel_size not in (3, 5):
            raise ValueError(f"kernel_size must be 3 or 5, got {self.kernel_size}")
        if self.se_ratio not in (0.0, 0.25):
            raise ValueError(f"se_ratio must be 0 or 0.25, got {self.se_ratio}")
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")

    @property
    def block_cost(self) -> int:
        """Kernel/channel balance cost: kernel_size^2 * out_channels."""
        return self.kernel_size * self.kernel_size * self.out_channels


@dataclass(frozen=True)
class BlockSpec:
    """A stack of `num_layers` identical layers of one kind."""

    layer: LayerSpec
    num_layers: int
    kind: BlockKind

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")


@dataclass(frozen=True)
class TaskHead:
    """Prediction head: 1-channel regression, K-class maps, or x`factor` SR."""

    kind: HeadKind
    classes: int = 1
    factor: int = 2

    def __post_init__(self):
        if self.kind is HeadKind.CLASSIFY and self.classes < 2:
            raise ValueError("classification head needs >= 2 classes")
        if self.kind is HeadKind.SUPERRES and self.factor not in (2, 4):
            raise ValueError("super-resolution factor must be 2 or 4")

    def canonical(self) -> str:
        if self.kind is HeadKind.REGRESS:
            return "regress1"
        if self.kind is HeadKind.CLASSIFY:
            return f"class{self.classes}"
        return f"sr{self.factor}"

    @staticmethod
    def parse(text: str) -> "TaskHead":
        if text == "regress1":
            return TaskHead(HeadKind.REGRESS)
        if text.startswith("class"):
            return TaskHead(HeadKind.CLASSIFY, classes=int(text[5:]))
        if text.startswith("sr"):
            return TaskHead(HeadKind.SUPERRES, factor=int(text[2:]))
        raise ValueError(f"unknown task head {text!r}")


def block_template(scale: int) -> tuple[BlockKind, ...]:
    """Block kinds, in processing order, for one pyramid scale."""
    if scale == 1:
        return (
            BlockKind.ENCODER,
            BlockKind.ENCODER,
            BlockKind.DECODER,
            BlockKind.DECODER,
            BlockKind.REFINE,
        )
    return (
        BlockKind.DOWNSAMPLE,
        BlockKind.ENCODER,
        BlockKind.ENCODER,
        BlockKind.DECODER,
        BlockKind.DECODER,
        BlockKind.REFINE,
        BlockKind.UPSAMPLE,
    )


@dataclass(frozen=True)
class NetworkSpec:
    """Complete genotype: scale count plus per-(scale, index) block specs.

    Treated as an immutable value; mutation helpers return modified copies.
    """

    num_scales: int
    blocks: Mapping[tuple[int, int], BlockSpec]
    task_head: TaskHead
    in_channels: int = 3

    def block(self, scale: int, index: int) -> BlockSpec:
        return self.blocks[(scale, index)]

    def keys_in_order(self) -> list[tuple[int, int]]:
        return sorted(self.blocks.keys())

    def items_in_order(self) -> Iterator[tuple[tuple[int, int], BlockSpec]]:
        for key in self.keys_in_order():
            yield key, self.blocks[key]

    def with_block(self, key: tuple[int, int], new_block: BlockSpec) -> "NetworkSpec":
        blocks = dict(self.blocks)
        blocks[key] = new_block
        return replace(self, blocks=blocks)

    def block_of_kind(self, scale: int, kind: BlockKind, which: int = 0) -> tuple[int, int]:
        """Key of the `which`-th block of `kind` at `scale` (processing order)."""
        hits = [
            (scale, j)
            for j, k in enumerate(block_template(scale), start=1)
            if k is kind
        ]
        return hits[which]


_DEFAULT_KINDS = (ConvKind.VANILLA, ConvKind.DWSEP, ConvKind.IBCONV, ConvKind.MICRO)


@dataclass(frozen=True)
class ComputeBudget:
    """Budget caps realizing the kernel/channel balance constraint."""

    per_block_cost_cap: int = 1200
    param_cap: int = 2_000_000

    def __post_init__(self):
        if self.per_block_cost_cap < 1 or self.param_cap < 1:
            raise ValueError("budget caps must be positive")


@dataclass(frozen=True)
class SpaceConfig:
    """Domains of every searched dimension plus the compute budget.

    `sub_space_size` is the per-block choice count M: the number of distinct
    (conv op, kernel, SE ratio, skip, channels, layer count) tuples whose
    per-block cost fits the budget.
    """

    scale_range: tuple[int, int] = (1, 5)
    layers_range: tuple[int, int] = (1, 4)
    channel_ladder: tuple[int, ...] = (8, 16, 24, 32, 48, 64)
    conv_kinds: tuple[ConvKind, ...] = _DEFAULT_KINDS
    kernel_sizes: tuple[int, ...] = (3, 5)
    se_ratios: tuple[float, ...] = (0.0, 0.25)
    skip_ops: tuple[SkipOp, ...] = (SkipOp.NONE, SkipOp.RESIDUAL)
    ib_expansion: int = 6
    budget: ComputeBudget = field(default_factory=ComputeBudget)
    in_channels: int = 3
    task_head: TaskHead = field(default_factory=lambda: TaskHead(HeadKind.REGRESS))
    mutate_num_layers: bool = True

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (1 <= lo <= hi):
            raise SpaceConfigError(f"bad scale_range {self.scale_range}")
        lo, hi = self.layers_range
        if not (1 <= lo <= hi):
            raise SpaceConfigError(f"bad layers_range {self.layers_range}")
        if not self.channel_ladder or any(c < 1 for c in self.channel_ladder):
            raise SpaceConfigError("channel_ladder must be nonempty and positive")
        if tuple(sorted(set(self.channel_ladder))) != self.channel_ladder:
            raise SpaceConfigError("channel_ladder must be strictly increasing")
        if not self.conv_kinds or not self.kernel_sizes or not self.se_ratios or not self.skip_ops:
            raise SpaceConfigError("every operation pool must be nonempty")
        for k in self.kernel_sizes:
            if k not in (3, 5):
                raise SpaceConfigError(f"unsupported kernel size {k}")
        for s in self.se_ratios:
            if s not in (0.0, 0.25):
                raise SpaceConfigError(f"unsupported SE ratio {s}")
        if self.ib_expansion < 1:
            raise SpaceConfigError("ib_expansion must be >= 1")
        if self.in_channels < 1:
            raise SpaceConfigError("in_channels must be >= 1")

    def conv_op(self, kind: ConvKind) -> ConvOp:
        if kind is ConvKind.IBCONV:
            return ConvOp(kind, self.ib_expansion)
        return ConvOp(kind)

    def layer_choices(self) -> list[LayerSpec]:
        """All budget-admissible layers (per-block cost cap applied)."""
        out = []
        for kind in self.conv_kinds:
            op = self.conv_op(kind)
            for k in self.kernel_sizes:
                for se in self.se_ratios:
                    for skip in self.skip_ops:
                        for f in self.channel_ladder:
                            if k * k * f <= self.budget.per_block_cost_cap:
                                out.append(LayerSpec(op, k, se, skip, f))
        return out

    def layer_tuples(self) -> list[tuple[LayerSpec, int]]:
        """All admissible (layer, num_layers) pairs; their count is M."""
        lo, hi = self.layers_range
        return [(layer, n) for layer in self.layer_choices() for n in range(lo, hi + 1)]

    @property
    def sub_space_size(self) -> int:
        return len(self.layer_tuples())


def space_size_from_m(m: int, num_scales: int) -> tuple[int, float]:
    """Exact search-space size M^(5 + (S-1)*7) and its log10."""
    if num_scales < 1:
        raise ValueError("num_scales must be >= 1")
    if m < 1:
        raise ValueError("m must be >= 1")
    exponent = 5 + (num_scales - 1) * 7
    total = m ** exponent
    log10 = 0.0 if m == 1 else exponent * math.log10(m)
    return total, log10


def space_size(cfg: SpaceConfig, num_scales: int) -> tuple[int, float]:
    """Search-space size for `cfg`'s per-block choice count at `num_scales`."""
    return space_size_from_m(cfg.sub_space_size, num_scales)


def check_constraints(spec: NetworkSpec, cfg: SpaceConfig) -> tuple[bool, list[str]]:
    """Validate structure, pool membership, and the budget caps.

    Returns (ok, violations); never raises for a structurally complete spec.
    """
    violations: list[str] = []
    if spec.num_scales < 1:
        return False, ["num_scales must be >= 1"]
    lo, hi = cfg.scale_range
    if not (lo <= spec.num_scales <= hi):
        violations.append(f"num_scales {spec.num_scales} outside configured range [{lo},{hi}]")
    if spec.in_channels != cfg.in_channels:
        violations.append(f"in_channels {spec.in_channels} != configured {cfg.in_channels}")
    if spec.task_head != cfg.task_head:
        violations.append(
            f"task head {spec.task_head.canonical()} != configured {cfg.task_head.canonical()}"
        )

    expected_keys = set()
    for scale in range(1, spec.num_scales + 1):
        template = block_template(scale)
        for j, kind in enumerate(template, start=1):
            expected_keys.add((scale, j))
            block = spec.blocks.get((scale, j))
            if block is None:
                violations.append(f"block {scale}.{j}: missing ({kind.value} expected)")
                continue
            if block.kind is not kind:
                violations.append(
                    f"block {scale}.{j}: kind {block.kind.value}, expected {kind.value}"
                )
            _check_block_domains(block, cfg, scale, j, violations)
    for key in sorted(set(spec.blocks.keys()) - expected_keys):
        violations.append(f"block {key[0]}.{key[1]}: not part of the {spec.num_scales}-scale layout")

    if not violations:
        # budget caps only make sense on structurally sound specs
        from . import net_graph  # local import; net_graph imports this module

        total = net_graph.count_params_spec(spec)
        if total > cfg.budget.param_cap:
            violations.append(
                f"total params {total} exceed cap {cfg.budget.param_cap}"
            )
    return (not violations), violations


def _check_block_domains(block, cfg, scale, j, violations):
    layer = block.layer
    tag = f"block {scale}.{j}"
    if layer.conv_op.kind not in cfg.conv_kinds:
        violations.append(f"{tag}: conv op {layer.conv_op.kind.value} not in pool")
    elif layer.conv_op.kind is ConvKind.IBCONV and layer.conv_op.expansion != cfg.ib_expansion:
        violations.append(
            f"{tag}: expansion {layer.conv_op.expansion} != configured {cfg.ib_expansion}"
        )
    if layer.kernel_size not in cfg.kernel_sizes:
        violations.append(f"{tag}: kernel {layer.kernel_size} not in pool")
    if layer.se_ratio not in cfg.se_ratios:
        violations.append(f"{tag}: se ratio {layer.se_ratio} not in pool")
    if layer.skip_op not in cfg.skip_ops:
        violations.append(f"{tag}: skip {layer.skip_op.value} not in pool")
    if layer.out_channels not in cfg.channel_ladder:
        violations.append(f"{tag}: channels {layer.out_channels} not on ladder")
    lo, hi = cfg.layers_range
    if not (lo <= block.num_layers <= hi):
        violations.append(f"{tag}: num_layers {block.num_layers} outside [{lo},{hi}]")
    if layer.block_cost > cfg.budget.per_block_cost_cap:
        violations.append(
            f"{tag}: cost {layer.block_cost} exceeds per-block cap "
            f"{cfg.budget.per_block_cost_cap}"
        )


def random_spec(cfg: SpaceConfig, rng_seed: int) -> NetworkSpec:
    """Sample a constraint-satisfying genotype, deterministically per seed."""
    rng = random.Random(rng_seed)
    tuples = cfg.layer_tuples()
    if not tuples:
        raise SpaceConfigError("no layer satisfies the per-block cost cap")
    num_scales = rng.randint(*cfg.scale_range)
    blocks: dict[tuple[int, int], BlockSpec] = {}
    for scale in range(1, num_scales + 1):
        for j, kind in enumerate(block_template(scale), start=1):
            layer, n = rng.choice(tuples)
            blocks[(scale, j)] = BlockSpec(layer, n, kind)
    spec = NetworkSpec(num_scales, blocks, cfg.task_head, cfg.in_channels)
    spec = _repair_param_budget(spec, cfg)
    ok, violations = check_constraints(spec, cfg)
    if not ok:  # pragma: no cover - repair guarantees validity
        raise SpaceConfigError("; ".join(violations))
    return spec


def _lower_channel(cfg: SpaceConfig, f: int) -> int | None:
    """Next ladder entry below f, or None at the bottom."""
    below = [c for c in cfg.channel_ladder if c < f]
    return below[-1] if below else None


def _repair_param_budget(
    spec: NetworkSpec, cfg: SpaceConfig, exclude: tuple[int, int] | None = None
) -> NetworkSpec:
    """Step channels down on the most expensive blocks until under the cap.

    `exclude` protects a freshly mutated block: budget pressure caused by it
    is relieved by shrinking the other blocks' channels instead.
    """
    from . import net_graph

    while net_graph.count_params_spec(spec) > cfg.budget.param_cap:
        breakdown = net_graph.param_breakdown(spec)
        candidates = [
            (cost, key)
            for key, cost in breakdown.items()
            if isinstance(key, tuple) and key != exclude
            and _lower_channel(cfg, spec.blocks[key].layer.out_channels) is not None
        ]
        if not candidates:
            raise SpaceConfigError(
                "parameter budget unsatisfiable: all channels at ladder minimum"
            )
        candidates.sort(key=lambda item: (-item[0], item[1]))
        _, key = candidates[0]
        block = spec.blocks[key]
        new_f = _lower_channel(cfg, block.layer.out_channels)
        new_layer = replace(block.layer, out_channels=new_f)
        spec = spec.with_block(key, replace(block, layer=new_layer))
    return spec


MUTATION_RETRY_BUDGET = 64


def mutate_swap(spec: NetworkSpec, rng_seed: int, cfg: SpaceConfig | None = None) -> NetworkSpec:
    """Exchange the layer specs of two random blocks, revalidating the result.

    Per-block costs travel with the swapped layers, so only the total budget
    can break; incompatible pairs are resampled up to the retry budget.
    """
    if cfg is None:
        cfg = SpaceConfig()
    rng = random.Random(rng_seed)
    keys = spec.keys_in_order()
    for _ in range(MUTATION_RETRY_BUDGET):
        a, b = rng.sample(keys, 2)
        block_a, block_b = spec.blocks[a], spec.blocks[b]
        candidate = spec.with_block(a, replace(block_a, layer=block_b.layer))
        candidate = candidate.with_block(b, replace(block_b, layer=block_a.layer))
        ok, _ = check_constraints(candidate, cfg)
        if ok:
            return candidate
    raise MutationFailed(f"no compatible swap in {MUTATION_RETRY_BUDGET} attempts")


def mutate_modify(spec: NetworkSpec, cfg: SpaceConfig, rng_seed: int) -> NetworkSpec:
    """Replace one block's layer (and optionally depth) with a fresh sample.

    If the new layer pushes the total over the parameter cap, other blocks'
    channels are stepped down to restore the budget.
    """
    rng = random.Random(rng_seed)
    keys = spec.keys_in_order()
    tuples = cfg.layer_tuples()
    if not tuples:
        raise SpaceConfigError("no layer satisfies the per-block cost cap")
    for _ in range(MUTATION_RETRY_BUDGET):
        key = rng.choice(keys)
        old = spec.blocks[key]
        layer, n = rng.choice(tuples)
        if not cfg.mutate_num_layers:
            n = old.num_layers
        candidate = spec.with_block(key, BlockSpec(layer, n, old.kind))
        try:
            candidate = _repair_param_budget(candidate, cfg, exclude=key)
        except SpaceConfigError:
            continue
        ok, _ = check_constraints(candidate, cfg)
        if ok:
            return candidate
    raise MutationFailed(f"no valid modification in {MUTATION_RETRY_BUDGET} attempts")


# --- canonical text form, hashing ------------------------------------------

SPEC_FORMAT_VERSION = 1


def serialize(spec: NetworkSpec) -> str:
    """Canonical line-oriented text form (stable ordering, versioned)."""
    lines = [
        f"specfmt={SPEC_FORMAT_VERSION}",
        f"scales={spec.num_scales}",
        f"in_channels={spec.in_channels}",
        f"head={spec.task_head.canonical()}",
    ]
    for (scale, j), block in spec.items_in_order():
        layer = block.layer
        se = "%g" % layer.se_ratio
        lines.append(
            f"block_{scale}_{j}="
            f"kind:{block.kind.value},op:{layer.conv_op.canonical()},"
            f"k:{layer.kernel_size},se:{se},skip:{layer.skip_op.value},"
            f"f:{layer.out_channels},n:{block.num_layers}"
        )
    return "\n".join(lines) + "\n"


def deserialize(text: str) -> NetworkSpec:
    """Parse the canonical text form; raises SpecParseError with a line number."""
    lines = [ln for ln in text.splitlines()]
    if not lines or not lines[0].strip():
        raise SpecParseError("empty input", line=1)
    header: dict[str, str] = {}
    blocks: dict[tuple[int, int], BlockSpec] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecParseError(f"expected key=value, got {line!r}", line=lineno)
        key, value = line.split("=", 1)
        if key.startswith("block_"):
            blocks[_parse_block_key(key, lineno)] = _parse_block_value(value, lineno)
        elif key in ("specfmt", "scales", "in_channels", "head"):
            if key in header:
                raise SpecParseError(f"duplicate key {key!r}", line=lineno)
            header[key] = value
        else:
            raise SpecParseError(f"unknown key {key!r}", line=lineno)

    for required in ("specfmt", "scales", "in_channels", "head"):
        if required not in header:
            raise SpecParseError(f"missing header key {required!r}", line=len(lines))
    if header["specfmt"] != str(SPEC_FORMAT_VERSION):
        raise SpecParseError(f"unsupported format version {header['specfmt']!r}", line=1)
    try:
        num_scales = int(header["scales"])
        in_channels = int(header["in_channels"])
        head = TaskHead.parse(header["head"])
    except ValueError as exc:
        raise SpecParseError(str(exc))
    if num_scales < 1:
        raise SpecParseError("scales must be >= 1")

    expected = {
        (scale, j)
        for scale in range(1, num_scales + 1)
        for j in range(1, len(block_template(scale)) + 1)
    }
    missing = sorted(expected - set(blocks))
    if missing:
        raise SpecParseError(f"missing block lines for {missing[:3]}...", line=len(lines))
    extra = sorted(set(blocks) - expected)
    if extra:
        raise SpecParseError(f"unexpected block {extra[0]} for {num_scales} scales")
    return NetworkSpec(num_scales, blocks, head, in_channels)


def _parse_block_key(key: str, lineno: int) -> tuple[int, int]:
    parts = key.split("_")
    if len(parts) != 3:
        raise SpecParseError(f"bad block key {key!r}", line=lineno)
    try:
        return int(parts[1]), int(parts[2])
    except ValueError:
        raise SpecParseError(f"bad block key {key!r}", line=lineno)


def _parse_block_value(value: str, lineno: int) -> BlockSpec:
    fields: dict[str, str] = {}
    for pos, item in enumerate(value.split(",")):
        if ":" not in item:
            raise SpecParseError(f"bad block field {item!r} (position {pos})", line=lineno)
        name, val = item.split(":", 1)
        if name == "op" and val == "ibconv":
            # expansion is part of the op encoding: "op:ibconv:<t>"
            raise SpecParseError("inverted bottleneck needs an expansion", line=lineno)
        if name == "op" and ":" in val:
            pass
        fields[name] = val
    missing = {"kind", "op", "k", "se", "skip", "f", "n"} - set(fields)
    if missing:
        raise SpecParseError(f"block missing fields {sorted(missing)}", line=lineno)
    try:
        layer = LayerSpec(
            conv_op=ConvOp.parse(fields["op"]),
            kernel_size=int(fields["k"]),
            se_ratio=float(fields["se"]),
            skip_op=SkipOp(fields["skip"]),
            out_channels=int(fields["f"]),
        )
        return BlockSpec(layer, int(fields["n"]), BlockKind(fields["kind"]))
    except ValueError as exc:
        raise SpecParseError(str(exc), line=lineno)


def spec_hash(spec: NetworkSpec) -> int:
    """64-bit digest of the canonical form; equal iff canonical forms equal."""
    digest = hashlib.blake2b(serialize(spec).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def spec_hash_hex(spec: NetworkSpec) -> str:
    return f"{spec_hash(spec):016x}"
