"""CIFAR-style ResNets with optional BlockMoE / ConvMoE replacements, plus
symbolic parameter and FLOP accounting."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument, ModelConstructionError
from .moe import MoELayer, MoELayerConfig, make_gate, moe_layers
from .numerics import gap

STAGES = ("conv2_x", "conv3_x", "conv4_x", "conv5_x")

ARCHS = {
    "resnet18": {"block": "basic", "widths": (64, 128, 256, 512), "depths": (2, 2, 2, 2)},
    "resnet50": {"block": "bottleneck", "widths": (64, 128, 256, 512), "depths": (3, 4, 6, 3)},
    "tiny": {"block": "basic", "widths": (16, 32, 64), "depths": (1, 1, 1)},
}

Index = Union[int, str]  # an integer position or "all"


@dataclass
class ReplacementSpec:
    stage: str
    block_index: Index = 0
    conv_index: Index | None = None
    moe: MoELayerConfig = field(default_factory=MoELayerConfig)

    def __post_init__(self):
        if isinstance(self.moe, dict):
            self.moe = MoELayerConfig(**self.moe)
        if (self.conv_index is None) != (self.moe.expert_kind == "block"):
            raise ModelConstructionError(
                f"{self.stage}: conv_index must be set iff expert_kind is 'conv' "
                f"(conv_index={self.conv_index!r}, expert_kind={self.moe.expert_kind!r})"
            )


@dataclass
class ModelConfig:
    arch: str = "tiny"
    num_classes: int = 10
    replacements: list[ReplacementSpec] = field(default_factory=list)
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        self.replacements = [ReplacementSpec(**r) if isinstance(r, dict) else r for r in self.replacements]
        self.input_shape = tuple(self.input_shape)
        if self.arch not in ARCHS:
            raise ModelConstructionError(f"unknown arch {self.arch!r}; choose from {sorted(ARCHS)}")


@dataclass
class CostReport:
    parameters: int
    flops_per_input: int
    breakdown: dict[str, int]


# -- building blocks -----------------------------------------------------------


class BasicBlock(nn.Module):
    expansion = 1
    n_convs = 2

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Bottleneck(nn.Module):
    expansion = 4
    n_convs = 3

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        out_planes = planes * self.expansion
        self.conv1 = nn.Conv2d(in_planes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out_planes, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != out_planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, out_planes, 1, stride, bias=False), nn.BatchNorm2d(out_planes)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + self.shortcut(x))


_BLOCKS = {"basic": BasicBlock, "bottleneck": Bottleneck}


class ResNet(nn.Module):
    def __init__(self, arch: str, num_classes: int, in_channels: int = 3):
        super().__init__()
        spec = ARCHS[arch]
        block = _BLOCKS[spec["block"]]
        widths, depths = spec["widths"], spec["depths"]
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU()
        )
        self.stages = nn.ModuleDict()
        in_planes = widths[0]
        for i, (w, d) in enumerate(zip(widths, depths)):
            blocks = []
            for j in range(d):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(block(in_planes, w, stride))
                in_planes = w * block.expansion
            self.stages[STAGES[i]] = nn.Sequential(*blocks)
        self.fc = nn.Linear(in_planes, num_classes)

    def features(self, x):
        x = self.stem(x)
        for stage in self.stages.values():
            x = stage(x)
        return x

    def forward(self, x):
        return self.fc(gap(self.features(x)))


# -- construction --------------------------------------------------------------


def enumerate_slots(arch: str) -> list[tuple[str, int, int | None]]:
    """Every replaceable unit as (stage, block index, conv index or None)."""
    if arch not in ARCHS:
        raise ModelConstructionError(f"unknown arch {arch!r}")
    spec = ARCHS[arch]
    n_convs = _BLOCKS[spec["block"]].n_convs
    slots = []
    for stage, depth in zip(STAGES, spec["depths"]):
        for b in range(depth):
            slots.append((stage, b, None))
            slots.extend((stage, b, c) for c in range(n_convs))
    return slots


def _expand(rep: ReplacementSpec, arch: str) -> list[tuple[str, int, int | None]]:
    valid = enumerate_slots(arch)
    stages = [s for s, _, _ in valid]
    if rep.stage not in stages:
        raise ModelConstructionError(f"stage {rep.stage!r} not in {arch}; valid slots: {_fmt(valid)}")
    blocks = sorted({b for s, b, _ in valid if s == rep.stage})
    if rep.block_index == "all":
        block_ids = blocks
    elif isinstance(rep.block_index, int) and rep.block_index in blocks:
        block_ids = [rep.block_index]
    else:
        raise ModelConstructionError(f"invalid block {rep.block_index!r} in {rep.stage}; valid slots: {_fmt(valid)}")
    out = []
    for b in block_ids:
        if rep.conv_index is None:
            out.append((rep.stage, b, None))
            continue
        convs = [c for s, bb, c in valid if s == rep.stage and bb == b and c is not None]
        if rep.conv_index == "all":
            out.extend((rep.stage, b, c) for c in convs)
        elif rep.conv_index in convs:
            out.append((rep.stage, b, rep.conv_index))
        else:
            raise ModelConstructionError(
                f"invalid conv {rep.conv_index!r} in {rep.stage}[{b}]; valid slots: {_fmt(valid)}"
            )
    return out


def _fmt(slots) -> str:
    return ", ".join(f"{s}[{b}]" + ("" if c is None else f".conv{c}") for s, b, c in slots)


def _conv_like(conv: nn.Conv2d) -> nn.Conv2d:
    return nn.Conv2d(conv.in_channels, conv.out_channels, conv.kernel_size, conv.stride,
                     conv.padding, bias=conv.bias is not None)


def _moe_layer(experts: list[nn.Module], in_channels: int, cfg: MoELayerConfig) -> MoELayer:
    gate = make_gate(cfg.gate_kind, in_channels, cfg.n_experts)
    return MoELayer(experts, gate, cfg.top_k, cfg.balance_loss, cfg.balance_coeff)


def build_model(config: ModelConfig, seed: int = 0) -> ResNet:
    """Build the architecture and apply every replacement; deterministic in seed.

    Replaced blocks/convs are constructed afresh as experts, so a model with
    replacements does not share weights with the plain model of the same seed.
    """
    plan: dict[tuple[str, int, int | None], MoELayerConfig] = {}
    for rep in config.replacements:
        for slot in _expand(rep, config.arch):
            if slot in plan:
                raise ModelConstructionError(f"slot {_fmt([slot])} replaced more than once")
            plan[slot] = rep.moe
    blocks_with_both = {(s, b) for s, b, c in plan if c is None} & {(s, b) for s, b, c in plan if c is not None}
    if blocks_with_both:
        raise ModelConstructionError(f"block and conv replacements overlap in {sorted(blocks_with_both)}")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ResNet(config.arch, config.num_classes, config.input_shape[0])
        block_cls = _BLOCKS[ARCHS[config.arch]["block"]]
        for (stage, b, c), cfg in sorted(plan.items(), key=lambda kv: (kv[0][0], kv[0][1], -1 if kv[0][2] is None else kv[0][2])):
            seq = model.stages[stage]
            blk = seq[b]
            if c is None:
                in_planes = blk.conv1.in_channels
                planes = blk.conv1.out_channels
                stride = (blk.conv2 if block_cls is Bottleneck else blk.conv1).stride[0]
                experts = [block_cls(in_planes, planes, stride) for _ in range(cfg.n_experts)]
                seq[b] = _moe_layer(experts, in_planes, cfg)
            else:
                name = f"conv{c + 1}"
                conv = getattr(blk, name)
                experts = [_conv_like(conv) for _ in range(cfg.n_experts)]
                setattr(blk, name, _moe_layer(experts, conv.in_channels, cfg))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- cost accounting -----------------------------------------------------------
#
# One multiply-accumulate = 2 FLOPs.  Batch norm (eval-mode affine) costs 2 per
# element, ReLU and residual add 1 per element, GAP 1 per input element.


def _conv_out(conv: nn.Conv2d, shape):
    c, h, w = shape
    kh, kw = conv.kernel_size
    sh, sw = conv.stride
    ph, pw = conv.padding
    return conv.out_channels, (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _numel(shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


def _cost(m: nn.Module, shape, k, name: str, acc: dict[str, int]):
    """Return output shape of ``m`` on a single input of ``shape`` and record FLOPs."""
    def add(key, v):
        acc[key] = acc.get(key, 0) + int(v)

    if isinstance(m, nn.Conv2d):
        out = _conv_out(m, shape)
        kh, kw = m.kernel_size
        flops = 2 * (m.in_channels // m.groups) * kh * kw * _numel(out)
        if m.bias is not None:
            flops += _numel(out)
        add(name, flops)
        return out
    if isinstance(m, nn.BatchNorm2d):
        add(name, 2 * _numel(shape))
        return shape
    if isinstance(m, nn.ReLU):
        add(name, _numel(shape))
        return shape
    if isinstance(m, nn.Linear):
        add(name, 2 * m.in_features * m.out_features + (m.out_features if m.bias is not None else 0))
        return (m.out_features,)
    if isinstance(m, nn.Sequential):
        for i, child in enumerate(m):
            shape = _cost(child, shape, k, f"{name}.{i}", acc)
        return shape
    if isinstance(m, BasicBlock):
        out = _cost(m.conv1, shape, k, f"{name}.conv1", acc)
        out = _cost(m.bn1, out, k, f"{name}.bn1", acc)
        add(f"{name}.relu1", _numel(out))
        out = _cost(m.conv2, out, k, f"{name}.conv2", acc)
        out = _cost(m.bn2, out, k, f"{name}.bn2", acc)
        _cost(m.shortcut, shape, k, f"{name}.shortcut", acc)
        add(f"{name}.add", 2 * _numel(out))  # residual add + final relu
        return out
    if isinstance(m, Bottleneck):
        out = shape
        for i in (1, 2, 3):
            out = _cost(getattr(m, f"conv{i}"), out, k, f"{name}.conv{i}", acc)
            out = _cost(getattr(m, f"bn{i}"), out, k, f"{name}.bn{i}", acc)
            if i < 3:
                add(f"{name}.relu{i}", _numel(out))
        _cost(m.shortcut, shape, k, f"{name}.shortcut", acc)
        add(f"{name}.add", 2 * _numel(out))
        return out
    if isinstance(m, MoELayer):
        n = m.n_experts
        active = m.top_k if k is None else k
        if not 1 <= active <= n:
            raise InvalidArgument(f"{name}: k_active={active} outside [1, {n}]")
        g = m.gate
        if hasattr(g, "fc"):
            add(f"{name}.gate", _numel(shape))  # GAP
            _cost(g.fc, (shape[0],), k, f"{name}.gate", acc)
        else:
            gout = _cost(g.conv, shape, k, f"{name}.gate", acc)
            add(f"{name}.gate", _numel(gout))
        add(f"{name}.route", 3 * n + n)  # softmax + selection
        sub: dict[str, int] = {}
        out = _cost(m.experts[0], shape, k, f"{name}.expert", sub)
        add(f"{name}.experts", active * sum(sub.values()))
        add(f"{name}.combine", (2 * active - 1) * _numel(out))
        return out
    if isinstance(m, ResNet):
        out = _cost(m.stem, shape, k, "stem", acc)
        for sname, stage in m.stages.items():
            out = _cost(stage, out, k, sname, acc)
        add("pool", _numel(out))
        return _cost(m.fc, (out[0],), k, "fc", acc)
    raise InvalidArgument(f"no cost rule for {type(m).__name__} at {name or 'root'}")


def count_cost(model: nn.Module, k_active: int | None = None,
               input_shape: tuple[int, int, int] = (3, 32, 32)) -> CostReport:
    """Parameters over all experts; FLOPs per input assuming ``k_active`` experts
    run in every MoE layer (each layer's own top_k when None)."""
    acc: dict[str, int] = {}
    _cost(model, tuple(input_shape), k_active, "", acc)
    return CostReport(count_parameters(model), sum(acc.values()), acc)


def has_moe(model: nn.Module) -> bool:
    return bool(moe_layers(model))
