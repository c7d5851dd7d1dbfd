"""Sparse mixture-of-experts machinery: gates, top-k routing, the sparse
mixture, importance accounting and the balancing losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument, ModelConstructionError, NumericalFailure
from .numerics import gap, topk

GATE_KINDS = ("gap_fc", "conv_gap")
EXPERT_KINDS = ("block", "conv")
BALANCE_LOSSES = ("entropy", "kl", "switch", "none")


@dataclass
class MoELayerConfig:
    n_experts: int = 4
    top_k: int = 2
    gate_kind: str = "gap_fc"
    expert_kind: str = "block"
    balance_loss: str = "entropy"
    balance_coeff: float = 0.01

    def __post_init__(self):
        if self.n_experts < 1:
            raise InvalidArgument(f"n_experts must be >= 1, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise InvalidArgument(f"need 1 <= top_k <= n_experts, got k={self.top_k}, N={self.n_experts}")
        if self.gate_kind not in GATE_KINDS:
            raise InvalidArgument(f"gate_kind must be one of {GATE_KINDS}, got {self.gate_kind!r}")
        if self.expert_kind not in EXPERT_KINDS:
            raise InvalidArgument(f"expert_kind must be one of {EXPERT_KINDS}, got {self.expert_kind!r}")
        if self.balance_loss not in BALANCE_LOSSES:
            raise InvalidArgument(f"balance_loss must be one of {BALANCE_LOSSES}, got {self.balance_loss!r}")
        if self.balance_coeff < 0:
            raise InvalidArgument("balance_coeff must be nonnegative")


@dataclass
class GateDecision:
    """Routing for a batch.

    scores: (B, N) softmax over all experts; selected: (B, k) expert indices in
    descending score order; weights: (B, k) selected scores renormalized to 1.
    """

    scores: torch.Tensor
    selected: torch.Tensor
    weights: torch.Tensor

    @property
    def n_experts(self) -> int:
        return self.scores.shape[-1]

    @property
    def k(self) -> int:
        return self.selected.shape[-1]

    def top1(self) -> torch.Tensor:
        return self.selected[:, 0]


@dataclass
class ImportanceVector:
    mass: torch.Tensor
    batch_size: int

    @property
    def n_experts(self) -> int:
        return self.mass.shape[-1]


# -- gates -------------------------------------------------------------------


def _check_channels(x: torch.Tensor, expected: int) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise InvalidArgument(f"gate expects (B, {expected}, H, W) input, got {tuple(x.shape)}")


def gate_gap_fc(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Logits = FC(GAP(x)); blind to where in the feature map a pattern sits."""
    _check_channels(x, weight.shape[1])
    return F.linear(gap(x), weight, bias)


def gate_conv_gap(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, padding: int | None = None
) -> torch.Tensor:
    """Logits = GAP(conv(x)) with a C -> N convolution."""
    _check_channels(x, weight.shape[1])
    if padding is None:
        padding = weight.shape[-1] // 2
    return gap(F.conv2d(x, weight, bias, padding=padding))


class GapFcGate(nn.Module):
    def __init__(self, in_channels: int, n_experts: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, n_experts)

    def forward(self, x):
        return gate_gap_fc(x, self.fc.weight, self.fc.bias)


class ConvGapGate(nn.Module):
    def __init__(self, in_channels: int, n_experts: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, n_experts, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        return gate_conv_gap(x, self.conv.weight, self.conv.bias, padding=self.conv.padding[0])


def make_gate(kind: str, in_channels: int, n_experts: int) -> nn.Module:
    if kind == "gap_fc":
        return GapFcGate(in_channels, n_experts)
    if kind == "conv_gap":
        return ConvGapGate(in_channels, n_experts)
    raise InvalidArgument(f"unknown gate kind {kind!r}")


# -- routing and mixture -----------------------------------------------------


def route(logits: torch.Tensor, k: int) -> GateDecision:
    """Softmax over all N logits, keep the top k, renormalize their scores."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    if not torch.isfinite(logits).all():
        raise NumericalFailure("gate logits must be finite")
    scores = torch.softmax(logits, dim=-1)
    selected, top = topk(scores, k)
    weights = top / top.sum(dim=-1, keepdim=True)
    return GateDecision(scores, selected, weights)


def moe_forward(
    x: torch.Tensor,
    experts: Sequence[Callable[[torch.Tensor], torch.Tensor]],
    decision: GateDecision,
    counter: list[int] | None = None,
) -> torch.Tensor:
    """Sum of weight * expert(x) over each input's selected experts.

    Each expert runs once on the sub-batch of inputs that selected it and never
    on the others.  ``counter[i]`` (if given) accumulates how many inputs expert
    i processed.
    """
    n = len(experts)
    if decision.n_experts != n:
        raise InvalidArgument(f"decision routes over {decision.n_experts} experts, layer has {n}")
    batch = x.shape[0]
    out = None
    out_shape = None
    for i, expert in enumerate(experts):
        hit = decision.selected == i
        rows = hit.any(dim=-1).nonzero(as_tuple=True)[0]
        if rows.numel() == 0:
            continue
        w = (decision.weights * hit).sum(dim=-1)[rows]
        y = expert(x[rows])
        if counter is not None:
            counter[i] += rows.numel()
        if out is None:
            out_shape = y.shape[1:]
            out = y.new_zeros((batch, *out_shape))
        elif y.shape[1:] != out_shape:
            raise ModelConstructionError(
                f"expert {i} produces shape {tuple(y.shape[1:])}, expected {tuple(out_shape)}"
            )
        out = out.index_add(0, rows, y * w.view(-1, *([1] * (y.dim() - 1))))
    return out


def importance(decision: GateDecision) -> ImportanceVector:
    if decision.scores.shape[0] == 0:
        raise InvalidArgument("importance needs a nonempty batch")
    return ImportanceVector(decision.scores.sum(dim=0), decision.scores.shape[0])


def _distribution(imp: ImportanceVector | torch.Tensor) -> torch.Tensor:
    mass = imp.mass if isinstance(imp, ImportanceVector) else imp
    total = mass.sum()
    if not total > 0:
        raise InvalidArgument("importance has zero total mass")
    return mass / total


def entropy_loss(imp: ImportanceVector | torch.Tensor) -> torch.Tensor:
    """Negative entropy of the normalized importance, in [-ln N, 0]."""
    p = _distribution(imp)
    return (p * torch.log(p.clamp_min(torch.finfo(p.dtype).tiny))).sum()


def kl_loss(imp: ImportanceVector | torch.Tensor) -> torch.Tensor:
    """KL divergence of the normalized importance from the uniform distribution."""
    p = _distribution(imp)
    n = p.shape[-1]
    return (p * torch.log((p * n).clamp_min(torch.finfo(p.dtype).tiny))).sum()


def switch_loss(decision: GateDecision) -> torch.Tensor:
    """N * sum_i f_i * P_i with f the top-1 dispatch fraction (constant) and P
    the batch-mean gate probability."""
    n = decision.n_experts
    if decision.scores.shape[0] == 0:
        raise InvalidArgument("switch loss needs a nonempty batch")
    f = torch.bincount(decision.top1(), minlength=n).to(decision.scores.dtype) / decision.scores.shape[0]
    p = decision.scores.mean(dim=0)
    return n * (f.detach() * p).sum()


def balance_loss(kind: str, decision: GateDecision) -> torch.Tensor:
    if kind == "entropy":
        return entropy_loss(importance(decision))
    if kind == "kl":
        return kl_loss(importance(decision))
    if kind == "switch":
        return switch_loss(decision)
    if kind == "none":
        return decision.scores.new_zeros(())
    raise InvalidArgument(f"unknown balance loss {kind!r}")


# -- layer ---------------------------------------------------------------------


class MoELayer(nn.Module):
    """Gate + N experts, evaluated sparsely.

    After every forward ``last_decision`` holds the routing of the batch and
    ``last_balance_loss`` the (unscaled) balancing loss; both are ``None`` while
    an expert is fixed.
    """

    def __init__(self, experts: Sequence[nn.Module], gate: nn.Module, top_k: int,
                 balance: str = "entropy", balance_coeff: float = 0.01):
        super().__init__()
        if not 1 <= top_k <= len(experts):
            raise InvalidArgument(f"need 1 <= top_k <= {len(experts)}, got {top_k}")
        if balance not in BALANCE_LOSSES:
            raise InvalidArgument(f"unknown balance loss {balance!r}")
        self.experts = nn.ModuleList(experts)
        self.gate = gate
        self.top_k = top_k
        self.balance = balance
        self.balance_coeff = balance_coeff
        self.fixed_expert: int | None = None
        self.eval_counter = [0] * len(experts)
        self.last_decision: GateDecision | None = None
        self.last_balance_loss: torch.Tensor | None = None

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def reset_counter(self) -> None:
        self.eval_counter = [0] * self.n_experts

    def forward(self, x):
        if self.fixed_expert is not None:
            self.last_decision = None
            self.last_balance_loss = None
            self.eval_counter[self.fixed_expert] += x.shape[0]
            return self.experts[self.fixed_expert](x)
        decision = route(self.gate(x), self.top_k)
        self.last_decision = decision
        self.last_balance_loss = balance_loss(self.balance, decision)
        return moe_forward(x, list(self.experts), decision, self.eval_counter)

    def extra_repr(self):
        return f"n_experts={self.n_experts}, top_k={self.top_k}, balance={self.balance}"


def fix_expert(layer: MoELayer, expert_index: int | None) -> MoELayer:
    """Bypass the gate so every input goes to ``expert_index`` with weight 1.

    ``None`` restores gated routing; the gate itself is never touched.
    """
    if expert_index is not None and not 0 <= expert_index < layer.n_experts:
        raise InvalidArgument(f"expert index {expert_index} out of range for {layer.n_experts} experts")
    layer.fixed_expert = expert_index
    return layer


def moe_layers(model: nn.Module) -> list[tuple[str, MoELayer]]:
    return [(name, m) for name, m in model.named_modules() if isinstance(m, MoELayer)]


def total_balance_loss(model: nn.Module) -> torch.Tensor | None:
    """Sum of coefficient * balancing loss over the MoE layers of the last forward."""
    total = None
    for _, layer in moe_layers(model):
        if layer.last_balance_loss is None:
            continue
        term = layer.balance_coeff * layer.last_balance_loss
        total = term if total is None else total + term
    return total
