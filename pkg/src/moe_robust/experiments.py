"""Desk-scale experiment protocols shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .attacks import AttackConfig, evaluate
from .data import Dataset, make_synthetic
from .diagnostics import RoutingReport, routing_report
from .models import ModelConfig, ReplacementSpec, build_model
from .moe import GapFcGate, MoELayer, MoELayerConfig
from .training import TrainConfig, TrainLog, train


@dataclass
class CollapseProtocol:
    """One 4-expert BlockMoE in a TinyResNet, trained normally on synthetic data."""

    n_experts: int = 4
    top_k: int = 2
    balance_coeff: float = 0.01
    stage: str = "conv4_x"
    classes: int = 10
    per_class: int = 60
    eval_per_class: int = 20
    shape: tuple[int, int, int] = (3, 16, 16)
    separation: float = 1.0
    epochs: int = 30
    batch_size: int = 64
    adversarial: bool = False
    data_seed: int = 0

    def model_config(self, loss: str) -> ModelConfig:
        moe = MoELayerConfig(self.n_experts, self.top_k, "gap_fc", "block", loss, self.balance_coeff)
        return ModelConfig("tiny", self.classes, [ReplacementSpec(self.stage, 0, None, moe)], self.shape)

    def datasets(self) -> tuple[Dataset, Dataset]:
        tr = make_synthetic(self.classes, self.per_class, self.shape, self.data_seed, self.separation)
        te = make_synthetic(self.classes, self.eval_per_class, self.shape, self.data_seed, self.separation,
                            split="test")
        return tr, te

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=seed, augment=False,
                           adversarial=self.adversarial)


@dataclass
class CollapseRun:
    loss: str
    seed: int
    report: RoutingReport
    train_accuracy: float
    eval_accuracy: float
    seconds: float
    model: nn.Module = field(repr=False)
    log: TrainLog = field(repr=False)

    @property
    def entropy(self) -> float:
        return self.report.layers[0].entropy

    @property
    def dead(self) -> list[int]:
        return self.report.layers[0].dead

    @property
    def counts(self) -> list[int]:
        return self.report.layers[0].counts

    def collapsed(self) -> bool:
        """All top-1 assignments landed on a single expert."""
        return sum(c > 0 for c in self.counts) == 1


def collapse_run(protocol: CollapseProtocol, loss: str, seed: int, data=None) -> CollapseRun:
    tr, te = data if data is not None else protocol.datasets()
    t0 = time.perf_counter()
    model = build_model(protocol.model_config(loss), seed)
    model, log = train(model, tr, te, protocol.train_config(seed))
    rep = routing_report(model, tr)
    last = log.epochs[-1]
    return CollapseRun(loss, seed, rep, last.train_accuracy, last.eval_accuracy, time.perf_counter() - t0, model, log)


def collapse_study(protocol: CollapseProtocol, losses=("entropy", "switch"), seeds=range(5),
                   progress=None) -> dict[str, list[CollapseRun]]:
    data = protocol.datasets()
    out: dict[str, list[CollapseRun]] = {}
    for loss in losses:
        for s in seeds:
            run = collapse_run(protocol, loss, s, data)
            out.setdefault(loss, []).append(run)
            if progress is not None:
                progress(run)
    return out


def median_entropy(runs: list[CollapseRun]) -> float:
    return statistics.median(r.entropy for r in runs)


# -- adversarial-training benefit ---------------------------------------------------


@dataclass
class BenefitProtocol:
    """TinyResNet with and without one BlockMoE, trained normally and with PGD-7."""

    classes: int = 10
    shape: tuple[int, int, int] = (3, 32, 32)
    epochs: int = 30
    batch_size: int = 128
    stage: str = "conv4_x"
    n_experts: int = 4
    top_k: int = 2
    eval_attack: AttackConfig = field(default_factory=lambda: AttackConfig("pgd", 8 / 255, 20, 2 / 255, True))
    augment: bool = True

    def model_config(self, moe: bool) -> ModelConfig:
        reps = []
        if moe:
            reps = [ReplacementSpec(self.stage, 0, None, MoELayerConfig(self.n_experts, self.top_k))]
        return ModelConfig("tiny", self.classes, reps, self.shape)


@dataclass
class BenefitResult:
    seed: int
    # keys like ("moe", "adversarial")
    clean: dict[tuple[str, str], float]
    robust: dict[tuple[str, str], float]


def benefit_study(protocol: BenefitProtocol, train_data: Dataset, eval_data: Dataset, seeds=range(3),
                  progress=None) -> list[BenefitResult]:
    results = []
    for s in seeds:
        clean, robust = {}, {}
        for arch in ("baseline", "moe"):
            for regime in ("normal", "adversarial"):
                model = build_model(protocol.model_config(arch == "moe"), s)
                cfg = TrainConfig(epochs=protocol.epochs, batch_size=protocol.batch_size, seed=s,
                                  augment=protocol.augment, adversarial=regime == "adversarial")
                train(model, train_data, None, cfg)
                clean[arch, regime] = evaluate(model, eval_data)
                robust[arch, regime] = evaluate(model, eval_data, protocol.eval_attack, seed=s)
                if progress is not None:
                    progress(s, arch, regime, clean[arch, regime], robust[arch, regime])
        results.append(BenefitResult(s, clean, robust))
    return results


# -- two-cluster specialization fixture -------------------------------------------------


class _Head(nn.Module):
    def forward(self, z):
        v = z.flatten(1)[:, :1]
        return torch.cat([-v, v], dim=1)


def two_cluster_fixture(n: int = 400, seed: int = 0, sharpness: float = 20.0) -> tuple[nn.Module, Dataset]:
    """Hand-built 2-expert model whose experts specialize on one cluster each.

    Channel 0 of the 1x1 input carries the cluster sign c, channel 1 a feature v,
    and the label is [c * v > 0].  The gate routes on c, expert 0 passes v and
    expert 1 passes -v, so the gated model is exact while either expert alone
    is right on only one cluster.
    """
    g = torch.Generator().manual_seed(seed)
    c = torch.where(torch.rand(n, generator=g) < 0.5, -1.0, 1.0)
    v = torch.rand(n, generator=g) * 0.9 + 0.1
    v = v * torch.where(torch.rand(n, generator=g) < 0.5, -1.0, 1.0)
    x = torch.stack([c, v], dim=1).view(n, 2, 1, 1)
    y = (c * v > 0).long()

    experts = []
    for sign in (1.0, -1.0):
        conv = nn.Conv2d(2, 1, 1, bias=False)
        with torch.no_grad():
            conv.weight.copy_(torch.tensor([0.0, sign]).view(1, 2, 1, 1))
        experts.append(conv)
    gate = GapFcGate(2, 2)
    with torch.no_grad():
        gate.fc.weight.copy_(torch.tensor([[sharpness, 0.0], [-sharpness, 0.0]]))
        gate.fc.bias.zero_()
    model = nn.Sequential(MoELayer(experts, gate, top_k=1, balance="none"), _Head())
    return model, Dataset(x, y, 2, "test")
