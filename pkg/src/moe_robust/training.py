"""Normal and PGD adversarial training with SGD and polynomial LR decay."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attacks import AttackConfig, evaluate, pgd
from .data import Dataset, augment
from .errors import InvalidArgument, NumericalFailure
from .moe import moe_layers, total_balance_loss
from .numerics import first_nonfinite, seeded_generator

log = logging.getLogger(__name__)


def _pgd7() -> AttackConfig:
    return AttackConfig("pgd", 8 / 255, 7, 2 / 255, True)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr0: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_power: float = 1.0
    adversarial: bool = False
    attack: AttackConfig = field(default_factory=_pgd7)
    augment: bool = True
    seed: int = 0
    eval_attack: AttackConfig | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if isinstance(self.eval_attack, dict):
            self.eval_attack = AttackConfig(**self.eval_attack)
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgument("epochs and batch_size must be >= 1")
        if self.lr0 < 0 or self.momentum < 0 or self.weight_decay < 0 or self.lr_power <= 0:
            raise InvalidArgument("learning-rate settings must be nonnegative (lr_power positive)")


@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    balance_loss: dict[str, float]
    lr: float
    train_accuracy: float
    eval_accuracy: float | None
    eval_adv_accuracy: float | None
    importance: dict[str, list[float]]
    counts: dict[str, list[int]]
    expert_grad_norm: dict[str, list[float]]


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord, stream: Path | None = None) -> None:
        self.epochs.append(rec)
        if stream is not None:
            with open(stream, "a") as fh:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")

    @property
    def task_losses(self) -> list[float]:
        return [r.task_loss for r in self.epochs]

    @classmethod
    def read(cls, path) -> "TrainLog":
        with open(path) as fh:
            return cls([EpochRecord(**json.loads(line)) for line in fh if line.strip()])


def lr_schedule(step: int, total: int, lr0: float, p: float = 1.0) -> float:
    """Polynomial decay ``lr0 * (1 - step/total)**p``, floored at zero."""
    if total <= 0:
        return lr0
    frac = 1.0 - step / total
    return lr0 * max(frac, 0.0) ** p


def routing_snapshot(model: nn.Module, dataset: Dataset, batch_size: int = 256):
    """Eval-mode importance mass and top-1 counts per MoE layer over a dataset."""
    layers = moe_layers(model)
    imp = {name: None for name, _ in layers}
    counts = {name: None for name, _ in layers}
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for i in range(0, len(dataset), batch_size):
                model(dataset.images[i : i + batch_size])
                for name, layer in layers:
                    d = layer.last_decision
                    if d is None:
                        continue
                    m = d.scores.double().sum(0)
                    c = torch.bincount(d.top1(), minlength=layer.n_experts)
                    imp[name] = m if imp[name] is None else imp[name] + m
                    counts[name] = c if counts[name] is None else counts[name] + c
    finally:
        model.train(was_training)
    return (
        {k: v.tolist() for k, v in imp.items() if v is not None},
        {k: v.tolist() for k, v in counts.items() if v is not None},
    )


def _expert_grad_sq(model: nn.Module) -> dict[str, list[float]]:
    out = {}
    for name, layer in moe_layers(model):
        norms = []
        for e in layer.experts:
            s = 0.0
            for p in e.parameters():
                if p.grad is not None:
                    s += float(p.grad.double().pow(2).sum())
            norms.append(s)
        out[name] = norms
    return out


def train(
    model: nn.Module,
    train_data: Dataset,
    eval_data: Dataset | None,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    on_checkpoint: Callable[[int, nn.Module], None] | None = None,
) -> tuple[nn.Module, TrainLog]:
    """Train in place and return ``(model, log)``.

    Loss per batch is cross-entropy plus each MoE layer's coefficient times its
    balancing loss on that batch.  With ``cfg.adversarial`` every batch is
    replaced by PGD examples crafted against the current weights (batch norm
    frozen while crafting).
    """
    stream = Path(log_path) if log_path is not None else None
    if stream is not None:
        stream.parent.mkdir(parents=True, exist_ok=True)
        stream.write_text("")
    torch.manual_seed(cfg.seed)
    order_gen = seeded_generator(cfg.seed)
    aug_gen = seeded_generator(cfg.seed + 1)
    attack_gen = seeded_generator(cfg.seed + 2)

    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    n = len(train_data)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total = cfg.epochs * steps_per_epoch
    layers = moe_layers(model)
    trainlog = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        loss_sum = 0.0
        bal_sum = {name: 0.0 for name, _ in layers}
        correct = 0
        grad_sq = {name: [0.0] * layer.n_experts for name, layer in layers}
        lr = cfg.lr0
        for idx in torch.randperm(n, generator=order_gen).split(cfg.batch_size):
            x, y = train_data.images[idx], train_data.labels[idx]
            if cfg.augment:
                x = augment(x, aug_gen)
            if cfg.adversarial:
                x = pgd(model, x, y, cfg.attack, attack_gen)
            lr = lr_schedule(step, total, cfg.lr0, cfg.lr_power)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            try:
                logits = model(x)
            except NumericalFailure as exc:
                named = {"input": x, **dict(model.named_parameters())}
                culprit = first_nonfinite(named) or str(exc)
                raise NumericalFailure(
                    f"non-finite forward pass at epoch {epoch}, step {step}; first non-finite tensor: {culprit}"
                ) from exc
            task = F.cross_entropy(logits, y)
            bal = total_balance_loss(model)
            loss = task if bal is None else task + bal
            if not torch.isfinite(loss):
                named = {"input": x, "logits": logits, "task_loss": task}
                for name, layer in layers:
                    if layer.last_balance_loss is not None:
                        named[f"{name}.balance_loss"] = layer.last_balance_loss
                named.update(dict(model.named_parameters()))
                culprit = first_nonfinite(named) or "loss"
                raise NumericalFailure(f"non-finite loss at epoch {epoch}, step {step}; first non-finite tensor: {culprit}")
            loss.backward()
            for name, sq in _expert_grad_sq(model).items():
                grad_sq[name] = [a + b for a, b in zip(grad_sq[name], sq)]
            opt.step()
            step += 1
            loss_sum += float(task.detach()) * len(idx)
            for name, layer in layers:
                if layer.last_balance_loss is not None:
                    bal_sum[name] += float(layer.last_balance_loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == y).sum())

        rec_eval = rec_adv = None
        imp, counts = {}, {}
        if eval_data is not None and len(eval_data):
            rec_eval = evaluate(model, eval_data)
            if cfg.eval_attack is not None:
                rec_adv = evaluate(model, eval_data, cfg.eval_attack, seed=cfg.seed)
            imp, counts = routing_snapshot(model, eval_data)
        rec = EpochRecord(
            epoch=epoch,
            task_loss=loss_sum / n,
            balance_loss={k: v / n for k, v in bal_sum.items()},
            lr=lr,
            train_accuracy=correct / n,
            eval_accuracy=rec_eval,
            eval_adv_accuracy=rec_adv,
            importance=imp,
            counts=counts,
            expert_grad_norm={k: [s ** 0.5 for s in v] for k, v in grad_sq.items()},
        )
        trainlog.append(rec, stream)
        log.info("epoch %d loss %.4f train acc %.3f eval acc %s", epoch, rec.task_loss, rec.train_accuracy, rec_eval)
        if on_checkpoint is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(epoch, model)
    return model, trainlog
