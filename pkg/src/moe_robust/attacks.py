"""l-infinity white-box attacks (PGD, AutoPGD) and accuracy evaluation."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidArgument
from .numerics import seeded_generator

ATTACK_FAMILIES = ("pgd", "autopgd")


@dataclass
class AttackConfig:
    family: str = "pgd"
    epsilon: float = 8 / 255
    steps: int = 20
    step_size: float = 2 / 255
    random_start: bool = True
    loss: str = "cross_entropy"
    momentum: float = 0.75  # autopgd only
    rho: float = 0.75  # autopgd only

    def __post_init__(self):
        if self.family not in ATTACK_FAMILIES:
            raise InvalidArgument(f"attack family must be one of {ATTACK_FAMILIES}, got {self.family!r}")
        if self.epsilon < 0 or self.steps < 0:
            raise InvalidArgument("epsilon and steps must be nonnegative")
        if self.family == "pgd" and self.steps > 0 and not self.step_size > 0:
            raise InvalidArgument("pgd needs step_size > 0")
        if self.loss != "cross_entropy":
            raise InvalidArgument(f"unsupported attack loss {self.loss!r}")


def pgd_config(steps: int, epsilon: float = 8 / 255, step_size: float = 2 / 255, random_start: bool = True):
    return AttackConfig("pgd", epsilon, steps, step_size, random_start)


@contextlib.contextmanager
def eval_mode(model: nn.Module):
    """Freeze batch-norm statistics for the duration of an attack."""
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)


def ball_bounds(x: torch.Tensor, eps: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-coordinate bounds of B_inf(x, eps) intersected with [0, 1].

    Bounds are representable in x's dtype and satisfy |b - x| <= eps exactly in
    real arithmetic, so clamping to them can never overshoot the ball by an ulp.
    """
    xd = x.double()
    lo = (xd - eps).clamp_min(0.0).to(x.dtype)
    hi = (xd + eps).clamp_max(1.0).to(x.dtype)
    for _ in range(4):
        bad = (xd - lo.double()) > eps
        if not bad.any():
            break
        lo = torch.where(bad, torch.nextafter(lo, torch.full_like(lo, float("inf"))), lo)
    for _ in range(4):
        bad = (hi.double() - xd) > eps
        if not bad.any():
            break
        hi = torch.where(bad, torch.nextafter(hi, torch.full_like(hi, float("-inf"))), hi)
    # x itself may sit outside [0, 1] only if the caller broke the precondition
    lo = torch.minimum(lo, x.clamp(0, 1))
    hi = torch.maximum(hi, x.clamp(0, 1))
    return lo, hi


def _loss_and_grad(model, x, y):
    x = x.detach().requires_grad_(True)
    logits = model(x)
    losses = F.cross_entropy(logits, y, reduction="none")
    if not losses.requires_grad:
        raise ConfigError("model output does not depend differentiably on its input")
    (grad,) = torch.autograd.grad(losses.sum(), x, allow_unused=True)
    if grad is None:
        raise ConfigError("model output does not depend differentiably on its input")
    return losses.detach(), grad.detach()


def _random_start(x, lo, hi, eps, g):
    noise = (torch.rand(x.shape, generator=g, dtype=x.dtype) * 2 - 1) * eps
    return torch.minimum(torch.maximum(x + noise, lo), hi)


def pgd(model: nn.Module, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig,
        generator: torch.Generator | None = None) -> torch.Tensor:
    """Sign-gradient ascent on the cross-entropy, projected after every step."""
    x = x.detach()
    if cfg.epsilon == 0 or cfg.steps == 0 and not cfg.random_start:
        return x.clone()
    g = generator if generator is not None else seeded_generator(0)
    lo, hi = ball_bounds(x, cfg.epsilon)
    with eval_mode(model):
        x_adv = _random_start(x, lo, hi, cfg.epsilon, g) if cfg.random_start else x.clone()
        for _ in range(cfg.steps):
            _, grad = _loss_and_grad(model, x_adv, y)
            x_adv = torch.minimum(torch.maximum(x_adv + cfg.step_size * grad.sign(), lo), hi)
    return x_adv.detach()


@dataclass
class APGDResult:
    x_adv: torch.Tensor
    best_loss: torch.Tensor
    # per-sample best loss after each iteration; index 0 is the starting point
    trace: list[torch.Tensor] = field(default_factory=list)
    checkpoints: list[int] = field(default_factory=list)


def apgd_checkpoints(steps: int) -> list[int]:
    """Iterations at which AutoPGD may halve its step size."""
    p = [0.0, 0.22]
    while True:
        nxt = p[-1] + max(p[-1] - p[-2] - 0.03, 0.06)
        if nxt > 1:
            break
        p.append(nxt)
    return sorted({int(round(q * steps)) for q in p[1:] if 0 < int(round(q * steps)) <= steps})


def autopgd_run(model: nn.Module, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig,
                generator: torch.Generator | None = None) -> APGDResult:
    """AutoPGD with cross-entropy: momentum steps, step-size halving at
    checkpoints when progress stalls, restart from the best point so far."""
    x = x.detach()
    n = x.shape[0]
    view = (n,) + (1,) * (x.dim() - 1)
    g = generator if generator is not None else seeded_generator(0)
    eps = cfg.epsilon
    lo, hi = ball_bounds(x, eps)

    def proj(z):
        return torch.minimum(torch.maximum(z, lo), hi)

    with eval_mode(model):
        x0 = _random_start(x, lo, hi, eps, g) if (cfg.random_start and eps > 0) else x.clone()
        loss0, grad = _loss_and_grad(model, x0, y)
        best_x, best_loss = x0.clone(), loss0.clone()
        trace = [best_loss.clone()]
        if eps == 0 or cfg.steps == 0:
            return APGDResult(best_x, best_loss, trace, [])

        checkpoints = apgd_checkpoints(cfg.steps)
        eta = torch.full(view, 2.0 * eps, dtype=x.dtype)
        x_prev = x0.clone()
        x_cur = proj(x0 + eta * grad.sign())
        loss_cur, grad = _loss_and_grad(model, x_cur, y)
        improved = loss_cur > best_loss
        successes = improved.to(torch.long)
        best_x = torch.where(improved.view(view), x_cur, best_x)
        best_loss = torch.maximum(best_loss, loss_cur)
        trace.append(best_loss.clone())

        last_cp = 0
        best_at_cp = loss0.clone()
        eta_reduced_at_cp = torch.zeros(n, dtype=torch.bool)
        alpha = cfg.momentum
        for k in range(1, cfg.steps):
            z = proj(x_cur + eta * grad.sign())
            x_next = proj(x_cur + alpha * (z - x_cur) + (1 - alpha) * (x_cur - x_prev))
            x_prev, x_cur = x_cur, x_next
            loss_new, grad = _loss_and_grad(model, x_cur, y)
            successes += (loss_new > loss_cur).to(torch.long)
            loss_cur = loss_new
            improved = loss_new > best_loss
            best_x = torch.where(improved.view(view), x_cur, best_x)
            best_loss = torch.maximum(best_loss, loss_new)
            trace.append(best_loss.clone())

            if k + 1 in checkpoints:
                span = k + 1 - last_cp
                cond1 = successes.to(x.dtype) < cfg.rho * span
                cond2 = (~eta_reduced_at_cp) & (best_at_cp >= best_loss)
                halve = cond1 | cond2
                eta = torch.where(halve.view(view), eta / 2, eta)
                # restart halved samples from their best point
                x_cur = torch.where(halve.view(view), best_x, x_cur)
                x_prev = torch.where(halve.view(view), best_x, x_prev)
                if halve.any():
                    loss_cur, grad = _loss_and_grad(model, x_cur, y)
                eta_reduced_at_cp = halve
                best_at_cp = best_loss.clone()
                successes.zero_()
                last_cp = k + 1
    return APGDResult(best_x.detach(), best_loss, trace, checkpoints)


def autopgd(model: nn.Module, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig,
            generator: torch.Generator | None = None) -> torch.Tensor:
    return autopgd_run(model, x, y, cfg, generator).x_adv


def attack(model, x, y, cfg: AttackConfig | None, generator=None) -> torch.Tensor:
    if cfg is None:
        return x
    if cfg.family == "pgd":
        return pgd(model, x, y, cfg, generator)
    return autopgd(model, x, y, cfg, generator)


def evaluate(model: nn.Module, dataset, attack_cfg: AttackConfig | None = None,
             batch_size: int = 256, seed: int = 0) -> float:
    """Fraction of (possibly attacked) inputs classified correctly, in eval mode."""
    n = len(dataset)
    if n == 0:
        raise InvalidArgument("cannot evaluate on an empty dataset")
    g = seeded_generator(seed)
    correct = 0
    with eval_mode(model):
        for i in range(0, n, batch_size):
            x = dataset.images[i : i + batch_size]
            y = dataset.labels[i : i + batch_size]
            x = attack(model, x, y, attack_cfg, g)
            with torch.no_grad():
                correct += int((model(x).argmax(dim=1) == y).sum())
    return correct / n
