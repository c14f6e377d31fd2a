"""Learning-rate schedule, RAdam construction, SWA and Lookahead weight averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import torch
import torch.nn as nn

from .errors import ShapeError


@dataclass(frozen=True)
class OptimizerSpec:
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")


@dataclass
class AveragingState:
    swa_start_epoch: int
    cycle_length: int
    lookahead_period: int = 5
    lookahead_alpha: float = 0.5
    n_models: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lookahead_alpha <= 1.0:
            raise ValueError("lookahead_alpha must be in [0, 1]")
        if self.cycle_length < 1 or self.lookahead_period < 1:
            raise ValueError("cycle length and lookahead period must be >= 1")


def lr_at(iteration: int, total_iterations: int, spec: OptimizerSpec = OptimizerSpec()) -> float:
    """Linear decay from ``lr_start`` at iteration 0 to ``lr_end`` at ``total_iterations``."""
    if total_iterations <= 0:
        raise ValueError("total_iterations must be positive")
    if not 0 <= iteration <= total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations}]")
    if iteration == total_iterations:
        return spec.lr_end
    return spec.lr_start + (spec.lr_end - spec.lr_start) * iteration / total_iterations


class RAdam(torch.optim.Optimizer):
    """Rectified Adam that holds parameters still while the variance rectifier is undefined.

    ``torch.optim.RAdam`` falls back to un-normalised momentum SGD for the
    first few steps; with a cycle weight of 30 those raw-gradient steps throw
    the near-identity generators far off the data range. Here the early steps
    only accumulate moments (``degenerate_to_sgd=False`` in the reference
    implementation); afterwards the update matches ``torch.optim.RAdam``.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, degenerate_to_sgd=False):
        if lr <= 0:
            raise ValueError("lr must be positive")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, degenerate_to_sgd=degenerate_to_sgd))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            b1, b2 = group["betas"]
            rho_inf = 2.0 / (1.0 - b2) - 1.0
            for p in group["params"]:
                if p.grad is None:
                    continue
                st = self.state[p]
                if not st:
                    st["step"] = torch.zeros((), dtype=torch.float32)
                    st["exp_avg"] = torch.zeros_like(p)
                    st["exp_avg_sq"] = torch.zeros_like(p)
                st["step"] += 1
                t = int(st["step"].item())
                m, v = st["exp_avg"], st["exp_avg_sq"]
                m.lerp_(p.grad, 1 - b1)
                v.mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
                m_hat = m / (1 - b1**t)
                rho_t = rho_inf - 2 * t * b2**t / (1 - b2**t)
                if rho_t > 5.0:
                    rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
                    denom = (v / (1 - b2**t)).sqrt().add_(group["eps"])
                    p.addcdiv_(m_hat, denom, value=-group["lr"] * rect)
                elif group["degenerate_to_sgd"]:
                    p.add_(m_hat, alpha=-group["lr"])
        return loss


def make_radam(params: Iterable[torch.nn.Parameter], spec: OptimizerSpec = OptimizerSpec()) -> RAdam:
    return RAdam(list(params), lr=spec.lr_start, betas=spec.betas, eps=spec.eps)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


# -------------------------------------------------- functional averaging


def _check_congruent(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]):
    if a.keys() != b.keys():
        raise ShapeError("parameter sets have different names")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ShapeError(f"{k}: shape {tuple(a[k].shape)} vs {tuple(b[k].shape)}")


def swa_absorb(phi: Mapping[str, torch.Tensor], theta: Mapping[str, torch.Tensor],
               n_models: int) -> tuple[dict[str, torch.Tensor], int]:
    """Running mean update ``(phi * n + theta) / (n + 1)``."""
    _check_congruent(phi, theta)
    out = {k: (phi[k] * n_models + theta[k]) / (n_models + 1) for k in phi}
    return out, n_models + 1


def lookahead_sync(phi: Mapping[str, torch.Tensor], theta: Mapping[str, torch.Tensor],
                   alpha: float) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """Slow weights step toward the fast ones, then fast weights restart from the slow ones."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    _check_congruent(phi, theta)
    slow = {k: phi[k] + alpha * (theta[k] - phi[k]) for k in phi}
    return slow, {k: v.clone() for k, v in slow.items()}


# ---------------------------------------------------- in-place on modules


def _float_params(net: nn.Module) -> list[torch.Tensor]:
    return [p for p in net.parameters()]


@torch.no_grad()
def copy_weights_(dst: nn.Module, src: nn.Module) -> None:
    """Copy parameters and buffers of ``src`` into ``dst``."""
    dst.load_state_dict(src.state_dict())


@torch.no_grad()
def swa_absorb_(phi_net: nn.Module, theta_net: nn.Module, n_models: int) -> int:
    for p, t in zip(_float_params(phi_net), _float_params(theta_net)):
        if p.shape != t.shape:
            raise ShapeError("shadow and live networks differ in shape")
        p.mul_(n_models).add_(t).div_(n_models + 1)
    return n_models + 1


@torch.no_grad()
def lookahead_sync_(phi_net: nn.Module, theta_net: nn.Module, alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    for p, t in zip(_float_params(phi_net), _float_params(theta_net)):
        p.add_(t - p, alpha=alpha)
        t.copy_(p)
    for bp, bt in zip(phi_net.buffers(), theta_net.buffers()):
        bp.copy_(bt)


@torch.no_grad()
def refresh_norm_statistics(net: nn.Module, batches: Iterable[torch.Tensor]) -> None:
    """Recompute running BN statistics of ``net`` as an exact average over ``batches``."""
    from .models import BatchInstanceNorm2d

    norms = [m for m in net.modules() if isinstance(m, BatchInstanceNorm2d)]
    if not norms:
        return
    saved = [(m.momentum, m.training) for m in norms]
    was_training = net.training
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    net.train()
    seen = False
    for batch in batches:
        net(batch)
        seen = True
    for m, (mom, _) in zip(norms, saved):
        m.momentum = mom
    net.train(was_training)
    if not seen:
        raise ValueError("no batches supplied for statistics refresh")
