"""Adversarial, consistency and self-supervision objectives plus the ensemble rule.

All functions take network outputs, not networks. Arguments that act as
fixed targets are detached here; inputs that must not carry gradient into
an upstream network have to be detached by the caller before that network
is applied (see :mod:`iscl.trainer`).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeError


def _check_scores(*scores: torch.Tensor):
    for s in scores:
        if s.numel() == 0:
            raise ValueError("score vector must be non-empty")


def _same_shape(*ts: torch.Tensor):
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"shape mismatch: {tuple(ts[0].shape)} vs {tuple(t.shape)}")


def _mae(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


def gen_adv_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Hinge generator loss ``-mean(D(fake))``."""
    _check_scores(fake_scores)
    return -fake_scores.mean()


def cycle_loss(x, x_rec, y, y_rec) -> torch.Tensor:
    return _mae(x, x_rec) + _mae(y, y_rec)


def bypass_loss(f_x, pseudo_clean, y, f_pseudo_noisy) -> torch.Tensor:
    """``MAE(F(x), x - H(x)) + MAE(y, F(y + H(x)))``; the extractor's pseudo-clean is a constant."""
    return _mae(f_x, pseudo_clean.detach()) + _mae(y, f_pseudo_noisy)


def disc_hinge_loss(real_scores, fake_scores) -> torch.Tensor:
    _check_scores(real_scores, fake_scores)
    return torch.relu(1.0 - real_scores).mean() + torch.relu(1.0 + fake_scores).mean()


def boost_loss(scores_fake_clean, scores_fake_noisy) -> torch.Tensor:
    """Extra negatives for the discriminators: ``D_Y(x - H(x))`` and ``D_X(y + H(x))``."""
    _check_scores(scores_fake_clean, scores_fake_noisy)
    return torch.relu(1.0 + scores_fake_clean).mean() + torch.relu(1.0 + scores_fake_noisy).mean()


def pseudo_noise_loss(h_x, x, f_x) -> torch.Tensor:
    """``MAE(H(x), x - F(x))`` with the pseudo-noise label held fixed."""
    _same_shape(h_x, x, f_x)
    return _mae(h_x, (x - f_x).detach())


def noise_consistency_loss(g_y, y, h_g_y) -> torch.Tensor:
    """``MAE(G(y) - y, H(G(y)))`` with the synthetic noise ``G(y) - y`` held fixed."""
    _same_shape(g_y, y, h_g_y)
    return _mae((g_y - y).detach(), h_g_y)


def ensemble_denoise(x, f_x, h_x, gamma: float):
    """``gamma * F(x) + (1 - gamma) * (x - H(x))``; works on tensors and arrays."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return gamma * f_x + (1.0 - gamma) * (x - h_x)


@dataclass
class LossBreakdown:
    """Scalar values of every objective term for one iteration.

    Terms belonging to disabled ablation components stay ``None``.
    """

    l_F: float | None = None
    l_G: float | None = None
    l_cycle: float | None = None
    l_bypass: float | None = None
    l_nested: float | None = None
    l_gen_total: float | None = None
    l_DX: float | None = None
    l_DY: float | None = None
    l_bst: float | None = None
    l_dis_total: float | None = None
    l_pseudo: float | None = None
    l_nc: float | None = None
    l_self_total: float | None = None
    lam: float = 30.0

    TERMS = (
        "l_F", "l_G", "l_cycle", "l_bypass", "l_nested", "l_gen_total",
        "l_DX", "l_DY", "l_bst", "l_dis_total", "l_pseudo", "l_nc", "l_self_total",
    )

    def present(self) -> set[str]:
        return {k for k in self.TERMS if getattr(self, k) is not None}

    def values(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in self.TERMS}

    def check_identities(self) -> None:
        """Raise ``AssertionError`` if a decomposition identity is violated."""
        z = lambda v: 0.0 if v is None else v  # noqa: E731
        if self.l_nested is not None:
            assert self.l_nested == z(self.l_cycle) + z(self.l_bypass)
        if self.l_gen_total is not None:
            assert self.l_gen_total == self.l_F + self.l_G + self.lam * self.l_nested
        if self.l_dis_total is not None:
            assert self.l_dis_total == self.l_DX + self.l_DY + z(self.l_bst)
        if self.l_self_total is not None:
            assert self.l_self_total == z(self.l_pseudo) + z(self.l_nc)
        for k in ("l_cycle", "l_bypass", "l_nested", "l_pseudo", "l_nc", "l_self_total"):
            v = getattr(self, k)
            assert v is None or v >= 0, k

    def finite(self) -> bool:
        return all(v is None or v == v and abs(v) != float("inf") for v in self.values().values())

    def max_abs(self) -> float:
        vals = [abs(v) for v in self.values().values() if v is not None]
        return max(vals) if vals else 0.0


def compose_totals(b: LossBreakdown) -> LossBreakdown:
    """Fill the totals from the individual terms using plain float arithmetic."""
    z = lambda v: 0.0 if v is None else v  # noqa: E731
    if b.l_cycle is not None:
        b.l_nested = b.l_cycle + z(b.l_bypass)
        b.l_gen_total = b.l_F + b.l_G + b.lam * b.l_nested
    if b.l_DX is not None:
        b.l_dis_total = b.l_DX + b.l_DY + z(b.l_bst)
    if b.l_pseudo is not None or b.l_nc is not None:
        b.l_self_total = z(b.l_pseudo) + z(b.l_nc)
    return b

