"""The cooperative training loop for F, G, H and the two discriminators.

Each iteration runs three sequential updates on one unpaired batch pair:
the generators ``F``/``G``, then the discriminators ``D_X``/``D_Y``, then
the noise extractor ``H``. Generators are averaged with SWA from epoch
``swa_start`` on; discriminators and the extractor are Lookahead-synced
every ``lookahead_k`` global steps.

Ablation flags follow the cumulative ladder: ``B`` trains ``H`` on
pseudo-noise labels, ``C`` adds bypass consistency to the generator
objective, ``D`` adds discriminator boosting and ``E`` adds noise
consistency to the extractor objective. No flags is a plain CycleGAN.
"""

from __future__ import annotations

import contextlib
import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .data import DatasetSplit, Domain, PatchBatch, batch_for, center_crop
from .errors import DivergenceError, EvaluationUnavailable
from .metrics import MetricsRecord
from .models import NETS, ModelBundle, ModelConfig, clamp_gates_
from .optim import (
    AveragingState,
    OptimizerSpec,
    copy_weights_,
    lookahead_sync_,
    lr_at,
    make_radam,
    refresh_norm_statistics,
    set_lr,
    swa_absorb_,
)
from .seeding import substream_seed

log = logging.getLogger(__name__)

FLAGS = ("B", "C", "D", "E")
LADDER = (frozenset(), frozenset("B"), frozenset("BC"), frozenset("BCD"), frozenset("BCDE"))
DIVERGENCE_LIMIT = 1e4
DIVERGENCE_PATIENCE = 10


def parse_flags(spec: str | Iterable[str] | None) -> frozenset[str]:
    """``"A"``, ``"A+B+C"``, ``"BCD"`` or an iterable of letters -> flag set."""
    if spec is None:
        return frozenset(FLAGS)
    if isinstance(spec, str):
        letters = [c for c in spec.upper() if c.isalpha()]
    else:
        letters = [str(c).upper() for c in spec]
    flags = frozenset(c for c in letters if c != "A")
    unknown = flags - set(FLAGS)
    if unknown:
        raise ValueError(f"unknown ablation flags {sorted(unknown)}")
    return flags


def flags_label(flags: Iterable[str]) -> str:
    return "+".join(["(A)"] + [f"({c})" for c in sorted(flags)])


@dataclass
class TrainConfig:
    lam: float = 30.0
    gamma: float = 0.5
    batch_size: int = 8
    patch: int = 64
    n_epochs: int = 30
    n_iters: int | None = None
    swa_start: int | None = None
    swa_cycle: int | None = None
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    seed: int = 0
    flags: frozenset = frozenset(FLAGS)
    early_stop_patience: int | None = None
    log_every: int = 10
    augment: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.flags = parse_flags(self.flags)
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for batch statistics")
        if self.n_epochs < 0:
            raise ValueError("n_epochs must be >= 0")
        if self.flags and "B" not in self.flags:
            raise ValueError("flags C, D and E build on B (train the extractor)")
        if self.swa_start is not None and self.swa_start > self.n_epochs:
            raise ValueError("swa_start must not exceed n_epochs")

    def resolved(self, split: DatasetSplit | None = None) -> "TrainConfig":
        """Copy with every ``None`` default made concrete."""
        n_iters = self.n_iters
        if n_iters is None:
            n_noisy = len(split.noisy_group) if split is not None else self.batch_size
            n_iters = max(1, math.ceil(n_noisy / self.batch_size))
        swa_start = self.swa_start if self.swa_start is not None else math.ceil(0.5 * self.n_epochs)
        swa_cycle = self.swa_cycle if self.swa_cycle is not None else n_iters
        return dataclasses.replace(self, n_iters=n_iters, swa_start=swa_start, swa_cycle=swa_cycle)

    @property
    def trains_extractor(self) -> bool:
        return "B" in self.flags

    @property
    def optimizer_spec(self) -> OptimizerSpec:
        return OptimizerSpec(lr_start=self.lr_start, lr_end=self.lr_end)


@dataclass
class TrainState:
    config: TrainConfig
    bundle: ModelBundle
    optimizers: dict[str, torch.optim.Optimizer]
    averaging: AveragingState
    epoch: int = 0
    step: int = 0  # completed iterations, all epochs
    t: int = 0  # completed iterations in the current epoch
    best_val_psnr: float | None = None
    best_epoch: int | None = None
    epochs_since_best: int = 0
    anomalies: int = 0
    best_state: dict[str, torch.Tensor] | None = None
    log_rows: list[dict] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def total_iterations(self) -> int:
        return self.config.n_epochs * self.config.n_iters


def init_state(config: TrainConfig, split: DatasetSplit | None = None, bundle: ModelBundle | None = None) -> TrainState:
    cfg = config.resolved(split)
    if bundle is None:
        bundle = ModelBundle.build(cfg.model, seed=substream_seed(cfg.seed, "init"))
    spec = cfg.optimizer_spec
    th = bundle.theta
    optimizers = {
        "gen": make_radam([*th["F"].parameters(), *th["G"].parameters()], spec),
        "dis": make_radam([*th["D_X"].parameters(), *th["D_Y"].parameters()], spec),
        "ext": make_radam(th["H"].parameters(), spec),
    }
    averaging = AveragingState(
        swa_start_epoch=cfg.swa_start,
        cycle_length=cfg.swa_cycle,
        lookahead_period=cfg.lookahead_k,
        lookahead_alpha=cfg.lookahead_alpha,
    )
    return TrainState(cfg, bundle, optimizers, averaging)


# ------------------------------------------------------------ loss graphs


@contextlib.contextmanager
def frozen(*nets: nn.Module):
    """Temporarily stop gradient accumulation into the parameters of ``nets``."""
    params = [p for n in nets for p in n.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


Nets = Mapping[str, Callable[[torch.Tensor], torch.Tensor]]


def _no_grad(cache, key, fn):
    """``fn()`` without gradients, memoised in ``cache`` when one is given."""
    if cache is not None and key in cache:
        return cache[key]
    with torch.no_grad():
        out = fn()
    if cache is not None:
        cache[key] = out
    return out


def generator_terms(nets: Nets, x, y, flags=frozenset(FLAGS), cache=None) -> dict[str, torch.Tensor]:
    """Terms of the F/G objective; the extractor output enters as a constant.

    ``cache`` lets one iteration share no-grad outputs of networks whose
    weights did not change in between.
    """
    F, G = nets["F"], nets["G"]
    f_x = F(x)
    g_y = G(y)
    terms = {
        "l_F": L.gen_adv_loss(nets["D_Y"](f_x)),
        "l_G": L.gen_adv_loss(nets["D_X"](g_y)),
        "l_cycle": L.cycle_loss(x, G(f_x), y, F(g_y)),
    }
    if "C" in flags:
        n = _no_grad(cache, "H(x)", lambda: nets["H"](x))
        terms["l_bypass"] = L.bypass_loss(f_x, x - n, y, F(y + n))
    return terms


def discriminator_terms(nets: Nets, x, y, flags=frozenset(FLAGS), cache=None) -> dict[str, torch.Tensor]:
    """Hinge terms for D_X/D_Y; every generated sample is a constant."""
    DX, DY = nets["D_X"], nets["D_Y"]
    fake_clean = _no_grad(cache, "F(x)", lambda: nets["F"](x))
    fake_noisy = _no_grad(cache, "G(y)", lambda: nets["G"](y))
    terms = {
        "l_DY": L.disc_hinge_loss(DY(y), DY(fake_clean)),
        "l_DX": L.disc_hinge_loss(DX(x), DX(fake_noisy)),
    }
    if "D" in flags:
        n = _no_grad(cache, "H(x)", lambda: nets["H"](x))
        terms["l_bst"] = L.boost_loss(DY(x - n), DX(y + n))
    return terms


def extractor_terms(nets: Nets, x, y, flags=frozenset(FLAGS), cache=None) -> dict[str, torch.Tensor]:
    """Self-supervised terms for H; F and G only provide fixed labels/inputs."""
    H = nets["H"]
    f_x = _no_grad(cache, "F(x)", lambda: nets["F"](x))
    terms = {"l_pseudo": L.pseudo_noise_loss(H(x), x, f_x)}
    if "E" in flags:
        g_y = _no_grad(cache, "G(y)", lambda: nets["G"](y))
        terms["l_nc"] = L.noise_consistency_loss(g_y, y, H(g_y))
    return terms


def generator_objective(terms, lam):
    return terms["l_F"] + terms["l_G"] + lam * (terms["l_cycle"] + terms.get("l_bypass", 0.0))


def discriminator_objective(terms):
    return terms["l_DY"] + terms["l_DX"] + terms.get("l_bst", 0.0)


def extractor_objective(terms):
    return terms["l_pseudo"] + terms.get("l_nc", 0.0)


# -------------------------------------------------------------- iteration


def _record(breakdown: L.LossBreakdown, terms: Mapping[str, torch.Tensor]):
    for k, v in terms.items():
        setattr(breakdown, k, float(v.detach()))


def _step(optimizer, objective, breakdown, stage):
    if not torch.isfinite(objective):
        raise DivergenceError(f"non-finite {stage} loss", L.compose_totals(breakdown))
    optimizer.zero_grad(set_to_none=True)
    objective.backward()
    optimizer.step()


def _as_tensor(batch, domain: Domain) -> torch.Tensor:
    if isinstance(batch, PatchBatch):
        if batch.domain is not domain:
            raise ValueError(f"expected a {domain.name} batch, got {batch.domain.name}")
        return batch.tensor()
    return batch


def train_iteration(state: TrainState, batch_x, batch_y) -> tuple[TrainState, L.LossBreakdown]:
    """One pass over the three updates, plus SWA and Lookahead bookkeeping."""
    cfg = state.config
    x = _as_tensor(batch_x, Domain.NOISY_X)
    y = _as_tensor(batch_y, Domain.CLEAN_Y)
    th = state.bundle.theta
    F, G, H, DX, DY = (th[k] for k in NETS)
    flags = cfg.flags
    bd = L.LossBreakdown(lam=cfg.lam)
    e, t = state.epoch, state.t + 1

    lr = lr_at(state.step, max(1, state.total_iterations), cfg.optimizer_spec)
    for opt in state.optimizers.values():
        set_lr(opt, lr)

    # H(x) is shared by steps (1) and (3): H only moves in step (4)
    cache = {}

    # (1) generators
    F.train(), G.train(), H.eval(), DX.train(), DY.train()
    with frozen(DX, DY, H):
        terms = generator_terms(th, x, y, flags, cache)
    _record(bd, terms)
    _step(state.optimizers["gen"], generator_objective(terms, cfg.lam), bd, "generator")
    clamp_gates_(F, G)

    # (2) stochastic weight averaging of the generators
    av = state.averaging
    if e >= av.swa_start_epoch:
        s = t + (e - av.swa_start_epoch) * cfg.n_iters
        if s % av.cycle_length == 0:
            swa_absorb_(state.bundle.phi["F"], F, av.n_models)
            swa_absorb_(state.bundle.phi["G"], G, av.n_models)
            av.n_models += 1

    # (3) discriminators
    F.eval(), G.eval()
    with frozen(F, G, H):
        terms = discriminator_terms(th, x, y, flags, cache)
    _record(bd, terms)
    _step(state.optimizers["dis"], discriminator_objective(terms), bd, "discriminator")

    # (4) extractor
    if cfg.trains_extractor:
        H.train()
        with frozen(F, G, DX, DY):
            terms = extractor_terms(th, x, y, flags, cache)
        _record(bd, terms)
        _step(state.optimizers["ext"], extractor_objective(terms), bd, "extractor")
        clamp_gates_(H)
        H.eval()

    # (5) lookahead
    if (t + e * cfg.n_iters) % av.lookahead_period == 0:
        for k in ("D_X", "D_Y", "H"):
            lookahead_sync_(state.bundle.phi[k], th[k], av.lookahead_alpha)

    state.t = t
    state.step += 1
    return state, L.compose_totals(bd)


# ------------------------------------------------------------- validation


def deploy_nets(state: TrainState, split: DatasetSplit | None = None) -> None:
    """Bring the shadow denoiser up to date for evaluation.

    Before SWA starts the shadow simply mirrors the live generator; after
    that its normalization statistics are recomputed over the noisy
    training images.
    """
    b = state.bundle
    av = state.averaging
    if state.epoch < av.swa_start_epoch or av.n_models == 0:
        copy_weights_(b.phi["F"], b.theta["F"])
        copy_weights_(b.phi["G"], b.theta["G"])
    elif split is not None:
        refresh_norm_statistics(b.phi["F"], training_batches(split, split.noisy_group, Domain.NOISY_X, state.config))
    b.phi["F"].eval()
    b.phi["H"].eval()


def training_batches(split: DatasetSplit, group, domain, cfg: TrainConfig) -> list[torch.Tensor]:
    """Center patches of a training group stacked into batches of the batch size."""
    p = cfg.patch
    crops = []
    for ident in group:
        px = split.image(ident, domain).pixels
        h, w = px.shape
        r, c = (h - p) // 2, (w - p) // 2
        crops.append(px[r:r + p, c:c + p])
    arr = torch.from_numpy(np.stack(crops)[:, None].astype(np.float32))
    m = cfg.batch_size
    out = [arr[i:i + m] for i in range(0, len(arr), m)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = torch.cat([out[-2], out.pop()])
    return out


@torch.no_grad()
def denoise(bundle: ModelBundle, x: torch.Tensor, use_shadow: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(F(x), H(x))`` of the deployable networks in eval mode."""
    nets = bundle.phi if use_shadow else bundle.theta
    F, H = nets["F"].eval(), nets["H"].eval()
    return F(x), H(x)


def validate(state: TrainState, split: DatasetSplit, gamma: float | None = None,
             run_id: str = "", refresh: bool = True) -> MetricsRecord:
    """PSNR/SSIM of F-only, extractor-only and ensemble outputs on full validation images.

    Without a trained extractor (no ``B`` flag) the deployed output is F
    alone, so ``ens`` repeats F and ``H`` stays empty.
    """
    cfg = state.config
    gamma = cfg.gamma if gamma is None else gamma
    record = MetricsRecord(run_id=run_id, ablation_flags=cfg.flags, gamma=gamma, epoch=state.epoch)
    if not split.has_references:
        record.available = False
        return record
    if refresh:
        deploy_nets(state, split)
    align = state.bundle.phi["F"].alignment
    for noisy_id, clean_id in zip(split.val_noisy, split.val_clean_ref):
        xn = center_crop(split.image(noisy_id, Domain.NOISY_X).pixels, align)
        ref = center_crop(split.image(clean_id, Domain.CLEAN_Y).pixels, align)
        x = torch.from_numpy(np.array(xn))[None, None]
        f_x, h_x = denoise(state.bundle, x)
        f = f_x[0, 0].numpy()
        record.add("F", ref, f)
        if cfg.trains_extractor:
            h = h_x[0, 0].numpy()
            record.add("H", ref, xn - h)
            record.add("ens", ref, L.ensemble_denoise(xn, f, h, gamma))
        else:
            record.add("ens", ref, f)
    return record


# -------------------------------------------------------------------- fit


LOG_COLUMNS = (
    ["epoch", "iteration"] + list(L.LossBreakdown.TERMS)
    + ["val_psnr_F", "val_psnr_H", "val_psnr_ens", "val_ssim_ens", "lr"]
)


def _row(epoch, iteration, lr, breakdown=None, record=None) -> dict:
    row = dict.fromkeys(LOG_COLUMNS)
    row.update(epoch=epoch, iteration=iteration, lr=lr)
    if breakdown is not None:
        row.update(breakdown.values())
    if record is not None and record.available:
        row.update(
            val_psnr_F=record.mean("F"),
            val_psnr_H=record.mean("H"),
            val_psnr_ens=record.mean("ens"),
            val_ssim_ens=record.mean("ens", "ssim"),
        )
    return row


def _mean_breakdown(items: list[L.LossBreakdown], lam: float) -> L.LossBreakdown | None:
    if not items:
        return None
    out = L.LossBreakdown(lam=lam)
    for k in L.LossBreakdown.TERMS:
        vals = [getattr(b, k) for b in items if getattr(b, k) is not None]
        if vals:
            setattr(out, k, float(np.mean(vals)))
    return out


@dataclass
class FitResult:
    bundle: ModelBundle
    log: list[dict]
    state: TrainState
    records: list[MetricsRecord]


def _snapshot(bundle: ModelBundle) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in bundle.state_dict().items()}


def fit(config: TrainConfig, split: DatasetSplit, *, state: TrainState | None = None,
        run_id: str = "", on_epoch: Callable[[TrainState], None] | None = None,
        workers: int = 0) -> FitResult:
    """Train for ``n_epochs`` (or until early stopping) and return the best-epoch bundle.

    ``state`` resumes a run saved at an epoch boundary. ``on_epoch`` is called
    after each epoch's validation, e.g. to write a checkpoint.
    """
    if state is None:
        state = init_state(config, split)
    cfg = state.config
    data_seed = substream_seed(cfg.seed, "data")
    records: list[MetricsRecord] = []
    early_stop = cfg.early_stop_patience is not None and split.has_references
    b = state.bundle

    while state.epoch < cfg.n_epochs and not state.stopped_early:
        e = state.epoch
        if e == state.averaging.swa_start_epoch and state.t == 0:
            copy_weights_(b.phi["F"], b.theta["F"])
            copy_weights_(b.phi["G"], b.theta["G"])
            state.averaging.n_models = 0
        epoch_items = []
        for t in range(state.t, cfg.n_iters):
            bx, by = batch_for(split, cfg.batch_size, data_seed, e, t, cfg.patch, cfg.augment)
            lr = state.optimizers["gen"].param_groups[0]["lr"]
            try:
                _, bd = train_iteration(state, bx, by)
            except DivergenceError as exc:
                state.t, state.step = t + 1, state.step + 1
                state.anomalies += 1
                log.warning("iteration %d: %s", state.step, exc)
                if state.anomalies >= DIVERGENCE_PATIENCE:
                    raise DivergenceError("training diverged", exc.breakdown, state) from exc
                continue
            lr = state.optimizers["gen"].param_groups[0]["lr"]
            if not bd.finite() or bd.max_abs() > DIVERGENCE_LIMIT:
                state.anomalies += 1
                if state.anomalies >= DIVERGENCE_PATIENCE:
                    raise DivergenceError("training diverged", bd, state)
            else:
                state.anomalies = 0
            epoch_items.append(bd)
            if cfg.log_every and state.step % cfg.log_every == 0:
                state.log_rows.append(_row(e, state.step, lr, bd))

        record = validate(state, split, run_id=run_id)
        records.append(record)
        state.log_rows.append(_row(e, state.step, lr, _mean_breakdown(epoch_items, cfg.lam), record))
        score = record.mean("ens") if record.available else None
        if score is not None and (state.best_val_psnr is None or score > state.best_val_psnr):
            state.best_val_psnr, state.best_epoch, state.epochs_since_best = score, e, 0
            state.best_state = _snapshot(b)
        else:
            state.epochs_since_best += 1
        state.epoch, state.t = e + 1, 0
        if early_stop and state.epochs_since_best >= cfg.early_stop_patience:
            state.stopped_early = True
        if on_epoch is not None:
            on_epoch(state)

    return FitResult(best_bundle(state, split), list(state.log_rows), state, records)


def best_bundle(state: TrainState, split: DatasetSplit | None = None) -> ModelBundle:
    """Deployable copy of the bundle at the best validation epoch (last epoch if none)."""
    out = state.bundle.clone()
    if state.best_state is not None:
        out.load_state_dict(state.best_state)
    else:
        tmp = dataclasses.replace(state, bundle=out)
        deploy_nets(tmp, split)
    if split is not None and split.clean_group and state.averaging.n_models > 0:
        refresh_norm_statistics(out.phi["G"], training_batches(split, split.clean_group, Domain.CLEAN_Y, state.config))
    return out.eval()


def require_references(split: DatasetSplit):
    if not split.has_references:
        raise EvaluationUnavailable("validation references are not available")
