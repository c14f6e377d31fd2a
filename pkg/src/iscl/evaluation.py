"""Gamma sweeps, the ablation ladder and report files."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import DatasetSplit, Domain, center_crop
from .errors import DivergenceError, EvaluationUnavailable
from .losses import ensemble_denoise
from .metrics import SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW, MetricsRecord, psnr, ssim
from .models import ModelBundle
from .trainer import LADDER, TrainConfig, denoise, fit, flags_label

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class EndpointOutputs:
    """Per-image ``F(x)`` and ``x - H(x)`` with their references, reused across a sweep."""

    refs: list[np.ndarray]
    f_only: list[np.ndarray]
    h_only: list[np.ndarray]


def endpoint_outputs(bundle: ModelBundle, split: DatasetSplit) -> EndpointOutputs:
    if not split.has_references:
        raise EvaluationUnavailable("gamma sweep needs clean validation references")
    align = bundle.phi["F"].alignment
    out = EndpointOutputs([], [], [])
    for nid, cid in zip(split.val_noisy, split.val_clean_ref):
        xn = center_crop(split.image(nid, Domain.NOISY_X).pixels, align)
        ref = center_crop(split.image(cid, Domain.CLEAN_Y).pixels, align)
        x = torch.from_numpy(np.array(xn))[None, None]
        f_x, h_x = denoise(bundle, x)
        out.refs.append(np.asarray(ref, dtype=np.float32))
        out.f_only.append(f_x[0, 0].numpy())
        out.h_only.append(xn - h_x[0, 0].numpy())
    return out


def sweep_from_outputs(outs: EndpointOutputs, grid: Sequence[float]) -> list[tuple[float, float, float]]:
    """(gamma, mean PSNR, mean SSIM) per grid value."""
    if len(grid) == 0:
        raise ValueError("gamma grid must not be empty")
    rows = []
    for g in grid:
        if not 0.0 <= g <= 1.0:
            raise ValueError(f"gamma {g} outside [0, 1]")
        # x - H(x) is passed as ``x`` with a zero residual so the endpoints stay exact
        ys = [ensemble_denoise(h, f, 0.0, g) for f, h in zip(outs.f_only, outs.h_only)]
        rows.append((
            float(g),
            float(np.mean([psnr(r, y) for r, y in zip(outs.refs, ys)])),
            float(np.mean([ssim(r, y) for r, y in zip(outs.refs, ys)])),
        ))
    return rows


def gamma_sweep(bundle: ModelBundle, split: DatasetSplit, grid: Sequence[float] = DEFAULT_GRID):
    return sweep_from_outputs(endpoint_outputs(bundle, split), grid)


def write_curve(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "psnr", "ssim"])
        for g, p, s in rows:
            w.writerow([g, repr(p), repr(s)])


# ---------------------------------------------------------- ablation ladder


@dataclass
class LadderRow:
    label: str
    flags: frozenset
    records: list[MetricsRecord]
    failed: bool = False
    error: str = ""

    def mean(self, metric="psnr") -> float | None:
        vals = [r.mean("ens", metric) for r in self.records if r.available and r.mean("ens", metric) is not None]
        return float(np.mean(vals)) if vals else None

    def std(self, metric="psnr") -> float | None:
        vals = [r.mean("ens", metric) for r in self.records if r.available and r.mean("ens", metric) is not None]
        return float(np.std(vals)) if vals else None


def best_record(result) -> MetricsRecord:
    st = result.state
    if st.best_epoch is None:
        return result.records[-1] if result.records else MetricsRecord(available=False)
    for r in result.records:
        if r.epoch == st.best_epoch:
            return r
    return result.records[-1]


def run_ablation_ladder(base: TrainConfig, split: DatasetSplit, seeds: Iterable[int] = (0,),
                        rungs: Sequence[frozenset] = LADDER) -> list[LadderRow]:
    """Train every rung of the ladder with identical seeds and budgets."""
    rows = []
    seeds = list(seeds)
    for flags in rungs:
        label = flags_label(flags)
        row = LadderRow(label, frozenset(flags), [])
        for seed in seeds:
            cfg = dataclasses.replace(base, flags=frozenset(flags), seed=seed)
            try:
                res = fit(cfg, split, run_id=f"{label}/seed{seed}")
            except DivergenceError as exc:
                log.warning("%s seed %d diverged: %s", label, seed, exc)
                row.failed, row.error = True, str(exc)
                continue
            rec = best_record(res)
            rec.run_id = f"{label}/seed{seed}"
            row.records.append(rec)
        rows.append(row)
    return rows


def ssim_settings() -> str:
    return f"SSIM: Gaussian window {SSIM_WINDOW}, sigma {SSIM_SIGMA}, K1 {SSIM_K1}, K2 {SSIM_K2}; PSNR data range 1.0"


def write_ladder_csv(rows: list[LadderRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "flags", "n_runs", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "failed"])
        for r in rows:
            w.writerow([r.label, "".join(sorted(r.flags)), len(r.records),
                        r.mean("psnr"), r.std("psnr"), r.mean("ssim"), r.std("ssim"), int(r.failed)])


def read_ladder_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_ladder(rows: list[LadderRow] | list[dict]) -> str:
    """Plain-text table: one line per configuration, PSNR and SSIM columns."""
    lines = [f"# {ssim_settings()}", f"{'Method':<26} {'PSNR':>8} {'SSIM':>8}", "-" * 44]
    for r in rows:
        if isinstance(r, LadderRow):
            label, p, s, failed = r.label, r.mean("psnr"), r.mean("ssim"), r.failed and not r.records
        else:
            label = r["config"]
            p = float(r["psnr_mean"]) if r["psnr_mean"] else None
            s = float(r["ssim_mean"]) if r["ssim_mean"] else None
            failed = r["failed"] == "1" and int(r["n_runs"]) == 0
        if failed or p is None:
            lines.append(f"{label:<26} {'failed':>8} {'':>8}")
        else:
            lines.append(f"{label:<26} {p:>8.2f} {s:>8.4f}")
    return "\n".join(lines) + "\n"


def evaluate_directories(outputs_dir, references_dir, data_range: float = 1.0) -> list[tuple[str, float, float]]:
    """PSNR/SSIM of every image in ``outputs_dir`` against the same-named reference."""
    from .data import list_images, load_image

    refs = {p.name: p for p in list_images(references_dir)}
    rows = []
    for p in list_images(outputs_dir):
        if p.name not in refs:
            raise EvaluationUnavailable(f"no reference for {p.name}")
        a = load_image(refs[p.name]).pixels
        b = load_image(p).pixels
        rows.append((p.name, psnr(a, b, data_range), ssim(a, b, data_range)))
    if not rows:
        raise EvaluationUnavailable(f"no images in {outputs_dir}")
    return rows


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "psnr", "ssim"])
        for name, p, s in rows:
            w.writerow([name, repr(p), repr(s)])
        w.writerow(["mean", repr(float(np.mean([r[1] for r in rows]))), repr(float(np.mean([r[2] for r in rows])))])
