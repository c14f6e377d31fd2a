"""Command-line entry points: ``iscl synthesize|train|denoise|evaluate|ablate``.

Every command takes an optional JSON config with the sections ``data``,
``noise``, ``train``, ``eval`` and ``io``. Command-line flags override
config keys, which override defaults, and the fully resolved config is
written next to the outputs as ``config.resolved.json``.

Exit codes:

    0   success (including a clean early stop)
    1   other iscl / input errors
    2   training diverged (the last good checkpoint is kept)
    3   checkpoint missing
    4   clean references missing
    5   output directory locked by another process
    64  bad command line or config
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import checkpoint as ckpt
from .data import ImageTensor, list_images, load_image, read_manifest, save_image
from .errors import DivergenceError, EvaluationUnavailable, ISCLError
from .evaluation import (
    DEFAULT_GRID,
    evaluate_directories,
    format_ladder,
    gamma_sweep,
    read_ladder_csv,
    run_ablation_ladder,
    write_curve,
    write_ladder_csv,
    write_metrics_csv,
)
from .losses import ensemble_denoise
from .models import tiled_forward
from .noise import NoiseSpec, synthesize_dataset, write_phantoms
from .seeding import configure_determinism, substream_seed
from .trainer import LOG_COLUMNS, TrainConfig, fit, init_state, parse_flags

log = logging.getLogger("iscl")

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED, EXIT_NO_CHECKPOINT, EXIT_NO_REFERENCES, EXIT_LOCKED, EXIT_USAGE = 0, 1, 2, 3, 4, 5, 64

RESOLVED_NAME = "config.resolved.json"
STATE_NAME = "state.ckpt"
MODEL_NAME = "model.ckpt"
METRICS_NAME = "metrics.csv"


class UsageError(Exception):
    pass


class MissingCheckpoint(ISCLError):
    pass


def _checkpoint_path(value) -> Path:
    path = Path(_require(value, "checkpoint (--checkpoint)"))
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint {path} not found")
    return path


# ------------------------------------------------------------------ config

EVAL_DEFAULTS = {"gamma_grid": list(DEFAULT_GRID), "data_range": 1.0, "seeds": [0]}
DATA_DEFAULTS = {"manifest": None, "clean_dir": None, "input_dir": None, "references_dir": None,
                 "phantoms": 0, "phantom_size": 64, "split_fractions": [0.45, 0.45, 0.1], "bit_depth": None}
IO_DEFAULTS = {"out_dir": None, "checkpoint": None, "tile": 0}
NOISE_DEFAULTS = {"kind": "charge", "amplitude": 0.4, "spatial_scale": 3.0, "mean_shift": 0.0, "density": 3e-3}
SECTIONS = ("seed", "data", "noise", "train", "eval", "io")


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise UsageError(f"config section '{section}': unknown keys {unknown}")


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    _check_keys("<top>", raw, SECTIONS)
    for name, allowed in (("data", DATA_DEFAULTS), ("eval", EVAL_DEFAULTS), ("io", IO_DEFAULTS),
                          ("noise", NOISE_DEFAULTS)):
        _check_keys(name, raw.get(name, {}), allowed)
    train = raw.get("train", {})
    _check_keys("train", train, [f.name for f in dataclasses.fields(TrainConfig)])
    if "model" in train:
        _check_keys("train.model", train["model"], ("generator", "extractor", "discriminator"))
    return raw


def _merge(defaults: dict, given: dict, overrides: dict) -> dict:
    out = dict(defaults)
    out.update(given)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def resolve(args, raw: dict) -> dict:
    """Apply precedence flags > config > defaults to every section."""
    seed = args.seed if getattr(args, "seed", None) is not None else raw.get("seed", 0)
    data = _merge(DATA_DEFAULTS, raw.get("data", {}), {
        "manifest": getattr(args, "manifest", None),
        "clean_dir": getattr(args, "clean_dir", None),
        "input_dir": getattr(args, "input", None),
        "references_dir": getattr(args, "references", None),
        "phantoms": getattr(args, "phantoms", None),
        "phantom_size": getattr(args, "phantom_size", None),
        "bit_depth": getattr(args, "bit_depth", None),
    })
    noise = _merge(NOISE_DEFAULTS, raw.get("noise", {}), {
        "kind": getattr(args, "kind", None),
        "amplitude": getattr(args, "amplitude", None),
        "spatial_scale": getattr(args, "spatial_scale", None),
        "density": getattr(args, "density", None),
    })
    grid = getattr(args, "gamma_grid", None)
    seeds = getattr(args, "seeds", None)
    evaluation = _merge(EVAL_DEFAULTS, raw.get("eval", {}), {
        "gamma_grid": _floats(grid) if grid else None,
        "seeds": [int(s) for s in seeds.split(",")] if seeds else None,
    })
    io = _merge(IO_DEFAULTS, raw.get("io", {}), {
        "out_dir": getattr(args, "out", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "tile": getattr(args, "tile", None),
    })
    train_raw = dict(raw.get("train", {}))
    for flag, key in (("epochs", "n_epochs"), ("lr", "lr_start"), ("lr_end", "lr_end"),
                      ("batch_size", "batch_size"), ("iters", "n_iters")):
        v = getattr(args, flag, None)
        if v is not None:
            train_raw[key] = v
    if getattr(args, "ablation", None) is not None:
        train_raw["flags"] = sorted(parse_flags(args.ablation))
    train_raw["seed"] = seed
    return {"seed": seed, "data": data, "noise": noise, "train": train_raw, "eval": evaluation, "io": io}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


def train_config(resolved: dict) -> TrainConfig:
    try:
        return ckpt.train_config_from_dict(resolved["train"])
    except TypeError as exc:
        raise UsageError(str(exc)) from exc


def write_resolved(out_dir: Path, resolved: dict, train: TrainConfig | None = None) -> None:
    doc = dict(resolved)
    if train is not None:
        doc["train"] = ckpt.train_config_to_dict(train)
    (out_dir / RESOLVED_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(value, what: str):
    if value is None:
        raise UsageError(f"missing {what}")
    return value


def _out_dir(resolved: dict) -> Path:
    out = Path(_require(resolved["io"]["out_dir"], "output directory (--out / io.out_dir)"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _locked(out: Path) -> FileLock:
    return FileLock(str(out / ".iscl.lock"), timeout=0)


# ---------------------------------------------------------------- commands


def cmd_synthesize(args, resolved) -> int:
    data, noise = resolved["data"], resolved["noise"]
    out = _out_dir(resolved)
    clean_dir = data["clean_dir"]
    if data["phantoms"]:
        clean_dir = clean_dir or str(out / "sources")
        write_phantoms(clean_dir, int(data["phantoms"]), int(data["phantom_size"]),
                       substream_seed(resolved["seed"], "phantoms"))
    clean_dir = Path(_require(clean_dir, "clean image directory (--clean-dir)"))
    if not clean_dir.is_dir():
        raise ISCLError(f"clean image directory {clean_dir} does not exist")
    spec = NoiseSpec(seed=substream_seed(resolved["seed"], "noise"), **noise)
    with _locked(out):
        split = synthesize_dataset(clean_dir, spec, out, tuple(data["split_fractions"]),
                                   seed=substream_seed(resolved["seed"], "data"), bit_depth=data["bit_depth"])
        data["clean_dir"] = str(clean_dir)
        data["manifest"] = str(out / "manifest.txt")
        write_resolved(out, resolved)
    log.info("wrote %d clean, %d noisy, %d validation images to %s",
             len(split.clean_group), len(split.noisy_group), len(split.val_noisy), out)
    return EXIT_OK


def write_log_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow(["" if row.get(c) is None else repr(row[c]) for c in LOG_COLUMNS])


def cmd_train(args, resolved) -> int:
    out = _out_dir(resolved)
    split = read_manifest(_require(resolved["data"]["manifest"], "manifest (--manifest)")).preload()
    if args.resume:
        state = ckpt.load_state(_checkpoint_path(args.resume))
        if args.epochs is not None:
            state.config = dataclasses.replace(state.config, n_epochs=args.epochs)
        cfg = state.config
    else:
        cfg = train_config(resolved)
        state = init_state(cfg, split)
        cfg = state.config
    write_resolved(out, resolved, cfg)

    def on_epoch(st):
        ckpt.save_state(st, out / STATE_NAME)
        write_log_csv(st.log_rows, out / METRICS_NAME)

    with _locked(out):
        if not args.resume:
            on_epoch(state)
        try:
            result = fit(cfg, split, state=state, run_id=str(out), on_epoch=on_epoch, workers=args.workers)
        except DivergenceError as exc:
            print(f"iscl: error[divergence]: {exc}; last good checkpoint kept at {out / STATE_NAME}",
                  file=sys.stderr)
            if exc.breakdown is not None:
                print(json.dumps(exc.breakdown.values()), file=sys.stderr)
            return EXIT_DIVERGED
        write_log_csv(result.log, out / METRICS_NAME)
        ckpt.save_bundle(result.bundle, out / MODEL_NAME, {"flags": sorted(cfg.flags), "gamma": cfg.gamma,
                                                            "best_epoch": result.state.best_epoch})
    if result.state.stopped_early:
        log.info("early stop after epoch %d", result.state.epoch - 1)
    return EXIT_OK


def _pad_to(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = torch.nn.functional.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (h, w)


@torch.no_grad()
def denoise_array(bundle, pixels: np.ndarray, gamma: float, mode: str, trains_extractor: bool, tile: int = 0):
    """Deployed output for one image: ensemble, F-only (``mode='f'``) or x - H(x) (``mode='h'``)."""
    F, H = bundle.phi["F"].eval(), bundle.phi["H"].eval()
    x, (h, w) = _pad_to(torch.from_numpy(np.array(pixels, dtype=np.float32))[None, None], F.alignment)

    def run(net):
        return tiled_forward(net, x, tile) if tile else net(x)

    f = run(F)[..., :h, :w][0, 0].numpy() if mode in ("f", "ens") else None
    if mode == "f" or (mode == "ens" and not trains_extractor):
        return f
    if not trains_extractor:
        raise ISCLError("this checkpoint has no trained extractor; --h-only is unavailable")
    n = run(H)[..., :h, :w][0, 0].numpy()
    if mode == "h":
        return pixels - n
    return ensemble_denoise(pixels, f, n, gamma)


def cmd_denoise(args, resolved) -> int:
    out = _out_dir(resolved)
    path = _checkpoint_path(resolved["io"]["checkpoint"])
    bundle = ckpt.load_bundle(path, best=True)
    header = ckpt.read_header(path)
    flags = frozenset(header.get("flags") or (header.get("train", {}).get("flags", [])))
    gamma = args.gamma if args.gamma is not None else header.get("gamma", 0.5)
    if not 0.0 <= gamma <= 1.0:
        raise UsageError("--gamma must lie in [0, 1]")
    if args.f_only and args.h_only:
        raise UsageError("--f-only and --h-only are exclusive")
    mode = "f" if args.f_only else "h" if args.h_only else "ens"
    inputs = list_images(_require(resolved["data"]["input_dir"], "input directory (--input)"))
    if not inputs:
        raise ISCLError("no input images")
    with _locked(out):
        for p in inputs:
            img = load_image(p)
            y = denoise_array(bundle, img.pixels, gamma, mode, "B" in flags, int(resolved["io"]["tile"] or 0))
            save_image(ImageTensor(np.asarray(y, dtype=np.float32), bit_depth=img.bit_depth), out / p.name)
        resolved["eval"]["gamma"] = gamma
        resolved["eval"]["mode"] = mode
        write_resolved(out, resolved)
    return EXIT_OK


def cmd_evaluate(args, resolved) -> int:
    out = _out_dir(resolved)
    did = False
    with _locked(out):
        if args.outputs:
            refs = _require(resolved["data"]["references_dir"], "references (--references)")
            if not Path(refs).is_dir():
                raise EvaluationUnavailable(f"reference directory {refs} does not exist")
            rows = evaluate_directories(args.outputs, refs, resolved["eval"]["data_range"])
            write_metrics_csv(rows, out / "metrics.csv")
            did = True
        if resolved["io"]["checkpoint"]:
            split = read_manifest(_require(resolved["data"]["manifest"], "manifest (--manifest)"))
            if not split.has_references:
                raise EvaluationUnavailable("manifest has no [val_clean] references")
            bundle = ckpt.load_bundle(_checkpoint_path(resolved["io"]["checkpoint"]), best=True)
            curve = gamma_sweep(bundle, split.preload(), resolved["eval"]["gamma_grid"])
            write_curve(curve, out / "gamma_curve.csv")
            did = True
        if args.ladder:
            table = format_ladder(read_ladder_csv(args.ladder))
            (out / "ladder.txt").write_text(table, encoding="utf-8")
            sys.stdout.write(table)
            did = True
        if not did:
            raise UsageError("nothing to evaluate: give --outputs, --checkpoint or --ladder")
        write_resolved(out, resolved)
    return EXIT_OK


def cmd_ablate(args, resolved) -> int:
    out = _out_dir(resolved)
    split = read_manifest(_require(resolved["data"]["manifest"], "manifest (--manifest)")).preload()
    if not split.has_references:
        raise EvaluationUnavailable("the ablation ladder needs validation references")
    base = train_config(resolved)
    with _locked(out):
        write_resolved(out, resolved, base)
        rows = run_ablation_ladder(base, split, resolved["eval"]["seeds"])
        write_ladder_csv(rows, out / "ladder.csv")
        table = format_ladder(rows)
        (out / "ladder.txt").write_text(table, encoding="utf-8")
        sys.stdout.write(table)
    return EXIT_OK


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"iscl: error[usage]: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iscl", description="Unpaired denoising with a cyclic GAN and a cooperating noise extractor.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("synthesize", help="build a synthetic noisy/clean dataset")
    common(s)
    s.add_argument("--clean-dir")
    s.add_argument("--phantoms", type=int, help="first write this many membrane phantoms as sources")
    s.add_argument("--phantom-size", type=int)
    s.add_argument("--kind", choices=("gaussian", "film", "charge"))
    s.add_argument("--amplitude", type=float)
    s.add_argument("--spatial-scale", type=float)
    s.add_argument("--density", type=float)
    s.add_argument("--bit-depth", type=int, choices=(8, 16))
    s.set_defaults(func=cmd_synthesize)

    t = sub.add_parser("train", help="train a model from a manifest")
    common(t)
    t.add_argument("--manifest")
    t.add_argument("--epochs", type=int)
    t.add_argument("--iters", type=int, help="iterations per epoch")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float, help="initial learning rate")
    t.add_argument("--lr-end", type=float)
    t.add_argument("--ablation", help="A, A+B, A+B+C, ... or a flag string like BCD")
    t.add_argument("--resume", help="state checkpoint to continue from")
    t.add_argument("--workers", type=int, default=0, help="patch-sampling threads")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", help="denoise every image in a directory")
    common(d)
    d.add_argument("--checkpoint")
    d.add_argument("--input")
    d.add_argument("--gamma", type=float)
    d.add_argument("--f-only", action="store_true")
    d.add_argument("--h-only", action="store_true")
    d.add_argument("--tile", type=int, help="tile size for large images (0 = whole image)")
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("evaluate", help="metrics, gamma curve and ladder table")
    common(e)
    e.add_argument("--outputs", help="directory of denoised images")
    e.add_argument("--references", help="directory of clean references with matching names")
    e.add_argument("--checkpoint", help="sweep gamma for this model on the manifest's validation set")
    e.add_argument("--manifest")
    e.add_argument("--gamma-grid", help="comma-separated gamma values")
    e.add_argument("--ladder", help="ladder CSV to render as a table")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train the five-row ablation ladder")
    common(a)
    a.add_argument("--manifest")
    a.add_argument("--epochs", type=int)
    a.add_argument("--iters", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--seeds", help="comma-separated seeds")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_determinism()
    try:
        resolved = resolve(args, load_config(args.config))
        return args.func(args, resolved)
    except UsageError as exc:
        print(f"iscl: error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Timeout as exc:
        print(f"iscl: error[locked]: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except MissingCheckpoint as exc:
        print(f"iscl: error[missing-checkpoint]: {exc}", file=sys.stderr)
        return EXIT_NO_CHECKPOINT
    except EvaluationUnavailable as exc:
        print(f"iscl: error[missing-references]: {exc}", file=sys.stderr)
        return EXIT_NO_REFERENCES
    except DivergenceError as exc:
        print(f"iscl: error[divergence]: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ISCLError, ValueError, OSError) as exc:
        print(f"iscl: error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
