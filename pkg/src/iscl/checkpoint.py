"""Checkpoint archive: a zip of raw little-endian float32 arrays plus a JSON header.

Entry names follow ``<net>/<layer>/<param>``, e.g. ``theta.F/body.0/weight``
or ``phi.H/head/bias``. Optimizer moments are stored as
``opt.<group>/<index>/<key>`` and the best-epoch snapshot under a
``best.`` prefix. ``header.json`` records shapes, original dtypes, the
resolved training config, counters and RNG state.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .models import DiscriminatorConfig, ExtractorConfig, GeneratorConfig, ModelBundle, ModelConfig
from .optim import AveragingState

FORMAT = "iscl-checkpoint/1"
HEADER = "header.json"


def _entry_name(key: str) -> str:
    net, _, rest = key.partition("/")
    layer, _, param = rest.rpartition(".")
    return f"{net}/{layer or '_'}/{param}"


def _key_from_entry(entry: str) -> str:
    net, layer, param = entry.split("/")
    return f"{net}/{param}" if layer == "_" else f"{net}/{layer}.{param}"


def _to_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False).tobytes()


def _from_bytes(raw: bytes, shape, dtype: str) -> torch.Tensor:
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return torch.from_numpy(arr.copy()).to(getattr(torch, dtype))


def model_config_to_dict(mc: ModelConfig) -> dict:
    return dataclasses.asdict(mc)


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        generator=GeneratorConfig(**d.get("generator", {})),
        extractor=ExtractorConfig(**d.get("extractor", {})),
        discriminator=DiscriminatorConfig(**d.get("discriminator", {})),
    )


def train_config_to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    d["flags"] = sorted(cfg.flags)
    d["model"] = model_config_to_dict(cfg.model)
    return d


def train_config_from_dict(d: dict):
    from .trainer import TrainConfig

    d = dict(d)
    d["model"] = model_config_from_dict(d.get("model", {}))
    if "flags" in d:
        d["flags"] = frozenset(d["flags"])
    return TrainConfig(**d)


class _Writer:
    def __init__(self, zf: zipfile.ZipFile):
        self.zf = zf
        self.tensors: dict[str, dict] = {}

    def put(self, entry: str, t: torch.Tensor):
        self.zf.writestr(entry, _to_bytes(t))
        self.tensors[entry] = {"shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}


def _put_optimizer(w: _Writer, name: str, opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()
    for idx, st in sd["state"].items():
        for key, val in st.items():
            w.put(f"opt.{name}/{idx}/{key}", torch.as_tensor(val))
    groups = []
    for g in sd["param_groups"]:
        groups.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()})
    return {"param_groups": groups, "state_ids": sorted(sd["state"].keys())}


def save_bundle(bundle: ModelBundle, path, extra: dict | None = None) -> None:
    """Write only the networks (no optimizer state)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        w = _Writer(zf)
        for key, t in bundle.state_dict().items():
            w.put(_entry_name(key), t)
        header = {"format": FORMAT, "model": model_config_to_dict(bundle.config), "tensors": w.tensors}
        header.update(extra or {})
        zf.writestr(HEADER, json.dumps(header, indent=1).encode("utf-8"))


def save_state(state, path) -> None:
    """Write a complete :class:`~iscl.trainer.TrainState` for exact resumption."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
        w = _Writer(zf)
        for key, t in state.bundle.state_dict().items():
            w.put(_entry_name(key), t)
        if state.best_state is not None:
            for key, t in state.best_state.items():
                w.put("best." + _entry_name(key), t)
        optim = {name: _put_optimizer(w, name, opt) for name, opt in state.optimizers.items()}
        header = {
            "format": FORMAT,
            "model": model_config_to_dict(state.config.model),
            "train": train_config_to_dict(state.config),
            "epoch": state.epoch,
            "step": state.step,
            "t": state.t,
            "averaging": dataclasses.asdict(state.averaging),
            "best_val_psnr": state.best_val_psnr,
            "best_epoch": state.best_epoch,
            "epochs_since_best": state.epochs_since_best,
            "anomalies": state.anomalies,
            "stopped_early": state.stopped_early,
            "log": state.log_rows,
            "optimizers": optim,
            "rng": {"torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")},
            "tensors": w.tensors,
        }
        zf.writestr(HEADER, json.dumps(header, indent=1).encode("utf-8"))
    tmp.replace(path)


def read_header(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read(HEADER).decode("utf-8"))


def _read_tensors(zf: zipfile.ZipFile, header: dict, prefix: str = "") -> dict[str, torch.Tensor]:
    out = {}
    for entry, meta in header["tensors"].items():
        if prefix:
            if not entry.startswith(prefix):
                continue
            name = entry[len(prefix):]
        else:
            if entry.startswith(("best.", "opt.")):
                continue
            name = entry
        out[_key_from_entry(name)] = _from_bytes(zf.read(entry), meta["shape"], meta["dtype"])
    return out


def load_bundle(path, best: bool = False) -> ModelBundle:
    """Networks from a bundle or state archive; ``best`` picks the best-epoch snapshot if present."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read(HEADER).decode("utf-8"))
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: not an iscl checkpoint")
        bundle = ModelBundle.build(model_config_from_dict(header["model"]))
        prefix = "best." if best and any(k.startswith("best.") for k in header["tensors"]) else ""
        bundle.load_state_dict(_read_tensors(zf, header, prefix))
    return bundle.eval()


def load_state(path):
    from .trainer import TrainState, init_state

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read(HEADER).decode("utf-8"))
        cfg = train_config_from_dict(header["train"])
        bundle = ModelBundle.build(cfg.model)
        bundle.load_state_dict(_read_tensors(zf, header))
        state: TrainState = init_state(cfg, None, bundle)
        for name, opt in state.optimizers.items():
            meta = header["optimizers"][name]
            osd = {"state": {}, "param_groups": []}
            for g in meta["param_groups"]:
                g = dict(g)
                if "betas" in g:
                    g["betas"] = tuple(g["betas"])
                osd["param_groups"].append(g)
            for idx in meta["state_ids"]:
                pref = f"opt.{name}/{idx}/"
                osd["state"][idx] = {
                    e[len(pref):]: _from_bytes(zf.read(e), m["shape"], m["dtype"])
                    for e, m in header["tensors"].items() if e.startswith(pref)
                }
            opt.load_state_dict(osd)
        if any(k.startswith("best.") for k in header["tensors"]):
            state.best_state = _read_tensors(zf, header, "best.")
    state.averaging = AveragingState(**header["averaging"])
    state.epoch, state.step, state.t = header["epoch"], header["step"], header["t"]
    state.best_val_psnr = header["best_val_psnr"]
    state.best_epoch = header["best_epoch"]
    state.epochs_since_best = header["epochs_since_best"]
    state.anomalies = header["anomalies"]
    state.stopped_early = header["stopped_early"]
    state.log_rows = header["log"]
    raw = base64.b64decode(header["rng"]["torch"])
    torch.set_rng_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
    return state
