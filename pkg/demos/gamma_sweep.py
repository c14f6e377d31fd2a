"""Train a small model in-process and print how PSNR/SSIM move as the
ensemble weight goes from the extractor path (gamma=0) to F alone (gamma=1).

    python demos/gamma_sweep.py --epochs 8
"""

import argparse

import numpy as np
import torch

from iscl.data import DatasetSplit, ImageTensor, quantize
from iscl.evaluation import gamma_sweep
from iscl.metrics import psnr
from iscl.models import DiscriminatorConfig, ExtractorConfig, GeneratorConfig, ModelConfig
from iscl.noise import NoiseSpec, apply_charge, membrane_phantom
from iscl.trainer import TrainConfig, fit


def phantoms(first, n, size=64):
    return [membrane_phantom(size, np.random.default_rng(first + i)) for i in range(n)]


def to8(a):
    return (quantize(a) / 255.0).astype(np.float32)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--amplitude", type=float, default=0.4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    spec = NoiseSpec("charge", args.amplitude, 3.0, density=3e-3)
    # the clean and noisy groups come from disjoint phantoms, so nothing is paired
    clean = [to8(p) for p in phantoms(0, 100)]
    noisy = [to8(apply_charge(ImageTensor(p), spec.reseeded(i)).pixels) for i, p in enumerate(phantoms(1000, 100))]
    val_clean = [to8(p) for p in phantoms(5000, 12)]
    val_noisy = [to8(apply_charge(ImageTensor(p), spec.reseeded(9000 + i)).pixels) for i, p in enumerate(val_clean)]
    split = DatasetSplit.from_arrays(clean, noisy, val_noisy, val_clean)
    print(f"noisy input: {np.mean([psnr(c, n) for c, n in zip(val_clean, val_noisy)]):.2f} dB")

    model = ModelConfig(GeneratorConfig(base_width=8, n_residual_blocks=2, n_downsamples=2),
                        ExtractorConfig(depth=5, width=12),
                        DiscriminatorConfig(base_width=8, n_downsamples=3))
    cfg = TrainConfig(n_epochs=args.epochs, batch_size=4, lr_start=5e-3, lr_end=5e-5, model=model, seed=args.seed)

    def report(st):
        r = st.log_rows[-1]
        print(f"epoch {r['epoch']:3d}  F {r['val_psnr_F']:.2f}  ens {r['val_psnr_ens']:.2f}")

    result = fit(cfg, split, on_epoch=report)

    print("\n gamma   PSNR    SSIM")
    for gamma, p, s in gamma_sweep(result.bundle, split, np.linspace(0.0, 1.0, 11)):
        print(f" {gamma:4.1f}  {p:6.2f}  {s:.4f}")


if __name__ == "__main__":
    main()
