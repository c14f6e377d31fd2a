"""Parametric synthetic degradations with non-zero mean and spatial structure.

Three models are provided:

* ``gaussian`` -- additive i.i.d. normal noise with an optional mean shift.
* ``film`` -- multiplication by a smooth random field, mimicking the
  inhomogeneous texture of support films in transmission EM.
* ``charge`` -- additive positive Gaussian bumps at Poisson-distributed
  locations, mimicking beam-induced charging blobs.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .data import DatasetSplit, Domain, ImageTensor, list_images, load_image, save_image, write_manifest

KINDS = ("gaussian", "film", "charge")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    amplitude: float
    spatial_scale: float = 1.0
    mean_shift: float = 0.0
    density: float = 2e-3  # charge: expected blobs per pixel
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.spatial_scale <= 0:
            raise ValueError("spatial_scale must be > 0")
        if self.density < 0:
            raise ValueError("density must be >= 0")

    def reseeded(self, key: str | int) -> "NoiseSpec":
        """Same parameters, seed derived deterministically from ``key``."""
        k = key if isinstance(key, int) else zlib.crc32(str(key).encode("utf-8"))
        seed = int(np.random.SeedSequence([self.seed, k]).generate_state(1)[0])
        return dataclasses.replace(self, seed=seed)


def _expect(spec: NoiseSpec, kind: str):
    if spec.kind != kind:
        raise ValueError(f"expected a {kind!r} spec, got {spec.kind!r}")


def apply_gaussian(img: ImageTensor, spec: NoiseSpec) -> ImageTensor:
    _expect(spec, "gaussian")
    x = img.pixels.astype(np.float64)
    if spec.amplitude == 0:
        out = x + spec.mean_shift
    else:
        eps = np.random.default_rng(spec.seed).standard_normal(x.shape)
        out = x + spec.mean_shift + spec.amplitude * eps
    return img.with_pixels(out.astype(np.float32), Domain.NOISY_X)


def film_field(shape: tuple[int, int], spec: NoiseSpec) -> np.ndarray:
    """Smooth multiplicative field with values spanning [1 - a, 1 + a]."""
    a = spec.amplitude
    if a == 0:
        return np.ones(shape)
    white = np.random.default_rng(spec.seed).standard_normal(shape)
    smooth = ndimage.gaussian_filter(white, sigma=spec.spatial_scale, mode="wrap")
    lo, hi = smooth.min(), smooth.max()
    if hi == lo:
        return np.ones(shape)
    return 1.0 - a + 2.0 * a * (smooth - lo) / (hi - lo)


def apply_film(img: ImageTensor, spec: NoiseSpec) -> ImageTensor:
    _expect(spec, "film")
    if spec.amplitude >= 1:
        raise ValueError("film amplitude must be < 1 so the field stays positive")
    if spec.amplitude == 0:
        return img.with_pixels(img.pixels, Domain.NOISY_X)
    field = film_field(img.shape, spec)
    return img.with_pixels((img.pixels * field).astype(np.float32), Domain.NOISY_X)


def charge_field(shape: tuple[int, int], spec: NoiseSpec) -> tuple[np.ndarray, int]:
    """Sum of positive Gaussian bumps; returns the field and the number of bumps."""
    h, w = shape
    field = np.zeros(shape)
    if spec.amplitude == 0:
        return field, 0
    rng = np.random.default_rng(spec.seed)
    n = int(rng.poisson(spec.density * h * w))
    centers = rng.uniform((0.0, 0.0), (h, w), size=(n, 2))
    sigmas = rng.uniform(spec.spatial_scale / 2, 2 * spec.spatial_scale, size=n)
    amps = rng.uniform(spec.amplitude / 2, spec.amplitude, size=n)
    rows = np.arange(h)
    cols = np.arange(w)
    for (cr, cc), s, a in zip(centers, sigmas, amps):
        reach = int(math.ceil(4 * s))
        r0, r1 = max(0, int(cr) - reach), min(h, int(cr) + reach + 2)
        c0, c1 = max(0, int(cc) - reach), min(w, int(cc) + reach + 2)
        dr = (rows[r0:r1] - cr)[:, None]
        dc = (cols[c0:c1] - cc)[None, :]
        field[r0:r1, c0:c1] += a * np.exp(-(dr**2 + dc**2) / (2 * s * s))
    return field, n


def apply_charge(img: ImageTensor, spec: NoiseSpec) -> ImageTensor:
    _expect(spec, "charge")
    if spec.amplitude == 0:
        return img.with_pixels(img.pixels, Domain.NOISY_X)
    field, _ = charge_field(img.shape, spec)
    return img.with_pixels((img.pixels + field).astype(np.float32), Domain.NOISY_X)


_APPLY = {"gaussian": apply_gaussian, "film": apply_film, "charge": apply_charge}


def degrade(img: ImageTensor, spec: NoiseSpec) -> ImageTensor:
    return _APPLY[spec.kind](img, spec)


# ----------------------------------------------------------- clean phantoms


def membrane_phantom(size: int, rng: np.random.Generator, n_cells: int | None = None) -> np.ndarray:
    """EM-like clean image: Voronoi cells with dark membranes and small vesicles.

    Values lie in roughly [0.1, 0.7], leaving headroom for positive noise.
    """
    h = w = int(size)
    n_cells = n_cells or max(4, (h * w) // 600)
    seeds = rng.uniform(0, size, size=(n_cells, 2))
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.sqrt((rr[..., None] - seeds[:, 0]) ** 2 + (cc[..., None] - seeds[:, 1]) ** 2)
    d.sort(axis=-1)
    edge = d[..., 1] - d[..., 0]
    label = np.argmin(
        (rr[..., None] - seeds[:, 0]) ** 2 + (cc[..., None] - seeds[:, 1]) ** 2, axis=-1
    )
    tone = rng.uniform(0.4, 0.65, size=n_cells)[label]
    img = tone - 0.3 * np.exp(-(edge**2) / (2 * 0.9**2))
    n_ves = rng.poisson(h * w / 400)
    for r, c in rng.uniform(0, size, size=(n_ves, 2)):
        radius = rng.uniform(1.0, 2.5)
        img -= 0.15 * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * radius**2))
    img = ndimage.gaussian_filter(img, 0.6)
    return np.clip(img, 0.05, 0.75).astype(np.float32)


def write_phantoms(out_dir, count: int, size: int, seed: int) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        p = out_dir / f"phantom_{i:05d}.png"
        save_image(ImageTensor(membrane_phantom(size, rng)), p, bit_depth=8)
        paths.append(p)
    return paths


# ---------------------------------------------------------- dataset builder


def partition_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Split ``n`` items by ``fractions`` (largest-remainder rounding)."""
    if len(fractions) != 3:
        raise ValueError("expected three split fractions (clean, noisy, validation)")
    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(r)) for r in raw]
    order = sorted(range(3), key=lambda i: raw[i] - sizes[i], reverse=True)
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def synthesize_dataset(clean_dir, spec: NoiseSpec, out_dir, split_fractions=(0.45, 0.45, 0.1),
                       seed: int | None = None, bit_depth: int | None = None) -> DatasetSplit:
    """Partition clean images and degrade two of the three parts.

    Layout under ``out_dir``::

        clean/      part A, copied as-is
        noisy/      part B, degraded
        val_noisy/  part C, degraded
        val_clean/  part C, originals
        manifest.txt
    """
    sources = list_images(clean_dir)
    if not sources:
        raise ValueError(f"no PNG/TIFF images in {clean_dir}")
    n_a, n_b, n_c = partition_sizes(len(sources), split_fractions)
    order = np.random.default_rng(spec.seed if seed is None else seed).permutation(len(sources))
    groups = {
        "clean": order[:n_a],
        "noisy": order[n_a:n_a + n_b],
        "val": order[n_a + n_b:],
    }
    out_dir = Path(out_dir)
    entries: dict[str, list[str]] = {"clean": [], "noisy": [], "val_noisy": [], "val_clean": []}

    for idx in sorted(groups["clean"]):
        src = sources[idx]
        img = load_image(src)
        rel = f"clean/{src.stem}.png"
        save_image(img, out_dir / rel, bit_depth or img.bit_depth)
        entries["clean"].append(rel)

    for section, dest in (("noisy", "noisy"), ("val", "val_noisy")):
        for idx in sorted(groups[section]):
            src = sources[idx]
            img = load_image(src)
            noisy = degrade(img, spec.reseeded(src.name))
            rel = f"{dest}/{src.stem}.png"
            save_image(noisy, out_dir / rel, bit_depth or img.bit_depth)
            entries[dest].append(rel)
            if section == "val":
                ref = f"val_clean/{src.stem}.png"
                save_image(img, out_dir / ref, bit_depth or img.bit_depth)
                entries["val_clean"].append(ref)

    split = DatasetSplit(
        clean_group=entries["clean"],
        noisy_group=entries["noisy"],
        val_noisy=entries["val_noisy"],
        val_clean_ref=entries["val_clean"],
        root=out_dir,
    )
    write_manifest(split, out_dir / "manifest.txt")
    return split
