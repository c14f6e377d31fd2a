"""Image and patch data model, raster I/O, augmentation and unpaired batching."""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import tifffile
import torch
from PIL import Image

from .errors import DatasetError, ImageFormatError
from .seeding import rng_for

PATCH = 64
MANIFEST_SECTIONS = ("clean", "noisy", "val_noisy", "val_clean")
_TIFF_SUFFIXES = {".tif", ".tiff"}
IMAGE_SUFFIXES = {".png", *_TIFF_SUFFIXES}


class Domain(enum.Enum):
    NOISY_X = "noisy"
    CLEAN_Y = "clean"
    NOISE_N = "noise"


@dataclass(frozen=True)
class ImageTensor:
    """A single-channel float image tagged with its domain.

    Noise-domain images may leave ``value_range``; every other domain is
    expected to sit inside it after loading.
    """

    pixels: np.ndarray
    domain: Domain = Domain.CLEAN_Y
    value_range: tuple[float, float] = (0.0, 1.0)
    bit_depth: int | None = None
    source_id: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ImageFormatError(f"expected a 2-D image, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite values")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray, domain: Domain | None = None) -> "ImageTensor":
        return ImageTensor(
            pixels,
            domain=self.domain if domain is None else domain,
            value_range=self.value_range,
            bit_depth=self.bit_depth,
            source_id=self.source_id,
        )


@dataclass(frozen=True)
class PatchBatch:
    data: np.ndarray  # (m, 1, P, P), read-only
    domain: Domain
    source_ids: tuple[str, ...]

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float32)
        if d.ndim != 4 or d.shape[1] != 1:
            raise ValueError(f"patch batch must be (m, 1, H, W), got {d.shape}")
        if len(self.source_ids) != d.shape[0]:
            raise ValueError("source_ids length must equal the batch size")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "source_ids", tuple(self.source_ids))

    def __len__(self):
        return self.data.shape[0]

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.data.copy())


# --------------------------------------------------------------------- I/O


def _raster_from_file(path: Path) -> np.ndarray:
    if path.suffix.lower() in _TIFF_SUFFIXES:
        with tifffile.TiffFile(path) as tif:
            if len(tif.pages) != 1:
                raise ImageFormatError(f"{path}: multi-page TIFF is not supported")
            arr = tif.asarray()
    else:
        with Image.open(path) as im:
            if im.mode not in ("L", "I;16", "I;16B", "I;16L", "I"):
                raise ImageFormatError(f"{path}: unsupported image mode {im.mode!r}")
            arr = np.array(im)
            if im.mode == "I":
                if arr.min() < 0 or arr.max() > 65535:
                    raise ImageFormatError(f"{path}: 32-bit integer rasters are not supported")
                arr = arr.astype(np.uint16)
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: expected one channel, got shape {arr.shape}")
    if arr.dtype not in (np.uint8, np.uint16):
        raise ImageFormatError(f"{path}: unsupported sample type {arr.dtype}")
    return arr


def load_image(path, value_range=(0.0, 1.0), domain: Domain = Domain.CLEAN_Y, source_id=None) -> ImageTensor:
    """Read an 8- or 16-bit grayscale PNG/TIFF and map it linearly onto ``value_range``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        raw = _raster_from_file(path)
    except ImageFormatError:
        raise
    except Exception as exc:  # corrupt or truncated
        raise OSError(f"cannot read {path}: {exc}") from exc
    depth = 8 if raw.dtype == np.uint8 else 16
    lo, hi = map(float, value_range)
    scale = (hi - lo) / (2**depth - 1)
    pixels = lo + raw.astype(np.float64) * scale
    return ImageTensor(
        pixels.astype(np.float32),
        domain=domain,
        value_range=(lo, hi),
        bit_depth=depth,
        source_id=source_id if source_id is not None else path.name,
    )


def quantize(pixels: np.ndarray, value_range=(0.0, 1.0), bit_depth: int = 8) -> np.ndarray:
    """Clip to ``value_range`` and quantize with round-half-up."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    lo, hi = value_range
    top = 2**bit_depth - 1
    unit = (np.clip(np.asarray(pixels, dtype=np.float64), lo, hi) - lo) / (hi - lo)
    q = np.floor(unit * top + 0.5)
    return q.astype(np.uint8 if bit_depth == 8 else np.uint16)


def save_image(img: ImageTensor, path, bit_depth: int | None = None) -> None:
    path = Path(path)
    depth = bit_depth or img.bit_depth or 8
    q = quantize(img.pixels, img.value_range, depth)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() in _TIFF_SUFFIXES:
        tifffile.imwrite(path, q)
    else:
        Image.fromarray(q).save(path, format="PNG")


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ------------------------------------------------------------ augmentation


def dihedral(array: np.ndarray, transform_id: int) -> np.ndarray:
    """Apply element ``transform_id`` of the dihedral group D4 to the last two axes.

    Ids 0-3 rotate by 0/90/180/270 degrees; ids 4-7 mirror horizontally after
    the same rotation.
    """
    if not 0 <= int(transform_id) <= 7:
        raise ValueError(f"transform_id must be in 0..7, got {transform_id}")
    out = np.rot90(array, k=transform_id % 4, axes=(-2, -1))
    if transform_id >= 4:
        out = out[..., ::-1]
    return out


def dihedral_augment(patch: PatchBatch, transform_id: int) -> PatchBatch:
    return PatchBatch(dihedral(patch.data, transform_id), patch.domain, patch.source_ids)


# ------------------------------------------------------------------ splits


@dataclass
class DatasetSplit:
    """Disjoint image groups for unpaired training plus validation.

    Images are looked up by identifier, either from ``images`` (in-memory
    datasets) or by loading ``root / identifier``.
    """

    clean_group: list[str]
    noisy_group: list[str]
    val_noisy: list[str] = field(default_factory=list)
    val_clean_ref: list[str] | None = None
    root: Path | None = None
    images: dict[str, ImageTensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        clean, noisy = set(self.clean_group), set(self.noisy_group)
        if clean & noisy:
            raise DatasetError(f"clean and noisy groups overlap: {sorted(clean & noisy)[:5]}")
        val = set(self.val_noisy) | set(self.val_clean_ref or ())
        if val & (clean | noisy):
            raise DatasetError("validation images overlap the training groups")
        if self.val_clean_ref is not None and len(self.val_clean_ref) != len(self.val_noisy):
            raise DatasetError("val_clean must list one reference per val_noisy image")

    @classmethod
    def from_arrays(cls, clean, noisy, val_noisy=(), val_clean=None) -> "DatasetSplit":
        """Build an in-memory split from lists of 2-D arrays."""
        images: dict[str, ImageTensor] = {}

        def register(prefix, arrays, domain):
            ids = []
            for i, a in enumerate(arrays):
                key = f"{prefix}/{i:05d}"
                images[key] = ImageTensor(a, domain=domain, source_id=key)
                ids.append(key)
            return ids

        return cls(
            clean_group=register("clean", clean, Domain.CLEAN_Y),
            noisy_group=register("noisy", noisy, Domain.NOISY_X),
            val_noisy=register("val_noisy", val_noisy, Domain.NOISY_X),
            val_clean_ref=None if val_clean is None else register("val_clean", val_clean, Domain.CLEAN_Y),
            images=images,
        )

    @property
    def has_references(self) -> bool:
        return bool(self.val_noisy) and self.val_clean_ref is not None

    def image(self, identifier: str, domain: Domain | None = None) -> ImageTensor:
        img = self.images.get(identifier)
        if img is None:
            if self.root is None:
                raise DatasetError(f"unknown image {identifier!r} and no root directory")
            img = load_image(self.root / identifier, domain=domain or Domain.CLEAN_Y, source_id=identifier)
            self.images[identifier] = img
        return img

    def preload(self) -> "DatasetSplit":
        for ident in self.clean_group + (self.val_clean_ref or []):
            self.image(ident, Domain.CLEAN_Y)
        for ident in self.noisy_group + self.val_noisy:
            self.image(ident, Domain.NOISY_X)
        return self


def read_manifest(path) -> DatasetSplit:
    path = Path(path)
    sections: dict[str, list[str]] = {}
    current = None
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in MANIFEST_SECTIONS:
                raise DatasetError(f"{path}:{lineno}: unknown section [{current}]")
            sections.setdefault(current, [])
            continue
        if current is None:
            raise DatasetError(f"{path}:{lineno}: entry outside of a section")
        sections[current].append(line)
    return DatasetSplit(
        clean_group=sections.get("clean", []),
        noisy_group=sections.get("noisy", []),
        val_noisy=sections.get("val_noisy", []),
        val_clean_ref=sections.get("val_clean"),
        root=path.parent,
    )


def write_manifest(split: DatasetSplit, path) -> None:
    groups = {
        "clean": split.clean_group,
        "noisy": split.noisy_group,
        "val_noisy": split.val_noisy,
        "val_clean": split.val_clean_ref,
    }
    lines = []
    for name in MANIFEST_SECTIONS:
        if groups[name] is None:
            continue
        lines.append(f"[{name}]")
        lines.extend(groups[name])
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


# ---------------------------------------------------------------- sampling


def random_offsets(height: int, width: int, n: int, rng: np.random.Generator, patch: int = PATCH) -> np.ndarray:
    """``n`` patch corners drawn uniformly over all valid offsets, shape (n, 2)."""
    if height < patch or width < patch:
        raise DatasetError(f"image {height}x{width} is smaller than the {patch}px patch")
    rows = rng.integers(0, height - patch + 1, size=n)
    cols = rng.integers(0, width - patch + 1, size=n)
    return np.stack([rows, cols], axis=1)


def _draw(split: DatasetSplit, group: Sequence[str], domain: Domain, m: int,
          rng: np.random.Generator, patch: int, augment: bool) -> PatchBatch:
    picks = rng.integers(0, len(group), size=m)
    out = np.empty((m, 1, patch, patch), dtype=np.float32)
    ids = []
    for i, j in enumerate(picks):
        img = split.image(group[j], domain)
        (r, c), = random_offsets(*img.shape, 1, rng, patch)
        crop = img.pixels[r:r + patch, c:c + patch]
        if augment and rng.random() < 0.5:
            crop = dihedral(crop, int(rng.integers(0, 8)))
        out[i, 0] = crop
        ids.append(group[j])
    return PatchBatch(out, domain, tuple(ids))


def sample_unpaired_batch(split: DatasetSplit, m: int, rng: np.random.Generator,
                          patch: int = PATCH, augment: bool = False) -> tuple[PatchBatch, PatchBatch]:
    """Draw ``m`` noisy and ``m`` clean patches independently of each other."""
    if not split.noisy_group or not split.clean_group:
        raise DatasetError("both the clean and the noisy group must be non-empty")
    x = _draw(split, split.noisy_group, Domain.NOISY_X, m, rng, patch, augment)
    y = _draw(split, split.clean_group, Domain.CLEAN_Y, m, rng, patch, augment)
    return x, y


def batch_for(split: DatasetSplit, m: int, seed: int, epoch: int, iteration: int,
              patch: int = PATCH, augment: bool = True) -> tuple[PatchBatch, PatchBatch]:
    """The batch pair for one (seed, epoch, iteration) cell, independent of call order."""
    return sample_unpaired_batch(split, m, rng_for(seed, epoch, iteration), patch, augment)


def epoch_batches(split: DatasetSplit, m: int, seed: int, epoch: int, n_iter: int, *,
                  start: int = 0, patch: int = PATCH, augment: bool = True,
                  workers: int = 0) -> Iterator[tuple[PatchBatch, PatchBatch]]:
    """Yield the batches of one epoch in order; ``workers`` only changes throughput."""
    iters = range(start, n_iter)
    if workers <= 0:
        for t in iters:
            yield batch_for(split, m, seed, epoch, t, patch, augment)
        return
    split.preload()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(lambda t: batch_for(split, m, seed, epoch, t, patch, augment), iters)


def center_crop(pixels: np.ndarray, multiple: int) -> np.ndarray:
    """Largest centered crop whose sides are multiples of ``multiple``."""
    h, w = pixels.shape[-2:]
    nh, nw = h - h % multiple, w - w % multiple
    r, c = (h - nh) // 2, (w - nw) // 2
    return pixels[..., r:r + nh, c:c + nw]
