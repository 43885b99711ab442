"""Dataset discovery, train/test split, decoding, resizing, augmentation, batching.

On-disk layout of a dataset root::

    <root>/images/<stem>.png|.jpg|.jpeg
    <root>/masks/<stem>.png

Image and mask are paired by file stem.

All randomness goes through :func:`portable_rng`, a Philox-4x64 counter-based
generator keyed by ``(seed, stream)``, so splits and augmentations are
reproducible across platforms and independent of worker scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError

IMAGE_EXTS = (".png", ".jpg", ".jpeg")
SOURCES = ("Kvasir", "ClinicDB", "ColonDB", "CVC-T", "ETIS", "custom")
# PraNet training split: 900 Kvasir + 550 ClinicDB = 1450
TRAIN_KVASIR = 900
TRAIN_CLINICDB = 550


def portable_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator; ``stream`` selects an independent sequence."""
    if not 0 <= seed < 2 ** 64 or not 0 <= stream < 2 ** 64:
        raise ValueError("seed and stream must be in [0, 2**64)")
    return np.random.Generator(np.random.Philox(key=seed + (stream << 64)))


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: Path
    mask_path: Path
    source: str = "custom"


@dataclass
class Sample:
    image: torch.Tensor  # (3, H, W) float32 in [0, 1]
    mask: torch.Tensor   # (1, H, W) float32 in {0, 1}
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.id}: image must be (3, H, W), got {tuple(self.image.shape)}")
        if self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValueError(f"{self.id}: mask must be (1, H, W), got {tuple(self.mask.shape)}")
        if self.image.shape[-2:] != self.mask.shape[-2:]:
            raise ValueError(f"{self.id}: image {tuple(self.image.shape[-2:])} and mask "
                             f"{tuple(self.mask.shape[-2:])} differ in size")


@dataclass
class Batch:
    images: torch.Tensor
    masks: torch.Tensor
    ids: list[str]


@dataclass
class AugmentPolicy:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    jitter: tuple[float, float, float] = (0.1, 0.1, 0.1)  # brightness, contrast, saturation
    cutout: tuple[int, float, float] = (1, 0.1, 0.0)     # holes, side fraction, fill
    enabled: bool = True

    def __post_init__(self):
        for name in ("hflip_p", "vflip_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v}")
        if any(j < 0 or j >= 1 for j in self.jitter):
            raise ConfigError(f"jitter deltas must lie in [0, 1), got {self.jitter}")
        holes, frac, _ = self.cutout
        if holes < 0 or not 0.0 < frac < 1.0:
            raise ConfigError(f"cutout needs holes >= 0 and size fraction in (0, 1), got {self.cutout}")


# ---------------------------------------------------------------------------
# discovery and splits

def scan_dataset(root, source: str = "custom") -> list[SampleRecord]:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        return []
    masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS}
    records = []
    for p in sorted(img_dir.iterdir()):
        if p.suffix.lower() in IMAGE_EXTS and p.stem in masks:
            records.append(SampleRecord(p.stem, p, masks[p.stem], source))
    return records


def build_split(kvasir_root, clinicdb_root, seed: int = 0, n_kvasir: int = TRAIN_KVASIR,
                n_clinicdb: int = TRAIN_CLINICDB):
    """Random train/test split of Kvasir + ClinicDB.

    Returns ``(train, test_kvasir, test_clinicdb)``; train holds ``n_kvasir``
    Kvasir and ``n_clinicdb`` ClinicDB records, the rest are test sets.
    """
    out_train, tests = [], []
    for stream, (root, source, n) in enumerate(
            [(kvasir_root, "Kvasir", n_kvasir), (clinicdb_root, "ClinicDB", n_clinicdb)]):
        records = scan_dataset(root, source)
        if len(records) < n:
            raise ValueError(f"{source} at {root}: need at least {n} image/mask pairs, found {len(records)}")
        order = portable_rng(seed, stream).permutation(len(records))
        picked = set(order[:n].tolist())
        out_train += [records[i] for i in sorted(picked)]
        tests.append([r for i, r in enumerate(records) if i not in picked])
    return out_train, tests[0], tests[1]


def write_manifest(path, splits: dict[str, Sequence[SampleRecord]]) -> Path:
    """Tab-separated ``split source id`` lines."""
    path = Path(path)
    lines = [f"{name}\t{r.source}\t{r.id}" for name, recs in splits.items() for r in recs]
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# decoding and resizing

def load_sample(record: SampleRecord) -> Sample:
    try:
        with Image.open(record.image_path) as im:
            im.load()
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(record.mask_path) as m:
            m.load()
            mask = np.asarray(m.convert("L"), dtype=np.uint8)
    except OSError as e:
        raise OSError(f"cannot decode {record.id} ({record.image_path}, {record.mask_path}): {e}") from e
    if image.shape[:2] != mask.shape:
        raise ValueError(f"{record.id}: image {image.shape[:2]} and mask {mask.shape} differ in size")
    return Sample(torch.from_numpy(image.transpose(2, 0, 1).copy()),
                  torch.from_numpy((mask >= 128).astype(np.float32))[None], record.id)


def resize_sample(sample: Sample, size=(352, 352)) -> Sample:
    size = tuple(size)
    if tuple(sample.image.shape[-2:]) == size:
        return sample
    image = F.interpolate(sample.image[None], size=size, mode="bilinear", align_corners=False)[0]
    mask = F.interpolate(sample.mask[None], size=size, mode="nearest")[0]
    return Sample(image.clamp_(0.0, 1.0), mask, sample.id)


# ---------------------------------------------------------------------------
# augmentation

def _gray(img: torch.Tensor) -> torch.Tensor:
    return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]


def color_jitter(img: torch.Tensor, brightness: float, contrast: float, saturation: float) -> torch.Tensor:
    """Multiplicative factors, applied in that order, clamped to [0, 1].
    A factor of exactly 1 is skipped so it cannot introduce rounding."""
    if brightness != 1.0:
        img = (img * brightness).clamp(0, 1)
    if contrast != 1.0:
        mean = _gray(img).mean()
        img = ((img - mean) * contrast + mean).clamp(0, 1)
    if saturation != 1.0:
        g = _gray(img)
        img = ((img - g) * saturation + g).clamp(0, 1)
    return img


def augment(sample: Sample, rng: np.random.Generator, policy: AugmentPolicy) -> Sample:
    """Flips hit image and mask alike; jitter and cutout touch the image only.

    Draws from ``rng`` in a fixed order regardless of which ops fire.
    """
    if not policy.enabled:
        return sample
    image, mask = sample.image, sample.mask
    hflip, vflip = rng.random() < policy.hflip_p, rng.random() < policy.vflip_p
    factors = [1.0 + rng.uniform(-d, d) for d in policy.jitter]
    holes, frac, fill = policy.cutout
    h, w = image.shape[-2:]
    side = max(1, int(round(frac * min(h, w))))
    corners = [(int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1)))
               for _ in range(int(holes))]
    if hflip:
        image, mask = image.flip(-1), mask.flip(-1)
    if vflip:
        image, mask = image.flip(-2), mask.flip(-2)
    image = color_jitter(image, *factors)
    if corners:
        image = image.clone()
        for y, x in corners:
            image[:, y:y + side, x:x + side] = fill
    return Sample(image.contiguous(), mask.contiguous(), sample.id)


# ---------------------------------------------------------------------------
# batching

def epoch_order(n: int, shuffle: bool, seed: int, epoch: int = 0) -> list[int]:
    if not shuffle:
        return list(range(n))
    return portable_rng(seed, (1 << 16) + epoch).permutation(n).tolist()


def batch_indices(n: int, batch_size: int, shuffle: bool = True, seed: int = 0,
                  epoch: int = 0) -> list[list[int]]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(n, shuffle, seed, epoch)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def collate(samples: Sequence[Sample]) -> Batch:
    return Batch(torch.stack([s.image for s in samples]), torch.stack([s.mask for s in samples]),
                 [s.id for s in samples])


class SegmentationDataset:
    """Decoded, resized samples plus per-(epoch, index) augmentation.

    Items may be :class:`SampleRecord` (decoded lazily, then cached) or
    ready :class:`Sample` objects.
    """

    def __init__(self, items: Sequence, size=(352, 352), policy: AugmentPolicy | None = None,
                 seed: int = 0):
        self.items = list(items)
        self.size = tuple(size)
        self.policy = policy or AugmentPolicy(enabled=False)
        self.seed = seed
        self._cache: dict[int, Sample] = {}

    def __len__(self):
        return len(self.items)

    def base(self, i: int) -> Sample:
        if i not in self._cache:
            item = self.items[i]
            sample = item if isinstance(item, Sample) else load_sample(item)
            self._cache[i] = resize_sample(sample, self.size)
        return self._cache[i]

    def get(self, i: int, epoch: int = 0) -> Sample:
        stream = 2 ** 32 + (epoch << 24) + i
        return augment(self.base(i), portable_rng(self.seed, stream), self.policy)

    def ids(self) -> list[str]:
        return [getattr(it, "id", "") for it in self.items]


def batches(dataset, batch_size: int, shuffle: bool = True, seed: int = 0,
            epoch: int = 0) -> Iterator[Batch]:
    """Every sample once per epoch, last partial batch kept."""
    if not isinstance(dataset, SegmentationDataset):
        dataset = SegmentationDataset(dataset, size=_common_size(dataset), seed=seed)
    for idx in batch_indices(len(dataset), batch_size, shuffle, seed, epoch):
        yield collate([dataset.get(i, epoch) for i in idx])


def _common_size(items):
    for it in items:
        if isinstance(it, Sample):
            return tuple(it.image.shape[-2:])
    return (352, 352)


# ---------------------------------------------------------------------------
# synthetic fixtures

def synthetic_disks(n: int = 4, size: int = 64, seed: int = 0, empty: bool = False) -> list[Sample]:
    """Reddish disks on a noisy greenish background, with matching masks."""
    rng = portable_rng(seed, 7)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    out = []
    for k in range(n):
        r = rng.uniform(0.15, 0.3) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        disk = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float32)
        if empty:
            disk[:] = 0
        noise = rng.normal(0, 0.05, size=(3, size, size)).astype(np.float32)
        bg = np.array([0.35, 0.45, 0.3], np.float32)[:, None, None]
        fg = np.array([0.8, 0.3, 0.25], np.float32)[:, None, None]
        img = np.clip(bg * (1 - disk) + fg * disk + noise, 0, 1)
        out.append(Sample(torch.from_numpy(img), torch.from_numpy(disk)[None], f"synth{k:03d}"))
    return out


def write_dataset(root, samples: Sequence[Sample]) -> list[SampleRecord]:
    """Write samples as PNGs in the documented layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = (s.image.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.mask[0].numpy() * 255).astype(np.uint8)).save(root / "masks" / f"{s.id}.png")
    return scan_dataset(root)
