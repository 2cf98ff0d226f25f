"""Dataset curation, preprocessing, splits, weighted sampling, and a
synthetic flood-tile generator for desk-scale experiments.

Dataset layout on disk:

    root/<region_id>/*.{pgm,rf32}
    root/metadata.json        {"<region_id>": {"flooding": true|false}, ...}

Tiles are single-band rasters in one of two formats:

* ``.pgm``  binary P5 portable graymap, maxval up to 65535 (two-byte
  big-endian samples, per the netpbm convention);
* ``.rf32`` raw float32 grid: 16-byte header (magic ``RF32``, uint32 LE
  width, height, band count) followed by float32 LE planes, band-major.

GeoTIFF ingestion is out of scope; ``load_raster`` is the adapter seam —
teach it a new suffix and everything downstream works unchanged.
"""

from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, DatasetError

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

RASTER_SUFFIXES = (".pgm", ".rf32")
RF32_MAGIC = b"RF32"
SPLITS = ("train", "val", "test")


# -- raster formats ---------------------------------------------------------


@dataclass
class RasterTile:
    data: np.ndarray  # (H, W) float64
    band: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.size == 0:
            raise DatasetError(f"raster band must be 2-D and non-empty, "
                               f"got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def write_pgm(path, array: np.ndarray) -> None:
    """Binary P5 graymap; samples wider than 8 bits are big-endian uint16."""
    arr = np.asarray(array)
    if arr.dtype == np.uint8:
        maxval, payload = 255, arr.tobytes()
    else:
        arr = arr.astype(np.uint16)
        maxval, payload = 65535, arr.astype(">u2").tobytes()
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + payload)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise DatasetError(f"{path}: not a binary P5 graymap")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos)
    if data.size != width * height:
        raise DatasetError(f"{path}: truncated pixel data")
    return data.reshape(height, width).astype(np.uint16)


def write_rf32(path, planes: np.ndarray) -> None:
    """Raw float32 grid; planes is (H, W) or (bands, H, W)."""
    arr = np.asarray(planes, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    bands, h, w = arr.shape
    header = RF32_MAGIC + struct.pack("<III", w, h, bands)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


def read_rf32(path, band: int = 0) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != RF32_MAGIC:
        raise DatasetError(f"{path}: bad rf32 header")
    w, h, bands = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * w * h * bands
    if len(raw) != expected or not 0 <= band < bands:
        raise DatasetError(f"{path}: truncated rf32 or band {band} missing")
    plane = np.frombuffer(raw, dtype="<f4", count=w * h, offset=16 + 4 * w * h * band)
    return plane.reshape(h, w).astype(np.float32)


def load_raster(path, band: int = 0) -> RasterTile:
    """Load one band of a raster tile; DatasetError on unreadable files."""
    path = Path(path)
    try:
        if path.suffix == ".pgm":
            return RasterTile(read_pgm(path), band=0)
        if path.suffix == ".rf32":
            return RasterTile(read_rf32(path, band=band), band=band)
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    raise DatasetError(f"{path}: unsupported raster format")


# -- manifest ----------------------------------------------------------------


@dataclass
class Sample:
    path: str
    region_id: str
    label: int  # 0 non-flooded, 1 flooded
    split: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {"path": self.path, "region_id": self.region_id,
             "label": self.label, "split": self.split},
            sort_keys=True)


@dataclass
class DatasetManifest:
    samples: list[Sample] = field(default_factory=list)
    discarded: dict[str, int] = field(default_factory=dict)
    missing_metadata: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def by_split(self, split: str) -> list[Sample]:
        return [s for s in self.samples if s.split == split]

    def class_counts(self, split: str | None = None) -> dict[int, int]:
        counts = {0: 0, 1: 0}
        for s in self.samples:
            if split is None or s.split == split:
                counts[s.label] += 1
        return counts

    def regions(self) -> list[str]:
        return sorted({s.region_id for s in self.samples})

    def to_jsonl(self, path) -> None:
        Path(path).write_text(
            "".join(s.to_json() + "\n" for s in self.samples))

    @classmethod
    def from_jsonl(cls, path) -> "DatasetManifest":
        samples = []
        for line in Path(path).read_text().splitlines():
            doc = json.loads(line)
            samples.append(Sample(doc["path"], doc["region_id"],
                                  int(doc["label"]), doc.get("split", "")))
        return cls(samples=samples)


def quality_filter(tile: RasterTile | None,
                   eps_var: float = 1e-6) -> tuple[bool, str]:
    """Keep/discard decision with a reason; never raises.

    Discards unreadable tiles, tiles whose variance falls below eps_var of
    the squared dynamic range, and tiles dominated (>99%) by one value.
    """
    if tile is None:
        return False, "corrupt"
    data = tile.data
    if not np.all(np.isfinite(data)):
        return False, "corrupt"
    lo, hi = float(data.min()), float(data.max())
    _, counts = np.unique(data, return_counts=True)
    if counts.max() > 0.99 * data.size:
        return False, "uniform"
    if hi > lo and float(data.var()) < eps_var * (hi - lo) ** 2:
        return False, "low_variance"
    return True, "kept"


def scan_dataset(root, metadata: dict | None = None, band: int = 0) -> DatasetManifest:
    """Enumerate region folders, label tiles from metadata, quality-filter.

    Every tile inherits its region's flood flag; regions absent from the
    metadata get the conservative default label 0 and a logged warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if metadata is None:
        meta_path = root / "metadata.json"
        metadata = json.loads(meta_path.read_text()) if meta_path.exists() else {}

    manifest = DatasetManifest()
    region_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    for region in region_dirs:
        entry = metadata.get(region.name)
        if entry is None:
            manifest.missing_metadata += 1
            logger.warning("region %s missing from metadata; defaulting to "
                           "non-flooded", region.name)
            label = 0
        else:
            label = int(bool(entry["flooding"]))
        files = sorted(p for p in region.iterdir()
                       if p.suffix in RASTER_SUFFIXES)
        for path in files:
            try:
                tile = load_raster(path, band=band)
            except DatasetError:
                tile = None
            keep, reason = quality_filter(tile)
            if keep:
                manifest.samples.append(Sample(str(path), region.name, label))
            else:
                manifest.discarded[reason] = manifest.discarded.get(reason, 0) + 1
    if not manifest.samples:
        raise DatasetError(f"no usable tiles found under {root}")
    return manifest


# -- preprocessing -------------------------------------------------------------


def resize_bilinear(plane: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centered sampling."""
    h, w = plane.shape
    plane = plane.astype(np.float64)

    def coords(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, wy = coords(h, size)
    x0, x1, wx = coords(w, size)
    top = plane[y0][:, x0] * (1 - wx) + plane[y0][:, x1] * wx
    bot = plane[y1][:, x0] * (1 - wx) + plane[y1][:, x1] * wx
    return top * (1 - wy[:, None]) + bot * wy[:, None]


def preprocess_tile(tile: RasterTile, size: int, *,
                    median_filter: bool = False,
                    percentile_stretch: bool = False,
                    mean=IMAGENET_MEAN, std=IMAGENET_STD,
                    dtype=np.float32) -> np.ndarray:
    """Raster band -> normalized (3, size, size) tensor data.

    Min-max normalizes to 8-bit (round-half-even), replicates across three
    channels, resizes bilinearly, scales to [0, 1], then applies the
    per-channel normalization constants.
    """
    data = tile.data
    if median_filter:
        data = ndimage.median_filter(data, size=3)
    if percentile_stretch:
        lo, hi = np.percentile(data, [2.0, 98.0])
        if hi > lo:
            data = np.clip(data, lo, hi)
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        raise ContractError("constant tile reached preprocessing; "
                            "quality_filter should have discarded it")
    intensity = np.round(255.0 * (data - lo) / (hi - lo))
    resized = resize_bilinear(intensity, size) / 255.0
    channels = np.stack([resized] * 3)
    mean = np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(3, 1, 1)
    return ((channels - mean) / std).astype(dtype)


def augment(image: np.ndarray, rng: np.random.Generator,
            p_hflip: float = 0.5, p_vflip: float = 0.5,
            rotate: bool = True) -> np.ndarray:
    """Train-time flips and right-angle rotation on a (3, S, S) array."""
    out = image
    if rng.random() < p_hflip:
        out = out[:, :, ::-1]
    if rng.random() < p_vflip:
        out = out[:, ::-1, :]
    if rotate:
        out = np.rot90(out, k=int(rng.integers(0, 4)), axes=(1, 2))
    return np.ascontiguousarray(out)


# -- splitting and sampling ------------------------------------------------------


def split_dataset(manifest: DatasetManifest,
                  ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
                  seed: int = 0, granularity: str = "region") -> DatasetManifest:
    """Assign train/val/test splits in place, deterministically under seed.

    Region granularity keeps whole regions inside one split (leakage-safe);
    tile granularity shuffles tiles individually.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    if granularity not in ("region", "tile"):
        raise ConfigError(f"granularity must be region or tile, got {granularity!r}")

    rng = np.random.default_rng(seed)
    n = len(manifest.samples)
    if granularity == "tile":
        order = rng.permutation(n)
        n_train = int(ratios[0] * n)
        n_val = int(ratios[1] * n)
        for rank, idx in enumerate(order):
            if rank < n_train:
                manifest.samples[idx].split = "train"
            elif rank < n_train + n_val:
                manifest.samples[idx].split = "val"
            else:
                manifest.samples[idx].split = "test"
    else:
        regions = manifest.regions()
        order = rng.permutation(len(regions))
        sizes = {r: 0 for r in regions}
        for s in manifest.samples:
            sizes[s.region_id] += 1
        boundaries = (ratios[0] * n, (ratios[0] + ratios[1]) * n)
        assignment: dict[str, str] = {}
        taken, bucket = 0, 0
        for i in order:
            while bucket < 2 and taken >= boundaries[bucket] - 1e-9:
                bucket += 1
            region = regions[i]
            assignment[region] = SPLITS[bucket]
            taken += sizes[region]
        for s in manifest.samples:
            s.split = assignment[s.region_id]
    return manifest


class WeightedSampler:
    """Infinite stream of train indices drawn with replacement, each class
    weighted by its inverse frequency."""

    def __init__(self, labels, seed: int | np.random.Generator = 0):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ConfigError("cannot sample from an empty set")
        counts = np.bincount(labels, minlength=2)
        if (counts == 0).any():
            raise ConfigError(
                f"weighted sampling needs both classes, got counts {counts.tolist()}"
            )
        weights = 1.0 / counts[labels]
        self.probs = weights / weights.sum()
        self.n = labels.size
        self.rng = (seed if isinstance(seed, np.random.Generator)
                    else np.random.default_rng(seed))

    def draw(self, k: int) -> np.ndarray:
        return self.rng.choice(self.n, size=k, replace=True, p=self.probs)

    def __iter__(self):
        while True:
            yield from self.draw(256)

    def state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def weighted_sampler(samples: list[Sample], seed: int = 0) -> WeightedSampler:
    return WeightedSampler([s.label for s in samples], seed)


# -- synthetic generator -----------------------------------------------------------


def _synth_tile(rng: np.random.Generator, size: int, flooded: bool) -> np.ndarray:
    """Textured background; flooded tiles carry dark connected blobs
    (the SAR low-backscatter water analogy)."""
    noise = rng.normal(0.0, 1.0, size=(size, size))
    texture = ndimage.uniform_filter(noise, size=5)
    span = texture.max() - texture.min()
    texture = (texture - texture.min()) / (span if span > 0 else 1.0)
    img = 0.55 + 0.3 * texture + rng.uniform(-0.05, 0.05)
    if flooded:
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
            ry, rx = rng.uniform(size / 6, size / 3, size=2)
            d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
            w = np.clip(1.2 - d, 0.0, 1.0)
            img = img * (1 - 0.85 * w) + 0.12 * (0.85 * w)
    return (np.clip(img, 0.0, 1.0) * 65535).astype(np.uint16)


def synth_generate(out_dir, n_regions: int, tiles_per_region: int, seed: int = 0,
                   tile_size: int = 64, flood_fraction: float = 0.5) -> dict:
    """Write a label-separable synthetic dataset; byte-identical under a
    fixed seed. Returns the region -> flooded mapping."""
    if n_regions < 1 or tiles_per_region < 1:
        raise ConfigError("need at least one region and one tile per region")
    if not 0.0 <= flood_fraction <= 1.0:
        raise ConfigError(f"flood fraction must be in [0, 1], got {flood_fraction}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    master = np.random.SeedSequence(seed)
    assign_rng = np.random.default_rng(master.spawn(1)[0])
    n_flooded = int(round(flood_fraction * n_regions))
    if n_regions >= 2 and 0.0 < flood_fraction < 1.0:
        n_flooded = min(max(n_flooded, 1), n_regions - 1)
    flooded_ids = set(assign_rng.permutation(n_regions)[:n_flooded].tolist())

    metadata = {}
    region_seeds = master.spawn(n_regions)
    for i in range(n_regions):
        region = f"region_{i:04d}"
        flooded = i in flooded_ids
        metadata[region] = {"flooding": flooded}
        rdir = out / region
        rdir.mkdir(exist_ok=True)
        rng = np.random.default_rng(region_seeds[i])
        for t in range(tiles_per_region):
            tile = _synth_tile(rng, tile_size, flooded)
            if t % 5 == 4:  # exercise both raster formats
                write_rf32(rdir / f"tile_{t:03d}.rf32", tile.astype(np.float32))
            else:
                write_pgm(rdir / f"tile_{t:03d}.pgm", tile)
    (out / "metadata.json").write_text(
        json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return {r: m["flooding"] for r, m in metadata.items()}


# -- model-facing dataset ------------------------------------------------------------


class FloodDataset:
    """Split view of a manifest with cached preprocessing.

    Augmentation only ever fires for the train split and is counted, so
    tests can assert the val/test paths apply resizing and normalization
    alone.
    """

    def __init__(self, manifest: DatasetManifest, split: str, image_size: int,
                 *, band: int = 0, median_filter: bool = False,
                 percentile_stretch: bool = False, augment_enabled: bool = True,
                 dtype=np.float32):
        self.samples = manifest.by_split(split)
        if not self.samples:
            raise DatasetError(f"split {split!r} is empty")
        self.split = split
        self.image_size = image_size
        self.band = band
        self.median_filter = median_filter
        self.percentile_stretch = percentile_stretch
        self.augment_enabled = augment_enabled
        self.dtype = dtype
        self.augment_calls = 0
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.asarray([s.label for s in self.samples], dtype=np.int64)

    def tensor(self, i: int) -> np.ndarray:
        cached = self._cache.get(i)
        if cached is None:
            tile = load_raster(self.samples[i].path, band=self.band)
            cached = preprocess_tile(
                tile, self.image_size,
                median_filter=self.median_filter,
                percentile_stretch=self.percentile_stretch,
                dtype=self.dtype)
            self._cache[i] = cached
        return cached

    def warmup(self, workers: int = 1) -> None:
        """Precompute the preprocessing cache, optionally with a thread pool.
        Results land in fixed slots, so worker scheduling cannot change them."""
        if workers <= 1:
            for i in range(len(self.samples)):
                self.tensor(i)
            return
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(self.tensor, range(len(self.samples))))

    def batch(self, indices, train: bool = False,
              rng: np.random.Generator | None = None):
        """(B, 3, S, S) array plus labels; augments train-split draws."""
        do_augment = train and self.augment_enabled and self.split == "train"
        items = []
        for i in indices:
            x = self.tensor(int(i))
            if do_augment:
                if rng is None:
                    raise ContractError("augmentation needs an rng")
                x = augment(x, rng)
                self.augment_calls += 1
            items.append(x)
        labels = np.asarray([self.samples[int(i)].label for i in indices],
                            dtype=np.int64)
        return np.stack(items), labels
