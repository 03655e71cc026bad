"""Factor-labelled image datasets: dSprites ingestion and a procedural renderer."""
from __future__ import annotations

import hashlib
import logging
import os
import struct
import urllib.request
import zipfile
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import DatasetFormatError

log = logging.getLogger(__name__)

DSPRITES_URL = (
    "https://github.com/deepmind/dsprites-dataset/raw/master/"
    "dsprites_ndarray_co1sh3sc6or40x32y32_64x64.npz"
)
DSPRITES_FILENAME = "dsprites_ndarray_co1sh3sc6or40x32y32_64x64.npz"
DSPRITES_FACTOR_NAMES = ("shape", "scale", "orientation", "posX", "posY")
DATA_DIR_ENV = "DISENTANGAN_DATA"


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, Path.home() / ".cache" / "disentangan"))


@dataclass
class FactorDataset:
    """Images with one integer class per ground-truth factor.

    ``images`` is stored as ``(N, H, W, C)`` in any numeric dtype; served pixel
    values are ``images * pixel_scale``. With ``channels=3`` a one-channel store
    is replicated on access.
    """

    images: np.ndarray
    factor_classes: np.ndarray
    factor_sizes: Tuple[int, ...]
    name: str = "dataset"
    factor_names: Tuple[str, ...] = ()
    pixel_scale: float = 1.0
    channels: Optional[int] = None

    def __post_init__(self):
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        self.factor_classes = np.asarray(self.factor_classes, dtype=np.int64)
        self.factor_sizes = tuple(int(s) for s in self.factor_sizes)
        if not self.factor_names:
            self.factor_names = tuple(f"factor{i}" for i in range(len(self.factor_sizes)))
        self.factor_names = tuple(self.factor_names)
        if self.channels is None:
            self.channels = self.images.shape[3]
        stored = self.images.shape[3]
        if self.channels != stored and (stored != 1 or self.channels not in (1, 3)):
            raise DatasetFormatError(f"cannot serve {self.channels} channels from {self.images.shape[3]}")
        if self.factor_classes.shape != (len(self.images), len(self.factor_sizes)):
            raise DatasetFormatError(
                f"factor_classes has shape {self.factor_classes.shape}, expected "
                f"({len(self.images)}, {len(self.factor_sizes)})")

    def __len__(self):
        return len(self.images)

    @property
    def img_size(self) -> int:
        return self.images.shape[1]

    @property
    def num_factors(self) -> int:
        return len(self.factor_sizes)

    def get_images(self, indices) -> torch.Tensor:
        """Float32 batch of shape ``(B, C, H, W)`` in [0, 1]."""
        raw = self.images[np.asarray(indices)]
        x = torch.from_numpy(np.ascontiguousarray(raw)).permute(0, 3, 1, 2).to(torch.float32)
        if self.pixel_scale != 1.0:
            x = x * self.pixel_scale
        if x.shape[1] != self.channels:
            x = x.expand(-1, self.channels, -1, -1).contiguous()
        return x

    def with_channels(self, channels: int) -> "FactorDataset":
        return FactorDataset(self.images, self.factor_classes, self.factor_sizes, self.name,
                             self.factor_names, self.pixel_scale, channels)

    @cached_property
    def _strata(self) -> List[List[np.ndarray]]:
        out = []
        for f, size in enumerate(self.factor_sizes):
            col = self.factor_classes[:, f]
            order = np.argsort(col, kind="stable")
            bounds = np.searchsorted(col[order], np.arange(size + 1))
            out.append([order[bounds[k]:bounds[k + 1]] for k in range(size)])
        return out

    def stratum(self, factor: int, cls: int) -> np.ndarray:
        return self._strata[factor][cls]

    def validate(self) -> List[str]:
        """Invariant violations as human-readable strings (empty when valid)."""
        problems = []
        fc = self.factor_classes
        if len(self) == 0:
            problems.append("dataset is empty")
        for f, size in enumerate(self.factor_sizes):
            if size < 1:
                problems.append(f"factor {f} has size {size}")
            col = fc[:, f]
            if len(col) and (col.min() < 0 or col.max() >= size):
                problems.append(f"factor {f} classes outside [0, {size})")
        lo = float(self.images.min()) * self.pixel_scale if len(self) else 0.0
        hi = float(self.images.max()) * self.pixel_scale if len(self) else 0.0
        if lo < 0 or hi > 1 + 1e-6:
            problems.append(f"pixel values span [{lo}, {hi}], outside [0, 1]")
        if not problems and len(self) == int(np.prod(self.factor_sizes)):
            flat = np.ravel_multi_index(tuple(fc.T), self.factor_sizes)
            if len(np.unique(flat)) != len(self):
                problems.append("factor combinations repeat in a full-factorial sized dataset")
        return problems


def factor_value_dataset(ds: FactorDataset) -> FactorDataset:
    """Same factors, but each "image" is the 1x1 vector of normalised factor classes.

    Paired with a flattening encoder this is the ideal representation, one
    dimension per factor.
    """
    denom = np.maximum(np.asarray(ds.factor_sizes, dtype=np.float64) - 1, 1)
    vals = (ds.factor_classes / denom).astype(np.float32)[:, None, None, :]
    return FactorDataset(vals, ds.factor_classes, ds.factor_sizes, ds.name + "-factors", ds.factor_names, 1.0)


# -- archives ---------------------------------------------------------------

def save_archive(dataset: FactorDataset, path) -> None:
    """Write the multi-array layout read by :func:`load_archive`."""
    imgs = dataset.images
    if imgs.shape[3] == 1:
        imgs = imgs[..., 0]
    np.savez_compressed(
        path,
        imgs=imgs,
        latents_classes=dataset.factor_classes,
        latents_sizes=np.asarray(dataset.factor_sizes, dtype=np.int64),
        factor_names=np.asarray(dataset.factor_names),
        pixel_scale=np.float64(dataset.pixel_scale),
        name=np.asarray(dataset.name),
    )


_LOCAL_HEADER = struct.Struct("<4s2B4HL2L2H")
_LOCAL_MAGIC = b"PK\x03\x04"


def _scan_local_headers(path, size: int) -> str:
    """Walk the zip local headers of a file whose central directory is unreadable."""
    offset = 0
    with open(path, "rb") as fh:
        while offset + _LOCAL_HEADER.size <= size:
            fh.seek(offset)
            fields = _LOCAL_HEADER.unpack(fh.read(_LOCAL_HEADER.size))
            if fields[0] != _LOCAL_MAGIC:
                break
            csize, name_len, extra_len = fields[8], fields[10], fields[11]
            name = fh.read(name_len).decode("utf-8", "replace")
            end = offset + _LOCAL_HEADER.size + name_len + extra_len + csize
            if end > size:
                return (f"truncated: member {name!r} at offset {offset} needs bytes up to {end}, "
                        f"file is {size} bytes")
            offset = end
    return f"no readable central directory; member data stops at offset {offset} of {size} bytes"


def _archive_member_report(path) -> Optional[str]:
    """Locate truncation or corruption inside an ``.npz`` (zip) file."""
    size = os.path.getsize(path)
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile:
        return _scan_local_headers(path, size)
    with zf:
        for info in zf.infolist():
            end = info.header_offset + info.compress_size
            if end > size:
                return (f"member {info.filename!r} at offset {info.header_offset} needs bytes up to "
                        f"{end}, file is {size} bytes")
            try:
                with zf.open(info) as fh:
                    while fh.read(1 << 20):
                        pass
            except (zipfile.BadZipFile, EOFError, OSError) as exc:
                return f"member {info.filename!r} at offset {info.header_offset} is corrupt: {exc}"
    return None


def load_archive(path, channels: Optional[int] = None, drop_constant: bool = True) -> FactorDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    problem = _archive_member_report(path)
    if problem:
        raise DatasetFormatError(f"{path}: {problem}")
    with np.load(path, allow_pickle=False) as npz:
        keys = set(npz.files)
        missing = {"imgs", "latents_classes"} - keys
        if missing:
            raise DatasetFormatError(f"{path}: missing keys {sorted(missing)}; found {sorted(keys)}")
        imgs = npz["imgs"]
        classes = npz["latents_classes"].astype(np.int64)
        sizes = tuple(npz["latents_sizes"].tolist()) if "latents_sizes" in keys else tuple(
            (classes.max(axis=0) + 1).tolist())
        names = tuple(npz["factor_names"].tolist()) if "factor_names" in keys else ()
        scale = float(npz["pixel_scale"]) if "pixel_scale" in keys else None
        name = str(npz["name"]) if "name" in keys else path.stem
    if imgs.ndim not in (3, 4):
        raise DatasetFormatError(f"{path}: 'imgs' must be 3- or 4-dimensional, got shape {imgs.shape}")
    if classes.ndim != 2 or len(classes) != len(imgs):
        raise DatasetFormatError(
            f"{path}: 'latents_classes' shape {classes.shape} does not match 'imgs' shape {imgs.shape}")
    if len(sizes) != classes.shape[1]:
        raise DatasetFormatError(f"{path}: 'latents_sizes' has {len(sizes)} entries for {classes.shape[1]} factors")
    if scale is None:
        scale = 1.0 if imgs.dtype.kind == "f" or int(imgs.max(initial=0)) <= 1 else 1.0 / 255.0
    if not names:
        names = tuple(f"factor{i}" for i in range(len(sizes)))
    if drop_constant:
        keep = [f for f, s in enumerate(sizes) if s > 1]
        classes = classes[:, keep]
        sizes = tuple(sizes[f] for f in keep)
        names = tuple(names[f] for f in keep)
    ds = FactorDataset(imgs, classes, sizes, name, names, scale)
    return ds.with_channels(channels) if channels else ds


def _downsample2x(imgs: np.ndarray, chunk: int = 32768) -> np.ndarray:
    """2x2 block sums of a binary ``(N, H, W)`` array, as uint8 counts 0..4."""
    n, h, w = imgs.shape
    out = np.empty((n, h // 2, w // 2), dtype=np.uint8)
    for s in range(0, n, chunk):
        block = imgs[s:s + chunk].reshape(-1, h // 2, 2, w // 2, 2)
        out[s:s + chunk] = block.sum(axis=(2, 4), dtype=np.uint8)
    return out


def load_dsprites(path, channels: int = 1, img_size: int = 64) -> FactorDataset:
    """Read the official dSprites archive; drops the constant colour factor.

    ``img_size=32`` averages 2x2 pixel blocks, keeping the sprite centred.
    """
    ds = load_archive(path, drop_constant=True)
    if ds.images.shape[1:3] != (64, 64):
        raise DatasetFormatError(f"{path}: expected 64x64 images, got {ds.images.shape[1:3]}")
    if ds.num_factors != 5:
        raise DatasetFormatError(f"{path}: expected 5 non-constant factors, got {ds.factor_sizes}")
    imgs, scale = ds.images[..., 0], ds.pixel_scale
    if img_size == 32:
        imgs, scale = _downsample2x(imgs), 0.25 * ds.pixel_scale
    elif img_size != 64:
        raise ValueError("dSprites is served at 64 or 32 pixels")
    return FactorDataset(imgs, ds.factor_classes, ds.factor_sizes, "dsprites",
                         DSPRITES_FACTOR_NAMES, scale, channels)


def sha256_file(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def fetch_dsprites(dest_dir=None, url: str = DSPRITES_URL, expected_sha256: Optional[str] = None) -> Path:
    """Download dSprites and check its hash.

    The digest is compared with ``expected_sha256`` when given, otherwise with a
    ``.sha256`` sidecar from an earlier fetch; a first fetch writes the sidecar.
    """
    dest_dir = Path(dest_dir or default_data_dir())
    dest_dir.mkdir(parents=True, exist_ok=True)
    dest = dest_dir / DSPRITES_FILENAME
    sidecar = dest.with_suffix(dest.suffix + ".sha256")
    if not dest.exists():
        tmp = dest.with_suffix(".part")
        log.info("downloading %s", url)
        urllib.request.urlretrieve(url, tmp)
        tmp.replace(dest)
    digest = sha256_file(dest)
    pinned = expected_sha256 or (sidecar.read_text().split()[0] if sidecar.exists() else None)
    if pinned and pinned.lower() != digest:
        raise DatasetFormatError(f"checksum mismatch for {dest}: expected {pinned}, got {digest}")
    if not sidecar.exists():
        sidecar.write_text(f"{digest}  {dest.name}\n")
    return dest


def verify_archive(path) -> List[str]:
    try:
        ds = load_archive(path, drop_constant=False)
    except (DatasetFormatError, OSError, ValueError) as exc:
        return [str(exc)]
    return ds.validate()


# -- synthetic renderer -----------------------------------------------------

SYNTH_FACTOR_KINDS = ("x", "y", "size", "brightness", "shape")
DEFAULT_SYNTH_SPEC = (("x", 8), ("y", 8), ("size", 4), ("brightness", 4))
SYNTH_SHAPES = ("square", "cross", "diamond")


def parse_synth_spec(text: str) -> Tuple[Tuple[str, int], ...]:
    """``"x=8,y=8,size=4,brightness=4"`` -> ``(("x", 8), ...)``."""
    spec = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, count = part.partition("=")
        spec.append((name.strip(), int(count)))
    return tuple(spec)


def _shape_mask(shape: str, side: int) -> np.ndarray:
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    r = np.arange(side) - (side - 1) / 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    half = side / 2
    if shape == "cross":
        arm = max(side / 6, 0.5)
        return (np.abs(yy) <= arm) | (np.abs(xx) <= arm)
    if shape == "diamond":
        return np.abs(yy) + np.abs(xx) <= half
    raise ValueError(f"unknown shape {shape!r}")


def synth_factors(spec: Sequence[Tuple[str, int]] = DEFAULT_SYNTH_SPEC, img_size: int = 32,
                  rng: Optional[np.random.Generator] = None, cap: int = 1 << 16,
                  jitter: int = 0) -> FactorDataset:
    """Render one sprite per factor combination on a black background.

    Factors not named in ``spec`` are held at a fixed value (centred, largest
    size, full brightness, square). ``jitter`` adds a random integer offset of up
    to that many pixels to each placement, drawn from ``rng``.
    """
    spec = tuple((str(n), int(k)) for n, k in spec)
    names = [n for n, _ in spec]
    for n, k in spec:
        if n not in SYNTH_FACTOR_KINDS:
            raise ValueError(f"unknown factor {n!r}; choose from {SYNTH_FACTOR_KINDS}")
        if k < 2:
            raise ValueError(f"factor {n!r} needs at least 2 classes")
    if len(set(names)) != len(names):
        raise ValueError("factor names repeat")
    if dict(spec).get("shape", 0) > len(SYNTH_SHAPES):
        raise ValueError(f"at most {len(SYNTH_SHAPES)} shapes")
    sizes = tuple(k for _, k in spec)
    total = int(np.prod(sizes))
    if total > cap:
        raise ValueError(f"full factorial has {total} images, above cap {cap}")
    if jitter and rng is None:
        raise ValueError("jitter needs an rng")

    counts = dict(spec)
    max_side = int(round(0.35 * img_size))
    min_side = int(round(0.15 * img_size))
    sides = np.rint(np.linspace(min_side, max_side, counts.get("size", 1))).astype(int) \
        if "size" in counts else np.array([max_side])
    lo, hi = max_side / 2 + 1, img_size - max_side / 2 - 1
    xs = np.linspace(lo, hi, counts["x"]) if "x" in counts else np.array([img_size / 2])
    ys = np.linspace(lo, hi, counts["y"]) if "y" in counts else np.array([img_size / 2])
    levels = np.rint(np.linspace(0.4, 1.0, counts["brightness"]) * 255).astype(np.uint8) \
        if "brightness" in counts else np.array([255], dtype=np.uint8)
    shapes = SYNTH_SHAPES[:counts["shape"]] if "shape" in counts else ("square",)

    grid = np.stack(np.meshgrid(*[np.arange(k) for k in sizes], indexing="ij"), -1).reshape(-1, len(sizes))
    imgs = np.zeros((total, img_size, img_size), dtype=np.uint8)
    col = {n: i for i, n in enumerate(names)}

    def pick(name, row, table):
        return table[row[col[name]]] if name in col else table[0]

    for n, row in enumerate(grid):
        side = int(pick("size", row, sides))
        cx, cy = float(pick("x", row, xs)), float(pick("y", row, ys))
        top = int(round(cy - side / 2))
        left = int(round(cx - side / 2))
        if jitter:
            top += int(rng.integers(-jitter, jitter + 1))
            left += int(rng.integers(-jitter, jitter + 1))
            top = min(max(top, 0), img_size - side)
            left = min(max(left, 0), img_size - side)
        mask = _shape_mask(pick("shape", row, shapes), side)
        imgs[n, top:top + side, left:left + side][mask] = pick("brightness", row, levels)
    return FactorDataset(imgs, grid, sizes, "synth", tuple(names), 1.0 / 255.0)


# -- sampling ---------------------------------------------------------------

def fixed_factor_indices(dataset: FactorDataset, factor: int, L: int,
                         rng: np.random.Generator) -> Tuple[int, np.ndarray]:
    """Pick a class for ``factor`` and ``L`` dataset indices sharing it.

    Sampling is without replacement when the stratum holds at least ``L``
    images and with replacement otherwise.
    """
    if L < 2:
        raise ValueError("L must be at least 2")
    if not 0 <= factor < dataset.num_factors:
        raise ValueError(f"factor {factor} out of range")
    cls = int(rng.integers(dataset.factor_sizes[factor]))
    pool = dataset.stratum(factor, cls)
    if len(pool) == 0:
        raise ValueError(f"factor {factor} class {cls} has no images")
    idx = rng.choice(pool, size=L, replace=len(pool) < L)
    return cls, idx


def fixed_factor_batch(dataset: FactorDataset, factor: int, L: int, rng: np.random.Generator) -> torch.Tensor:
    _, idx = fixed_factor_indices(dataset, factor, L, rng)
    return dataset.get_images(idx)


class BatchStream:
    """Epoch-shuffled index batches; the last partial batch of each epoch is dropped.

    The state is the generator state at the start of the current epoch plus a
    cursor, so it can be saved and restored without storing the permutation.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True):
        if batch_size > n:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.shuffle = shuffle
        self.epoch = -1
        self.cursor = 0
        self._order = None
        self._epoch_state = None
        self._new_epoch()

    @property
    def batches_per_epoch(self) -> int:
        return self.n // self.batch_size

    def _new_epoch(self):
        self.epoch += 1
        self.cursor = 0
        self._epoch_state = self.rng.bit_generator.state
        self._order = self.rng.permutation(self.n) if self.shuffle else np.arange(self.n)

    def next_indices(self) -> np.ndarray:
        if self.cursor + self.batch_size > self.n:
            self._new_epoch()
        idx = self._order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return idx

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "cursor": self.cursor, "epoch_rng_state": self._epoch_state,
                "n": self.n, "batch_size": self.batch_size, "shuffle": self.shuffle}

    def load_state_dict(self, state: dict) -> None:
        if (state["n"], state["batch_size"], state["shuffle"]) != (self.n, self.batch_size, self.shuffle):
            raise ValueError("batch stream state belongs to a different configuration")
        self.rng.bit_generator.state = state["epoch_rng_state"]
        self.epoch = state["epoch"] - 1
        self._new_epoch()
        self.cursor = state["cursor"]


def batch_iterator(dataset: FactorDataset, batch_size: int, rng: np.random.Generator,
                   shuffle: bool = True, epochs: Optional[int] = None) -> Iterator[torch.Tensor]:
    stream = BatchStream(len(dataset), batch_size, rng, shuffle)
    total = None if epochs is None else epochs * stream.batches_per_epoch
    served = 0
    while total is None or served < total:
        yield dataset.get_images(stream.next_indices())
        served += 1
