"""Frame manifests, sliding-window sequences, monthly splits and synthetic scenes.

A manifest is a CSV with header ``timestamp,image,mask``.  Timestamps are
either ISO-8601 UTC strings or integer minutes since the Unix epoch; paths
are resolved relative to the manifest's directory.  The mask field may be
left empty for frames without ground truth (prediction only).  Images and masks are
8-bit grayscale PNGs, or raw tensor records (``.mctb``) in the numerics
binary layout.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .numerics import Rng
from .numerics.serialize import load_array, save_array


class ManifestError(ValueError):
    """Invalid manifest contents; messages carry CSV row numbers."""


class DataError(ValueError):
    """Undecodable or inconsistent image/mask files."""


@dataclass(frozen=True)
class FrameRecord:
    timestamp: int  # UTC minutes since epoch
    image: Path
    mask: Path | None

    @property
    def month(self) -> str:
        return minutes_to_datetime(self.timestamp).strftime("%Y-%m")


@dataclass
class DatasetManifest:
    records: list[FrameRecord]
    cadence_minutes: int = 15

    def __post_init__(self):
        if self.cadence_minutes <= 0:
            raise ManifestError("cadence must be positive")

    def __len__(self):
        return len(self.records)

    @property
    def timestamps(self) -> list[int]:
        return [r.timestamp for r in self.records]

    @property
    def months(self) -> list[str]:
        return [r.month for r in self.records]


def minutes_to_datetime(minutes: int) -> dt.datetime:
    return dt.datetime(1970, 1, 1, tzinfo=dt.timezone.utc) + dt.timedelta(minutes=int(minutes))


def parse_timestamp(text: str) -> int:
    text = text.strip()
    if text.lstrip("-").isdigit():
        return int(text)
    stamp = dt.datetime.fromisoformat(text.replace("Z", "+00:00"))
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=dt.timezone.utc)
    delta = stamp - dt.datetime(1970, 1, 1, tzinfo=dt.timezone.utc)
    seconds = delta.total_seconds()
    if seconds % 60:
        raise ValueError(f"timestamp {text!r} is not on a whole minute")
    return int(seconds // 60)


def load_manifest(path, cadence_minutes: int | None = None, check_files: bool = True) -> DatasetManifest:
    """Parse, validate and time-sort a manifest CSV.

    The cadence defaults to the smallest gap between consecutive frames.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from None
    rows = list(csv.reader(text.splitlines()))
    if not rows or [h.strip() for h in rows[0]] != ["timestamp", "image", "mask"]:
        raise ManifestError(f"{path}: header must be 'timestamp,image,mask'")
    base = path.parent
    records = []
    problems = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            problems.append(f"row {lineno}: expected 3 fields, got {len(row)}")
            continue
        try:
            ts = parse_timestamp(row[0])
        except ValueError as e:
            problems.append(f"row {lineno}: bad timestamp ({e})")
            continue
        image = base / row[1].strip()
        mask = base / row[2].strip() if row[2].strip() else None
        if check_files:
            for p in (image, mask):
                if p is not None and not p.is_file():
                    problems.append(f"row {lineno}: missing file {p}")
        records.append((ts, lineno, FrameRecord(ts, image, mask)))
    if problems:
        raise ManifestError(f"{path}: " + "; ".join(problems))
    records.sort(key=lambda r: r[0])
    for (t0, l0, _), (t1, l1, _) in zip(records, records[1:]):
        if t1 == t0:
            raise ManifestError(f"{path}: duplicate timestamp {t0} on rows {l0} and {l1}")
    frames = [r[2] for r in records]
    if cadence_minutes is None:
        gaps = [b.timestamp - a.timestamp for a, b in zip(frames, frames[1:])]
        cadence_minutes = min(gaps) if gaps else 15
    return DatasetManifest(frames, cadence_minutes)


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["timestamp", "image", "mask"])
        for r in manifest.records:
            w.writerow([minutes_to_datetime(r.timestamp).strftime("%Y-%m-%dT%H:%MZ"),
                        _relpath(r.image, base), "" if r.mask is None else _relpath(r.mask, base)])


def _relpath(p: Path, base: Path) -> str:
    p = Path(p).resolve()
    try:
        return p.relative_to(base).as_posix()
    except ValueError:
        return str(p)


# ---------------------------------------------------------------------------
# sequence construction
# ---------------------------------------------------------------------------

def _step(manifest_or_cadence, interval_minutes: int) -> int:
    cadence = manifest_or_cadence.cadence_minutes if isinstance(manifest_or_cadence, DatasetManifest) else manifest_or_cadence
    if interval_minutes <= 0 or interval_minutes % cadence:
        raise ValueError(f"interval {interval_minutes} min is not a positive multiple of the {cadence} min cadence")
    return interval_minutes // cadence


def build_sequences(manifest: DatasetManifest, width: int = 6, interval_minutes: int = 30,
                    frames: Sequence[int] | None = None) -> list[tuple[int, ...]]:
    """Every window of ``width`` frames spaced exactly ``interval_minutes`` apart.

    The window slides one frame at a time; windows with any missing frame
    are dropped.  ``frames`` restricts the search to a subset of frame
    indices (a split block), so no window leaves that subset.
    """
    if width < 1:
        raise ValueError("width must be positive")
    _step(manifest, interval_minutes)
    idx = list(range(len(manifest))) if frames is None else sorted(frames)
    by_time = {manifest.records[i].timestamp: i for i in idx}
    out = []
    for i in idx:
        t0 = manifest.records[i].timestamp
        window = []
        for k in range(width):
            j = by_time.get(t0 + k * interval_minutes)
            if j is None:
                break
            window.append(j)
        else:
            out.append(tuple(window))
    return out


def interval_variants(manifest: DatasetManifest, intervals=(15, 30, 60, 120), width: int = 6,
                      frames: Sequence[int] | None = None) -> dict[int, list[tuple[int, ...]]]:
    return {m: build_sequences(manifest, width, m, frames) for m in intervals}


def block_sizes(n: int, groups: int) -> list[int]:
    """Near-equal sizes; the remainder goes to the earliest blocks."""
    q, r = divmod(n, groups)
    return [q + (1 if i < r else 0) for i in range(groups)]


@dataclass
class MonthlySplit:
    """Contiguous per-month frame blocks assigned to train or test."""

    train_blocks: list[list[int]] = field(default_factory=list)
    test_blocks: list[list[int]] = field(default_factory=list)

    @property
    def train(self) -> list[int]:
        return sorted(i for b in self.train_blocks for i in b)

    @property
    def test(self) -> list[int]:
        return sorted(i for b in self.test_blocks for i in b)

    def __iter__(self):
        yield self.train
        yield self.test

    def sequences(self, manifest: DatasetManifest, width: int = 6, interval_minutes: int = 30):
        """(train, test) windows, each built inside a single block."""
        def per(blocks):
            return [w for b in blocks for w in build_sequences(manifest, width, interval_minutes, b)]

        return per(self.train_blocks), per(self.test_blocks)


def split_monthly(manifest: DatasetManifest, groups: int = 5, test_group: int = 0) -> MonthlySplit:
    if not 0 <= test_group < groups:
        raise ValueError(f"test_group must be in [0, {groups})")
    by_month: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(manifest.records):
        by_month[r.month].append(i)
    split = MonthlySplit()
    for month in sorted(by_month):
        idx = by_month[month]
        if len(idx) < groups:
            raise DataError(f"month {month} has {len(idx)} frames, fewer than {groups} groups")
        start = 0
        for g, size in enumerate(block_sizes(len(idx), groups)):
            block = idx[start:start + size]
            start += size
            (split.test_blocks if g == test_group else split.train_blocks).append(block)
    return split


# ---------------------------------------------------------------------------
# sample loading
# ---------------------------------------------------------------------------

def read_gray(path) -> np.ndarray:
    """8-bit grayscale image as ``[C, H, W]`` uint8 (C=1 for PNG)."""
    path = Path(path)
    if path.suffix == ".mctb":
        arr = load_array(path)
        return arr[None] if arr.ndim == 2 else arr
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1", "I", "I;16"):
                im = im.convert("L")
            arr = np.asarray(im)
    except OSError as e:
        raise DataError(f"cannot decode {path}: {e}") from None
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return arr[None]


def binarize_mask(values: np.ndarray) -> np.ndarray:
    return (np.asarray(values) >= 128).astype(np.uint8)


@dataclass
class SequenceSample:
    indices: tuple[int, ...]
    image: np.ndarray  # [T, Cin, H, W] float32
    mask: np.ndarray | None  # [T, 1, H, W] uint8


def load_sample(manifest: DatasetManifest, indices: Sequence[int], normalize: bool = True,
                require_mask: bool = True) -> SequenceSample:
    """Read one window.  If any frame lacks ground truth the mask is ``None``."""
    records = [manifest.records[i] for i in indices]
    has_gt = all(r.mask is not None for r in records)
    if require_mask and not has_gt:
        missing = [i for i, r in zip(indices, records) if r.mask is None]
        raise DataError(f"frames {missing} have no mask")
    images, masks = [], []
    for i, rec in zip(indices, records):
        img = read_gray(rec.image).astype(np.float32)
        images.append(img / 255.0 if normalize else img)
        if has_gt:
            msk = read_gray(rec.mask)
            if img.shape[1:] != msk.shape[1:]:
                raise DataError(f"frame {i}: image {img.shape[1:]} and mask {msk.shape[1:]} sizes differ")
            masks.append(binarize_mask(msk[:1]))
    return SequenceSample(tuple(indices), np.stack(images), np.stack(masks) if has_gt else None)


class ArrayDataset:
    """In-memory sequences: images ``[N, T, C, H, W]``, masks ``[N, T, 1, H, W]``."""

    def __init__(self, images: np.ndarray, masks: np.ndarray):
        if images.shape[:2] != masks.shape[:2] or images.shape[3:] != masks.shape[3:]:
            raise DataError(f"images {images.shape} and masks {masks.shape} are not aligned")
        self.images = images.astype(np.float32, copy=False)
        self.masks = masks.astype(np.uint8, copy=False)

    def __len__(self):
        return len(self.images)

    def batch(self, indices):
        idx = np.asarray(indices)
        return self.images[idx], self.masks[idx]

    def subset(self, indices) -> "ArrayDataset":
        idx = np.asarray(indices)
        return ArrayDataset(self.images[idx], self.masks[idx])


class ManifestDataset:
    """Sequences read from disk on demand and memoised."""

    def __init__(self, manifest: DatasetManifest, sequences: Sequence[tuple[int, ...]]):
        self.manifest = manifest
        self.sequences = list(sequences)
        self._cache: dict[int, SequenceSample] = {}

    def __len__(self):
        return len(self.sequences)

    def sample(self, i: int) -> SequenceSample:
        if i not in self._cache:
            self._cache[i] = load_sample(self.manifest, self.sequences[i])
        return self._cache[i]

    def batch(self, indices):
        samples = [self.sample(int(i)) for i in indices]
        return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])

    def to_arrays(self) -> ArrayDataset:
        return ArrayDataset(*self.batch(range(len(self))))


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Parameters of the synthetic cloud-scene generator.

    Each scene holds a few persistent elliptical blobs that drift and grow
    smoothly from frame to frame; they are the positive class.  Flicker
    blobs, drawn from the same appearance distribution, exist in a single
    frame only and are labelled negative, so telling them apart needs more
    than one frame.
    """

    seed: int = 0
    scenes: int = 8
    frames_per_scene: int = 11
    image_size: tuple[int, int] = (64, 64)
    blob_count: tuple[int, int] = (1, 3)
    speed: tuple[float, float] = (0.3, 1.0)  # pixels per frame
    growth: tuple[float, float] = (-0.02, 0.04)  # relative radius change per frame
    flicker_rate: float = 1.0  # expected flicker blobs per frame
    coverage: tuple[float, float] = (0.01, 0.06)
    cadence_minutes: int = 15
    start: str = "2018-06-01T00:00Z"
    scene_gap_minutes: int = 24 * 60
    noise: float = 0.03

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.blob_count = tuple(self.blob_count)
        self.coverage = tuple(self.coverage)
        lo, hi = self.coverage
        if not 0 < lo < hi < 0.2:
            raise ValueError("coverage range must satisfy 0 < lo < hi < 0.2")
        if self.blob_count[0] < 1 or self.blob_count[1] < self.blob_count[0]:
            raise ValueError("blob_count must be a range with minimum >= 1")
        if self.flicker_rate < 0:
            raise ValueError("flicker_rate must be nonnegative")
        if self.frames_per_scene < 1 or self.scenes < 1:
            raise ValueError("need at least one scene and one frame")


@dataclass
class _Blob:
    cy: float
    cx: float
    ry: float
    rx: float
    vy: float
    vx: float
    growth: float
    brightness: float


def _ellipse(h: int, w: int, cy, cx, ry, rx) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def _scene_blobs(cfg: SyntheticConfig, rng: Rng) -> list[_Blob]:
    h, w = cfg.image_size
    k = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
    target = rng.uniform(*cfg.coverage, (), np.float64) * h * w
    shares = rng.uniform(0.5, 1.5, (k,), np.float64)
    shares = shares / shares.sum() * target
    blobs = []
    for area in shares:
        aspect = float(rng.uniform(0.6, 1.6, (), np.float64))
        r = math.sqrt(area / math.pi)
        ry, rx = r * math.sqrt(aspect), r / math.sqrt(aspect)
        speed = float(rng.uniform(*cfg.speed, (), np.float64))
        angle = float(rng.uniform(0, 2 * math.pi, (), np.float64))
        blobs.append(_Blob(
            cy=float(rng.uniform(ry + 2, h - ry - 2, (), np.float64)),
            cx=float(rng.uniform(rx + 2, w - rx - 2, (), np.float64)),
            ry=ry, rx=rx,
            vy=speed * math.sin(angle), vx=speed * math.cos(angle),
            growth=float(rng.uniform(*cfg.growth, (), np.float64)),
            brightness=float(rng.uniform(0.7, 0.9, (), np.float64)),
        ))
    return blobs


def _render_scene(cfg: SyntheticConfig, rng: Rng, max_tries: int = 200):
    h, w = cfg.image_size
    t = cfg.frames_per_scene
    for _ in range(max_tries):
        blobs = _scene_blobs(cfg, rng)
        masks = np.zeros((t, h, w), dtype=bool)
        images = np.empty((t, h, w))
        shapes = []
        for f in range(t):
            canvas = np.full((h, w), 0.15)
            for b in blobs:
                s = (1.0 + b.growth) ** f
                cy, cx = b.cy + b.vy * f, b.cx + b.vx * f
                sup = _ellipse(h, w, cy, cx, b.ry * s, b.rx * s)
                masks[f] |= sup
                canvas[sup] = b.brightness
                shapes.append((b.ry * s, b.rx * s, b.brightness))
            images[f] = canvas
        cov = masks.reshape(t, -1).mean(axis=1)
        if ((cov >= cfg.coverage[0]) & (cov <= cfg.coverage[1])).all():
            break
    else:
        raise RuntimeError("could not place blobs inside the requested coverage range; widen it")
    # flicker distractors mimic a random persistent blob's current appearance
    for f in range(t):
        n = int(rng.gen.poisson(cfg.flicker_rate)) if cfg.flicker_rate > 0 else 0
        for _ in range(n):
            ry, rx, bright = shapes[int(rng.integers(0, len(shapes)))]
            cy = float(rng.uniform(ry, h - ry, (), np.float64))
            cx = float(rng.uniform(rx, w - rx, (), np.float64))
            sup = _ellipse(h, w, cy, cx, ry, rx) & ~masks[f]
            images[f][sup] = bright
    images += rng.normal((t, h, w), np.float64) * cfg.noise
    return np.clip(images, 0.0, 1.0), masks


def synth_arrays(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    """Scenes as arrays: images ``[S, F, 1, H, W]`` in [0, 1] quantised to 8 bits, masks uint8."""
    rng = Rng(cfg.seed)
    imgs, msks = [], []
    for s in range(cfg.scenes):
        im, mk = _render_scene(cfg, rng.spawn(s))
        imgs.append(np.round(im * 255.0) / 255.0)
        msks.append(mk)
    images = np.stack(imgs)[:, :, None].astype(np.float32)
    masks = np.stack(msks)[:, :, None].astype(np.uint8)
    return images, masks


def synth_generate(cfg: SyntheticConfig, out_dir) -> DatasetManifest:
    """Write ``images/NNNN.png``, ``masks/NNNN.png`` and ``manifest.csv``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out}: {e}") from None
    images, masks = synth_arrays(cfg)
    t0 = parse_timestamp(cfg.start)
    records = []
    n = 0
    for s in range(cfg.scenes):
        scene_start = t0 + s * (cfg.frames_per_scene * cfg.cadence_minutes + cfg.scene_gap_minutes)
        for f in range(cfg.frames_per_scene):
            img_path = out / "images" / f"{n:04d}.png"
            msk_path = out / "masks" / f"{n:04d}.png"
            Image.fromarray(np.round(images[s, f, 0] * 255).astype(np.uint8), mode="L").save(img_path, optimize=False)
            Image.fromarray(masks[s, f, 0] * np.uint8(255), mode="L").save(msk_path, optimize=False)
            records.append(FrameRecord(scene_start + f * cfg.cadence_minutes, img_path, msk_path))
            n += 1
    manifest = DatasetManifest(records, cfg.cadence_minutes)
    write_manifest(out / "manifest.csv", manifest)
    return manifest


def save_raw_frame(path, arr: np.ndarray) -> None:
    """Write a frame in the raw tensor layout accepted by :func:`read_gray`.

    Values use the 8-bit scale (0..255), like PNG frames.
    """
    save_array(path, np.asarray(arr, dtype=np.float32))


def synth_dataset(cfg: SyntheticConfig, width: int = 6, interval_minutes: int = 30) -> ArrayDataset:
    """Synthetic sequences built in memory with the same windowing as on disk."""
    images, masks = synth_arrays(cfg)
    s, f = images.shape[:2]
    t0 = parse_timestamp(cfg.start)
    span = f * cfg.cadence_minutes + cfg.scene_gap_minutes
    records = [FrameRecord(t0 + i * span + j * cfg.cadence_minutes, Path(), Path()) for i in range(s) for j in range(f)]
    windows = build_sequences(DatasetManifest(records, cfg.cadence_minutes), width, interval_minutes)
    flat_i = images.reshape((s * f,) + images.shape[2:])
    flat_m = masks.reshape((s * f,) + masks.shape[2:])
    idx = np.array(windows, dtype=np.int64).reshape(-1, width)
    return ArrayDataset(flat_i[idx], flat_m[idx])
