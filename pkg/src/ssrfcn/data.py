"""Manifests, pixel preprocessing and the synthetic live/spoof generator."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataInputError, ParseError
from .model import atomic_write_bytes

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("image_path", "label", "spoof_type", "video_id", "subject_id", "frame_index")
LABELS = {"live": 0, "spoof": 1}
PIXEL_OFFSET = 127.5
PIXEL_SCALE = 128.0


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    label: str
    spoof_type: str
    video_id: str
    subject_id: str
    frame_index: int | None = None

    @property
    def y(self) -> int:
        return LABELS[self.label]


def _check_record(label, spoof_type, lineno=None):
    if label not in LABELS:
        raise ParseError(f"unknown label {label!r} (expected 'live' or 'spoof')", lineno)
    if (label == "live") != (spoof_type == "live"):
        raise ParseError(
            f"label {label!r} is inconsistent with spoof_type {spoof_type!r}", lineno
        )


def load_manifest(path) -> list[SampleRecord]:
    """Parse a CSV manifest; image paths are resolved against its directory."""
    path = Path(path)
    base = path.parent.resolve()
    records: list[SampleRecord] = []
    seen: dict[tuple[str, int | None], int] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ParseError(f"header must be {','.join(MANIFEST_COLUMNS)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ParseError(f"expected {len(MANIFEST_COLUMNS)} columns, got {len(row)}", lineno)
            image_path, label, spoof_type, video_id, subject_id, frame = (c.strip() for c in row)
            _check_record(label, spoof_type, lineno)
            if not image_path or not video_id or not subject_id:
                raise ParseError("image_path, video_id and subject_id must be non-empty", lineno)
            try:
                frame_index = int(frame) if frame else None
            except ValueError:
                raise ParseError(f"frame_index {frame!r} is not an integer", lineno) from None
            key = (video_id, frame_index)
            if key in seen:
                raise ParseError(
                    f"duplicate (video_id, frame_index) {key}, first seen on line {seen[key]}", lineno
                )
            seen[key] = lineno
            p = Path(image_path)
            records.append(
                SampleRecord(p if p.is_absolute() else base / p, label, spoof_type, video_id, subject_id, frame_index)
            )
    if not records:
        log.warning("manifest %s contains no records", path)
    return records


def manifest_text(records, root=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for r in records:
        p = Path(r.image_path)
        if root is not None:
            try:
                p = p.relative_to(root)
            except ValueError:
                pass
        w.writerow([p.as_posix(), r.label, r.spoof_type, r.video_id, r.subject_id,
                    "" if r.frame_index is None else r.frame_index])
    return buf.getvalue()


def write_manifest(records, path) -> None:
    path = Path(path)
    atomic_write_bytes(path, manifest_text(records, path.parent.resolve()).encode("utf-8"))


def subsample_frames(records, stride: int) -> list[SampleRecord]:
    """Keep every ``stride``-th frame of each video, in frame order; record order is preserved."""
    if stride < 1:
        raise ValueError("frame stride must be >= 1")
    if stride == 1:
        return list(records)
    by_video: dict[str, list[SampleRecord]] = {}
    for r in records:
        by_video.setdefault(r.video_id, []).append(r)
    keep = set()
    for frames in by_video.values():
        ordered = sorted(frames, key=lambda r: (r.frame_index is None, r.frame_index or 0, str(r.image_path)))
        keep.update(id(r) for r in ordered[::stride])
    return [r for r in records if id(r) in keep]


# ---------------------------------------------------------------------------
# pixels
# ---------------------------------------------------------------------------


def preprocess(pixels: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [-0.99609375, 0.99609375]."""
    return (np.asarray(pixels, dtype=np.float32) - PIXEL_OFFSET) / PIXEL_SCALE


def deprocess(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x, np.float64) * PIXEL_SCALE + PIXEL_OFFSET), 0, 255).astype(np.uint8)


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise DataInputError(f"{path}: expected an 8-bit RGB image, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataInputError(f"{path}: cannot decode image ({exc})") from None


def load_and_preprocess(record, expected_side: int | None = 256) -> np.ndarray:
    """Decode an aligned crop and normalize it; no resizing is ever done."""
    path = record.image_path if isinstance(record, SampleRecord) else record
    pixels = read_rgb(path)
    if expected_side is not None and pixels.shape[:2] != (expected_side, expected_side):
        raise DataInputError(
            f"{path}: expected a {expected_side}x{expected_side} aligned crop, "
            f"got {pixels.shape[0]}x{pixels.shape[1]}"
        )
    return preprocess(pixels)


def save_rgb(pixels: np.ndarray, path) -> None:
    buf = io.BytesIO()
    Image.fromarray(pixels, "RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


@dataclass
class ImageSet:
    """Preprocessed images held in memory with their manifest records."""

    images: np.ndarray  # (n, h, w, 3) float32
    labels: np.ndarray  # (n,) 0 = live, 1 = spoof
    records: list[SampleRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx], [self.records[i] for i in idx])


def load_images(records, expected_side: int | None = 256) -> ImageSet:
    if not records:
        raise DataInputError("no records to load")
    images = [load_and_preprocess(r, expected_side) for r in records]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataInputError(f"images must share one size, found {sorted(shapes)}")
    return ImageSet(np.stack(images), np.array([r.y for r in records], np.int64), list(records))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

GLOBAL_TEXTURE = "global_texture"
PARTIAL_PATCH = "partial_patch"


@dataclass
class SynthConfig:
    num_live: int = 32  # live videos
    num_spoof: int = 32  # spoof videos per spoof type
    image_side: int = 256
    artifact_kind: str = GLOBAL_TEXTURE
    box_side_range: tuple[int, int] = (64, 128)
    seed: int = 0
    spoof_types: tuple[str, ...] = ("print",)
    frames_per_video: int = 1
    # appearance
    grid_amplitude: float = 24.0
    grid_period_range: tuple[float, float] = (3.0, 5.0)
    noise_sigma: float = 4.0

    def __post_init__(self):
        if self.artifact_kind not in (GLOBAL_TEXTURE, PARTIAL_PATCH):
            raise ValueError(f"unknown artifact kind {self.artifact_kind!r}")
        lo, hi = self.box_side_range
        if self.artifact_kind == PARTIAL_PATCH and not 1 <= lo <= hi <= self.image_side:
            raise ValueError(f"box side range {self.box_side_range} must lie in [1, {self.image_side}]")
        if "live" in self.spoof_types:
            raise ValueError("'live' is reserved and cannot be a spoof type")


def _bilinear(grid: np.ndarray, side: int) -> np.ndarray:
    # grid (g, g, c) -> (side, side, c), half-pixel centres, edge clamped
    g = grid.shape[0]
    pos = (np.arange(side) + 0.5) * g / side - 0.5
    pos = np.clip(pos, 0, g - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, g - 1)
    f = pos - i0
    rows = grid[i0] * (1 - f)[:, None, None] + grid[i1] * f[:, None, None]
    return rows[:, i0] * (1 - f)[None, :, None] + rows[:, i1] * f[None, :, None]


def synth_live(side: int, rng: np.random.Generator, noise_sigma: float) -> np.ndarray:
    """Smooth band-limited colour texture with a linear illumination ramp (float, 0..255)."""
    base = _bilinear(rng.uniform(70.0, 190.0, size=(5, 5, 3)), side)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:side, 0:side] / side - 0.5
    ramp = rng.uniform(10.0, 40.0) * (np.cos(theta) * xx + np.sin(theta) * yy)
    noise = rng.normal(0.0, noise_sigma, size=(side, side, 3))
    return base + ramp[..., None] + noise


def synth_grid(side: int, rng: np.random.Generator, amplitude: float, period_range) -> np.ndarray:
    """High-frequency moire-like grid in (-amplitude, amplitude)."""
    period = rng.uniform(*period_range)
    phi = rng.uniform(0, np.pi / 2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    u = np.cos(phi) * xx + np.sin(phi) * yy
    v = -np.sin(phi) * xx + np.cos(phi) * yy
    g = 0.5 * (np.cos(2 * np.pi * u / period + phase[0]) + np.cos(2 * np.pi * v / period + phase[1]))
    tint = rng.uniform(0.7, 1.0, size=3)
    return amplitude * g[..., None] * tint


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def synth_generate(cfg: SynthConfig, out_dir) -> tuple[list[SampleRecord], list[dict]]:
    """Write images, ``manifest.csv`` and ``ground_truth.json`` under ``out_dir``.

    Every image is drawn from its own seed derived from (seed, video, frame),
    so the dataset is a pure function of the config.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    side = cfg.image_side
    videos = [("live", f"live{i:04d}") for i in range(cfg.num_live)]
    for t in cfg.spoof_types:
        videos += [(t, f"{t}{i:04d}") for i in range(cfg.num_spoof)]

    records, truth = [], []
    for vi, (kind, vid) in enumerate(videos):
        for fi in range(cfg.frames_per_video):
            rng = np.random.default_rng([cfg.seed, vi, fi])
            img = synth_live(side, rng, cfg.noise_sigma)
            box = None
            if kind != "live":
                grid = synth_grid(side, rng, cfg.grid_amplitude, cfg.grid_period_range)
                if cfg.artifact_kind == GLOBAL_TEXTURE:
                    img = img + grid
                else:
                    lo, hi = cfg.box_side_range
                    bh, bw = (int(v) for v in rng.integers(lo, hi, size=2, endpoint=True))
                    top = int(rng.integers(0, side - bh, endpoint=True))
                    left = int(rng.integers(0, side - bw, endpoint=True))
                    img[top : top + bh, left : left + bw] += grid[top : top + bh, left : left + bw]
                    box = [top, left, bh, bw]
            rel = Path("images") / f"{vid}_{fi:03d}.png"
            save_rgb(_quantize(img), out / rel)
            records.append(
                SampleRecord(
                    (out / rel).resolve(),
                    "live" if kind == "live" else "spoof",
                    kind,
                    vid,
                    f"S{vi:04d}",
                    fi,
                )
            )
            truth.append({"image_path": rel.as_posix(), "artifact_box": box})

    write_manifest(records, out / "manifest.csv")
    atomic_write_bytes(out / "ground_truth.json", (json.dumps(truth, indent=1) + "\n").encode())
    return records, truth


def load_ground_truth(path) -> dict[str, list[int] | None]:
    entries = json.loads(Path(path).read_text())
    return {e["image_path"]: e["artifact_box"] for e in entries}


def synth_config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
