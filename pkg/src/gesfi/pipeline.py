"""Record -> image preprocessing, the on-disk image cache and in-memory image sets."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsp
from .core import CsiRecord, Dataset, SampleMeta

log = logging.getLogger(__name__)

IMAGE_MAGIC = b"GIMG"
IMAGE_HEADER = struct.Struct("<4sIII16x")  # magic, channels, height, width, pad to 32 bytes
INDEX_NAME = "index.json"


@dataclass(frozen=True)
class DspConfig:
    window: int = dsp.HANN_WINDOW
    hop: int = dsp.HOP
    cutoff_hz: float = dsp.HIGHPASS_CUTOFF_HZ
    filter_order: int = dsp.HIGHPASS_ORDER
    size: int = 224
    doppler_band_hz: float = 100.0  # rendered part of the Doppler axis
    dfs_floor_db: float = -40.0  # Doppler tile clipped this far below its peak

    def hash(self) -> str:
        return config_hash(asdict(self))


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dfs_view(spec: dsp.Spectrogram, band_hz: float, floor_db: float) -> np.ndarray:
    keep = np.abs(spec.frequencies) <= band_hz
    p = spec.power[keep]
    peak = p.max() if p.size else 0.0
    if peak <= 0:
        return np.zeros_like(p)
    db = 10.0 * np.log10(np.maximum(p / peak, 10.0 ** (floor_db / 10.0)))
    return db[::-1]  # positive Doppler at the top


def record_views(rec: CsiRecord, cfg: DspConfig) -> list[tuple[str, np.ndarray]]:
    pair = dsp.select_antenna_pair(rec)
    ratio = dsp.csi_ratio(rec, pair)
    phase = dsp.extract_phase(ratio)
    phase = phase - phase.mean(axis=-1, keepdims=True)  # static background per subcarrier
    spec = dsp.dfs_spectrogram(dsp.highpass(ratio, cfg.cutoff_hz, cfg.filter_order), cfg.window, cfg.hop)
    tag = f"{pair[0]}/{pair[1]}"
    return [(f"phase:{tag}", phase), (f"dfs:{tag}", dfs_view(spec, cfg.doppler_band_hz, cfg.dfs_floor_db))]


def preprocess_record(rec: CsiRecord, cfg: DspConfig = DspConfig()) -> dsp.InputImage:
    """Full chain for one record: pair selection, ratio, phase + Doppler views, rendering."""
    return dsp.render_input(record_views(rec, cfg), size=cfg.size)


@dataclass
class ImageSet:
    """Rendered images plus the labels the trainers need."""

    images: np.ndarray  # [N, 3, H, W] float32
    gestures: np.ndarray  # [N] int64 codes into label_set
    label_set: list[str]
    metas: list[SampleMeta] = field(default_factory=list)
    record_ids: list[str] = field(default_factory=list)
    factor_schema: dict[str, list[str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def factor_codes(self, name: str) -> np.ndarray:
        if name == "gesture":
            return self.gestures
        values = self.factor_schema.get(name)
        if values is None:
            values = list(dict.fromkeys(m.factor(name) for m in self.metas))
        index = {v: i for i, v in enumerate(values)}
        return np.array([index[m.factor(name)] for m in self.metas], dtype=np.int64)

    def subset(self, idx: Sequence[int]) -> "ImageSet":
        idx = list(idx)
        return ImageSet(self.images[idx], self.gestures[idx], list(self.label_set),
                        [self.metas[i] for i in idx], [self.record_ids[i] for i in idx],
                        dict(self.factor_schema))


def _render(args):
    rec, cfg = args
    return preprocess_record(rec, cfg).pixels


def build_image_set(ds: Dataset, cfg: DspConfig = DspConfig(), workers: int = 1) -> ImageSet:
    jobs = [(rec, cfg) for rec in ds.records]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            pixels = list(pool.map(_render, jobs))
    else:
        pixels = [_render(j) for j in jobs]
    images = np.stack(pixels).astype(np.float32) if pixels else np.zeros((0, 3, cfg.size, cfg.size), np.float32)
    return ImageSet(images, ds.gesture_codes(), list(ds.label_set), ds.metas,
                    [r.record_id for r in ds.records], dict(ds.factor_schema))


def write_image(path: Path, pixels: np.ndarray) -> None:
    C, H, W = pixels.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_HEADER.pack(IMAGE_MAGIC, C, H, W))
        fh.write(np.ascontiguousarray(pixels, dtype="<f4").tobytes())


def read_image(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, C, H, W = IMAGE_HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC or len(raw) != IMAGE_HEADER.size + 4 * C * H * W:
        raise ValueError(f"corrupted image file {path}")
    return np.frombuffer(raw, dtype="<f4", offset=IMAGE_HEADER.size).reshape(C, H, W).copy()


@dataclass
class CacheResult:
    rendered: list[str] = field(default_factory=list)
    hits: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)


def _try_render(args):
    try:
        img = preprocess_record(*args)
    except (ValueError, IndexError) as exc:
        return exc
    return img.pixels, img.layout


def preprocess_to_cache(ds: Dataset, cache_dir: str | Path, cfg: DspConfig = DspConfig(),
                        strict: bool = False, workers: int = 1) -> CacheResult:
    """Render every record into ``cache_dir``; reuse entries whose config hash matches.

    Per-record DSP failures are collected in ``failed`` unless ``strict``,
    in which case the first one is raised.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    index_path = cache_dir / INDEX_NAME
    h = cfg.hash()
    index = {"config_hash": h, "config": asdict(cfg), "records": {}}
    if index_path.exists():
        old = json.loads(index_path.read_text())
        if old.get("config_hash") == h:
            index["records"] = old.get("records", {})
    result = CacheResult()
    todo = []
    for i, rec in enumerate(ds.records):
        rid = rec.record_id or f"rec{i:05d}"
        entry = index["records"].get(rid)
        if entry is not None and (cache_dir / entry["file"]).exists():
            result.hits.append(rid)
        else:
            todo.append((rid, rec))
    jobs = [(rec, cfg) for _, rec in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            outputs = list(pool.map(_try_render, jobs))
    else:
        outputs = map(_try_render, jobs)
    for (rid, _), out in zip(todo, outputs):
        if isinstance(out, Exception):
            if strict:
                raise out
            log.warning("skipping %s: %s", rid, out)
            result.failed[rid] = str(out)
            continue
        pixels, layout = out
        fname = f"{rid}.img"
        write_image(cache_dir / fname, pixels)
        index["records"][rid] = {"file": fname, "layout": layout}
        result.rendered.append(rid)
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True))
    return result


def load_cached_images(ds: Dataset, cache_dir: str | Path, cfg: DspConfig = DspConfig()) -> ImageSet:
    """ImageSet for ``ds`` from a cache; records missing from the cache are dropped."""
    cache_dir = Path(cache_dir)
    index = json.loads((cache_dir / INDEX_NAME).read_text())
    if index["config_hash"] != cfg.hash():
        raise ValueError("image cache was built with a different preprocessing config")
    keep, pixels = [], []
    for i, rec in enumerate(ds.records):
        entry = index["records"].get(rec.record_id)
        if entry is None:
            continue
        keep.append(i)
        pixels.append(read_image(cache_dir / entry["file"]))
    sub = ds.subset(keep)
    return ImageSet(np.stack(pixels), sub.gesture_codes(), list(ds.label_set), sub.metas,
                    [r.record_id for r in sub.records], dict(ds.factor_schema))
