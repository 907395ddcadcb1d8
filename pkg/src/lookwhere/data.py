"""Synthetic sparse-glyph datasets, PGM heatmaps, dataset export, and the checkpoint format."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LWCK"
FORMAT_VERSION = 1


@dataclass
class SyntheticSpec:
    image_side: int = 64
    num_classes: int = 4
    glyph_side: int = 12
    noise_std: float = 0.4
    glyph_amplitude: float = 3.0
    texture_period: int = 8
    background: float = 0.0
    patch_size: int = 8
    seed: int = 0
    task: str = "classification"

    def __post_init__(self):
        if self.glyph_side >= self.image_side:
            raise ValueError("glyph_side must be smaller than image_side")
        if self.salient_fraction >= 0.2:
            raise ValueError(f"salient fraction {self.salient_fraction:.3f} must stay below 0.2")
        if self.task not in ("classification", "segmentation"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.image_side % self.patch_size:
            raise ValueError("image_side must be divisible by patch_size")
        if self.texture_period < 2 or self.texture_period % 2:
            raise ValueError("texture_period must be an even number >= 2")

    @property
    def salient_fraction(self) -> float:
        return (self.glyph_side / self.image_side) ** 2


@dataclass
class SyntheticDataset:
    images: np.ndarray          # (M, R, R, 1) float32
    labels: np.ndarray          # (M,) int64
    glyph_corners: np.ndarray   # (M, 2) top-left (row, col) of each glyph
    patch_masks: np.ndarray     # (M, N, N) bool, glyph-overlapping patches
    spec: SyntheticSpec

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def patch_labels(self) -> np.ndarray:
        """Per-patch segmentation labels: 0 background, ``label + 1`` on glyph patches."""
        return (self.patch_masks * (self.labels[:, None, None] + 1)).astype(np.int64)

    def subset(self, index) -> SyntheticDataset:
        return SyntheticDataset(self.images[index], self.labels[index], self.glyph_corners[index],
                                self.patch_masks[index], self.spec)


def _texture(c: int, side: int, base_period: int = 8) -> np.ndarray:
    r, q = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    period = base_period * (1 + c // 4)
    half = period // 2
    kind = c % 4
    if kind == 0:
        bits = (r % period) < half
    elif kind == 1:
        bits = (q % period) < half
    elif kind == 2:
        bits = ((r // half + q // half) % 2) == 0
    else:
        bits = ((r + q) % (2 * period)) < period
    return bits.astype(np.float32)


def class_glyphs(num_classes: int, side: int, base_period: int = 8) -> np.ndarray:
    """One fixed binary texture per class, ``(num_classes, side, side)`` in {0, 1}.

    Classes cycle through horizontal stripes, vertical stripes, a checkerboard
    and diagonal stripes, with the period growing every four classes. All have
    (close to) half their pixels lit, so a glyph is easy to find from its
    brightness but its class is carried by the texture. Periods of 2 alias away
    at half resolution; the default of 8 survives the selector's downsampling.
    """
    return np.stack([_texture(c, side, base_period) for c in range(num_classes)])


def gen_synthetic(spec: SyntheticSpec, count: int) -> SyntheticDataset:
    rng = np.random.default_rng(spec.seed)
    R, g, P = spec.image_side, spec.glyph_side, spec.patch_size
    glyphs = class_glyphs(spec.num_classes, g, spec.texture_period)
    labels = rng.integers(0, spec.num_classes, size=count)
    corners = rng.integers(0, R - g + 1, size=(count, 2))
    images = np.full((count, R, R, 1), spec.background, dtype=np.float32)
    if spec.noise_std > 0:
        images += (rng.standard_normal((count, R, R, 1)) * spec.noise_std).astype(np.float32)
    N = R // P
    masks = np.zeros((count, N, N), dtype=bool)
    for i in range(count):
        r, c = corners[i]
        images[i, r:r + g, c:c + g, 0] += spec.glyph_amplitude * glyphs[labels[i]]
        masks[i, r // P:(r + g - 1) // P + 1, c // P:(c + g - 1) // P + 1] = True
    return SyntheticDataset(images, labels.astype(np.int64), corners.astype(np.int64), masks, spec)


# -- heatmaps -----------------------------------------------------------------------

def heatmap_pixels(score_map: np.ndarray, upscale: int = 1) -> np.ndarray:
    m = np.asarray(score_map, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("heatmap values must be finite")
    lo, hi = m.min(), m.max()
    if hi == lo:
        px = np.full(m.shape, 128, dtype=np.uint8)
    else:
        px = np.round(255.0 * (m - lo) / (hi - lo)).astype(np.uint8)
    if upscale > 1:
        px = np.repeat(np.repeat(px, upscale, axis=0), upscale, axis=1)
    return px


def write_heatmap_pgm(score_map, path, upscale: int = 1) -> None:
    """Min-max normalized binary PGM (P5); a constant map renders mid-gray."""
    px = heatmap_pixels(score_map, upscale)
    h, w = px.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


# -- dataset export -------------------------------------------------------------------

def export_dataset(ds: SyntheticDataset, directory) -> Path:
    """Write one raw little-endian float32 file per image plus ``manifest.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(ds)):
        name = f"sample_{i:05d}.f32"
        (d / name).write_bytes(ds.images[i].astype("<f4").tobytes())
        lines.append(f"{name},{int(ds.labels[i])}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return d


def read_image_tensor(path, side: int, channels: int = 1) -> np.ndarray:
    """Load an image saved as ``.npy`` or as raw little-endian float32."""
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path).astype(np.float32)
    else:
        img = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float32)
    if img.size != side * side * channels:
        raise ValueError(f"{path}: expected {side}x{side}x{channels} values, found {img.size}")
    return img.reshape(side, side, channels)


# -- checkpoints ------------------------------------------------------------------------

class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    rng_state: dict | None = None
    optimizer: dict | None = None
    format_version: int = FORMAT_VERSION
    extras: dict = field(default_factory=dict)


def _pack_bytes(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _pack_json(obj) -> bytes:
    text = "" if obj is None else json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return _pack_bytes(text.encode("utf-8"))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Serialize: magic, version, three JSON records, then name/shape/data tensor records."""
    out = [MAGIC, struct.pack("<I", ckpt.format_version),
           _pack_json(ckpt.config), _pack_json(ckpt.rng_state), _pack_json(ckpt.optimizer),
           struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.array(ckpt.tensors[name], dtype="<f4", order="C")  # keeps 0-d shapes
        out.append(_pack_bytes(name.encode("utf-8")))
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def json(self):
        text = self.take(self.u32()).decode("utf-8")
        return json.loads(text) if text else None


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {FORMAT_VERSION}")
    config, rng_state, optimizer = r.json(), r.json(), r.json()
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    return Checkpoint(config or {}, tensors, rng_state, optimizer, version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = encode_checkpoint(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
