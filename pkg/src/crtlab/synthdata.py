"""Procedural class-labelled image corpus, bicubic resizing and P6 file I/O.

Class ``c`` draws one to three shapes of kind ``SHAPES[c % 4]`` in hue
``c % 8`` (of 8 hues, 45 degrees apart) on a low-saturation value-noise
background; classes 8..15 reuse the hues in a dark tone. The class is
therefore recoverable from the dominant foreground hue and brightness.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .autodiff import atomic_write_bytes

SHAPES = ("disk", "square", "triangle", "ring")
N_HUES = 8
MAX_CLASSES = 2 * N_HUES
HUE_JITTER = 0.02          # fraction of the colour wheel
VAL_SEED_OFFSET = 500_000_000


@dataclass(frozen=True)
class SceneSpec:
    class_id: int
    seed: int

    @property
    def shape(self) -> str:
        return SHAPES[self.class_id % len(SHAPES)]

    @property
    def hue(self) -> float:
        return (self.class_id % N_HUES) / N_HUES

    @property
    def tone(self) -> tuple[float, float]:
        return (0.85, 1.0) if self.class_id < N_HUES else (0.5, 0.62)

    count_range = (1, 3)


def _value_noise(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    coarse = rng.standard_normal((cells + 1, cells + 1))
    return ndimage.zoom(coarse, size / (cells + 1), order=3, mode="nearest")[:size, :size]


def _sdf(kind: str, px: np.ndarray, py: np.ndarray, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    dx, dy = px - cx, py - cy
    ca, sa = np.cos(angle), np.sin(angle)
    rx, ry = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "disk":
        return np.hypot(dx, dy) - r
    if kind == "square":
        return np.maximum(np.abs(rx), np.abs(ry)) - 0.8 * r
    if kind == "ring":
        return np.abs(np.hypot(dx, dy) - 0.75 * r) - 0.3 * r
    # equilateral triangle, circumradius r
    return np.maximum(np.sqrt(3.0) / 2 * np.abs(rx) + 0.5 * ry, -ry) - 0.5 * r


def render(spec: SceneSpec, size: int) -> np.ndarray:
    """Render ``spec`` at side ``size``; float32 (3, size, size) in [-1, 1]."""
    if size < 16:
        raise ValueError("render needs size >= 16")
    if not 0 <= spec.class_id < MAX_CLASSES:
        raise ValueError(f"class id must lie in [0, {MAX_CLASSES})")
    rng = np.random.default_rng([spec.class_id, spec.seed])
    # background: near-grey with a faint random tint plus value noise
    base = 0.45 + 0.1 * rng.random()
    tint = 0.03 * rng.standard_normal(3)
    noise = 0.06 * _value_noise(rng, size)
    img = np.clip(base + tint[:, None, None] + noise[None], 0, 1)

    coords = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(coords, coords)
    lo, hi = spec.count_range
    count = int(rng.integers(lo, hi + 1))
    for _ in range(count):
        r = rng.uniform(0.12, 0.22)
        cx, cy = rng.uniform(r, 1 - r, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        hue = (spec.hue + rng.uniform(-HUE_JITTER, HUE_JITTER)) % 1.0
        rgb = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(*spec.tone)))
        d = _sdf(spec.shape, px, py, cx, cy, r, angle) * size
        cover = np.clip(0.5 - d, 0.0, 1.0)
        img = img * (1 - cover) + rgb[:, None, None] * cover
    return (img * 2.0 - 1.0).astype(np.float32)


def _rgb_to_hsv(img01: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = img01
    mx, mn = img01.max(0), img01.min(0)
    delta = mx - mn
    s = np.where(mx > 0, delta / np.maximum(mx, 1e-12), 0)
    safe = np.maximum(delta, 1e-12)
    h = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4)) / 6
    return h % 1.0, s, mx


def classify_heuristic(image: np.ndarray, num_classes: int) -> int:
    """Recover the class of a rendered image from pixel statistics alone.

    Dominant hue (circular mean over saturated pixels) picks the hue slot;
    median foreground brightness separates the bright and dark tone groups.
    """
    img01 = (np.asarray(image, dtype=np.float64) + 1) / 2
    h, s, v = _rgb_to_hsv(img01)
    fg = (s > 0.5) & (v > 0.4)
    if not fg.any():
        return 0
    ang = 2 * np.pi * h[fg]
    mean = np.arctan2(np.sin(ang).mean(), np.cos(ang).mean()) / (2 * np.pi) % 1.0
    hue_slot = int(np.round(mean * N_HUES)) % N_HUES
    if num_classes <= N_HUES:
        return hue_slot
    group = 1 if np.median(v[fg]) < 0.74 else 0
    cls = hue_slot + N_HUES * group
    return cls if cls < num_classes else hue_slot


# --------------------------------------------------------------------------
# resizing
# --------------------------------------------------------------------------


def catmull_rom(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax <= 1, 1.5 * ax ** 3 - 2.5 * ax ** 2 + 1,
                    np.where(ax < 2, -0.5 * ax ** 3 + 2.5 * ax ** 2 - 4 * ax + 2, 0.0))


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    m = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * src / dst - 0.5
    base = np.floor(pos).astype(int)
    for tap in range(-1, 3):
        idx = base + tap
        w = catmull_rom(pos - idx)
        np.add.at(m, (np.arange(dst), np.clip(idx, 0, src - 1)), w)
    return m


def bicubic_resize(image, target: int):
    """Catmull-Rom bicubic resize of (..., H, W) to side ``target``; edges clamped.

    Accepts numpy arrays or torch tensors and returns the same kind.
    """
    if target < 1:
        raise ValueError("target side must be >= 1")
    is_torch = torch.is_tensor(image)
    arr = image.detach().cpu().double().numpy() if is_torch else np.asarray(image, dtype=np.float64)
    h, w = arr.shape[-2:]
    if (h, w) == (target, target):
        out = arr.copy()
    else:
        my, mx = _resize_matrix(h, target), _resize_matrix(w, target)
        out = np.einsum("ij,...jk,lk->...il", my, arr, mx)
    if is_torch:
        return torch.from_numpy(out).to(image.dtype)
    return out.astype(np.asarray(image).dtype if np.asarray(image).dtype.kind == "f" else np.float64)


# --------------------------------------------------------------------------
# P6 I/O
# --------------------------------------------------------------------------


class ImageFormatError(ValueError):
    pass


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] (3, H, W) -> uint8 (H, W, 3)."""
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(data: np.ndarray) -> np.ndarray:
    return (data.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def encode_ppm(image: np.ndarray) -> bytes:
    data = to_uint8(image)
    h, w, _ = data.shape
    return f"P6 {w} {h} 255\n".encode() + data.tobytes()


def decode_ppm(raw: bytes) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise ImageFormatError("truncated header")
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ImageFormatError(f"not a P6 file (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise ImageFormatError("malformed header") from e
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit P6 supported (maxval {maxval})")
    pos += 1
    payload = raw[pos:pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise ImageFormatError("truncated payload")
    return from_uint8(np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3))


def write_image(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_ppm(image))


def read_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# --------------------------------------------------------------------------
# corpus
# --------------------------------------------------------------------------


class CorpusExistsError(RuntimeError):
    pass


def instance_seed(corpus_seed: int, split: str, index: int) -> int:
    return corpus_seed * 1_000_000_000 + (VAL_SEED_OFFSET if split == "val" else 0) + index


def corpus_items(seed: int, num_classes: int, count: int, split: str) -> list[SceneSpec]:
    if count >= VAL_SEED_OFFSET:
        raise ValueError("split too large for the seed layout")
    return [SceneSpec(i % num_classes, instance_seed(seed, split, i)) for i in range(count)]


def build_corpus(out_dir, seed: int = 7, num_classes: int = 8, train: int = 4096, val: int = 512,
                 size: int = 32, force: bool = False) -> dict:
    """Render train/val splits as P6 files plus ``manifest.json``; returns the manifest."""
    if train <= 0 or val <= 0:
        raise ValueError("split counts must be positive")
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must lie in [1, {MAX_CLASSES}]")
    out = Path(out_dir)
    files: dict[str, bytes] = {}
    entries: dict[str, list] = {}
    for split, count in (("train", train), ("val", val)):
        entries[split] = []
        for spec in corpus_items(seed, num_classes, count, split):
            name = f"{split}/{spec.seed:012d}.ppm"
            files[name] = encode_ppm(render(spec, size))
            entries[split].append({"file": name, "class": spec.class_id, "seed": spec.seed})
    checksum = hashlib.sha256()
    for name in sorted(files):
        checksum.update(name.encode() + b"\0" + hashlib.sha256(files[name]).digest())
    manifest = {
        "version": 1, "seed": seed, "num_classes": num_classes, "size": size,
        "counts": {"train": train, "val": val}, "checksum": checksum.hexdigest(), "items": entries,
    }
    mpath = out / "manifest.json"
    if mpath.exists():
        old = json.loads(mpath.read_text())
        if old.get("checksum") == manifest["checksum"]:
            return old
        if not force:
            raise CorpusExistsError(f"{out} holds a different corpus (checksum {old.get('checksum')}); use force")
    for name, data in files.items():
        atomic_write_bytes(out / name, data)
    atomic_write_bytes(mpath, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return manifest


def load_split(corpus_dir, split: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(images float32 (n, 3, R, R) in [-1, 1], labels int64 (n,))``."""
    root = Path(corpus_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    items = manifest["items"][split]
    images = np.stack([read_image(root / it["file"]) for it in items])
    labels = np.array([it["class"] for it in items], dtype=np.int64)
    return torch.from_numpy(images), torch.from_numpy(labels)


def render_split(seed: int, num_classes: int, count: int, size: int, split: str = "train"):
    """In-memory equivalent of build + load (8-bit quantized like the files)."""
    specs = corpus_items(seed, num_classes, count, split)
    images = np.stack([from_uint8(to_uint8(render(s, size))) for s in specs])
    labels = np.array([s.class_id for s in specs], dtype=np.int64)
    return torch.from_numpy(images), torch.from_numpy(labels)
