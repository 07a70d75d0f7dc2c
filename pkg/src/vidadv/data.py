"""MovingShapes: a seeded synthetic video corpus whose label is a motion pattern.

Each clip shows one rigid shape on a flat background. Shape, colours, size
and orientation are drawn from the same distributions for every class, so a
single frame carries no label information; only the motion does.

Also here: the ``.avl`` clip file format, a line-oriented dataset manifest,
batching and the crop/flip/scale/loop augmentation.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rng import Rng

MOTION_CLASSES = (
    "translate-left",
    "translate-right",
    "translate-up",
    "translate-down",
    "diagonal-up-right",
    "diagonal-down-left",
    "rotate-cw",
    "rotate-ccw",
    "grow",
    "shrink",
)

# unions of convex polygons, all wound the same way, radius ~1
_SHAPES = {
    "triangle": [[(-0.8, -0.6), (-0.8, 0.6), (0.9, 0.0)]],
    "bar": [[(-1.0, -0.3), (-1.0, 0.3), (1.0, 0.3), (1.0, -0.3)]],
    "ell": [[(-0.8, -0.8), (-0.8, 0.8), (-0.3, 0.8), (-0.3, -0.8)],
            [(-0.8, 0.3), (-0.8, 0.8), (0.8, 0.8), (0.8, 0.3)]],
    "tee": [[(-0.9, -0.8), (-0.9, -0.35), (0.9, -0.35), (0.9, -0.8)],
            [(-0.25, -0.35), (-0.25, 0.9), (0.25, 0.9), (0.25, -0.35)]],
}
_SHAPE_NAMES = tuple(sorted(_SHAPES))
_SUPERSAMPLE = 3


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    label: int
    id: str = ""

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"clip frames must be (T>=1, H, W, C), got {self.frames.shape}")


@dataclass
class Dataset:
    clips: np.ndarray  # (N, T, H, W, C) float32
    labels: np.ndarray  # (N,) int64
    ids: np.ndarray  # (N,) int64
    num_classes: int
    seed: int
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def geometry(self) -> tuple[int, int, int, int]:
        return tuple(self.clips.shape[1:])  # type: ignore[return-value]

    def subset(self, index, split: str | None = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.clips[index], self.labels[index], self.ids[index], self.num_classes,
                       self.seed, split or self.split, dict(self.meta))

    def clip(self, i: int) -> VideoClip:
        return VideoClip(self.clips[i], int(self.labels[i]), f"{int(self.ids[i]):06d}")


# -- generation -------------------------------------------------------------------

def _render(shape: str, poses: np.ndarray, H: int, W: int) -> np.ndarray:
    """Coverage maps (T, H, W) for ``poses`` rows of (cx, cy, angle, scale)."""
    s = _SUPERSAMPLE
    off = (np.arange(s) + 0.5) / s
    ys = (np.arange(H)[:, None] + off[None, :]).reshape(-1)
    xs = (np.arange(W)[:, None] + off[None, :]).reshape(-1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    cover = np.empty((poses.shape[0], H, W), dtype=np.float64)
    for t, (cx, cy, ang, scale) in enumerate(poses):
        c, sn = math.cos(ang), math.sin(ang)
        dx, dy = gx - cx, gy - cy
        lx = (c * dx + sn * dy) / scale
        ly = (-sn * dx + c * dy) / scale
        inside = np.zeros(gx.shape, dtype=bool)
        for poly in _SHAPES[shape]:
            ok = np.ones(gx.shape, dtype=bool)
            n = len(poly)
            for i in range(n):
                (x0, y0), (x1, y1) = poly[i], poly[(i + 1) % n]
                ok &= (x1 - x0) * (ly - y0) - (y1 - y0) * (lx - x0) <= 0
            inside |= ok
        cover[t] = inside.reshape(H, s, W, s).mean(axis=(1, 3))
    return cover


def _motion(label: int, rng: Rng, T: int, H: int, W: int) -> np.ndarray:
    """Per-frame poses (cx, cy, angle, scale) for one motion class."""
    S = min(H, W)
    name = MOTION_CLASSES[label]
    t = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    cx0 = W / 2 + rng.uniform(-0.08, 0.08) * S
    cy0 = H / 2 + rng.uniform(-0.08, 0.08) * S
    angle0 = rng.uniform(0, 2 * np.pi)
    poses = np.empty((T, 4))
    poses[:, 0], poses[:, 1], poses[:, 2] = cx0, cy0, angle0
    if name.startswith(("translate", "diagonal")):
        direction = {
            "translate-left": (-1, 0), "translate-right": (1, 0),
            "translate-up": (0, -1), "translate-down": (0, 1),
            "diagonal-up-right": (1, -1), "diagonal-down-left": (-1, 1),
        }[name]
        d = np.asarray(direction, dtype=float)
        d /= np.linalg.norm(d)
        dist = rng.uniform(0.35, 0.5) * S
        poses[:, 0] = cx0 + d[0] * dist * (t - 0.5)
        poses[:, 1] = cy0 + d[1] * dist * (t - 0.5)
        poses[:, 3] = rng.uniform(0.16, 0.26) * S
    elif name.startswith("rotate"):
        total = np.deg2rad(rng.uniform(110, 180)) * (1 if name == "rotate-cw" else -1)
        poses[:, 2] = angle0 + total * t
        poses[:, 3] = rng.uniform(0.2, 0.3) * S
    else:
        small = rng.uniform(0.1, 0.14) * S
        big = small * rng.uniform(2.0, 2.6)
        a, b = (small, big) if name == "grow" else (big, small)
        poses[:, 3] = a * (b / a) ** t
    return poses


def render_clip(label: int, rng: Rng, T: int, H: int, W: int, C: int = 3) -> np.ndarray:
    """One MovingShapes clip of the given class as a (T, H, W, C) float32 array."""
    shape = _SHAPE_NAMES[int(rng.integers(len(_SHAPE_NAMES)))]
    bg = rng.uniform(0.1, 0.9, size=C)
    contrast = rng.uniform(0.3, 0.55, size=C)
    fg = np.where(bg > 0.5, bg - contrast, bg + contrast)
    poses = _motion(label, rng, T, H, W)
    cover = _render(shape, poses, H, W)[..., None]
    frames = bg * (1 - cover) + fg * cover
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def generate_moving_shapes(seed: int, n_per_class: int, K: int = 10, T: int = 16, H: int = 32,
                           W: int = 32, C: int = 3, id_offset: int = 0) -> Dataset:
    """Deterministic dataset of ``n_per_class * K`` clips; clip ``i`` has label ``i % K``.

    Every clip draws from its own stream keyed by its id, so the same id always
    renders the same video regardless of dataset size.
    """
    if not 1 <= K <= len(MOTION_CLASSES):
        raise ValueError(f"unsupported class count K={K}; MovingShapes has {len(MOTION_CLASSES)} classes")
    if min(T, H, W) < 8:
        raise ValueError(f"T, H, W must be >= 8, got {(T, H, W)}")
    if n_per_class < 0:
        raise ValueError("n_per_class must be non-negative")
    n = n_per_class * K
    clips = np.empty((n, T, H, W, C), dtype=np.float32)
    labels = np.arange(n, dtype=np.int64) % K
    ids = np.arange(id_offset, id_offset + n, dtype=np.int64)
    base = Rng(seed, "moving-shapes")
    for i in range(n):
        clips[i] = render_clip(int(labels[i]), base.child(int(ids[i])), T, H, W, C)
    return Dataset(clips, labels, ids, K, seed, meta={"generator": "moving-shapes"})


def split_dataset(ds: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                  names: Sequence[str] = ("train", "val", "test")) -> dict[str, Dataset]:
    """Stratified, disjoint split; a deterministic function of ``(ds.seed, ratios)``."""
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != len(names) or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValueError("ratios must be non-negative, one per split name")
    ratios = ratios / ratios.sum()
    rng = Rng(ds.seed, "split/" + ",".join(f"{r:.6f}" for r in ratios))
    parts: dict[str, list[np.ndarray]] = {n: [] for n in names}
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        idx = idx[rng.permutation(idx.size)]
        bounds = np.round(np.cumsum(ratios) * idx.size).astype(int)
        start = 0
        for name, stop in zip(names, bounds):
            parts[name].append(idx[start:stop])
            start = stop
    return {n: ds.subset(np.sort(np.concatenate(parts[n])), split=n) for n in names}


def make_splits(seed: int, K: int = 10, n_train: int = 100, n_val: int = 10, n_test: int = 20,
                T: int = 16, H: int = 32, W: int = 32, C: int = 3) -> dict[str, Dataset]:
    """Generate train/val/test with the given clips-per-class counts (ids never overlap)."""
    total = n_train + n_val + n_test
    ds = generate_moving_shapes(seed, total, K, T, H, W, C)
    return split_dataset(ds, (n_train, n_val, n_test))


def iterate_batches(ds: Dataset, batch_size: int, rng: Rng | None = None,
                    drop_last: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and idx.size < batch_size:
            break
        yield ds.clips[idx], ds.labels[idx]


# -- clip files ---------------------------------------------------------------------

CLIP_MAGIC = b"AVL1"
_HEADER = struct.Struct("<4sIIIIH")
MAX_CLIP_ELEMENTS = 1 << 31


class ClipFormatError(ValueError):
    pass


def save_clip(path: str | Path, clip: VideoClip) -> None:
    T, H, W, C = clip.frames.shape
    if not 0 <= clip.label < 1 << 16:
        raise ClipFormatError(f"label {clip.label} does not fit in u16")
    header = _HEADER.pack(CLIP_MAGIC, T, H, W, C, clip.label)
    Path(path).write_bytes(header + np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())


def load_clip(path: str | Path) -> VideoClip:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ClipFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, T, H, W, C, label = _HEADER.unpack_from(raw)
    if magic != CLIP_MAGIC:
        raise ClipFormatError(f"{path}: bad magic {magic!r}")
    if min(T, H, W, C) == 0:
        raise ClipFormatError(f"{path}: invalid shape {(T, H, W, C)}")
    n = T * H * W * C
    if n > MAX_CLIP_ELEMENTS:
        raise ClipFormatError(f"{path}: shape {(T, H, W, C)} overflows the element limit")
    body = raw[_HEADER.size:]
    if len(body) < 4 * n:
        raise ClipFormatError(f"{path}: truncated data, expected {4 * n} bytes, got {len(body)}")
    frames = np.frombuffer(body, dtype="<f4", count=n).reshape(T, H, W, C).astype(np.float32)
    return VideoClip(frames, int(label), path.stem)


# -- dataset directories -------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"


def write_dataset_dir(root: str | Path, splits: dict[str, Dataset]) -> Path:
    """Write every clip as ``clips/<split>/<id>.avl`` plus a ``manifest.tsv`` index."""
    root = Path(root)
    lines = ["id\tpath\tlabel\tsplit"]
    for name, ds in splits.items():
        (root / "clips" / name).mkdir(parents=True, exist_ok=True)
        for i in range(len(ds)):
            clip = ds.clip(i)
            rel = f"clips/{name}/{clip.id}.avl"
            save_clip(root / rel, clip)
            lines.append(f"{clip.id}\t{rel}\t{clip.label}\t{name}")
    manifest = root / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path: str | Path) -> list[tuple[str, str, int, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["id", "path", "label", "split"]:
            raise ValueError(f"{path}: unexpected manifest header {header}")
        for line in fh:
            if not line.strip():
                continue
            cid, rel, label, split = line.rstrip("\n").split("\t")
            rows.append((cid, rel, int(label), split))
    return rows


def load_dataset_dir(root: str | Path, split: str, num_classes: int | None = None, seed: int = 0) -> Dataset:
    root = Path(root)
    rows = [r for r in read_manifest(root / MANIFEST_NAME) if r[3] == split]
    if not rows:
        raise ValueError(f"{root}: no clips in split {split!r}")
    clips = [load_clip(root / rel) for _, rel, _, _ in rows]
    frames = np.stack([c.frames for c in clips])
    labels = np.array([c.label for c in clips], dtype=np.int64)
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(frames, labels, ids, k, seed, split)


# -- augmentation ----------------------------------------------------------------------

CROP_POSITIONS = ("c", "tl", "tr", "bl", "br")


@dataclass
class AugmentConfig:
    out_T: int = 16
    out_H: int = 32
    out_W: int = 32
    positions: tuple[str, ...] = CROP_POSITIONS
    flip_prob: float = 0.5
    scales: tuple[float, ...] = (1.0, 2 ** -0.25, 2 ** -0.5)

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if not self.scales:
            raise ValueError("scale set must be non-empty")
        bad = set(self.positions) - set(CROP_POSITIONS)
        if bad or not self.positions:
            raise ValueError(f"crop positions must be drawn from {CROP_POSITIONS}")


def loop_frames(frames: np.ndarray, T: int) -> np.ndarray:
    """Repeat a short clip until it has at least ``T`` frames."""
    if frames.shape[0] >= T:
        return frames
    reps = -(-T // frames.shape[0])
    return np.concatenate([frames] * reps, axis=0)


def _resize_bilinear(frames: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = frames.shape[1:3]
    if (h, w) == (H, W):
        return frames
    ys = np.clip((np.arange(H) + 0.5) * h / H - 0.5, 0, h - 1)
    xs = np.clip((np.arange(W) + 0.5) * w / W - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None, None]
    wx = (xs - x0)[None, None, :, None]
    top = frames[:, y0][:, :, x0] * (1 - wx) + frames[:, y0][:, :, x1] * wx
    bot = frames[:, y1][:, :, x0] * (1 - wx) + frames[:, y1][:, :, x1] * wx
    return np.clip(top * (1 - wy) + bot * wy, 0.0, 1.0).astype(np.float32)


def flip_horizontal(frames: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(frames[:, :, ::-1, :])


def augment(clip: VideoClip | np.ndarray, cfg: AugmentConfig, rng: Rng) -> VideoClip | np.ndarray:
    """Temporal crop (looping short clips), multi-scale corner/centre crop, optional flip."""
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip, dtype=np.float32)
    T, H, W, _ = frames.shape
    if cfg.out_H > H or cfg.out_W > W:
        raise ValueError(f"crop {cfg.out_H}x{cfg.out_W} larger than frame {H}x{W}")
    frames = loop_frames(frames, cfg.out_T)
    start = int(rng.integers(0, frames.shape[0] - cfg.out_T + 1))
    frames = frames[start:start + cfg.out_T]
    scale = cfg.scales[int(rng.integers(len(cfg.scales)))]
    pos = cfg.positions[int(rng.integers(len(cfg.positions)))]
    side = max(1, int(round(min(H, W) * scale)))
    ch, cw = min(side, H), min(side, W)
    top = {"c": (H - ch) // 2, "tl": 0, "tr": 0, "bl": H - ch, "br": H - ch}[pos]
    left = {"c": (W - cw) // 2, "tl": 0, "tr": W - cw, "bl": 0, "br": W - cw}[pos]
    out = _resize_bilinear(frames[:, top:top + ch, left:left + cw], cfg.out_H, cfg.out_W)
    if rng.random() < cfg.flip_prob:
        out = flip_horizontal(out)
    out = np.ascontiguousarray(out, dtype=np.float32)
    if isinstance(clip, VideoClip):
        return VideoClip(out, clip.label, clip.id)
    return out
