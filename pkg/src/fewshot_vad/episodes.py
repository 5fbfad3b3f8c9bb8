"""Scenes, videos and episodic task construction.

Sampling works on frame indices only; pixels are decoded when a task is
materialised into tensors.

On-disk layout understood by :func:`load_dataset`::

    root/<scene_id>/<video_id>/frame_000000.png   (lexicographic = temporal order)
    root/<scene_id>/<video_id>/labels.txt         optional, one 0/1 per frame

Videos without ``labels.txt`` are treated as normal training footage.
"""

from __future__ import annotations

import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import StructureError, ValidationError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
DATA_ROOT_ENV = "FSVAD_DATA_ROOT"
MODES = ("prediction", "reconstruction")


def decode_frame(path, size: int | None, channels: int = 3) -> np.ndarray:
    """Read one image as ``(C, H, W)`` float32 in [-1, 1].

    Grayscale and depth images are replicated across three channels.
    """
    with Image.open(path) as im:
        if im.mode in ("I;16", "I", "F"):
            arr = np.asarray(im, dtype=np.float64)
            hi = arr.max() if arr.max() > 0 else 1.0
            im = Image.fromarray((arr / hi * 255).astype(np.uint8))
        im = im.convert("L" if channels == 1 else "RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr / 127.5 - 1.0


class Video:
    """Ordered frames of one clip, either file paths or an in-memory array.

    In-memory frames are ``(F, C, H, W)`` in [-1, 1]. Decoded files are
    cached; the cache is guarded by a lock so worker threads may share a video.
    """

    def __init__(self, frames, labels=None, video_id: str = "", fps: float | None = None,
                 size: int | None = None, channels: int = 3):
        if isinstance(frames, (np.ndarray, torch.Tensor)):
            arr = torch.as_tensor(np.asarray(frames, dtype=np.float32))
            if arr.dim() != 4:
                raise StructureError(f"in-memory frames must be (F, C, H, W), got {tuple(arr.shape)}")
            self._array, self._paths = arr, None
        else:
            self._array, self._paths = None, [Path(p) for p in frames]
        self.video_id = video_id
        self.fps = fps
        self.size = size
        self.channels = channels
        self._cache: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(self):
                raise ValidationError(
                    f"video {video_id!r}: {len(labels)} labels for {len(self)} frames")
            if not np.isin(labels, (0, 1)).all():
                raise ValidationError(f"video {video_id!r}: labels must be 0 or 1")
        self.labels = labels

    def __len__(self):
        return len(self._array) if self._array is not None else len(self._paths)

    def __repr__(self):
        return f"Video({self.video_id!r}, frames={len(self)}, labelled={self.labels is not None})"

    @property
    def has_anomalies(self) -> bool:
        return self.labels is not None and bool(self.labels.any())

    def _decode(self, i: int) -> np.ndarray:
        with self._lock:
            hit = self._cache.get(i)
        if hit is not None:
            return hit
        arr = decode_frame(self._paths[i], self.size, self.channels)
        with self._lock:
            self._cache.setdefault(i, arr)
        return arr

    def load(self, indices: Sequence[int] | np.ndarray) -> torch.Tensor:
        """Frames at ``indices`` as a ``(n, C, H, W)`` float32 tensor."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if len(idx) and (idx.min() < 0 or idx.max() >= len(self)):
            raise ValidationError(f"frame index out of range for video of {len(self)} frames")
        if self._array is not None:
            return self._array[torch.as_tensor(idx)]
        return torch.from_numpy(np.stack([self._decode(int(i)) for i in idx]))

    def preload(self, workers: int = 1):
        if self._array is not None:
            return
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(self._decode, range(len(self))))
        else:
            for i in range(len(self)):
                self._decode(i)


@dataclass
class SceneDataset:
    scene_id: str
    videos: list = field(default_factory=list)

    def __len__(self):
        return len(self.videos)

    @property
    def labelled(self) -> bool:
        return any(v.labels is not None for v in self.videos)

    def training_split(self) -> "SceneDataset":
        """Videos without label files (normal footage)."""
        return SceneDataset(self.scene_id, [v for v in self.videos if v.labels is None])

    def test_split(self) -> "SceneDataset":
        return SceneDataset(self.scene_id, [v for v in self.videos if v.labels is not None])


class Pair(NamedTuple):
    """Index form of an input/target pair: ``x = frames[x_indices]``, ``y = frames[y_index]``."""

    x_indices: tuple
    y_index: int


@dataclass(frozen=True)
class Task:
    scene_id: str
    video_index: int
    train_pairs: tuple
    val_pairs: tuple
    mode: str = "prediction"

    @property
    def K(self) -> int:
        return len(self.train_pairs)


def window_video(video, t: int) -> list[Pair]:
    """All stride-1 windows of ``t`` inputs plus one target (0-based indices)."""
    F_ = len(video) if not isinstance(video, int) else video
    if t < 1:
        raise ValidationError(f"t must be >= 1, got {t}")
    if F_ < t + 1:
        raise ValidationError(f"video has {F_} frames; need at least t+1 = {t + 1} for t = {t}")
    return [Pair(tuple(range(j, j + t)), j + t) for j in range(F_ - t)]


def candidate_pairs(n_frames: int, t: int, mode: str) -> list[Pair]:
    if mode == "prediction":
        return window_video(n_frames, t)
    if mode == "reconstruction":
        return [Pair((j,), j) for j in range(n_frames)]
    raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")


def _n_candidates(n_frames: int, t: int, mode: str) -> int:
    return n_frames - t if mode == "prediction" else n_frames


def sample_task(scene: SceneDataset, K: int, t: int, mode: str = "prediction", rng_seed=0) -> Task:
    """One episode: K training and K disjoint validation pairs from one video."""
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    eligible = [i for i, v in enumerate(scene.videos) if _n_candidates(len(v), t, mode) >= 2 * K]
    if not eligible:
        need = 2 * K + t if mode == "prediction" else 2 * K
        raise ValidationError(
            f"scene {scene.scene_id!r}: no video has enough frames for K={K}, t={t} "
            f"({mode}); need at least {need} frames")
    rng = np.random.default_rng(rng_seed)
    vi = eligible[int(rng.integers(len(eligible)))]
    cands = candidate_pairs(len(scene.videos[vi]), t, mode)
    pick = rng.choice(len(cands), size=2 * K, replace=False)
    return Task(scene.scene_id, vi,
                tuple(cands[j] for j in pick[:K]),
                tuple(cands[j] for j in pick[K:]), mode)


def sample_scene_batch(scenes: Sequence[SceneDataset], N: int, K: int, t: int,
                       mode: str = "prediction", rng_seed=0) -> list[Task]:
    M = len(scenes)
    if not 1 <= N <= M:
        raise ValidationError(f"cannot sample N={N} distinct scenes from {M}")
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(M, size=N, replace=False)
    seeds = rng.integers(0, 2 ** 63 - 1, size=N)
    return [sample_task(scenes[int(s)], K, t, mode, int(seed)) for s, seed in zip(chosen, seeds)]


class EvalFrames(NamedTuple):
    indices: np.ndarray
    labels: np.ndarray | None


def adaptation_set_from_prefix(video: Video, K: int, t: int, mode: str = "prediction"):
    """First K windows for adaptation; every later frame is an evaluation target.

    Returns ``(adapt_pairs, EvalFrames)``. In prediction mode adaptation
    consumes frames ``0 .. K+t-1`` and targets start at ``K+t``.
    """
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    used = K + t if mode == "prediction" else K
    if len(video) < used + 1:
        raise ValidationError(
            f"video {video.video_id!r} has {len(video)} frames; adaptation with K={K}, t={t} "
            f"needs at least {used + 1}")
    adapt = candidate_pairs(len(video), t, mode)[:K]
    idx = np.arange(used, len(video))
    labels = None if video.labels is None else video.labels[idx]
    return adapt, EvalFrames(idx, labels)


def pairs_to_tensors(video: Video, pairs: Sequence[Pair], mode: str = "prediction"):
    """``(x, y)`` tensors: x is ``(n, t, C, H, W)`` for prediction, ``(n, C, H, W)`` for reconstruction."""
    if not pairs:
        raise ValidationError("empty pair list")
    needed = sorted({i for p in pairs for i in p.x_indices} | {p.y_index for p in pairs})
    frames = video.load(needed)
    pos = {f: k for k, f in enumerate(needed)}
    y = frames[[pos[p.y_index] for p in pairs]]
    if mode == "reconstruction":
        return y, y
    x = torch.stack([frames[[pos[i] for i in p.x_indices]] for p in pairs])
    return x, y


def materialize_task(task: Task, scene: SceneDataset):
    """Tensors ``(x_tr, y_tr, x_val, y_val)`` for a sampled task."""
    video = scene.videos[task.video_index]
    return (*pairs_to_tensors(video, task.train_pairs, task.mode),
            *pairs_to_tensors(video, task.val_pairs, task.mode))


# ---------------------------------------------------------------------------
# directory loading


def _read_labels(path: Path):
    npy = path.with_suffix(".npy")
    if not path.is_file() and npy.is_file():
        # per-video frame masks as distributed with some benchmarks
        vals = [str(int(v)) for v in np.load(npy).reshape(-1)]
    elif not path.is_file():
        return None
    else:
        vals = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    bad = [v for v in vals if v not in ("0", "1")]
    if bad:
        raise ValidationError(f"{path}: labels must be 0 or 1, found {bad[0]!r}")
    return np.array([int(v) for v in vals], dtype=np.int64)


def load_video(video_dir, size: int | None = 64, channels: int = 3) -> Video:
    video_dir = Path(video_dir)
    frames = sorted(p for p in video_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not frames:
        raise ValidationError(f"no image frames found in {video_dir}")
    return Video(frames, _read_labels(video_dir / "labels.txt"), video_dir.name,
                 size=size, channels=channels)


def resolve_root(root=None) -> Path:
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    if root is None:
        raise ValidationError(f"no dataset root given and ${DATA_ROOT_ENV} is unset")
    return Path(root)


def load_dataset(root=None, size: int | None = 64, channels: int = 3, manifest=None,
                 scene_ids: Sequence[str] | None = None) -> dict[str, SceneDataset]:
    """Discover scenes under ``root`` (or a manifest's explicit lists).

    A manifest is a JSON object ``{"scenes": {scene_id: [video_id, ...]}}``;
    ``root`` may also be given inside it.
    """
    listing = None
    if manifest is not None:
        spec = json.loads(Path(manifest).read_text())
        if root is None and "root" in spec:
            root = Path(manifest).parent / spec["root"]
        listing = spec["scenes"]
    root = resolve_root(root)
    if not root.is_dir():
        raise ValidationError(f"dataset root {root} is not a directory")
    if listing is None:
        listing = {s.name: sorted(v.name for v in s.iterdir() if v.is_dir())
                   for s in sorted(root.iterdir()) if s.is_dir()}
    scenes = {}
    for sid, vids in listing.items():
        if scene_ids is not None and sid not in scene_ids:
            continue
        scenes[sid] = SceneDataset(sid, [load_video(root / sid / v, size, channels) for v in vids])
    if scene_ids is not None:
        missing = [s for s in scene_ids if s not in scenes]
        if missing:
            raise ValidationError(f"scenes not found under {root}: {missing}")
    return scenes
