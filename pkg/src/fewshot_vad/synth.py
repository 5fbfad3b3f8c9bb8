"""Moving-sprite surveillance scenes with labelled anomalies.

Each scene has its own static background, sprite palette and a typical
direction/speed of motion. Normal videos contain only that behaviour;
test videos additionally carry anomaly injectors (a sprite speeding up or
an out-of-place sprite appearing). Frames where any injector is active are
labelled 1.

Scenes are written in the dataset layout read by
:func:`fewshot_vad.episodes.load_dataset`; training videos get no
``labels.txt``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ValidationError


@dataclass(frozen=True)
class Injector:
    kind: str  # "velocity" | "novel_sprite"
    start: int  # first active frame (0-based, inclusive)
    end: int  # last active frame (inclusive)
    video: int = 0  # index among the scene's test videos
    multiplier: float = 3.0

    def __post_init__(self):
        if self.kind not in ("velocity", "novel_sprite"):
            raise ValidationError(f"unknown injector kind {self.kind!r}")
        if not 0 <= self.start <= self.end:
            raise ValidationError(f"injector interval [{self.start}, {self.end}] is invalid")


@dataclass(frozen=True)
class SynthSceneSpec:
    scene_id: str
    seed: int = 0
    n_sprites: int = 2
    sprite_size: tuple = (5.0, 8.0)
    speed: tuple = (0.8, 1.6)
    direction: float | None = None  # radians; None draws one per scene
    direction_spread: float = 0.35
    injectors: tuple = ()
    video_length: int = 300
    resolution: int = 64
    n_train_videos: int = 2
    n_test_videos: int = 1
    noise: float = 0.0
    world_scale: float = 2.0

    def __post_init__(self):
        if self.video_length < 2 or self.resolution < 4:
            raise ValidationError("video_length must be >= 2 and resolution >= 4")
        if self.world_scale < 1:
            raise ValidationError("world_scale must be >= 1")
        for inj in self.injectors:
            if inj.video >= self.n_test_videos:
                raise ValidationError(f"injector targets test video {inj.video}, scene has {self.n_test_videos}")
            if inj.end >= self.video_length:
                raise ValidationError(f"injector interval ends at {inj.end}, video has {self.video_length} frames")

    def to_dict(self):
        d = asdict(self)
        d["injectors"] = [asdict(i) for i in self.injectors]
        return d


# ---------------------------------------------------------------------------
# rendering


def _background(rng, res):
    """Smooth random texture + two-colour gradient, float RGB in [0, 1]."""
    coarse = rng.random((3, 5, 5))
    img = np.asarray(Image.fromarray((coarse.transpose(1, 2, 0) * 255).astype(np.uint8))
                     .resize((res, res), Image.BICUBIC), dtype=np.float64) / 255.0
    c0, c1 = rng.random(3), rng.random(3)
    ramp = np.linspace(0, 1, res)[None, :, None]
    grad = c0 * (1 - ramp) + c1 * ramp
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (np.arange(res)[:, None] * rng.uniform(0.05, 0.2)
                                               + np.arange(res)[None, :] * rng.uniform(0.05, 0.2)))
    bg = 0.45 * img + 0.35 * grad + 0.2 * stripes[..., None]
    return np.clip(bg * 0.6 + 0.2, 0, 1)


def _disc(res, cx, cy, r):
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    return np.clip(r - d + 0.5, 0, 1)


def _square(res, cx, cy, r):
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    d = np.maximum(np.abs(xx - cx), np.abs(yy - cy))
    return np.clip(r - d + 0.5, 0, 1)


class _Sprite:
    def __init__(self, x, y, r, vx, vy, color, shape):
        self.x, self.y, self.r = x, y, r
        self.vx, self.vy = vx, vy
        self.color, self.shape = color, shape

    def step(self, mult=1.0, wrap=None, bounce=None):
        self.x += self.vx * mult
        self.y += self.vy * mult
        if wrap is not None:
            self.x %= wrap
            self.y %= wrap
        if bounce is not None:
            for attr, vattr in (("x", "vx"), ("y", "vy")):
                p, lo, hi = getattr(self, attr), self.r, bounce - self.r
                if p < lo or p > hi:
                    setattr(self, attr, 2 * (lo if p < lo else hi) - p)
                    setattr(self, vattr, -getattr(self, vattr))

    def paint(self, img, period=None):
        """Alpha-blend onto ``img``; with ``period`` also draw the periodic copies."""
        res = img.shape[0]
        fn = _disc if self.shape == "disc" else _square
        offsets = (0,) if period is None else (-period, 0, period)
        mask = np.zeros((res, res))
        for dx in offsets:
            for dy in offsets:
                cx, cy = self.x + dx, self.y + dy
                if -self.r - 1 <= cx <= res + self.r + 1 and -self.r - 1 <= cy <= res + self.r + 1:
                    mask = np.maximum(mask, fn(res, cx, cy, self.r))
        img *= 1 - mask[..., None]
        img += mask[..., None] * self.color


def _scene_style(spec: SynthSceneSpec):
    rng = np.random.default_rng([spec.seed, 0])
    bg = _background(rng, spec.resolution)
    direction = spec.direction if spec.direction is not None else rng.uniform(0, 2 * np.pi)
    color = rng.choice([0.05, 0.95], size=3)
    if np.ptp(color) == 0:
        color[int(rng.integers(3))] = 1 - color[0]
    shape = "disc" if rng.random() < 0.5 else "square"
    return bg, direction, color, shape


def _velocity(rng, spec, direction):
    speed = rng.uniform(*spec.speed)
    ang = direction + rng.uniform(-spec.direction_spread, spec.direction_spread)
    return speed * math.cos(ang), speed * math.sin(ang)


def render_video(spec: SynthSceneSpec, video_seed: int, injectors: Sequence[Injector] = ()):
    """``(frames uint8 (F, H, W, 3), labels (F,))`` for one video of the scene.

    Normal sprites live in a periodic world ``world_scale`` times larger than
    the view, so the number of visible sprites varies over time. Each injector
    spawns its own sprite inside the view for its active interval: a
    scene-looking sprite whose velocity is the normal one times
    ``multiplier`` ("velocity"), or an off-palette sprite moving across the
    normal flow ("novel_sprite"). Injector sprites bounce off the view border.
    """
    bg, direction, color, shape = _scene_style(spec)
    rng = np.random.default_rng([spec.seed, 1, video_seed])
    res, F_ = spec.resolution, spec.video_length
    world = res * spec.world_scale
    sprites = []
    for _ in range(spec.n_sprites):
        r = rng.uniform(*spec.sprite_size) / 2
        sprites.append(_Sprite(rng.uniform(0, world), rng.uniform(0, world), r,
                               *_velocity(rng, spec, direction), color, shape))
    events = {}
    for k, inj in enumerate(injectors):
        erng = np.random.default_rng([spec.seed, 3, video_seed, k])
        r = erng.uniform(*spec.sprite_size) / 2
        x, y = erng.uniform(r, res - r, size=2)
        if inj.kind == "velocity":
            vx, vy = _velocity(erng, spec, direction)
            events[k] = _Sprite(x, y, r, vx * inj.multiplier, vy * inj.multiplier, color, shape)
        else:
            vx, vy = _velocity(erng, spec, direction + np.pi / 2)
            novel_shape = "square" if shape == "disc" else "disc"
            events[k] = _Sprite(x, y, r, vx * inj.multiplier, vy * inj.multiplier, 1.0 - color, novel_shape)
    labels = np.zeros(F_, dtype=np.int64)
    frames = np.empty((F_, res, res, 3), dtype=np.uint8)
    for f in range(F_):
        img = bg.copy()
        for s in sprites:
            if f > 0:
                s.step(wrap=world)
            s.paint(img, period=world)
        for k, inj in enumerate(injectors):
            if inj.start <= f <= inj.end:
                labels[f] = 1
                if f > inj.start:
                    events[k].step(bounce=res)
                events[k].paint(img)
        if spec.noise:
            img = img + rng.normal(0, spec.noise, img.shape)
        frames[f] = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return frames, labels


def _write_video(dirpath: Path, frames, labels=None):
    dirpath.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        Image.fromarray(fr).save(dirpath / f"frame_{i:06d}.png", optimize=False)
    if labels is not None:
        (dirpath / "labels.txt").write_text("".join(f"{int(v)}\n" for v in labels))


def generate_synthetic_corpus(specs: Sequence[SynthSceneSpec], out_dir) -> Path:
    """Render every scene under ``out_dir`` and write ``corpus.json`` describing the specs."""
    ids = [s.scene_id for s in specs]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ValidationError(f"duplicate scene ids: {dup}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        for v in range(spec.n_train_videos):
            frames, _ = render_video(spec, v)
            _write_video(out / spec.scene_id / f"train_{v:02d}", frames)
        for v in range(spec.n_test_videos):
            injs = [i for i in spec.injectors if i.video == v]
            frames, labels = render_video(spec, 1000 + v, injs)
            _write_video(out / spec.scene_id / f"test_{v:02d}", frames, labels)
    (out / "corpus.json").write_text(json.dumps({"scenes": [s.to_dict() for s in specs]},
                                                indent=2, sort_keys=True) + "\n")
    return out


# default anomaly events per test video: wrong-way sprite, novel sprite,
# speeding sprite, wrong-way sprite
DEFAULT_EVENTS = (("velocity", -1.0), ("novel_sprite", 1.0), ("velocity", 2.5), ("velocity", -1.0))


def default_injectors(length: int, seed: int, events=DEFAULT_EVENTS, min_len: int = 12, max_len: int = 24,
                      lead_in: int = 40, video: int = 0):
    """Non-overlapping anomaly events in one test video, one per slot after ``lead_in`` frames."""
    rng = np.random.default_rng([seed, 2])
    lead_in = min(lead_in, length // 6)  # short videos keep room for every event
    slots = np.linspace(lead_in, length - 1, len(events) + 1).astype(int)
    out = []
    for k, (kind, mult) in enumerate(events):
        lo, hi = int(slots[k]), int(slots[k + 1])
        dur = min(int(rng.integers(min_len, max_len + 1)), hi - lo - 2)
        if dur < 1:
            raise ValidationError(f"video of {length} frames is too short for {len(events)} events")
        start = int(rng.integers(lo, hi - dur - 1))
        out.append(Injector(kind, start, start + dur - 1, video, mult))
    return tuple(out)


def default_specs(n_scenes: int, seed: int = 0, resolution: int = 32, video_length: int = 300,
                  n_train_videos: int = 2, n_test_videos: int = 1, n_sprites: int = 6,
                  prefix: str = "scene") -> list[SynthSceneSpec]:
    """The default corpus: per-scene direction, palette and background; events in every test video."""
    specs = []
    for i in range(n_scenes):
        s = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        injectors = tuple(inj for v in range(n_test_videos)
                          for inj in default_injectors(video_length, s + v, video=v))
        specs.append(SynthSceneSpec(
            scene_id=f"{prefix}{i:02d}", seed=s, n_sprites=n_sprites, sprite_size=(4.0, 7.0), speed=(1.0, 1.5),
            direction_spread=0.15, video_length=video_length, resolution=resolution,
            n_train_videos=n_train_videos, n_test_videos=n_test_videos, world_scale=2.0, injectors=injectors))
    return specs
