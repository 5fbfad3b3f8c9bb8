"""Run configuration: a flat, typed key-value file.

File format, one entry per line::

    # comment
    alpha = 0.0001
    train_scenes = ["scene00", "scene01"]
    second_order = true

Values are JSON literals. Unknown keys and wrongly typed values are errors.
"""

from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ValidationError
from .losses import LossWeights
from .metalearn import MetaConfig, PretrainConfig

# excluded from the experiment hash: replicate seeds and locations may differ
UNHASHED_KEYS = ("seed", "data_root", "manifest")


@dataclass(frozen=True)
class RunConfig:
    # data
    data_root: str = "data"
    manifest: str = ""
    train_scenes: list = field(default_factory=list)
    test_scenes: list = field(default_factory=list)
    n_test_scenes: int = 2
    frame_size: int = 64
    channels: int = 3
    t: int = 4
    mode: str = "prediction"
    seed: int = 0
    dtype: str = "float32"
    # backbone
    base_channels: int = 32
    depth: int = 4
    hidden_channels: int = 32
    disc_base_channels: int = 32
    disc_blocks: int = 4
    # loss
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    ssim_scales: int = 3
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    # pre-training
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-4
    disc_lr: float = 1e-4
    batch_size: int = 8
    adv_weight: float = 0.05
    # meta-training
    alpha: float = 1e-4
    beta: float = 1e-4
    N: int = 5
    K: int = 5
    inner_steps: int = 1
    second_order: bool = True
    meta_iterations: int = 500
    outer_optimizer: str = "sgd"
    checkpoint_every: int = 100
    ablation_N: list = field(default_factory=list)
    # baselines and evaluation
    finetune_steps: int = 50
    finetune_lr: float = 1e-4
    K_values: list = field(default_factory=lambda: [1, 5, 10])
    methods: list = field(default_factory=lambda: ["pretrained", "finetuned", "ours"])
    score: str = "psnr"
    # synthetic corpus
    synth_scenes: int = 7
    synth_video_length: int = 300
    synth_train_videos: int = 2
    synth_test_videos: int = 1
    synth_sprites: int = 6

    def __post_init__(self):
        hints = typing.get_type_hints(RunConfig)
        for f in fields(self):
            v = getattr(self, f.name)
            want = hints[f.name]
            ok = (isinstance(v, bool) if want is bool else
                  isinstance(v, want) and not isinstance(v, bool) if want is int else
                  isinstance(v, (int, float)) and not isinstance(v, bool) if want is float else
                  isinstance(v, want))
            if not ok:
                raise ValidationError(f"config key {f.name!r} must be {want.__name__}, got {v!r}")
        overlap = set(self.train_scenes) & set(self.test_scenes)
        if overlap:
            raise ValidationError(f"meta-train and meta-test scenes overlap: {sorted(overlap)}")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValidationError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if self.score not in ("psnr", "mse"):
            raise ValidationError("score must be 'psnr' or 'mse'")
        # build the component configs once so their own checks run now
        self.backbone_config(), self.loss_weights(), self.meta_config(), self.pretrain_config()

    # -- component configs --------------------------------------------------

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(in_channels=self.channels, base_channels=self.base_channels, depth=self.depth,
                              hidden_channels=self.hidden_channels, disc_base_channels=self.disc_base_channels,
                              disc_blocks=self.disc_blocks)

    def loss_weights(self) -> LossWeights:
        return LossWeights(float(self.lambda1), float(self.lambda2), float(self.lambda3),
                           self.ssim_scales, self.ssim_window, float(self.ssim_sigma))

    def meta_config(self, **over) -> MetaConfig:
        kw = dict(alpha=float(self.alpha), beta=float(self.beta), N=self.N, K=self.K,
                  inner_steps=self.inner_steps, second_order=self.second_order, epochs=self.meta_iterations,
                  seed=self.seed, t=self.t, mode=self.mode, outer_optimizer=self.outer_optimizer,
                  weights=self.loss_weights())
        kw.update(over)
        return MetaConfig(**kw)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(steps=self.pretrain_steps, lr=float(self.pretrain_lr), disc_lr=float(self.disc_lr),
                              batch_size=self.batch_size, adv_weight=float(self.adv_weight), seed=self.seed,
                              t=self.t, mode=self.mode, weights=self.loss_weights(),
                              backbone=self.backbone_config(), dtype=self.dtype)

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_dict().items())

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in UNHASHED_KEYS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        _check_keys(overrides)
        return replace(self, **{k: _coerce(k, v) for k, v in overrides.items()})


METHODS = ("pretrained", "finetuned", "ours")
_FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def _check_keys(d):
    unknown = [k for k in d if k not in _FIELD_NAMES]
    if unknown:
        raise ValidationError(f"unknown config keys: {unknown}")


def _coerce(key, value):
    want = typing.get_type_hints(RunConfig)[key]
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare words are strings


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key in entries:
            raise ValidationError(f"config line {lineno}: duplicate key {key!r}")
        entries[key] = parse_value(raw)
    return (base or RunConfig()).with_overrides(entries)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {path} not found")
    return loads(path.read_text())


def parse_overrides(items) -> dict:
    """``["alpha=0.01", "K_values=[1,5]"]`` -> dict with JSON-typed values."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    _check_keys(out)
    return out


def desk_config(**over) -> RunConfig:
    """Small CPU-scale preset used by the synthetic experiments."""
    base = dict(
        frame_size=32, base_channels=8, depth=2, hidden_channels=8, disc_base_channels=8, disc_blocks=3,
        ssim_scales=2, pretrain_steps=800, pretrain_lr=1e-3, disc_lr=1e-3, alpha=3e-3, beta=1e-3,
        outer_optimizer="adam", meta_iterations=150, checkpoint_every=0, ablation_N=[1])
    base.update(over)
    return RunConfig().with_overrides(base)
