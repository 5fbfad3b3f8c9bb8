"""r-GAN future-frame predictor: per-frame U-Net, ConvLSTM refinement, patch discriminator.

Everything here is written functionally over a :class:`ParamSet` so the
meta-learner can evaluate the network at adapted parameters
``theta - alpha * grad`` and differentiate through that update.

Layout conventions: single frames are ``(B, C, H, W)``, clips are
``(B, T, C, H, W)``, pixel values live in ``[-1, 1]``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .errors import StructureError, ValidationError
from .params import ParamSet

MODEL_IDS = ("r-gan",)


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    base_channels: int = 32
    depth: int = 4
    hidden_channels: int = 32
    disc_base_channels: int = 32
    disc_blocks: int = 4
    negative_slope: float = 0.2
    model_id: str = "r-gan"

    def __post_init__(self):
        if self.model_id not in MODEL_IDS:
            raise ValidationError(f"unknown model_id {self.model_id!r}; available: {MODEL_IDS}")
        for name in ("in_channels", "base_channels", "hidden_channels", "disc_base_channels"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.depth < 0 or self.disc_blocks < 1:
            raise ValidationError("depth must be >= 0 and disc_blocks >= 1")

    def to_dict(self):
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class PredictorState(NamedTuple):
    """ConvLSTM hidden and cell state, each ``(B, hidden, H, W)``."""

    h: torch.Tensor
    c: torch.Tensor


# ---------------------------------------------------------------------------
# parameter initialisation


def _conv_shapes(cfg: BackboneConfig):
    """Ordered (name, shape) list for the generator."""
    b, d, C, hid = cfg.base_channels, cfg.depth, cfg.in_channels, cfg.hidden_channels
    shapes = []

    def conv(name, cin, cout, k):
        shapes.append((f"{name}.weight", (cout, cin, k, k)))
        shapes.append((f"{name}.bias", (cout,)))

    width = [b * 2 ** i for i in range(d + 1)]
    conv("unet.enc0.conv0", C, width[0], 3)
    conv("unet.enc0.conv1", width[0], width[0], 3)
    for i in range(1, d + 1):
        conv(f"unet.enc{i}.conv0", width[i - 1], width[i], 3)
        conv(f"unet.enc{i}.conv1", width[i], width[i], 3)
    for i in range(d - 1, -1, -1):
        conv(f"unet.dec{i}.conv0", width[i + 1] + width[i], width[i], 3)
        conv(f"unet.dec{i}.conv1", width[i], width[i], 3)
    conv("unet.out", width[0], C, 1)
    conv("lstm.gates", C + hid, 4 * hid, 3)
    conv("head", hid, C, 1)
    return shapes


def _disc_shapes(cfg: BackboneConfig):
    shapes = []
    cin = cfg.in_channels
    for i in range(cfg.disc_blocks):
        cout = cfg.disc_base_channels * 2 ** min(i, 3)
        shapes += [(f"disc.block{i}.weight", (cout, cin, 4, 4)), (f"disc.block{i}.bias", (cout,))]
        cin = cout
    shapes += [("disc.out.weight", (1, cin, 3, 3)), ("disc.out.bias", (1,))]
    return shapes


def _init_from_shapes(shapes, seed, dtype, cfg, role):
    gen = torch.Generator().manual_seed(int(seed))
    entries, fan_in = [], 1
    for name, shape in shapes:
        if name.endswith(".bias"):
            # small uniform biases, as in the usual convolution default
            bound = 1.0 / fan_in ** 0.5
            t = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            if name == "lstm.gates.bias":
                hid = shape[0] // 4
                t[hid:2 * hid] += 1.0  # forget gate
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            gain = (2.0 / (1 + cfg.negative_slope ** 2)) ** 0.5
            t = torch.randn(shape, generator=gen, dtype=torch.float64) * (gain / fan_in ** 0.5)
        entries.append((name, t.to(dtype)))
    meta = {"model_id": cfg.model_id, "role": role, "config": cfg, "config_hash": cfg.hash(),
            "seed": int(seed)}
    return ParamSet(entries, meta)


def init_params(cfg: BackboneConfig, seed: int = 0, dtype=torch.float32) -> ParamSet:
    """Random generator parameters (deterministic in ``seed``)."""
    return _init_from_shapes(_conv_shapes(cfg), seed, dtype, cfg, "generator")


def init_disc_params(cfg: BackboneConfig, seed: int = 0, dtype=torch.float32) -> ParamSet:
    return _init_from_shapes(_disc_shapes(cfg), seed + 7919, dtype, cfg, "discriminator")


def config_of(params: ParamSet) -> BackboneConfig:
    try:
        return params.meta["config"]
    except KeyError:
        raise StructureError("ParamSet carries no backbone config in its metadata") from None


# ---------------------------------------------------------------------------
# forward passes


def _conv(x, params, name, padding):
    return F.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=padding)


def _check_frames(x, cfg: BackboneConfig, ndim: int, multiple: int, what: str):
    if not torch.is_tensor(x):
        raise StructureError(f"{what} must be a tensor, got {type(x).__name__}")
    if x.dim() != ndim:
        layout = "(batch, time, channel, height, width)" if ndim == 5 else "(batch, channel, height, width)"
        raise StructureError(f"{what} must be {ndim}-D {layout}, got shape {tuple(x.shape)}")
    c, h, w = x.shape[-3:]
    if c != cfg.in_channels:
        raise StructureError(f"{what} channel dimension is {c}, model expects {cfg.in_channels}")
    for dim_name, size in (("height", h), ("width", w)):
        if size % multiple != 0 or size == 0:
            raise StructureError(f"{what} {dim_name} {size} is not a multiple of {multiple}")
    if not torch.isfinite(x).all():
        raise ValidationError(f"{what} contains non-finite values")


def unet(params: ParamSet, x: torch.Tensor, cfg: BackboneConfig) -> torch.Tensor:
    """Per-frame U-Net, ``(N, C, H, W) -> (N, C, H, W)`` in [-1, 1]."""
    slope = cfg.negative_slope
    act = lambda t: F.leaky_relu(t, slope)  # noqa: E731
    h = act(_conv(x, params, "unet.enc0.conv0", 1))
    h = act(_conv(h, params, "unet.enc0.conv1", 1))
    skips = [h]
    for i in range(1, cfg.depth + 1):
        h = F.avg_pool2d(h, 2)
        h = act(_conv(h, params, f"unet.enc{i}.conv0", 1))
        h = act(_conv(h, params, f"unet.enc{i}.conv1", 1))
        skips.append(h)
    for i in range(cfg.depth - 1, -1, -1):
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = torch.cat([h, skips[i]], dim=1)
        h = act(_conv(h, params, f"unet.dec{i}.conv0", 1))
        h = act(_conv(h, params, f"unet.dec{i}.conv1", 1))
    return torch.tanh(_conv(h, params, "unet.out", 0))


def zero_state(cfg: BackboneConfig, batch: int, height: int, width: int, dtype=torch.float32) -> PredictorState:
    z = torch.zeros(batch, cfg.hidden_channels, height, width, dtype=dtype)
    return PredictorState(z, z.clone())


def convlstm_step(params: ParamSet, x, state: PredictorState) -> PredictorState:
    gates = _conv(torch.cat([x, state.h], dim=1), params, "lstm.gates", 1)
    i, f, o, g = torch.chunk(gates, 4, dim=1)
    c = torch.sigmoid(f) * state.c + torch.sigmoid(i) * torch.tanh(g)
    h = torch.sigmoid(o) * torch.tanh(c)
    return PredictorState(h, c)


def predict_next_frame(params: ParamSet, clip: torch.Tensor, state: PredictorState | None = None):
    """Predict frame ``t+1`` from a ``(B, t, C, H, W)`` clip.

    Each input frame goes through the U-Net; the U-Net predictions are fed
    to the ConvLSTM in temporal order and the final hidden state is projected
    to a frame by a 1x1 convolution and ``tanh``. ``state=None`` means the
    zero state. Returns ``(frame, new_state)``.
    """
    cfg = config_of(params)
    _check_frames(clip, cfg, 5, 2 ** cfg.depth, "clip")
    B, T, C, H, W = clip.shape
    if T < 1:
        raise StructureError("clip time dimension must be >= 1")
    clip = clip.to(params.dtype)
    if state is None:
        state = zero_state(cfg, B, H, W, params.dtype)
    elif tuple(state.h.shape) != (B, cfg.hidden_channels, H, W):
        raise StructureError(
            f"state shape {tuple(state.h.shape)} != {(B, cfg.hidden_channels, H, W)}")
    preds = unet(params, clip.reshape(B * T, C, H, W), cfg).reshape(B, T, C, H, W)
    for s in range(T):
        state = convlstm_step(params, preds[:, s], state)
    out = torch.tanh(_conv(state.h, params, "head", 0))
    return out, state


def forward_prediction(params: ParamSet, clip: torch.Tensor) -> torch.Tensor:
    """``f_theta(x)`` with a fresh zero state per clip."""
    return predict_next_frame(params, clip)[0]


def reconstruct_frame(params: ParamSet, frame: torch.Tensor) -> torch.Tensor:
    """Reconstruction variant: the same generator run on a one-frame clip."""
    cfg = config_of(params)
    _check_frames(frame, cfg, 4, 2 ** cfg.depth, "frame")
    return predict_next_frame(params, frame.unsqueeze(1))[0]


def discriminate(disc_params: ParamSet, frame: torch.Tensor) -> torch.Tensor:
    """Patch logits ``(B, 1, H / 2**blocks, W / 2**blocks)``."""
    cfg = config_of(disc_params)
    _check_frames(frame, cfg, 4, 2 ** cfg.disc_blocks, "frame")
    h = frame.to(disc_params.dtype)
    for i in range(cfg.disc_blocks):
        h = F.conv2d(h, disc_params[f"disc.block{i}.weight"], disc_params[f"disc.block{i}.bias"],
                     stride=2, padding=1)
        h = F.leaky_relu(h, cfg.negative_slope)
    return F.conv2d(h, disc_params["disc.out.weight"], disc_params["disc.out.bias"], padding=1)


FORWARD_FNS = {
    "prediction": forward_prediction,
    "reconstruction": reconstruct_frame,
}


def forward_fn(mode: str):
    try:
        return FORWARD_FNS[mode]
    except KeyError:
        raise ValidationError(f"mode must be one of {sorted(FORWARD_FNS)}, got {mode!r}") from None
