import json
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import SMALL, TINY, rel_err
from fewshot_vad.backbone import (BackboneConfig, discriminate, forward_prediction, init_disc_params, init_params,
                                  predict_next_frame, reconstruct_frame, zero_state)
from fewshot_vad.errors import StructureError, ValidationError
from fewshot_vad.losses import LossWeights
from fewshot_vad.metalearn import PretrainConfig, pretrain
from fewshot_vad.episodes import SceneDataset, Video

FIXTURES = Path(__file__).parent / "fixtures"


def test_default_config_predicts_one_frame_in_range():
    p = init_params(BackboneConfig(), seed=0)
    clip = torch.rand(1, 4, 3, 64, 64) * 2 - 1
    out, state = predict_next_frame(p, clip)
    assert out.shape == (1, 3, 64, 64)
    assert out.abs().max() <= 1
    assert state.h.shape == (1, 32, 64, 64)


@pytest.mark.parametrize("size", [32, 64, 128])
@pytest.mark.parametrize("channels", [1, 3])
def test_shape_closure(size, channels):
    cfg = BackboneConfig(in_channels=channels, base_channels=4, depth=4, hidden_channels=4)
    p = init_params(cfg, seed=1)
    out, _ = predict_next_frame(p, torch.zeros(2, 3, channels, size, size))
    assert out.shape == (2, channels, size, size)


def test_deterministic_repeat():
    p = init_params(SMALL, seed=2)
    clip = torch.rand(2, 4, 3, 16, 16) * 2 - 1
    a, _ = predict_next_frame(p, clip, zero_state(SMALL, 2, 16, 16))
    b, _ = predict_next_frame(p, clip, zero_state(SMALL, 2, 16, 16))
    assert torch.equal(a, b)


def test_golden_zero_clip():
    ref = json.loads((FIXTURES / "golden_predict.json").read_text())
    cfg = BackboneConfig(**ref["config"])
    p = init_params(cfg, seed=ref["seed"], dtype=torch.float64)
    out, state = predict_next_frame(p, torch.zeros(ref["clip_shape"], dtype=torch.float64))
    np.testing.assert_allclose(out.reshape(-1).numpy(), ref["output"], rtol=0, atol=1e-10)
    assert abs(float(state.h.sum()) - ref["state_h_sum"]) < 1e-9


def test_state_is_pure_function_of_config_and_size():
    p = init_params(SMALL, seed=0)
    _, s1 = predict_next_frame(p, torch.zeros(3, 2, 3, 16, 16))
    _, s2 = predict_next_frame(p, torch.ones(3, 4, 3, 16, 16) * 0.5)
    assert s1.h.shape == s2.h.shape == s1.c.shape == (3, SMALL.hidden_channels, 16, 16)


def test_recurrence_locality():
    p = init_params(SMALL, seed=4)
    clip = torch.rand(2, 4, 3, 16, 16) * 2 - 1
    shuffled = clip.clone()
    shuffled[1] = clip[1, torch.tensor([2, 0, 3, 1])]
    a = forward_prediction(p, clip)
    b = forward_prediction(p, shuffled)
    assert torch.equal(a[0], b[0])
    assert not torch.equal(a[1], b[1])


def test_explicit_state_is_used_and_input_state_untouched():
    p = init_params(SMALL, seed=4)
    clip = torch.rand(1, 2, 3, 16, 16) * 2 - 1
    _, state = predict_next_frame(p, clip)
    h0 = state.h.clone()
    a, _ = predict_next_frame(p, clip, state)
    b, _ = predict_next_frame(p, clip)
    assert not torch.equal(a, b)
    assert torch.equal(state.h, h0)


@pytest.mark.parametrize("bad, exc, word", [
    (torch.zeros(1, 4, 3, 16), StructureError, "5-D"),
    (torch.zeros(1, 4, 1, 16, 16), StructureError, "channel"),
    (torch.zeros(1, 4, 3, 18, 16), StructureError, "height"),
    (torch.zeros(1, 4, 3, 16, 14), StructureError, "width"),
])
def test_shape_errors_name_the_dimension(bad, exc, word):
    p = init_params(SMALL)
    with pytest.raises(exc, match=word):
        predict_next_frame(p, bad)


def test_non_finite_input_is_validation_error():
    p = init_params(SMALL)
    clip = torch.zeros(1, 4, 3, 16, 16)
    clip[0, 1, 0, 3, 3] = float("nan")
    with pytest.raises(ValidationError):
        predict_next_frame(p, clip)


def test_state_shape_mismatch():
    p = init_params(SMALL)
    with pytest.raises(StructureError, match="state"):
        predict_next_frame(p, torch.zeros(1, 4, 3, 16, 16), zero_state(SMALL, 1, 8, 8))


def test_reconstruct_shape_and_determinism():
    cfg = BackboneConfig(base_channels=4, depth=2, hidden_channels=4)
    p = init_params(cfg, seed=5)
    frame = torch.rand(2, 3, 64, 64) * 2 - 1
    a, b = reconstruct_frame(p, frame), reconstruct_frame(p, frame)
    assert a.shape == frame.shape
    assert torch.equal(a, b)
    with pytest.raises(StructureError):
        reconstruct_frame(p, frame[:, None])


def test_discriminator_grid_and_determinism():
    p = init_disc_params(BackboneConfig(disc_base_channels=4, disc_blocks=4), seed=0)
    x = torch.rand(2, 3, 64, 64) * 2 - 1
    a, b = discriminate(p, x), discriminate(p, x)
    assert a.shape == (2, 1, 4, 4)
    assert torch.isfinite(a).all() and torch.equal(a, b)
    with pytest.raises(StructureError):
        discriminate(p, torch.zeros(2, 3, 60, 64))


def test_same_config_same_structure():
    a, b = init_params(SMALL, seed=0), init_params(SMALL, seed=9)
    assert a.structure() == b.structure()
    assert not a.equal(b)
    assert a.meta["config_hash"] == SMALL.hash()


def test_unknown_model_id():
    with pytest.raises(ValidationError):
        BackboneConfig(model_id="r-vae")


def test_gradient_matches_finite_differences(tiny_params):
    torch.manual_seed(0)
    clip = torch.rand(2, 3, 1, 8, 8, dtype=torch.float64) * 2 - 1
    target = torch.rand(2, 1, 8, 8, dtype=torch.float64) * 2 - 1

    def loss_of(flat):
        p = tiny_params.unflatten(flat)
        return ((forward_prediction(p, clip) - target) ** 2).sum()

    flat = tiny_params.flatten().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(loss_of(flat), flat)
    eps = 1e-6
    fd = torch.empty_like(g)
    with torch.no_grad():
        for i in range(len(flat)):
            e = torch.zeros_like(flat)
            e[i] = eps
            fd[i] = (loss_of(flat + e) - loss_of(flat - e)) / (2 * eps)
    assert rel_err(g, fd) < 1e-3


def test_reconstruction_overfits_constant_image():
    cfg = BackboneConfig(base_channels=4, depth=1, hidden_channels=4)
    p = init_params(cfg, seed=0).requires_grad_()
    target = torch.full((1, 3, 8, 8), 0.3)
    opt = torch.optim.Adam(p.tensors(), lr=1e-2)
    for _ in range(300):
        loss = (reconstruct_frame(p, target) - target).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    mae = float((reconstruct_frame(p.detach(), target) - target).abs().mean())
    assert mae < 0.05


def test_discriminator_separates_after_pretraining():
    cfg = BackboneConfig(base_channels=4, depth=1, hidden_channels=4, disc_base_channels=8, disc_blocks=2)
    rng = np.random.default_rng(0)
    frames = np.clip(rng.normal(0, 0.5, (30, 3, 8, 8)), -1, 1).astype(np.float32)
    scene = SceneDataset("s", [Video(frames, video_id="v")])
    cfg_p = PretrainConfig(steps=150, lr=1e-3, disc_lr=2e-3, batch_size=8, adv_weight=0.05, t=2,
                           weights=LossWeights(ssim_scales=1, ssim_window=3), backbone=cfg)
    gen, disc = pretrain([scene], cfg_p)
    x = torch.from_numpy(frames)
    clips = torch.stack([x[j:j + 2] for j in range(28)])
    with torch.no_grad():
        fake = forward_prediction(gen, clips)
        real_p = torch.sigmoid(discriminate(disc, x[2:])).mean()
        fake_p = torch.sigmoid(discriminate(disc, fake)).mean()
    assert real_p > fake_p
