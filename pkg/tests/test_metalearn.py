import numpy as np
import pytest
import torch

from conftest import TINY, array_scene, array_video, rel_err
from fewshot_vad.backbone import BackboneConfig, forward_prediction, init_params
from fewshot_vad.episodes import SceneDataset, Video, adaptation_set_from_prefix, pairs_to_tensors, window_video
from fewshot_vad.errors import NumericError, StructureError, ValidationError
from fewshot_vad.losses import LossWeights, composite_loss
from fewshot_vad.metalearn import (MetaConfig, Objective, PairBatch, PretrainConfig, TaskBatch, adapt, build_tasks,
                                   finetune_baseline, inner_update, make_objective, meta_objective, meta_train,
                                   pretrain, task_loss)
from fewshot_vad.params import ParamSet
from fewshot_vad.synth import SynthSceneSpec, render_video

D = torch.float64
W8 = LossWeights(ssim_scales=2, ssim_window=3)  # MS-SSIM needs 6x6 at least


def scalar(theta):
    return ParamSet([("theta", torch.tensor(float(theta), dtype=D))])


# f_theta(x) = theta, per-pair loss (f - y)^2
SQUARE = Objective(forward=lambda p, x: p["theta"].expand(x.shape[0], 1),
                   pair_loss=lambda pred, y: ((pred - y) ** 2).sum(-1))
HALF_SQUARE = Objective(forward=SQUARE.forward, pair_loss=lambda pred, y: 0.5 * ((pred - y) ** 2).sum(-1))


def const_pairs(*ys):
    return PairBatch(torch.zeros(len(ys), 1, dtype=D), torch.tensor(ys, dtype=D).reshape(-1, 1))


def tiny_task(seed, K=2, size=8):
    v = array_video(4 + 2 * K + 2, size=size, seed=seed)
    pairs = window_video(v, 2)
    tr = [p._replace(x_indices=p.x_indices[-2:]) for p in pairs[:K]]
    va = pairs[K:2 * K]
    x, y = pairs_to_tensors(v, tr)
    xv, yv = pairs_to_tensors(v, va)
    return TaskBatch(PairBatch(x.double(), y.double()), PairBatch(xv.double(), yv.double()))


# -- task loss -------------------------------------------------------------------

def test_task_loss_examples(tiny_params):
    x = torch.rand(1, 2, 1, 8, 8, dtype=D) * 2 - 1
    with torch.no_grad():
        y = forward_prediction(tiny_params, x)
    assert abs(float(task_loss(tiny_params, (x, y), W8))) < 1e-12
    y2 = torch.rand(1, 1, 8, 8, dtype=D) * 2 - 1
    one = float(task_loss(tiny_params, (x, y2), W8))
    two = float(task_loss(tiny_params, (x.repeat(2, 1, 1, 1, 1), y2.repeat(2, 1, 1, 1)), W8))
    assert abs(two - 2 * one) < 1e-12


def test_task_loss_is_sum_of_component_losses(tiny_params):
    g = torch.Generator().manual_seed(1)
    x = torch.rand(3, 2, 1, 8, 8, generator=g, dtype=D) * 2 - 1
    y = torch.rand(3, 1, 8, 8, generator=g, dtype=D) * 2 - 1
    with torch.no_grad():
        pred = forward_prediction(tiny_params, x)
        hand = sum(float(composite_loss(pred[j:j + 1], y[j:j + 1], W8)) for j in range(3))
    assert abs(float(task_loss(tiny_params, (x, y), W8)) - hand) < 1e-12
    with pytest.raises(ValidationError):
        task_loss(tiny_params, [], W8)


# -- inner update -----------------------------------------------------------------

def test_inner_update_closed_forms():
    res = inner_update(scalar(1.0), const_pairs(0.0), 0.1, HALF_SQUARE)
    assert abs(float(res.adapted_params["theta"]) - 0.9) < 1e-15
    res = inner_update(scalar(3.0), const_pairs(3.0), 0.1, HALF_SQUARE, evaluate_after=True)
    assert float(res.adapted_params["theta"]) == 3.0 and res.gradient_norm == 0
    assert res.train_loss_before == res.train_loss_after == 0


def test_inner_update_matches_finite_difference_step(tiny_params):
    task = tiny_task(0)
    obj = make_objective(weights=W8)
    alpha = 1e-2
    res = inner_update(tiny_params, task.train, alpha, obj)
    flat = tiny_params.flatten()
    eps = 1e-6
    idx = np.random.default_rng(0).choice(len(flat), 60, replace=False)
    fd = []
    with torch.no_grad():
        for i in idx:
            e = torch.zeros_like(flat)
            e[i] = eps
            fd.append(float(obj(tiny_params.unflatten(flat + e), task.train)
                            - obj(tiny_params.unflatten(flat - e), task.train)) / (2 * eps))
    expected = flat[idx].numpy() - alpha * np.array(fd)
    assert rel_err(res.adapted_params.flatten()[idx].numpy(), expected) < 1e-3
    assert rel_err((flat - res.adapted_params.flatten())[idx] / alpha, fd) < 1e-3


def test_inner_update_does_not_mutate_and_keeps_structure(tiny_params):
    before = tiny_params.clone()
    res = inner_update(tiny_params, tiny_task(1).train, 0.05, make_objective(weights=W8), inner_steps=3)
    assert tiny_params.equal(before)
    assert res.adapted_params.structure() == tiny_params.structure()
    assert not res.adapted_params.equal(tiny_params)
    with pytest.raises(ValidationError):
        inner_update(tiny_params, tiny_task(1).train, 0.05, inner_steps=0)


def test_inner_update_repeats_steps():
    res = inner_update(scalar(1.0), const_pairs(0.0), 0.1, HALF_SQUARE, inner_steps=3)
    assert abs(float(res.adapted_params["theta"]) - 0.9 ** 3) < 1e-15


def test_non_finite_gradient_raises_with_norm():
    bad = Objective(forward=SQUARE.forward, pair_loss=lambda pred, y: torch.sqrt(pred - y).sum(-1))
    with pytest.raises(NumericError) as info:
        inner_update(scalar(1.0), const_pairs(1.0), 0.1, bad)
    assert info.value.grad_norm is not None and not np.isfinite(info.value.grad_norm)


# -- meta-objective ------------------------------------------------------------------

def test_meta_objective_scalar_closed_form():
    task = TaskBatch(const_pairs(1.0), const_pairs(0.0))
    cfg = MetaConfig(alpha=0.25)
    loss, g, per_task = meta_objective(scalar(0.0), [task], cfg, SQUARE)
    assert abs(loss - 0.25) < 1e-15  # (theta' - b)^2 with theta' = 0.5
    assert abs(float(g["theta"]) - 0.5) < 1e-12
    fo = meta_objective(scalar(0.0), [task], MetaConfig(alpha=0.25, second_order=False), SQUARE)[1]
    assert abs(float(fo["theta"]) - 1.0) < 1e-12  # 2 (theta' - b) without the (1 - 2 alpha) factor


def test_alpha_zero_gives_plain_validation_gradient(tiny_params):
    task = tiny_task(2)
    obj = make_objective(weights=W8)
    _, g, _ = meta_objective(tiny_params, [task], MetaConfig(), obj, alpha=0.0)
    leaf = tiny_params.requires_grad_()
    direct = torch.autograd.grad(obj(leaf, task.val), leaf.tensors())
    assert rel_err(g.flatten(), torch.cat([d.reshape(-1) for d in direct])) < 1e-12


def test_meta_gradient_matches_pipeline_finite_differences(tiny_params):
    task = tiny_task(3)
    obj = make_objective(weights=W8)
    cfg = MetaConfig(alpha=0.05)
    _, g, _ = meta_objective(tiny_params, [task], cfg, obj)

    def pipeline(flat):
        p = tiny_params.unflatten(flat)
        adapted = inner_update(p, task.train, cfg.alpha, obj).adapted_params
        with torch.no_grad():
            return float(obj(adapted, task.val))

    flat = tiny_params.flatten()
    eps = 1e-6
    idx = np.random.default_rng(1).choice(len(flat), 60, replace=False)
    fd = []
    for i in idx:
        e = torch.zeros_like(flat)
        e[i] = eps
        fd.append((pipeline(flat + e) - pipeline(flat - e)) / (2 * eps))
    assert rel_err(g.flatten()[idx].numpy(), fd) < 1e-3


def test_first_and_second_order_agree_as_alpha_vanishes(tiny_params):
    tasks = [tiny_task(4)]
    obj = make_objective(weights=W8)
    so = meta_objective(tiny_params, tasks, MetaConfig(alpha=1e-6), obj)[1].flatten()
    fo = meta_objective(tiny_params, tasks, MetaConfig(alpha=1e-6, second_order=False), obj)[1].flatten()
    assert float((so - fo).norm() / so.norm()) < 1e-2


def test_meta_objective_is_additive(tiny_params):
    tasks = [tiny_task(s) for s in (5, 6, 7)]
    obj = make_objective(weights=W8)
    cfg = MetaConfig(alpha=0.02)
    loss, g, per = meta_objective(tiny_params, tasks, cfg, obj)
    parts = [meta_objective(tiny_params, [t], cfg, obj) for t in tasks]
    assert abs(loss - sum(p[0] for p in parts)) < 1e-12
    assert per == [p[0] for p in parts]
    total = parts[0][1] + parts[1][1] + parts[2][1]
    assert g.allclose(total, rtol=1e-12, atol=1e-14)
    with pytest.raises(ValidationError):
        meta_objective(tiny_params, [], cfg, obj)


def test_meta_objective_nan_names_task():
    obj = Objective(forward=SQUARE.forward, pair_loss=lambda pred, y: torch.log(pred - y).sum(-1))
    tasks = [TaskBatch(const_pairs(-5.0), const_pairs(-1.0)), TaskBatch(const_pairs(-5.0), const_pairs(9.0))]
    with pytest.raises(NumericError) as info:
        meta_objective(scalar(0.0), tasks, MetaConfig(alpha=1e-3, second_order=False), obj)
    assert info.value.task_index == 1


def test_meta_config_validation():
    for bad in (dict(alpha=0), dict(beta=-1), dict(N=0), dict(K=0), dict(inner_steps=0),
                dict(alpha=float("nan")), dict(mode="other"), dict(outer_optimizer="rmsprop")):
        with pytest.raises(ValidationError):
            MetaConfig(**bad)
    assert MetaConfig().alpha == MetaConfig().beta == 1e-4


# -- meta-training ---------------------------------------------------------------------

def _scenes(n=4, size=4):
    return [array_scene(f"s{i}", n_videos=2, n_frames=16, size=size, seed=i) for i in range(n)]


LAST = Objective(forward=lambda p, x: p["w"] * x[:, -1].to(D),
                 pair_loss=lambda pred, y: ((pred - y) ** 2).mean(dim=(-3, -2, -1)))


def test_meta_train_zero_epochs_returns_init():
    p = ParamSet([("w", torch.tensor(0.3, dtype=D))])
    out = meta_train(p, _scenes(), MetaConfig(epochs=0), LAST)
    assert out.equal(p)


def test_meta_train_matches_scripted_closed_form_loop():
    scenes = _scenes()
    cfg = MetaConfig(alpha=0.3, beta=0.05, N=3, K=2, t=2, epochs=6, seed=5)
    records = []
    meta_train(ParamSet([("w", torch.tensor(0.2, dtype=D))]), scenes, cfg, LAST, on_record=records.append)

    w = 0.2
    for it in range(cfg.epochs):
        _, batches = build_tasks(scenes, cfg, it)
        loss, grad = 0.0, 0.0
        for b in batches:
            def stats(pairs):
                x = pairs.x[:, -1].double().numpy().reshape(len(pairs.x), -1)
                y = pairs.y.double().numpy().reshape(len(pairs.y), -1)
                return ((x * x).mean(1).sum(), (x * y).mean(1).sum(), (y * y).mean(1).sum())
            a_tr, b_tr, _ = stats(b.train)
            a_v, b_v, c_v = stats(b.val)
            w1 = w - cfg.alpha * 2 * (w * a_tr - b_tr)
            loss += w1 * w1 * a_v - 2 * w1 * b_v + c_v
            grad += (2 * w1 * a_v - 2 * b_v) * (1 - 2 * cfg.alpha * a_tr)
        assert abs(records[it]["meta_loss"] - loss) < 1e-9
        w -= cfg.beta * grad
    assert [r["iteration"] for r in records] == list(range(cfg.epochs))
    assert all(len(r["task_losses"]) == 3 and len(set(r["scenes"])) == 3 for r in records)


def test_meta_train_reduces_meta_loss():
    scenes = _scenes(size=8)
    cfg = MetaConfig(alpha=0.02, beta=1e-3, N=2, K=2, t=2, epochs=200, seed=0, weights=W8,
                     outer_optimizer="adam")
    records = []
    meta_train(init_params(TINY, seed=0, dtype=D), scenes, cfg, on_record=records.append)
    losses = [r["meta_loss"] for r in records]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    assert all(np.isfinite(r["grad_norm"]) and r["wall_time"] >= 0 for r in records)


def test_meta_train_reproducible():
    scenes = _scenes(size=8)
    cfg = MetaConfig(alpha=0.02, beta=1e-2, N=2, K=2, t=2, epochs=5, seed=9, weights=W8)
    runs = []
    for _ in range(2):
        rec = []
        meta_train(init_params(TINY, seed=1, dtype=D), scenes, cfg, on_record=rec.append)
        runs.append([r["meta_loss"] for r in rec])
    assert np.max(np.abs(np.subtract(*runs))) <= 1e-9


def test_meta_train_divergence_reports_last_checkpoint():
    scenes = _scenes()
    cfg = MetaConfig(alpha=0.1, beta=1.0, N=2, K=2, t=2, epochs=50, seed=0)
    blowup = Objective(forward=LAST.forward, pair_loss=lambda pred, y: (pred ** 4).mean(dim=(-3, -2, -1)) * 1e3)
    saved = []
    with pytest.raises(NumericError) as info:
        meta_train(ParamSet([("w", torch.tensor(5.0, dtype=D))]), scenes, cfg, blowup,
                   checkpoint_every=1, checkpoint_fn=lambda th, it: saved.append(it) or f"ck{it}")
    assert info.value.checkpoint == (f"ck{saved[-1]}" if saved else None)


def test_meta_train_needs_enough_scenes():
    with pytest.raises(ValidationError):
        meta_train(ParamSet([("w", torch.tensor(1.0))]), _scenes(2), MetaConfig(N=3, epochs=1), LAST)


# -- test-time adaptation and baselines -------------------------------------------------

def test_adapt_zero_loss_keeps_params(tiny_params):
    x = torch.rand(2, 2, 1, 8, 8, dtype=D) * 2 - 1
    with torch.no_grad():
        y = forward_prediction(tiny_params, x)
    out = adapt(tiny_params, (x, y), MetaConfig(alpha=0.1, weights=W8))
    assert out.allclose(tiny_params, rtol=0, atol=1e-12)


def test_adapt_depends_on_k_and_helps_held_out(tiny_params):
    v = array_video(40, seed=3)
    cfg = MetaConfig(alpha=2e-3, weights=W8, t=2)
    obj = make_objective(weights=W8)
    outs = {}
    for K in (1, 10):
        pairs, _ = adaptation_set_from_prefix(v, K, 2)
        outs[K] = adapt(tiny_params, pairs_to_tensors(v, pairs), cfg)
        assert outs[K].structure() == tiny_params.structure()
    assert not outs[1].equal(outs[10])
    held = pairs_to_tensors(v, window_video(v, 2)[20:30])
    held = (held[0].double(), held[1].double())
    with torch.no_grad():
        assert float(obj(outs[10], held)) < float(obj(tiny_params, held))


def test_finetune_baseline(tiny_params):
    task = tiny_task(8, K=4)
    obj = make_objective(weights=W8)
    assert finetune_baseline(tiny_params, task.train, steps=0, objective=obj).equal(tiny_params)
    one = finetune_baseline(tiny_params, task.train, steps=1, lr=0.01, objective=obj)
    ref = inner_update(tiny_params, task.train, 0.01, obj).adapted_params
    assert one.equal(ref)
    hist = []
    finetune_baseline(tiny_params, task.train, steps=50, lr=1e-3, objective=obj, history=hist)
    assert len(hist) == 50
    assert sum(b <= a for a, b in zip(hist, hist[1:])) >= 0.9 * 49
    with pytest.raises(ValidationError):
        finetune_baseline(tiny_params, task.train, steps=-1)


# -- pre-training -------------------------------------------------------------------------

def test_pretrain_zero_steps_returns_init_with_metadata():
    cfg = BackboneConfig(base_channels=4, depth=1, hidden_channels=4)
    gen, disc = pretrain([], PretrainConfig(steps=0, backbone=cfg, seed=4))
    assert gen.equal(init_params(cfg, seed=4))
    assert gen.meta["config"] == cfg and disc.meta["role"] == "discriminator"


def test_pretrain_overfits_one_video_and_logs_each_step():
    spec = SynthSceneSpec("s", seed=2, n_sprites=2, video_length=30, resolution=16)
    frames, _ = render_video(spec, 0)
    arr = frames.transpose(0, 3, 1, 2).astype(np.float32) / 127.5 - 1
    scene = SceneDataset("s", [Video(arr, video_id="v")])
    w = LossWeights(ssim_scales=1, ssim_window=7)
    bb = BackboneConfig(base_channels=8, depth=2, hidden_channels=8, disc_base_channels=8, disc_blocks=2)
    log = []
    gen, _ = pretrain([scene], PretrainConfig(steps=500, lr=2e-3, disc_lr=1e-3, batch_size=4, t=2, weights=w,
                                              backbone=bb), on_record=log.append)
    assert len(log) == 500 and [r["step"] for r in log[:3]] == [0, 1, 2]
    x, y = pairs_to_tensors(scene.videos[0], window_video(scene.videos[0], 2))
    with torch.no_grad():
        loss = float(composite_loss(forward_prediction(gen, x), y, w))
    assert loss < 0.1


def test_pretrain_config_validation():
    with pytest.raises(ValidationError):
        PretrainConfig(steps=-1)
    with pytest.raises(ValidationError):
        PretrainConfig(lr=0)


def test_structure_errors_surface():
    with pytest.raises(StructureError):
        inner_update(scalar(0.0), PairBatch(torch.zeros(2, 1), torch.zeros(3, 1)), 0.1, SQUARE)
