"""Bilevel optimisation: inner adaptation, meta-objective, meta-training,
pre-training, fine-tuning baseline and test-time adaptation.

Parameters are handled functionally; nothing here mutates an input
:class:`ParamSet`. The inner update is

    theta' = theta - alpha * grad_theta sum_{(x, y) in D_tr} L(f_theta(x), y)

and the meta-gradient is the gradient of ``sum_i L(f_theta'_i; D_val_i)``
with respect to ``theta``, either exactly (second order) or with ``theta'``
treated as independent of ``theta`` (first order).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from .backbone import (BackboneConfig, discriminate, forward_fn, init_disc_params, init_params)
from .episodes import (MODES, Pair, SceneDataset, materialize_task, pairs_to_tensors,
                       sample_scene_batch)
from .errors import NumericError, StructureError, ValidationError
from .losses import LossWeights, adversarial_losses, composite_loss
from .params import ParamSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 1e-4
    beta: float = 1e-4
    N: int = 5
    K: int = 5
    inner_steps: int = 1
    second_order: bool = True
    epochs: int = 0
    seed: int = 0
    t: int = 4
    mode: str = "prediction"
    outer_optimizer: str = "sgd"
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be finite and > 0, got {v}")
        for name in ("N", "K", "inner_steps", "t"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise ValidationError("outer_optimizer must be 'sgd' or 'adam'")


class PairBatch(NamedTuple):
    x: torch.Tensor
    y: torch.Tensor

    def __len__(self):
        return self.y.shape[0]


class TaskBatch(NamedTuple):
    train: PairBatch
    val: PairBatch


class AdaptResult(NamedTuple):
    adapted_params: ParamSet
    train_loss_before: float
    train_loss_after: float | None
    gradient_norm: float


def as_batch(pairs) -> PairBatch:
    """Accept a :class:`PairBatch`, an ``(x, y)`` tensor tuple or a list of pairs."""
    if isinstance(pairs, PairBatch):
        batch = pairs
    elif isinstance(pairs, tuple) and len(pairs) == 2 and all(torch.is_tensor(p) for p in pairs):
        batch = PairBatch(*pairs)
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValidationError("task_loss needs at least one (x, y) pair")
        batch = PairBatch(torch.stack([torch.as_tensor(x) for x, _ in pairs]),
                          torch.stack([torch.as_tensor(y) for _, y in pairs]))
    if len(batch) == 0:
        raise ValidationError("task_loss needs at least one (x, y) pair")
    if batch.x.shape[0] != batch.y.shape[0]:
        raise StructureError(f"{batch.x.shape[0]} inputs but {batch.y.shape[0]} targets")
    return batch


@dataclass(frozen=True)
class Objective:
    """``L_T(f_theta; D) = sum_j pair_loss(forward(theta, x_j), y_j)``.

    ``pair_loss`` returns one value per pair; by default it is the weighted
    composite loss. Tests swap in closed-form models through ``forward`` and
    ``pair_loss``.
    """

    forward: Callable = field(default_factory=lambda: forward_fn("prediction"))
    weights: LossWeights = field(default_factory=LossWeights)
    pair_loss: Callable | None = None

    def per_pair(self, params: ParamSet, pairs) -> torch.Tensor:
        batch = as_batch(pairs)
        pred = self.forward(params, batch.x)
        target = batch.y.to(pred.dtype)
        if self.pair_loss is not None:
            return self.pair_loss(pred, target)
        return composite_loss(pred, target, self.weights, reduction="none")

    def __call__(self, params: ParamSet, pairs) -> torch.Tensor:
        return self.per_pair(params, pairs).sum()


def make_objective(mode="prediction", weights: LossWeights | None = None) -> Objective:
    return Objective(forward_fn(mode), weights or LossWeights())


def task_loss(params: ParamSet, pairs, weights: LossWeights | None = None,
              objective: Objective | None = None) -> torch.Tensor:
    """Summed (not averaged) per-pair loss; recurrent state is fresh for each pair."""
    objective = objective or make_objective(weights=weights)
    return objective(params, pairs)


def _grad(loss, params: ParamSet, create_graph=False) -> ParamSet:
    grads = torch.autograd.grad(loss, params.tensors(), create_graph=create_graph, allow_unused=True)
    return ParamSet.from_grads(params, grads)


def _leaf(params: ParamSet) -> ParamSet:
    return params.requires_grad_()


def _check_grad(g: ParamSet, what="gradient", task_index=None):
    norm = g.norm()
    if not math.isfinite(norm):
        raise NumericError(f"non-finite {what} (norm={norm})", grad_norm=norm, task_index=task_index)
    return norm


def _adapt_graph(theta: ParamSet, pairs, alpha, objective, steps, create_graph):
    """Run ``steps`` inner updates starting from ``theta`` (which may carry a graph)."""
    first_loss, norm = None, 0.0
    for _ in range(steps):
        loss = objective(theta, pairs)
        if first_loss is None:
            first_loss = float(loss.detach())
        g = _grad(loss, theta, create_graph=create_graph)
        norm = _check_grad(g, "inner gradient")
        theta = theta - alpha * g
        if not create_graph:
            theta = _leaf(theta)
    return theta, first_loss, norm


def inner_update(params: ParamSet, pairs, alpha: float, objective: Objective | None = None,
                 inner_steps: int = 1, weights: LossWeights | None = None,
                 evaluate_after: bool = False) -> AdaptResult:
    """``theta' = theta - alpha * grad L(D_tr)``, repeated ``inner_steps`` times."""
    if inner_steps < 1:
        raise ValidationError("inner_steps must be >= 1")
    objective = objective or make_objective(weights=weights)
    pairs = as_batch(pairs)
    theta, before, norm = _adapt_graph(_leaf(params), pairs, alpha, objective, inner_steps, False)
    adapted = theta.detach()
    after = None
    if evaluate_after:
        with torch.no_grad():
            after = float(objective(adapted, pairs))
    return AdaptResult(adapted, before, after, norm)


def meta_objective(params: ParamSet, tasks: Sequence[TaskBatch], config: MetaConfig,
                   objective: Objective | None = None, alpha: float | None = None):
    """Post-adaptation validation loss summed over tasks and its gradient.

    Returns ``(loss, meta_gradient, per_task_losses)``. Task gradients are
    reduced in task order. ``alpha`` overrides ``config.alpha`` (``0`` makes
    the inner update the identity).
    """
    if not tasks:
        raise ValidationError("meta_objective needs at least one task")
    objective = objective or make_objective(config.mode, config.weights)
    alpha = config.alpha if alpha is None else alpha
    total_grad, per_task = None, []
    for i, task in enumerate(tasks):
        theta = _leaf(params)
        adapted, _, _ = _adapt_graph(theta, as_batch(task.train), alpha, objective,
                                     config.inner_steps, create_graph=config.second_order)
        if not config.second_order:
            theta = adapted  # already a fresh leaf: first-order approximation
        val_loss = objective(adapted, as_batch(task.val))
        if not torch.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss in task {i}", task_index=i)
        g = _grad(val_loss, theta)
        _check_grad(g, "meta-gradient", task_index=i)
        per_task.append(float(val_loss.detach()))
        total_grad = g if total_grad is None else total_grad + g
    return sum(per_task), total_grad.detach(), per_task


class _Adam:
    def __init__(self, like: ParamSet, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = like.map(torch.zeros_like)
        self.v = like.map(torch.zeros_like)
        self.k = 0

    def step(self, params: ParamSet, g: ParamSet) -> ParamSet:
        self.k += 1
        self.m = self.m * self.b1 + g * (1 - self.b1)
        self.v = self.v * self.b2 + g.map(torch.square) * (1 - self.b2)
        c1, c2 = 1 - self.b1 ** self.k, 1 - self.b2 ** self.k
        upd = self.m.zip_map(self.v, lambda m, v: (m / c1) / (torch.sqrt(v / c2) + self.eps))
        return params - self.lr * upd


def iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(iteration)]).generate_state(1)[0])


def build_tasks(scenes: Sequence[SceneDataset], config: MetaConfig, iteration: int):
    tasks = sample_scene_batch(scenes, config.N, config.K, config.t, config.mode,
                               iteration_seed(config.seed, iteration))
    by_id = {s.scene_id: s for s in scenes}
    out = []
    for task in tasks:
        x_tr, y_tr, x_val, y_val = materialize_task(task, by_id[task.scene_id])
        out.append(TaskBatch(PairBatch(x_tr, y_tr), PairBatch(x_val, y_val)))
    return tasks, out


def meta_train(init_params: ParamSet, scenes: Sequence[SceneDataset], config: MetaConfig,
               objective: Objective | None = None, on_record: Callable | None = None,
               checkpoint_every: int = 0, checkpoint_fn: Callable | None = None) -> ParamSet:
    """Meta-train from pre-trained parameters for ``config.epochs`` iterations.

    Each iteration samples ``N`` distinct scenes, builds one task per scene,
    and applies ``theta <- theta - beta * sum_i grad L_val_i(theta'_i)``.
    ``on_record`` receives one dict per iteration. ``checkpoint_fn(params,
    iteration)`` is called every ``checkpoint_every`` iterations and should
    return a reference (e.g. a path) reported if training later diverges.
    """
    scenes = list(scenes)
    if config.epochs and len(scenes) < config.N:
        raise ValidationError(f"N={config.N} tasks per iteration but only {len(scenes)} scenes")
    objective = objective or make_objective(config.mode, config.weights)
    theta = init_params.detach()
    adam = _Adam(theta, config.beta) if config.outer_optimizer == "adam" else None
    last_good = None
    for it in range(config.epochs):
        start = time.perf_counter()
        tasks, batches = build_tasks(scenes, config, it)
        try:
            loss, g, per_task = meta_objective(theta, batches, config, objective)
        except NumericError as err:
            err.checkpoint = last_good
            raise
        if not math.isfinite(loss):
            raise NumericError(f"meta-loss diverged at iteration {it}", checkpoint=last_good)
        grad_norm = g.norm()
        theta = adam.step(theta, g) if adam else theta - config.beta * g
        record = {"iteration": it, "meta_loss": loss, "task_losses": per_task,
                  "scenes": [t.scene_id for t in tasks], "grad_norm": grad_norm,
                  "wall_time": time.perf_counter() - start}
        if on_record:
            on_record(record)
        if checkpoint_fn and checkpoint_every and (it + 1) % checkpoint_every == 0:
            last_good = checkpoint_fn(theta, it + 1)
    return theta


def adapt(params: ParamSet, adapt_pairs, config: MetaConfig, objective: Objective | None = None) -> ParamSet:
    """Test-time adaptation: one inner update with the meta-training step size."""
    objective = objective or make_objective(config.mode, config.weights)
    return inner_update(params, adapt_pairs, config.alpha, objective, config.inner_steps).adapted_params


def finetune_baseline(params: ParamSet, adapt_pairs, steps: int = 50, lr: float = 1e-4,
                      objective: Objective | None = None, history: list | None = None) -> ParamSet:
    """Plain gradient descent on the adaptation pairs (the fine-tuning baseline)."""
    if steps < 0:
        raise ValidationError("steps must be >= 0")
    objective = objective or make_objective()
    pairs = as_batch(adapt_pairs)
    theta = params.detach()
    for _ in range(steps):
        leaf = _leaf(theta)
        loss = objective(leaf, pairs)
        if history is not None:
            history.append(float(loss.detach()))
        g = _grad(loss, leaf)
        _check_grad(g, "fine-tuning gradient")
        theta = (leaf - lr * g).detach()
    return theta


# ---------------------------------------------------------------------------
# pre-training


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    disc_lr: float = 1e-4
    batch_size: int = 8
    adv_weight: float = 0.05
    seed: int = 0
    t: int = 4
    mode: str = "prediction"
    weights: LossWeights = field(default_factory=LossWeights)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValidationError("steps must be >= 0 and batch_size >= 1")
        if not (self.lr > 0 and self.disc_lr > 0 and self.adv_weight >= 0):
            raise ValidationError("learning rates must be > 0 and adv_weight >= 0")


def sample_pairs(scenes: Sequence[SceneDataset], n: int, t: int, mode: str, rng: np.random.Generator) -> PairBatch:
    """``n`` random windows; each draws a scene, then a video, then a start index."""
    xs, ys = [], []
    for _ in range(n):
        scene = scenes[int(rng.integers(len(scenes)))]
        vids = [v for v in scene.videos if len(v) >= (t + 1 if mode == "prediction" else 1)]
        if not vids:
            raise ValidationError(f"scene {scene.scene_id!r} has no video with >= {t + 1} frames")
        video = vids[int(rng.integers(len(vids)))]
        if mode == "prediction":
            j = int(rng.integers(len(video) - t))
            pair = Pair(tuple(range(j, j + t)), j + t)
        else:
            j = int(rng.integers(len(video)))
            pair = Pair((j,), j)
        x, y = pairs_to_tensors(video, [pair], mode)
        xs.append(x[0])
        ys.append(y[0])
    return PairBatch(torch.stack(xs), torch.stack(ys))


def pretrain(scenes: Sequence[SceneDataset], config: PretrainConfig, init: ParamSet | None = None,
             on_record: Callable | None = None):
    """Adversarial pre-training of the generator; returns ``(generator, discriminator)``.

    Generator loss: composite loss + ``adv_weight`` * LSGAN generator loss.
    The discriminator takes one LSGAN step after every generator step.
    """
    scenes = [s for s in scenes if len(s.videos)]
    if config.steps and not scenes:
        raise ValidationError("pretrain needs at least one scene with videos")
    dtype = getattr(torch, config.dtype)
    gen = init.detach().to(dtype) if init is not None else init_params(config.backbone, config.seed, dtype)
    disc = init_disc_params(config.backbone, config.seed, dtype)
    if config.steps == 0:
        return gen, disc
    fwd = forward_fn(config.mode)
    g_leaves, d_leaves = _leaf(gen), _leaf(disc)
    g_opt = torch.optim.Adam(g_leaves.tensors(), lr=config.lr)
    d_opt = torch.optim.Adam(d_leaves.tensors(), lr=config.disc_lr, betas=(0.5, 0.999))
    rng = np.random.default_rng(config.seed)
    for step in range(config.steps):
        batch = sample_pairs(scenes, config.batch_size, config.t, config.mode, rng)
        x, y = batch.x.to(dtype), batch.y.to(dtype)
        pred = fwd(g_leaves, x)
        rec = composite_loss(pred, y, config.weights)
        g_adv, _ = adversarial_losses(discriminate(d_leaves, y).detach(), discriminate(d_leaves, pred))
        g_loss = rec + config.adv_weight * g_adv
        if not torch.isfinite(g_loss):
            raise NumericError(f"pre-training diverged at step {step}")
        g_opt.zero_grad()
        g_loss.backward()
        g_opt.step()

        _, d_loss = adversarial_losses(discriminate(d_leaves, y), discriminate(d_leaves, pred.detach()))
        d_opt.zero_grad()
        d_loss.backward()
        d_opt.step()
        if on_record:
            on_record({"step": step, "composite_loss": float(rec.detach()), "gen_adv": float(g_adv.detach()),
                       "disc_loss": float(d_loss.detach())})
    return g_leaves.detach(), d_leaves.detach()
