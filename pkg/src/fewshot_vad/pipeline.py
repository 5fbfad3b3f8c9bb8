"""Experiment stages and the (method, K) evaluation grid.

Output directory layout (all paths relative to the run directory)::

    config.txt                 resolved configuration
    pretrain/                  checkpoint + log.jsonl
    metatrain/                 checkpoint + log.jsonl (+ iter_XXXXXX/ snapshots)
    metatrain_N{n}/            ablation arms
    adapt/{method}_{scene}_K{K}/
    eval/records.jsonl         one record per (method, K, scene)
    eval/scores.csv            per-frame scores
    eval/summary.txt           table of AUCs

Every checkpoint and record carries the configuration hash; stages refuse
artifacts produced under a different configuration.
"""

from __future__ import annotations

import contextlib
import json
import logging
import shutil
from pathlib import Path
from typing import Callable, Sequence

import torch
from filelock import FileLock, Timeout

from .backbone import forward_fn
from .checkpoint import load_checkpoint, read_metadata, save_checkpoint
from .config import RunConfig, loads
from .episodes import SceneDataset, adaptation_set_from_prefix, load_dataset, pairs_to_tensors
from .errors import RunLockedError, ValidationError
from .evaluation import (SceneReport, evaluate_scene, read_records, summary_table, write_records,
                         write_score_dump)
from .metalearn import adapt, finetune_baseline, make_objective, meta_train, pretrain
from .synth import default_specs, generate_synthetic_corpus

log = logging.getLogger(__name__)

CONFIG_NAME = "config.txt"
LOCK_NAME = ".lock"


# ---------------------------------------------------------------------------
# run directory


@contextlib.contextmanager
def run_lock(out):
    """Exclusive lock on a run directory; fails immediately if already held."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RunLockedError(f"{out} is in use by another process (lock file {out / LOCK_NAME})") from None
    try:
        yield out
    finally:
        lock.release()


def record_config(config: RunConfig, out) -> None:
    """Write ``config.txt``; an existing one must describe the same experiment."""
    path = Path(out) / CONFIG_NAME
    if path.is_file():
        old = loads(path.read_text())
        if old.hash() != config.hash():
            raise ValidationError(
                f"{path} holds configuration {old.hash()}, current one is {config.hash()}; "
                "use a fresh output directory")
    config.save(path)


def _check_hash(path, config: RunConfig) -> dict:
    meta = read_metadata(path)
    if meta.get("run_config_hash") != config.hash():
        raise ValidationError(
            f"checkpoint {path} was produced under configuration {meta.get('run_config_hash')}, "
            f"current configuration is {config.hash()}")
    return meta


def load_stage_checkpoint(path, config: RunConfig):
    _check_hash(path, config)
    return load_checkpoint(path, getattr(torch, config.dtype))


def _resolve(out, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(out) / p


def load_scenes(config: RunConfig, out) -> tuple[list[SceneDataset], list[SceneDataset]]:
    """``(meta_train_scenes, meta_test_scenes)`` as configured; the sets are disjoint."""
    manifest = _resolve(out, config.manifest) if config.manifest else None
    root = _resolve(out, config.data_root) if config.data_root else None
    scenes = load_dataset(root, config.frame_size, config.channels, manifest)
    ids = sorted(scenes)
    train, test = list(config.train_scenes), list(config.test_scenes)
    if not train and not test:
        if len(ids) <= config.n_test_scenes:
            raise ValidationError(f"{len(ids)} scenes found; need more than n_test_scenes={config.n_test_scenes}")
        train, test = ids[:-config.n_test_scenes], ids[-config.n_test_scenes:]
    elif not train:
        train = [i for i in ids if i not in test]
    elif not test:
        test = [i for i in ids if i not in train]
    missing = [s for s in train + test if s not in scenes]
    if missing:
        raise ValidationError(f"configured scenes not found in dataset: {missing}")
    if set(train) & set(test):
        raise ValidationError(f"meta-train and meta-test scenes overlap: {sorted(set(train) & set(test))}")
    return [scenes[s] for s in train], [scenes[s] for s in test]


def _jsonl_logger(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = path.open("w")

    def emit(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()
    return fh, emit


# ---------------------------------------------------------------------------
# stages


def stage_pretrain(config: RunConfig, out) -> Path:
    out = Path(out)
    train, _ = load_scenes(config, out)
    fh, emit = _jsonl_logger(out / "pretrain" / "log.jsonl")
    with fh:
        gen, disc = pretrain([s.training_split() for s in train], config.pretrain_config(), on_record=emit)
    return save_checkpoint(out / "pretrain", gen, disc, run_config_hash=config.hash(),
                           extra={"stage": "pretrain", "scenes": [s.scene_id for s in train]})


def metatrain_dir(out, config: RunConfig, N: int | None = None) -> Path:
    N = config.N if N is None else N
    return Path(out) / ("metatrain" if N == config.N else f"metatrain_N{N}")


def stage_metatrain(config: RunConfig, out, N: int | None = None) -> Path:
    """Meta-train from the pre-trained checkpoint; ``N`` overrides tasks per iteration."""
    out = Path(out)
    N = config.N if N is None else N
    dest = metatrain_dir(out, config, N)
    gen, disc, _ = load_stage_checkpoint(out / "pretrain", config)
    if config.meta_iterations == 0:
        # nothing to learn: the artifact is the pre-trained checkpoint itself
        if dest.exists():
            shutil.rmtree(dest)
        shutil.copytree(out / "pretrain", dest, ignore=shutil.ignore_patterns("log.jsonl"))
        return dest
    train, _ = load_scenes(config, out)
    meta_cfg = config.meta_config(N=N)
    extra = {"stage": "metatrain", "N": N, "scenes": [s.scene_id for s in train]}

    def snapshot(theta, it):
        return save_checkpoint(dest / f"iter_{it:06d}", theta, run_config_hash=config.hash(),
                               extra={**extra, "iteration": it})

    fh, emit = _jsonl_logger(dest / "log.jsonl")
    with fh:
        theta = meta_train(gen, [s.training_split() for s in train], meta_cfg, on_record=emit,
                           checkpoint_every=config.checkpoint_every, checkpoint_fn=snapshot)
    return save_checkpoint(dest, theta, disc, run_config_hash=config.hash(), extra=extra)


def method_adapter(config: RunConfig, method: str) -> Callable:
    """``adapt_fn(params, (x, y))`` for a method name (``ours_N1`` etc. adapt like ``ours``)."""
    objective = make_objective(config.mode, config.loss_weights())
    if method == "pretrained":
        return lambda p, pairs: p
    if method == "finetuned":
        return lambda p, pairs: finetune_baseline(p, pairs, config.finetune_steps, float(config.finetune_lr),
                                                  objective)
    if method == "ours" or method.startswith("ours_N"):
        meta_cfg = config.meta_config()
        return lambda p, pairs: adapt(p, pairs, meta_cfg, objective)
    raise ValidationError(f"unknown method {method!r}")


def method_checkpoint(config: RunConfig, out, method: str) -> Path:
    if method in ("pretrained", "finetuned"):
        return Path(out) / "pretrain"
    if method == "ours":
        return metatrain_dir(out, config)
    if method.startswith("ours_N"):
        return metatrain_dir(out, config, int(method[len("ours_N"):]))
    raise ValidationError(f"unknown method {method!r}")


def grid_methods(config: RunConfig) -> list[str]:
    extra = [f"ours_N{n}" for n in config.ablation_N if n != config.N]
    return list(config.methods) + extra


def stage_adapt(config: RunConfig, out, scene_id: str, K: int, method: str = "ours") -> Path:
    """Adapt on the prefix of ``scene_id``'s first labelled video and save the result."""
    out = Path(out)
    _, test = load_scenes(config, out)
    scene = next((s for s in test if s.scene_id == scene_id), None)
    if scene is None:
        raise ValidationError(f"{scene_id!r} is not a meta-test scene; choose from {[s.scene_id for s in test]}")
    videos = scene.test_split().videos
    if not videos:
        raise ValidationError(f"scene {scene_id!r} has no labelled videos")
    gen, _, _ = load_stage_checkpoint(method_checkpoint(config, out, method), config)
    pairs, _ = adaptation_set_from_prefix(videos[0], K, config.t, config.mode)
    adapted = method_adapter(config, method)(gen, pairs_to_tensors(videos[0], pairs, config.mode))
    return save_checkpoint(out / "adapt" / f"{method}_{scene_id}_K{K}", adapted, run_config_hash=config.hash(),
                           extra={"stage": "adapt", "method": method, "scene": scene_id, "K": K,
                                  "video": videos[0].video_id})


def run_experiment_grid(config: RunConfig, out, K_values: Sequence[int] | None = None,
                        methods: Sequence[str] | None = None,
                        scenes: Sequence[SceneDataset] | None = None) -> list[SceneReport]:
    """Evaluate every (method, K, meta-test scene) cell."""
    out = Path(out)
    K_values = list(config.K_values if K_values is None else K_values)
    methods = list(grid_methods(config) if methods is None else methods)
    if scenes is None:
        _, scenes = load_scenes(config, out)
    forward = forward_fn(config.mode)
    skip = max(K_values)  # same scored frames in every K column
    reports = []
    for method in methods:
        gen, _, _ = load_stage_checkpoint(method_checkpoint(config, out, method), config)
        adapter = method_adapter(config, method)
        for K in K_values:
            for scene in scenes:
                rep = evaluate_scene(gen, scene, K, config.t, adapter, method, forward, config.score,
                                     mode=config.mode, skip=skip)
                log.info("%s K=%d %s AUC=%.4f", method, K, scene.scene_id, rep.auc)
                reports.append(rep)
    return reports


def _record(rep: SceneReport, config: RunConfig) -> dict:
    return {**rep.record(), "seed": config.seed, "config_hash": config.hash()}


def stage_eval(config: RunConfig, out) -> Path:
    out = Path(out)
    reports = run_experiment_grid(config, out)
    dest = out / "eval"
    dest.mkdir(parents=True, exist_ok=True)
    records = [_record(r, config) for r in reports]
    write_records(dest / "records.jsonl", records)
    write_score_dump(dest / "scores.csv", reports)
    (dest / "summary.txt").write_text(summary_table(records))
    return dest


def merge_reports(run_dirs: Sequence, dest) -> Path:
    """Combine ``eval/records.jsonl`` of several runs (e.g. seeds) into one report.

    All records must share one configuration hash.
    """
    records = []
    for d in run_dirs:
        path = Path(d) / "eval" / "records.jsonl"
        if not path.is_file():
            raise ValidationError(f"no evaluation records in {d} (expected {path})")
        records.extend(read_records(path))
    hashes = sorted({r.get("config_hash") for r in records})
    if len(hashes) != 1:
        raise ValidationError(f"refusing to merge records from different configurations: {hashes}")
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    records.sort(key=lambda r: (r["method"], r["K"], r["scene"], r["seed"]))
    write_records(dest / "records.jsonl", records)
    (dest / "report.txt").write_text(f"config_hash {hashes[0]}\n\n" + summary_table(records))
    return dest / "report.txt"


def mean_auc(records: Sequence[dict]) -> dict:
    """``{(method, K): mean AUC}`` over scenes and seeds."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r["method"], r["K"]), []).append(r["auc"])
    return {k: sum(v) / len(v) for k, v in groups.items()}


def run_all(config: RunConfig, out) -> Path:
    """Every stage in order under one lock; returns the evaluation directory."""
    with run_lock(out):
        record_config(config, out)
        stage_pretrain(config, out)
        for n in [config.N] + [n for n in config.ablation_N if n != config.N]:
            stage_metatrain(config, out, n)
        return stage_eval(config, out)


def run_synthetic(config: RunConfig, out) -> Path:
    """Render the synthetic corpus for ``config.seed`` under ``out/data`` and run every stage on it."""
    out = Path(out)
    data = out / "data"
    if not data.is_dir():
        specs = default_specs(config.synth_scenes, config.seed, config.frame_size, config.synth_video_length,
                              config.synth_train_videos, config.synth_test_videos, n_sprites=config.synth_sprites)
        generate_synthetic_corpus(specs, data)
    return run_all(config.with_overrides({"data_root": "data", "manifest": ""}), out)
