"""Checkpoint container: ``checkpoint.json`` metadata plus raw float32 blobs.

Layout of a checkpoint directory::

    checkpoint.json      format version, model id, backbone config, seed,
                         run-config hash, per-section parameter tables
    generator.bin        little-endian float32, parameters in declared order
    discriminator.bin    (optional) same encoding

Every table entry records ``name``, ``shape`` and ``offset`` (in floats).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig
from .errors import StructureError, ValidationError
from .params import ParamSet

FORMAT_VERSION = 1
META_NAME = "checkpoint.json"


def _blob(params: ParamSet):
    table, chunks, offset = [], [], 0
    for name, t in params.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False).reshape(-1)
        table.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    return table, b"".join(chunks)


def save_checkpoint(path, params: ParamSet, disc_params: ParamSet | None = None, *,
                    run_config_hash: str | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = params.meta.get("config")
    if not isinstance(cfg, BackboneConfig):
        raise StructureError("generator ParamSet must carry a BackboneConfig in meta['config']")
    sections = {}
    for section, ps in (("generator", params), ("discriminator", disc_params)):
        if ps is None:
            continue
        table, blob = _blob(ps)
        (path / f"{section}.bin").write_bytes(blob)
        sections[section] = table
    meta = {
        "format_version": FORMAT_VERSION,
        "model_id": cfg.model_id,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "run_config_hash": run_config_hash,
        "seed": params.meta.get("seed"),
        "sections": sections,
        "extra": extra or {},
    }
    (path / META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_metadata(path) -> dict:
    meta_file = Path(path) / META_NAME
    if not meta_file.is_file():
        raise ValidationError(f"no checkpoint at {path} (missing {META_NAME})")
    meta = json.loads(meta_file.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    return meta


def _load_section(path: Path, meta: dict, section: str, dtype) -> ParamSet:
    table = meta["sections"][section]
    raw = np.frombuffer((path / f"{section}.bin").read_bytes(), dtype="<f4")
    entries = []
    for entry in table:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = raw[entry["offset"]:entry["offset"] + n]
        if chunk.size != n:
            raise StructureError(f"{section}.bin truncated at parameter {entry['name']!r}")
        entries.append((entry["name"], torch.from_numpy(chunk.astype(np.float64)).reshape(entry["shape"]).to(dtype)))
    cfg = BackboneConfig(**meta["config"])
    return ParamSet(entries, {"model_id": meta["model_id"], "role": section, "config": cfg,
                              "config_hash": meta["config_hash"], "seed": meta.get("seed")})


def load_checkpoint(path, dtype=torch.float32):
    """Returns ``(generator, discriminator_or_None, metadata)``."""
    path = Path(path)
    meta = read_metadata(path)
    gen = _load_section(path, meta, "generator", dtype)
    disc = _load_section(path, meta, "discriminator", dtype) if "discriminator" in meta["sections"] else None
    return gen, disc, meta
