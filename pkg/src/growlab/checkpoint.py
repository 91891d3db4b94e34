"""Checkpoint container and its on-disk format.

A checkpoint directory holds ``manifest.json`` plus ``blob.bin``. The blob is
the concatenation of every tensor — parameters first, then Adam first and
second moments — as little-endian binary32 in row-major order. The manifest
records the model config, step counter, run seed, growth provenance, the
optimizer hyperparameters, a tensor table (name/shape/offset/byte length)
that must tile the blob exactly, and a blake2b digest of the blob; loading
verifies the digest and refuses corrupt data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, StorageError
from .model import ModelConfig, ParamBlocks, blocks_from_named, init_model
from .optim import AdamHyper, OptState, init_opt_state

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "blob.bin"


@dataclass
class Checkpoint:
    params: ParamBlocks
    opt: OptState
    step: int
    seed: int
    provenance: list[str] = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    @property
    def num_layers(self) -> int:
        return self.params.config.num_layers


def new_checkpoint(config: ModelConfig, seed: int, hyper: AdamHyper) -> Checkpoint:
    """Fresh random-init model with zeroed optimizer state at step 0."""
    params = init_model(config, seed)
    return Checkpoint(params=params, opt=init_opt_state(params, hyper), step=0, seed=seed)


def checkpoint_digest(ckpt: Checkpoint) -> str:
    """Digest over every tensor, moments, and the step counter (bit-identity probe)."""
    h = hashlib.blake2b(digest_size=16)
    h.update(f"step={ckpt.step};t={ckpt.opt.t}".encode())
    for name, arr in _tensor_table(ckpt):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _tensor_table(ckpt: Checkpoint):
    for name, arr in ckpt.params.named():
        yield f"param.{name}", arr
    for name, _ in ckpt.params.named():
        yield f"adam_m.{name}", ckpt.opt.m[name]
    for name, _ in ckpt.params.named():
        yield f"adam_v.{name}", ckpt.opt.v[name]


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    """Write manifest + blob; returns the directory path."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create checkpoint directory {directory}: {exc}") from exc

    chunks = []
    table = []
    offset = 0
    for name, arr in _tensor_table(ckpt):
        if arr.dtype != np.float32:
            raise CheckpointError(
                f"checkpoint tensors must be binary32, {name} is {arr.dtype}"
            )
        blob = np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes()
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        chunks.append(blob)
        offset += len(blob)
    blob_bytes = b"".join(chunks)

    cfg = ckpt.params.config
    hyp = ckpt.opt.hyper
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": {
            "num_layers": cfg.num_layers,
            "d_model": cfg.d_model,
            "n_heads": cfg.n_heads,
            "d_ff": cfg.d_ff,
            "vocab_size": cfg.vocab_size,
            "max_seq_len": cfg.max_seq_len,
        },
        "step": ckpt.step,
        "seed": ckpt.seed,
        "provenance": list(ckpt.provenance),
        "opt": {
            "t": ckpt.opt.t,
            "hyper": {
                "peak_lr": hyp.peak_lr,
                "warmup_steps": hyp.warmup_steps,
                "beta1": hyp.beta1,
                "beta2": hyp.beta2,
                "eps": hyp.eps,
                "weight_decay": hyp.weight_decay,
            },
        },
        "tensors": table,
        "blob_nbytes": len(blob_bytes),
        "blob_digest": hashlib.blake2b(blob_bytes, digest_size=16).hexdigest(),
    }
    try:
        (directory / BLOB_NAME).write_bytes(blob_bytes)
        (directory / MANIFEST_NAME).write_text(
            json.dumps(manifest, indent=1, sort_keys=True) + "\n"
        )
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint to {directory}: {exc}") from exc
    return directory


def load_checkpoint(directory) -> Checkpoint:
    """Read and verify a checkpoint directory; bit-exact inverse of save."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_NAME).read_text())
        blob = (directory / BLOB_NAME).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint from {directory}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest in {directory} is not valid JSON: {exc}") from exc

    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')!r}"
        )
    if len(blob) != manifest["blob_nbytes"]:
        raise CheckpointError(
            f"blob length {len(blob)} does not match manifest ({manifest['blob_nbytes']}); "
            "checkpoint is truncated or corrupt"
        )
    digest = hashlib.blake2b(blob, digest_size=16).hexdigest()
    if digest != manifest["blob_digest"]:
        raise CheckpointError("blob digest mismatch; refusing to load corrupt checkpoint")

    expected_offset = 0
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        if entry["offset"] != expected_offset:
            raise CheckpointError(
                f"tensor table has a gap or overlap at {entry['name']!r}"
            )
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        if arr.nbytes != entry["nbytes"]:
            raise CheckpointError(f"tensor {entry['name']!r} shape/byte-length mismatch")
        tensors[entry["name"]] = arr
        expected_offset += entry["nbytes"]
    if expected_offset != len(blob):
        raise CheckpointError("tensor table does not cover the blob exactly")

    config = ModelConfig(**manifest["config"])
    params = blocks_from_named(
        config,
        {n[len("param."):]: a for n, a in tensors.items() if n.startswith("param.")},
    )
    params.validate()
    hyper = AdamHyper(**manifest["opt"]["hyper"])
    opt = OptState(
        m={n[len("adam_m."):]: a for n, a in tensors.items() if n.startswith("adam_m.")},
        v={n[len("adam_v."):]: a for n, a in tensors.items() if n.startswith("adam_v.")},
        t=manifest["opt"]["t"],
        hyper=hyper,
    )
    return Checkpoint(
        params=params,
        opt=opt,
        step=manifest["step"],
        seed=manifest["seed"],
        provenance=list(manifest["provenance"]),
    )
