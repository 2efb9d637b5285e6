"""Checkpoint archives (``.npz``) for base and adapted models.

Every archive holds the model tensors plus a ``__meta__`` JSON entry with
the config echo and the frozen-base hash. An adapted archive is
self-contained (frozen base, adapters, input projection, fusion weights);
loading it recomputes the frozen hash and refuses on mismatch.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .backbone import LORA_TARGETS, Denoiser, DenoiserConfig, frozen_hash, prepare_for_decomposition
from .codec import PatchStateCodec
from .cues import CueConfig
from .errors import CheckpointError
from .flow import Decomposer
from .fusion import FusionConfig, FusionModel

META_KEY = "__meta__"
BASE, ADAPTED = "base", "adapted"


def _tensors(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _write(path: Path, arrays: dict, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict(arrays)
    arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if META_KEY not in arrays:
        raise CheckpointError(f"{path}: not a layersplit checkpoint (no {META_KEY})")
    meta = json.loads(arrays.pop(META_KEY).tobytes().decode())
    return arrays, meta


def _load_module(module: torch.nn.Module, arrays: dict, prefix: str, path) -> None:
    expected = module.state_dict()
    state = {}
    for k, ref in expected.items():
        key = f"{prefix}/{k}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing tensor {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{path}: tensor {key} has shape {arr.shape}, expected {tuple(ref.shape)}")
        state[k] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    module.load_state_dict(state)


def save_base(path, denoiser: Denoiser, config: dict | None = None, extra: dict | None = None) -> str:
    """Write a base (inpainting) checkpoint; returns its frozen hash."""
    h = frozen_hash(denoiser)
    meta = {
        "kind": BASE,
        "denoiser": dataclasses.asdict(denoiser.cfg),
        "frozen_hash": h,
        "config": config or {},
        **(extra or {}),
    }
    _write(path, _tensors("denoiser", denoiser), meta)
    return h


def load_base(path) -> tuple[Denoiser, dict]:
    arrays, meta = read_archive(path)
    if meta.get("kind") != BASE:
        raise CheckpointError(f"{path}: expected a base checkpoint, found {meta.get('kind')!r}")
    model = Denoiser(DenoiserConfig(**meta["denoiser"]))
    _load_module(model, arrays, "denoiser", path)
    got = frozen_hash(model)
    if got != meta["frozen_hash"]:
        raise CheckpointError(f"{path}: frozen-base hash {got[:12]} does not match recorded {meta['frozen_hash'][:12]}")
    model.eval()
    return model, meta


def save_adapted(path, model: Decomposer, rank: int, alpha: float | None, lora_seed: int,
                 targets=None, config: dict | None = None, extra: dict | None = None) -> str:
    h = frozen_hash(model.denoiser)
    arrays = _tensors("denoiser", model.denoiser)
    if model.fusion is not None:
        arrays.update(_tensors("fusion", model.fusion))
    meta = {
        "kind": ADAPTED,
        "denoiser": dataclasses.asdict(model.denoiser.cfg),
        "fusion": None if model.fusion is None else dataclasses.asdict(model.fusion.cfg),
        "cues": dataclasses.asdict(model.cue_cfg),
        "patch": model.codec.patch,
        "lora": {"rank": rank, "alpha": alpha, "seed": lora_seed, "targets": list(targets) if targets else None},
        "use_fg_context": model.use_fg_context,
        "use_mm": model.use_mm,
        "frozen_hash": h,
        "config": config or {},
        **(extra or {}),
    }
    _write(path, arrays, meta)
    return h


def load_adapted(path, expected_base_hash: str | None = None) -> tuple[Decomposer, dict]:
    """Rebuild a :class:`Decomposer` from an adapted checkpoint.

    ``expected_base_hash`` (e.g. from a separately loaded base) must match
    the checkpoint's recorded frozen hash.
    """
    arrays, meta = read_archive(path)
    if meta.get("kind") != ADAPTED:
        raise CheckpointError(f"{path}: expected an adapted checkpoint, found {meta.get('kind')!r}")
    if expected_base_hash is not None and expected_base_hash != meta["frozen_hash"]:
        raise CheckpointError(
            f"{path}: adapted from base {meta['frozen_hash'][:12]}, but base {expected_base_hash[:12]} was given"
        )
    lora = meta["lora"]
    base = Denoiser(DenoiserConfig(**meta["denoiser"]))
    targets = lora["targets"] or LORA_TARGETS
    den = prepare_for_decomposition(base, lora["rank"], lora["alpha"], lora["seed"], targets)
    _load_module(den, arrays, "denoiser", path)
    got = frozen_hash(den)
    if got != meta["frozen_hash"]:
        raise CheckpointError(f"{path}: frozen-base hash {got[:12]} does not match recorded {meta['frozen_hash'][:12]}")
    fusion = None
    if meta["fusion"] is not None:
        fusion = FusionModel(FusionConfig(**meta["fusion"]))
        _load_module(fusion, arrays, "fusion", path)
        fusion.eval()
    model = Decomposer(
        denoiser=den,
        fusion=fusion,
        codec=PatchStateCodec(meta["patch"]),
        cue_cfg=CueConfig(**meta["cues"]),
        use_fg_context=meta["use_fg_context"],
        use_mm=meta["use_mm"],
    )
    return model.eval(), meta


def checkpoint_kind(path) -> str:
    return read_archive(path)[1].get("kind", "")
