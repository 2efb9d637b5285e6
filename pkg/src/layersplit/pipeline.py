"""Stage runners behind the command line: datagen, pretrain, adapt, decompose, eval, probe.

Each runner writes its outputs plus the resolved config into one run
directory and returns a JSON-serialisable summary.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path
from typing import Sequence

import torch

from . import checkpoint as ckpt
from .backbone import (
    Denoiser,
    assemble_inputs,
    frozen_hash,
    parameter_counts,
    prepare_for_decomposition,
)
from .codec import PatchStateCodec
from .config import RunConfig, save_config
from .cues import load_sidecars
from .curation import build_dataset, load_dataset
from .errors import CheckpointError, ConfigError, InvalidInputError
from .flow import Decomposer, PreparedData, decompose, decompose_batch, flow_loss, prepare_data, train
from .fusion import FusionModel, complexity_probe, loglog_slope
from .imaging import read_mask, read_rgb, write_png
from .metrics import RandomProjectionFeatures, evaluate_backgrounds

log = logging.getLogger(__name__)

VALIDATION_SEED = 12345


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_dir(out_dir, cfg: RunConfig | None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        save_config(cfg, out / "config.json")
    return out


def write_loss_csv(path: Path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])


def read_loss_csv(path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]


def parse_split(text: str | None, n: int) -> list[int]:
    """``"a:b"`` (Python slice bounds) or ``None`` for everything."""
    if not text:
        return list(range(n))
    try:
        lo, hi = (int(x) if x else None for x in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"split: expected 'start:stop', got {text!r}") from exc
    return list(range(n))[slice(lo, hi)]


# -- model construction ------------------------------------------------------------

def build_base(cfg: RunConfig) -> Denoiser:
    torch.manual_seed(cfg.seed)
    return Denoiser(cfg.denoiser)


def build_fusion(cfg: RunConfig) -> FusionModel:
    torch.manual_seed(cfg.seed + 1)
    n_tok = (cfg.curation.canvas_size // cfg.codec.patch) ** 2
    cfg.fusion.validate(cfg.fusion.n_modalities * n_tok)
    return FusionModel(cfg.fusion)


def base_decomposer(cfg: RunConfig, base: Denoiser) -> Decomposer:
    return Decomposer(base, None, PatchStateCodec(cfg.codec.patch), cfg.cues)


@torch.no_grad()
def validation_loss(model: Decomposer, data: PreparedData, joint: bool, n: int = 8, seed: int = VALIDATION_SEED) -> float:
    """Flow loss on the first ``n`` samples with fixed, seeded ``t`` and noise."""
    model.eval()
    b = data.batch(slice(0, min(n, len(data))))
    gen = torch.Generator().manual_seed(seed)
    B = len(b)
    t = torch.rand(B, generator=gen, dtype=model.dtype)
    eps_b = torch.randn(b.x_b.shape, generator=gen, dtype=model.dtype)
    eps_f = torch.randn(b.x_f.shape, generator=gen, dtype=model.dtype)
    c_mm = model.c_mm(b.cues, b.grid)
    x_f = b.x_f if joint else None
    return float(flow_loss(model, x_f, b.x_b, b.ctx_f, b.ctx_b, c_mm, t, eps_f if joint else None, eps_b, b.grid))


def _load_triplets(dataset_dir):
    triplets = load_dataset(dataset_dir)
    if not triplets:
        raise InvalidInputError(f"dataset {dataset_dir} is empty")
    return triplets


# -- stages ----------------------------------------------------------------------

def run_datagen(cfg: RunConfig, count: int, out_dir) -> dict:
    if count < 0:
        raise ConfigError("count: must be >= 0")
    manifest = build_dataset(cfg.curation, count, out_dir, workers=cfg.workers)
    return {"out_dir": str(out_dir), "count": manifest["count"], "config_hash": manifest["config_hash"]}


def run_pretrain(cfg: RunConfig, dataset_dir, out_dir, data: PreparedData | None = None) -> dict:
    """Train the background-inpainting base and write ``base.npz``."""
    out = _run_dir(out_dir, cfg)
    base = build_base(cfg)
    model = base_decomposer(cfg, base)
    if data is None:
        data = prepare_data(model, _load_triplets(dataset_dir))
    result = train(model, data, cfg.pretrain, joint=False)
    write_loss_csv(out / "loss.csv", result.losses)
    val = validation_loss(model, data, joint=False)
    summary = {
        "iterations": len(result.losses),
        "seconds": result.seconds,
        "final_loss": result.losses[-1] if result.losses else None,
        "validation_loss": val,
        "dataset": str(dataset_dir),
    }
    summary["frozen_hash"] = ckpt.save_base(out / "base.npz", base, cfg.to_dict(), {"summary": summary})
    _dump(out / "pretrain.json", summary)
    return summary


def adapted_decomposer(cfg: RunConfig, base: Denoiser, use_fg_context: bool = True, use_mm: bool = True) -> Decomposer:
    den = prepare_for_decomposition(base, cfg.lora.rank, cfg.lora.alpha, cfg.lora.seed, cfg.lora.targets)
    fusion = build_fusion(cfg) if use_mm else None
    return Decomposer(den, fusion, PatchStateCodec(cfg.codec.patch), cfg.cues, use_fg_context, use_mm)


@torch.no_grad()
def background_identity_gap(base: Denoiser, model: Decomposer, data: PreparedData, n: int = 4) -> float:
    """Max |adapted - base| on the background-only pathway (``t = 0.5``, seeded noise)."""
    b = data.batch(slice(0, min(n, len(data))))
    gen = torch.Generator().manual_seed(VALIDATION_SEED)
    z = torch.randn(b.x_b.shape, generator=gen, dtype=model.dtype)
    t = torch.full((len(b),), 0.5, dtype=model.dtype)
    _, ref = base(None, assemble_inputs(None, z, None, b.ctx_b)[1], t, b.grid)
    c_mm = model.c_mm(b.cues, b.grid)
    _, got = model.denoiser(None, assemble_inputs(None, z, None, b.ctx_b, c_mm)[1], t, b.grid)
    return float((got - ref).abs().max())


def run_adapt(
    cfg: RunConfig,
    base_path,
    dataset_dir,
    out_dir,
    use_fg_context: bool = True,
    use_mm: bool = True,
    expected_base_hash: str | None = None,
    data: PreparedData | None = None,
) -> dict:
    """LoRA + input projection + fusion training for decomposition; writes ``adapted.npz``."""
    out = _run_dir(out_dir, cfg)
    base, meta = ckpt.load_base(base_path)
    if expected_base_hash is not None and expected_base_hash != meta["frozen_hash"]:
        raise CheckpointError(
            f"base checkpoint hash {meta['frozen_hash'][:12]} does not match expected {expected_base_hash[:12]}"
        )
    if base.cfg.d_state != cfg.denoiser.d_state or base.cfg.d_model != cfg.denoiser.d_model:
        raise CheckpointError("base checkpoint was trained with a different denoiser configuration")
    model = adapted_decomposer(cfg, base, use_fg_context, use_mm)
    trainable = sum(p.numel() for p in model.parameters())
    _, total_den = parameter_counts(model.denoiser)
    total = total_den + (sum(p.numel() for p in model.fusion.parameters()) if model.fusion is not None else 0)
    ratio = trainable / total
    if ratio > cfg.lora.max_trainable_ratio:
        raise ConfigError(
            f"lora.max_trainable_ratio: trainable fraction {ratio:.3f} exceeds ceiling {cfg.lora.max_trainable_ratio}"
        )
    if data is None:
        data = prepare_data(model, _load_triplets(dataset_dir))
    gap = background_identity_gap(base, model, data)
    pre = frozen_hash(model.denoiser)
    if pre != meta["frozen_hash"]:
        raise CheckpointError("adapted model's frozen weights differ from the base checkpoint")
    result = train(model, data, cfg.adapt, joint=True)
    post = frozen_hash(model.denoiser)
    if post != pre:
        raise CheckpointError(f"frozen-base hash changed during adaptation ({pre[:12]} -> {post[:12]})")
    write_loss_csv(out / "loss.csv", result.losses)
    summary = {
        "iterations": len(result.losses),
        "seconds": result.seconds,
        "final_loss": result.losses[-1] if result.losses else None,
        "validation_loss": validation_loss(model, data, joint=True),
        "trainable_parameters": trainable,
        "total_parameters": total,
        "trainable_ratio": ratio,
        "max_trainable_ratio": cfg.lora.max_trainable_ratio,
        "step0_background_gap": gap,
        "frozen_hash_pre": pre,
        "frozen_hash_post": post,
        "use_fg_context": use_fg_context,
        "use_mm": use_mm,
        "base": str(base_path),
    }
    ckpt.save_adapted(
        out / "adapted.npz", model, cfg.lora.rank, cfg.lora.alpha, cfg.lora.seed, cfg.lora.targets,
        cfg.to_dict(), {"summary": summary},
    )
    _dump(out / "adapt.json", summary)
    return summary


def run_decompose(checkpoint_path, image_path, mask_path, out_dir, steps: int = 20, seed: int = 0,
                  cue_dir=None) -> dict:
    out = _run_dir(out_dir, None)
    t0 = time.perf_counter()
    model, _ = ckpt.load_adapted(checkpoint_path)
    t_load = time.perf_counter() - t0
    img = read_rgb(image_path)
    mask = read_mask(mask_path)
    if img.shape[:2] != mask.shape:
        raise InvalidInputError(f"image {img.shape[:2]} and mask {mask.shape} differ in size")
    H, W = img.shape[:2]
    p = model.patch
    if H % p or W % p:
        raise InvalidInputError(f"image size {H}x{W} must be divisible by {p}")
    overrides = load_sidecars(cue_dir) if cue_dir else None
    t1 = time.perf_counter()
    fg, bg = decompose(model, img, mask, steps=steps, seed=seed, cue_overrides=overrides)
    t_run = time.perf_counter() - t1
    write_png(out / "fg.png", fg)
    write_png(out / "bg.png", bg)
    sidecar = {
        "checkpoint": str(checkpoint_path),
        "image": str(image_path),
        "mask": str(mask_path),
        "seed": seed,
        "steps": steps,
        "timings": {"load_seconds": t_load, "decompose_seconds": t_run},
    }
    _dump(out / "decompose.json", sidecar)
    return sidecar


def run_eval(cfg: RunConfig, checkpoint_path, dataset_dir, out_dir, split: str | None = None,
             ground_truth: bool = False) -> dict:
    """Background-layer PSNR / SSIM / FID over a dataset split.

    ``ground_truth=True`` scores the reference backgrounds against themselves
    (no checkpoint needed), a sanity baseline for the harness.
    """
    out = _run_dir(out_dir, cfg)
    triplets = _load_triplets(dataset_dir)
    idx = parse_split(split, len(triplets))
    if not idx:
        raise InvalidInputError(f"split {split!r} selects no samples")
    triplets = [triplets[i] for i in idx]
    refs = [t.gt_background for t in triplets]
    if ground_truth:
        preds = refs
        source = "ground-truth"
    else:
        if checkpoint_path is None:
            raise ConfigError("eval: a checkpoint is required unless --ground-truth is given")
        model, _ = ckpt.load_adapted(checkpoint_path)
        data = prepare_data(model, triplets)
        _, preds = decompose_batch(model, data, steps=cfg.metrics.steps, seed=cfg.metrics.seed)
        source = str(checkpoint_path)
    m = cfg.metrics
    features = RandomProjectionFeatures(m.feature_dim, m.feature_size, m.feature_seed)
    report = evaluate_backgrounds(
        preds, refs, features,
        config={"source": source, "dataset": str(dataset_dir), "split": split, "indices": idx,
                "steps": m.steps, "seed": m.seed},
    )
    (out / "eval.json").write_text(report.to_json() + "\n")
    (out / "eval.txt").write_text(report.table())
    return report.to_dict()


def run_probe(cfg: RunConfig, out_dir) -> dict:
    """Read-stage cost sweep over the configured cue-token counts."""
    out = _run_dir(out_dir, cfg)
    fusion = build_fusion(cfg)
    pc = cfg.probe
    rows = complexity_probe(fusion, pc.k_values, n_tok=pc.n_tok, batch=pc.batch, repeats=pc.repeats, seed=cfg.seed)
    cols = ["K", "wall_time", "read_flops", "latent_flops", "write_flops"]
    with open(out / "probe.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    ks = [r["K"] for r in rows]
    summary = {
        "k_values": ks,
        "time_slope": loglog_slope(ks, [r["wall_time"] for r in rows]) if len(rows) > 1 else None,
        "flop_slope": loglog_slope(ks, [r["read_flops"] for r in rows]) if len(rows) > 1 else None,
        "n_latents": cfg.fusion.n_latents,
        "n_tok": pc.n_tok,
    }
    _dump(out / "probe.json", summary)
    lines = [f"{'K':>8}{'wall_time_s':>14}{'read_flops':>14}"]
    lines += [f"{r['K']:>8}{r['wall_time']:>14.6f}{r['read_flops']:>14}" for r in rows]
    if summary["time_slope"] is not None:
        lines.append(f"log-log slope (time vs K): {summary['time_slope']:.3f}")
    (out / "probe.txt").write_text("\n".join(lines) + "\n")
    return summary
