"""Synthetic triplet curation: composite, imperfect mask, RGBA foreground, clean background."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from . import imaging
from .errors import ConfigError, CurationError, InvalidInputError
from .imaging import ALPHA_THRESHOLD, Placement

log = logging.getLogger(__name__)

MAX_PLACEMENT_RETRIES = 50
MAX_MASK_ATTEMPTS = 100


@dataclass
class MaskPerturbConfig:
    enabled: bool = True
    dilate_px_range: tuple[int, int] = (0, 2)
    erode_px_range: tuple[int, int] = (0, 2)
    boundary_noise_amplitude: float = 0.15
    min_mask_iou: float = 0.6

    def validate(self):
        if not 0 < self.min_mask_iou <= 1:
            raise ConfigError(f"mask_perturb.min_mask_iou must be in (0, 1], got {self.min_mask_iou}")
        for name in ("dilate_px_range", "erode_px_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"mask_perturb.{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if not 0 <= self.boundary_noise_amplitude <= 1:
            raise ConfigError("mask_perturb.boundary_noise_amplitude must be in [0, 1]")


@dataclass
class CurationConfig:
    n_objects_range: tuple[int, int] = (1, 3)
    max_objects: int = 3
    scale_range: tuple[float, float] = (0.6, 1.0)
    fg_size: int = 32
    canvas_size: int = 64
    seed: int = 0
    target_all_prob: float = 0.5
    # chance that sampled z-orders may put a non-target in front of a target;
    # otherwise targets are the nearest layers and alpha_over(gt_fg, gt_bg) == composite
    occluded_target_prob: float = 0.0
    foreground_source: str = "procedural"
    background_source: str = "procedural"
    fg_asset_dir: str | None = None
    bg_asset_dir: str | None = None
    mask_perturb: MaskPerturbConfig = field(default_factory=MaskPerturbConfig)

    def validate(self):
        lo, hi = self.n_objects_range
        if not 1 <= lo <= hi <= self.max_objects:
            raise ConfigError(
                f"n_objects_range {self.n_objects_range} must lie within [1, {self.max_objects}]"
            )
        s0, s1 = self.scale_range
        if not 0 < s0 <= s1:
            raise ConfigError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if not 0 <= self.target_all_prob <= 1 or not 0 <= self.occluded_target_prob <= 1:
            raise ConfigError("target_all_prob and occluded_target_prob must be in [0, 1]")
        if self.fg_size < 8:
            raise ConfigError("fg_size must be >= 8")
        if self.canvas_size < 8:
            raise ConfigError("canvas_size must be >= 8")
        for name in ("foreground_source", "background_source"):
            if getattr(self, name) not in ("procedural", "asset_directory"):
                raise ConfigError(f"{name} must be 'procedural' or 'asset_directory'")
        if self.foreground_source == "asset_directory" and not self.fg_asset_dir:
            raise ConfigError("foreground_source=asset_directory requires fg_asset_dir")
        if self.background_source == "asset_directory" and not self.bg_asset_dir:
            raise ConfigError("background_source=asset_directory requires bg_asset_dir")
        self.mask_perturb.validate()
        return self


@dataclass
class TrainingTriplet:
    composite: np.ndarray
    mask: np.ndarray
    gt_foreground: np.ndarray
    gt_background: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def footprint(self) -> np.ndarray:
        """Exact (unperturbed) target footprint, thresholded at ``ALPHA_THRESHOLD``."""
        return (self.gt_foreground[..., 3] > ALPHA_THRESHOLD).astype(np.float64)


# -- procedural assets -------------------------------------------------------

def _smooth_noise(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    n -= n.min()
    return n / max(n.max(), 1e-12)


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    c0, c1 = rng.uniform(0.05, 0.95, size=(2, 3))
    if rng.random() < 0.5:
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
        t = np.cos(theta) * xx + np.sin(theta) * yy
        t = (t - t.min()) / max(np.ptp(t), 1e-12)
    else:
        t = _smooth_noise(rng, h, w, sigma=max(h, w) / 8)
    return np.clip(c0 + t[..., None] * (c1 - c0), 0.0, 1.0)


def _star_radius(rng: np.random.Generator, kind: str, rmax: float):
    """Return ``r(theta)`` for a star-shaped primitive bounded by ``rmax``."""
    if kind == "ellipse":
        a, b = rng.uniform(0.5, 1.0, 2) * rmax
        rot = rng.uniform(0, np.pi)
        return lambda th: a * b / np.sqrt((b * np.cos(th - rot)) ** 2 + (a * np.sin(th - rot)) ** 2)
    if kind == "blob":
        k = np.arange(2, 6)
        amp = rng.uniform(0.0, 0.12, k.size)
        ph = rng.uniform(0, 2 * np.pi, k.size)
        base = rmax / (1 + amp.sum())
        return lambda th: base * (1 + (amp * np.cos(np.multiply.outer(th, k) + ph)).sum(-1))
    # polygon: piecewise-linear radius between random vertices
    nv = int(rng.integers(3, 8))
    ang = np.sort(rng.uniform(0, 2 * np.pi, nv))
    rad = rng.uniform(0.55, 1.0, nv) * rmax
    ang_c = np.concatenate([ang - 2 * np.pi, ang, ang + 2 * np.pi])
    rad_c = np.tile(rad, 3)
    return lambda th: np.interp(np.mod(th, 2 * np.pi), ang_c, rad_c)


def procedural_foreground(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random union of ellipses / blobs / polygons with anti-aliased alpha.

    The shape stays strictly inside a 3 px frame, so the border is transparent.
    """
    if size < 8:
        raise InvalidInputError(f"procedural_foreground: size must be >= 8, got {size}")
    ss = 4
    n = size * ss
    yy, xx = (np.mgrid[0:n, 0:n] + 0.5) / ss
    margin = 3.0
    inside = np.zeros((n, n), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        kind = rng.choice(["ellipse", "blob", "polygon"])
        rmax = rng.uniform(0.25, 0.5) * (size / 2 - margin)
        cx, cy = rng.uniform(margin + rmax, size - margin - rmax, 2)
        r_of = _star_radius(rng, str(kind), rmax)
        dx, dy = xx - cx, yy - cy
        inside |= np.hypot(dx, dy) <= r_of(np.arctan2(dy, dx))
    alpha = inside.reshape(size, ss, size, ss).mean(axis=(1, 3))
    alpha = ndimage.gaussian_filter(alpha, 0.5)
    alpha[alpha < 1e-3] = 0.0
    alpha[[0, -1], :] = 0.0
    alpha[:, [0, -1]] = 0.0
    rgb = _texture(rng, size, size) * (alpha[..., None] > 0)
    return np.concatenate([rgb, np.clip(alpha, 0, 1)[..., None]], axis=-1)


def procedural_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth scene-like plate: two-colour gradient plus low-frequency variation."""
    base = _texture(rng, size, size)
    if rng.random() < 0.5:
        # horizon split with a second texture below a wavy line
        lower = _texture(rng, size, size)
        xs = np.arange(size)
        line = size * rng.uniform(0.35, 0.7) + rng.uniform(0, 3) * np.sin(
            xs / size * 2 * np.pi * rng.uniform(0.5, 2) + rng.uniform(0, 6)
        )
        below = np.arange(size)[:, None] > line[None, :]
        base = np.where(below[..., None], lower, base)
        base = ndimage.gaussian_filter(base, (0.7, 0.7, 0))
    shade = _smooth_noise(rng, size, size, sigma=size / 6)
    return np.clip(base * (0.85 + 0.15 * shade[..., None]), 0.0, 1.0)


# -- asset directories ------------------------------------------------------------

def _list_pngs(directory: str) -> list[Path]:
    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise ConfigError(f"no PNG assets found in {directory}")
    return files


def _asset_foreground(rng, directory: str, size: int) -> np.ndarray:
    files = _list_pngs(directory)
    img = imaging.read_rgba(files[int(rng.integers(len(files)))])
    s = size / max(img.shape[:2])
    return imaging.resample(img, s) if s != 1.0 else img


def _asset_background(rng, directory: str, size: int) -> np.ndarray:
    files = _list_pngs(directory)
    img = imaging.read_rgb(files[int(rng.integers(len(files)))])
    img = imaging.resample(img, size / min(img.shape[:2]))
    y0 = (img.shape[0] - size) // 2
    x0 = (img.shape[1] - size) // 2
    return img[y0 : y0 + size, x0 : x0 + size].copy()


# -- masks -------------------------------------------------------------------

def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius**2


def perturb_mask(exact: np.ndarray, rng: np.random.Generator, cfg: CurationConfig) -> np.ndarray:
    """Morphologically distort ``exact`` and jitter its boundary, keeping IoU bounded."""
    exact_b = np.asarray(exact) > 0
    if not exact_b.any():
        raise InvalidInputError("perturb_mask: exact mask is empty")
    mp = cfg.mask_perturb
    kinds = [k for k, rng_ in (("dilate", mp.dilate_px_range), ("erode", mp.erode_px_range)) if rng_[1] > 0]
    for _ in range(MAX_MASK_ATTEMPTS):
        m = exact_b.copy()
        if kinds:
            kind = kinds[int(rng.integers(len(kinds)))]
            lo, hi = mp.dilate_px_range if kind == "dilate" else mp.erode_px_range
            radius = int(rng.integers(lo, hi + 1))
            if radius > 0:
                op = ndimage.binary_dilation if kind == "dilate" else ndimage.binary_erosion
                m = op(m, structure=_disk(radius))
        if mp.boundary_noise_amplitude > 0:
            band = ndimage.binary_dilation(m) & ~ndimage.binary_erosion(m)
            m = m ^ (band & (rng.random(m.shape) < mp.boundary_noise_amplitude))
        if m.any() and imaging.iou(m, exact_b) >= mp.min_mask_iou:
            return m.astype(np.float64)
    raise ConfigError(
        f"perturb_mask: could not reach IoU >= {mp.min_mask_iou} in {MAX_MASK_ATTEMPTS} attempts"
    )


# -- triplets ------------------------------------------------------------------

def _sample_placement(rng, fg: np.ndarray, cfg: CurationConfig, z: int) -> Placement:
    H = W = cfg.canvas_size
    for _ in range(MAX_PLACEMENT_RETRIES):
        scale = float(rng.uniform(*cfg.scale_range))
        h, w = (int(round(d * scale)) for d in fg.shape[:2])
        if h < 1 or w < 1:
            continue
        ox = int(rng.integers(-w // 4, W - (3 * w) // 4 + 1))
        oy = int(rng.integers(-h // 4, H - (3 * h) // 4 + 1))
        pl = Placement(scale=scale, offset_x=ox, offset_y=oy, z_order=z)
        try:
            placed = imaging.place_layer(fg, pl, (H, W))
        except InvalidInputError:
            continue
        if (placed[..., 3] > ALPHA_THRESHOLD).any():
            return pl
    raise CurationError("placement retries exhausted: every sampled placement was off-canvas")


def _sample_z_orders(rng, n: int, targets: Sequence[int], occluded_prob: float) -> np.ndarray:
    """Random depth order; unless the occluded-target draw fires, targets sit above all others."""
    if rng.random() < occluded_prob:
        return rng.permutation(n)
    others = [i for i in range(n) if i not in targets]
    order = list(rng.permutation(others)) + list(rng.permutation(list(targets)))
    z = np.empty(n, dtype=int)
    z[np.asarray(order, dtype=int)] = np.arange(n)
    return z


def _composite_rgba(layers: Sequence[tuple[np.ndarray, Placement]], hw: tuple[int, int]) -> np.ndarray:
    out = imaging.transparent(*hw)
    for img, pl in sorted(layers, key=lambda item: item[1].z_order):
        out = imaging.over_rgba(imaging.place_layer(img, pl, hw), out)
    return out


def make_triplet(
    bg: np.ndarray,
    fgs: Sequence[np.ndarray],
    rng: np.random.Generator,
    cfg: CurationConfig,
    placements: Sequence[Placement] | None = None,
    targets: Sequence[int] | None = None,
) -> TrainingTriplet:
    """Compose one training sample.

    ``placements`` and ``targets`` are sampled when not given; passing them
    pins the scene layout (useful for constructing specific occlusions).
    """
    bg = imaging.as_rgb(bg)
    if not 1 <= len(fgs) <= cfg.max_objects:
        raise InvalidInputError(f"make_triplet: need 1..{cfg.max_objects} foregrounds, got {len(fgs)}")
    hw = bg.shape[:2]
    n = len(fgs)
    if targets is None:
        if n > 1 and rng.random() < cfg.target_all_prob:
            targets = list(range(n))
        else:
            targets = [int(rng.integers(n))]
    targets = sorted(set(int(t) for t in targets))
    if placements is None:
        z = _sample_z_orders(rng, n, targets, cfg.occluded_target_prob)
        placements = [_sample_placement(rng, fg, cfg, int(z[i])) for i, fg in enumerate(fgs)]
    layers = list(zip(fgs, placements))
    target_layers = [layers[i] for i in targets]
    others = [layers[i] for i in range(n) if i not in targets]

    composite, _, _ = imaging.stack_layers(layers, bg)
    gt_background, _, _ = imaging.stack_layers(others, bg)
    gt_foreground = _composite_rgba(target_layers, hw)
    exact = gt_foreground[..., 3] > ALPHA_THRESHOLD
    if not exact.any():
        raise CurationError("target footprint is empty after placement")

    occlusion = _occlusion(target_layers, others, hw)

    if cfg.mask_perturb.enabled:
        mask = perturb_mask(exact, rng, cfg)
    else:
        mask = exact.astype(np.float64)

    meta = {
        "placements": [asdict(p) for p in placements],
        "targets": targets,
        "n_objects": n,
        "mask_iou": imaging.iou(mask, exact),
        "occlusion_pixels": int(occlusion.sum()),
    }
    return TrainingTriplet(composite, mask, gt_foreground, gt_background, meta)


def _occlusion(target_layers, others, hw) -> np.ndarray:
    """Pixels where a nearer non-target layer overlaps a target (both alpha > 0)."""
    zone = np.zeros(hw, dtype=bool)
    for t_img, t_pl in target_layers:
        t_alpha = imaging.place_layer(t_img, t_pl, hw)[..., 3] > 0
        for o_img, o_pl in others:
            if o_pl.z_order > t_pl.z_order:
                zone |= t_alpha & (imaging.place_layer(o_img, o_pl, hw)[..., 3] > 0)
    return zone


def occlusion_zone(triplet: TrainingTriplet, fgs: Sequence[np.ndarray]) -> np.ndarray:
    """Recompute the occlusion map of a generated triplet from its foregrounds."""
    hw = triplet.composite.shape[:2]
    placements = [Placement(**p) for p in triplet.meta["placements"]]
    targets = set(triplet.meta["targets"])
    layers = list(zip(fgs, placements))
    return _occlusion(
        [layers[i] for i in sorted(targets)],
        [layers[i] for i in range(len(layers)) if i not in targets],
        hw,
    )


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def sample_scene(rng: np.random.Generator, cfg: CurationConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    """Draw a background and 1..k foregrounds from the configured sources."""
    lo, hi = cfg.n_objects_range
    n = int(rng.integers(lo, hi + 1))
    if cfg.background_source == "procedural":
        bg = procedural_background(rng, cfg.canvas_size)
    else:
        bg = _asset_background(rng, cfg.bg_asset_dir, cfg.canvas_size)
    fgs = []
    for _ in range(n):
        if cfg.foreground_source == "procedural":
            fgs.append(procedural_foreground(rng, cfg.fg_size))
        else:
            fgs.append(_asset_foreground(rng, cfg.fg_asset_dir, cfg.fg_size))
    return bg, fgs


def generate_sample(cfg: CurationConfig, index: int) -> TrainingTriplet:
    rng = sample_rng(cfg.seed, index)
    bg, fgs = sample_scene(rng, cfg)
    trip = make_triplet(bg, fgs, rng, cfg)
    trip.meta.update({"index": index, "seed": [cfg.seed, index]})
    return trip


# -- dataset on disk -----------------------------------------------------------------

def config_to_dict(cfg: CurationConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def config_hash(cfg: CurationConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_triplet(sample_dir: Path, trip: TrainingTriplet) -> None:
    sample_dir.mkdir(parents=True, exist_ok=True)
    imaging.write_png(sample_dir / "composite.png", trip.composite)
    imaging.write_png(sample_dir / "mask.png", trip.mask)
    imaging.write_png(sample_dir / "fg.png", trip.gt_foreground)
    imaging.write_png(sample_dir / "bg.png", trip.gt_background)
    _dump_json(sample_dir / "meta.json", trip.meta)


def _build_one(args) -> dict:
    cfg, index, out_dir = args
    try:
        trip = generate_sample(cfg, index)
        write_triplet(Path(out_dir) / f"{index:06d}", trip)
    except OSError as exc:
        raise CurationError(f"sample {index}: I/O failure: {exc}") from exc
    except CurationError as exc:
        raise CurationError(f"sample {index}: {exc}") from exc
    return {
        "index": index,
        "dir": f"{index:06d}",
        "seed": [cfg.seed, index],
        "n_objects": trip.meta["n_objects"],
        "targets": trip.meta["targets"],
    }


def build_dataset(cfg: CurationConfig, count: int, out_dir: str | Path, workers: int = 1) -> dict:
    """Write ``count`` triplets plus ``manifest.json`` under ``out_dir``."""
    cfg.validate()
    if count < 0:
        raise ConfigError("count must be >= 0")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CurationError(f"cannot create {out}: {exc}") from exc
    jobs = [(cfg, i, str(out)) for i in range(count)]
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_build_one, jobs))
    else:
        records = [_build_one(j) for j in jobs]
    manifest = {
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "count": count,
        "samples": records,
    }
    _dump_json(out / "manifest.json", manifest)
    log.info("wrote %d triplets to %s", count, out)
    return manifest


def load_triplet(sample_dir: str | Path) -> TrainingTriplet:
    d = Path(sample_dir)
    return TrainingTriplet(
        composite=imaging.read_rgb(d / "composite.png"),
        mask=imaging.read_mask(d / "mask.png"),
        gt_foreground=imaging.read_rgba(d / "fg.png"),
        gt_background=imaging.read_rgb(d / "bg.png"),
        meta=json.loads((d / "meta.json").read_text()),
    )


def load_dataset(out_dir: str | Path) -> list[TrainingTriplet]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    return [load_triplet(out / rec["dir"]) for rec in manifest["samples"]]
