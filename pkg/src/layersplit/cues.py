"""Multi-modal cue maps (edge, segmentation, depth) behind a provider interface.

Classical stand-ins are used for every cue so the package carries no
pre-trained weights; externally computed maps can be dropped into
``sample_dir/cues/{edge,seg,depth}.png`` and are picked up instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import imaging
from .errors import ConfigError, InvalidInputError, LayersplitError

CUE_NAMES = ("edge", "segmentation", "depth")
_SIDECAR_FILES = {"edge": "edge.png", "segmentation": "seg.png", "depth": "depth.png"}

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class CueConfig:
    canny_sigma: float = 1.0
    canny_low: float = 0.1
    canny_high: float = 0.2
    seg_k: int = 6
    seg_iters: int = 20
    depth_sigma: float = 2.0
    seed: int = 0

    def validate(self):
        if not 0 <= self.canny_low < self.canny_high:
            raise ConfigError("cues: need 0 <= canny_low < canny_high")
        if not self.canny_sigma > 0:
            raise ConfigError("cues: canny_sigma must be > 0")
        if not 2 <= self.seg_k <= 32:
            raise ConfigError("cues: seg_k must be in [2, 32]")
        return self


@dataclass
class CueStack:
    edge: np.ndarray
    segmentation: np.ndarray
    depth: np.ndarray
    provenance: dict[str, str] = field(default_factory=dict)

    def maps(self) -> list[np.ndarray]:
        return [self.edge, self.segmentation, self.depth]


def luminance(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64)[..., :3] @ LUMA


# -- edges ------------------------------------------------------------------------

def _nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Non-maximum suppression along the quantised gradient direction.

    Ties are broken towards the forward neighbour (``>=`` ahead, ``>``
    behind) so a symmetric ridge yields a one-pixel-wide line.
    """
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    padded = np.pad(mag, 1, mode="constant")
    H, W = mag.shape

    def shifted(dy, dx):
        return padded[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]

    out = np.zeros_like(mag)
    bins = [
        ((angle < 22.5) | (angle >= 157.5), (0, 1)),
        ((angle >= 22.5) & (angle < 67.5), (1, 1)),
        ((angle >= 67.5) & (angle < 112.5), (1, 0)),
        ((angle >= 112.5) & (angle < 157.5), (1, -1)),
    ]
    for sel, (dy, dx) in bins:
        ahead = shifted(dy, dx)
        behind = shifted(-dy, -dx)
        keep = sel & (mag >= ahead) & (mag > behind)
        out[keep] = mag[keep]
    return out


def canny_edges(img: np.ndarray, low: float = 0.1, high: float = 0.2, sigma: float = 1.0) -> np.ndarray:
    """Classical Canny on luminance.

    Thresholds apply to Sobel magnitudes scaled so that an unsmoothed 0 -> 1
    step has magnitude 1.
    """
    if not 0 <= low < high:
        raise ConfigError(f"canny: need 0 <= low < high, got low={low}, high={high}")
    if not sigma > 0:
        raise ConfigError(f"canny: sigma must be > 0, got {sigma}")
    gray = luminance(img) if np.ndim(img) == 3 else np.asarray(img, dtype=np.float64)
    smooth = ndimage.gaussian_filter(gray, sigma, mode="nearest")
    # Sobel / 4 maps an ideal unit step to magnitude 1
    gx = ndimage.sobel(smooth, axis=1, mode="nearest") / 4.0
    gy = ndimage.sobel(smooth, axis=0, mode="nearest") / 4.0
    mag = np.hypot(gx, gy)
    thin = _nms(mag, gx, gy)
    strong = thin >= high
    weak = thin >= low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros_like(gray)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels].astype(np.float64)


# -- segmentation ---------------------------------------------------------------------

def _kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iters: int) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from a k-means++ seeding over distinct rows of ``x``."""
    uniq = np.unique(x, axis=0)
    centers = [uniq[int(rng.integers(len(uniq)))]]
    for _ in range(1, k):
        d2 = np.min(((uniq[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        if d2.sum() == 0:
            break
        centers.append(uniq[int(rng.choice(len(uniq), p=d2 / d2.sum()))])
    centers = np.array(centers)
    labels = np.zeros(len(x), dtype=int)
    for _ in range(iters):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        for j in range(len(centers)):
            members = x[new == j]
            if len(members):
                centers[j] = members.mean(axis=0)
        if np.array_equal(new, labels):
            break
        labels = new
    labels = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    return labels, centers


def pseudo_segmentation(img: np.ndarray, k: int = 6, seed: int = 0, iters: int = 20) -> np.ndarray:
    """k-means colour clustering; labels ordered by descending cluster size.

    Returns integer labels in ``[0, k_eff)``; ``k_eff`` drops to the number of
    distinct colours when the image has fewer than ``k``.
    """
    if not 2 <= k <= 32:
        raise ConfigError(f"pseudo_segmentation: k must be in [2, 32], got {k}")
    img = imaging.as_rgb(img)
    H, W = img.shape[:2]
    x = img.reshape(-1, 3)
    n_colors = len(np.unique(x, axis=0))
    k_eff = min(k, n_colors)
    if k_eff == 1:
        return np.zeros((H, W), dtype=int)
    labels, _ = _kmeans(x, k_eff, np.random.default_rng(seed), iters)
    counts = np.bincount(labels, minlength=k_eff)
    # stable sort: size descending, then original index
    order = np.lexsort((np.arange(k_eff), -counts))
    remap = np.empty(k_eff, dtype=int)
    remap[order] = np.arange(k_eff)
    return remap[labels].reshape(H, W)


def segmentation_map(img: np.ndarray, k: int = 6, seed: int = 0, iters: int = 20) -> np.ndarray:
    """Label map scaled to [0, 1] by ``label / (k_eff - 1)``."""
    img = imaging.as_rgb(img)
    k_eff = min(k, len(np.unique(img.reshape(-1, 3), axis=0)))
    labels = pseudo_segmentation(img, k, seed, iters)
    if k_eff < 2:
        return labels.astype(np.float64)
    return labels.astype(np.float64) / (k_eff - 1)


# -- depth ----------------------------------------------------------------------

def depth_ramp(h: int, w: int) -> np.ndarray:
    if h == 1:
        return np.zeros((1, w))
    return np.repeat((np.arange(h) / (h - 1))[:, None], w, axis=1)


def pseudo_depth(img: np.ndarray, sigma: float = 2.0) -> np.ndarray:
    """Blurred luminance blended 50/50 with a top-to-bottom ramp, min-max normalised."""
    img = imaging.as_rgb(img)
    H, W = img.shape[:2]
    ramp = depth_ramp(H, W)
    blend = 0.5 * ndimage.gaussian_filter(luminance(img), sigma, mode="nearest") + 0.5 * ramp
    lo, hi = blend.min(), blend.max()
    if hi - lo <= 1e-12:
        return ramp
    return (blend - lo) / (hi - lo)


# -- providers ----------------------------------------------------------------

Provider = Callable[[np.ndarray], np.ndarray]


def default_providers(cfg: CueConfig) -> dict[str, tuple[str, Provider]]:
    return {
        "edge": (
            f"canny(sigma={cfg.canny_sigma},low={cfg.canny_low},high={cfg.canny_high})",
            lambda im: canny_edges(im, cfg.canny_low, cfg.canny_high, cfg.canny_sigma),
        ),
        "segmentation": (
            f"kmeans(k={cfg.seg_k},seed={cfg.seed})",
            lambda im: segmentation_map(im, cfg.seg_k, cfg.seed, cfg.seg_iters),
        ),
        "depth": (
            f"luma_ramp(sigma={cfg.depth_sigma})",
            lambda im: pseudo_depth(im, cfg.depth_sigma),
        ),
    }


def load_sidecars(sample_dir: str | Path) -> dict[str, np.ndarray]:
    """Read any precomputed ``cues/*.png`` maps present in ``sample_dir``."""
    cue_dir = Path(sample_dir) / "cues"
    found = {}
    for name, fname in _SIDECAR_FILES.items():
        path = cue_dir / fname
        if path.exists():
            found[name] = imaging.read_png(path, "L")
    return found


def cue_stack(
    img: np.ndarray,
    cfg: CueConfig | None = None,
    providers: dict[str, tuple[str, Provider]] | None = None,
    overrides: dict[str, np.ndarray] | None = None,
) -> CueStack:
    """Run all three providers on ``img``; ``overrides`` replace computed maps."""
    cfg = (cfg or CueConfig()).validate()
    img = imaging.as_rgb(img)
    providers = providers or default_providers(cfg)
    overrides = overrides or {}
    maps, prov = {}, {}
    for name in CUE_NAMES:
        if name in overrides:
            out = np.asarray(overrides[name], dtype=np.float64)
            prov[name] = "sidecar"
        else:
            pid, fn = providers[name]
            try:
                out = np.asarray(fn(img), dtype=np.float64)
            except LayersplitError:
                raise
            except Exception as exc:
                raise LayersplitError(f"cue provider '{name}' failed: {exc}") from exc
            prov[name] = pid
        if out.shape != img.shape[:2]:
            raise InvalidInputError(f"cue '{name}' has shape {out.shape}, expected {img.shape[:2]}")
        maps[name] = np.clip(out, 0.0, 1.0)
    return CueStack(maps["edge"], maps["segmentation"], maps["depth"], prov)
