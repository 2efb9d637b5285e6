"""Background-layer quality metrics: PSNR, SSIM and FID."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg

from .errors import InvalidInputError

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
FID_EPS = 1e-6


def _pair(a, b, what: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak-1 PSNR in dB, capped at ``PSNR_CAP``; ``mask`` restricts to pixels where it is true."""
    a, b = _pair(a, b, "psnr")
    err = (a - b) ** 2
    if mask is not None:
        sel = np.asarray(mask, dtype=bool)
        if sel.shape != a.shape[:2]:
            raise InvalidInputError(f"psnr: mask shape {sel.shape} does not match image {a.shape[:2]}")
        if not sel.any():
            raise InvalidInputError("psnr: mask selects no pixels")
        err = err[sel]
    mse = float(err.mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Mean SSIM over all ``window x window`` positions (stride 1), averaged over channels.

    Local statistics are uniform-window population moments.
    """
    a, b = _pair(a, b, "ssim")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise InvalidInputError(f"ssim: image {a.shape[:2]} smaller than window {window}")
    vals = []
    for ch in range(a.shape[2]):
        wa = sliding_window_view(a[..., ch], (window, window))
        wb = sliding_window_view(b[..., ch], (window, window))
        mu_a = wa.mean(axis=(-1, -2))
        mu_b = wb.mean(axis=(-1, -2))
        var_a = (wa * wa).mean(axis=(-1, -2)) - mu_a * mu_a
        var_b = (wb * wb).mean(axis=(-1, -2)) - mu_b * mu_b
        cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# -- FID -----------------------------------------------------------------------

class RandomProjectionFeatures:
    """Seeded random projection of area-downsampled pixels.

    A desk-scale stand-in for Inception features: FID values computed with it
    are NOT comparable with published FID numbers.
    """

    name = "random-projection"

    def __init__(self, dim: int = 32, size: int = 16, seed: int = 0):
        self.dim, self.size, self.seed = dim, size, seed

    def _downsample(self, img: np.ndarray) -> np.ndarray:
        H, W = img.shape[:2]
        s = self.size
        if H % s or W % s:
            raise InvalidInputError(f"feature extractor needs sides divisible by {s}, got {H}x{W}")
        return img.reshape(s, H // s, s, W // s, -1).mean(axis=(1, 3))

    def __call__(self, images: Sequence[np.ndarray]) -> np.ndarray:
        flat = np.stack([self._downsample(np.asarray(im, np.float64)).reshape(-1) for im in images])
        rng = np.random.default_rng(self.seed)
        proj = rng.standard_normal((flat.shape[1], self.dim)) / np.sqrt(flat.shape[1])
        return flat @ proj

    def describe(self) -> str:
        return f"{self.name}(dim={self.dim},size={self.size},seed={self.seed}); not comparable to Inception FID"


def load_features(path: str) -> np.ndarray:
    """Precomputed ``(n, d)`` features from ``.npy`` (e.g. Inception pool features)."""
    return np.load(path)


def frechet_distance(mu_a, cov_a, mu_b, cov_b, eps: float = FID_EPS) -> float:
    diff = mu_a - mu_b
    covmean, _ = linalg.sqrtm(cov_a @ cov_b, disp=False)
    if not np.isfinite(covmean).all() or np.abs(np.imag(covmean)).max(initial=0) > 1e-3:
        warnings.warn(f"fid: covariance square root unstable; adding {eps:g}*I", RuntimeWarning)
        off = np.eye(cov_a.shape[0]) * eps
        covmean, _ = linalg.sqrtm((cov_a + off) @ (cov_b + off), disp=False)
    covmean = np.real(covmean)
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(covmean))
    return max(val, 0.0)


def _stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, np.float64)
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    cov = np.atleast_2d(cov)
    if len(feats) < feats.shape[1] + 1:
        cov = cov + np.eye(cov.shape[0]) * FID_EPS
    return mu, cov


def fid_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    if len(fa) < 2 or len(fb) < 2:
        raise InvalidInputError("fid: each corpus needs at least 2 samples")
    return frechet_distance(*_stats(fa), *_stats(fb))


def fid(set_a: Sequence[np.ndarray], set_b: Sequence[np.ndarray], features: Callable | None = None) -> float:
    features = features or RandomProjectionFeatures()
    return fid_from_features(features(set_a), features(set_b))


# -- reports -------------------------------------------------------------------

TABLE_COLUMNS = ("PSNR", "SSIM", "LPIPS", "FID")


@dataclass
class EvalReport:
    psnr: list[float]
    ssim: list[float]
    fid: float
    feature_extractor: str
    config: dict = field(default_factory=dict)
    note: str = "LPIPS omitted: requires pre-trained perceptual weights."

    @property
    def count(self) -> int:
        return len(self.psnr)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(count=self.count, mean_psnr=self.mean_psnr, mean_ssim=self.mean_ssim)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, method: str = "ours") -> str:
        header = f"{'Method':<12}" + "".join(f"{c:>10}" for c in TABLE_COLUMNS)
        row = (
            f"{method:<12}{self.mean_psnr:>10.2f}{self.mean_ssim:>10.3f}{'n/a':>10}{self.fid:>10.3f}"
        )
        return f"{header}\n{row}\n"


def evaluate_backgrounds(
    predicted: Sequence[np.ndarray],
    reference: Sequence[np.ndarray],
    features: Callable | None = None,
    config: dict | None = None,
) -> EvalReport:
    if len(predicted) != len(reference):
        raise InvalidInputError("evaluate: predicted and reference corpora differ in size")
    if not predicted:
        raise InvalidInputError("evaluate: empty split")
    features = features or RandomProjectionFeatures()
    return EvalReport(
        psnr=[psnr(p, r) for p, r in zip(predicted, reference)],
        ssim=[ssim(p, r) for p, r in zip(predicted, reference)],
        fid=fid(predicted, reference, features),
        feature_extractor=features.describe() if hasattr(features, "describe") else repr(features),
        config=config or {},
    )
