"""Evaluation metrics. Everything here is numpy/scipy on [0, 1] images.

SSIM uses an 11-tap Gaussian window (sigma 1.5, truncated at 3.5 sigma,
reflect padding) with population covariances, and crops the filter
support margin before averaging.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_PSNR_CAP = 99.0


def l1_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).mean())


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    mse = float(((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2).mean())
    if mse == 0.0:
        return _PSNR_CAP
    return min(_PSNR_CAP, 10.0 * math.log10(max_val**2 / mse))


_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5
_SSIM_PAD = int(_SSIM_TRUNCATE * _SSIM_SIGMA + 0.5)  # 11-tap window


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    c1 = 0.01**2
    c2 = 0.03**2

    def f(img):
        return ndimage.gaussian_filter(img, _SSIM_SIGMA, mode="reflect",
                                       truncate=_SSIM_TRUNCATE)

    ux, uy = f(x), f(y)
    vx = f(x * x) - ux * ux
    vy = f(y * y) - uy * uy
    vxy = f(x * y) - ux * uy
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    p = _SSIM_PAD
    return float(s[p:-p, p:-p].mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM; channel planes are averaged. Accepts (H, W) or (C, H, W)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return _ssim_plane(a, b)
    return float(np.mean([_ssim_plane(a[c], b[c]) for c in range(a.shape[0])]))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def offset_recovery_cosines(pred: list[np.ndarray], true: list[np.ndarray]) -> list[float]:
    """Per-layer cosine between predicted and true deformation offsets."""
    if len(pred) != len(true):
        raise ValueError(f"layer count mismatch {len(pred)} vs {len(true)}")
    return [cosine(p, t) for p, t in zip(pred, true)]


def dispersion_ratio(w_by_identity: list[np.ndarray]) -> float:
    """Within-identity spread over across-identity spread of identity codes.

    Each entry holds the flattened codes of one identity, shape (N_i, K).
    """
    groups = [np.asarray(g, np.float64).reshape(len(g), -1) for g in w_by_identity]
    centroids = np.stack([g.mean(axis=0) for g in groups])
    within = float(np.mean([
        np.linalg.norm(g - c, axis=1).mean() for g, c in zip(groups, centroids)
    ]))
    overall = centroids.mean(axis=0)
    across = float(np.linalg.norm(centroids - overall, axis=1).mean())
    if across == 0.0:
        return float("inf") if within > 0 else 0.0
    return within / across


@dataclass
class MetricReport:
    l1: float | None = None
    psnr: float | None = None
    ssim: float | None = None
    id_cosine: float | None = None
    recovery_cosine: float | None = None
    dispersion_ratio: float | None = None
    pair_accuracy: float | None = None
    fps: float | None = None
    fid: float | None = None                    # reserved: needs a trained feature net
    fvd: float | None = None                    # reserved: needs a video feature net
    temporal_correlation: float | None = None   # reserved: needs landmark tracking
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if k == "extras":
                continue
            if v is not None:
                out[k] = v
        out.update(self.extras)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def table(self) -> str:
        rows = self.to_dict()
        if not rows:
            return "(no metrics)"
        width = max(len(k) for k in rows)
        lines = []
        for k, v in rows.items():
            sv = f"{v:.4f}" if isinstance(v, float) else str(v)
            lines.append(f"{k.ljust(width)}  {sv}")
        return "\n".join(lines)
