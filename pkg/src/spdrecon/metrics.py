"""Image and video quality metrics.

Flux images are compared after dividing both by the ground-truth maximum,
so PSNR uses ``peak=1`` and SSIM sees values in [0, 1].
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InputDomainError
from .flow import warp_bilinear

CSV_COLUMNS = ("method", "ppp", "frame", "psnr", "ssim", "tv", "temporal")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputDomainError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(reference, test, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; ``inf`` for identical inputs."""
    a, b = _pair(reference, test)
    if not peak > 0:
        raise InputDomainError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    lo = k // 2
    hi_r = img.shape[0] - (k - 1 - lo)
    hi_c = img.shape[1] - (k - 1 - lo)
    return out[lo:hi_r, lo:hi_c]


def ssim(
    reference,
    test,
    *,
    data_range: float = 1.0,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over valid positions."""
    a, b = _pair(reference, test)
    if a.ndim != 2 or min(a.shape) < window_size:
        raise InputDomainError(
            f"SSIM needs 2-D images of at least {window_size}x{window_size}, got {a.shape}"
        )
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    g = gaussian_window(window_size, sigma)
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def total_variation(image) -> float:
    """Anisotropic TV: sum of absolute forward differences along both axes."""
    img = np.asarray(image, dtype=np.float64)
    return float(np.abs(np.diff(img, axis=0)).sum() + np.abs(np.diff(img, axis=1)).sum())


def temporal_consistency(video, flows) -> float:
    """Mean masked ``|frame_k - warp(frame_{k+1}, flows[k])|`` over consecutive pairs."""
    video = np.asarray(video, dtype=np.float64)
    if len(flows) != video.shape[0] - 1:
        raise InputDomainError(
            f"need {video.shape[0] - 1} flows for {video.shape[0]} frames, got {len(flows)}"
        )
    if video.shape[0] < 2:
        return 0.0
    scores = []
    for k, flow in enumerate(flows):
        warped, valid = warp_bilinear(video[k + 1], flow)
        if valid.any():
            scores.append(float(np.abs(video[k] - warped)[valid].mean()))
        else:
            scores.append(0.0)
    return float(np.mean(scores))


def normalize_pair(truth, estimate) -> tuple[np.ndarray, np.ndarray]:
    """Scale both by the ground-truth maximum and clamp to [0, 1]."""
    truth = np.asarray(truth, dtype=np.float64)
    peak = float(truth.max())
    if peak <= 0:
        raise InputDomainError("ground truth is all zero; cannot normalize")
    return np.clip(truth / peak, 0, 1), np.clip(np.asarray(estimate, dtype=np.float64) / peak, 0, 1)


@dataclass
class MetricRow:
    method: str
    ppp: float
    frame: int
    psnr: float
    ssim: float
    tv: float
    temporal: float | None = None


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    parameters: dict = field(default_factory=dict)

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def mean(self, method: str, ppp: float | None = None) -> dict:
        sel = [r for r in self.rows if r.method == method and (ppp is None or r.ppp == ppp)]
        if not sel:
            return {"psnr": math.nan, "ssim": math.nan}
        return {
            "psnr": float(np.mean([r.psnr for r in sel])),
            "ssim": float(np.mean([r.ssim for r in sel])),
        }

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            if isinstance(v, float) and math.isnan(v):
                return None
            return v

        rows = [{k: clean(v) for k, v in asdict(r).items()} for r in self.rows]
        methods = sorted({r.method for r in self.rows})
        summary = {m: {k: clean(v) for k, v in self.mean(m).items()} for m in methods}
        return json.dumps({"parameters": self.parameters, "rows": rows, "mean": summary}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(
                [
                    r.method,
                    repr(float(r.ppp)),
                    r.frame,
                    f"{r.psnr:.6f}",
                    f"{r.ssim:.6f}",
                    f"{r.tv:.6f}",
                    "" if r.temporal is None else f"{r.temporal:.6f}",
                ]
            )
        return buf.getvalue()
