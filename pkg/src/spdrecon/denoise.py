"""Variance stabilization and single-image denoising.

The predenoiser runs in the variance-stabilized domain:
generalized Anscombe -> denoiser -> algebraic inverse -> flux units.
Any callable ``f(image, spec) -> image`` can stand in for
:func:`denoise_image`, which is how a learned model would be plugged in.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.ndimage import convolve, uniform_filter

from .errors import ConfigError, InputDomainError
from .sensor import SensorParams

KINDS = ("nlm", "tv")


@dataclass(frozen=True)
class DenoiserSpec:
    """Denoiser selection.

    ``strength`` is the NLM filtering parameter ``h`` or the TV weight, in
    the units of the image being filtered.  With ``noise_adaptive`` the
    predenoiser multiplies it by the noise level measured on the stabilized
    frame, which is about 1 for data that follows the sensor model and lower
    for cleaner inputs.
    """

    kind: str = "nlm"
    strength: float = 1.0
    patch_size: int = 5
    search_window: int = 11
    tv_max_iter: int = 200
    tv_tol: float = 1e-4
    noise_adaptive: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"denoiser kind must be one of {KINDS}, got {self.kind!r}")
        if not (self.strength >= 0 and np.isfinite(self.strength)):
            raise ConfigError(f"denoiser strength must be >= 0, got {self.strength}")
        for name in ("patch_size", "search_window"):
            v = getattr(self, name)
            if int(v) != v or v < 1 or v % 2 == 0 or v > 51:
                raise ConfigError(f"{name} must be an odd integer in [1, 51], got {v}")
        if self.tv_max_iter < 1 or not self.tv_tol > 0:
            raise ConfigError("tv_max_iter must be >= 1 and tv_tol > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DenoiserSpec:
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad denoiser spec: {exc}") from exc


def generalized_anscombe(x: np.ndarray, params: SensorParams, gain: float = 1.0) -> np.ndarray:
    """``2 * sqrt(max(g*x + 3/8*g**2 + sigma**2, 0)) / g`` with ``sigma`` the read noise."""
    x = np.asarray(x, dtype=np.float64)
    g = float(gain)
    s2 = params.read_noise_sigma ** 2
    return 2.0 * np.sqrt(np.maximum(g * x + 0.375 * g * g + s2, 0.0)) / g


def inverse_anscombe(z: np.ndarray, params: SensorParams, gain: float = 1.0) -> np.ndarray:
    """Algebraic inverse of :func:`generalized_anscombe`."""
    z = np.asarray(z, dtype=np.float64)
    g = float(gain)
    s2 = params.read_noise_sigma ** 2
    return ((0.5 * g * z) ** 2 - 0.375 * g * g - s2) / g


def _nlm(img: np.ndarray, spec: DenoiserSpec) -> np.ndarray:
    h2 = spec.strength ** 2
    r = spec.search_window // 2
    padded = np.pad(img, r, mode="reflect")
    H, W = img.shape
    num = np.zeros_like(img)
    den = np.zeros_like(img)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[r + dy : r + dy + H, r + dx : r + dx + W]
            d2 = uniform_filter((img - shifted) ** 2, size=spec.patch_size, mode="reflect")
            w = np.exp(-d2 / h2)
            num += w * shifted
            den += w
    return num / den


def _grad(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _div(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    d = np.zeros_like(px)
    d[:, 0] = px[:, 0]
    d[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    d[:, -1] = -px[:, -2]
    d[0, :] += py[0, :]
    d[1:-1, :] += py[1:-1, :] - py[:-2, :]
    d[-1, :] += -py[-2, :]
    return d


def _tv_chambolle(f: np.ndarray, spec: DenoiserSpec) -> np.ndarray:
    # Chambolle's dual projection for min_u |u - f|^2 / (2*lam) + TV(u)
    lam = spec.strength
    if f.shape[0] < 2 or f.shape[1] < 2:
        return f.copy()
    tau = 0.125
    px = np.zeros_like(f)
    py = np.zeros_like(f)
    u = f.copy()
    for _ in range(spec.tv_max_iter):
        gx, gy = _grad(_div(px, py) - f / lam)
        norm = np.sqrt(gx * gx + gy * gy)
        px = (px + tau * gx) / (1.0 + tau * norm)
        py = (py + tau * gy) / (1.0 + tau * norm)
        u_new = f - lam * _div(px, py)
        delta = np.max(np.abs(u_new - u))
        u = u_new
        if delta < spec.tv_tol:
            break
    return u


_LAPLACE_PAIR = np.array([[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]])


def estimate_noise_sigma(image: np.ndarray) -> float:
    """Standard deviation of additive white noise, from the mean absolute
    response to a difference-of-Laplacians kernel (Immerkaer's estimator)."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    if H < 3 or W < 3:
        return 0.0
    r = np.abs(convolve(img, _LAPLACE_PAIR))[1:-1, 1:-1]
    return float(np.sqrt(np.pi / 2) * r.sum() / (6.0 * (H - 2) * (W - 2)))


def denoise_image(image: np.ndarray, spec: DenoiserSpec) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise InputDomainError(f"denoise_image expects a 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InputDomainError("denoise_image input contains non-finite values")
    if spec.strength == 0 or img.size == 1:
        return img.copy()
    if spec.kind == "nlm":
        return _nlm(img, spec)
    return _tv_chambolle(img, spec)


def predenoise_frame(
    frame: np.ndarray, params: SensorParams, spec: DenoiserSpec, denoiser=denoise_image
) -> np.ndarray:
    """Single-frame denoise of a readout, returned in flux units (>= 0).

    ``frame`` is in readout units; integer quanta frames and real-valued
    pseudo-readouts (e.g. fused bursts) are both accepted.
    """
    frame = np.asarray(frame)
    if np.issubdtype(frame.dtype, np.integer) and frame.size and frame.max() > params.max_value:
        raise InputDomainError(
            f"frame value {int(frame.max())} exceeds the {params.n_bits}-bit range of the sensor"
        )
    z = generalized_anscombe(frame, params)
    if spec.noise_adaptive and spec.strength > 0:
        spec = replace(spec, strength=spec.strength * estimate_noise_sigma(z))
    z = denoiser(z, spec)
    e = inverse_anscombe(z, params)
    return np.maximum((e - params.dark_current) / params.qe, 0.0)
