"""Poisson-Gaussian-ADC forward model of a single-photon detector.

Per pixel and frame::

    e ~ Poisson(qe * flux + dark_current)      photo + dark electrons
    e <- min(e, fwc)                           full-well saturation
    a  = e + Normal(0, read_noise_sigma**2)    readout chain
    Y  = clamp(round_half_away(a), 0, 2**n_bits - 1)

Flux is the quanta exposure: expected photo-electrons reaching the pixel per
frame before the quantum efficiency is applied.  PPP (photons per pixel) is
the mean of ``qe * flux`` over all pixels and frames and excludes dark counts.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputDomainError
from .rng import RngSeed, as_seed


@dataclass(frozen=True)
class SensorParams:
    qe: float
    dark_current: float
    read_noise_sigma: float
    n_bits: int
    fwc: int

    def __post_init__(self):
        if not 0.0 < self.qe <= 1.0:
            raise ConfigError(f"qe must lie in (0, 1], got {self.qe}")
        if not (self.dark_current >= 0.0 and math.isfinite(self.dark_current)):
            raise ConfigError(f"dark_current must be >= 0, got {self.dark_current}")
        if not (self.read_noise_sigma >= 0.0 and math.isfinite(self.read_noise_sigma)):
            raise ConfigError(f"read_noise_sigma must be >= 0, got {self.read_noise_sigma}")
        if int(self.n_bits) != self.n_bits or not 1 <= self.n_bits <= 32:
            raise ConfigError(f"n_bits must be an integer in [1, 32], got {self.n_bits}")
        if int(self.fwc) != self.fwc or self.fwc < self.max_value:
            raise ConfigError(
                f"fwc must be an integer >= 2**n_bits - 1 = {self.max_value}, got {self.fwc}"
            )

    @property
    def max_value(self) -> int:
        """ADC ceiling ``N = 2**n_bits - 1``."""
        return (1 << int(self.n_bits)) - 1

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.uint16 if self.n_bits <= 16 else np.uint32)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SensorParams:
        keys = ("qe", "dark_current", "read_noise_sigma", "n_bits", "fwc")
        missing = [k for k in keys if k not in d]
        if missing:
            raise ConfigError(f"sensor parameters missing keys: {', '.join(missing)}")
        try:
            return cls(
                qe=float(d["qe"]),
                dark_current=float(d["dark_current"]),
                read_noise_sigma=float(d["read_noise_sigma"]),
                n_bits=int(d["n_bits"]),
                fwc=int(d["fwc"]),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad sensor parameter value: {exc}") from exc


# 3-bit detector with the prototype's QE, dark current and read noise.
# Full well equals the ADC ceiling: the jot saturates where the counter does.
PRESETS: dict[str, SensorParams] = {
    "paper-spd": SensorParams(qe=0.80, dark_current=1.6, read_noise_sigma=0.2, n_bits=3, fwc=7),
    "spad-1bit": SensorParams(qe=0.80, dark_current=0.0, read_noise_sigma=0.0, n_bits=1, fwc=1),
}


def get_preset(name: str) -> SensorParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown sensor preset {name!r}; available presets: {', '.join(sorted(PRESETS))}"
        ) from None


def load_sensor_params(source: str | Path | dict) -> SensorParams:
    """Sensor parameters from a preset name, a JSON file path or a mapping."""
    if isinstance(source, dict):
        return SensorParams.from_dict(source)
    if isinstance(source, str) and source in PRESETS:
        return PRESETS[source]
    path = Path(source)
    if not path.exists():
        if isinstance(source, str) and not source.endswith(".json"):
            return get_preset(source)
        raise ConfigError(f"sensor parameter file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return SensorParams.from_dict(doc)


def check_flux(flux: np.ndarray, name: str = "flux") -> np.ndarray:
    flux = np.asarray(flux, dtype=np.float64)
    if flux.size == 0 or 0 in flux.shape:
        raise InputDomainError(f"{name} has zero size")
    bad = ~np.isfinite(flux) | (flux < 0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InputDomainError(
            f"{name} must be finite and non-negative; pixel {idx} has value {flux[idx]!r}"
        )
    return flux


def round_half_away(a: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(a) + 0.5), a)


def _sample(flux: np.ndarray, params: SensorParams, rng: np.random.Generator) -> np.ndarray:
    lam = params.qe * flux + params.dark_current
    # numpy's Poisson: inversion below mean 10, transformed rejection (PTRS) above
    e = rng.poisson(lam).astype(np.float64)
    np.minimum(e, params.fwc, out=e)
    if params.read_noise_sigma > 0:
        e += rng.normal(0.0, params.read_noise_sigma, size=e.shape)
    y = np.clip(round_half_away(e), 0, params.max_value)
    return y.astype(params.dtype)


def simulate_frame(flux: np.ndarray, params: SensorParams, seed: RngSeed | int) -> np.ndarray:
    """One quanta frame for a 2-D flux image."""
    flux = check_flux(flux)
    if flux.ndim != 2:
        raise InputDomainError(f"flux image must be 2-D, got shape {flux.shape}")
    return _sample(flux, params, as_seed(seed).generator())


def simulate_burst(video: np.ndarray, params: SensorParams, seed: RngSeed | int) -> np.ndarray:
    """Simulate every frame of ``video`` (N, H, W); frame ``i`` uses stream ``i``."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 3 or video.shape[0] == 0:
        raise InputDomainError(f"flux video must be a non-empty (N, H, W) array, got shape {video.shape}")
    seed = as_seed(seed)
    video = check_flux(video, "flux video")
    out = np.empty(video.shape, dtype=params.dtype)
    for i, frame in enumerate(video):
        out[i] = _sample(frame, params, seed.with_stream(i).generator())
    return out


def measured_ppp(video: np.ndarray, params: SensorParams) -> float:
    return float(params.qe * np.mean(video))


def scale_flux_to_ppp(video: np.ndarray, params: SensorParams, target_ppp: float) -> np.ndarray:
    """Rescale by one global factor so that mean(qe * flux) equals ``target_ppp``."""
    if not (target_ppp > 0 and math.isfinite(target_ppp)):
        raise InputDomainError(f"target_ppp must be positive, got {target_ppp}")
    video = check_flux(video, "flux video")
    current = measured_ppp(video, params)
    if current <= 0:
        raise InputDomainError("cannot scale an all-zero video to a target PPP")
    scaled = video * (target_ppp / current)
    return scaled


def synthetic_ppp_schedule(t: int, total_steps: int, base_ppp: float, gain: float) -> float:
    """Linear ramp ``base * (1 + gain * (T - t) / T)``; equals ``base`` at ``t = T``."""
    if total_steps < 1:
        raise InputDomainError(f"total_steps must be >= 1, got {total_steps}")
    if not 1 <= t <= total_steps:
        raise InputDomainError(f"step t={t} outside [1, {total_steps}]")
    if not base_ppp > 0:
        raise InputDomainError(f"base_ppp must be positive, got {base_ppp}")
    if not gain >= 0:
        raise InputDomainError(f"gain must be >= 0, got {gain}")
    return base_ppp * (1.0 + gain * (total_steps - t) / total_steps)


def synthetic_flux_scale(estimate: np.ndarray, params: SensorParams, t: int, cfg) -> float:
    """Factor that maps ``estimate`` onto the synthetic PPP for step ``t``.

    Returns 1.0 for an all-zero estimate, which has no PPP to rescale.
    """
    estimate = np.maximum(np.asarray(estimate, dtype=np.float64), 0.0)
    target = synthetic_ppp_schedule(t, cfg.total_steps, cfg.base_ppp, cfg.synthetic_gain)
    current = measured_ppp(estimate, params)
    return target / current if current > 0 else 1.0


def simulate_synthetic_measurements(
    estimate: np.ndarray, params: SensorParams, t: int, cfg, seed: RngSeed | int
) -> np.ndarray:
    """Quanta burst simulated from the current estimate at the step-``t`` flux level.

    ``cfg`` needs ``total_steps``, ``base_ppp`` and ``synthetic_gain``.  Streams
    live in domain ``1 + t`` and never collide with captured-data streams.
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    estimate = np.where(np.isnan(estimate), 0.0, np.maximum(estimate, 0.0))
    if estimate.ndim == 2:
        estimate = estimate[None]
    scale = synthetic_flux_scale(estimate, params, t, cfg)
    seed = as_seed(seed).with_domain(1 + int(t))
    return simulate_burst(estimate * scale, params, seed)


def normalize_readout(frames: np.ndarray, params: SensorParams) -> np.ndarray:
    """Plain flux estimate from readouts: ``max((Y - dark) / qe, 0)``."""
    y = np.asarray(frames, dtype=np.float64)
    return np.maximum((y - params.dark_current) / params.qe, 0.0)
