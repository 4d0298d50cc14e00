"""Multi-frame reconstruction: naive averaging, align-and-merge, and an
iterative reverse-diffusion sampler with the sensor model in the loop.

Each sampler step re-simulates quanta frames from the current clean
estimate, fuses them with the captured frames, predenoises, aligns and
merges the fused burst around every reference frame, refines the result
with a strength-scheduled denoiser blended with the previous estimate
(self-conditioning), and advances a DDIM-style Gaussian chain.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import gammaln, ndtr
from scipy.stats import poisson

from .denoise import DenoiserSpec, denoise_image, estimate_noise_sigma, predenoise_frame
from .errors import ConfigError, InputDomainError, NumericalError
from .flow import FlowConfig, estimate_flow, invert_flow, max_levels, warp_bilinear
from .rng import CALIBRATION_DOMAIN, SAMPLER_NOISE_DOMAIN, RngSeed, as_seed
from .sensor import (
    SensorParams,
    measured_ppp,
    normalize_readout,
    simulate_frame,
    simulate_synthetic_measurements,
    synthetic_flux_scale,
)

METHODS = ("average", "align-merge", "qudi")


@dataclass(frozen=True)
class SamplerConfig:
    total_steps: int = 10
    cosine_offset: float = 0.008
    base_ppp: float | None = None  # None: PPP of the initial estimate
    synthetic_gain: float = 3.0
    fusion_start: float = 0.1  # synthetic-data weight at t = T
    fusion_end: float = 0.3  # ... and at t = 1
    # refinement NLM h at t = T and t = 1, as a multiple of the measured noise
    # level (or in normalized flux units when denoiser.noise_adaptive is off)
    strength_start: float = 1.0
    strength_end: float = 1.0
    gamma: float = 0.7
    anneal_gamma: bool = True  # scale gamma by the noise level sqrt(1 - abar_t)
    deterministic: bool = True
    merge_sigma: float = 0.1
    synthetic_headroom: bool = True
    calibrate: bool = True
    calibration_levels: int = 24
    calibration_size: int = 64
    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    flow: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self):
        if int(self.total_steps) != self.total_steps or self.total_steps < 1:
            raise ConfigError(f"total_steps must be an integer >= 1, got {self.total_steps}")
        if not 0 <= self.fusion_start <= self.fusion_end <= 1:
            raise ConfigError("fusion weights need 0 <= fusion_start <= fusion_end <= 1")
        if not 0 <= self.gamma <= 1:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.strength_start < 0 or self.strength_end < 0:
            raise ConfigError("denoiser strengths must be >= 0")
        if self.synthetic_gain < 0:
            raise ConfigError("synthetic_gain must be >= 0")
        if self.base_ppp is not None and not self.base_ppp > 0:
            raise ConfigError("base_ppp must be positive")
        if not self.merge_sigma > 0:
            raise ConfigError("merge_sigma must be positive")

    def _ramp(self, t: int, start: float, end: float) -> float:
        T = self.total_steps
        return start if T == 1 else start + (end - start) * (T - t) / (T - 1)

    def fusion_weight(self, t: int) -> float:
        return self._ramp(t, self.fusion_start, self.fusion_end)

    def strength(self, t: int) -> float:
        return self._ramp(t, self.strength_start, self.strength_end)

    def blend_weight(self, t: int) -> float:
        """Weight of the fused candidate in the self-conditioning blend."""
        if not self.anneal_gamma:
            return self.gamma
        return self.gamma * (1.0 - self.alphas_bar()[t])

    def alphas_bar(self) -> np.ndarray:
        """Cosine schedule, index ``t = 0..T``; ``alphas_bar()[0] == 1``."""
        T = self.total_steps
        s = self.cosine_offset
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 0.0, 0.999)
        return np.concatenate([[1.0], np.cumprod(1 - betas)])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SamplerConfig:
        d = dict(d)
        if "denoiser" in d and isinstance(d["denoiser"], dict):
            d["denoiser"] = DenoiserSpec.from_dict(d["denoiser"])
        if "flow" in d and isinstance(d["flow"], dict):
            d["flow"] = FlowConfig(**d["flow"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad sampler config: {exc}") from exc


@dataclass
class SamplerState:
    x_t: np.ndarray  # Gaussian iterate, normalized units
    x_hat: np.ndarray  # clean estimate, flux units
    t: int
    eps_hat: np.ndarray | None = None


@dataclass
class ReconstructionRequest:
    burst: np.ndarray
    params: SensorParams
    reference_index: int = 0
    method: str = "qudi"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        burst = np.asarray(self.burst)
        if burst.ndim == 2:
            burst = burst[None]
        if burst.ndim != 3 or burst.shape[0] == 0:
            raise InputDomainError(f"burst must be a non-empty (N, H, W) array, got {burst.shape}")
        self.burst = burst
        if not 0 <= self.reference_index < burst.shape[0]:
            raise InputDomainError(
                f"reference index {self.reference_index} outside [0, {burst.shape[0]})"
            )
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")


@dataclass
class SampleResult:
    video: np.ndarray
    steps: list[dict]
    diffs: list[float]


# ---------------------------------------------------------------- baselines


def naive_average(burst: np.ndarray, params: SensorParams) -> np.ndarray:
    """``max(mean(Y)/qe - dark/qe, 0)`` per pixel."""
    burst = np.asarray(burst, dtype=np.float64)
    if burst.ndim == 2:
        burst = burst[None]
    if burst.ndim != 3 or burst.shape[0] == 0:
        raise InputDomainError("naive_average needs a non-empty burst")
    return np.maximum(burst.mean(axis=0) / params.qe - params.dark_current / params.qe, 0.0)


def _flow_levels(shape: tuple[int, int], cfg: FlowConfig) -> int:
    return max(1, min(cfg.levels, max_levels(shape)))


def _merge_scale(images: np.ndarray) -> float:
    s = float(np.percentile(images, 99))
    return s if s > 0 else 1.0


def _edge_weight(flow: np.ndarray) -> np.ndarray:
    """Soft validity: 1 inside the frame, falling linearly to 0 one pixel
    outside, so border pixels do not toggle as the flow jitters."""
    H, W = flow.shape[:2]
    yy, xx = np.mgrid[0:H, 0:W]
    x = xx + flow[..., 0]
    y = yy + flow[..., 1]
    over = np.maximum.reduce([-x, x - (W - 1), -y, y - (H - 1), np.zeros_like(x)])
    return np.clip(1.0 - over, 0.0, 1.0)


def _merge(den: np.ndarray, ref: int, flows: dict[int, np.ndarray], sigma: float, scale: float) -> np.ndarray:
    base = den[ref]
    num = base.copy()
    wsum = np.ones_like(base)
    for k in range(den.shape[0]):
        if k == ref:
            continue
        warped, _ = warp_bilinear(den[k], flows[k])
        w = _edge_weight(flows[k]) * np.exp(-(((warped - base) / scale) ** 2) / (2 * sigma * sigma))
        num += w * warped
        wsum += w
    return num / wsum


def _pair_flows(norm: np.ndarray, cfg: FlowConfig, refs) -> dict[tuple[int, int], np.ndarray]:
    """Flows (r, k) for every reference in ``refs``; reverse pairs are
    derived by inversion instead of a second estimate."""
    n = norm.shape[0]
    levels = _flow_levels(norm.shape[1:], cfg)
    kw = {**cfg.estimator_kwargs(), "levels": levels}
    flows: dict[tuple[int, int], np.ndarray] = {}
    for r in refs:
        for k in range(n):
            if k == r or (r, k) in flows:
                continue
            if cfg.chain and abs(k - r) > 1:
                step = 1 if k > r else -1
                prev = flows.get((r, k - step))
                if prev is None:
                    prev = estimate_flow(norm[r], norm[k - step], **kw)
                local = flows.get((k - step, k))
                if local is None:
                    local = estimate_flow(norm[k - step], norm[k], **kw)
                moved = np.stack([warp_bilinear(local[..., c], prev)[0] for c in range(2)], axis=-1)
                f = prev + moved
            else:
                f = estimate_flow(norm[r], norm[k], **kw)
            flows[(r, k)] = f
            if len(refs) > 1:
                flows[(k, r)] = invert_flow(f)
    return flows


def fuse_burst(
    den: np.ndarray, refs, flow_cfg: FlowConfig, merge_sigma: float
) -> np.ndarray:
    """Align-and-merge predenoised frames around each reference in ``refs``."""
    den = np.asarray(den, dtype=np.float64)
    scale = _merge_scale(den)
    refs = list(refs)
    if den.shape[0] == 1:
        return den[[0] * len(refs)].copy()
    flows = _pair_flows(den / scale, flow_cfg, refs)
    out = []
    for r in refs:
        per = {k: flows[(r, k)] for k in range(den.shape[0]) if k != r}
        out.append(_merge(den, r, per, merge_sigma, scale))
    return np.stack(out)


def predenoise_burst(burst: np.ndarray, params: SensorParams, spec: DenoiserSpec, denoiser=denoise_image) -> np.ndarray:
    return np.stack([predenoise_frame(f, params, spec, denoiser) for f in burst])


def align_merge(
    request: ReconstructionRequest,
    flow_cfg: FlowConfig | None = None,
    spec: DenoiserSpec | None = None,
    *,
    merge_sigma: float = 0.1,
    denoiser=denoise_image,
) -> np.ndarray:
    """Predenoise, align every frame to the reference, consistency-weighted merge."""
    flow_cfg = flow_cfg or FlowConfig()
    spec = spec or DenoiserSpec()
    den = predenoise_burst(request.burst, request.params, spec, denoiser)
    return fuse_burst(den, [request.reference_index], flow_cfg, merge_sigma)[0]


# ---------------------------------------------------------------- likelihood


def readout_pmf(y: np.ndarray, lam: np.ndarray, params: SensorParams) -> np.ndarray:
    """``P(Y = y | lambda)`` under the clipped Poisson + rounded Gaussian model.

    ADC bins are ``[k - 0.5, k + 0.5)`` with the end bins open; the
    electron count is clipped at the full well before read noise.
    """
    y = np.asarray(y, dtype=np.float64)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), y.shape)
    N = params.max_value
    fwc = params.fwc
    sigma = params.read_noise_sigma
    m = int(math.ceil(8 * sigma)) + 1
    log_lam = np.log(np.maximum(lam, 1e-300))

    def pois(e):
        # P(min(E, fwc) = e)
        p = np.exp(e * log_lam - lam - gammaln(e + 1))
        p = np.where(lam == 0, (e == 0).astype(np.float64), p)
        return np.where(e >= fwc, _pois_sf(fwc - 1, lam), p)

    def bin_prob(e):
        if sigma == 0:
            a = np.clip(np.floor(e + 0.5), 0, N)  # e is integral
            return (a == y).astype(np.float64)
        upper = np.where(y >= N, 1.0, ndtr((y + 0.5 - e) / sigma))
        lower = np.where(y <= 0, 0.0, ndtr((y - 0.5 - e) / sigma))
        return upper - lower

    total = np.zeros(y.shape)
    for d in range(-m, m + 1):
        e = y + d
        ok = (e >= 0) & (e <= fwc)
        ec = np.clip(e, 0, fwc)
        total += np.where(ok, pois(ec) * bin_prob(ec), 0.0)
    # top bin also collects every count above the summation window
    top = (y >= N) & (y + m < fwc)
    if top.any():
        total = total + np.where(top, _pois_sf(y + m, lam), 0.0)
    return total


def _pois_sf(k, lam):
    return poisson.sf(k, lam)


def forward_consistency(estimate: np.ndarray, y: np.ndarray, params: SensorParams) -> float:
    """Mean per-pixel negative log-likelihood of readouts ``y`` given a flux estimate.

    A 2-D estimate is broadcast against every frame of a 3-D ``y``.
    """
    est = np.asarray(estimate, dtype=np.float64)
    y = np.asarray(y)
    try:
        est = np.broadcast_to(est, y.shape)
    except ValueError:
        raise InputDomainError(f"estimate shape {est.shape} does not match readouts {y.shape}") from None
    lam = params.qe * np.maximum(est, 0.0) + params.dark_current
    p = readout_pmf(y, lam, params)
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


# ---------------------------------------------------------------- sampler


def synthetic_sensor(params: SensorParams) -> SensorParams:
    """The captured sensor with a 16-bit ADC and matching full well.

    Ramping the synthetic flux on a 3-bit readout would mostly saturate it.
    """
    bits = max(params.n_bits, 16)
    return replace(params, n_bits=bits, fwc=max(params.fwc, (1 << bits) - 1))


def response_curve(
    params: SensorParams,
    syn_params: SensorParams,
    weight: float,
    flux_scale: float,
    spec: DenoiserSpec,
    seed: RngSeed,
    flux_max: float,
    *,
    levels: int = 24,
    size: int = 64,
    denoiser=denoise_image,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean predenoiser output for constant-flux patches pushed through the
    same capture + synthetic fusion as the sampler step.

    Returns ``(flux, response)`` with ``response`` non-decreasing.
    """
    flux = np.linspace(0.0, flux_max, levels)
    resp = np.empty(levels)
    for j, f in enumerate(flux):
        patch = np.full((size, size), f)
        z = normalize_readout(simulate_frame(patch, params, seed.with_stream(2 * j)), params)
        if weight > 0:
            syn = simulate_frame(patch * flux_scale, syn_params, seed.with_stream(2 * j + 1))
            z = weight * normalize_readout(syn, syn_params) / flux_scale + (1 - weight) * z
        den = predenoise_frame(z * params.qe + params.dark_current, params, spec, denoiser)
        resp[j] = den.mean()
    resp = np.maximum.accumulate(resp)
    # strictly increasing abscissa for interpolation
    resp = resp + 1e-9 * np.arange(levels)
    return flux, resp


def invert_response(image: np.ndarray, curve: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    flux, resp = curve
    return np.interp(image, resp, flux)


def _finite(a: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite values after {where}")
    return a


def _refine(blend: np.ndarray, cand: np.ndarray, weight: float, spec: DenoiserSpec, denoiser) -> np.ndarray:
    """Denoise each blended frame.  With a noise-adaptive spec the strength
    is a multiple of the noise the candidate carries into the blend, so the
    refinement fades out as the candidate weight does."""
    out = []
    for b, c in zip(blend, cand):
        if spec.noise_adaptive:
            h = spec.strength * weight * estimate_noise_sigma(c)
            out.append(b if h <= 0 else denoiser(b, replace(spec, strength=h)))
        else:
            out.append(denoiser(b, spec))
    return np.stack(out)


def run_sampler(
    request: ReconstructionRequest,
    cfg: SamplerConfig | None = None,
    seed: RngSeed | int = 0,
    *,
    denoiser=denoise_image,
    debug_dir: str | Path | None = None,
) -> SampleResult:
    """Reverse loop ``t = T..1``; returns one restored frame per input frame."""
    cfg = cfg or SamplerConfig()
    seed = as_seed(seed)
    params = request.params
    y = request.burst
    n = y.shape[0]
    refs = list(range(n))
    y_flux = normalize_readout(y, params)

    syn_params = synthetic_sensor(params) if cfg.synthetic_headroom else params
    calib_seed = seed.with_domain(CALIBRATION_DOMAIN)
    # flux at which a noiseless readout would hit the ADC ceiling, doubled
    flux_max = 2.0 * max(params.max_value - params.dark_current, 1.0) / params.qe

    def calibrated(image, weight, k, t):
        if not cfg.calibrate:
            return image
        curve = response_curve(
            params, syn_params, weight, k, cfg.denoiser, calib_seed.with_domain(CALIBRATION_DOMAIN + t),
            flux_max, levels=cfg.calibration_levels, size=cfg.calibration_size, denoiser=denoiser,
        )
        return invert_response(image, curve)

    den_y = _finite(predenoise_burst(y, params, cfg.denoiser, denoiser), "initial predenoising")
    x_hat = calibrated(fuse_burst(den_y, refs, cfg.flow, cfg.merge_sigma), 0.0, 1.0, 0)
    if cfg.base_ppp is None:
        ppp0 = measured_ppp(x_hat, params)
        cfg = replace(cfg, base_ppp=ppp0 if ppp0 > 0 else 1.0)
    S = _merge_scale(x_hat)
    abar = cfg.alphas_bar()
    T = cfg.total_steps

    noise_rng = seed.with_domain(SAMPLER_NOISE_DOMAIN).generator()
    state = SamplerState(x_t=noise_rng.standard_normal(y.shape), x_hat=x_hat, t=T)
    steps: list[dict] = []
    diffs: list[float] = []
    if debug_dir is not None:
        debug_dir = Path(debug_dir)
        debug_dir.mkdir(parents=True, exist_ok=True)

    for t in range(T, 0, -1):
        state.t = t
        # synthetic measurements from the previous clean estimate
        syn = simulate_synthetic_measurements(state.x_hat, syn_params, t, cfg, seed)
        k = synthetic_flux_scale(state.x_hat, syn_params, t, cfg)
        w = cfg.fusion_weight(t)
        z = w * normalize_readout(syn, syn_params) / k + (1 - w) * y_flux
        # back to readout units for the variance-stabilized predenoiser
        den_z = predenoise_burst(z * params.qe + params.dark_current, params, cfg.denoiser, denoiser)
        _finite(den_z, f"predenoising at sampler step t={t}")
        cand = calibrated(fuse_burst(den_z, refs, cfg.flow, cfg.merge_sigma), w, k, t)

        if state.eps_hat is None:
            x_proj = state.x_hat / S
        else:
            x_proj = (state.x_t - math.sqrt(1 - abar[t]) * state.eps_hat) / math.sqrt(abar[t])
        g = cfg.blend_weight(t)
        blend = g * cand / S + (1 - g) * x_proj
        spec_t = replace(cfg.denoiser, kind="nlm", strength=cfg.strength(t))
        x0 = np.maximum(_refine(blend, cand / S, g, spec_t, denoiser), 0.0)
        if not np.all(np.isfinite(x0)):
            raise NumericalError(f"non-finite clean estimate at sampler step t={t}")

        eps = (state.x_t - math.sqrt(abar[t]) * x0) / math.sqrt(1 - abar[t])
        a_prev = abar[t - 1]
        if cfg.deterministic or t == 1:
            x_next = math.sqrt(a_prev) * x0 + math.sqrt(1 - a_prev) * eps
        else:
            var = (1 - a_prev) / (1 - abar[t]) * (1 - abar[t] / a_prev)
            sig = math.sqrt(max(var, 0.0))
            x_next = (
                math.sqrt(a_prev) * x0
                + math.sqrt(max(1 - a_prev - sig * sig, 0.0)) * eps
                + sig * noise_rng.standard_normal(y.shape)
            )
        if not np.all(np.isfinite(x_next)):
            raise NumericalError(f"non-finite diffusion iterate at sampler step t={t}")

        new_hat = x0 * S
        diffs.append(float(np.max(np.abs(new_hat - state.x_hat))))
        state = SamplerState(x_t=x_next, x_hat=new_hat, t=t - 1, eps_hat=eps)
        info = {"t": t, "fusion_weight": w, "synthetic_ppp": cfg.base_ppp * (1 + cfg.synthetic_gain * (T - t) / T),
                "max_update": diffs[-1]}
        if debug_dir is not None:
            info["forward_consistency"] = forward_consistency(new_hat, y, params)
            np.save(debug_dir / f"xhat_t{t:03d}.npy", new_hat)
        steps.append(info)

    if debug_dir is not None:
        (debug_dir / "steps.json").write_text(json.dumps(steps, indent=2))
    return SampleResult(video=state.x_hat, steps=steps, diffs=diffs)


def qudi_sample(
    request: ReconstructionRequest,
    cfg: SamplerConfig | None = None,
    seed: RngSeed | int = 0,
    **kwargs,
) -> np.ndarray:
    return run_sampler(request, cfg, seed, **kwargs).video


def reconstruct(request: ReconstructionRequest, seed: RngSeed | int = 0, **kwargs) -> np.ndarray:
    """Dispatch on ``request.method``; returns (H, W) or (N, H, W) flux."""
    c = dict(request.config)
    if request.method == "average":
        return naive_average(request.burst, request.params)
    if request.method == "align-merge":
        flow_cfg = FlowConfig(**c["flow"]) if "flow" in c else None
        spec = DenoiserSpec.from_dict(c["denoiser"]) if "denoiser" in c else None
        return align_merge(request, flow_cfg, spec, merge_sigma=c.get("merge_sigma", 0.1))
    return qudi_sample(request, SamplerConfig.from_dict(c), seed, **kwargs)
