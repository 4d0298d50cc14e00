"""Simulation and restoration of low-bit single-photon video bursts."""
from __future__ import annotations

from .denoise import DenoiserSpec, denoise_image, generalized_anscombe, inverse_anscombe, predenoise_frame
from .errors import ConfigError, FormatError, InputDomainError, NumericalError, SpdReconError
from .flow import FlowConfig, bidirectional_flows, estimate_flow, warp_bilinear
from .metrics import MetricReport, MetricRow, psnr, ssim, temporal_consistency, total_variation
from .restore import (
    ReconstructionRequest,
    SamplerConfig,
    align_merge,
    forward_consistency,
    naive_average,
    qudi_sample,
    reconstruct,
)
from .rng import RngSeed
from .sensor import PRESETS, SensorParams, get_preset, simulate_burst, simulate_frame

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DenoiserSpec",
    "FlowConfig",
    "FormatError",
    "InputDomainError",
    "MetricReport",
    "MetricRow",
    "NumericalError",
    "PRESETS",
    "ReconstructionRequest",
    "RngSeed",
    "SamplerConfig",
    "SensorParams",
    "SpdReconError",
    "align_merge",
    "bidirectional_flows",
    "denoise_image",
    "estimate_flow",
    "forward_consistency",
    "generalized_anscombe",
    "get_preset",
    "inverse_anscombe",
    "naive_average",
    "predenoise_frame",
    "psnr",
    "qudi_sample",
    "reconstruct",
    "simulate_burst",
    "simulate_frame",
    "ssim",
    "temporal_consistency",
    "total_variation",
    "warp_bilinear",
]
