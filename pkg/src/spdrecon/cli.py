"""Command-line entry point: simulate, reconstruct, sweep, sum-bitplanes.

Every command reads a JSON config (``--config``) and writes a
``manifest.json`` next to its outputs.  The manifest holds the fully
resolved config including the seed, and can be passed back as ``--config``
to reproduce the run byte for byte.

Exit codes::

    0  success
    2  configuration error (bad JSON, unknown preset, invalid values)
    3  I/O or file-format error
    4  numerical failure (non-finite intermediate)
    5  input-domain error (data that violates an operation's contract)
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputDomainError, NumericalError
from .flow import estimate_flow, max_levels
from .metrics import MetricReport, MetricRow, normalize_pair, psnr, ssim, temporal_consistency, total_variation
from .restore import METHODS, ReconstructionRequest, SamplerConfig, reconstruct, run_sampler
from .rng import derive_seed, entropy_seed
from .scenes import moving_edge_video, pan_video
from .sensor import SensorParams, load_sensor_params, measured_ppp, scale_flux_to_ppp, simulate_burst
from .video_io import (
    VideoClip,
    read_bit_planes,
    read_image_sequence,
    sum_bit_planes,
    write_image_sequence,
)

log = logging.getLogger("spdrecon")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4
EXIT_DOMAIN = 5

WORKERS_ENV = "SPDRECON_WORKERS"
MANIFEST = "manifest.json"
BURST_PATTERN = "frame_*.pgm"


# ---------------------------------------------------------------- config


@dataclass
class PipelineConfig:
    sensor: str | dict = "paper-spd"
    ppp: list[float] = field(default_factory=lambda: [3.25, 9.75, 26.0])
    frames: int = 11
    reference_index: int = 5
    methods: dict = field(default_factory=lambda: {m: {} for m in METHODS})
    seed: int | None = None
    clips: list = field(default_factory=list)
    input: str | None = None  # simulation directory for reconstruct
    metrics: bool = True

    def __post_init__(self):
        if isinstance(self.methods, (list, tuple)):
            self.methods = {m: {} for m in self.methods}
        if not isinstance(self.methods, dict) or not self.methods:
            raise ConfigError("methods must be a non-empty list or mapping of method names")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        # canonical order, so a manifest written with sorted keys reruns identically
        self.methods = {m: self.methods[m] for m in METHODS if m in self.methods}
        try:
            self.ppp = sorted(float(p) for p in self.ppp)
        except (TypeError, ValueError):
            raise ConfigError(f"ppp must be a list of numbers, got {self.ppp!r}") from None
        if not self.ppp or any(not (p > 0 and math.isfinite(p)) for p in self.ppp):
            raise ConfigError(f"ppp values must be positive, got {self.ppp}")
        if int(self.frames) != self.frames or self.frames < 1:
            raise ConfigError(f"frames must be an integer >= 1, got {self.frames}")
        if not 0 <= self.reference_index < self.frames:
            raise ConfigError(f"reference_index {self.reference_index} outside [0, {self.frames})")
        if self.seed is not None and not (isinstance(self.seed, int) and 0 <= self.seed < 2**64):
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        self.sensor_params()  # unknown presets fail here

    def sensor_params(self) -> SensorParams:
        return load_sensor_params(self.sensor)

    def to_dict(self) -> dict:
        return {
            "sensor": self.sensor,
            "ppp": self.ppp,
            "frames": self.frames,
            "reference_index": self.reference_index,
            "methods": self.methods,
            "seed": self.seed,
            "clips": self.clips,
            "input": self.input,
            "metrics": self.metrics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if "command" in d and "config" in d:  # a manifest written by an earlier run
            d = d["config"]
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad pipeline config: {exc}") from exc


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return PipelineConfig.from_dict(data)


def resolve_seed(cfg: PipelineConfig, override: int | None) -> int:
    if override is not None:
        cfg.seed = override
    if cfg.seed is None:
        cfg.seed = entropy_seed()
        log.warning("no seed given; generated seed %d (recorded in the manifest)", cfg.seed)
    return cfg.seed


def write_manifest(out: Path, command: str, cfg: PipelineConfig, extra: dict | None = None) -> Path:
    data = {"command": command, "config": cfg.to_dict()}
    data.update(extra or {})
    path = out / MANIFEST
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def ppp_label(ppp: float) -> str:
    return f"ppp_{ppp:g}"


# ---------------------------------------------------------------- clips


def load_clip(spec, n_frames: int) -> np.ndarray:
    """Intensity frames (N, H, W) from a clip spec.

    A spec is a directory path (``frame_*.pgm`` sequence) or a mapping with
    either ``path`` (and optional ``pattern``) or ``synthetic`` set to
    ``pan``, ``static`` or ``edge``.
    """
    if isinstance(spec, str):
        spec = {"path": spec}
    if not isinstance(spec, dict):
        raise ConfigError(f"clip spec must be a path or an object, got {spec!r}")
    if "path" in spec:
        clip = read_image_sequence(spec["path"], spec.get("pattern", BURST_PATTERN))
        frames = clip.frames
    elif "synthetic" in spec:
        kind = spec["synthetic"]
        shape = tuple(spec.get("shape", (64, 64)))
        if kind == "pan":
            frames = pan_video(shape, n_frames, tuple(spec.get("velocity", (2.0, 0.0))), spec.get("seed", 0))
        elif kind == "static":
            frames = pan_video(shape, n_frames, (0.0, 0.0), spec.get("seed", 0))
        elif kind == "edge":
            frames = moving_edge_video(shape, n_frames, spec.get("speed", 2.0))
        else:
            raise ConfigError(f"unknown synthetic clip {kind!r}; choose pan, static or edge")
    else:
        raise ConfigError(f"clip spec needs 'path' or 'synthetic': {spec!r}")
    if frames.shape[0] < n_frames:
        raise InputDomainError(f"clip has {frames.shape[0]} frames, {n_frames} needed")
    return np.asarray(frames[:n_frames], dtype=np.float64)


def clip_name(spec, index: int) -> str:
    if isinstance(spec, dict) and "name" in spec:
        return str(spec["name"])
    if isinstance(spec, str):
        return Path(spec).name or f"clip{index}"
    if isinstance(spec, dict) and "path" in spec:
        return Path(spec["path"]).name
    return f"clip{index}"


# ---------------------------------------------------------------- simulate


def cmd_simulate(cfg: PipelineConfig, out: Path) -> dict:
    """Quanta bursts for the first clip at every PPP, plus a manifest."""
    if not cfg.clips:
        raise ConfigError("simulate needs at least one entry in 'clips'")
    params = cfg.sensor_params()
    intensity = load_clip(cfg.clips[0], cfg.frames)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for j, ppp in enumerate(cfg.ppp):
        flux = scale_flux_to_ppp(intensity, params, ppp)
        burst = simulate_burst(flux, params, derive_seed(cfg.seed, 0, j))
        d = out / ppp_label(ppp)
        write_image_sequence(VideoClip(burst, n_bits=params.n_bits), d, 8, pattern=BURST_PATTERN, raw=True)
        np.save(d / "truth.npy", flux)
        written[ppp_label(ppp)] = {"ppp": ppp, "frames": int(burst.shape[0])}
    write_manifest(out, "simulate", cfg, {"sensor_params": params.to_dict(), "bursts": written})
    return written


# ---------------------------------------------------------------- reconstruct


def _display_scale(params: SensorParams) -> float:
    # flux at which a noiseless readout reaches the ADC ceiling
    return max(params.max_value - params.dark_current, 1.0) / params.qe


def _score(truth: np.ndarray, estimate: np.ndarray) -> tuple[float, float, float]:
    t, e = normalize_pair(truth, estimate)
    win = min(11, *t.shape)
    win -= 1 - win % 2
    return psnr(t, e), ssim(t, e, window_size=win), total_variation(e)


def _video_flows(video: np.ndarray) -> list[np.ndarray]:
    levels = max(1, min(4, max_levels(video.shape[1:])))
    return [estimate_flow(video[k], video[k + 1], levels) for k in range(len(video) - 1)]


def run_method(
    burst: np.ndarray,
    params: SensorParams,
    method: str,
    method_cfg: dict,
    reference_index: int,
    seed: int,
    debug_dir: Path | None = None,
) -> np.ndarray:
    request = ReconstructionRequest(burst, params, reference_index, method, method_cfg)
    if method == "qudi":
        return run_sampler(request, SamplerConfig.from_dict(method_cfg), seed, debug_dir=debug_dir).video
    return reconstruct(request, seed)


def cmd_reconstruct(cfg: PipelineConfig, out: Path, debug_steps: bool = False) -> MetricReport:
    """Run every configured method on every simulated burst in ``cfg.input``."""
    if cfg.input is None:
        raise ConfigError("reconstruct needs 'input': a directory written by simulate")
    src = Path(cfg.input)
    try:
        sim = json.loads((src / MANIFEST).read_text())
    except OSError as exc:
        raise OSError(f"cannot read {src / MANIFEST}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{src / MANIFEST}: invalid JSON ({exc})") from exc
    params = SensorParams.from_dict(sim["sensor_params"])
    out.mkdir(parents=True, exist_ok=True)
    report = MetricReport(parameters={"seed": cfg.seed, "reference_index": cfg.reference_index})
    scale = _display_scale(params)
    for label in sorted(sim["bursts"], key=lambda k: sim["bursts"][k]["ppp"]):
        ppp = float(sim["bursts"][label]["ppp"])
        clip = read_image_sequence(src / label, BURST_PATTERN, normalize=False)
        burst = clip.frames
        if burst.max() > params.max_value:
            raise InputDomainError(f"{src / label}: readout exceeds the {params.n_bits}-bit range")
        truth = None
        truth_path = src / label / "truth.npy"
        if cfg.metrics:
            if not truth_path.exists():
                raise ConfigError(f"metrics requested but ground truth {truth_path} is missing; set metrics=false")
            truth = np.load(truth_path)
        ref = min(cfg.reference_index, burst.shape[0] - 1)
        for method, mcfg in cfg.methods.items():
            d = out / label / method
            dbg = d / "steps" if debug_steps and method == "qudi" else None
            seed = derive_seed(cfg.seed, 1, METHODS.index(method))
            result = run_method(burst, params, method, mcfg, ref, seed, dbg)
            video = result if result.ndim == 3 else result[None]
            d.mkdir(parents=True, exist_ok=True)
            np.save(d / "restored.npy", video)
            write_image_sequence(VideoClip(video / scale), d, 16)
            if truth is not None:
                frame = ref if video.shape[0] > 1 else 0
                p, s, tv = _score(truth[ref], video[frame])
                temporal = temporal_consistency(video, _video_flows(video)) if video.shape[0] > 1 else None
                report.add(MetricRow(method, ppp, ref, p, s, tv, temporal))
                log.info("%s %s: PSNR %.2f dB, SSIM %.4f", label, method, p, s)
    if cfg.metrics:
        (out / "metrics.json").write_text(report.to_json() + "\n")
        (out / "metrics.csv").write_text(report.to_csv())
    write_manifest(out, "reconstruct", cfg, {"sensor_params": params.to_dict()})
    return report


# ---------------------------------------------------------------- sweep


def _sweep_cell(args) -> dict:
    clip_spec, clip_idx, ppp, ppp_idx, method, mcfg, cfg_dict, seed = args
    cell = {"clip": clip_name(clip_spec, clip_idx), "ppp": ppp, "method": method}
    try:
        cfg = PipelineConfig.from_dict(cfg_dict)
        params = cfg.sensor_params()
        flux = scale_flux_to_ppp(load_clip(clip_spec, cfg.frames), params, ppp)
        burst = simulate_burst(flux, params, derive_seed(seed, 0, clip_idx, ppp_idx))
        m_idx = METHODS.index(method)
        result = run_method(burst, params, method, mcfg, cfg.reference_index, derive_seed(seed, 1, m_idx))
        est = result[cfg.reference_index] if result.ndim == 3 else result
        p, s, _ = _score(flux[cfg.reference_index], est)
        cell.update(psnr=p, ssim=s, error="")
    except Exception as exc:  # one failed cell must not stop the sweep
        cell.update(psnr=math.nan, ssim=math.nan, error=f"{type(exc).__name__}: {exc}")
    return cell


def format_table(cells: list[dict], ppps: list[float], methods: list[str]) -> str:
    """Aligned text table: methods by PPP, mean PSNR/SSIM over clips."""
    head = ["method"] + [f"PPP {p:g}" for p in ppps]
    rows = [head]
    for m in methods:
        row = [m]
        for p in ppps:
            sel = [c for c in cells if c["method"] == m and c["ppp"] == p and not c["error"]]
            if sel:
                row.append(f"{np.mean([c['psnr'] for c in sel]):.2f}/{np.mean([c['ssim'] for c in sel]):.4f}")
            else:
                row.append("failed")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n(PSNR dB / SSIM, mean over clips)\n"


def cmd_sweep(cfg: PipelineConfig, out: Path, workers: int = 1) -> list[dict]:
    if not cfg.clips:
        raise ConfigError("sweep needs at least one entry in 'clips'")
    out.mkdir(parents=True, exist_ok=True)
    methods = list(cfg.methods)
    jobs = [
        (clip, ci, ppp, pi, m, cfg.methods[m], cfg.to_dict(), cfg.seed)
        for ci, clip in enumerate(cfg.clips)
        for pi, ppp in enumerate(cfg.ppp)
        for m in methods
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_sweep_cell, jobs))
    else:
        cells = [_sweep_cell(j) for j in jobs]
    for c in cells:
        if c["error"]:
            log.error("cell %s / PPP %g / %s failed: %s", c["clip"], c["ppp"], c["method"], c["error"])
    lines = ["clip,ppp,method,psnr,ssim,error"]
    for c in cells:
        err = c["error"].replace('"', "'")
        lines.append(f'{c["clip"]},{c["ppp"]!r},{c["method"]},{c["psnr"]:.6f},{c["ssim"]:.6f},"{err}"')
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    table = format_table(cells, cfg.ppp, methods)
    (out / "table.txt").write_text(table)
    write_manifest(out, "sweep", cfg)
    print(table, end="")
    return cells


# ---------------------------------------------------------------- bit planes


def cmd_sum_bitplanes(path: Path, out: Path, group: int = 7, bits: int = 3, clamp: bool = False) -> VideoClip:
    stream = read_bit_planes(path)
    clip = sum_bit_planes(stream, group, bits, clamp=clamp)
    write_image_sequence(clip, out, 8, pattern=BURST_PATTERN, raw=True)
    ppp = float(np.mean(clip.frames))
    manifest = {
        "command": "sum-bitplanes",
        "input": str(path),
        "group": group,
        "bits": bits,
        "clamp": clamp,
        "frames": len(clip),
        "measured_ppp": ppp,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"{len(clip)} frames of {clip.shape[0]}x{clip.shape[1]}, measured PPP {ppp:.4f}")
    return clip


# ---------------------------------------------------------------- main


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spdrecon", description="Low-bit quanta video simulation and restoration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="pipeline config or manifest (JSON)")
        sp.add_argument("--seed", type=int, help="unsigned 64-bit seed; overrides the config")
        sp.add_argument("--out", type=Path, required=True, help="output directory")

    common(sub.add_parser("simulate", help="simulate quanta bursts at each PPP"))
    rec = sub.add_parser("reconstruct", help="restore simulated bursts with each method")
    common(rec)
    rec.add_argument("--input", type=Path, help="simulation directory; overrides the config")
    rec.add_argument("--debug-steps", action="store_true", help="dump per-step sampler diagnostics")
    sw = sub.add_parser("sweep", help="clip x PPP x method comparison table")
    common(sw)
    sw.add_argument("--workers", type=int, help=f"parallel cells (default ${WORKERS_ENV} or 1)")
    bp = sub.add_parser("sum-bitplanes", help="sum groups of binary frames into multi-bit frames")
    bp.add_argument("input", type=Path, help="bit-plane stream (.qbps)")
    bp.add_argument("--out", type=Path, required=True)
    bp.add_argument("--group", type=int, default=7)
    bp.add_argument("--bits", type=int, default=3)
    bp.add_argument("--clamp", action="store_true", help="saturate sums above the target range")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
    )
    try:
        if args.command == "sum-bitplanes":
            cmd_sum_bitplanes(args.input, args.out, args.group, args.bits, args.clamp)
            return EXIT_OK
        cfg = load_config(args.config)
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        resolve_seed(cfg, args.seed)
        if args.command == "simulate":
            cmd_simulate(cfg, args.out)
        elif args.command == "reconstruct":
            if args.input is not None:
                cfg.input = str(args.input)
            cmd_reconstruct(cfg, args.out, args.debug_steps)
        elif args.command == "sweep":
            workers = args.workers if args.workers is not None else default_workers()
            if workers < 1:
                raise ConfigError(f"--workers must be >= 1, got {workers}")
            cmd_sweep(cfg, args.out, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InputDomainError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
