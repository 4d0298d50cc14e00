"""Coarse-to-fine Lucas-Kanade optical flow and bilinear warping.

Flow convention: ``flow[..., 0]`` is the horizontal (x, column) displacement
and ``flow[..., 1]`` the vertical one.  ``estimate_flow(ref, tgt)`` returns
the field ``f`` for which ``warp_bilinear(tgt, f)`` reproduces ``ref``, i.e.
``tgt(p + f(p)) ~ ref(p)``.

Raw flow dump layout (little endian): ``u32 width, u32 height`` followed by
the ``float32`` u-plane and then the v-plane, both row-major.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, median_filter, uniform_filter

from .errors import FormatError, InputDomainError

MIN_TOP_LEVEL = 8


@dataclass(frozen=True)
class FlowConfig:
    levels: int = 4
    iterations: int = 3
    window: int = 7
    damping: float = 1e-3
    median_size: int = 9
    smoothing: float = 3.0
    chain: bool = False

    def __post_init__(self):
        if self.levels < 1 or self.iterations < 0:
            raise InputDomainError("flow levels must be >= 1 and iterations >= 0")
        if self.window < 1 or self.window % 2 == 0:
            raise InputDomainError(f"flow window must be an odd positive size, got {self.window}")
        if self.median_size < 1 or self.median_size % 2 == 0:
            raise InputDomainError(f"median_size must be an odd positive size, got {self.median_size}")
        if not (self.damping > 0 and self.smoothing >= 0):
            raise InputDomainError("flow damping must be > 0 and smoothing >= 0")

    def estimator_kwargs(self) -> dict:
        return dict(
            levels=self.levels,
            iterations=self.iterations,
            window=self.window,
            damping=self.damping,
            median_size=self.median_size,
            smoothing=self.smoothing,
        )


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InputDomainError(f"dimension mismatch: {a.shape} vs {b.shape}")


def _down(img: np.ndarray) -> np.ndarray:
    return gaussian_filter(img, 1.0, mode="nearest")[::2, ::2]


def build_pyramid(image: np.ndarray, levels: int) -> list[np.ndarray]:
    """Gaussian pyramid; level 0 is the input, each further level is blurred
    with sigma 1.0 and decimated by two (``ceil`` of the previous size)."""
    img = np.asarray(image, dtype=np.float64)
    if levels < 1:
        raise InputDomainError(f"levels must be >= 1, got {levels}")
    h, w = img.shape
    for _ in range(levels - 1):
        h, w = -(-h // 2), -(-w // 2)
    if min(h, w) < MIN_TOP_LEVEL:
        raise InputDomainError(
            f"{levels} pyramid levels leave a {h}x{w} top level for a {img.shape} image "
            f"(minimum {MIN_TOP_LEVEL})"
        )
    pyr = [img]
    for _ in range(levels - 1):
        pyr.append(_down(pyr[-1]))
    return pyr


def max_levels(shape: tuple[int, int], cap: int = 8) -> int:
    n = 1
    h, w = shape
    while n < cap:
        h, w = -(-h // 2), -(-w // 2)
        if min(h, w) < MIN_TOP_LEVEL:
            break
        n += 1
    return n


def warp_bilinear(image: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``image`` at ``p + flow(p)``.

    Returns ``(warped, valid)``; samples falling outside the image are taken
    from the clamped edge and flagged ``False`` in ``valid``.
    """
    img = np.asarray(image, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape != img.shape + (2,):
        raise InputDomainError(f"flow shape {flow.shape} does not match image {img.shape}")
    H, W = img.shape
    yy, xx = np.mgrid[0:H, 0:W]
    x = xx + flow[..., 0]
    y = yy + flow[..., 1]
    valid = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    x = np.clip(x, 0, W - 1)
    y = np.clip(y, 0, H - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    out = (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )
    return out, valid


def _upsample_flow(flow: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    H, W = shape
    h, w = flow.shape[:2]
    # pixel-centre aligned bilinear resize, displacements doubled
    gy = np.clip((np.arange(H) + 0.5) / 2.0 - 0.5, 0, h - 1)[:, None]
    gx = np.clip((np.arange(W) + 0.5) / 2.0 - 0.5, 0, w - 1)[None, :]
    y0 = np.floor(gy).astype(np.intp)
    x0 = np.floor(gx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = gy - y0
    fx = gx - x0
    out = np.empty((H, W, 2))
    for c in range(2):
        f = flow[..., c]
        out[..., c] = (
            f[y0, x0] * (1 - fx) * (1 - fy)
            + f[y0, x1] * fx * (1 - fy)
            + f[y1, x0] * (1 - fx) * fy
            + f[y1, x1] * fx * fy
        )
    return 2.0 * out


def _lk_refine(ref: np.ndarray, tgt: np.ndarray, flow: np.ndarray, cfg: FlowConfig) -> np.ndarray:
    gy_ref, gx_ref = np.gradient(ref)
    area = float(cfg.window * cfg.window)
    for _ in range(cfg.iterations):
        warped, valid = warp_bilinear(tgt, flow)
        ix = gx_ref * valid
        iy = gy_ref * valid
        it = (warped - ref) * valid
        # window sums of the structure tensor, Tikhonov-damped
        sxx = uniform_filter(ix * ix, cfg.window, mode="nearest") * area + cfg.damping
        syy = uniform_filter(iy * iy, cfg.window, mode="nearest") * area + cfg.damping
        sxy = uniform_filter(ix * iy, cfg.window, mode="nearest") * area
        bx = -uniform_filter(ix * it, cfg.window, mode="nearest") * area
        by = -uniform_filter(iy * it, cfg.window, mode="nearest") * area
        det = sxx * syy - sxy * sxy
        du = (syy * bx - sxy * by) / det
        dv = (sxx * by - sxy * bx) / det
        flow = flow + np.stack([du, dv], axis=-1)
        # median smoothing keeps aperture-limited pixels from drifting
        if cfg.median_size > 1:
            flow = median_filter(flow, size=(cfg.median_size, cfg.median_size, 1), mode="nearest")
        if cfg.smoothing > 0:
            flow = gaussian_filter(flow, (cfg.smoothing, cfg.smoothing, 0), mode="nearest")
    return flow


def estimate_flow(
    reference: np.ndarray,
    target: np.ndarray,
    levels: int = 4,
    iterations: int = 3,
    *,
    window: int = 7,
    damping: float = 1e-3,
    median_size: int = 9,
    smoothing: float = 3.0,
) -> np.ndarray:
    """Dense flow from ``reference`` coordinates into ``target``, shape (H, W, 2).

    After every refinement step the field is median filtered
    (``median_size``) and optionally Gaussian smoothed (``smoothing`` is the
    sigma in pixels of the current level); heavier smoothing trades motion
    detail for robustness on noisy frames.
    """
    ref = np.asarray(reference, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    _check_pair(ref, tgt)
    cfg = FlowConfig(
        levels=levels,
        iterations=iterations,
        window=window,
        damping=damping,
        median_size=median_size,
        smoothing=smoothing,
    )
    # contrast normalization makes the damping independent of image scale
    scale = float(ref.std())
    if scale > 0 and np.isfinite(scale):
        ref = ref / scale
        tgt = tgt / scale
    pr = build_pyramid(ref, levels)
    pt = build_pyramid(tgt, levels)
    flow = np.zeros(pr[-1].shape + (2,))
    for lvl in range(levels - 1, -1, -1):
        if flow.shape[:2] != pr[lvl].shape:
            flow = _upsample_flow(flow, pr[lvl].shape)
        flow = _lk_refine(pr[lvl], pt[lvl], flow, cfg)
    if not np.all(np.isfinite(flow)):
        flow = np.nan_to_num(flow, nan=0.0, posinf=0.0, neginf=0.0)
    return flow


def compose_flows(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Flow equivalent to following ``first`` and then ``second``."""
    moved = np.stack([warp_bilinear(second[..., c], first)[0] for c in range(2)], axis=-1)
    return first + moved


def invert_flow(flow: np.ndarray, iterations: int = 5) -> np.ndarray:
    """Fixed-point inverse ``g(p) = -f(p + g(p))``."""
    inv = -flow
    for _ in range(iterations):
        inv = -np.stack([warp_bilinear(flow[..., c], inv)[0] for c in range(2)], axis=-1)
    return inv


def bidirectional_flows(
    burst: np.ndarray,
    reference_index: int,
    levels: int = 4,
    iterations: int = 3,
    *,
    chain: bool = False,
    window: int = 7,
    damping: float = 1e-3,
    median_size: int = 9,
    smoothing: float = 3.0,
) -> list[np.ndarray]:
    """Flows from the reference frame into every other frame, in frame order.

    With ``chain=True`` each flow is composed from neighbour-to-neighbour
    estimates walking outward from the reference.
    """
    burst = np.asarray(burst, dtype=np.float64)
    n = burst.shape[0]
    if not 0 <= reference_index < n:
        raise InputDomainError(f"reference index {reference_index} outside [0, {n})")
    kw = dict(
        levels=levels,
        iterations=iterations,
        window=window,
        damping=damping,
        median_size=median_size,
        smoothing=smoothing,
    )
    ref = burst[reference_index]
    flows: dict[int, np.ndarray] = {}
    if not chain:
        for k in range(n):
            if k != reference_index:
                flows[k] = estimate_flow(ref, burst[k], **kw)
    else:
        for step in (-1, 1):
            acc = np.zeros(ref.shape + (2,))
            k = reference_index + step
            while 0 <= k < n:
                local = estimate_flow(burst[k - step], burst[k], **kw)
                acc = compose_flows(acc, local)
                flows[k] = acc
                k += step
    return [flows[k] for k in range(n) if k != reference_index]


def write_flow(path: str | Path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    H, W = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", W, H))
        fh.write(np.ascontiguousarray(flow[..., 0], dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(flow[..., 1], dtype="<f4").tobytes())


def read_flow(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated flow header")
    W, H = struct.unpack("<II", data[:8])
    need = 8 + 2 * 4 * W * H
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes for a {W}x{H} flow, found {len(data)}")
    planes = np.frombuffer(data[8:], dtype="<f4").reshape(2, H, W)
    return np.stack([planes[0], planes[1]], axis=-1).astype(np.float64)
