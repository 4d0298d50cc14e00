"""Procedural ground-truth scenes with exact sub-pixel motion.

Scenes are continuous functions of (x, y), so a pan by any real offset is
rendered exactly instead of being interpolated.
"""
from __future__ import annotations

import numpy as np


class Scene:
    """Random mixture of Gaussian blobs, soft-edged rectangles and gratings,
    mapped into ``[lo, hi]``.

    ``smooth=True`` drops the rectangles and softens the squashing, leaving a
    band-limited texture without sharp edges or saturated plateaus.
    """

    def __init__(
        self, seed: int, extent: float = 256.0, lo: float = 0.05, hi: float = 1.0, *, smooth: bool = False
    ):
        rng = np.random.default_rng(seed)
        self.lo, self.hi = lo, hi
        self.contrast = 1.0 if smooth else 3.0
        n_blobs = 24
        self.blobs = np.column_stack(
            [
                rng.uniform(-0.25 * extent, 1.25 * extent, (n_blobs, 2)),
                rng.uniform(0.02 * extent, 0.08 * extent, n_blobs),
                rng.uniform(-1.0, 1.0, n_blobs),
            ]
        )
        n_rects = 6
        c = rng.uniform(-0.1 * extent, 1.1 * extent, (n_rects, 2))
        half = rng.uniform(0.05 * extent, 0.2 * extent, (n_rects, 2))
        self.rects = np.column_stack([c, half, rng.uniform(-0.8, 0.8, n_rects)])
        if smooth:
            self.rects = self.rects[:0]
        self.grating = (rng.uniform(0.04, 0.12), rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi))

    def raw(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        v = np.zeros(np.broadcast(x, y).shape)
        for cx, cy, s, a in self.blobs:
            v += a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
        for cx, cy, hx, hy, a in self.rects:
            # logistic edges, ~1.5 px wide
            inside_x = 1 / (1 + np.exp(-(hx - np.abs(x - cx)) / 0.75))
            inside_y = 1 / (1 + np.exp(-(hy - np.abs(y - cy)) / 0.75))
            v += a * inside_x * inside_y
        f, th, ph = self.grating
        v += 0.25 * np.sin(2 * np.pi * f * (x * np.cos(th) + y * np.sin(th)) + ph)
        return v

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        # fixed affine squashing keeps every rendering of the scene consistent
        return self.lo + (self.hi - self.lo) / (1 + np.exp(-self.contrast * self.raw(x, y)))


def render(scene: Scene, shape: tuple[int, int], shift: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Scene content translated by ``shift = (dx, dy)`` pixels."""
    H, W = shape
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    return scene(x - shift[0], y - shift[1])


def pan_video(
    shape: tuple[int, int],
    n_frames: int,
    velocity: tuple[float, float],
    seed: int = 0,
    *,
    smooth: bool = False,
) -> np.ndarray:
    """Frames of a scene translating at ``velocity`` px/frame, values in (0, 1]."""
    scene = Scene(seed, extent=max(shape), smooth=smooth)
    return np.stack([render(scene, shape, (velocity[0] * k, velocity[1] * k)) for k in range(n_frames)])


def static_video(shape: tuple[int, int], n_frames: int, seed: int = 0) -> np.ndarray:
    return pan_video(shape, n_frames, (0.0, 0.0), seed)


def moving_edge_video(shape: tuple[int, int], n_frames: int, speed: float = 2.0) -> np.ndarray:
    """Vertical soft step edge moving right at ``speed`` px/frame."""
    H, W = shape
    x = np.arange(W, dtype=np.float64)[None, :]
    frames = []
    for k in range(n_frames):
        pos = W / 3 + speed * k
        frames.append(np.broadcast_to(0.15 + 0.8 / (1 + np.exp(-(x - pos) / 0.5)), (H, W)))
    return np.stack(frames)


def band_limited_texture(shape: tuple[int, int], seed: int = 0, sigma: float = 3.0, contrast: float = 0.17):
    """Isotropic random texture with a Gaussian spectrum of width ``1/sigma``.

    Returns ``render(shift)``; translations are applied as Fourier phase
    ramps, so sub-pixel shifts are exact (the texture is periodic).
    """
    H, W = shape
    rng = np.random.default_rng(seed)
    spec = np.fft.fft2(rng.standard_normal((H, W)))
    ky = np.fft.fftfreq(H)[:, None]
    kx = np.fft.fftfreq(W)[None, :]
    spec *= np.exp(-2 * (np.pi * sigma) ** 2 * (kx * kx + ky * ky))
    std = np.real(np.fft.ifft2(spec)).std()

    def render_shift(shift: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
        ramp = np.exp(-2j * np.pi * (kx * shift[0] + ky * shift[1]))
        img = np.real(np.fft.ifft2(spec * ramp))
        return np.clip(0.5 + contrast * img / std, 0.02, None)

    return render_shift
