"""Grayscale image sequences and packed bit-plane streams.

Bit-plane stream file (``.qbps``), little endian::

    b"QBPS" | u32 width | u32 height | u32 frame_count | payload

Each frame is packed row-major, most significant bit first, and padded to
``ceil(width * height / 8)`` bytes, so the payload is exactly
``ceil(width * height / 8) * frame_count`` bytes.
"""
from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, InputDomainError

log = logging.getLogger(__name__)

MAGIC = b"QBPS"


@dataclass
class VideoClip:
    """Equally sized grayscale frames, shape (N, H, W).

    ``n_bits`` tags integer low-bit readouts; ``None`` means real-valued
    frames (flux or intensities normalized to [0, 1]).
    """

    frames: np.ndarray
    frame_rate: float | None = None
    metadata: dict = field(default_factory=dict)
    n_bits: int | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim == 2:
            frames = frames[None]
        if frames.ndim != 3 or frames.shape[0] < 1:
            raise InputDomainError(f"a clip needs at least one 2-D frame, got shape {frames.shape}")
        self.frames = frames

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]


@dataclass
class BitPlaneStream:
    planes: np.ndarray  # bool, (F, H, W)
    frame_rate: float | None = None

    def __post_init__(self):
        planes = np.asarray(self.planes)
        if planes.ndim != 3:
            raise InputDomainError(f"bit planes must be (F, H, W), got shape {planes.shape}")
        self.planes = planes.astype(bool)

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def frame_count(self) -> int:
        return self.planes.shape[0]


# ---------------------------------------------------------------- PGM / PNG


def _read_pgm(path: Path) -> tuple[np.ndarray, int]:
    data = path.read_bytes()
    # header: magic, width, height, maxval separated by whitespace, comments allowed
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    pos += 1  # single whitespace byte after maxval
    if maxval < 256:
        dtype, bits = np.uint8, 8
    elif maxval < 65536:
        dtype, bits = np.dtype(">u2"), 16
    else:
        raise FormatError(f"{path}: PGM maxval {maxval} unsupported")
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < n:
        raise FormatError(f"{path}: PGM payload shorter than {w}x{h}")
    img = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return img.astype(np.uint16 if bits == 16 else np.uint8), bits


def _write_pgm(path: Path, img: np.ndarray, bits: int) -> None:
    h, w = img.shape
    maxval = 255 if bits == 8 else 65535
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    payload = img.astype(np.uint8 if bits == 8 else ">u2").tobytes()
    path.write_bytes(header + payload)


def _read_png(path: Path) -> tuple[np.ndarray, int]:
    with Image.open(path) as im:
        mode = im.mode
        arr = np.array(im)
    if mode == "L":
        return arr.astype(np.uint8), 8
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return arr.astype(np.uint16), 16
    raise FormatError(f"{path}: unsupported PNG mode {mode!r} (grayscale 8/16-bit only)")


def read_image(path: str | Path) -> tuple[np.ndarray, int]:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return _read_pgm(path)
    if suffix == ".png":
        return _read_png(path)
    raise FormatError(f"{path}: unsupported image format {suffix!r}")


def write_image(path: str | Path, img: np.ndarray, bits: int) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        _write_pgm(path, img, bits)
    elif path.suffix.lower() == ".png":
        Image.fromarray(img.astype(np.uint8 if bits == 8 else np.uint16)).save(path)
    else:
        raise FormatError(f"{path}: unsupported image format")


def _pattern_regex(pattern: str) -> re.Pattern:
    if pattern.count("*") != 1:
        raise InputDomainError(f"pattern must contain exactly one '*' for the frame index: {pattern!r}")
    head, tail = pattern.split("*")
    return re.compile(re.escape(head) + r"(\d+)" + re.escape(tail) + r"\Z")


def read_image_sequence(
    directory: str | Path, pattern: str = "frame_*.pgm", *, normalize: bool = True
) -> VideoClip:
    """Load ``pattern`` matches ordered by their numeric index.

    With ``normalize`` the values are mapped to [0, 1] (8-bit by /255, 16-bit
    by /65535); otherwise the stored integers are returned unchanged.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"{directory}: not a directory")
    rx = _pattern_regex(pattern)
    found: dict[int, tuple[Path, int]] = {}
    for p in directory.iterdir():
        m = rx.match(p.name)
        if m:
            found[int(m.group(1))] = (p, len(m.group(1)))
    if not found:
        raise FormatError(f"{directory}: no files match {pattern!r}")
    lo, hi = min(found), max(found)
    width = max(w for _, w in found.values())
    missing = [i for i in range(lo, hi + 1) if i not in found]
    if missing:
        names = ", ".join(pattern.replace("*", f"{i:0{width}d}") for i in missing)
        raise FormatError(f"{directory}: sequence has gaps, missing {names}")
    frames = []
    depth = None
    for i in range(lo, hi + 1):
        img, bits = read_image(found[i][0])
        if frames and img.shape != frames[0].shape:
            raise FormatError(
                f"{found[i][0].name}: size {img.shape} differs from first frame {frames[0].shape}"
            )
        depth = bits if depth is None else max(depth, bits)
        frames.append(img)
    stack = np.stack(frames)
    if normalize:
        return VideoClip(stack / (255.0 if depth == 8 else 65535.0), metadata={"bit_depth": depth})
    return VideoClip(stack.astype(np.int64), metadata={"bit_depth": depth})


def write_image_sequence(
    clip: VideoClip,
    directory: str | Path,
    bit_depth: int = 16,
    *,
    pattern: str = "frame_*.pgm",
    raw: bool = False,
) -> int:
    """Write every frame of ``clip``; returns how many values were clamped.

    Real-valued frames are clamped to [0, 1] and quantized to ``bit_depth``.
    With ``raw=True`` the integer values are stored unchanged (quanta frames).
    """
    if not isinstance(clip, VideoClip):
        clip = VideoClip(clip)
    if bit_depth not in (8, 16):
        raise InputDomainError(f"bit_depth must be 8 or 16, got {bit_depth}")
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc}") from exc
    peak = (1 << bit_depth) - 1
    frames = np.asarray(clip.frames)
    if raw:
        clamped = int(np.count_nonzero((frames < 0) | (frames > peak)))
        q = np.clip(frames, 0, peak).astype(np.int64)
    else:
        f = np.asarray(frames, dtype=np.float64)
        clamped = int(np.count_nonzero((f < 0) | (f > 1) | np.isnan(f)))
        f = np.clip(np.nan_to_num(f, nan=0.0), 0.0, 1.0)
        q = np.floor(f * peak + 0.5).astype(np.int64)
    if clamped:
        log.warning("clamped %d values outside the writable range while writing %s", clamped, directory)
    n = len(frames)
    width = max(4, len(str(n - 1)))
    for i in range(n):
        write_image(directory / pattern.replace("*", f"{i:0{width}d}"), q[i], bit_depth)
    return clamped


# ---------------------------------------------------------------- bit planes


def frame_bytes(width: int, height: int) -> int:
    return -(-(width * height) // 8)


def pack_bit_planes(stream: BitPlaneStream) -> bytes:
    F, H, W = stream.planes.shape
    header = MAGIC + struct.pack("<III", W, H, F)
    flat = stream.planes.reshape(F, H * W)
    payload = np.packbits(flat, axis=1, bitorder="big")
    return header + payload.tobytes()


def unpack_bit_planes(data: bytes, frame_rate: float | None = None) -> BitPlaneStream:
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError("not a QBPS bit-plane stream (bad magic)")
    W, H, F = struct.unpack("<III", data[4:16])
    nb = frame_bytes(W, H)
    if len(data) - 16 != nb * F:
        raise FormatError(
            f"QBPS payload is {len(data) - 16} bytes, expected {nb * F} for {F} frames of {W}x{H}"
        )
    raw = np.frombuffer(data, dtype=np.uint8, offset=16).reshape(F, nb)
    bits = np.unpackbits(raw, axis=1, count=W * H, bitorder="big")
    return BitPlaneStream(bits.reshape(F, H, W).astype(bool), frame_rate=frame_rate)


def write_bit_planes(path: str | Path, stream: BitPlaneStream) -> None:
    Path(path).write_bytes(pack_bit_planes(stream))


def read_bit_planes(path: str | Path, frame_rate: float | None = None) -> BitPlaneStream:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read bit-plane stream {path}: {exc}") from exc
    try:
        return unpack_bit_planes(data, frame_rate)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def sum_bit_planes(
    stream: BitPlaneStream, group_size: int = 7, target_bits: int = 3, *, clamp: bool = False
) -> VideoClip:
    """Sum consecutive groups of binary frames into ``target_bits`` frames.

    A trailing partial group is dropped.
    """
    if group_size < 1:
        raise InputDomainError(f"group_size must be >= 1, got {group_size}")
    if target_bits < 1:
        raise InputDomainError(f"target_bits must be >= 1, got {target_bits}")
    peak = (1 << target_bits) - 1
    if group_size > peak and not clamp:
        raise InputDomainError(
            f"a group of {group_size} binary frames can reach {group_size}, beyond the "
            f"{target_bits}-bit maximum {peak}; enable clamping or use more bits"
        )
    n_groups = stream.frame_count // group_size
    if n_groups == 0:
        raise InputDomainError(
            f"stream has {stream.frame_count} frames, fewer than one group of {group_size}"
        )
    used = stream.planes[: n_groups * group_size].reshape(
        n_groups, group_size, stream.height, stream.width
    )
    sums = used.sum(axis=1, dtype=np.int64)
    if clamp:
        np.minimum(sums, peak, out=sums)
    rate = stream.frame_rate / group_size if stream.frame_rate else None
    return VideoClip(
        sums,
        frame_rate=rate,
        metadata={"group_size": group_size, "dropped_frames": stream.frame_count - n_groups * group_size},
        n_bits=target_bits,
    )
