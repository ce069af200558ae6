"""Image and flow-field I/O, flow coloring and evaluation metrics.

Images are ``(H, W, 3)`` float64 arrays with samples in ``[0, 1]``.
Flow fields carry float32 ``u``/``v`` planes plus a boolean validity mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image as PILImage

from .errors import ContractError, FlowFormatError, FlowLengthError, UndefinedMetricError

FLO_MAGIC = np.float32(202021.25)
FLO_UNKNOWN_THRESHOLD = 1e9
FLO_UNKNOWN_VALUE = np.float32(1e10)
KITTI_OFFSET = 2**15
KITTI_SCALE = 64.0
FI_ABS_THRESHOLD = 3.0
FI_REL_THRESHOLD = 0.05


@dataclass
class FlowField:
    """Dense displacement field; ``u`` is horizontal, ``v`` vertical, in pixels."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.u.ndim != 2 or self.u.shape != self.v.shape or self.u.shape != self.valid.shape:
            raise ContractError(
                f"u, v and valid must share one 2-D shape, got "
                f"{self.u.shape}, {self.v.shape}, {self.valid.shape}"
            )

    @classmethod
    def from_uv(cls, u, v, valid=None) -> "FlowField":
        u = np.asarray(u, dtype=np.float32)
        if valid is None:
            valid = np.ones(u.shape, dtype=bool)
        return cls(u, v, valid)

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        z = np.zeros((height, width), dtype=np.float32)
        return cls(z, z.copy(), np.ones((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def stack(self) -> np.ndarray:
        """Return the ``(H, W, 2)`` float32 array of ``(u, v)``."""
        return np.stack([self.u, self.v], axis=-1)

    def __neg__(self) -> "FlowField":
        return FlowField(-self.u, -self.v, self.valid.copy())


@dataclass(frozen=True)
class FlowMetrics:
    epe_all: float
    epe_valid_count: int
    fi_rate: float
    fi_outlier_count: int


# ---------------------------------------------------------------------------
# images


def read_image(path) -> np.ndarray:
    """Load a lossless raster as float RGB in ``[0, 1]``.

    16-bit rasters are scaled by 65535, everything else by 255. Grayscale
    inputs are replicated to three channels and alpha is dropped.
    """
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot read image {path}")
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    if raw.ndim == 2:
        rgb = np.repeat(raw[:, :, None], 3, axis=2)
    else:
        rgb = raw[:, :, 2::-1] if raw.shape[2] >= 3 else np.repeat(raw[:, :, :1], 3, axis=2)
    img = rgb.astype(np.float64) / scale
    return np.ascontiguousarray(img)


def write_image(path, image: np.ndarray) -> None:
    """Write a float ``[0, 1]`` RGB (or single-channel) image as 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(str(path))


def to_gray(image: np.ndarray) -> np.ndarray:
    """Channel mean ``(r + g + b) / 3``."""
    return np.asarray(image, dtype=np.float64).mean(axis=2)


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ContractError("image must be at least 1x1")
    if not np.all(np.isfinite(image)):
        raise ContractError("image contains non-finite samples")
    return image


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flow_flo(flow: FlowField, path) -> None:
    """Write ``flow`` in the Middlebury ``.flo`` layout (little endian).

    Invalid pixels are written as ``1e10`` in both channels.
    """
    u = flow.u.astype("<f4", copy=True)
    v = flow.v.astype("<f4", copy=True)
    u[~flow.valid] = FLO_UNKNOWN_VALUE
    v[~flow.valid] = FLO_UNKNOWN_VALUE
    payload = np.stack([u, v], axis=-1)
    header = np.array([FLO_MAGIC], dtype="<f4").tobytes()
    header += np.array([flow.width, flow.height], dtype="<i4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_flow_flo(path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowLengthError(f"{path}: header truncated ({len(data)} bytes)")
    magic = np.frombuffer(data, dtype="<f4", count=1)[0]
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
    width, height = (int(x) for x in np.frombuffer(data, dtype="<i4", count=2, offset=4))
    if width < 1 or height < 1:
        raise FlowFormatError(f"{path}: invalid dimensions {width}x{height}")
    expected = 12 + width * height * 8
    if len(data) < expected:
        raise FlowLengthError(f"{path}: payload truncated, {len(data)} of {expected} bytes")
    payload = np.frombuffer(data, dtype="<f4", count=width * height * 2, offset=12)
    payload = payload.reshape(height, width, 2).astype(np.float32)
    u = payload[:, :, 0].copy()
    v = payload[:, :, 1].copy()
    valid = (
        np.isfinite(u)
        & np.isfinite(v)
        & (np.abs(u) <= FLO_UNKNOWN_THRESHOLD)
        & (np.abs(v) <= FLO_UNKNOWN_THRESHOLD)
    )
    u[~valid] = 0.0
    v[~valid] = 0.0
    return FlowField(u, v, valid)


# ---------------------------------------------------------------------------
# KITTI 16-bit PNG


def write_flow_kitti(flow: FlowField, path) -> None:
    """Write a KITTI flow PNG: ``ch = u * 64 + 2**15`` rounded, third channel = validity."""
    ch1 = np.clip(np.rint(flow.u.astype(np.float64) * KITTI_SCALE + KITTI_OFFSET), 0, 65535)
    ch2 = np.clip(np.rint(flow.v.astype(np.float64) * KITTI_SCALE + KITTI_OFFSET), 0, 65535)
    ch3 = flow.valid.astype(np.float64)
    ch1[~flow.valid] = 0
    ch2[~flow.valid] = 0
    rgb = np.stack([ch1, ch2, ch3], axis=-1).astype(np.uint16)
    # OpenCV expects BGR order.
    if not cv2.imwrite(str(path), rgb[:, :, ::-1]):
        raise OSError(f"cannot write {path}")


def read_flow_kitti(path) -> FlowField:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot read {path}")
    if raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 3:
        raise FlowFormatError(
            f"{path}: KITTI flow must be a 16-bit 3-channel raster, got {raw.dtype} {raw.shape}"
        )
    rgb = raw[:, :, ::-1].astype(np.float64)
    valid = rgb[:, :, 2] > 0
    u = (rgb[:, :, 0] - KITTI_OFFSET) / KITTI_SCALE
    v = (rgb[:, :, 1] - KITTI_OFFSET) / KITTI_SCALE
    u[~valid] = 0.0
    v[~valid] = 0.0
    return FlowField(u, v, valid)


def read_flow(path) -> FlowField:
    """Dispatch on extension: ``.flo`` is Middlebury, ``.png`` is KITTI."""
    suffix = Path(path).suffix.lower()
    if suffix == ".flo":
        return read_flow_flo(path)
    if suffix == ".png":
        return read_flow_kitti(path)
    raise FlowFormatError(f"{path}: unknown flow extension {suffix!r}")


def write_flow(flow: FlowField, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".flo":
        write_flow_flo(flow, path)
    elif suffix == ".png":
        write_flow_kitti(flow, path)
    else:
        raise FlowFormatError(f"{path}: unknown flow extension {suffix!r}")


# ---------------------------------------------------------------------------
# color coding


def make_color_wheel() -> np.ndarray:
    """Middlebury color wheel, 55 RGB entries in ``[0, 1]``."""
    segments = [(15, (1, 0, 0), (1, 1, 0)), (6, (1, 1, 0), (0, 1, 0)), (4, (0, 1, 0), (0, 1, 1)),
                (11, (0, 1, 1), (0, 0, 1)), (13, (0, 0, 1), (1, 0, 1)), (6, (1, 0, 1), (1, 0, 0))]
    rows = []
    for n, start, end in segments:
        t = np.arange(n)[:, None] / n
        rows.append((1 - t) * np.array(start, float) + t * np.array(end, float))
    return np.concatenate(rows, axis=0)


_WHEEL = make_color_wheel()


def colorize_polar(angle: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Map flow direction ``angle`` (radians) and normalized ``radius`` to RGB.

    ``radius`` is clamped to ``[0, 1]``; at 0 the color is white, at 1 the
    fully saturated wheel color.
    """
    ncols = len(_WHEEL)
    pos = np.mod(angle / (2 * np.pi), 1.0) * ncols
    k0 = np.floor(pos).astype(int) % ncols
    k1 = (k0 + 1) % ncols
    f = (pos - np.floor(pos))[..., None]
    col = (1 - f) * _WHEEL[k0] + f * _WHEEL[k1]
    r = np.clip(radius, 0.0, 1.0)[..., None]
    return 1.0 - r * (1.0 - col)


def flow_to_color(flow: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    """Render ``flow`` with the Middlebury color wheel.

    Hue follows ``atan2(v, u)``; saturation grows with magnitude up to
    ``max_magnitude`` (the largest valid magnitude when ``None``) and clamps
    beyond it. Invalid pixels are black.
    """
    u = flow.u.astype(np.float64)
    v = flow.v.astype(np.float64)
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag[flow.valid].max()) if flow.valid.any() else 1.0
    if max_magnitude <= 0:
        max_magnitude = 1.0
    img = colorize_polar(np.arctan2(v, u), mag / max_magnitude)
    img[~flow.valid] = 0.0
    return img


# ---------------------------------------------------------------------------
# metrics


def flow_metrics(pred: FlowField, gt: FlowField, mask: np.ndarray | None = None) -> FlowMetrics:
    """EPE and Fl outlier rate over pixels valid in ``gt`` (and in ``mask`` if given)."""
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    sel = gt.valid.copy()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise ContractError(f"mask shape {mask.shape} does not match {gt.shape}")
        sel &= mask
    n = int(sel.sum())
    if n == 0:
        raise UndefinedMetricError("no valid ground-truth pixels")
    du = pred.u[sel].astype(np.float64) - gt.u[sel].astype(np.float64)
    dv = pred.v[sel].astype(np.float64) - gt.v[sel].astype(np.float64)
    err = np.sqrt(du * du + dv * dv)
    gt_mag = np.hypot(gt.u[sel].astype(np.float64), gt.v[sel].astype(np.float64))
    outliers = int(np.count_nonzero((err > FI_ABS_THRESHOLD) & (err > FI_REL_THRESHOLD * gt_mag)))
    return FlowMetrics(float(err.mean()), n, outliers / n, outliers)


def epe(pred: FlowField, gt: FlowField, mask=None) -> FlowMetrics:
    """Average endpoint error; the returned metrics also carry the Fl rate."""
    return flow_metrics(pred, gt, mask)


def fi_rate(pred: FlowField, gt: FlowField, mask=None) -> FlowMetrics:
    """Fl outlier rate (error > 3 px and > 5% of |gt|); also carries EPE."""
    return flow_metrics(pred, gt, mask)
