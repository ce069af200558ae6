"""Dense rootSIFT-style descriptors, argmax pixel classes and color statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .imagery import check_image, to_gray


@dataclass(frozen=True)
class DescriptorParams:
    """Geometry of the dense descriptor.

    ``patch_size`` pixels are split into ``cells x cells`` spatial cells, each
    holding a ``bins``-bin orientation histogram. Samples are weighted by a
    Gaussian of standard deviation ``sigma`` centred on the pixel.
    """

    patch_size: int = 16
    cells: int = 4
    bins: int = 8
    sigma: float = 8.0

    @property
    def dims(self) -> int:
        return self.cells * self.cells * self.bins

    @property
    def cell_width(self) -> float:
        return self.patch_size / self.cells


def _spatial_kernels(params: DescriptorParams) -> list[np.ndarray]:
    """1-D correlation kernels, one per cell row/column.

    Each kernel is a triangular (bilinear) cell assignment times the
    Gaussian window. Offsets are symmetric about the pixel, so rotating the
    image by 90 degrees permutes cells exactly.
    """
    w = params.cell_width
    centers = (np.arange(params.cells) - (params.cells - 1) / 2.0) * w
    radius = int(np.ceil(np.abs(centers).max() + w)) - 1
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    gauss = np.exp(-(d**2) / (2 * params.sigma**2))
    return [gauss * np.maximum(0.0, 1.0 - np.abs(d - c) / w) for c in centers]


def orientation_channels(gray: np.ndarray, bins: int) -> np.ndarray:
    """Gradient magnitude split linearly between the two nearest orientation bins.

    Returns a ``(bins, H, W)`` stack. Gradients use central differences on a
    mirror-padded image.
    """
    gy = ndimage.correlate1d(gray, [-0.5, 0.0, 0.5], axis=0, mode="mirror")
    gx = ndimage.correlate1d(gray, [-0.5, 0.0, 0.5], axis=1, mode="mirror")
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    pos = theta / (2 * np.pi) * bins
    b0 = np.floor(pos).astype(np.int64)
    frac = pos - b0
    b0 %= bins
    b1 = (b0 + 1) % bins
    out = np.zeros((bins,) + gray.shape)
    for b in range(bins):
        out[b] = mag * ((b0 == b) * (1.0 - frac) + (b1 == b) * frac)
    return out


def rootsift_normalize(desc: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """L1-normalize along the last axis then take the elementwise square root.

    Vectors with L1 norm below ``eps`` become exactly zero.
    """
    desc = np.maximum(desc, 0.0)
    l1 = desc.sum(axis=-1, keepdims=True)
    safe = np.where(l1 > eps, l1, 1.0)
    out = np.sqrt(desc / safe)
    out *= l1 > eps
    return out


def dense_descriptors(image: np.ndarray, params: DescriptorParams | None = None) -> np.ndarray:
    """Per-pixel gradient-orientation histograms, rootSIFT normalized.

    Returns a float32 ``(H, W, D)`` array with
    ``D = cells * cells * bins``; channel ``(cy * cells + cx) * bins + o``
    holds orientation ``o`` of spatial cell ``(cy, cx)``.
    """
    params = params or DescriptorParams()
    image = check_image(image)
    h, w = image.shape[:2]
    if h < params.patch_size or w < params.patch_size:
        raise ContractError(
            f"image {w}x{h} is smaller than the {params.patch_size}px descriptor patch"
        )
    chans = orientation_channels(to_gray(image), params.bins)
    kernels = _spatial_kernels(params)
    out = np.empty((h, w, params.dims), dtype=np.float64)
    for o in range(params.bins):
        for cx, kx in enumerate(kernels):
            hx = ndimage.correlate1d(chans[o], kx, axis=1, mode="mirror")
            for cy, ky in enumerate(kernels):
                out[:, :, (cy * params.cells + cx) * params.bins + o] = ndimage.correlate1d(
                    hx, ky, axis=0, mode="mirror"
                )
    return rootsift_normalize(out).astype(np.float32)


def classify_pixels(field: np.ndarray) -> np.ndarray:
    """Cluster index per pixel: argmax over channels after ReLU.

    Softmax and sigmoid are strictly increasing per channel, so they do not
    change the argmax and are not evaluated. Ties go to the lowest channel.
    """
    field = np.asarray(field)
    return np.argmax(np.maximum(field, 0), axis=-1).astype(np.int32)


def _region_pixels(image: np.ndarray, region) -> np.ndarray:
    if isinstance(region, np.ndarray) and region.dtype == bool:
        return image[region]
    ys, xs = region
    return image[np.asarray(ys), np.asarray(xs)]


def color_stats(image: np.ndarray, region) -> np.ndarray:
    """Channel means and population standard deviations over ``region``.

    ``region`` is a boolean mask or a ``(ys, xs)`` pair of index arrays.
    Returns ``[mu_r, mu_g, mu_b, sigma_r, sigma_g, sigma_b]``.
    """
    px = _region_pixels(np.asarray(image, dtype=np.float64), region)
    if px.shape[0] == 0:
        raise ContractError("color_stats needs a nonempty region")
    return np.concatenate([px.mean(axis=0), px.std(axis=0)])


def descriptor_distance(a, b, norm: str = "l1") -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"dimension mismatch {a.shape} vs {b.shape}")
    d = a - b
    if norm == "l1":
        return float(np.abs(d).sum())
    if norm == "l2":
        return float(np.sqrt((d * d).sum()))
    raise ValueError(f"unknown norm {norm!r}")
