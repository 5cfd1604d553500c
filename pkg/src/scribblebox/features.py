"""Crop geometry and the hand-rolled dense feature extractor.

The extractor stands in for a CNN backbone: per grid cell it emits mean RGB,
an 8-bin gradient-orientation histogram and the normalized cell coordinates
(D = 13 by default). Channel gains are configurable because the propagation
attention works on raw dot products of these features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Box, ParameterError


def to_gray(frame: np.ndarray) -> np.ndarray:
    """Float64 grayscale in [0, 1] from an RGB uint8/float frame."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 3:
        f = f.mean(axis=2)
    if f.max() > 1.0 + 1e-9:
        f = f / 255.0
    return f


def to_float_rgb(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 2:
        f = np.repeat(f[:, :, None], 3, axis=2)
    if f.max() > 1.0 + 1e-9:
        f = f / 255.0
    return f


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    im = np.asarray(img, dtype=np.float64)
    in_h, in_w = im.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if im.ndim == 3:
        fy = fy[:, :, None]
        fx = fx[:, :, None]
    top = im[y0][:, x0] * (1 - fx) + im[y0][:, x1] * fx
    bot = im[y1][:, x0] * (1 - fx) + im[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def upsample_grid(grid: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsample of per-cell values by an integer factor."""
    return resize_bilinear(grid, grid.shape[0] * factor, grid.shape[1] * factor)


def interp_matrix(out_len: int, in_len: int) -> np.ndarray:
    """(out_len, in_len) row-interpolation matrix of the bilinear resize, so
    resize(img) == R_y @ img @ R_x.T; its transpose backpropagates exactly."""
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0.0, in_len - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_len - 1)
    frac = src - lo
    r = np.zeros((out_len, in_len), dtype=np.float64)
    r[np.arange(out_len), lo] += 1.0 - frac
    r[np.arange(out_len), hi] += frac
    return r


@dataclass(frozen=True)
class CropGeometry:
    """Integer pixel window (y0:y1, x0:x1) resampled to a square crop."""

    x0: int
    y0: int
    x1: int
    y1: int
    out_size: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @staticmethod
    def from_box(box: Box, image_shape: tuple[int, int], expand: float, out_size: int) -> "CropGeometry":
        h, w = image_shape[:2]
        bx0, by0, bx1, by1 = box.expand(expand).corners()
        x0 = int(np.clip(np.floor(bx0), 0, w - 1))
        y0 = int(np.clip(np.floor(by0), 0, h - 1))
        x1 = int(np.clip(np.ceil(bx1), x0 + 1, w))
        y1 = int(np.clip(np.ceil(by1), y0 + 1, h))
        return CropGeometry(x0, y0, x1, y1, out_size)

    def crop(self, image: np.ndarray) -> np.ndarray:
        window = image[self.y0 : self.y1, self.x0 : self.x1]
        return resize_bilinear(window, self.out_size, self.out_size)

    def paste(self, crop_values: np.ndarray, canvas_shape: tuple[int, int]) -> np.ndarray:
        """Resample crop values back to the window and write them onto a zero
        canvas of the full frame shape."""
        canvas = np.zeros(canvas_shape[:2], dtype=np.float64)
        canvas[self.y0 : self.y1, self.x0 : self.x1] = resize_bilinear(
            crop_values, self.height, self.width
        )
        return canvas


@dataclass(frozen=True)
class FeatureConfig:
    crop_size: int = 96
    stride: int = 16
    expand: float = 25.0
    n_orient_bins: int = 8
    rgb_gain: float = 1.0
    grad_gain: float = 1.0
    coord_gain: float = 1.0
    # When set, a constant (homogeneous) channel is appended and each cell's
    # vector is L2-normalized to this norm. Equal norms make the propagation
    # attention (softmax of raw dot products) rank by direction rather than
    # by brightness; the homogeneous channel keeps overall brightness visible
    # after normalization. None keeps the raw 13-channel features.
    norm_gain: float | None = None
    bias_value: float = 2.0

    def __post_init__(self):
        if self.crop_size % self.stride != 0:
            raise ParameterError("crop_size must be a multiple of stride")

    @property
    def grid_size(self) -> int:
        return self.crop_size // self.stride

    @property
    def dim(self) -> int:
        return 3 + self.n_orient_bins + 2 + (1 if self.norm_gain is not None else 0)


@dataclass(frozen=True)
class FeatureGrid:
    """Dense per-cell features: data has shape (H', W', D)."""

    data: np.ndarray
    stride: int

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.dim)


def _cell_mean(values: np.ndarray, stride: int) -> np.ndarray:
    """Mean over stride x stride cells; values is (H, W) or (H, W, C)."""
    h, w = values.shape[:2]
    gh, gw = h // stride, w // stride
    if values.ndim == 2:
        return values.reshape(gh, stride, gw, stride).mean(axis=(1, 3))
    c = values.shape[2]
    return values.reshape(gh, stride, gw, stride, c).mean(axis=(1, 3))


def features_from_crop(crop_rgb: np.ndarray, cfg: FeatureConfig) -> FeatureGrid:
    """Feature grid of an already-resampled square RGB crop in [0, 1]."""
    s = cfg.stride
    rgb = np.asarray(crop_rgb, dtype=np.float64)
    gray = rgb.mean(axis=2)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    nb = cfg.n_orient_bins
    bins = np.minimum((theta / (2.0 * np.pi / nb)).astype(int), nb - 1)
    h, w = gray.shape
    gh, gw = h // s, w // s
    hist = np.zeros((gh, gw, nb), dtype=np.float64)
    cell_y = np.arange(h) // s
    cell_x = np.arange(w) // s
    flat_cell = (cell_y[:, None] * gw + cell_x[None, :]).ravel()
    np.add.at(hist.reshape(-1, nb), (flat_cell, bins.ravel()), mag.ravel())
    hist /= float(s * s)
    mean_rgb = _cell_mean(rgb, s)
    ys = (np.arange(gh) + 0.5) / gh
    xs = (np.arange(gw) + 0.5) / gw
    coord = np.stack(np.broadcast_arrays(ys[:, None], xs[None, :]), axis=2)[..., ::-1]
    data = np.concatenate(
        [
            cfg.rgb_gain * mean_rgb,
            cfg.grad_gain * hist,
            cfg.coord_gain * coord,
        ],
        axis=2,
    )
    if cfg.norm_gain is not None:
        bias = np.full((gh, gw, 1), cfg.bias_value)
        data = np.concatenate([data, bias], axis=2)
        norms = np.linalg.norm(data, axis=2, keepdims=True)
        data = data * (cfg.norm_gain / np.maximum(norms, 1e-12))
    return FeatureGrid(data=data, stride=s)


def extract_features(frame: np.ndarray, box: Box, cfg: FeatureConfig) -> tuple[FeatureGrid, CropGeometry]:
    """Crop the frame around `box` (expanded per config) and featurize it."""
    if box.w <= 0 or box.h <= 0:
        raise ParameterError("zero-area box")
    geo = CropGeometry.from_box(box, frame.shape, cfg.expand, cfg.crop_size)
    crop = geo.crop(to_float_rgb(frame))
    return features_from_crop(crop, cfg), geo


def mask_to_grid(mask_crop: np.ndarray, stride: int) -> np.ndarray:
    """Per-cell mean of a crop-resolution mask."""
    return _cell_mean(np.asarray(mask_crop, dtype=np.float64), stride)


def scribbles_to_grid(positive: np.ndarray, negative: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Majority-vote downsampling of pixel scribbles to the cell grid; cells
    with a tie (or no strokes) stay background so the channels remain disjoint."""
    pos_n = _cell_mean(np.asarray(positive, dtype=np.float64), stride)
    neg_n = _cell_mean(np.asarray(negative, dtype=np.float64), stride)
    pos = pos_n > neg_n
    neg = neg_n > pos_n
    return pos, neg


def embed_conv(grid: FeatureGrid, weights: np.ndarray) -> FeatureGrid:
    """3x3-neighborhood linear projection per cell with zero padding.

    weights has shape (d, 3, 3, D)."""
    d_out = weights.shape[0]
    h, w, d = grid.data.shape
    if weights.shape != (d_out, 3, 3, d):
        raise ParameterError(f"embed weights shape {weights.shape} != (d, 3, 3, {d})")
    cols = embed_patches(grid)
    out = cols @ weights.reshape(d_out, -1).T
    return FeatureGrid(data=out.reshape(h, w, d_out), stride=grid.stride)


def embed_patches(grid: FeatureGrid) -> np.ndarray:
    """(H'*W', 9*D) zero-padded 3x3 patch matrix; column order matches
    embed_conv's weight flattening (dy, dx, channel)."""
    data = grid.data
    h, w, d = data.shape
    padded = np.zeros((h + 2, w + 2, d), dtype=np.float64)
    padded[1:-1, 1:-1] = data
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    # windows: (h, w, d, 3, 3) -> (h, w, 3, 3, d)
    cols = np.moveaxis(windows, 2, 4).reshape(h * w, 9 * d)
    return cols
