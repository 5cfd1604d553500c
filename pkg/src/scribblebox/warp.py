"""Thin-plate-spline and affine warps for synthesizing training pairs.

A warp maps reference coordinates to current coordinates as
F(p) = A @ (p + tps(p), 1), i.e. a TPS displacement field followed by an
affine map. Images are resampled through the numerically inverted map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NumericError, ParameterError


def tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log(r^2), with U(0) = 0."""
    out = np.zeros_like(r2, dtype=np.float64)
    pos = r2 > 0
    out[pos] = r2[pos] * np.log(r2[pos])
    return out


@dataclass(frozen=True)
class ThinPlateSpline:
    """2-D TPS interpolant fitted to control-point displacements."""

    centers: np.ndarray  # (P, 2)
    weights: np.ndarray  # (P, 2)
    affine: np.ndarray  # (3, 2): rows 1, x, y

    @staticmethod
    def fit(src: np.ndarray, dst: np.ndarray, reg: float = 1e-6) -> "ThinPlateSpline":
        """Fit mapping src -> dst with Tikhonov regularization on the kernel
        block for solvability."""
        src = np.asarray(src, dtype=np.float64)
        dst = np.asarray(dst, dtype=np.float64)
        p = len(src)
        if p < 3:
            raise ParameterError("TPS needs at least 3 control points")
        d2 = ((src[:, None, :] - src[None, :, :]) ** 2).sum(-1)
        k = tps_kernel(d2) + reg * np.eye(p)
        q = np.concatenate([np.ones((p, 1)), src], axis=1)
        sys = np.zeros((p + 3, p + 3), dtype=np.float64)
        sys[:p, :p] = k
        sys[:p, p:] = q
        sys[p:, :p] = q.T
        rhs = np.zeros((p + 3, 2), dtype=np.float64)
        rhs[:p] = dst
        try:
            sol = np.linalg.solve(sys, rhs)
        except np.linalg.LinAlgError as e:
            raise NumericError(f"singular TPS system: {e}") from e
        return ThinPlateSpline(centers=src.copy(), weights=sol[:p], affine=sol[p:])

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        d2 = ((pts[:, None, :] - self.centers[None, :, :]) ** 2).sum(-1)
        u = tps_kernel(d2)
        q = np.concatenate([np.ones((len(pts), 1)), pts], axis=1)
        return u @ self.weights + q @ self.affine


def affine_matrix(
    rotation_deg: float = 0.0,
    scale: float = 1.0,
    translate: tuple[float, float] = (0.0, 0.0),
    flip_x: bool = False,
    center: tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """3x3 homogeneous affine: flip/rotate/scale about `center`, then translate."""
    cx, cy = center
    th = np.deg2rad(rotation_deg)
    c, s = np.cos(th), np.sin(th)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    sc = np.diag([scale * (-1.0 if flip_x else 1.0), scale, 1.0])
    to_origin = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, cx + translate[0]], [0.0, 1.0, cy + translate[1]], [0.0, 0.0, 1.0]])
    return back @ rot @ sc @ to_origin


@dataclass(frozen=True)
class Warp:
    """Forward map F(p) = affine(p + tps displacement(p))."""

    affine: np.ndarray  # (3, 3) homogeneous
    tps: ThinPlateSpline | None = None

    def forward(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        moved = pts + self.tps(pts) if self.tps is not None else pts
        homog = np.concatenate([moved, np.ones((len(moved), 1))], axis=1)
        return (homog @ self.affine.T)[:, :2]

    def inverse(self, pts: np.ndarray, iters: int = 12) -> np.ndarray:
        """Fixed-point inversion: valid for the mild warps used here."""
        pts = np.asarray(pts, dtype=np.float64)
        inv_a = np.linalg.inv(self.affine)
        homog = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
        guess = (homog @ inv_a.T)[:, :2]
        if self.tps is None:
            return guess
        for _ in range(iters):
            err = self.forward(guess) - pts
            step = np.concatenate([err, np.zeros((len(err), 1))], axis=1) @ inv_a.T
            guess = guess - step[:, :2]
        return guess

    @staticmethod
    def identity() -> "Warp":
        return Warp(affine=np.eye(3))


def sample_bilinear(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample (x, y) float coordinates with bilinear weights and edge clamp."""
    im = np.asarray(img, dtype=np.float64)
    h, w = im.shape[:2]
    x = np.clip(coords[:, 0], 0.0, w - 1.0)
    y = np.clip(coords[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if im.ndim == 3:
        fx = fx[:, None]
        fy = fy[:, None]
    top = im[y0, x0] * (1 - fx) + im[y0, x1] * fx
    bot = im[y1, x0] * (1 - fx) + im[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def warp_image(img: np.ndarray, warp: Warp) -> np.ndarray:
    """Render the warped image: output pixel q samples the input at F^-1(q)."""
    im = np.asarray(img, dtype=np.float64)
    h, w = im.shape[:2]
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = warp.inverse(grid)
    vals = sample_bilinear(im, src)
    return vals.reshape(im.shape)


def warp_folds(warp: Warp, extent: tuple[float, float], step: float = 8.0) -> bool:
    """True if the forward map's Jacobian determinant changes sign (or nearly
    vanishes) on a coarse grid over [0, extent]."""
    w, h = extent
    xs = np.arange(0.0, w + step, step)
    ys = np.arange(0.0, h + step, step)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    eps = 0.5
    fx = warp.forward(pts + [eps, 0.0]) - warp.forward(pts - [eps, 0.0])
    fy = warp.forward(pts + [0.0, eps]) - warp.forward(pts - [0.0, eps])
    det = (fx[:, 0] * fy[:, 1] - fx[:, 1] * fy[:, 0]) / (4 * eps * eps)
    ref = np.sign(np.linalg.det(warp.affine[:2, :2]))
    return bool(np.any(det * ref < 1e-3))
