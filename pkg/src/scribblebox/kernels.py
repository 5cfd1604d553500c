"""Hot numeric kernels: numba-jitted inner loops with pure-numpy fallbacks.

The backend is chosen once at import time from the SCRIBBLEBOX_NUMBA env var
("0"/"false"/"off" forces the numpy path). `set_backend()` switches at runtime,
which the kernel benchmark uses to time both paths on identical inputs.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is a declared dependency
    njit = None
    _HAVE_NUMBA = False


def _env_wants_numba() -> bool:
    flag = os.environ.get("SCRIBBLEBOX_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


_USE_NUMBA = _HAVE_NUMBA and _env_wants_numba()


def set_backend(use_numba: bool) -> None:
    """Force the kernel backend; raises if numba is requested but missing."""
    global _USE_NUMBA
    if use_numba and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _USE_NUMBA = bool(use_numba)


def backend_name() -> str:
    return "numba" if _USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Zero-normalized cross-correlation score map


def _zncc_scores_np(search: np.ndarray, tmpl: np.ndarray) -> np.ndarray:
    sh, sw = search.shape
    th, tw = tmpl.shape
    oh, ow = sh - th + 1, sw - tw + 1
    if oh <= 0 or ow <= 0:
        return np.empty((0, 0), dtype=np.float64)
    t = tmpl - tmpl.mean()
    t_norm = np.sqrt((t * t).sum())
    # Window sums via integral images; cross terms via shifted-slice accumulation.
    pad = np.zeros((sh + 1, sw + 1), dtype=np.float64)
    pad[1:, 1:] = np.cumsum(np.cumsum(search, axis=0), axis=1)
    win_sum = pad[th:, tw:] - pad[:-th, tw:] - pad[th:, :-tw] + pad[:-th, :-tw]
    pad2 = np.zeros((sh + 1, sw + 1), dtype=np.float64)
    pad2[1:, 1:] = np.cumsum(np.cumsum(search * search, axis=0), axis=1)
    win_sq = pad2[th:, tw:] - pad2[:-th, tw:] - pad2[th:, :-tw] + pad2[:-th, :-tw]
    n = th * tw
    cross = np.zeros((oh, ow), dtype=np.float64)
    for i in range(th):
        for j in range(tw):
            cross += t[i, j] * search[i : i + oh, j : j + ow]
    win_var = np.maximum(win_sq - win_sum * win_sum / n, 0.0)
    denom = t_norm * np.sqrt(win_var)
    scores = np.zeros((oh, ow), dtype=np.float64)
    ok = denom > 1e-12
    # t has zero mean, so cross already equals the centered cross term.
    np.divide(cross, denom, out=scores, where=ok)
    return np.clip(scores, -1.0, 1.0)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _zncc_scores_nb(search, tmpl):  # pragma: no cover - exercised via dispatch
        sh, sw = search.shape
        th, tw = tmpl.shape
        oh, ow = sh - th + 1, sw - tw + 1
        out = np.zeros((oh, ow), dtype=np.float64)
        if oh <= 0 or ow <= 0:
            return out[:0, :0]
        n = th * tw
        t_mean = 0.0
        for i in range(th):
            for j in range(tw):
                t_mean += tmpl[i, j]
        t_mean /= n
        t_sq = 0.0
        for i in range(th):
            for j in range(tw):
                d = tmpl[i, j] - t_mean
                t_sq += d * d
        t_norm = np.sqrt(t_sq)
        for y in range(oh):
            for x in range(ow):
                s_sum = 0.0
                s_sq = 0.0
                cross = 0.0
                for i in range(th):
                    for j in range(tw):
                        v = search[y + i, x + j]
                        s_sum += v
                        s_sq += v * v
                        cross += (tmpl[i, j] - t_mean) * v
                var = s_sq - s_sum * s_sum / n
                if var < 0.0:
                    var = 0.0
                denom = t_norm * np.sqrt(var)
                if denom > 1e-12:
                    sc = cross / denom
                    if sc > 1.0:
                        sc = 1.0
                    elif sc < -1.0:
                        sc = -1.0
                    out[y, x] = sc
        return out


def zncc_scores(search: np.ndarray, tmpl: np.ndarray) -> np.ndarray:
    """Score map of the zero-normalized cross-correlation of `tmpl` over `search`.

    Entry (y, x) scores the placement with template top-left at (y, x);
    flat windows (zero variance on either side) score 0.
    """
    search = np.ascontiguousarray(search, dtype=np.float64)
    tmpl = np.ascontiguousarray(tmpl, dtype=np.float64)
    if _USE_NUMBA:
        return _zncc_scores_nb(search, tmpl)
    return _zncc_scores_np(search, tmpl)


# ---------------------------------------------------------------------------
# Binary morphology on a 3x3 square (pixels outside the image are background)


def _erode3_np(mask: np.ndarray) -> np.ndarray:
    padded = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    out = np.ones_like(mask, dtype=bool)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out &= padded[dy : dy + mask.shape[0], dx : dx + mask.shape[1]]
    return out


if _HAVE_NUMBA:

    @njit(cache=True)
    def _erode3_nb(mask):  # pragma: no cover - exercised via dispatch
        h, w = mask.shape
        out = np.zeros((h, w), dtype=np.bool_)
        for y in range(h):
            for x in range(w):
                if not mask[y, x]:
                    continue
                keep = True
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        yy = y + dy
                        xx = x + dx
                        if yy < 0 or yy >= h or xx < 0 or xx >= w or not mask[yy, xx]:
                            keep = False
                            break
                    if not keep:
                        break
                out[y, x] = keep
        return out


def binary_erode(mask: np.ndarray, iters: int = 1) -> np.ndarray:
    """Iterated binary erosion with a 3x3 square structuring element."""
    cur = np.ascontiguousarray(mask, dtype=bool)
    for _ in range(iters):
        if not cur.any():
            break
        cur = _erode3_nb(cur) if _USE_NUMBA else _erode3_np(cur)
    return cur


def _dilate_sq_np(mask: np.ndarray, radius: int) -> np.ndarray:
    h, w = mask.shape
    padded = np.zeros((h + 2 * radius, w + 2 * radius), dtype=bool)
    padded[radius : radius + h, radius : radius + w] = mask
    # Separable running max: rows then columns.
    rows = np.zeros((h, w + 2 * radius), dtype=bool)
    for dy in range(2 * radius + 1):
        rows |= padded[dy : dy + h, :]
    out = np.zeros((h, w), dtype=bool)
    for dx in range(2 * radius + 1):
        out |= rows[:, dx : dx + w]
    return out


if _HAVE_NUMBA:

    @njit(cache=True)
    def _dilate_sq_nb(mask, radius):  # pragma: no cover - exercised via dispatch
        h, w = mask.shape
        rows = np.zeros((h, w), dtype=np.bool_)
        for y in range(h):
            for x in range(w):
                if mask[y, x]:
                    lo = x - radius
                    hi = x + radius
                    if lo < 0:
                        lo = 0
                    if hi >= w:
                        hi = w - 1
                    for xx in range(lo, hi + 1):
                        rows[y, xx] = True
        out = np.zeros((h, w), dtype=np.bool_)
        for y in range(h):
            for x in range(w):
                if rows[y, x]:
                    lo = y - radius
                    hi = y + radius
                    if lo < 0:
                        lo = 0
                    if hi >= h:
                        hi = h - 1
                    for yy in range(lo, hi + 1):
                        out[yy, x] = True
        return out


def chebyshev_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilate by a (2r+1) x (2r+1) square: Chebyshev distance <= radius."""
    mask = np.ascontiguousarray(mask, dtype=bool)
    if radius <= 0:
        return mask.copy()
    if _USE_NUMBA:
        return _dilate_sq_nb(mask, int(radius))
    return _dilate_sq_np(mask, int(radius))


# ---------------------------------------------------------------------------
# Connected components (8-connectivity)


def _label_np(mask: np.ndarray) -> tuple[np.ndarray, int]:
    h, w = mask.shape
    labels = np.where(mask, np.arange(h * w, dtype=np.int64).reshape(h, w), -1)
    # Min-label propagation over the 8-neighborhood until fixpoint.
    while True:
        prev = labels
        padded = np.full((h + 2, w + 2), np.iinfo(np.int64).max, dtype=np.int64)
        padded[1:-1, 1:-1] = np.where(mask, labels, np.iinfo(np.int64).max)
        best = padded[1:-1, 1:-1].copy()
        for dy in (0, 1, 2):
            for dx in (0, 1, 2):
                best = np.minimum(best, padded[dy : dy + h, dx : dx + w])
        labels = np.where(mask, best, -1)
        if np.array_equal(labels, prev):
            break
    out = np.full((h, w), -1, dtype=np.int64)
    uniq = np.unique(labels[mask]) if mask.any() else np.empty(0, dtype=np.int64)
    for i, u in enumerate(uniq):
        out[labels == u] = i
    return out, len(uniq)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _label_nb(mask):  # pragma: no cover - exercised via dispatch
        h, w = mask.shape
        out = np.full((h, w), -1, dtype=np.int64)
        stack = np.empty((h * w, 2), dtype=np.int64)
        count = 0
        for sy in range(h):
            for sx in range(w):
                if not mask[sy, sx] or out[sy, sx] >= 0:
                    continue
                top = 0
                stack[0, 0] = sy
                stack[0, 1] = sx
                out[sy, sx] = count
                top = 1
                while top > 0:
                    top -= 1
                    y = stack[top, 0]
                    x = stack[top, 1]
                    for dy in range(-1, 2):
                        for dx in range(-1, 2):
                            yy = y + dy
                            xx = x + dx
                            if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and out[yy, xx] < 0:
                                out[yy, xx] = count
                                stack[top, 0] = yy
                                stack[top, 1] = xx
                                top += 1
                count += 1
        return out, count


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected component labels (-1 for background) and the component count.

    Components are numbered in first-touch row-major order on the numba path;
    callers must not rely on label order beyond determinism per backend.
    """
    mask = np.ascontiguousarray(mask, dtype=bool)
    if _USE_NUMBA:
        return _label_nb(mask)
    return _label_np(mask)


# ---------------------------------------------------------------------------
# Nearest-neighbor assignment in embedding space


def _nn_assign_np(ref: np.ndarray, cur: np.ndarray) -> np.ndarray:
    # Direct (c - r)^2 form: exact zeros on identical rows, so argmin's
    # first-occurrence rule implements the lowest-index tie break.
    diff = cur[:, None, :] - ref[None, :, :]
    d = np.einsum("crk,crk->cr", diff, diff)
    return np.argmin(d, axis=1).astype(np.int64)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _nn_assign_nb(ref, cur):  # pragma: no cover - exercised via dispatch
        nc = cur.shape[0]
        nr = ref.shape[0]
        d = cur.shape[1]
        out = np.empty(nc, dtype=np.int64)
        for i in range(nc):
            best = np.inf
            best_j = 0
            for j in range(nr):
                acc = 0.0
                for k in range(d):
                    diff = cur[i, k] - ref[j, k]
                    acc += diff * diff
                if acc < best:
                    best = acc
                    best_j = j
            out[i] = best_j
        return out


def nn_assign(ref: np.ndarray, cur: np.ndarray) -> np.ndarray:
    """Index of the closest reference row (squared L2) for every current row."""
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    cur = np.ascontiguousarray(cur, dtype=np.float64)
    if _USE_NUMBA:
        return _nn_assign_nb(ref, cur)
    return _nn_assign_np(ref, cur)
