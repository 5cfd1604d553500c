"""Losses with hand-derived gradients, synthetic training-pair generation and
the two-stage toy training loop.

All gradients are analytic over numpy arrays and validated against central
finite differences; optimization is SGD with momentum under a triangular2
cyclical learning-rate schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Box, NumericError, ParameterError, ScribbleMap, binarize
from .features import (
    FeatureConfig,
    FeatureGrid,
    CropGeometry,
    embed_patches,
    features_from_crop,
    interp_matrix,
    mask_to_grid,
    scribbles_to_grid,
    to_float_rgb,
)
from .kernels import binary_erode, chebyshev_dilate
from .model import EmbedWeights, SegModel
from .propagation import node_features
from .simulate import SimConfig, simulate_area_scribble
from .warp import ThinPlateSpline, Warp, affine_matrix, warp_folds, warp_image

CLAMP_EPS = 1e-7


# ---------------------------------------------------------------------------
# Losses


def bce_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy over pixels and its gradient wrt pred.

    Predictions are clamped to [eps, 1-eps]; the gradient is zero where the
    clamp is active."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ParameterError("pred/target shapes differ")
    pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    n = p.size
    loss = float(-(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)).mean())
    grad = (-t / pc + (1.0 - t) / (1.0 - pc)) / n
    grad[(p < CLAMP_EPS) | (p > 1.0 - CLAMP_EPS)] = 0.0
    return loss, grad


def scribble_consistency_loss(pred: np.ndarray, scribbles: ScribbleMap) -> tuple[float, np.ndarray]:
    """Sum over pixels of -S_p log(pred) - S_n log(1 - pred), with gradient."""
    p = np.asarray(pred, dtype=np.float64)
    if p.shape != scribbles.shape:
        raise ParameterError("pred/scribble shapes differ")
    pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    sp = scribbles.positive.astype(np.float64)
    sn = scribbles.negative.astype(np.float64)
    loss = float(-(sp * np.log(pc)).sum() - (sn * np.log(1.0 - pc)).sum())
    grad = -sp / pc + sn / (1.0 - pc)
    grad[(p < CLAMP_EPS) | (p > 1.0 - CLAMP_EPS)] = 0.0
    return loss, grad


@dataclass(frozen=True)
class Correspondence:
    """Ground-truth cell matches (reference cell, current cell), flat indices,
    at most one pair per reference cell."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        refs = [r for r, _ in self.pairs]
        if len(set(refs)) != len(refs):
            raise ParameterError("correspondence must be injective on the reference side")


def _triplet_from_embeddings(
    emb_c: np.ndarray,
    emb_r: np.ndarray,
    pairs,
    margin: float,
    clamp: bool,
) -> tuple[float, np.ndarray, np.ndarray, int]:
    """Batch-hard triplet loss over anchors in the current frame; returns
    (loss, grad wrt emb_c, grad wrt emb_r, skipped anchors)."""
    nr = emb_r.shape[0]
    by_anchor: dict[int, list[int]] = {}
    for r, c in pairs:
        by_anchor.setdefault(int(c), []).append(int(r))
    loss = 0.0
    g_c = np.zeros_like(emb_c)
    g_r = np.zeros_like(emb_r)
    skipped = 0
    for c in sorted(by_anchor):
        pos = by_anchor[c]
        if not pos or len(pos) == nr:
            skipped += 1
            continue
        diff = emb_c[c][None, :] - emb_r
        d2 = (diff * diff).sum(axis=1)
        pos_mask = np.zeros(nr, dtype=bool)
        pos_mask[pos] = True
        p_idx = int(np.flatnonzero(pos_mask)[np.argmin(d2[pos_mask])])
        n_idx = int(np.flatnonzero(~pos_mask)[np.argmin(d2[~pos_mask])])
        l = d2[p_idx] - d2[n_idx] + margin
        if clamp and l <= 0.0:
            continue
        loss += l
        g_c[c] += 2.0 * (emb_c[c] - emb_r[p_idx]) - 2.0 * (emb_c[c] - emb_r[n_idx])
        g_r[p_idx] += -2.0 * (emb_c[c] - emb_r[p_idx])
        g_r[n_idx] += 2.0 * (emb_c[c] - emb_r[n_idx])
    return float(loss), g_c, g_r, skipped


def batch_hard_triplet_loss(
    f_c: FeatureGrid,
    f_r: FeatureGrid,
    corr: Correspondence,
    embedder: EmbedWeights,
    margin: float = 0.3,
    clamp: bool = False,
) -> tuple[float, np.ndarray, int]:
    """Sum over current-frame anchors of
    min_pos ||emb(f_c)-emb(f_r+)||^2 - min_neg ||emb(f_c)-emb(f_r-)||^2 + margin,
    exactly as written (optionally hinged at zero via `clamp`). Returns the
    loss, its gradient wrt the embedding weights and the count of skipped
    anchors (those with no positive or no negative)."""
    patches_c = embed_patches(f_c)
    patches_r = embed_patches(f_r)
    e_flat = embedder.e.reshape(embedder.e.shape[0], -1)
    emb_c = patches_c @ e_flat.T
    emb_r = patches_r @ e_flat.T
    loss, g_c, g_r, skipped = _triplet_from_embeddings(
        emb_c, emb_r, corr.pairs, margin, clamp
    )
    grad_flat = g_c.T @ patches_c + g_r.T @ patches_r
    return loss, grad_flat.reshape(embedder.e.shape), skipped


def finite_diff_check(loss_fn, params: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central finite
    differences, coordinate by coordinate."""
    p = np.asarray(params, dtype=np.float64).copy()
    _, grad = loss_fn(p)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    worst = 0.0
    flat = p.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi, _ = loss_fn(p)
        flat[i] = orig - eps
        lo, _ = loss_fn(p)
        flat[i] = orig
        fd = (hi - lo) / (2.0 * eps)
        err = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-3)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Cyclical learning rate


@dataclass(frozen=True)
class CyclicalLRConfig:
    total_steps: int
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    cycles: int = 4
    mode: str = "triangular2"

    def __post_init__(self):
        if not 0.0 < self.lr_min < self.lr_max:
            raise ParameterError("need 0 < lr_min < lr_max")
        if self.total_steps < 1 or self.cycles < 1:
            raise ParameterError("total_steps and cycles must be positive")


def cyclical_lr(step: int, cfg: CyclicalLRConfig) -> float:
    """triangular2 schedule: each cycle ramps lr_min -> peak -> lr_min and the
    peak halves from cycle to cycle, starting at lr_max."""
    if not 0 <= step < cfg.total_steps:
        raise ParameterError(f"step {step} outside [0, {cfg.total_steps})")
    cycle_len = cfg.total_steps / cfg.cycles
    k = min(int(step // cycle_len), cfg.cycles - 1)
    pos = (step - k * cycle_len) / cycle_len
    tri = 1.0 - abs(2.0 * pos - 1.0)
    if cfg.mode == "triangular2":
        peak = cfg.lr_min + (cfg.lr_max - cfg.lr_min) / (2.0**k)
    elif cfg.mode == "triangular":
        peak = cfg.lr_max
    else:
        raise ParameterError(f"unknown CLR mode {cfg.mode!r}")
    return cfg.lr_min + (peak - cfg.lr_min) * tri


# ---------------------------------------------------------------------------
# Synthetic training pairs


@dataclass(frozen=True)
class SynthConfig:
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    flip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_translate_frac: float = 0.05
    corner_disp_frac: float = 0.10
    box_jitter_frac: float = 0.10
    tps_reg: float = 1e-6
    max_attempts: int = 10


@dataclass(frozen=True)
class SynthSample:
    image: np.ndarray  # (S, S, 3) float in [0, 1]
    mask: np.ndarray  # (S, S) float binary
    scribbles: ScribbleMap | None
    features: FeatureGrid


def _degrade_mask(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Fake 'previous prediction' with both kinds of errors: a small shift
    plus an erosion or dilation."""
    m = binarize(mask)
    dy, dx = rng.integers(-5, 6, size=2)
    shifted = np.zeros_like(m)
    h, w = m.shape
    ys0, ys1 = max(0, dy), min(h, h + dy)
    xs0, xs1 = max(0, dx), min(w, w + dx)
    shifted[ys0:ys1, xs0:xs1] = m[ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx]
    if rng.random() < 0.5:
        shifted = binary_erode(shifted, int(rng.integers(1, 3)))
    else:
        shifted = chebyshev_dilate(shifted, int(rng.integers(1, 3)))
    return shifted.astype(np.float64)


def _mask_box_corners(mask: np.ndarray) -> np.ndarray:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    x0, x1 = float(cols[0]), float(cols[-1] + 1)
    y0, y1 = float(rows[0]), float(rows[-1] + 1)
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])


def synth_clip(
    base_frame: np.ndarray,
    base_mask: np.ndarray,
    seed: int,
    cfg: SynthConfig = SynthConfig(),
) -> tuple[SynthSample, SynthSample, Correspondence]:
    """Reference/current training pair: the current sample is a flip+affine+TPS
    warp of the reference crop, and the correspondence forward-warps the
    reference scribble cells. Folding warps are resampled with the next seed."""
    base_mask = binarize(base_mask)
    if not base_mask.any():
        raise ParameterError("base mask is empty")
    fcfg = cfg.feature
    size = fcfg.crop_size
    for attempt in range(cfg.max_attempts):
        rng = np.random.default_rng([int(seed) + attempt, 0x5C12B])
        rows = np.nonzero(base_mask.any(axis=1))[0]
        cols = np.nonzero(base_mask.any(axis=0))[0]
        bw = float(cols[-1] + 1 - cols[0])
        bh = float(rows[-1] + 1 - rows[0])
        cx = (cols[0] + cols[-1] + 1) / 2.0 + rng.uniform(-1, 1) * cfg.box_jitter_frac * bw
        cy = (rows[0] + rows[-1] + 1) / 2.0 + rng.uniform(-1, 1) * cfg.box_jitter_frac * bh
        w = bw * (1.0 + rng.uniform(-1, 1) * cfg.box_jitter_frac)
        h = bh * (1.0 + rng.uniform(-1, 1) * cfg.box_jitter_frac)
        geo = CropGeometry.from_box(Box(cx, cy, max(w, 2.0), max(h, 2.0)), base_frame.shape, fcfg.expand, size)
        ref_img = geo.crop(to_float_rgb(base_frame))
        ref_mask = binarize(geo.crop(base_mask.astype(np.float64))).astype(np.float64)
        if not ref_mask.any():
            continue
        degraded = _degrade_mask(ref_mask, rng)
        scribbles = simulate_area_scribble(degraded, ref_mask, SimConfig())

        # Warp parameters (drawn in a fixed order for determinism).
        flip = rng.random() < cfg.flip_prob
        rot = rng.uniform(-1, 1) * cfg.max_rotation_deg
        scale = rng.uniform(*cfg.scale_range)
        trans = rng.uniform(-1, 1, 2) * cfg.max_translate_frac * size
        sx = size / geo.width
        sy = size / geo.height
        corners_img = _mask_box_corners(ref_mask)
        disp = rng.uniform(-1, 1, (4, 2)) * cfg.corner_disp_frac * np.array(
            [np.ptp(corners_img[:, 0]), np.ptp(corners_img[:, 1])]
        )
        tps = None
        if np.any(disp != 0.0):
            tps = ThinPlateSpline.fit(corners_img, disp, reg=cfg.tps_reg)
        aff = affine_matrix(
            rotation_deg=rot,
            scale=scale,
            translate=(float(trans[0]), float(trans[1])),
            flip_x=flip,
            center=(size / 2.0, size / 2.0),
        )
        warp = Warp(affine=aff, tps=tps)
        if warp_folds(warp, (size - 1.0, size - 1.0)):
            continue
        cur_img = warp_image(ref_img, warp)
        cur_mask = binarize(warp_image(ref_mask, warp)).astype(np.float64)
        if not cur_mask.any():
            continue

        stride = fcfg.stride
        gsize = fcfg.grid_size
        pos_g, neg_g = scribbles_to_grid(scribbles.positive, scribbles.negative, stride)
        labeled = np.flatnonzero((pos_g | neg_g).reshape(-1))
        pairs = []
        if len(labeled):
            centers = np.stack(
                [
                    (labeled % gsize + 0.5) * stride - 0.5,
                    (labeled // gsize + 0.5) * stride - 0.5,
                ],
                axis=1,
            )
            mapped = warp.forward(centers)
            cell_x = np.floor((mapped[:, 0] + 0.5) / stride).astype(int)
            cell_y = np.floor((mapped[:, 1] + 0.5) / stride).astype(int)
            for r, gx, gy in zip(labeled, cell_x, cell_y):
                if 0 <= gx < gsize and 0 <= gy < gsize:
                    pairs.append((int(r), int(gy * gsize + gx)))
        ref = SynthSample(
            image=ref_img,
            mask=ref_mask,
            scribbles=scribbles,
            features=features_from_crop(ref_img, fcfg),
        )
        cur = SynthSample(
            image=cur_img,
            mask=cur_mask,
            scribbles=None,
            features=features_from_crop(cur_img, fcfg),
        )
        return ref, cur, Correspondence(tuple(pairs))
    raise NumericError(f"could not synthesize a fold-free clip from seed {seed}")


@dataclass(frozen=True)
class SynthClip:
    ref: SynthSample
    cur: SynthSample
    corr: Correspondence
    ref_prev: np.ndarray  # degraded mask the scribbles were drawn against


def make_training_clips(n_clips: int, seed: int, cfg: SynthConfig = SynthConfig()) -> list[SynthClip]:
    """Synthetic clips from procedurally rendered base frames."""
    from .storage import SuiteConfig, render_clip

    base_cfg = SuiteConfig(n_clips=1, n_frames=1)
    clips = []
    for i in range(n_clips):
        frames, masks, _ = render_clip([seed, i, 7], base_cfg)
        ref, cur, corr = synth_clip(frames[0], masks[0], seed=seed * 1000 + i, cfg=cfg)
        rng = np.random.default_rng([seed, i, 11])
        prev = _degrade_mask(ref.mask, rng)
        clips.append(SynthClip(ref=ref, cur=cur, corr=corr, ref_prev=prev))
    return clips


# ---------------------------------------------------------------------------
# Toy training loop


@dataclass(frozen=True)
class TrainConfig:
    stage1_steps: int = 600
    stage2_steps: int = 600
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    cycles: int = 4
    momentum: float = 0.9
    triplet_margin: float = 0.3
    # The as-written loss (no hinge) is unbounded below, so training uses the
    # clamped variant by default.
    triplet_clamp: bool = True
    sc_weight: float | None = None  # None -> 1 / crop pixel count
    freeze_stage2: tuple[str, ...] = ("prop.w0", "prop.w1", "prop_readout.w", "prop_readout.b")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


class _Sgd:
    def __init__(self, tensors: dict[str, np.ndarray], momentum: float):
        self.momentum = momentum
        self.vel = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, tensors, grads, lr):
        for name, g in grads.items():
            v = self.vel[name]
            v *= self.momentum
            v -= lr * g
            tensors[name] += v


def train_toy(
    model: SegModel,
    clips: list[SynthClip],
    cfg: TrainConfig = TrainConfig(),
) -> tuple[SegModel, dict[str, list[float]]]:
    """Two-stage training: stage 1 fits the propagation path (graph weights +
    decoder readout) with BCE; stage 2 freezes it and fits the interactive
    head (BCE + scribble consistency), the retrieval embedding (batch-hard
    triplet) and the scribble-merge reducer (BCE through the frozen decoder).
    """
    if not clips:
        raise ParameterError("empty training set")
    fcfg = model.feature_cfg
    size = fcfg.crop_size
    gsize = fcfg.grid_size
    ry = interp_matrix(size, gsize)
    sc_w = cfg.sc_weight if cfg.sc_weight is not None else 1.0 / (size * size)

    tensors = {k: v.astype(np.float64).copy() for k, v in model.to_tensors().items()}

    # Constant per-clip quantities (features and attention don't train).
    cache = []
    for clip in clips:
        ref_nodes = node_features(clip.ref.features, mask_to_grid(clip.ref.mask, fcfg.stride))
        cur_nodes = node_features(clip.cur.features, None)
        logits = cur_nodes @ ref_nodes.T
        logits -= logits.max(axis=1, keepdims=True)
        attn = np.exp(logits)
        attn /= attn.sum(axis=1, keepdims=True)
        agg = attn @ ref_nodes
        pos_g, neg_g = scribbles_to_grid(
            clip.ref.scribbles.positive, clip.ref.scribbles.negative, fcfg.stride
        )
        inter_x = np.concatenate(
            [
                clip.ref.features.flat(),
                mask_to_grid(clip.ref_prev, fcfg.stride).reshape(-1, 1),
                pos_g.reshape(-1, 1).astype(np.float64),
                neg_g.reshape(-1, 1).astype(np.float64),
            ],
            axis=1,
        )
        labels = np.zeros((gsize * gsize, 2))
        labels[..., 0] = pos_g.reshape(-1)
        labels[..., 1] = neg_g.reshape(-1)
        s_gt = np.zeros((gsize * gsize, 2))
        for r, c in clip.corr.pairs:
            s_gt[c] = labels[r]
        cache.append(
            {
                "cur_nodes": cur_nodes,
                "agg": agg,
                "cur_target": clip.cur.mask,
                "ref_target": clip.ref.mask,
                "inter_x": inter_x,
                "s_gt": s_gt,
                "pairs": clip.corr.pairs,
                "patches_c": embed_patches(clip.cur.features),
                "patches_r": embed_patches(clip.ref.features),
                "scribbles": clip.ref.scribbles,
            }
        )

    history: dict[str, list[float]] = {"stage1": [], "stage2": []}

    def decode_backward(z, target, extra_pred_grad=None):
        """Shared decode chain: cell logits -> sigmoid -> upsample -> BCE.
        Returns (loss, grad wrt the cell logits, predicted crop mask)."""
        s = _sigmoid(z).reshape(gsize, gsize)
        pred = ry @ s @ ry.T
        loss, g_pred = bce_loss(pred, target)
        if extra_pred_grad is not None:
            extra_loss, g_extra = extra_pred_grad(pred)
            loss += extra_loss
            g_pred = g_pred + g_extra
        g_s = ry.T @ g_pred @ ry
        g_z = (g_s * s * (1.0 - s)).reshape(-1)
        return loss, g_z, pred

    # Stage 1: propagation path.
    clr1 = CyclicalLRConfig(
        total_steps=cfg.stage1_steps, lr_min=cfg.lr_min, lr_max=cfg.lr_max, cycles=cfg.cycles
    )
    opt1 = _Sgd({k: tensors[k] for k in ("prop.w0", "prop.w1", "prop_readout.w", "prop_readout.b")}, cfg.momentum)
    for step in range(cfg.stage1_steps):
        c = cache[step % len(cache)]
        hidden = c["cur_nodes"] @ tensors["prop.w0"].T + c["agg"] @ tensors["prop.w1"].T
        z = hidden @ tensors["prop_readout.w"] + tensors["prop_readout.b"][0]
        loss, g_z, _ = decode_backward(z, c["cur_target"])
        if not math.isfinite(loss):
            raise NumericError(f"stage-1 loss diverged at step {step}")
        g_hidden = np.outer(g_z, tensors["prop_readout.w"])
        grads = {
            "prop.w0": g_hidden.T @ c["cur_nodes"],
            "prop.w1": g_hidden.T @ c["agg"],
            "prop_readout.w": hidden.T @ g_z,
            "prop_readout.b": np.array([g_z.sum()]),
        }
        opt1.step(tensors, grads, cyclical_lr(step, clr1))
        history["stage1"].append(loss)

    # Stage 2: interactive head, retrieval embedding, merge reducer.
    for c in cache:  # propagation features are frozen from here on
        c["hidden"] = c["cur_nodes"] @ tensors["prop.w0"].T + c["agg"] @ tensors["prop.w1"].T
    clr2 = CyclicalLRConfig(
        total_steps=cfg.stage2_steps, lr_min=cfg.lr_min, lr_max=cfg.lr_max, cycles=cfg.cycles
    )
    stage2_params = [
        k for k in ("inter.w", "inter.b", "embed.e", "reducer.w", "reducer.b")
        if k not in cfg.freeze_stage2
    ]
    opt2 = _Sgd({k: tensors[k] for k in stage2_params}, cfg.momentum)
    d_embed = tensors["embed.e"].shape[0]
    e_shape = tensors["embed.e"].shape
    for step in range(cfg.stage2_steps):
        c = cache[step % len(cache)]
        grads = {k: np.zeros_like(v) for k, v in tensors.items()}

        # Interactive head: BCE + scribble consistency on the reference frame.
        def sc_term(pred):
            l, g = scribble_consistency_loss(pred, c["scribbles"])
            return sc_w * l, sc_w * g

        z_i = c["inter_x"] @ tensors["inter.w"] + tensors["inter.b"][0]
        loss_i, g_zi, _ = decode_backward(z_i, c["ref_target"], extra_pred_grad=sc_term)
        grads["inter.w"] += c["inter_x"].T @ g_zi
        grads["inter.b"] += np.array([g_zi.sum()])

        # Retrieval embedding: batch-hard triplet on the correspondences.
        loss_t = 0.0
        if c["pairs"]:
            e_flat = tensors["embed.e"].reshape(d_embed, -1)
            emb_c = c["patches_c"] @ e_flat.T
            emb_r = c["patches_r"] @ e_flat.T
            loss_t, g_ec, g_er, _ = _triplet_from_embeddings(
                emb_c, emb_r, c["pairs"], cfg.triplet_margin, cfg.triplet_clamp
            )
            g_e = g_ec.T @ c["patches_c"] + g_er.T @ c["patches_r"]
            grads["embed.e"] += g_e.reshape(e_shape)

        # Merge reducer: BCE through the frozen propagation decoder, with the
        # ground-truth scribble transfer as input.
        x_cat = np.concatenate([c["hidden"], c["s_gt"]], axis=1)
        merged = x_cat @ tensors["reducer.w"].T + tensors["reducer.b"]
        z_m = merged @ tensors["prop_readout.w"] + tensors["prop_readout.b"][0]
        loss_m, g_zm, _ = decode_backward(z_m, c["cur_target"])
        g_merged = np.outer(g_zm, tensors["prop_readout.w"])
        grads["reducer.w"] += g_merged.T @ x_cat
        grads["reducer.b"] += g_merged.sum(axis=0)

        total = loss_i + loss_t + loss_m
        if not math.isfinite(total):
            raise NumericError(f"stage-2 loss diverged at step {step}")
        opt2.step(tensors, {k: grads[k] for k in stage2_params}, cyclical_lr(step, clr2))
        history["stage2"].append(total)

    return model.with_tensors(tensors), history
