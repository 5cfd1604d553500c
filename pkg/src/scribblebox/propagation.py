"""Mask propagation over a reference-frame graph and scribble propagation by
pixel-wise retrieval.

Every cell of every reference frame becomes a node carrying (feature, mask);
each current-frame cell connects to all reference nodes with softmax edge
weights of feature dot products. One propagation step mixes each current node
with its attention-aggregated reference message; a logistic readout decodes
the result into a mask. Scribbles hop frames by nearest-neighbor lookup in a
learned embedding space and are merged into the propagation features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AnnotationSession, ParameterError, ScribbleMap
from .features import (
    FeatureGrid,
    embed_conv,
    extract_features,
    interp_matrix,
    mask_to_grid,
    scribbles_to_grid,
)
from .kernels import nn_assign
from .model import EmbedWeights, PropWeights, Readout, SegModel


def node_features(grid: FeatureGrid, mask_grid: np.ndarray | None) -> np.ndarray:
    """(H'*W', D+1) per-cell features with the mask value appended; the
    current (unannotated) frame uses the uniform value 0.5."""
    if mask_grid is None:
        mask_col = np.full((grid.n_cells, 1), 0.5)
    else:
        m = np.asarray(mask_grid, dtype=np.float64)
        if m.shape != (grid.height, grid.width):
            raise ParameterError(f"mask grid {m.shape} != feature grid {(grid.height, grid.width)}")
        mask_col = m.reshape(-1, 1)
    return np.concatenate([grid.flat(), mask_col], axis=1)


@dataclass(frozen=True)
class PropGraph:
    """Bipartite propagation graph: every current cell connects to every
    reference cell."""

    cur: np.ndarray  # (Nc, D+1)
    ref: np.ndarray  # (Nr, D+1)
    grid_h: int
    grid_w: int
    stride: int

    def __post_init__(self):
        if self.cur.shape[1] != self.ref.shape[1]:
            raise ParameterError("current/reference node dims differ")
        if self.cur.shape[0] != self.grid_h * self.grid_w:
            raise ParameterError("current node count does not match the grid")


def build_graph(cur_grid: FeatureGrid, refs: list[tuple[FeatureGrid, np.ndarray]]) -> PropGraph:
    if not refs:
        raise ParameterError("need at least one reference frame")
    ref_nodes = np.concatenate([node_features(g, m) for g, m in refs], axis=0)
    return PropGraph(
        cur=node_features(cur_grid, None),
        ref=ref_nodes,
        grid_h=cur_grid.height,
        grid_w=cur_grid.width,
        stride=cur_grid.stride,
    )


def edge_weights(graph: PropGraph) -> np.ndarray:
    """(Nc, Nr) softmax over reference nodes of feature dot products, computed
    with the per-row max subtracted for stability."""
    logits = graph.cur @ graph.ref.T
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w


def gcn_propagate(graph: PropGraph, weights: PropWeights) -> FeatureGrid:
    """One propagation step for the current-frame nodes:
    f'_u = W0 f_u + sum_v w_e(u, v) W1 f_v."""
    if weights.w0.shape[1] != graph.cur.shape[1]:
        raise ParameterError(
            f"weight input dim {weights.w0.shape[1]} != node dim {graph.cur.shape[1]}"
        )
    w = edge_weights(graph)
    agg = w @ graph.ref
    out = graph.cur @ weights.w0.T + agg @ weights.w1.T
    return FeatureGrid(
        data=out.reshape(graph.grid_h, graph.grid_w, -1), stride=graph.stride
    )


def decode_mask(grid: FeatureGrid, readout: Readout) -> np.ndarray:
    """Per-cell sigmoid readout upsampled bilinearly to crop resolution."""
    if readout.w.shape[0] != grid.dim:
        raise ParameterError(f"readout dim {readout.w.shape[0]} != feature dim {grid.dim}")
    z = grid.flat() @ readout.w + readout.b
    cells = 1.0 / (1.0 + np.exp(-z.reshape(grid.height, grid.width)))
    ry = interp_matrix(grid.height * grid.stride, grid.height)
    rx = interp_matrix(grid.width * grid.stride, grid.width)
    return ry @ cells @ rx.T


def retrieve_scribbles(
    ref_embed: FeatureGrid,
    ref_scribbles: ScribbleMap,
    cur_embed: FeatureGrid,
) -> np.ndarray:
    """Transfer grid-resolution scribble labels to the current frame: each
    current cell copies the label of its nearest reference cell in embedding
    space (ties resolve to the lowest row-major index). Output is
    (H', W', 2) one-hot (positive, negative); background transfers as zeros."""
    if ref_embed.data.shape != cur_embed.data.shape:
        raise ParameterError("embedding grids must share dimensions")
    if ref_scribbles.shape != (ref_embed.height, ref_embed.width):
        raise ParameterError("scribble grid does not match the embedding grid")
    idx = nn_assign(ref_embed.flat(), cur_embed.flat())
    pos = ref_scribbles.positive.reshape(-1)[idx]
    neg = ref_scribbles.negative.reshape(-1)[idx]
    out = np.zeros((cur_embed.height, cur_embed.width, 2), dtype=np.float64)
    out[..., 0] = pos.reshape(cur_embed.height, cur_embed.width)
    out[..., 1] = neg.reshape(cur_embed.height, cur_embed.width)
    return out


def merge(grid: FeatureGrid, transferred: np.ndarray, reducer_w: np.ndarray, reducer_b: np.ndarray) -> FeatureGrid:
    """Concat the propagation features with the transferred scribble channels
    and reduce back to the propagation dimension per cell."""
    if transferred.shape != (grid.height, grid.width, 2):
        raise ParameterError("transferred scribbles must be (H', W', 2)")
    if reducer_w.shape != (grid.dim, grid.dim + 2):
        raise ParameterError(
            f"reducer shape {reducer_w.shape} != ({grid.dim}, {grid.dim + 2})"
        )
    x = np.concatenate([grid.flat(), transferred.reshape(-1, 2)], axis=1)
    out = x @ reducer_w.T + reducer_b
    return FeatureGrid(data=out.reshape(grid.height, grid.width, grid.dim), stride=grid.stride)


# ---------------------------------------------------------------------------
# Session-level propagation


def _crop_setup(session: AnnotationSession, video: np.ndarray, frame: int, model: SegModel):
    track = session.track_for_crops()
    box = track.box_at(frame)
    grid, geo = extract_features(video[frame], box, model.feature_cfg)
    return grid, geo


def _reference_nodes(session: AnnotationSession, video: np.ndarray, model: SegModel):
    refs = []
    for r in sorted(session.reference_frames):
        if r not in session.masks:
            raise ParameterError(f"reference frame {r} has no mask")
        grid, geo = _crop_setup(session, video, r, model)
        mask_crop = geo.crop(session.masks[r])
        refs.append((grid, mask_to_grid(mask_crop, grid.stride)))
    return refs


def propagate_masks(
    session: AnnotationSession,
    model: SegModel,
    video: np.ndarray,
    targets,
) -> AnnotationSession:
    """Predict masks for the target frames from all reference frames; frames
    in the reference set are never overwritten."""
    if not session.reference_frames:
        raise ParameterError("reference set is empty")
    refs = _reference_nodes(session, video, model)
    out = session
    for f in targets:
        if f in session.reference_frames or not 0 <= f < session.n_frames:
            continue
        cur_grid, geo = _crop_setup(session, video, f, model)
        graph = build_graph(cur_grid, refs)
        feat = gcn_propagate(graph, model.prop)
        mask_crop = decode_mask(feat, model.prop_readout)
        out = out.with_mask(f, geo.paste(mask_crop, video[f].shape))
    return out


def propagate_scribbles(
    session: AnnotationSession,
    model: SegModel,
    video: np.ndarray,
    annotated_frame: int,
    n: int = 5,
) -> AnnotationSession:
    """Re-predict frames within +-n of the annotated frame using both the
    propagation features and the retrieved scribble labels from that frame."""
    if annotated_frame not in session.masks:
        raise ParameterError(f"frame {annotated_frame} has no corrected mask")
    scribbles = session.scribbles.get(annotated_frame)
    if scribbles is None:
        raise ParameterError(f"frame {annotated_frame} has no scribbles")
    if n <= 0:
        return session
    refs = _reference_nodes(session, video, model)
    ref_grid, _ = _crop_setup(session, video, annotated_frame, model)
    ref_emb = embed_grid(ref_grid, model.embed)
    pos_g, neg_g = scribbles_to_grid(
        scribbles.positive, scribbles.negative, ref_grid.stride
    )
    scrib_grid = ScribbleMap(pos_g, neg_g)
    out = session
    for f in range(annotated_frame - n, annotated_frame + n + 1):
        if f == annotated_frame or not 0 <= f < session.n_frames:
            continue
        if f in session.reference_frames:
            continue
        cur_grid, geo = _crop_setup(session, video, f, model)
        graph = build_graph(cur_grid, refs)
        feat = gcn_propagate(graph, model.prop)
        cur_emb = embed_grid(cur_grid, model.embed)
        transferred = retrieve_scribbles(ref_emb, scrib_grid, cur_emb)
        merged = merge(feat, transferred, model.reducer_w, model.reducer_b)
        mask_crop = decode_mask(merged, model.prop_readout)
        out = out.with_mask(f, geo.paste(mask_crop, video[f].shape))
    return out


def embed_grid(grid: FeatureGrid, weights: EmbedWeights) -> FeatureGrid:
    """Project features into the retrieval embedding space."""
    return embed_conv(grid, weights.e)
