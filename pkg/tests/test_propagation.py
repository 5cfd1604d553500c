from __future__ import annotations

import numpy as np
import pytest

from scribblebox.core import (
    AnnotationSession,
    Box,
    ObservedTrack,
    ParameterError,
    ScribbleMap,
    TrajectoryCurve,
)
from scribblebox.features import (
    FeatureConfig,
    FeatureGrid,
    embed_conv,
    extract_features,
    features_from_crop,
    interp_matrix,
    mask_to_grid,
)
from scribblebox.model import EmbedWeights, PropWeights, Readout, init_model
from scribblebox.propagation import (
    PropGraph,
    build_graph,
    decode_mask,
    edge_weights,
    embed_grid,
    gcn_propagate,
    merge,
    node_features,
    propagate_masks,
    retrieve_scribbles,
)


def grid_of(data, stride=4):
    return FeatureGrid(data=np.asarray(data, dtype=np.float64), stride=stride)


def random_graph(rng, gh, gw, n_refs, d):
    cur = grid_of(rng.standard_normal((gh, gw, d)))
    refs = [
        (grid_of(rng.standard_normal((gh, gw, d))), rng.random((gh, gw)))
        for _ in range(n_refs)
    ]
    return build_graph(cur, refs)


class TestExtractFeatures:
    def test_uniform_gray_crop(self):
        cfg = FeatureConfig(crop_size=32, stride=8, norm_gain=None)
        crop = np.full((32, 32, 3), 0.5)
        grid = features_from_crop(crop, cfg)
        # all cells identical
        flat = grid.flat()
        np.testing.assert_allclose(flat[:, :3], 0.5)
        np.testing.assert_allclose(flat[:, 3:11], 0.0)  # gradient bins all zero
        # cells identical up to their coordinate channels
        assert np.ptp(flat[:, :11], axis=0).max() == 0.0

    def test_grid_size_arithmetic(self):
        cfg = FeatureConfig(crop_size=256, stride=16)
        assert cfg.grid_size == 16
        crop = np.zeros((256, 256, 3))
        assert features_from_crop(crop, cfg).width == 16

    def test_feature_dim_default(self):
        cfg = FeatureConfig()
        assert cfg.dim == 13

    def test_horizontal_flip_mirrors_features(self, rng):
        # oracle: explicit flip of the feature tensor with orientation-bin
        # permutation b -> (3 - b) mod 8 and x-coordinate 1 - x
        cfg = FeatureConfig(crop_size=32, stride=8, norm_gain=None)
        coarse = rng.random((8, 8, 3))
        from scribblebox.features import resize_bilinear

        crop = resize_bilinear(coarse, 32, 32)
        # a diagonal ramp keeps every gradient component away from zero, so no
        # orientation sits on a histogram-bin edge
        ys, xs = np.mgrid[0:32, 0:32]
        crop = crop + (0.01 * xs + 0.017 * ys)[:, :, None]
        flipped = crop[:, ::-1].copy()
        a = features_from_crop(crop, cfg).data
        b = features_from_crop(flipped, cfg).data
        want = a[:, ::-1].copy()
        perm = [(3 - k) % 8 for k in range(8)]
        want[:, :, 3:11] = want[:, :, 3:11][:, :, perm]
        want[:, :, 11] = 1.0 - want[:, :, 11]  # x coordinate mirrors
        np.testing.assert_allclose(b, want, atol=1e-9)

    def test_zero_area_box_rejected(self, rng):
        frame = (rng.random((50, 50, 3)) * 255).astype(np.uint8)
        with pytest.raises(ParameterError):
            extract_features(frame, Box(10, 10, 10, 10).expand(-5.0), FeatureConfig())


class TestNodeFeatures:
    def test_mask_one_appends_one(self, rng):
        g = grid_of(rng.standard_normal((2, 2, 3)))
        nodes = node_features(g, np.ones((2, 2)))
        np.testing.assert_allclose(nodes[:, -1], 1.0)
        assert nodes.shape == (4, 4)

    def test_current_frame_uses_half(self, rng):
        g = grid_of(rng.standard_normal((3, 2, 5)))
        nodes = node_features(g, None)
        np.testing.assert_allclose(nodes[:, -1], 0.5)

    def test_dimension_mismatch(self, rng):
        g = grid_of(rng.standard_normal((3, 2, 5)))
        with pytest.raises(ParameterError):
            node_features(g, np.ones((2, 3)))


class TestEdgeWeights:
    def test_identical_references_give_uniform_weights(self, rng):
        d = 4
        cur = grid_of(rng.standard_normal((2, 2, d)))
        ref_grid = grid_of(np.ones((2, 2, d)))
        graph = build_graph(cur, [(ref_grid, np.ones((2, 2))), (ref_grid, np.ones((2, 2)))])
        w = edge_weights(graph)
        np.testing.assert_allclose(w, 1.0 / 8.0)

    def test_rows_sum_to_one(self, rng):
        graph = random_graph(rng, 4, 4, 3, 6)
        w = edge_weights(graph)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
        assert (w >= 0).all()

    def test_matches_naive_softmax_oracle(self, rng):
        graph = random_graph(rng, 2, 2, 1, 5)
        w = edge_weights(graph)
        logits = graph.cur @ graph.ref.T
        want = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(w, want, atol=1e-9)

    def test_argmax_invariant_to_positive_scaling(self, rng):
        graph = random_graph(rng, 3, 3, 2, 6)
        w1 = edge_weights(graph)
        scaled = PropGraph(
            cur=graph.cur,
            ref=graph.ref * 2.5,
            grid_h=graph.grid_h,
            grid_w=graph.grid_w,
            stride=graph.stride,
        )
        w2 = edge_weights(scaled)
        np.testing.assert_array_equal(np.argmax(w1, axis=1), np.argmax(w2, axis=1))


class TestGcnPropagate:
    def test_w0_identity_w1_zero_returns_current(self, rng):
        graph = random_graph(rng, 3, 3, 2, 4)
        d_in = graph.cur.shape[1]
        weights = PropWeights(w0=np.eye(d_in), w1=np.zeros((d_in, d_in)))
        out = gcn_propagate(graph, weights)
        np.testing.assert_allclose(out.flat(), graph.cur, atol=1e-12)

    def test_w1_identity_single_reference_copies_it(self, rng):
        d = 3
        cur = grid_of(rng.standard_normal((1, 1, d)))
        ref = grid_of(rng.standard_normal((1, 1, d)))
        graph = build_graph(cur, [(ref, np.ones((1, 1)))])
        d_in = d + 1
        weights = PropWeights(w0=np.zeros((d_in, d_in)), w1=np.eye(d_in))
        out = gcn_propagate(graph, weights)
        np.testing.assert_allclose(out.flat()[0], graph.ref[0], atol=1e-12)

    def test_matches_dense_oracle(self, rng):
        # dense oracle: explicit per-node loops over all reference nodes
        for _ in range(10):
            gh, gw = rng.integers(1, 9, 2)
            n_refs = int(rng.integers(1, 4))
            d = int(rng.integers(2, 6))
            graph = random_graph(rng, gh, gw, n_refs, d)
            d_in = d + 1
            d_out = int(rng.integers(2, 7))
            weights = PropWeights(
                w0=rng.standard_normal((d_out, d_in)), w1=rng.standard_normal((d_out, d_in))
            )
            out = gcn_propagate(graph, weights).flat()
            logits = graph.cur @ graph.ref.T
            for u in range(graph.cur.shape[0]):
                ex = np.exp(logits[u] - logits[u].max())
                w_u = ex / ex.sum()
                want = weights.w0 @ graph.cur[u] + sum(
                    w_u[v] * (weights.w1 @ graph.ref[v]) for v in range(graph.ref.shape[0])
                )
                np.testing.assert_allclose(out[u], want, atol=1e-6)

    def test_dim_mismatch(self, rng):
        graph = random_graph(rng, 2, 2, 1, 4)
        with pytest.raises(ParameterError):
            gcn_propagate(graph, PropWeights(w0=np.eye(3), w1=np.eye(3)))


class TestDecodeMask:
    def test_zero_readout_gives_half(self, rng):
        g = grid_of(rng.standard_normal((4, 4, 5)))
        out = decode_mask(g, Readout(w=np.zeros(5), b=0.0))
        np.testing.assert_allclose(out, 0.5)
        assert out.shape == (16, 16)

    def test_constant_features_give_constant_mask(self, rng):
        g = grid_of(np.tile(rng.standard_normal(5), (4, 4, 1)))
        out = decode_mask(g, Readout(w=rng.standard_normal(5), b=0.3))
        assert np.ptp(out) < 1e-12

    def test_upsample_corners_equal_cell_values(self, rng):
        # oracle: explicit bilinear formula with half-pixel centers and edge
        # clamp makes the outermost pixels equal the corner cells
        g = grid_of(rng.standard_normal((2, 2, 3)), stride=2)
        ro = Readout(w=rng.standard_normal(3), b=0.0)
        out = decode_mask(g, ro)
        z = g.flat() @ ro.w
        cells = 1 / (1 + np.exp(-z)).reshape(2, 2)
        assert out[0, 0] == pytest.approx(cells[0, 0], abs=1e-12)
        assert out[-1, -1] == pytest.approx(cells[1, 1], abs=1e-12)
        assert out[0, -1] == pytest.approx(cells[0, 1], abs=1e-12)

    def test_values_in_unit_interval(self, rng):
        g = grid_of(rng.standard_normal((6, 6, 4)) * 10)
        out = decode_mask(g, Readout(w=rng.standard_normal(4) * 5, b=1.0))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestEmbed:
    def test_zero_weights(self, rng):
        g = grid_of(rng.standard_normal((4, 4, 3)))
        e = EmbedWeights(e=np.zeros((2, 3, 3, 3)))
        np.testing.assert_allclose(embed_grid(g, e).data, 0.0)

    def test_constant_interior_identical(self, rng):
        g = grid_of(np.tile(rng.standard_normal(3), (5, 5, 1)))
        e = EmbedWeights(e=rng.standard_normal((2, 3, 3, 3)))
        out = embed_grid(g, e).data
        interior = out[1:-1, 1:-1].reshape(-1, 2)
        np.testing.assert_allclose(interior, np.tile(interior[0], (9, 1)), atol=1e-12)

    def test_matches_naive_convolution_oracle(self, rng):
        g = grid_of(rng.standard_normal((4, 5, 3)))
        w = rng.standard_normal((2, 3, 3, 3))
        out = embed_conv(g, w).data
        h, wd, d = g.data.shape
        padded = np.zeros((h + 2, wd + 2, d))
        padded[1:-1, 1:-1] = g.data
        want = np.zeros((h, wd, 2))
        for y in range(h):
            for x in range(wd):
                for o in range(2):
                    acc = 0.0
                    for dy in range(3):
                        for dx in range(3):
                            acc += w[o, dy, dx] @ padded[y + dy, x + dx]
                    want[y, x, o] = acc
        np.testing.assert_allclose(out, want, atol=1e-9)


class TestRetrieveScribbles:
    def make_scribbles(self, rng, gh, gw):
        pos = rng.random((gh, gw)) > 0.7
        neg = (rng.random((gh, gw)) > 0.7) & ~pos
        return ScribbleMap(pos, neg)

    def test_identity_transfer(self, rng):
        emb = grid_of(rng.standard_normal((3, 3, 4)))
        scribbles = self.make_scribbles(rng, 3, 3)
        out = retrieve_scribbles(emb, scribbles, emb)
        np.testing.assert_array_equal(out[..., 0] > 0.5, scribbles.positive)
        np.testing.assert_array_equal(out[..., 1] > 0.5, scribbles.negative)

    def test_empty_reference_scribbles(self, rng):
        emb = grid_of(rng.standard_normal((3, 3, 4)))
        out = retrieve_scribbles(emb, ScribbleMap.empty((3, 3)), grid_of(rng.standard_normal((3, 3, 4))))
        np.testing.assert_allclose(out, 0.0)

    def test_matches_exhaustive_nn_oracle(self, rng):
        ref = grid_of(rng.standard_normal((3, 3, 4)))
        cur = grid_of(rng.standard_normal((3, 3, 4)))
        scribbles = self.make_scribbles(rng, 3, 3)
        out = retrieve_scribbles(ref, scribbles, cur)
        rf = ref.flat()
        cf = cur.flat()
        pos = scribbles.positive.reshape(-1)
        neg = scribbles.negative.reshape(-1)
        for i in range(9):
            d = ((cf[i] - rf) ** 2).sum(axis=1)
            j = int(np.argmin(d))
            assert out.reshape(-1, 2)[i, 0] == float(pos[j])
            assert out.reshape(-1, 2)[i, 1] == float(neg[j])


class TestMerge:
    def test_identity_reducer_ignores_scribbles(self, rng):
        g = grid_of(rng.standard_normal((3, 3, 5)))
        s = rng.random((3, 3, 2))
        reducer = np.concatenate([np.eye(5), np.zeros((5, 2))], axis=1)
        out = merge(g, s, reducer, np.zeros(5))
        np.testing.assert_allclose(out.data, g.data, atol=1e-12)

    def test_matches_concat_matmul_oracle(self, rng):
        g = grid_of(rng.standard_normal((2, 3, 4)))
        s = rng.random((2, 3, 2))
        reducer = rng.standard_normal((4, 6))
        bias = rng.standard_normal(4)
        out = merge(g, s, reducer, bias)
        x = np.concatenate([g.flat(), s.reshape(-1, 2)], axis=1)
        want = (x @ reducer.T + bias).reshape(2, 3, 4)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_dim_mismatch(self, rng):
        g = grid_of(rng.standard_normal((2, 2, 4)))
        with pytest.raises(ParameterError):
            merge(g, rng.random((2, 2, 2)), rng.standard_normal((4, 7)), np.zeros(4))


class TestPropagateMasks:
    def build_session(self, rng, m=6, size=64):
        video = (rng.random((m, size, size, 3)) * 255).astype(np.uint8)
        boxes = tuple(Box(size / 2, size / 2, 30, 30) for _ in range(m))
        track = ObservedTrack(0, boxes)
        curve = TrajectoryCurve.from_matrix(
            np.array([[0, size / 2, size / 2, 30, 30], [m - 1, size / 2, size / 2, 30, 30]])
        )
        mask0 = np.zeros((size, size))
        mask0[20:40, 20:40] = 1.0
        session = AnnotationSession(
            video_id="v",
            object_id="0",
            n_frames=m,
            curve=curve,
            refined_track=track,
            masks={0: mask0},
            reference_frames=frozenset({0}),
        )
        return video, session

    def test_reference_frames_never_overwritten(self, rng):
        video, session = self.build_session(rng)
        model = init_model(FeatureConfig(crop_size=32, stride=8), seed=0)
        out = propagate_masks(session, model, video, range(6))
        assert out.masks[0] is session.masks[0]

    def test_targets_receive_masks(self, rng):
        video, session = self.build_session(rng)
        model = init_model(FeatureConfig(crop_size=32, stride=8), seed=0)
        out = propagate_masks(session, model, video, range(6))
        for f in range(1, 6):
            assert f in out.masks
            assert out.masks[f].shape == video[0].shape[:2]
            assert out.masks[f].min() >= 0.0 and out.masks[f].max() <= 1.0

    def test_empty_reference_set_rejected(self, rng):
        video, session = self.build_session(rng)
        from dataclasses import replace

        bad = replace(session, reference_frames=frozenset())
        model = init_model(FeatureConfig(crop_size=32, stride=8), seed=0)
        with pytest.raises(ParameterError):
            propagate_masks(bad, model, video, range(6))
