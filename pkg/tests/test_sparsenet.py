"""Sparse convolution engine, UNet forward, head activations, weight files."""
import struct

import numpy as np
import pytest

from splatforge.pcio import PointCloud
from splatforge.sparsenet import (
    HEAD_CHANNELS,
    ConvLayerSpec,
    NetworkPlan,
    NetworkWeights,
    WeightFormatError,
    WeightShapeError,
    WeightTruncationError,
    activate_head,
    init_random,
    load_weights,
    save_weights,
    sparse_conv,
    transposed_conv_pruned,
    unet_forward,
)
from splatforge.voxelgrid import (
    SparseVoxelGrid,
    VoxelizedCloud,
    occupancy_at_stride,
    pool_2x2x2,
    voxelize_adaptive,
)

TOY_PLAN = NetworkPlan((2, 3, 4), (3,), 5)


def random_grid(rng, max_side=16, channels=4, stride=1, fill=0.3):
    """Random occupancy inside a max_side^3 box, random features."""
    side = int(rng.integers(2, max_side + 1))
    lattice = np.stack(np.meshgrid(*[np.arange(side)] * 3, indexing="ij"), axis=-1)
    lattice = lattice.reshape(-1, 3)[:, ::-1]            # (x, y, z) columns
    count = max(1, int(fill * lattice.shape[0]))
    pick = rng.choice(lattice.shape[0], size=count, replace=False)
    coords = (lattice[pick] + rng.integers(-3, 3, size=3)) * stride
    feats = rng.normal(size=(count, channels))
    return SparseVoxelGrid(coords, feats, stride=stride)


def dense_conv_oracle(grid, weights, bias):
    """Densify, cross-correlate with zero padding, re-sparsify at input occupancy."""
    kernel = weights.shape[0]
    r = kernel // 2
    cout = weights.shape[-1]
    g = grid.coords.astype(np.int64) // grid.stride
    g = g - g.min(axis=0)
    nx, ny, nz = g.max(axis=0) + 1
    dense = np.zeros((nz + 2 * r, ny + 2 * r, nx + 2 * r, grid.channel_count))
    dense[g[:, 2] + r, g[:, 1] + r, g[:, 0] + r] = grid.feats
    acc = np.zeros((nz, ny, nx, cout)) + bias.astype(np.float64)
    for a in range(kernel):
        for b in range(kernel):
            for c in range(kernel):
                acc += dense[a:a + nz, b:b + ny, c:c + nx] @ weights[a, b, c].astype(np.float64)
    return acc[g[:, 2], g[:, 1], g[:, 0]]


def random_cloud(rng, n=60):
    pos = rng.normal(size=(n, 3)) * np.array([1.0, 0.8, 1.3])
    return PointCloud(pos, rng.random((n, 3)))


class TestLayerSpec:
    def test_kind_defaults(self):
        assert ConvLayerSpec("conv", 2, 3).kernel == 3
        assert ConvLayerSpec("conv", 2, 3).stride == 1
        assert ConvLayerSpec("transposed_conv", 2, 3).kernel == 2
        assert ConvLayerSpec("transposed_conv", 2, 3).stride == 2
        assert ConvLayerSpec("mlp", 2, 3).kernel == 1

    def test_weight_shapes(self):
        assert ConvLayerSpec("conv", 2, 3, kernel=5).weight_shape == (5, 5, 5, 2, 3)
        assert ConvLayerSpec("mlp", 6, 14).weight_shape == (6, 14)

    def test_rejections(self):
        with pytest.raises(ValueError, match="kind"):
            ConvLayerSpec("dense", 2, 3)
        with pytest.raises(ValueError, match="positive"):
            ConvLayerSpec("conv", 0, 3)
        with pytest.raises(ValueError, match="odd"):
            ConvLayerSpec("conv", 2, 3, kernel=4)
        with pytest.raises(ValueError, match="fixed"):
            ConvLayerSpec("transposed_conv", 2, 3, kernel=3)
        with pytest.raises(ValueError, match="stride"):
            ConvLayerSpec("conv", 2, 3, stride=2)


class TestPlan:
    def test_default_layer_chain(self):
        specs = NetworkPlan().layer_specs()
        kinds = [s.kind for s in specs]
        assert kinds == ["conv"] * 4 + ["transposed_conv"] * 3 + ["mlp"] * 2
        chain = [(s.in_channels, s.out_channels) for s in specs]
        assert chain == [(9, 16), (16, 32), (32, 64), (64, 128),
                         (128, 64), (128, 32), (64, 16), (32, 64), (64, 14)]

    def test_toy_layer_chain(self):
        chain = [(s.in_channels, s.out_channels) for s in TOY_PLAN.layer_specs()]
        assert chain == [(2, 3), (3, 4), (4, 3), (6, 5), (5, 14)]

    def test_decoder_length_must_mirror(self):
        with pytest.raises(ValueError, match="mirror"):
            NetworkPlan((9, 16, 32), (8, 4))

    def test_weights_validated_against_plan(self):
        w = init_random(TOY_PLAN, 0)
        bad = list(w.layers)
        bad[0] = (bad[0][0], np.zeros((3, 3, 3, 2, 3), dtype=np.float32)[:, :, :, :, :2],
                  bad[0][2])
        with pytest.raises(ValueError, match="weights must be"):
            NetworkWeights(TOY_PLAN, bad)
        with pytest.raises(ValueError, match="expects 5 layers"):
            NetworkWeights(TOY_PLAN, list(w.layers)[:-1])
        swapped = list(w.layers)
        swapped[0], swapped[1] = swapped[1], swapped[0]
        with pytest.raises(ValueError, match="plan expects"):
            NetworkWeights(TOY_PLAN, swapped)


class TestInitRandom:
    def test_seed_determinism(self):
        a = init_random(TOY_PLAN, 11)
        b = init_random(TOY_PLAN, 11)
        for (_, wa, ba), (_, wb, bb) in zip(a.layers, b.layers):
            assert wa.tobytes() == wb.tobytes()
            assert ba.tobytes() == bb.tobytes()

    def test_seeds_differ(self):
        a = init_random(TOY_PLAN, 11)
        b = init_random(TOY_PLAN, 12)
        assert any(wa.tobytes() != wb.tobytes()
                   for (_, wa, _), (_, wb, _) in zip(a.layers, b.layers))

    def test_fan_in_bound_and_zero_bias(self):
        w = init_random(NetworkPlan(), 3)
        for spec, weight, bias in w.layers:
            fan_in = spec.in_channels if spec.kind == "mlp" else spec.kernel ** 3 * spec.in_channels
            assert np.abs(weight).max() <= np.sqrt(6.0 / fan_in)
            assert weight.dtype == np.float32
            assert not bias.any()


class TestSparseConv:
    def test_kernel1_identity(self):
        rng = np.random.default_rng(0)
        grid = random_grid(rng, channels=5)
        spec = ConvLayerSpec("conv", 5, 5, kernel=1)
        out = sparse_conv(grid, spec, np.eye(5, dtype=np.float32)[None, None, None],
                          np.zeros(5, dtype=np.float32))
        assert np.array_equal(out.coords, grid.coords)
        assert np.array_equal(out.feats, grid.feats)

    def test_single_voxel_center_tap(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(1, 3))
        grid = SparseVoxelGrid([[2, -1, 4]], feats)
        spec = ConvLayerSpec("conv", 3, 2)
        w = rng.normal(size=(3, 3, 3, 3, 2)).astype(np.float32)
        b = rng.normal(size=2).astype(np.float32)
        out = sparse_conv(grid, spec, w, b)
        expected = feats[0] @ w[1, 1, 1].astype(np.float64) + b
        np.testing.assert_allclose(out.feats[0], expected, rtol=0, atol=1e-12)

    def test_tap_orientation(self):
        # only the (dz, dy, dx) = (0, 0, +1) tap is nonzero: each voxel reads
        # the feature of its +x neighbor
        grid = SparseVoxelGrid([[0, 0, 0], [1, 0, 0]], np.array([[2.0], [5.0]]))
        w = np.zeros((3, 3, 3, 1, 1), dtype=np.float32)
        w[1, 1, 2, 0, 0] = 1.0
        out = sparse_conv(grid, ConvLayerSpec("conv", 1, 1), w, np.zeros(1, dtype=np.float32))
        row_a = out.lookup([[0, 0, 0]])[0]
        row_b = out.lookup([[1, 0, 0]])[0]
        assert out.feats[row_a, 0] == 5.0
        assert out.feats[row_b, 0] == 0.0

    @pytest.mark.parametrize("kernel", [1, 3, 5])
    def test_dense_oracle_agreement(self, kernel):
        rng = np.random.default_rng(kernel)
        for _ in range(6):
            cin, cout = rng.integers(1, 7, size=2)
            grid = random_grid(rng, channels=int(cin))
            spec = ConvLayerSpec("conv", int(cin), int(cout), kernel=kernel)
            w = rng.normal(size=spec.weight_shape).astype(np.float32)
            b = rng.normal(size=int(cout)).astype(np.float32)
            out = sparse_conv(grid, spec, w, b)
            assert np.array_equal(out.coords, grid.coords)
            np.testing.assert_allclose(out.feats, dense_conv_oracle(grid, w, b),
                                       rtol=0, atol=1e-5)

    def test_dense_oracle_on_strided_grid(self):
        rng = np.random.default_rng(9)
        grid = random_grid(rng, max_side=8, channels=3, stride=4)
        spec = ConvLayerSpec("conv", 3, 2)
        w = rng.normal(size=spec.weight_shape).astype(np.float32)
        b = rng.normal(size=2).astype(np.float32)
        out = sparse_conv(grid, spec, w, b)
        np.testing.assert_allclose(out.feats, dense_conv_oracle(grid, w, b), rtol=0, atol=1e-5)

    def test_relu_clamps(self):
        grid = SparseVoxelGrid([[0, 0, 0]], np.array([[1.0]]))
        spec = ConvLayerSpec("conv", 1, 2, kernel=1)
        w = np.array([1.0, -1.0], dtype=np.float32).reshape(1, 1, 1, 1, 2)
        out = sparse_conv(grid, spec, w, np.zeros(2, dtype=np.float32), relu=True)
        assert out.feats.tolist() == [[1.0, 0.0]]

    def test_channel_mismatch(self):
        grid = SparseVoxelGrid([[0, 0, 0]], np.ones((1, 2)))
        spec = ConvLayerSpec("conv", 3, 2)
        with pytest.raises(ValueError, match="channels"):
            sparse_conv(grid, spec, np.zeros(spec.weight_shape, dtype=np.float32),
                        np.zeros(2, dtype=np.float32))

    def test_wrong_kind_rejected(self):
        grid = SparseVoxelGrid([[0, 0, 0]], np.ones((1, 2)), stride=2)
        spec = ConvLayerSpec("transposed_conv", 2, 2)
        with pytest.raises(ValueError, match="conv spec"):
            sparse_conv(grid, spec, np.zeros(spec.weight_shape, dtype=np.float32),
                        np.zeros(2, dtype=np.float32))


class TestTransposedConv:
    def test_one_parent_eight_children(self):
        rng = np.random.default_rng(2)
        feat = rng.normal(size=(1, 3))
        grid = SparseVoxelGrid([[2, -4, 6]], feat, stride=2)
        spec = ConvLayerSpec("transposed_conv", 3, 2)
        w = rng.normal(size=(2, 2, 2, 3, 2)).astype(np.float32)
        b = rng.normal(size=2).astype(np.float32)
        children = np.array([[2 + dx, -4 + dy, 6 + dz]
                             for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
        out = transposed_conv_pruned(grid, spec, w, b, children)
        assert len(out) == 8
        assert out.stride == 1
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    row = out.lookup([[2 + dx, -4 + dy, 6 + dz]])[0]
                    expected = feat[0] @ w[dz, dy, dx].astype(np.float64) + b
                    np.testing.assert_allclose(out.feats[row], expected, rtol=0, atol=1e-12)

    def test_empty_target(self):
        grid = SparseVoxelGrid([[0, 0, 0]], np.ones((1, 2)), stride=2)
        spec = ConvLayerSpec("transposed_conv", 2, 2)
        out = transposed_conv_pruned(grid, spec, np.ones(spec.weight_shape, dtype=np.float32),
                                     np.zeros(2, dtype=np.float32), np.zeros((0, 3), dtype=int))
        assert len(out) == 0

    def test_orphan_child_gets_bias(self):
        grid = SparseVoxelGrid([[0, 0, 0]], np.ones((1, 2)), stride=2)
        spec = ConvLayerSpec("transposed_conv", 2, 2)
        b = np.array([0.5, -1.5], dtype=np.float32)
        out = transposed_conv_pruned(grid, spec, np.ones(spec.weight_shape, dtype=np.float32),
                                     b, [[4, 0, 0]])
        np.testing.assert_allclose(out.feats[0], b, rtol=0, atol=0)

    def test_occupancy_equals_target_set(self):
        rng = np.random.default_rng(3)
        for _ in range(8):
            parents = random_grid(rng, max_side=6, channels=2, stride=4)
            children = np.concatenate([
                parents.coords[:, None, :] + 2 * np.array(
                    [[dx, dy, dz] for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
                for _ in (0,)
            ], axis=0).reshape(-1, 3)
            keep = rng.random(children.shape[0]) < 0.4
            target = np.unique(children[keep], axis=0)
            spec = ConvLayerSpec("transposed_conv", 2, 3)
            out = transposed_conv_pruned(
                parents, spec, rng.normal(size=spec.weight_shape).astype(np.float32),
                np.zeros(3, dtype=np.float32), target)
            got = {tuple(c) for c in out.coords.tolist()}
            want = {tuple(c) for c in target.tolist()}
            assert got == want

    def test_stride1_grid_rejected(self):
        grid = SparseVoxelGrid([[0, 0, 0]], np.ones((1, 2)))
        spec = ConvLayerSpec("transposed_conv", 2, 2)
        with pytest.raises(ValueError, match="stride"):
            transposed_conv_pruned(grid, spec, np.ones(spec.weight_shape, dtype=np.float32),
                                   np.zeros(2, dtype=np.float32), [[0, 0, 0]])

    def test_misaligned_target_rejected(self):
        grid = SparseVoxelGrid([[0, 0, 0]], np.ones((1, 2)), stride=4)
        spec = ConvLayerSpec("transposed_conv", 2, 2)
        with pytest.raises(ValueError, match="multiples"):
            transposed_conv_pruned(grid, spec, np.ones(spec.weight_shape, dtype=np.float32),
                                   np.zeros(2, dtype=np.float32), [[1, 0, 0]])


class TestPruningGeometry:
    def test_decoder_occupancy_matches_encoder_all_levels(self):
        rng = np.random.default_rng(4)
        vox = voxelize_adaptive(random_cloud(rng, 200))
        levels = [vox.grid]
        for _ in range(3):
            levels.append(pool_2x2x2(levels[-1]))
        grid = levels[-1]
        for target in (levels[2], levels[1], levels[0]):
            spec = ConvLayerSpec("transposed_conv", grid.channel_count, 4)
            grid = transposed_conv_pruned(
                grid, spec, rng.normal(size=spec.weight_shape).astype(np.float32),
                np.zeros(4, dtype=np.float32), target.coords)
            assert np.array_equal(grid.coords, target.coords)
            assert grid.stride == target.stride

    def test_pooled_coords_match_occupancy_at_stride(self):
        rng = np.random.default_rng(5)
        vox = voxelize_adaptive(random_cloud(rng, 150))
        pooled = pool_2x2x2(pool_2x2x2(vox.grid))
        assert np.array_equal(pooled.coords, occupancy_at_stride(vox.grid, 4))


def _identity_vox(grid):
    """VoxelizedCloud with one source point per voxel, in voxel order."""
    n = len(grid)
    ar = np.arange(n, dtype=np.int64)
    return VoxelizedCloud(grid, ar, ar, np.arange(n + 1, dtype=np.int64))


class TestUnetForward:
    def test_output_count_matches_points(self):
        rng = np.random.default_rng(6)
        vox = voxelize_adaptive(random_cloud(rng, 80))
        raw = unet_forward(vox, init_random(NetworkPlan(), 0))
        assert raw.shape == (80, HEAD_CHANNELS)

    def test_zero_weights_yield_final_bias(self):
        rng = np.random.default_rng(7)
        vox = voxelize_adaptive(random_cloud(rng, 40))
        plan = NetworkPlan()
        layers = [(spec, np.zeros(spec.weight_shape, dtype=np.float32),
                   rng.normal(size=spec.out_channels).astype(np.float32))
                  for spec in plan.layer_specs()]
        weights = NetworkWeights(plan, layers)
        raw = unet_forward(vox, weights)
        np.testing.assert_allclose(raw, np.broadcast_to(layers[-1][2], raw.shape),
                                   rtol=0, atol=1e-12)

    def test_channel_mismatch_is_descriptive(self):
        grid = SparseVoxelGrid([[0, 0, 0], [1, 1, 1]], np.ones((2, 2)))
        with pytest.raises(ValueError, match="plan expects 9"):
            unet_forward(_identity_vox(grid), init_random(NetworkPlan(), 0))

    def test_translation_equivariance_at_coarsest_stride(self):
        rng = np.random.default_rng(8)
        vox = voxelize_adaptive(random_cloud(rng, 120))
        weights = init_random(NetworkPlan(), 1)
        raw = unet_forward(vox, weights)
        shift = np.array([8, -8, 16], dtype=np.int32)
        moved = VoxelizedCloud(
            SparseVoxelGrid(vox.grid.coords + shift, vox.grid.feats,
                            stride=vox.grid.stride, scale_to_world=vox.grid.scale_to_world),
            vox.point_to_voxel, vox.source_order, vox.source_offsets)
        np.testing.assert_allclose(unet_forward(moved, weights), raw, rtol=0, atol=1e-6)

    def test_matches_dense_reference_network(self):
        # one-level net on a 4^3 grid, rebuilt densely by hand
        rng = np.random.default_rng(9)
        plan = NetworkPlan((9, 4, 6), (4,), 5)
        weights = init_random(plan, 2)
        lattice = np.stack(np.meshgrid(*[np.arange(4)] * 3, indexing="ij"), -1).reshape(-1, 3)
        pick = rng.choice(64, size=30, replace=False)
        grid = SparseVoxelGrid(lattice[pick], rng.normal(size=(30, 9)))
        raw = unet_forward(_identity_vox(grid), weights)

        (s0, w0, b0), (s1, w1, b1), (s2, w2, b2), (_, w3, b3), (_, w4, b4) = weights.layers
        f0 = np.maximum(dense_conv_oracle(grid, w0, b0), 0.0)
        parent_of = {}
        for i, c in enumerate(grid.coords.tolist()):
            parent_of.setdefault(tuple((np.array(c) // 2) * 2), []).append(i)
        pfeat = {p: f0[rows].mean(axis=0) for p, rows in parent_of.items()}
        pgrid = SparseVoxelGrid(np.array(sorted(pfeat)), np.array([pfeat[p] for p in sorted(pfeat)]),
                                stride=2)
        f1 = np.maximum(dense_conv_oracle(pgrid, w1, b1), 0.0)
        pout = {tuple(c): f1[i] for i, c in enumerate(pgrid.coords.tolist())}
        expected = np.empty((30, HEAD_CHANNELS))
        for i, c in enumerate(grid.coords.tolist()):
            c = np.array(c)
            tap = c - (c // 2) * 2
            d0 = pout[tuple((c // 2) * 2)] @ w2[tap[2], tap[1], tap[0]].astype(np.float64) + b2
            d0 = np.maximum(d0, 0.0)
            row = grid.lookup([c])[0]
            h = np.maximum(np.concatenate([d0, f0[row]]) @ w3 + b3, 0.0)
            expected[row] = h @ w4 + b4
        np.testing.assert_allclose(raw, expected, rtol=0, atol=1e-5)


class TestActivateHead:
    def test_zero_raw_closed_form(self):
        out = activate_head(np.zeros(14), voxel_scale=0.5)
        np.testing.assert_allclose(out.delta, np.zeros(3), rtol=0, atol=0)
        np.testing.assert_allclose(out.sigma, np.log(2.0) * 0.5 * np.ones(3), rtol=1e-12, atol=0)
        assert out.quat.tolist() == [1.0, 0.0, 0.0, 0.0]
        assert out.opacity == 0.5
        assert out.normal.tolist() == [0.0, 0.0, 1.0]

    def test_opacity_saturation(self):
        raw = np.zeros(14)
        raw[10] = 20.0
        assert abs(activate_head(raw, 1.0).opacity - 1.0) < 1e-8

    def test_normal_fallback_threshold(self):
        raw = np.zeros((2, 14))
        raw[0, 11:14] = (1e-9, 0, 0)      # below the 1e-8 cutoff
        raw[1, 11:14] = (2e-8, 0, 0)
        out = activate_head(raw, 1.0)
        assert out.normal[0].tolist() == [0.0, 0.0, 1.0]
        assert out.normal[1].tolist() == [1.0, 0.0, 0.0]

    def test_degenerate_quat_falls_back_to_identity(self):
        raw = np.zeros(14)
        raw[6] = -1.0                     # cancels the +1 bias exactly
        assert activate_head(raw, 1.0).quat.tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_property_sweep(self):
        rng = np.random.default_rng(10)
        raw = rng.normal(scale=2.0, size=(100_000, 14))
        scale = 0.37
        out = activate_head(raw, scale)
        assert (np.abs(out.delta) <= scale).all()
        assert (out.sigma > 0).all()
        np.testing.assert_allclose(np.linalg.norm(out.quat, axis=1), 1.0, rtol=0, atol=1e-12)
        assert ((out.opacity > 0) & (out.opacity < 1)).all()
        np.testing.assert_allclose(np.linalg.norm(out.normal, axis=1), 1.0, rtol=0, atol=1e-12)

    def test_extreme_sigma_stays_positive(self):
        raw = np.zeros(14)
        raw[3:6] = -1000.0
        assert (activate_head(raw, 2.0).sigma > 0).all()

    def test_bad_width_rejected(self):
        with pytest.raises(ValueError, match="14"):
            activate_head(np.zeros(13), 1.0)


class TestWeightFile:
    def test_round_trip_bitwise(self, tmp_path):
        path = tmp_path / "net.p2en"
        weights = init_random(TOY_PLAN, 5)
        save_weights(weights, path)
        back = load_weights(path)
        assert back.plan == TOY_PLAN
        for (sa, wa, ba), (sb, wb, bb) in zip(weights.layers, back.layers):
            assert sa == sb
            assert wa.tobytes() == wb.tobytes()
            assert ba.tobytes() == bb.tobytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "net.p2en"
        weights = init_random(TOY_PLAN, 5)
        save_weights(weights, path)
        blob = path.read_bytes()
        assert blob[:4] == b"P2EN"
        version, levels, n_enc = struct.unpack("<III", blob[4:16])
        assert (version, levels, n_enc) == (1, 1, 3)
        assert struct.unpack("<3I", blob[16:28]) == (2, 3, 4)
        n_dec, dec0, head, count = struct.unpack("<IIII", blob[28:44])
        assert (n_dec, dec0, head, count) == (1, 3, 5, 5)
        kind, kernel, cin, cout = struct.unpack("<BBII", blob[44:54])
        assert (kind, kernel, cin, cout) == (0, 3, 2, 3)
        first = struct.unpack("<f", blob[54:58])[0]
        assert first == weights.layers[0][1][0, 0, 0, 0, 0]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.p2en"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(WeightFormatError, match="magic"):
            load_weights(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "net.p2en"
        save_weights(init_random(TOY_PLAN, 5), path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 7)
        path.write_bytes(bytes(blob))
        with pytest.raises(WeightFormatError, match="version"):
            load_weights(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "net.p2en"
        save_weights(init_random(TOY_PLAN, 5), path)
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(WeightTruncationError):
            load_weights(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "net.p2en"
        save_weights(init_random(TOY_PLAN, 5), path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(WeightShapeError, match="trailing"):
            load_weights(path)

    def test_unknown_kind_byte(self, tmp_path):
        path = tmp_path / "net.p2en"
        save_weights(init_random(TOY_PLAN, 5), path)
        blob = bytearray(path.read_bytes())
        blob[44] = 9                      # first layer record's kind byte
        path.write_bytes(bytes(blob))
        with pytest.raises(WeightFormatError, match="kind"):
            load_weights(path)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(OSError, match="nowhere.p2en"):
            load_weights(tmp_path / "nowhere.p2en")
