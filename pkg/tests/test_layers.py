import networkx as nx
import numpy as np
import pytest

from holovae.exceptions import NumericError, ShapeError, ValidationError
from holovae.layers import (
    BlockSpec,
    batch_norm_forward,
    cg_block_forward,
    etp_forward,
    init_block,
    linear_forward,
    mst_pair_set,
    mst_pairs_for_degree,
    signal_norm_forward,
    skip_connection,
)
from holovae.so3 import CGCache, Rotation, wigner_d_list
from holovae.steerable import Signature, SteerableTensor, cg_tensor_product_full, total_norm


def feats(rng, lmax, C, B=4):
    return {l: rng.normal(size=(B, C, 2 * l + 1)) for l in range(lmax + 1)}


def rot(x, R):
    D = wigner_d_list(max(x), R)
    return {l: h @ D[l].T for l, h in x.items()}


def max_diff(a, b):
    assert sorted(a) == sorted(b)
    return max(np.abs(a[l] - b[l]).max() for l in a)


def as_tensor(x, i):
    sig = Signature(tuple((l, h.shape[1]) for l, h in sorted(x.items())))
    return SteerableTensor.from_blocks({l: h[i] for l, h in x.items()}, sig)


class TestLinear:
    def test_identity(self, rng):
        x = feats(rng, 2, 3)
        out = linear_forward(x, {l: np.eye(3) for l in x})
        assert max_diff(out, x) == 0.0

    def test_doubles_vector(self):
        x = {1: np.array([[[1.0, -2.0, 3.0]]])}
        assert linear_forward(x, {1: np.array([[2.0]])})[1].tolist() == [[[2.0, -4.0, 6.0]]]

    def test_equivariant(self, rng):
        x = feats(rng, 3, 4)
        W = {l: rng.normal(size=(4, 5)) for l in x}
        for _ in range(10):
            R = Rotation.random(rng)
            assert max_diff(linear_forward(rot(x, R), W), rot(linear_forward(x, W), R)) < 1e-10

    def test_shape_error(self, rng):
        with pytest.raises(ShapeError):
            linear_forward(feats(rng, 1, 3), {0: np.eye(2), 1: np.eye(3)})


class TestMst:
    def test_trivial_cases(self):
        assert mst_pair_set(0, 0) == {0: [(0, 0)]}
        assert (1, 1) in mst_pair_set(1, 2)[2]

    def test_invariants(self):
        for lin in range(1, 7):
            for l3, pairs in mst_pair_set(lin, 2 * lin).items():
                assert all(abs(a - b) <= l3 <= a + b for a, b in pairs)
                assert {(l, l) for l in range(lin + 1) if l3 <= 2 * l} <= set(pairs)

    def test_matches_networkx(self):
        for lin in range(1, 7):
            for l3 in range(2 * lin + 1):
                G = nx.Graph()
                G.add_nodes_from(range(lin + 1))
                for a in range(lin + 1):
                    for b in range(a + 1, lin + 1):
                        if abs(a - b) <= l3 <= a + b:
                            G.add_edge(a, b, weight=(2 * a + 1) * (2 * b + 1))
                forest = nx.minimum_spanning_tree(G, algorithm="kruskal")
                expected = {tuple(sorted(e)) for e in forest.edges()} | {(l, l) for l in range(lin + 1) if l3 <= 2 * l}
                ours = mst_pairs_for_degree(lin, l3)
                assert sum((2 * a + 1) * (2 * b + 1) for a, b in ours if a != b) == forest.size(weight="weight")
                assert set(ours) == expected, (lin, l3)

    def test_linear_growth(self):
        lmax = np.arange(1, 9)
        counts = np.array([len(mst_pairs_for_degree(int(n), int(n))) for n in lmax])
        a, b = np.polyfit(lmax, counts, 1)
        assert np.abs(counts - (a * lmax + b)).max() <= 1.0
        widest = [max(len(mst_pairs_for_degree(int(n), l3)) for l3 in range(2 * n + 1)) for n in lmax]
        assert widest == list(2 * lmax)
        full = [sum(1 for p in range(n + 1) for q in range(n + 1) if abs(p - q) <= n <= p + q) for n in lmax]
        assert counts[-1] < full[-1] / 2

    def test_output_degree_bound(self):
        assert max(mst_pair_set(2, 9)) == 4


class TestEtp:
    def test_channels_scale_linearly(self, rng):
        pairs = mst_pair_set(2, 2)
        a = etp_forward(feats(rng, 2, 3), feats(rng, 2, 3), pairs)
        b = etp_forward(feats(rng, 2, 6), feats(rng, 2, 6), pairs)
        for l in pairs:
            assert b[l].shape[1] == 2 * a[l].shape[1] == 2 * 3 * len(pairs[l])

    def test_equivariant(self, rng):
        pairs = mst_pair_set(3, 4)
        cache = CGCache(4)
        worst = 0.0
        for _ in range(100):
            x, y = feats(rng, 3, 2, B=1), feats(rng, 3, 2, B=1)
            R = Rotation.random(rng)
            worst = max(worst, max_diff(etp_forward(rot(x, R), rot(y, R), pairs, cache), rot(etp_forward(x, y, pairs, cache), R)))
        assert worst < 1e-9

    def test_scalars(self, rng):
        x, y = feats(rng, 0, 4), feats(rng, 0, 4)
        out = etp_forward(x, y, {0: [(0, 0)]})
        np.testing.assert_array_equal(out[0], x[0] * y[0])

    def test_matches_full_product_restricted(self, rng):
        C = 3
        x, y = feats(rng, 2, C, B=1), feats(rng, 2, C, B=1)
        pairs = mst_pair_set(2, 3)
        cache = CGCache(4)
        out = etp_forward(x, y, pairs, cache)
        diag = [c * C + c for c in range(C)]
        for l3, plist in pairs.items():
            for p, (l1, l2) in enumerate(plist):
                xa = SteerableTensor(Signature(((l1, C),)), x[l1][0].ravel())
                yb = SteerableTensor(Signature(((l2, C),)), y[l2][0].ravel())
                ref = cg_tensor_product_full(xa, yb, l3, cache).block(l3)[diag]
                # independent summation order: agreement to a few ulps
                np.testing.assert_allclose(out[l3][0, p * C : (p + 1) * C], ref, rtol=1e-14, atol=1e-15)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            etp_forward(feats(rng, 1, 2), feats(rng, 1, 3), mst_pair_set(1, 1))


class TestBatchNorm:
    def test_unit_norm_identity(self, rng):
        v = rng.normal(size=(1, 2, 3))
        v /= np.sqrt(np.mean(v * v, axis=2, keepdims=True))
        x = {1: np.repeat(v, 5, axis=0)}
        out, _ = batch_norm_forward(x, {1: np.ones(2)}, {1: np.ones(2)})
        np.testing.assert_allclose(out[1], x[1], atol=1e-12)

    def test_running_update(self):
        x = {0: np.full((3, 1, 1), np.sqrt(2.0))}
        _, running = batch_norm_forward(x, {0: np.ones(1)}, {0: np.ones(1)}, momentum=0.1)
        assert running[0][0] == pytest.approx(1.1, abs=1e-15)

    def test_eval_pure(self, rng):
        x = feats(rng, 2, 3)
        w = {l: rng.uniform(0.5, 2, 3) for l in x}
        run = {l: rng.uniform(0.5, 2, 3) for l in x}
        a, ra = batch_norm_forward(x, w, run, "eval")
        b, _ = batch_norm_forward(x, w, run, "eval")
        assert all(a[l].tobytes() == b[l].tobytes() for l in x)
        assert ra is run

    def test_equivariant(self, rng):
        x = feats(rng, 3, 4, B=6)
        w = {l: rng.uniform(0.5, 2, 4) for l in x}
        run = {l: np.ones(4) for l in x}
        for _ in range(10):
            R = Rotation.random(rng)
            for mode in ("train", "eval"):
                a, _ = batch_norm_forward(rot(x, R), w, run, mode)
                b, _ = batch_norm_forward(x, w, run, mode)
                assert max_diff(a, rot(b, R)) < 1e-9

    def test_bad_mode_and_empty(self, rng):
        with pytest.raises(ValidationError):
            batch_norm_forward(feats(rng, 1, 2), {}, {}, "test")
        with pytest.raises(ValidationError):
            batch_norm_forward({0: np.zeros((0, 1, 1))}, {0: np.ones(1)}, {0: np.ones(1)})


class TestSignalNorm:
    def test_total_norm_one(self, rng):
        x = feats(rng, 3, 3, B=5)
        out = signal_norm_forward(x, {l: np.ones(1) for l in x})
        for i in range(5):
            assert float(total_norm(as_tensor(out, i))) == pytest.approx(1.0, abs=1e-10)

    def test_already_normalized(self, rng):
        x = signal_norm_forward(feats(rng, 2, 2), {l: np.ones(1) for l in range(3)})
        again = signal_norm_forward(x, {l: np.ones(1) for l in x})
        assert max_diff(again, x) < 1e-14

    def test_equivariant(self, rng):
        x = feats(rng, 3, 2)
        w = {l: rng.uniform(0.5, 2, 1) for l in x}
        for _ in range(10):
            R = Rotation.random(rng)
            assert max_diff(signal_norm_forward(rot(x, R), w), rot(signal_norm_forward(x, w), R)) < 1e-10

    def test_zero_input(self):
        with pytest.raises(NumericError):
            signal_norm_forward({0: np.zeros((2, 1, 1))}, {0: np.ones(1)})


class TestBlock:
    def test_degree_bound(self, rng):
        spec = BlockSpec(1, 2, 5, 3)
        params, buffers = init_block(spec, "b", rng)
        out, _ = cg_block_forward(feats(rng, 1, 2), params, buffers, spec, "b", "train")
        assert max(out) == 2

    def test_equivariant(self, rng):
        worst = 0.0
        for t in range(50):
            lin, lout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            cin, cout = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            spec = BlockSpec(lin, cin, lout, cout)
            params, buffers = init_block(spec, "b", rng)
            x = feats(rng, lin, cin, B=3)
            R = Rotation.random(rng)
            mode = "train" if t % 2 else "eval"
            a, _ = cg_block_forward(rot(x, R), params, buffers, spec, "b", mode)
            b, _ = cg_block_forward(x, params, buffers, spec, "b", mode)
            worst = max(worst, max_diff(a, rot(b, R)))
        assert worst < 1e-8

    def test_zero_linear_leaves_skip(self, rng):
        spec = BlockSpec(2, 2, 3, 4)
        params, buffers = init_block(spec, "b", rng)
        params = {k: (np.zeros_like(v) if ".lin." in k else v) for k, v in params.items()}
        x = feats(rng, 2, 2)
        out, _ = cg_block_forward(x, params, buffers, spec, "b")
        for l in range(3):
            np.testing.assert_array_equal(out[l][:, :2], x[l])
            assert not np.any(out[l][:, 2:])
        assert not np.any(out[3])

    def test_skip_truncates(self, rng):
        x = feats(rng, 2, 4)
        out = skip_connection(x, {0: np.zeros((4, 2, 1)), 1: np.zeros((4, 2, 3))})
        np.testing.assert_array_equal(out[1], x[1][:, :2])
        assert 2 not in out

    def test_running_norms_updated_in_train_only(self, rng):
        spec = BlockSpec(1, 2, 1, 2)
        params, buffers = init_block(spec, "b", rng)
        x = feats(rng, 1, 2)
        _, nb = cg_block_forward(x, params, buffers, spec, "b", "train")
        assert not np.allclose(nb["b.bn_running.1"], buffers["b.bn_running.1"])
        _, nb = cg_block_forward(x, params, buffers, spec, "b", "eval")
        assert np.array_equal(nb["b.bn_running.1"], buffers["b.bn_running.1"])

    def test_signature_mismatch(self, rng):
        spec = BlockSpec(2, 2, 2, 2)
        params, buffers = init_block(spec, "b", rng)
        with pytest.raises(ShapeError):
            cg_block_forward(feats(rng, 1, 2), params, buffers, spec, "b")
