import numpy as np
import pytest

from ttfill.grid import (DimensionError, ReceiverGrid, ResidualTensor, SamplingMask,
                         SourceSet, compute_source_energy, dematricize, matricize_block,
                         matricize_receiver_by_source, read_grid_meta, read_tensor_csv,
                         write_grid_meta, write_tensor_csv)


def make_tensor(nx, ny, n_s, values=None):
    grid = ReceiverGrid(nx=nx, ny=ny, spacing=1.0, origin_x=0.0, origin_y=0.0)
    sources = SourceSet(coords=np.zeros((n_s, 2)))
    if values is None:
        values = np.zeros((nx, ny, n_s))
    return ResidualTensor(grid, sources, values)


def full_mask(nx, ny, n_s):
    return SamplingMask(np.ones((nx, ny, n_s), dtype=bool))


class TestGridTypes:
    def test_grid_coordinates(self):
        g = ReceiverGrid(nx=3, ny=2, spacing=5.0, origin_x=70.0, origin_y=70.0)
        assert np.allclose(g.x_coords(), [70, 75, 80])
        assert np.allclose(g.y_coords(), [70, 75])

    def test_grid_invariants(self):
        with pytest.raises(ValueError):
            ReceiverGrid(nx=1, ny=2, spacing=1.0)
        with pytest.raises(ValueError):
            ReceiverGrid(nx=2, ny=2, spacing=0.0)

    def test_tensor_shape_check(self):
        with pytest.raises(DimensionError):
            make_tensor(2, 2, 2, values=np.zeros((2, 2, 3)))

    def test_tensor_finite_check(self):
        vals = np.zeros((2, 2, 2))
        vals[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            make_tensor(2, 2, 2, values=vals)

    def test_order_must_be_permutation(self):
        with pytest.raises(ValueError):
            SourceSet(coords=np.zeros((3, 2)), order=np.array([0, 0, 2]))


class TestSourceEnergy:
    def test_all_zero_values_identity_order(self):
        t = make_tensor(2, 2, 3)
        out = compute_source_energy(t, full_mask(2, 2, 3))
        assert np.all(out.energy == 0)
        assert list(out.order) == [0, 1, 2]

    def test_sum_of_absolute_values(self):
        vals = np.zeros((2, 2, 1))
        vals[0, 0, 0] = 0.5
        vals[1, 1, 0] = -0.5
        t = make_tensor(2, 2, 1, vals)
        out = compute_source_energy(t, full_mask(2, 2, 1))
        assert out.energy[0] == pytest.approx(1.0)

    def test_descending_order_three_sources(self):
        # observed absolute sums 0.2, 0.9, 0.4 -> order (source 2, 3, 1) 1-based
        vals = np.zeros((2, 2, 3))
        vals[0, 0, 0] = 0.2
        vals[0, 0, 1] = -0.9
        vals[0, 0, 2] = 0.4
        t = make_tensor(2, 2, 3, vals)
        out = compute_source_energy(t, full_mask(2, 2, 3))
        assert list(out.order) == [1, 2, 0]

    def test_only_observed_entries_count(self):
        vals = np.ones((2, 2, 2))
        flags = np.zeros((2, 2, 2), dtype=bool)
        flags[:, :, 1] = True
        t = make_tensor(2, 2, 2, vals)
        out = compute_source_energy(t, SamplingMask(flags))
        assert out.energy[0] == 0.0
        assert out.energy[1] == pytest.approx(4.0)
        assert list(out.order) == [1, 0]

    def test_shape_mismatch(self):
        t = make_tensor(2, 2, 2)
        with pytest.raises(DimensionError):
            compute_source_energy(t, full_mask(2, 2, 3))


class TestReceiverBySource:
    def test_paper_shape(self):
        t = make_tensor(20, 20, 64)
        v = matricize_receiver_by_source(t, np.arange(64))
        assert v.shape == (400, 64)

    def test_single_source_is_vectorized_grid(self):
        vals = np.arange(4.0).reshape(2, 2, 1)
        t = make_tensor(2, 2, 1, vals)
        v = matricize_receiver_by_source(t, np.array([0]))
        # column-major over (p, q): (0,0), (1,0), (0,1), (1,1)
        assert np.array_equal(v.matrix[:, 0], vals[:, :, 0].ravel(order="F"))

    def test_hand_placed_2x2_grid_two_sources(self):
        vals = np.arange(8.0).reshape(2, 2, 2)  # vals[p,q,s] = 4p + 2q + s
        t = make_tensor(2, 2, 2, vals)
        v = matricize_receiver_by_source(t, np.array([1, 0]))  # source 1 first column
        expected = np.array([
            [vals[0, 0, 1], vals[0, 0, 0]],
            [vals[1, 0, 1], vals[1, 0, 0]],
            [vals[0, 1, 1], vals[0, 1, 0]],
            [vals[1, 1, 1], vals[1, 1, 0]],
        ])
        assert np.array_equal(v.matrix, expected)

    def test_invalid_permutation(self):
        t = make_tensor(2, 2, 2)
        with pytest.raises(ValueError):
            matricize_receiver_by_source(t, np.array([0, 0]))


class TestBlockMatricization:
    def test_paper_shape(self):
        t = make_tensor(20, 20, 64)
        v = matricize_block(t, np.arange(64), 8, 8)
        assert v.shape == (160, 160)

    def test_single_block_is_grid(self):
        vals = np.arange(4.0).reshape(2, 2, 1)
        t = make_tensor(2, 2, 1, vals)
        v = matricize_block(t, np.array([0]), 1, 1)
        assert np.array_equal(v.matrix, vals[:, :, 0])

    def test_column_major_fill_all_16_entries(self):
        # ordering (3,1,4,2) 1-based: source 3 top-left, source 1 below,
        # source 4 top-right, source 2 bottom-right
        vals = np.arange(16.0).reshape(2, 2, 4)
        t = make_tensor(2, 2, 4, vals)
        v = matricize_block(t, np.array([2, 0, 3, 1]), 2, 2)
        expected = np.zeros((4, 4))
        expected[0:2, 0:2] = vals[:, :, 2]
        expected[2:4, 0:2] = vals[:, :, 0]
        expected[0:2, 2:4] = vals[:, :, 3]
        expected[2:4, 2:4] = vals[:, :, 1]
        assert np.array_equal(v.matrix, expected)
        assert np.array_equal(v.source_layout, [[2, 3], [0, 1]])

    def test_incompatible_layout(self):
        t = make_tensor(2, 2, 4)
        with pytest.raises(ValueError):
            matricize_block(t, np.arange(4), 3, 2)

    def test_block_boundaries_partition(self):
        rng = np.random.default_rng(0)
        t = make_tensor(3, 4, 6, rng.normal(size=(3, 4, 6)))
        v = matricize_block(t, np.arange(6), 2, 3)
        # each (i, j) maps to exactly one (p, q, s)
        flat = v.rows * v.shape[1] + v.cols
        assert np.unique(flat).size == flat.size
        # block interiors: every entry of block (bi, bj) comes from one source
        for bi in range(2):
            for bj in range(3):
                rs = v.rows[(v.rows // 3 == bi) & (v.cols // 4 == bj)]
                assert rs.size == 12


class TestRoundTrips:
    @pytest.mark.parametrize("layout", ["rbs", "block"])
    def test_exact_round_trip(self, layout):
        rng = np.random.default_rng(42)
        vals = rng.normal(size=(3, 4, 6))
        t = make_tensor(3, 4, 6, vals)
        order = rng.permutation(6)
        if layout == "rbs":
            v = matricize_receiver_by_source(t, order)
        else:
            v = matricize_block(t, order, 2, 3)
        back = dematricize(v)
        assert np.array_equal(back.values, vals)

    def test_single_entry_perturbation_moves_one_entry(self):
        rng = np.random.default_rng(7)
        vals = rng.normal(size=(2, 2, 2))
        t = make_tensor(2, 2, 2, vals)
        v = matricize_block(t, np.array([1, 0]), 1, 2)
        base = dematricize(v).values
        n_rows, n_cols = v.shape
        for i in range(n_rows):
            for j in range(n_cols):
                v.matrix[i, j] += 1.0
                changed = dematricize(v).values != base
                assert changed.sum() == 1
                v.matrix[i, j] -= 1.0

    def test_mask_commutes_with_matricization(self):
        rng = np.random.default_rng(3)
        vals = rng.normal(size=(3, 3, 4))
        flags = rng.random((3, 3, 4)) < 0.4
        t = make_tensor(3, 3, 4, vals)
        v = matricize_block(t, np.arange(4), 2, 2)
        masked_then_mapped = v.map_tensor(np.where(flags, vals, 0.0))
        mapped_then_masked = np.where(v.map_tensor(flags), v.matrix, 0.0)
        assert np.array_equal(masked_then_mapped, mapped_then_masked)

    def test_energy_order_idempotent_on_sorted(self):
        energy = np.array([5.0, 3.0, 1.0])
        order = np.lexsort((np.arange(3), -energy))
        assert list(energy[order]) == sorted(energy, reverse=True)
        assert list(energy[order][order]) == sorted(energy, reverse=True)


class TestTensorCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        vals = rng.normal(size=(3, 2, 2))
        flags = rng.random((3, 2, 2)) < 0.5
        sig = rng.uniform(0.03, 0.15, (3, 2))
        t = make_tensor(3, 2, 2, vals)
        path = tmp_path / "t.csv"
        write_tensor_csv(path, t, SamplingMask(flags), sig)
        vals2, flags2, sig2 = read_tensor_csv(path)
        assert np.array_equal(vals2, vals)
        assert np.array_equal(flags2, flags)
        assert np.array_equal(sig2, sig)

    def test_byte_reproducible_and_sorted(self, tmp_path):
        rng = np.random.default_rng(6)
        t = make_tensor(2, 2, 3, rng.normal(size=(2, 2, 3)))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_tensor_csv(p1, t)
        write_tensor_csv(p2, t)
        raw = p1.read_bytes()
        assert raw == p2.read_bytes()
        assert b"\r" not in raw
        rows = raw.decode().strip().split("\n")[1:]
        keys = [tuple(int(x) for x in r.split(",")[:3]) for r in rows]
        assert keys == sorted(keys)

    def test_meta_round_trip(self, tmp_path):
        g = ReceiverGrid(nx=4, ny=5, spacing=5.0, origin_x=70.0, origin_y=70.0)
        src = SourceSet(coords=np.array([[71.5, 80.25], [90.0, 100.125]]))
        path = tmp_path / "meta.cfg"
        write_grid_meta(path, g, src, extra={"sigma_budget": 3.719, "n_obs": "3840"})
        g2, src2, extra = read_grid_meta(path)
        assert g2 == g
        assert np.array_equal(src2.coords, src.coords)
        assert float(extra["sigma_budget"]) == 3.719
        assert extra["n_obs"] == "3840"
