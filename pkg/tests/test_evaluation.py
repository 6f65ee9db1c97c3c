import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scatterct.evaluation import (
    MATERIALS, Material, Phantom, Region, disk_mask, load_mask, make_phantom, material_ellipses, resample_mask, rmse,
)
from scatterct.geometry import Grid2D


class TestRmse:
    def test_examples(self):
        assert rmse([1.0, 1.0], [1.0, 1.0]) == 0.0
        assert rmse([0.0, 0.0], [3.0, 4.0]) == 1.0
        assert rmse([2.0, 0.0], [1.0, 0.0]) == 1.0
        assert rmse([1.1, 2.0], [1.0, 2.0]) == pytest.approx(0.01 / 5)

    def test_errors(self):
        with pytest.raises(ValueError):
            rmse([1.0], [0.0])
        with pytest.raises(ValueError):
            rmse([1.0, 2.0], [1.0])

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.floats(0.1, 100))
    def test_scale_invariant(self, vals, c):
        t = np.asarray(vals) + 20.0
        e = t + np.linspace(-1, 1, t.size)
        assert rmse(c * e, c * t) == pytest.approx(rmse(e, t), rel=1e-10)


class TestPhantoms:
    def test_phantom2_regions(self):
        ph = make_phantom("phantom2", Grid2D(50, 20.0))
        assert [r.name for r in ph.regions] == ["water", "delrin", "graphite"]
        mm = ph.material_map
        assert set(np.unique(mm.rho)) == {0.0, 1.0, 1.4, 2.23}
        for r in ph.regions:
            assert r.mask.sum() > 50

    def test_phantom1_single_material(self):
        ph = make_phantom("phantom1", Grid2D(50, 20.0))
        mm = ph.material_map
        assert set(np.unique(mm.rho)) == {0.0, 1.18}
        assert 0.1 < np.mean(mm.rho > 0) < 0.9

    def test_table_values(self):
        assert (MATERIALS["water"].rho, MATERIALS["water"].p) == (1.0, 0.5439)
        assert (MATERIALS["graphite"].rho, MATERIALS["graphite"].p) == (2.23, 0.2177)

    def test_custom_regions(self):
        spec = {"regions": [{"material": {"name": "x", "rho": 0.5, "p": 0.1}, "center": [10, 10], "radius": 3}]}
        ph = make_phantom(spec, Grid2D(20, 20.0))
        assert ph.regions[0].material == Material("x", 0.5, 0.1)

    def test_overlap_rejected(self):
        g = Grid2D(10, 10.0)
        m = disk_mask(g, (5, 5), 2)
        with pytest.raises(ValueError):
            Phantom(g, [Region("a", m, MATERIALS["water"]), Region("b", m, MATERIALS["delrin"])])

    def test_unknown_names(self):
        with pytest.raises(ValueError):
            make_phantom("phantom9", Grid2D(4, 1.0))
        with pytest.raises(ValueError):
            make_phantom({"regions": [{"material": "unobtainium", "center": [0, 0], "radius": 1}]}, Grid2D(4, 1.0))

    def test_disk_mask_counts(self):
        # centers at 0.5..3.5 on a unit grid; radius 1 around (2, 2) keeps 4 pixels
        assert disk_mask(Grid2D(4, 4.0), (2.0, 2.0), 1.0).sum() == 4

    def test_mask_orientation(self, tmp_path):
        f = tmp_path / "m.txt"
        f.write_text("10\n00\n")
        m = load_mask(f)
        assert m[1, 0] and not m[0, 0]

    def test_resample_identity_and_blocks(self):
        m = np.eye(3, dtype=bool)
        np.testing.assert_array_equal(resample_mask(m, 3), m)
        np.testing.assert_array_equal(resample_mask(m, 6), np.kron(m, np.ones((2, 2), dtype=bool)))


class TestEllipses:
    def test_exact_images(self, tmp_path):
        ph = make_phantom("phantom2", Grid2D(30, 20.0))
        mm = ph.material_map
        rep = material_ellipses(mm.rho, mm.p, ph, tmp_path / "e.csv", tmp_path / "e.svg")
        assert all(rep.contains_truth().values())
        for r in rep.rows:
            assert r.std_rho < 1e-12 and r.mean_rho == pytest.approx(r.true_rho, rel=1e-14)
        assert (tmp_path / "e.csv").read_text().splitlines()[0].startswith("material,mean_rho")
        assert (tmp_path / "e.svg").read_text().count("<ellipse") == 3

    def test_erosion_drops_rim(self):
        g = Grid2D(5, 5.0)
        mask = np.zeros((5, 5), bool)
        mask[1:4, 1:4] = True
        ph = Phantom(g, [Region("w", mask, MATERIALS["water"])])
        rho = np.zeros((5, 5))
        rho[mask] = 9.0
        rho[2, 2] = 1.0
        rep = material_ellipses(rho.ravel(), rho.ravel(), ph)
        assert rep.rows[0].n_pixels == 1 and rep.rows[0].mean_rho == 1.0

    def test_biased_estimate_fails(self):
        ph = make_phantom("phantom2", Grid2D(30, 20.0))
        mm = ph.material_map
        r = np.random.default_rng(0)
        rep = material_ellipses(mm.rho + 0.5 + 0.01 * r.standard_normal(900), mm.p, ph)
        assert not any(rep.contains_truth().values())

    def test_vanishing_region_warns(self):
        g = Grid2D(4, 4.0)
        mask = np.zeros((4, 4), bool)
        mask[0, 0] = True
        ph = Phantom(g, [Region("dot", mask, MATERIALS["water"])])
        with pytest.warns(RuntimeWarning):
            assert material_ellipses(np.zeros(16), np.zeros(16), ph).rows == []
