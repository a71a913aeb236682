import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from floodtile.oracle import (
    BEY_DISCHARGES,
    BEY_TEST,
    BEY_TRAIN,
    BEY_VAL,
    SplitError,
    SyntheticDomain,
    flooded_cells,
    gen_terrain,
    make_splits,
    simulate_water_level,
)
from floodtile.raster_io import Raster


@pytest.fixture(scope="module")
def domain():
    return gen_terrain(3, 64, 128)


class TestTerrain:
    def test_deterministic(self):
        a, b = gen_terrain(11, 64, 96), gen_terrain(11, 64, 96)
        assert a.dem.values.tobytes() == b.dem.values.tobytes()
        assert a.rating == b.rating

    def test_seeds_differ(self):
        a, b = gen_terrain(1, 64, 96), gen_terrain(2, 64, 96)
        assert (a.dem.values != b.dem.values).mean() > 0.5

    def test_too_small(self):
        with pytest.raises(ValueError):
            gen_terrain(0, 32, 128)

    def test_channel_is_4_connected_border_to_border(self, domain):
        cells = domain.channel_cells
        steps = np.abs(np.diff(cells, axis=0)).sum(axis=1)
        assert np.all(steps == 1)
        assert cells[0, 1] == 0 and cells[-1, 1] == domain.cols - 1

    def test_channel_cells_are_cross_valley_minima(self, domain):
        z = domain.dem.values
        on = np.zeros(z.shape, bool)
        on[domain.channel_cells[:, 0], domain.channel_cells[:, 1]] = True
        for r, c in domain.channel_cells:
            for rr in (r - 1, r + 1):
                if 0 <= rr < domain.rows and not on[rr, c]:
                    assert z[r, c] < z[rr, c]

    def test_rating_valid(self, domain):
        k, e = domain.rating
        assert k > 0 and 0 < e < 1

    def test_largest_discharge_floods_target_fraction(self, domain):
        frac = flooded_cells(domain, max(BEY_DISCHARGES))[0].mean()
        assert 0.15 <= frac <= 0.40


class TestWaterLevel:
    def test_nonpositive_q(self, domain):
        with pytest.raises(ValueError):
            simulate_water_level(domain, 0.0)

    def test_tiny_q_floods_only_channel(self, domain):
        wet, _ = flooded_cells(domain, 1e-9)
        on = np.zeros(wet.shape, bool)
        on[domain.channel_cells[:, 0], domain.channel_cells[:, 1]] = True
        assert not (wet & ~on).any()

    def test_depth_positive_where_wet(self, domain):
        r = simulate_water_level(domain, 200.0)
        valid = ~r.is_nodata()
        assert valid.any() and (r.values[valid] > 0).all()

    def test_walled_pit_stays_dry(self):
        z = np.full((64, 64), 10.0)
        z[30:34, :] = 0.0  # channel trench, rows 30..33
        z[5:15, 5:15] = 20.0  # wall
        z[7:13, 7:13] = 1.0  # pit below the water surface, enclosed
        channel = np.array([(31, c) for c in range(64)])
        dom = SyntheticDomain(0, Raster(z.astype(np.float32)), channel, (1.0, 0.5))
        wet, surface = flooded_cells(dom, 4.0)  # surface = 2 m everywhere
        assert np.all(surface == 2.0)
        assert wet[30:34].all()
        assert not wet[7:13, 7:13].any()
        assert simulate_water_level(dom, 4.0).is_nodata()[7:13, 7:13].all()

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1.0, 300.0), st.floats(1.01, 3.0))
    def test_monotone_and_connected(self, seed, q1, ratio):
        dom = gen_terrain(seed, 64, 64)
        q2 = q1 * ratio
        a, b = simulate_water_level(dom, q1), simulate_water_level(dom, q2)
        wa, wb = ~a.is_nodata(), ~b.is_nodata()
        assert not (wa & ~wb).any()
        assert (a.values[wa] <= b.values[wa]).all()
        labels, _ = ndimage.label(wb, structure=ndimage.generate_binary_structure(2, 1))
        seeds = set(labels[dom.channel_cells[:, 0], dom.channel_cells[:, 1]]) - {0}
        assert set(np.unique(labels[wb])) <= seeds


class TestSplits:
    def test_default_counts(self):
        s = make_splits(BEY_DISCHARGES)
        assert (len(s["train"]), len(s["val"]), len(s["test"])) == (18, 4, 5)
        assert s["train"] == [float(q) for q in BEY_TRAIN]
        assert s["val"] == sorted(map(float, BEY_VAL)) and s["test"] == sorted(map(float, BEY_TEST))

    def test_same_spec_same_split(self):
        assert make_splits(BEY_DISCHARGES) == make_splits(list(reversed(BEY_DISCHARGES)))

    def test_extrapolation_rejected(self):
        with pytest.raises(SplitError, match="extrapolation split"):
            make_splits([5, 10, 20, 30], val=[10], test=[30])

    def test_overlap_rejected(self):
        with pytest.raises(SplitError, match="overlap"):
            make_splits([5, 10, 20, 30], val=[10], test=[10])

    def test_unknown_value(self):
        with pytest.raises(SplitError):
            make_splits([5, 10, 20], val=[11], test=[])

    def test_duplicates(self):
        with pytest.raises(SplitError):
            make_splits([5, 10, 10, 20], val=[10], test=[])
