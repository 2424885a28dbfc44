"""Market-data layer tests: grids, surfaces, history IO, splits, curves."""

import datetime as dt
import math

import numpy as np
import pytest

from volwmc import (DEFAULT_GRID, CurveError, DataFormatError, DiscountCurve,
                    GridError, MarketHistory, SurfaceGrid, SwapSchedule,
                    VolSurface, annuity_factor, chronological_split,
                    forward_swap_rate, load_history, mrae, mrae_arrays,
                    save_history, sliding_window_std, synthetic_history)


def make_surface(value=0.006, date=dt.date(2020, 1, 2), grid=DEFAULT_GRID):
    vols = np.full(grid.shape, value)
    return VolSurface(date, grid, vols)


class TestGrid:
    def test_default_grid_shape(self):
        assert DEFAULT_GRID.shape == (7, 7)
        assert DEFAULT_GRID.size == 49
        assert DEFAULT_GRID.strike_offsets[DEFAULT_GRID.atm_index] == 0.0

    def test_nodes_enumerates_expiry_major(self):
        dks, ts = DEFAULT_GRID.nodes()
        assert dks.shape == ts.shape == (49,)
        # expiry-major: all strikes of the first expiry come first
        assert np.array_equal(dks[:7], DEFAULT_GRID.strike_offsets)
        assert np.all(ts[:7] == DEFAULT_GRID.expiries[0])
        assert ts[7] == DEFAULT_GRID.expiries[1] and dks[7] == DEFAULT_GRID.strike_offsets[0]


class TestSurface:
    def test_vol_lookup(self):
        grid = SurfaceGrid((-0.001, 0.0, 0.001), (1.0, 2.0))
        vols = np.arange(6, dtype=float).reshape(2, 3) / 100.0 + 0.001
        surf = VolSurface(dt.date(2020, 1, 2), grid, vols)
        assert surf.vol(0.001, 2.0) == vols[1, 2]
        assert surf.atm_vol(1.0) == vols[0, 1]
        with pytest.raises(GridError):
            surf.vol(0.0005, 1.0)
        with pytest.raises(GridError):
            surf.vol(0.0, 1.5)

    def test_flat_order_matches_nodes(self):
        grid = SurfaceGrid((-0.001, 0.0, 0.001), (1.0, 2.0))
        vols = np.array([[0.0010, 0.0020, 0.0030], [0.0040, 0.0050, 0.0060]])
        surf = VolSurface(None, grid, vols)
        assert surf.flat().tolist() == [0.0010, 0.0020, 0.0030,
                                        0.0040, 0.0050, 0.0060]

    def test_mrae_hand_value(self):
        a = make_surface(0.0050)
        b = VolSurface(a.date, a.grid, np.full(a.grid.shape, 0.0055))
        # every node off by 10% of the reference
        assert mrae(a, b) == pytest.approx(0.1, rel=1e-12)
        with pytest.raises(ValueError):
            mrae_arrays(np.array([0.0, 0.005]), np.array([0.001, 0.005]))


class TestHistoryIO:
    def test_round_trip(self, tmp_path, tiny_history):
        path = tmp_path / "hist.csv"
        save_history(tiny_history, path)
        loaded = load_history(path)
        assert len(loaded) == len(tiny_history)
        assert loaded.dates == tiny_history.dates
        assert np.allclose(loaded.vol_matrix(), tiny_history.vol_matrix(),
                           atol=1e-12)

    def test_header_is_stable(self, tmp_path, tiny_history):
        path = tmp_path / "hist.csv"
        save_history(tiny_history, path)
        header = path.read_text().splitlines()[0]
        assert header == "date,expiry_years,strike_offset,normal_vol"

    def test_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("date,expiry,offset,vol\n2020-01-02,1.0,0.0,0.005\n")
        with pytest.raises(DataFormatError):
            load_history(path)

    def test_rejects_incomplete_date(self, tmp_path, tiny_history):
        path = tmp_path / "hist.csv"
        save_history(MarketHistory([tiny_history[0]]), path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")  # drop one node
        with pytest.raises(DataFormatError):
            load_history(path)

    def test_grid_mismatch(self, tmp_path):
        grid = SurfaceGrid((-0.001, 0.0, 0.001), (1.0, 2.0))
        hist = MarketHistory([make_surface(grid=grid)])
        path = tmp_path / "hist.csv"
        save_history(hist, path)
        with pytest.raises(GridError):
            load_history(path)  # expects the default 7x7 grid
        assert len(load_history(path, expected_grid=None)) == 1


class TestSplit:
    def test_partitions_history(self, tiny_history):
        train, val, test = chronological_split(tiny_history, 0.7,
                                               n_validation=12, seed=0)
        assert len(train) + len(val) + len(test) == len(tiny_history)
        assert len(test) == len(tiny_history) - 84
        assert len(val) == 12
        # test block is strictly the chronological tail
        cut = tiny_history[84].date
        assert all(s.date >= cut for s in test)
        assert all(s.date < cut for s in train)
        assert all(s.date < cut for s in val)

    def test_deterministic(self, tiny_history):
        a = chronological_split(tiny_history, 0.7, n_validation=10, seed=5)
        b = chronological_split(tiny_history, 0.7, n_validation=10, seed=5)
        assert [s.date for s in a[1]] == [s.date for s in b[1]]
        c = chronological_split(tiny_history, 0.7, n_validation=10, seed=6)
        assert [s.date for s in a[1]] != [s.date for s in c[1]]

    def test_validation_can_be_empty(self, tiny_history):
        train, val, test = chronological_split(tiny_history, 0.7,
                                               n_validation=0, seed=0)
        assert val is None
        assert len(train) == 84 and len(test) == 36

    def test_rejects_bad_arguments(self, tiny_history):
        with pytest.raises(ValueError):
            chronological_split(tiny_history, 1.5)
        with pytest.raises(ValueError):
            chronological_split(tiny_history, 0.7, n_validation=1000)


class TestSynthetic:
    def test_shape_and_positivity(self, tiny_history):
        assert len(tiny_history) == 120
        mat = tiny_history.vol_matrix()
        assert mat.shape == (120, 49)
        assert np.all(mat > 0.0)
        assert np.all(mat < 0.05)

    def test_dates_strictly_increasing(self, tiny_history):
        dates = tiny_history.dates
        assert all(b > a for a, b in zip(dates, dates[1:]))

    def test_seed_controls_output(self):
        a = synthetic_history(10, seed=1)
        b = synthetic_history(10, seed=1)
        c = synthetic_history(10, seed=2)
        assert np.array_equal(a.vol_matrix(), b.vol_matrix())
        assert not np.array_equal(a.vol_matrix(), c.vol_matrix())

    def test_smile_has_curvature(self, tiny_history):
        # wings above ATM on average: the generator produces smiles, not lines
        mat = tiny_history.vol_matrix().reshape(120, 7, 7)
        wings = 0.5 * (mat[:, :, 0] + mat[:, :, -1])
        atm = mat[:, :, 3]
        assert np.mean(wings - atm) > 0.0


class TestDispersion:
    def test_hand_computed_window(self):
        grid = SurfaceGrid((0.0,), (1.0,))
        values = [0.004, 0.005, 0.006]
        hist = MarketHistory([
            VolSurface(dt.date(2020, 1, 2 + i), grid, np.array([[v]]))
            for i, v in enumerate(values)
        ])
        out = sliding_window_std(hist, window=3, relative=False)
        assert math.isnan(out[0]) and math.isnan(out[1])
        assert out[2] == pytest.approx(np.std(values), rel=1e-12)
        rel = sliding_window_std(hist, window=3, relative=True)
        assert rel[2] == pytest.approx(np.std(values) / np.mean(values), rel=1e-12)

    def test_window_too_small(self, tiny_history):
        with pytest.raises(ValueError):
            sliding_window_std(tiny_history, window=1)


class TestCurve:
    def test_flat_curve_df(self):
        curve = DiscountCurve.flat(0.02)
        assert curve.df(0.0) == pytest.approx(1.0)
        assert curve.df(3.0) == pytest.approx(math.exp(-0.06), rel=1e-12)

    def test_log_linear_interpolation(self):
        curve = DiscountCurve([1.0, 2.0], [0.99, 0.97])
        mid = curve.df(1.5)
        assert mid == pytest.approx(math.sqrt(0.99 * 0.97), rel=1e-12)

    def test_no_extrapolation(self):
        curve = DiscountCurve([2.0], [0.96])
        with pytest.raises(CurveError):
            curve.df(2.5)

    def test_allows_df_above_one(self):
        # negative-rate regimes imply discount factors above par
        curve = DiscountCurve([1.0], [1.005])
        assert curve.df(1.0) == pytest.approx(1.005)

    def test_validation(self):
        with pytest.raises(ValueError):
            DiscountCurve([2.0, 1.0], [0.9, 0.95])
        with pytest.raises(ValueError):
            DiscountCurve([1.0], [-0.5])

    def test_annuity_and_forward_hand_values(self):
        r = 0.01
        curve = DiscountCurve.flat(r)
        schedule = SwapSchedule.annual(5.0, 5)
        assert schedule.times == (5.0, 6.0, 7.0, 8.0, 9.0, 10.0)
        annuity = sum(math.exp(-r * t) for t in schedule.times[1:])
        assert annuity_factor(curve, schedule) == pytest.approx(annuity, rel=1e-12)
        fwd = (math.exp(-r * 5.0) - math.exp(-r * 10.0)) / annuity
        assert forward_swap_rate(curve, schedule) == pytest.approx(fwd, rel=1e-12)

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            SwapSchedule((1.0,))
        with pytest.raises(ValueError):
            SwapSchedule((2.0, 1.0))
