"""Path generation, serialization, and weight-file binding tests."""

import numpy as np
import pytest

from volwmc import (CurveError, DataFormatError, PathBindingError, PathSet,
                    WeightVector, generate_brownian_paths, load_paths,
                    load_weights, save_paths, save_weights)
from volwmc.paths import path_normals, weights_match_paths


@pytest.fixture(scope="module")
def paths():
    return generate_brownian_paths(nu=400, horizon=5.0, steps=50,
                                   sigma_prior=0.006, seed=42)


class TestGeneration:
    def test_shape_and_grid(self, paths):
        assert paths.values.shape == (400, 51)
        assert paths.nu == 400
        assert paths.n_steps == 50
        assert paths.horizon == 5.0
        assert paths.dt == pytest.approx(0.1)
        assert np.all(paths.values[:, 0] == 0.0)
        assert np.allclose(paths.times, np.linspace(0.0, 5.0, 51))

    def test_increment_moments(self):
        big = generate_brownian_paths(nu=4000, horizon=2.0, steps=40,
                                      sigma_prior=0.01, seed=0)
        dx = np.diff(big.values, axis=1)
        # (4000, 40) iid N(0, sigma^2 dt) samples
        sd = 0.01 * np.sqrt(big.dt)
        assert abs(dx.mean()) < 4.0 * sd / np.sqrt(dx.size)
        assert dx.std() == pytest.approx(sd, rel=0.01)

    def test_path_streams_are_independent_of_count(self):
        few = generate_brownian_paths(nu=10, horizon=1.0, steps=10,
                                      sigma_prior=0.005, seed=9)
        many = generate_brownian_paths(nu=50, horizon=1.0, steps=10,
                                       sigma_prior=0.005, seed=9)
        assert np.array_equal(few.values, many.values[:10])

    def test_seed_changes_paths(self):
        a = generate_brownian_paths(10, 1.0, 10, 0.005, seed=1)
        b = generate_brownian_paths(10, 1.0, 10, 0.005, seed=2)
        assert not np.array_equal(a.values, b.values)

    def test_path_normals_reproducible(self):
        a = path_normals(7, 3, (5,))
        b = path_normals(7, 3, (5,))
        assert np.array_equal(a, b)

    def test_argument_validation(self):
        with pytest.raises(ValueError):
            generate_brownian_paths(1, 1.0, 10, 0.005, 0)
        with pytest.raises(ValueError):
            generate_brownian_paths(10, -1.0, 10, 0.005, 0)
        with pytest.raises(ValueError):
            generate_brownian_paths(10, 1.0, 10, 0.0, 0)


class TestTimeLookup:
    def test_terminal_on_grid(self, paths):
        assert np.array_equal(paths.terminal(5.0), paths.values[:, -1])
        assert np.array_equal(paths.terminal(0.1), paths.values[:, 1])

    def test_time_index_snaps_to_nearest_node(self, paths):
        assert paths.time_index(2.0) == 20
        assert paths.time_index(2.04) == 20
        assert paths.time_index(2.06) == 21

    def test_time_errors(self, paths):
        with pytest.raises(CurveError):
            paths.time_index(5.2)  # beyond horizon
        with pytest.raises(ValueError):
            paths.time_index(-0.1)


class TestPathIO:
    def test_round_trip_is_bit_exact(self, paths, tmp_path):
        f = tmp_path / "paths.bin"
        save_paths(paths, f)
        loaded = load_paths(f)
        assert np.array_equal(loaded.values, paths.values)
        assert loaded.identity() == paths.identity()

    def test_identity_fields(self, paths):
        ident = paths.identity()
        assert ident == {"kind": "brownian", "nu": 400, "steps": 50,
                         "seed": 42, "horizon": 5.0, "sigma_prior": 0.006}

    def test_rejects_corrupt_header(self, tmp_path):
        f = tmp_path / "junk.bin"
        f.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(DataFormatError):
            load_paths(f)

    def test_rejects_truncation(self, paths, tmp_path):
        f = tmp_path / "paths.bin"
        save_paths(paths, f)
        data = f.read_bytes()
        f.write_bytes(data[:len(data) - 16])
        with pytest.raises(DataFormatError):
            load_paths(f)


class TestWeightIO:
    def test_round_trip(self, paths, tmp_path):
        w = WeightVector.uniform(paths.nu)
        f = tmp_path / "w.bin"
        save_weights(w, paths.identity(), f)
        loaded, ident = load_weights(f)
        assert np.array_equal(loaded, w.p)
        assert weights_match_paths(ident, paths)

    def test_mismatch_detected(self, paths, tmp_path):
        w = WeightVector.uniform(paths.nu)
        f = tmp_path / "w.bin"
        save_weights(w, paths.identity(), f)
        _, ident = load_weights(f)
        other = generate_brownian_paths(400, 5.0, 50, 0.006, seed=43)
        assert not weights_match_paths(ident, other)

    def test_weight_file_is_not_a_path_file(self, paths, tmp_path):
        f = tmp_path / "w.bin"
        save_weights(WeightVector.uniform(paths.nu), paths.identity(), f)
        with pytest.raises(DataFormatError):
            load_paths(f)
        g = tmp_path / "p.bin"
        save_paths(paths, g)
        with pytest.raises(DataFormatError):
            load_weights(g)


class TestWeightVector:
    def test_uniform(self):
        w = WeightVector.uniform(4)
        assert np.array_equal(w.p, np.full(4, 0.25))

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            WeightVector(np.array([0.5, 0.6]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            WeightVector(np.array([1.5, -0.5]))

    def test_accepts_within_tolerance(self):
        w = WeightVector(np.array([0.5 + 1e-12, 0.5]))
        assert w.p.sum() == pytest.approx(1.0, abs=1e-9)
