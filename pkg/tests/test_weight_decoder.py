"""Weight-decoder tests: binding, parity handling, pricing consistency."""

import numpy as np
import pytest

from volwmc import (DEFAULT_GRID, PathBindingError, SurfaceGrid,
                    WeightDecoderConfig, WeightDecoderNet, WeightVector,
                    build_training_targets, generate_brownian_paths,
                    latent_sweep_densities, put_from_call,
                    reconstruct_surface_via_wmc, train_weight_decoder,
                    vanilla_payoffs, weighted_price)
from volwmc.bachelier import bachelier_price
from volwmc.nn import gradient_check
from volwmc.weight_decoder import WdBatch

SMALL_GRID = SurfaceGrid((-0.002, 0.0, 0.002), (1.0, 2.0))


@pytest.fixture(scope="module")
def paths():
    return generate_brownian_paths(nu=300, horizon=2.0, steps=20,
                                   sigma_prior=0.006, seed=12)


@pytest.fixture(scope="module")
def targets(tiny_vae):
    rng = np.random.default_rng(5)
    latents = rng.normal(size=(24, 2))
    return build_training_targets(tiny_vae, latents, grid=SMALL_GRID)


@pytest.fixture(scope="module")
def trained(paths, targets):
    config = WeightDecoderConfig(hidden=(8, 12), epochs=150, patience=150,
                                 seed=0)
    net, report = train_weight_decoder(paths, None, targets, config)
    return net, report


class TestNet:
    def test_fresh_net_decodes_uniform(self, paths):
        net = WeightDecoderNet.create(paths, latent_dim=2, hidden=(8, 12), seed=0)
        w = net.decode_weights(np.array([0.7, -0.3]))
        assert np.allclose(w.p, 1.0 / paths.nu, atol=1e-15)

    def test_weights_are_a_distribution(self, trained, paths):
        net, _ = trained
        for z in (np.zeros(2), np.array([2.0, -2.0]), np.array([-3.5, 3.5])):
            w = net.decode_weights(z)
            assert w.p.shape == (paths.nu,)
            assert w.p.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(w.p >= 0.0)

    def test_batch_decode_matches_single(self, trained):
        net, _ = trained
        zs = np.array([[0.1, 0.2], [-0.5, 0.8]])
        batch = net.decode_weights_batch(zs)
        assert np.allclose(batch[0], net.decode_weights(zs[0]).p, atol=1e-15)
        assert np.allclose(batch[1], net.decode_weights(zs[1]).p, atol=1e-15)

    def test_binding(self, trained, paths):
        net, _ = trained
        net.check_binding(paths)  # same set: fine
        other = generate_brownian_paths(nu=300, horizon=2.0, steps=20,
                                        sigma_prior=0.006, seed=13)
        with pytest.raises(PathBindingError):
            net.check_binding(other)

    def test_save_load_round_trip(self, trained, paths, tmp_path):
        net, _ = trained
        f = tmp_path / "wd.json"
        net.save(f)
        loaded = WeightDecoderNet.load(f)
        loaded.check_binding(paths)
        z = np.array([0.4, -0.9])
        assert np.array_equal(loaded.decode_weights(z).p,
                              net.decode_weights(z).p)


class TestTargets:
    def test_prices_match_decoded_vols(self, tiny_vae, targets):
        ks, ts = SMALL_GRID.nodes()
        vols = tiny_vae.decode_points(targets.latents[3], ks, ts)
        expected = bachelier_price(0.0, ks, vols, ts, flavor="call")
        assert np.allclose(targets.calls[3], expected, atol=1e-12)

    def test_puts_satisfy_parity(self, targets):
        ks, _ = SMALL_GRID.nodes()
        assert np.array_equal(targets.puts,
                              put_from_call(ks[None, :], targets.calls))

    def test_mask_marks_positive_raw_decodes(self, tiny_vae, targets):
        assert targets.mask.shape == targets.calls.shape
        assert targets.mask.dtype == bool
        ks, ts = SMALL_GRID.nodes()
        raw = tiny_vae.decode_points(targets.latents[3], ks, ts, raw=True)
        assert np.array_equal(targets.mask[3], raw > 0.0)

    def test_needs_latents(self, tiny_vae):
        with pytest.raises(ValueError):
            build_training_targets(tiny_vae, [])


class TestObjective:
    @pytest.mark.parametrize("mode", ["parity-constrained", "dual-payoff"])
    def test_gradient_check(self, paths, targets, mode):
        net = WeightDecoderNet.create(paths, latent_dim=2, hidden=(6, 8), seed=1)
        # move off the uniform-softmax point before differentiating
        theta = net.params_flat()
        theta += np.random.default_rng(1).normal(scale=0.05, size=theta.shape)
        net.set_params_flat(theta)
        payoffs = vanilla_payoffs(paths, SMALL_GRID)
        ks, _ = SMALL_GRID.nodes()
        batch = WdBatch(z=targets.latents[:4], target_calls=targets.calls[:4],
                        target_puts=targets.puts[:4], mask=targets.mask[:4],
                        g_call=payoffs.select("call").values,
                        g_put=payoffs.select("put").values,
                        dks=ks, gamma=1e-8, parity_mode=mode)
        assert gradient_check("weight_decoder", net, batch, h=1e-6) < 1e-6

    def test_unknown_parity_mode(self, paths, targets):
        config = WeightDecoderConfig(parity_mode="one-sided")
        with pytest.raises(ValueError):
            train_weight_decoder(paths, None, targets, config)


class TestTraining:
    def test_training_reduces_price_error(self, paths, targets, trained):
        net, report = trained
        fresh = WeightDecoderNet.create(paths, latent_dim=2, hidden=(8, 12),
                                        seed=0)
        payoffs = vanilla_payoffs(paths, SMALL_GRID, flavors=("call",))
        g = payoffs.values

        def price_mse(model):
            w = model.decode_weights_batch(targets.latents)
            prices = w @ g
            return float(np.mean((prices - targets.calls) ** 2))

        assert price_mse(net) < 0.25 * price_mse(fresh)
        assert report.train_loss[-1] < report.train_loss[0]

    def test_parity_constrained_is_exact(self, trained):
        _, report = trained
        assert report.parity_max == 0.0

    def test_dual_payoff_reports_finite_parity(self, paths, targets):
        config = WeightDecoderConfig(hidden=(8, 12), epochs=40, patience=40,
                                     parity_mode="dual-payoff", seed=0)
        _, report = train_weight_decoder(paths, None, targets, config)
        assert np.isfinite(report.parity_max)
        assert report.parity_max > 0.0

    def test_deterministic(self, paths, targets):
        config = WeightDecoderConfig(hidden=(8, 12), epochs=20, patience=20,
                                     seed=4)
        a, _ = train_weight_decoder(paths, None, targets, config)
        b, _ = train_weight_decoder(paths, None, targets, config)
        assert np.array_equal(a.params_flat(), b.params_flat())

    def test_validation_drives_best_retention(self, paths, targets, tiny_vae):
        val = build_training_targets(tiny_vae,
                                     np.random.default_rng(9).normal(size=(6, 2)),
                                     grid=SMALL_GRID)
        config = WeightDecoderConfig(hidden=(8, 12), epochs=30, patience=30,
                                     seed=0)
        _, report = train_weight_decoder(paths, None, targets, config,
                                         validation=val)
        assert len(report.val_price_mse) == report.epochs_run
        assert report.best_val_mse == pytest.approx(min(report.val_price_mse))


class TestReconstruction:
    def test_prices_match_weighted_payoffs(self, trained, paths, targets):
        net, _ = trained
        z = targets.latents[0]
        recon = reconstruct_surface_via_wmc(net, paths, z, SMALL_GRID)
        payoffs = vanilla_payoffs(paths, SMALL_GRID, flavors=("call",))
        expected = weighted_price(payoffs, net.decode_weights(z))
        assert np.allclose(recon.calls.ravel(), expected, atol=1e-15)

    def test_vols_invert_prices(self, trained, paths, targets):
        net, _ = trained
        recon = reconstruct_surface_via_wmc(net, paths, targets.latents[1],
                                            SMALL_GRID)
        ks, ts = SMALL_GRID.nodes()
        ok = ~recon.flagged.ravel()
        assert ok.any()
        repriced = bachelier_price(0.0, ks[ok], recon.vols.ravel()[ok], ts[ok],
                                   flavor="call")
        assert np.allclose(repriced, recon.calls.ravel()[ok], atol=1e-12)
        assert np.all(np.isnan(recon.vols.ravel()[~ok]))

    def test_external_weights_bypass_decoding(self, trained, paths):
        net, _ = trained
        w = WeightVector.uniform(paths.nu)
        recon = reconstruct_surface_via_wmc(net, paths, None, SMALL_GRID,
                                            weights=w)
        payoffs = vanilla_payoffs(paths, SMALL_GRID, flavors=("call",))
        assert np.allclose(recon.calls.ravel(), weighted_price(payoffs, w),
                           atol=1e-15)

    def test_wrong_paths_rejected(self, trained):
        net, _ = trained
        other = generate_brownian_paths(nu=300, horizon=2.0, steps=20,
                                        sigma_prior=0.006, seed=99)
        with pytest.raises(PathBindingError):
            reconstruct_surface_via_wmc(net, other, np.zeros(2), SMALL_GRID)

    def test_mrae_vs_surface(self, trained, paths, targets, tiny_vae):
        net, _ = trained
        z = targets.latents[2]
        recon = reconstruct_surface_via_wmc(net, paths, z, SMALL_GRID)
        from volwmc.market import VolSurface
        ks, ts = SMALL_GRID.nodes()
        ref = VolSurface(None, SMALL_GRID,
                         tiny_vae.decode_points(z, ks, ts).reshape(SMALL_GRID.shape))
        value = recon.mrae_vs(ref)
        assert np.isfinite(value) and value >= 0.0


class TestDensities:
    def test_sweep_histograms(self, trained, paths):
        net, _ = trained
        sweep = latent_sweep_densities(net, paths, dim=0,
                                       values=(-1.0, 0.0, 1.0),
                                       expiries=(1.0, 2.0), bins=15)
        assert sweep.dim == 0
        assert len(sweep.histograms) == 3
        assert len(sweep.histograms[0]) == 2
        hist = sweep.histograms[1][1]
        assert hist.expiry == 2.0
        assert hist.mass.sum() == pytest.approx(1.0, abs=1e-12)
        assert sweep.edges.shape == (16,)
