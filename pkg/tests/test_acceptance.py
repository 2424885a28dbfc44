"""Acceptance suite: one test per shipped guarantee, in dependency order.

The module-scoped fixtures build a single realistic working set shared by
the heavier tests: a 1000-day synthetic history, a trained 3-d surface
compressor, per-date latent calibrations, a 4000-path prior measure and a
trained weight decoder.  Budget a few minutes of wall time for the full
module; every test prints the numbers it measured under ``pytest -s``.
"""

import numpy as np
import pytest

from volwmc import (FinetuneConfig, NoSolutionError, SabrParams, SurfaceGrid,
                    VaeConfig, VaeModel, WeightDecoderConfig,
                    WeightDecoderNet, WeightVector, barrier_call_price,
                    barrier_sweep, build_training_targets, calibrate_latent,
                    chronological_split, finetune_encoder, fit_sabr_smile,
                    generate_brownian_paths, martingale_constraint_columns,
                    martingale_loss, martingale_noise_floor,
                    martingale_windows, mrae_arrays, reconstruct_direct,
                    reconstruct_surface_via_wmc, run_pipeline,
                    sabr_normal_vol, sample_synthetic_surfaces,
                    simulate_sabr_paths, solve_lagrange_dual,
                    surface_observations, synthetic_history, train_vae,
                    train_weight_decoder, vanilla_payoffs,
                    weights_from_lagrange)
from volwmc.bachelier import bachelier_price, implied_normal_vol
from volwmc.nn import DenseNet, gradient_check
from volwmc.vae import Scaling, VaeBatch, validation_mse
from volwmc.weight_decoder import WdBatch

# -- shared working set ---------------------------------------------------------


@pytest.fixture(scope="module")
def split():
    history = synthetic_history(1000, seed=11)
    return chronological_split(history, 0.7, n_validation=60, seed=0)


@pytest.fixture(scope="module")
def grid(split):
    return split[0].grid


@pytest.fixture(scope="module")
def vae(split):
    train, val, _ = split
    model, report = train_vae(train, val,
                              VaeConfig(latent_dim=3, epochs=1200,
                                        patience=150, restarts=2, seed=0))
    assert np.isfinite(report.best_val_mse)
    return model


@pytest.fixture(scope="module")
def synthetic(vae):
    return sample_synthetic_surfaces(vae, n=2000, variance=4.0, seed=1)


@pytest.fixture(scope="module")
def tuned(vae, synthetic):
    model, _ = finetune_encoder(vae, synthetic,
                                FinetuneConfig(epochs=300, seed=2))
    return model


@pytest.fixture(scope="module")
def sigma_prior(split):
    return float(np.mean([s.atm_vol(2.0) for s in split[0]]))


@pytest.fixture(scope="module")
def paths(sigma_prior):
    return generate_brownian_paths(nu=4000, horizon=5.0, steps=500,
                                   sigma_prior=sigma_prior, seed=2024)


@pytest.fixture(scope="module")
def payoffs(paths, grid):
    return vanilla_payoffs(paths, grid)


@pytest.fixture(scope="module")
def calibrated(tuned, split):
    """Per-date latent fits for the validation and test blocks."""

    def block(surfaces):
        zs, mraes = [], []
        for s in surfaces:
            mu, _ = tuned.encode(s)
            fit = calibrate_latent(tuned, surface_observations(s), init=mu)
            zs.append(fit.z)
            mraes.append(fit.mrae)
        return np.array(zs), np.array(mraes)

    _, val, test = split
    z_val, _ = block(val)
    z_test, mrae_test = block(test)
    return {"z_val": z_val, "z_test": z_test, "mrae_test": mrae_test}


@pytest.fixture(scope="module")
def wd_targets(tuned, synthetic, calibrated):
    return (build_training_targets(tuned, synthetic.latents),
            build_training_targets(tuned, calibrated["z_val"]))


@pytest.fixture(scope="module")
def wd(paths, wd_targets, payoffs):
    targets, val_targets = wd_targets
    return train_weight_decoder(paths, None, targets,
                                WeightDecoderConfig(epochs=800, patience=120,
                                                    seed=3),
                                validation=val_targets, payoffs=payoffs)


# -- 1: analytic gradients ------------------------------------------------------


def test_gradients_match_finite_differences_on_every_head(split, grid):
    train = split[0]
    scaling = Scaling.from_history(train)
    small_grid = SurfaceGrid((-0.002, 0.0, 0.002), (1.0, 2.0))
    ks, ts = small_grid.nodes()
    worst = {"mse": 0.0, "vae": 0.0, "weight_decoder": 0.0}
    for seed in range(10):
        rng = np.random.default_rng(seed)

        net = DenseNet.create([3, 6, 2], ["elu", "linear"], seed=seed)
        x = rng.normal(size=(4, 3))
        y = rng.normal(size=(4, 2))
        worst["mse"] = max(worst["mse"],
                           gradient_check("mse", net, (x, y), h=1e-6))

        model = VaeModel.create(scaling, grid, latent_dim=2, beta=5e-5,
                                hidden=(5,), seed=seed)
        batch = VaeBatch(vols_scaled=rng.normal(size=(4, grid.size)),
                         features=scaling.node_features(grid),
                         noise=rng.normal(size=(4, 2)))
        worst["vae"] = max(worst["vae"],
                           gradient_check("vae", model, batch, h=1e-6))

        tiny = generate_brownian_paths(nu=30, horizon=2.0, steps=10,
                                       sigma_prior=0.006, seed=seed)
        wnet = WeightDecoderNet.create(tiny, latent_dim=2, hidden=(4, 6),
                                       seed=seed)
        theta = wnet.params_flat()
        # move off the zero-initialized uniform-softmax stationary point
        wnet.set_params_flat(theta + rng.normal(scale=0.05, size=theta.shape))
        g = vanilla_payoffs(tiny, small_grid)
        sig = 0.006 * (1.0 + 0.1 * rng.random((3, 1)))
        calls = bachelier_price(0.0, ks[None, :], sig, ts[None, :],
                                flavor="payer")
        wbatch_args = dict(z=rng.normal(size=(3, 2)), target_calls=calls,
                           target_puts=ks[None, :] + calls,
                           mask=np.ones_like(calls, dtype=bool),
                           g_call=g.select("call").values,
                           g_put=g.select("put").values, dks=ks, gamma=1e-8)
        for mode in ("parity-constrained", "dual-payoff"):
            err = gradient_check("weight_decoder", wnet,
                                 WdBatch(parity_mode=mode, **wbatch_args),
                                 h=1e-6)
            worst["weight_decoder"] = max(worst["weight_decoder"], err)

    print(f"\nworst gradient errors: " +
          ", ".join(f"{k}={v:.2e}" for k, v in worst.items()))
    assert max(worst.values()) < 1e-4


# -- 2: price/vol round trip ----------------------------------------------------


def test_implied_vol_round_trip_over_quoting_grid():
    sigmas = np.linspace(1e-4, 0.03, 10)
    offsets = np.linspace(-0.005, 0.005, 10)
    expiries = np.linspace(0.75, 5.0, 10)
    worst = 0.0
    dead = []
    for sigma in sigmas:
        for dk in offsets:
            for t in expiries:
                # quote the out-of-the-money side, as a desk would
                flavor = "receiver" if dk < 0.0 else "payer"
                price = bachelier_price(0.0, dk, sigma, t, flavor=flavor)
                if price == 0.0:
                    dead.append((sigma, dk, t))
                    with pytest.raises(NoSolutionError):
                        implied_normal_vol(price, 0.0, dk, t, flavor=flavor)
                    continue
                got = implied_normal_vol(price, 0.0, dk, t, flavor=flavor)
                worst = max(worst, abs(got - sigma))

    print(f"\nround-trip worst abs error {worst:.3e}, "
          f"{len(dead)} unquotable nodes")
    assert worst < 1e-10
    # the only unquotable nodes sit at the lowest vol with wide wings and
    # short expiry, where the out-of-the-money price itself is a float zero
    assert len(dead) == 8
    assert all(sigma == sigmas[0] for sigma, _, _ in dead)
    assert all(abs(dk) > 0.0035 for _, dk, _ in dead)


# -- 3: latent dimension study --------------------------------------------------


def test_latent_dimension_study_orders_reconstruction_gains(split, grid):
    train, val, _ = split
    wins = 0
    for seed in (0, 1, 2):
        mse = {}
        for dim in (2, 3, 4):
            model, _ = train_vae(train, val,
                                 VaeConfig(latent_dim=dim, epochs=700,
                                           patience=150, restarts=3,
                                           seed=seed))
            scaled = model.scaling.scale_vols(train.vol_matrix())
            feats = model.scaling.node_features(grid)
            mse[dim] = validation_mse(model, scaled, feats)
        ordered = (mse[2] > mse[3]
                   and (mse[2] - mse[3]) > (mse[3] - mse[4]))
        wins += ordered
        print(f"\nseed {seed}: " +
              " ".join(f"mse[{d}]={mse[d]:.3e}" for d in (2, 3, 4)) +
              f" ordered={ordered}")
    assert wins >= 2


# -- 4: direct reconstruction quality --------------------------------------------


def test_direct_reconstruction_error_within_bounds(vae, split):
    train, _, test = split

    def mean_mrae(block):
        return float(np.mean([mrae_arrays(s.vols, reconstruct_direct(vae, s))
                              for s in block]))

    train_err = mean_mrae(train)
    test_err = mean_mrae(test)
    print(f"\ndirect reconstruction MRAE: train {train_err:.4f}, "
          f"test {test_err:.4f}")
    assert train_err <= 0.02
    assert test_err <= 0.04


# -- 5: entropy-dual solver -------------------------------------------------------


def test_dual_solver_reaches_exact_gibbs_weights(paths, payoffs, sigma_prior,
                                                 grid):
    ks, ts = grid.nodes()
    targets = bachelier_price(0.0, ks, sigma_prior * 1.1, ts, flavor="payer")
    gcall = payoffs.select("call")
    sol = solve_lagrange_dual(gcall, targets)
    gibbs_gap = float(np.max(np.abs(sol.weights.p
                                    - weights_from_lagrange(gcall, sol.lam).p)))
    print(f"\ndual solve: max residual {sol.max_residual:.2e} in "
          f"{sol.iterations} iterations, weights vs Gibbs {gibbs_gap:.2e}")
    assert sol.converged
    assert sol.max_residual <= 1e-8
    assert gibbs_gap <= 1e-12


# -- 6: weight-decoder fidelity ----------------------------------------------------


def test_weight_decoder_tracks_calibration_quality(wd, paths, payoffs,
                                                   calibrated, split, grid):
    net, _ = wd
    _, _, test = split
    errs = np.array([
        reconstruct_surface_via_wmc(net, paths, z, grid,
                                    payoffs=payoffs).mrae_vs(s)
        for s, z in zip(test, calibrated["z_test"])
    ])
    assert not np.isnan(errs).any()
    ratio = float(errs.mean() / calibrated["mrae_test"].mean())
    print(f"\nweight-decoder MRAE {errs.mean():.4f} vs calibration "
          f"{calibrated['mrae_test'].mean():.4f} (ratio {ratio:.3f})")
    assert ratio <= 1.5


# -- 7: put-call parity handling ---------------------------------------------------


def test_parity_exact_when_constrained_and_damped_by_penalty(wd, paths,
                                                             wd_targets,
                                                             payoffs, grid):
    _, report = wd
    assert report.parity_max == 0.0

    targets, val_targets = wd_targets
    ks, _ = grid.nodes()
    g_call = payoffs.select("call").values
    g_put = payoffs.select("put").values

    def parity_after_training(weight):
        cfg = WeightDecoderConfig(parity_mode="dual-payoff",
                                  parity_weight=weight, epochs=200, seed=3)
        net, rep = train_weight_decoder(paths, None, targets, cfg,
                                        validation=val_targets,
                                        payoffs=payoffs)
        p = net.decode_weights_batch(targets.latents)
        resid = p @ g_call + ks[None, :] - p @ g_put
        return float(np.max(np.abs(resid))), rep

    low, rep_low = parity_after_training(1.0)
    high, _ = parity_after_training(10.0)
    print(f"\ndual-payoff parity residual: weight 1 -> {low:.3e}, "
          f"weight 10 -> {high:.3e}")
    assert np.isfinite(rep_low.parity_max) and rep_low.parity_max > 0.0
    assert 0.0 < high < low


# -- 8: martingale noise floor vs trained weights ------------------------------------


def test_martingale_loss_floor_and_trained_weights(paths, sigma_prior, wd,
                                                   calibrated, grid):
    windows = martingale_windows(grid.expiries)
    assert len(windows) == 120
    floor = martingale_noise_floor(4000, 5.0, 500, sigma_prior, windows,
                                   n_regens=50, seed=100)
    net, _ = wd
    losses = np.array([
        martingale_loss(paths, net.decode_weights(z),
                        windows).mean_relative_loss
        for z in calibrated["z_test"]
    ])
    print(f"\nnoise floor {floor.mean():.4f}, trained-weight losses "
          f"mean {losses.mean():.4f} max {losses.max():.4f}")
    assert 0.005 <= floor.mean() <= 0.015
    assert float(losses.max()) < 0.10


# -- 9: martingale constraint columns ------------------------------------------------


def test_martingale_columns_pin_window_drift(paths, payoffs, sigma_prior,
                                             grid):
    windows = martingale_windows(grid.expiries)
    ks, ts = grid.nodes()
    targets = bachelier_price(0.0, ks, sigma_prior * 1.1, ts, flavor="payer")
    gcall = payoffs.select("call")
    stacked = gcall.hstack(martingale_constraint_columns(paths, windows))
    sol = solve_lagrange_dual(stacked,
                              np.concatenate([targets,
                                              np.zeros(len(windows))]),
                              max_iter=400)
    resid = np.abs(sol.residuals)
    n_vanilla = len(targets)
    print(f"\nwindow residual max {resid[n_vanilla:].max():.2e}, "
          f"vanilla residual max {resid[:n_vanilla].max():.2e}")
    assert resid[n_vanilla:].max() < 1e-8
    assert resid[:n_vanilla].max() < 1e-6


# -- 10: SABR fit and simulation consistency -----------------------------------------


def test_sabr_fit_recovery_and_mc_agreement(grid):
    true = SabrParams(alpha=0.005, rho=-0.3, volvol=0.4)
    ks = np.array(grid.strike_offsets)
    smile = sabr_normal_vol(true, 0.0, ks, 1.0)
    fit = fit_sabr_smile(ks, smile, 1.0)
    assert abs(fit.params.alpha - true.alpha) / true.alpha < 0.01
    assert abs(fit.params.rho - true.rho) < 0.05
    assert abs(fit.params.volvol - true.volvol) / true.volvol < 0.02

    mc = simulate_sabr_paths(true, nu=200_000, horizon=1.0, steps=50, seed=7)
    term = mc.terminal(1.0)
    mc_vols = np.array([
        implied_normal_vol(float(np.mean(np.maximum(term - dk, 0.0))),
                           0.0, dk, 1.0, flavor="payer")
        for dk in ks
    ])
    rel = np.abs(mc_vols - smile) / smile
    print(f"\nfit residual {fit.max_abs_residual:.2e}, "
          f"MC vs formula max rel {rel.max():.4f}")
    assert rel.max() < 0.01


# -- 11: barrier prices under the two measures ----------------------------------------


def test_barrier_prices_split_between_measures(wd, paths, calibrated, split,
                                               grid):
    net, _ = wd
    _, _, test = split
    # pick the test date with the steepest upward term structure: the
    # short-smile SABR fit must miss its long end the most
    tilt = np.array([s.atm_vol(5.0) / s.atm_vol(1.0) for s in test])
    idx = int(np.argmax(tilt))
    day = test[idx]
    row = list(grid.expiries).index(1.0)
    fit = fit_sabr_smile(grid.strike_offsets, day.vols[row], 1.0)
    atm5 = float(sabr_normal_vol(fit.params, 0.0, 0.0, 5.0))
    gap = abs(atm5 - day.atm_vol(5.0)) / day.atm_vol(5.0)
    assert gap > 0.10, "term structures agree; divergence check is vacuous"

    weights = net.decode_weights(calibrated["z_test"][idx])
    sabr_paths = simulate_sabr_paths(fit.params, nu=20_000, horizon=5.0,
                                     steps=500, seed=7)
    sweep_w = barrier_sweep(paths, weights)
    sweep_s = barrier_sweep(sabr_paths, WeightVector.uniform(sabr_paths.nu))
    for sweep in (sweep_w, sweep_s):
        assert np.all(np.diff(sweep.prices) >= -1e-15)

    top = float(paths.values.max()) + 1e-6
    vanilla = float(weights.p @ np.maximum(paths.terminal(5.0), 0.0))
    capped = barrier_call_price(paths, weights, k=0.0, b=top, t=5.0)
    assert capped == pytest.approx(vanilla, abs=1e-12)

    diff = np.abs(sweep_w.prices - sweep_s.prices)
    combined = np.sqrt(sweep_w.standard_errors ** 2
                       + sweep_s.standard_errors ** 2)
    mid = (sweep_w.barriers >= 0.02) & (sweep_w.barriers <= 0.08)
    n_split = int(np.sum(diff[mid] > 3.0 * combined[mid]))
    print(f"\nterm-structure gap {gap:.3f}; {n_split}/{int(mid.sum())} "
          f"mid-range barriers differ by more than 3 standard errors")
    assert n_split >= 1


# -- 12: pipeline determinism ----------------------------------------------------------


def test_pipeline_manifest_is_bit_deterministic(tmp_path):
    config = {
        "data": {"n_days": 60, "n_validation": 6},
        "vae": {"latent_dim": 2, "epochs": 40, "patience": 40, "restarts": 1,
                "synthetic_samples": 30, "finetune_epochs": 20},
        "wmc": {"nu": 200, "steps": 25, "noise_regens": 3},
        "wd": {"epochs": 15},
        "sabr": {},
        "exotic": {},
        "seeds": {},
    }
    run_pipeline(config, tmp_path / "first")
    run_pipeline(config, tmp_path / "second")
    first = (tmp_path / "first" / "manifest.json").read_bytes()
    second = (tmp_path / "second" / "manifest.json").read_bytes()
    assert first == second
