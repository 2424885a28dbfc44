"""Command-line interface: one subcommand per pipeline capability.

Exit codes: 0 on success, 2 for configuration or input-format problems
(argparse uses the same code), 3 for numerical failures such as solvers or
training runs that could not finish.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .bachelier import bachelier_price, implied_normal_vol
from .errors import (CheckpointError, ConfigError, CurveError,
                     DataFormatError, GridError, MissingArtifactError,
                     PathBindingError, VolwmcError)
from .exotics import barrier_sweep
from .market import (DEFAULT_GRID, MarketHistory, load_history, save_history,
                     sliding_window_std, synthetic_history)
from .paths import (generate_brownian_paths, load_paths, load_weights,
                    save_paths, save_weights, weights_match_paths)
from .pipeline import MANIFEST_NAME, run_pipeline
from .reports import emit_report
from .sabr import SabrParams, fit_sabr_smile, simulate_sabr_paths
from .vae import (VaeConfig, VaeModel, calibrate_latent, latent_sweep,
                  sample_synthetic_surfaces, surface_observations, train_vae)
from .weight_decoder import (WeightDecoderConfig, WeightDecoderNet,
                             build_training_targets,
                             reconstruct_surface_via_wmc,
                             train_weight_decoder)
from .wmc import (PayoffColumn, PayoffMatrix, martingale_loss,
                  martingale_windows, solve_lagrange_dual)

_USAGE_ERRORS = (ConfigError, DataFormatError, CheckpointError,
                 MissingArtifactError, GridError, CurveError,
                 PathBindingError, ValueError)


def _read_csv(path, required_fields):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            missing = [f for f in required_fields if f not in fields]
            if missing:
                raise DataFormatError(
                    f"{path}: missing columns {', '.join(missing)}")
            return list(reader)
    except FileNotFoundError:
        raise DataFormatError(f"file not found: {path}") from None


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _parse_z(text):
    try:
        return np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise ValueError(f"latent point {text!r} is not a comma-separated "
                         "list of numbers") from None


# -- data -----------------------------------------------------------------------


def _cmd_data_synth(args):
    history = synthetic_history(args.days, seed=args.seed)
    save_history(history, args.out)
    print(f"wrote {len(history)} days to {args.out}")


def _cmd_data_stats(args):
    history = load_history(args.infile)
    stds = sliding_window_std(history, window=args.window)
    rows = [(str(s.date), "" if np.isnan(v) else repr(float(v)))
            for s, v in zip(history, stds)]
    _write_csv(args.out, ["date", "window_std"], rows)
    print(f"wrote {len(rows)} rows to {args.out}")


# -- pricing --------------------------------------------------------------------


def _cmd_price_vanilla(args):
    price = bachelier_price(args.s0, args.k, args.sigma, args.t,
                            flavor=args.flavor, annuity=args.annuity)
    print(repr(float(price)))


def _cmd_price_implied_vol(args):
    vol = implied_normal_vol(args.price, args.s0, args.k, args.t,
                             flavor=args.flavor, annuity=args.annuity)
    print(repr(float(vol)))


# -- vae ------------------------------------------------------------------------


def _cmd_vae_train(args):
    history = load_history(args.data)
    if args.val_days > 0:
        if args.val_days >= len(history):
            raise ConfigError("--val-days must leave at least one training day")
        train = MarketHistory([history[i] for i in range(len(history) - args.val_days)])
        validation = MarketHistory([history[i] for i in
                                    range(len(history) - args.val_days, len(history))])
    else:
        train, validation = history, None
    config = VaeConfig(latent_dim=args.latent_dim, beta=args.beta,
                       learning_rate=args.lr, batch_size=args.batch_size,
                       epochs=args.epochs, seed=args.seed,
                       restarts=args.restarts)
    model, report = train_vae(train, validation, config)
    model.save(args.out)
    print(f"best validation mse {report.best_val_mse:.6e} "
          f"(epoch {report.best_epoch}); saved to {args.out}")


def _cmd_vae_calibrate(args):
    model = VaeModel.load(args.ckpt)
    rows = _read_csv(args.obs, ["strike_offset", "expiry_years", "normal_vol"])
    obs = [(float(r["strike_offset"]), float(r["expiry_years"]),
            float(r["normal_vol"])) for r in rows]
    result = calibrate_latent(model, obs)
    print("z = " + ", ".join(repr(float(v)) for v in result.z))
    print(f"mrae {result.mrae:.6e}, residual norm {result.residual_norm:.6e}, "
          f"converged {result.converged}")
    if args.out:
        doc = {"z": [float(v) for v in result.z], "mrae": result.mrae,
               "residual_norm": result.residual_norm,
               "n_evaluations": result.n_evaluations,
               "converged": result.converged}
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")


def _cmd_vae_sweep(args):
    model = VaeModel.load(args.ckpt)
    sweep = latent_sweep(model, args.dim)
    ks, ts = model.grid.nodes()
    rows = []
    for value, vols, diff in zip(sweep.values, sweep.vols, sweep.differences):
        for dk, t, vol, d in zip(ks, ts, vols.ravel(), diff.ravel()):
            rows.append((args.dim, repr(float(value)), repr(float(dk)),
                         repr(float(t)), repr(float(vol)), repr(float(d))))
    _write_csv(args.out, ["dim", "value", "dK", "T", "vol", "diff_vs_origin"], rows)
    print(f"wrote {len(rows)} rows to {args.out}")


def _cmd_vae_synth(args):
    model = VaeModel.load(args.ckpt)
    synth = sample_synthetic_surfaces(model, n=args.n, variance=args.variance,
                                      seed=args.seed)
    doc = {"latents": [[float(v) for v in z] for z in synth.latents],
           "vols": [[float(v) for v in s.flat()] for s in synth.surfaces],
           "n_discarded": synth.n_discarded}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"kept {len(synth)} of {args.n} draws ({synth.n_discarded} discarded)")


# -- wmc ------------------------------------------------------------------------


def _cmd_wmc_paths(args):
    paths = generate_brownian_paths(args.nu, args.horizon, args.steps,
                                    args.sigma_prior, args.seed)
    save_paths(paths, args.out)
    print(f"wrote {paths.nu} x {paths.n_steps} paths to {args.out}")


def _cmd_wmc_solve(args):
    paths = load_paths(args.paths)
    rows = _read_csv(args.targets, ["flavor", "strike_offset", "expiry_years",
                                    "price"])
    blocks, cols, targets = [], [], []
    for row in rows:
        flavor = row["flavor"].strip()
        if flavor not in ("call", "put"):
            raise DataFormatError(f"unknown flavor {flavor!r} in {args.targets}")
        dk, t = float(row["strike_offset"]), float(row["expiry_years"])
        sign = 1.0 if flavor == "call" else -1.0
        blocks.append(np.maximum(sign * (paths.terminal(t) - dk), 0.0))
        cols.append(PayoffColumn(kind=flavor, strike_offset=dk, expiry=t))
        targets.append(float(row["price"]))
    payoffs = PayoffMatrix(np.column_stack(blocks), tuple(cols))
    solution = solve_lagrange_dual(payoffs, np.asarray(targets), tol=args.tol)
    save_weights(solution.weights, paths.identity(), args.out)
    print(f"max residual {solution.max_residual:.3e} after "
          f"{solution.iterations} iterations (converged {solution.converged}); "
          f"weights saved to {args.out}")


def _cmd_wmc_mart_loss(args):
    paths = load_paths(args.paths)
    weights, identity = load_weights(args.weights)
    if not weights_match_paths(identity, paths):
        raise PathBindingError("weights were computed on a different path set")
    windows = martingale_windows(DEFAULT_GRID.expiries)
    result = martingale_loss(paths, weights, windows)
    rows = [(w.t1, w.t2, repr(w.center),
             "" if np.isnan(r) else repr(float(r)), repr(float(tw)))
            for w, r, tw in zip(windows, result.residuals,
                                result.window_weights)]
    _write_csv(args.out, ["t1", "t2", "center", "residual", "window_weight"],
               rows)
    print(f"relative martingale loss {result.mean_relative_loss:.6f} "
          f"({result.skipped} of {len(windows)} windows skipped)")


# -- weight decoder ---------------------------------------------------------------


def _cmd_wd_train(args):
    model = VaeModel.load(args.vae)
    paths = load_paths(args.paths)
    history = load_history(args.data)
    latents = []
    for surface in history:
        mu, _ = model.encode(surface)
        latents.append(calibrate_latent(model, surface_observations(surface),
                                        init=mu).z)
    targets = build_training_targets(model, np.asarray(latents))
    config = WeightDecoderConfig(gamma=args.gamma, learning_rate=args.lr,
                                 batch_size=args.batch_size, epochs=args.epochs,
                                 parity_mode=args.parity_mode,
                                 parity_weight=args.parity_weight,
                                 seed=args.seed)
    net, report = train_weight_decoder(paths, None, targets, config)
    net.save(args.out)
    print(f"best price mse {report.best_val_mse:.6e} "
          f"(epoch {report.best_epoch}); saved to {args.out}")


def _cmd_wd_price(args):
    net = WeightDecoderNet.load(args.ckpt)
    paths = load_paths(args.paths)
    z = _parse_z(args.z)
    recon = reconstruct_surface_via_wmc(net, paths, z, DEFAULT_GRID)
    ks, ts = DEFAULT_GRID.nodes()
    rows = []
    for dk, t, price, vol, flagged in zip(ks, ts, recon.calls.ravel(),
                                          recon.vols.ravel(),
                                          recon.flagged.ravel()):
        rows.append((repr(float(dk)), repr(float(t)), repr(float(price)),
                     "" if flagged else repr(float(vol))))
    _write_csv(args.out, ["strike_offset", "expiry_years", "call_price",
                          "normal_vol"], rows)
    print(f"wrote {len(rows)} rows to {args.out}")


# -- sabr -----------------------------------------------------------------------


def _cmd_sabr_fit(args):
    rows = _read_csv(args.smile, ["strike_offset", "normal_vol"])
    dks = np.array([float(r["strike_offset"]) for r in rows])
    vols = np.array([float(r["normal_vol"]) for r in rows])
    fit = fit_sabr_smile(dks, vols, args.t)
    print(f"alpha {fit.params.alpha!r}")
    print(f"rho {fit.params.rho!r}")
    print(f"volvol {fit.params.volvol!r}")
    print(f"rmse {fit.rmse:.6e}, max abs residual {fit.max_abs_residual:.6e}")
    if args.out:
        doc = {"alpha": fit.params.alpha, "rho": fit.params.rho,
               "volvol": fit.params.volvol, "rmse": fit.rmse,
               "max_abs_residual": fit.max_abs_residual, "t": args.t}
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")


def _cmd_sabr_simulate(args):
    params = SabrParams(alpha=args.alpha, rho=args.rho, volvol=args.nu)
    paths = simulate_sabr_paths(params, args.n_paths, args.horizon,
                                args.steps, args.seed)
    save_paths(paths, args.out)
    print(f"wrote {paths.nu} x {paths.n_steps} paths to {args.out}")


# -- exotics --------------------------------------------------------------------


def _cmd_exotic_barrier_sweep(args):
    paths = load_paths(args.paths)
    weights, identity = load_weights(args.weights)
    if not weights_match_paths(identity, paths):
        raise PathBindingError("weights were computed on a different path set")
    n_levels = int(round((args.b_to - args.b_from) / args.b_step)) + 1
    barriers = np.linspace(args.b_from, args.b_to, n_levels)
    curve = barrier_sweep(paths, weights, k=args.k, barriers=barriers, t=args.t)
    rows = [(repr(float(b)), repr(float(p)), repr(float(se)))
            for b, p, se in zip(curve.barriers, curve.prices,
                                curve.standard_errors)]
    _write_csv(args.out, ["barrier", "price", "standard_error"], rows)
    print(f"wrote {len(rows)} barrier levels to {args.out}")


# -- pipeline -------------------------------------------------------------------


def _cmd_run(args):
    run = run_pipeline(args.config, args.out, resume=args.resume)
    print(f"pipeline finished; manifest at {run / MANIFEST_NAME}")


def _cmd_report(args):
    target = emit_report(args.run, args.which, out=args.out)
    print(f"wrote {target}")


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volwmc",
        description="Latent-factor vol surfaces with weighted Monte Carlo pricing")
    sub = parser.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="synthetic market history").add_subparsers(
        dest="subcommand", required=True)
    p = data.add_parser("synth", help="generate a synthetic history CSV")
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_data_synth)
    p = data.add_parser("stats", help="sliding-window surface dispersion")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_data_stats)

    price = sub.add_parser("price", help="normal-model pricing").add_subparsers(
        dest="subcommand", required=True)
    p = price.add_parser("vanilla", help="price a payer/receiver swaption")
    p.add_argument("--s0", type=float, required=True)
    p.add_argument("--k", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--flavor", default="payer")
    p.add_argument("--annuity", type=float, default=1.0)
    p.set_defaults(handler=_cmd_price_vanilla)
    p = price.add_parser("implied-vol", help="invert a price to a normal vol")
    p.add_argument("--price", type=float, required=True)
    p.add_argument("--s0", type=float, required=True)
    p.add_argument("--k", type=float, required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--flavor", default="payer")
    p.add_argument("--annuity", type=float, default=1.0)
    p.set_defaults(handler=_cmd_price_implied_vol)

    vae = sub.add_parser("vae", help="surface compression").add_subparsers(
        dest="subcommand", required=True)
    p = vae.add_parser("train", help="train a surface autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--latent-dim", type=int, default=3)
    p.add_argument("--beta", type=float, default=5e-5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-days", type=int, default=0,
                   help="hold out the last N days for validation")
    p.set_defaults(handler=_cmd_vae_train)
    p = vae.add_parser("calibrate", help="fit a latent point to observed vols")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--obs", required=True,
                   help="CSV with strike_offset,expiry_years,normal_vol")
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_vae_calibrate)
    p = vae.add_parser("sweep", help="decode surfaces along one latent axis")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_vae_sweep)
    p = vae.add_parser("synth", help="sample synthetic surfaces from the prior")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--variance", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_vae_synth)

    wmc = sub.add_parser("wmc", help="weighted Monte Carlo").add_subparsers(
        dest="subcommand", required=True)
    p = wmc.add_parser("paths", help="generate prior Brownian paths")
    p.add_argument("--nu", type=int, default=4000)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--horizon", type=float, default=5.0)
    p.add_argument("--sigma-prior", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_wmc_paths)
    p = wmc.add_parser("solve", help="entropy-dual calibration to price targets")
    p.add_argument("--paths", required=True)
    p.add_argument("--targets", required=True,
                   help="CSV with flavor,strike_offset,expiry_years,price")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_wmc_solve)
    p = wmc.add_parser("mart-loss", help="windowed martingale diagnostics")
    p.add_argument("--paths", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_wmc_mart_loss)

    wd = sub.add_parser("wd", help="weight decoder").add_subparsers(
        dest="subcommand", required=True)
    p = wd.add_parser("train", help="train latent-to-weights decoder")
    p.add_argument("--vae", required=True)
    p.add_argument("--paths", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float, default=1e-8)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--parity-mode", default="parity-constrained",
                   choices=("parity-constrained", "dual-payoff"))
    p.add_argument("--parity-weight", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_wd_train)
    p = wd.add_parser("price", help="price the vanilla grid at a latent point")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--paths", required=True)
    p.add_argument("--z", required=True, help="comma-separated latent point")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_wd_price)

    sabr = sub.add_parser("sabr", help="normal SABR benchmark").add_subparsers(
        dest="subcommand", required=True)
    p = sabr.add_parser("fit", help="calibrate one smile")
    p.add_argument("--smile", required=True,
                   help="CSV with strike_offset,normal_vol")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_sabr_fit)
    p = sabr.add_parser("simulate", help="simulate SABR paths")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--nu", type=float, required=True, help="vol of vol")
    p.add_argument("--n-paths", type=int, default=4000)
    p.add_argument("--horizon", type=float, default=5.0)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_sabr_simulate)

    exotic = sub.add_parser("exotic", help="path-dependent pricing").add_subparsers(
        dest="subcommand", required=True)
    p = exotic.add_parser("barrier-sweep", help="up-and-out call price vs barrier")
    p.add_argument("--paths", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--k", type=float, default=0.0)
    p.add_argument("--b-from", type=float, default=0.01)
    p.add_argument("--b-to", type=float, default=0.1)
    p.add_argument("--b-step", type=float, default=0.005)
    p.add_argument("--t", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_exotic_barrier_sweep)

    p = sub.add_parser("run", help="run the full pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true",
                   help="reuse stage artifacts already in the run directory")
    p.set_defaults(handler=_cmd_run)

    p = sub.add_parser("report", help="emit figure data from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--which", required=True, help="figure tag, e.g. fig14")
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.handler(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VolwmcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
