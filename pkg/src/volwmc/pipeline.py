"""End-to-end orchestration from synthetic history to the barrier comparison.

A run directory holds one artifact per stage plus ``manifest.json``.  The
manifest is a pure function of the config and seeds: a rerun with the same
config reproduces it byte for byte, and ``resume=True`` reuses whatever
stage artifacts already exist.  Per-date work (calibration, reconstruction,
diagnostics) is independent across dates and runs in date order.
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError
from .market import (MarketHistory, VolSurface, chronological_split,
                     load_history, mrae_arrays, save_history,
                     synthetic_history)
from .paths import generate_brownian_paths, load_paths, save_paths
from .sabr import fit_sabr_smile, sabr_normal_vol, simulate_sabr_paths
from .vae import (FinetuneConfig, VaeConfig, VaeModel, calibrate_latent,
                  finetune_encoder, reconstruct_direct,
                  sample_synthetic_surfaces, surface_observations, train_vae)
from .weight_decoder import (WeightDecoderConfig, WeightDecoderNet,
                             build_training_targets,
                             reconstruct_surface_via_wmc,
                             train_weight_decoder)
from .wmc import (WeightVector, martingale_loss, martingale_noise_floor,
                  martingale_windows, vanilla_payoffs)
from .exotics import barrier_sweep

__all__ = [
    "PACKAGE_VERSION",
    "config_hash",
    "default_config",
    "load_config",
    "run_pipeline",
    "validate_config",
]

PACKAGE_VERSION = "0.1.0"

MANIFEST_NAME = "manifest.json"

# Section -> field -> default.  Every section must be present in a config
# document; fields fall back to these defaults and unknown names are errors.
_SCHEMA = {
    "data": {
        "n_days": 1000,
        "train_fraction": 0.7,
        "n_validation": 60,
    },
    "vae": {
        "latent_dim": 3,
        "beta": 5e-5,
        "lr": 1e-3,
        "batch": 32,
        "epochs": 1200,
        "patience": 150,
        "restarts": 2,
        "synthetic_samples": 2000,
        "synthetic_variance": 4.0,
        "finetune_epochs": 300,
    },
    "wmc": {
        "nu": 4000,
        "steps": 500,
        "horizon": 5.0,
        "sigma_prior": "auto",
        "noise_regens": 50,
    },
    "wd": {
        "gamma": 1e-8,
        "lr": 0.01,
        "batch": 32,
        "epochs": 400,
        "parity_mode": "parity-constrained",
        "parity_weight": 1.0,
    },
    "sabr": {
        "fit_expiry": 5.0,
        "date": "auto",
    },
    "exotic": {
        "strike": 0.0,
        "expiry": 5.0,
        "b_from": 0.01,
        "b_to": 0.1,
        "b_step": 0.005,
    },
    "seeds": {
        "data": 11,
        "split": 0,
        "vae": 0,
        "synthetic": 1,
        "finetune": 2,
        "paths": 2024,
        "wd": 3,
        "noise": 100,
        "sabr_paths": 7,
    },
}

_INT_FIELDS = {
    ("data", "n_days"), ("data", "n_validation"),
    ("vae", "latent_dim"), ("vae", "batch"), ("vae", "epochs"),
    ("vae", "patience"), ("vae", "restarts"), ("vae", "synthetic_samples"),
    ("vae", "finetune_epochs"),
    ("wmc", "nu"), ("wmc", "steps"), ("wmc", "noise_regens"),
    ("wd", "batch"), ("wd", "epochs"),
}


def default_config() -> dict:
    return {section: dict(fields) for section, fields in _SCHEMA.items()}


def validate_config(doc) -> dict:
    """Merge a config document onto the schema defaults.

    Missing sections and unknown names are reported by field; values get a
    light type check so mistakes fail before any stage runs.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for section in doc:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section: {section}")
    merged = {}
    for section, defaults in _SCHEMA.items():
        if section not in doc:
            raise ConfigError(f"missing config section: {section}")
        given = doc[section]
        if not isinstance(given, dict):
            raise ConfigError(f"config section {section} must be an object")
        for key in given:
            if key not in defaults:
                raise ConfigError(f"unknown config field: {section}.{key}")
        out = dict(defaults)
        out.update(given)
        for key, value in out.items():
            _check_value(section, key, value)
        merged[section] = out
    if merged["wd"]["parity_mode"] not in ("parity-constrained", "dual-payoff"):
        raise ConfigError("wd.parity_mode must be 'parity-constrained' or 'dual-payoff'")
    if merged["exotic"]["b_step"] <= 0:
        raise ConfigError("exotic.b_step must be positive")
    if merged["exotic"]["b_to"] < merged["exotic"]["b_from"]:
        raise ConfigError("exotic.b_to must not be below exotic.b_from")
    return merged


def _check_value(section, key, value):
    name = f"{section}.{key}"
    if (section, key) == ("wmc", "sigma_prior"):
        if value != "auto" and not (isinstance(value, (int, float)) and value > 0):
            raise ConfigError(f"{name} must be 'auto' or a positive number")
        return
    if (section, key) == ("sabr", "date"):
        if value != "auto" and not isinstance(value, (int, str)):
            raise ConfigError(f"{name} must be 'auto', a date index, or an ISO date")
        return
    if key == "parity_mode":
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number")
    if (section, key) in _INT_FIELDS and not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer")


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(doc)


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# -- json plumbing -----------------------------------------------------------


def _jsonable(value):
    """Recursively convert to plain JSON types; non-finite floats become None."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(doc), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _report_doc(report) -> dict:
    doc = dict(vars(report))
    return doc


# -- stages -------------------------------------------------------------------


def _stage_data(cfg, run, resume):
    target = run / "history.csv"
    if resume and target.exists():
        return load_history(target)
    history = synthetic_history(cfg["data"]["n_days"], seed=cfg["seeds"]["data"])
    save_history(history, target)
    return history


def _stage_vae(cfg, run, resume, train, validation):
    model_path, report_path = run / "vae.json", run / "vae_report.json"
    if resume and model_path.exists() and report_path.exists():
        return VaeModel.load(model_path), _read_json(report_path)
    vc = cfg["vae"]
    config = VaeConfig(latent_dim=vc["latent_dim"], beta=vc["beta"],
                       learning_rate=vc["lr"], batch_size=vc["batch"],
                       epochs=vc["epochs"], patience=vc["patience"],
                       restarts=vc["restarts"], seed=cfg["seeds"]["vae"])
    model, report = train_vae(train, validation, config)
    model.save(model_path)
    doc = _report_doc(report)
    _write_json(report_path, doc)
    return model, _read_json(report_path)


def _stage_synthetic(cfg, run, resume, model):
    target = run / "synthetic.json"
    if resume and target.exists():
        return _read_json(target)
    vc = cfg["vae"]
    synth = sample_synthetic_surfaces(model, n=vc["synthetic_samples"],
                                      variance=vc["synthetic_variance"],
                                      seed=cfg["seeds"]["synthetic"])
    doc = {"latents": synth.latents,
           "vols": [s.flat() for s in synth.surfaces],
           "n_discarded": synth.n_discarded}
    _write_json(target, doc)
    return _read_json(target)


def _synthetic_pairs(model, synth_doc):
    latents = np.asarray(synth_doc["latents"], dtype=float)
    grid = model.grid
    surfaces = [VolSurface(None, grid, np.asarray(v, dtype=float).reshape(grid.shape))
                for v in synth_doc["vols"]]
    return latents, surfaces


def _stage_finetune(cfg, run, resume, model, synth_doc):
    model_path, report_path = run / "finetuned.json", run / "finetune_report.json"
    if resume and model_path.exists() and report_path.exists():
        return VaeModel.load(model_path), _read_json(report_path)
    latents, surfaces = _synthetic_pairs(model, synth_doc)
    config = FinetuneConfig(epochs=cfg["vae"]["finetune_epochs"],
                            seed=cfg["seeds"]["finetune"])
    tuned, report = finetune_encoder(model, zip(latents, surfaces), config)
    tuned.save(model_path)
    _write_json(report_path, _report_doc(report))
    return tuned, _read_json(report_path)


def _stage_calibrate(cfg, run, resume, model, history, n_train_block):
    target = run / "calibrations.json"
    if resume and target.exists():
        return _read_json(target)
    doc = {"dates": [], "block": [], "z": [], "residual_norm": [], "mrae": [],
           "n_evaluations": [], "converged": []}
    for idx, surface in enumerate(history):
        mu, _ = model.encode(surface)
        result = calibrate_latent(model, surface_observations(surface), init=mu)
        doc["dates"].append(str(surface.date))
        doc["block"].append("train" if idx < n_train_block else "test")
        doc["z"].append(result.z)
        doc["residual_norm"].append(result.residual_norm)
        doc["mrae"].append(result.mrae)
        doc["n_evaluations"].append(result.n_evaluations)
        doc["converged"].append(result.converged)
    _write_json(target, doc)
    return _read_json(target)


def _stage_paths(cfg, run, resume, sigma_prior):
    target = run / "paths.bin"
    if resume and target.exists():
        return load_paths(target)
    wc = cfg["wmc"]
    paths = generate_brownian_paths(wc["nu"], wc["horizon"], wc["steps"],
                                    sigma_prior, cfg["seeds"]["paths"])
    save_paths(paths, target)
    return paths


def _stage_weight_decoder(cfg, run, resume, model, paths, synth_doc, calibrations):
    model_path, report_path = run / "wd.json", run / "wd_report.json"
    if resume and model_path.exists() and report_path.exists():
        return WeightDecoderNet.load(model_path), _read_json(report_path)
    wc = cfg["wd"]
    synth_latents = np.asarray(synth_doc["latents"], dtype=float)
    targets = build_training_targets(model, synth_latents)
    train_z = np.asarray([z for z, block in zip(calibrations["z"], calibrations["block"])
                          if block == "train"], dtype=float)
    validation = build_training_targets(model, train_z) if len(train_z) else None
    config = WeightDecoderConfig(gamma=wc["gamma"], learning_rate=wc["lr"],
                                 batch_size=wc["batch"], epochs=wc["epochs"],
                                 parity_mode=wc["parity_mode"],
                                 parity_weight=wc["parity_weight"],
                                 seed=cfg["seeds"]["wd"])
    net, report = train_weight_decoder(paths, None, targets, config,
                                       validation=validation)
    net.save(model_path)
    _write_json(report_path, _report_doc(report))
    return net, _read_json(report_path)


def _stage_reconstruct(cfg, run, resume, vae_model, tuned_model, net, paths,
                       history, calibrations):
    target = run / "reconstruction.json"
    if resume and target.exists():
        return _read_json(target)
    grid = vae_model.grid
    call_payoffs = vanilla_payoffs(paths, grid, flavors=("call",))
    windows = martingale_windows(grid.expiries)
    doc = {"dates": list(calibrations["dates"]),
           "block": list(calibrations["block"]),
           "mrae_direct": [], "mrae_finetuned": [], "mrae_calibration": [],
           "mrae_weight_decoder": [],
           "martingale": {"dates": [], "relative_loss": []}}
    for idx, surface in enumerate(history):
        doc["mrae_direct"].append(
            mrae_arrays(surface.vols, reconstruct_direct(vae_model, surface)))
        doc["mrae_finetuned"].append(
            mrae_arrays(surface.vols, reconstruct_direct(tuned_model, surface)))
        doc["mrae_calibration"].append(calibrations["mrae"][idx])
        z = np.asarray(calibrations["z"][idx], dtype=float)
        recon = reconstruct_surface_via_wmc(net, paths, z, grid,
                                            payoffs=call_payoffs)
        doc["mrae_weight_decoder"].append(recon.mrae_vs(surface))
        if calibrations["block"][idx] == "test":
            loss = martingale_loss(paths, recon.weights, windows)
            doc["martingale"]["dates"].append(str(surface.date))
            doc["martingale"]["relative_loss"].append(loss.mean_relative_loss)
    wc = cfg["wmc"]
    noise = martingale_noise_floor(paths.nu, paths.horizon, paths.n_steps,
                                   paths.sigma_prior, windows,
                                   n_regens=wc["noise_regens"],
                                   seed=cfg["seeds"]["noise"])
    doc["noise_losses"] = noise
    doc["noise_floor"] = float(noise.mean())
    _write_json(target, doc)
    return _read_json(target)


def _resolve_comparison_date(cfg, history, recon) -> int:
    choice = cfg["sabr"]["date"]
    if choice == "auto":
        best_idx, best = -1, math.inf
        for idx, block in enumerate(recon["block"]):
            mrae = recon["mrae_weight_decoder"][idx]
            if block == "test" and mrae is not None and mrae < best:
                best_idx, best = idx, mrae
        if best_idx < 0:
            raise ConfigError("sabr.date is 'auto' but no test date reconstructed")
        return best_idx
    if isinstance(choice, int):
        if not 0 <= choice < len(history):
            raise ConfigError(f"sabr.date index {choice} outside the history")
        return choice
    for idx in range(len(history)):
        if str(history[idx].date) == choice:
            return idx
    raise ConfigError(f"sabr.date {choice!r} not found in the history")


def _stage_compare(cfg, run, resume, net, paths, history, calibrations, recon):
    target = run / "sabr_compare.json"
    if resume and target.exists():
        return _read_json(target)
    grid = history[0].grid
    idx = _resolve_comparison_date(cfg, history, recon)
    surface = history[idx]
    fit_expiry = float(cfg["sabr"]["fit_expiry"])
    if fit_expiry not in grid.expiries:
        raise ConfigError(f"sabr.fit_expiry {fit_expiry} is not a grid expiry")
    row = grid.expiries.index(fit_expiry)
    dks = np.asarray(grid.strike_offsets)
    smile = surface.vols[row]

    fit = fit_sabr_smile(dks, smile, fit_expiry)
    wc = cfg["wmc"]
    sabr_paths = simulate_sabr_paths(fit.params, wc["nu"], wc["horizon"],
                                     wc["steps"], cfg["seeds"]["sabr_paths"])

    z = np.asarray(calibrations["z"][idx], dtype=float)
    weights = net.decode_weights(z)
    wd_recon = reconstruct_surface_via_wmc(net, paths, z, grid)
    ks, ts = grid.nodes()
    sabr_vols = np.array([sabr_normal_vol(fit.params, 0.0, dk, t)
                          for dk, t in zip(ks, ts)]).reshape(grid.shape)

    ec = cfg["exotic"]
    n_levels = int(round((ec["b_to"] - ec["b_from"]) / ec["b_step"])) + 1
    barriers = np.linspace(ec["b_from"], ec["b_to"], n_levels)
    wmc_curve = barrier_sweep(paths, weights, k=ec["strike"],
                              barriers=barriers, t=ec["expiry"])
    uniform = WeightVector.uniform(sabr_paths.nu)
    sabr_curve = barrier_sweep(sabr_paths, uniform, k=ec["strike"],
                               barriers=barriers, t=ec["expiry"])

    doc = {
        "date": str(surface.date),
        "date_index": idx,
        "block": calibrations["block"][idx],
        "fit_expiry": fit_expiry,
        "alpha": fit.params.alpha,
        "rho": fit.params.rho,
        "volvol": fit.params.volvol,
        "fit_rmse": fit.rmse,
        "fit_max_abs_residual": fit.max_abs_residual,
        "smile_strike_offsets": dks,
        "smile_market": smile,
        "smile_fitted": sabr_normal_vol(fit.params, 0.0, dks, fit_expiry),
        "surface_market": surface.vols,
        "surface_weight_decoder": wd_recon.vols,
        "surface_sabr": sabr_vols,
        "mrae_weight_decoder": wd_recon.mrae_vs(surface),
        "mrae_sabr": mrae_arrays(surface.vols, sabr_vols),
        "barriers": wmc_curve.barriers,
        "price_wmc": wmc_curve.prices,
        "se_wmc": wmc_curve.standard_errors,
        "price_sabr": sabr_curve.prices,
        "se_sabr": sabr_curve.standard_errors,
        "strike": ec["strike"],
        "expiry": ec["expiry"],
    }
    _write_json(target, doc)
    return _read_json(target)


# -- orchestration --------------------------------------------------------------


def _auto_sigma_prior(train: MarketHistory) -> float:
    return float(np.mean([s.atm_vol(2.0) for s in train]))


def run_pipeline(config, out_dir, resume: bool = False) -> Path:
    """Run every stage into ``out_dir`` and write ``manifest.json``.

    ``config`` is a path to a JSON document or an already-loaded dict.  A
    failing stage is recorded in the manifest before the error propagates.
    """
    cfg = load_config(config) if isinstance(config, (str, Path)) else validate_config(config)
    run = Path(out_dir)
    run.mkdir(parents=True, exist_ok=True)

    config_path = run / "config.json"
    if resume and config_path.exists():
        stored = validate_config(_read_json(config_path))
        if config_hash(stored) != config_hash(cfg):
            raise ConfigError("resume config does not match the stored run config")
    _write_json(config_path, cfg)

    stages = []
    metrics = {}

    def _finish(status_doc):
        manifest = {
            "config": cfg,
            "config_sha256": config_hash(cfg),
            "versions": {"package": PACKAGE_VERSION,
                         "checkpoint": nn.CHECKPOINT_VERSION},
            "seeds": cfg["seeds"],
            "stages": stages,
            "metrics": metrics,
        }
        manifest.update(status_doc)
        _write_json(run / MANIFEST_NAME, manifest)

    def _run(name, fn):
        try:
            out = fn()
        except Exception as exc:
            stages.append({"name": name, "status": "failed",
                           "error": f"{type(exc).__name__}: {exc}"})
            _finish({"status": "failed"})
            raise
        stages.append({"name": name, "status": "completed"})
        return out

    history = _run("data", lambda: _stage_data(cfg, run, resume))
    n_train_block = int(math.floor(cfg["data"]["train_fraction"] * len(history)))
    train, validation, _ = chronological_split(
        history, cfg["data"]["train_fraction"], cfg["data"]["n_validation"],
        seed=cfg["seeds"]["split"])

    vae_model, vae_report = _run(
        "vae", lambda: _stage_vae(cfg, run, resume, train, validation))
    metrics["vae"] = {"latent_dim": cfg["vae"]["latent_dim"],
                      "best_val_mse": vae_report["best_val_mse"],
                      "best_epoch": vae_report["best_epoch"],
                      "epochs_run": vae_report["epochs_run"]}

    synth_doc = _run("synthetic",
                     lambda: _stage_synthetic(cfg, run, resume, vae_model))
    metrics["synthetic"] = {"n_kept": len(synth_doc["latents"]),
                            "n_discarded": synth_doc["n_discarded"]}

    tuned_model, tune_report = _run(
        "finetune", lambda: _stage_finetune(cfg, run, resume, vae_model, synth_doc))
    metrics["finetune"] = {"best_val_mse": tune_report["best_val_mse"],
                           "epochs_run": tune_report["epochs_run"]}

    calibrations = _run(
        "calibrate",
        lambda: _stage_calibrate(cfg, run, resume, tuned_model, history, n_train_block))

    sigma_prior = cfg["wmc"]["sigma_prior"]
    if sigma_prior == "auto":
        sigma_prior = _auto_sigma_prior(train)
    metrics["sigma_prior"] = sigma_prior

    paths = _run("paths", lambda: _stage_paths(cfg, run, resume, sigma_prior))

    net, wd_report = _run(
        "weight_decoder",
        lambda: _stage_weight_decoder(cfg, run, resume, tuned_model, paths,
                                      synth_doc, calibrations))
    metrics["weight_decoder"] = {"best_val_price_mse": wd_report["best_val_mse"],
                                 "best_epoch": wd_report["best_epoch"],
                                 "epochs_run": wd_report["epochs_run"],
                                 "parity_max": wd_report["parity_max"]}

    recon = _run(
        "reconstruct",
        lambda: _stage_reconstruct(cfg, run, resume, vae_model, tuned_model,
                                   net, paths, history, calibrations))
    metrics["reconstruction"] = {
        "dates": recon["dates"], "block": recon["block"],
        "mrae_direct": recon["mrae_direct"],
        "mrae_finetuned": recon["mrae_finetuned"],
        "mrae_calibration": recon["mrae_calibration"],
        "mrae_weight_decoder": recon["mrae_weight_decoder"],
    }
    metrics["reconstruction_summary"] = _block_means(recon)
    metrics["martingale"] = {"dates": recon["martingale"]["dates"],
                             "relative_loss": recon["martingale"]["relative_loss"],
                             "noise_floor": recon["noise_floor"]}

    compare = _run(
        "compare",
        lambda: _stage_compare(cfg, run, resume, net, paths, history,
                               calibrations, recon))
    metrics["sabr"] = {key: compare[key]
                       for key in ("date", "date_index", "fit_expiry", "alpha",
                                   "rho", "volvol", "fit_rmse",
                                   "mrae_weight_decoder", "mrae_sabr")}
    metrics["barrier"] = {key: compare[key]
                          for key in ("barriers", "price_wmc", "se_wmc",
                                      "price_sabr", "se_sabr", "strike",
                                      "expiry")}

    _finish({"status": "completed"})
    return run


def _block_means(recon) -> dict:
    out = {}
    block = np.asarray(recon["block"])
    for name in ("mrae_direct", "mrae_finetuned", "mrae_calibration",
                 "mrae_weight_decoder"):
        col = np.asarray([np.nan if v is None else v for v in recon[name]], dtype=float)
        out[name] = {
            "train": float(np.nanmean(col[block == "train"])),
            "test": float(np.nanmean(col[block == "test"])),
        }
    return out
