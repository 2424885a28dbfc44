"""Figure-equivalent data files emitted from a pipeline run directory.

Each tag maps to one tidy CSV built purely from the run artifacts, so a
report can be regenerated at any time after the pipeline finished (or as
far as it got).  Rendering is left to external tooling.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingArtifactError
from .market import load_history, sliding_window_std
from .paths import load_paths
from .vae import VaeModel, latent_sweep, reconstruct_direct
from .weight_decoder import WeightDecoderNet, latent_sweep_densities

__all__ = ["REPORT_TAGS", "emit_report"]

_INTERP_RESOLUTIONS = (10, 25, 50)


def _load_json(run: Path, name: str):
    target = run / name
    if not target.exists():
        raise MissingArtifactError(f"report needs {name}; run the pipeline first")
    with open(target, encoding="utf-8") as fh:
        return json.load(fh)


def _load_history(run: Path):
    target = run / "history.csv"
    if not target.exists():
        raise MissingArtifactError("report needs history.csv; run the pipeline first")
    return load_history(target)


def _load_vae(run: Path, name="vae.json") -> VaeModel:
    target = run / name
    if not target.exists():
        raise MissingArtifactError(f"report needs {name}; run the pipeline first")
    return VaeModel.load(target)


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if np.isnan(value) else repr(value)
    return value


# -- builders -------------------------------------------------------------------


def _fig2(run: Path):
    report = _load_json(run, "vae_report.json")
    header = ["epoch", "train_loss", "train_rec_mse", "val_mse"]
    rows = [(epoch, loss, rec, val) for epoch, (loss, rec, val)
            in enumerate(zip(report["train_loss"], report["train_rec_mse"],
                             report["val_mse"]))]
    return header, rows


def _fig3(run: Path):
    recon = _load_json(run, "reconstruction.json")
    tuned = _load_vae(run, "finetuned.json")
    history = _load_history(run)
    scores = np.asarray([np.nan if v is None else v
                         for v in recon["mrae_finetuned"]], dtype=float)
    cases = {"best": int(np.nanargmin(scores)), "worst": int(np.nanargmax(scores))}
    header = ["case", "date", "strike_offset", "expiry_years",
              "vol_market", "vol_model", "rel_error"]
    rows = []
    for case, idx in cases.items():
        surface = history[idx]
        model_vols = reconstruct_direct(tuned, surface)
        ks, ts = surface.grid.nodes()
        for dk, t, market, model in zip(ks, ts, surface.flat(), model_vols.ravel()):
            rows.append((case, str(surface.date), dk, t, market, model,
                         abs(model - market) / market))
    return header, rows


def _fig4(run: Path):
    model = _load_vae(run)
    header = ["dim", "value", "dK", "T", "vol", "diff_vs_origin"]
    rows = []
    ks, ts = model.grid.nodes()
    for dim in range(model.latent_dim):
        sweep = latent_sweep(model, dim)
        for value, vols, diff in zip(sweep.values, sweep.vols, sweep.differences):
            for dk, t, vol, d in zip(ks, ts, vols.ravel(), diff.ravel()):
                rows.append((dim, value, dk, t, vol, d))
    return header, rows


def _fig5(run: Path):
    calib = _load_json(run, "calibrations.json")
    synth = _load_json(run, "synthetic.json")
    dim = len(calib["z"][0])
    header = ["set", "date"] + [f"z{i}" for i in range(dim)]
    rows = [(block, date, *z) for date, block, z
            in zip(calib["dates"], calib["block"], calib["z"])]
    rows += [("synthetic", "", *z) for z in synth["latents"]]
    return header, rows


def _fig6(run: Path):
    model = _load_vae(run)
    compare = _load_json(run, "sabr_compare.json")
    calib = _load_json(run, "calibrations.json")
    z = np.asarray(calib["z"][compare["date_index"]], dtype=float)
    grid = model.grid
    header = ["resolution", "strike_offset", "expiry_years", "vol"]
    rows = []
    ks, ts = grid.nodes()
    for dk, t, vol in zip(ks, ts, model.decode_surface(z).ravel()):
        rows.append((f"{grid.shape[0]}x{grid.shape[1]}", dk, t, vol))
    for n in _INTERP_RESOLUTIONS:
        dks = np.linspace(min(grid.strike_offsets), max(grid.strike_offsets), n)
        tts = np.linspace(min(grid.expiries), max(grid.expiries), n)
        tt, kk = np.meshgrid(tts, dks, indexing="ij")
        vols = model.decode_points(z, kk.ravel(), tt.ravel())
        for dk, t, vol in zip(kk.ravel(), tt.ravel(), vols):
            rows.append((f"{n}x{n}", dk, t, vol))
    return header, rows


def _fig7(run: Path):
    recon = _load_json(run, "reconstruction.json")
    window_std = sliding_window_std(_load_history(run))
    header = ["date", "block", "mrae_direct", "mrae_finetuned",
              "mrae_calibration", "window_std"]
    rows = [(date, block, d, f, c, w) for date, block, d, f, c, w
            in zip(recon["dates"], recon["block"], recon["mrae_direct"],
                   recon["mrae_finetuned"], recon["mrae_calibration"],
                   window_std)]
    return header, rows


def _fig8(run: Path):
    calib = _load_json(run, "calibrations.json")
    header = ["date", "block", "mrae", "residual_norm", "n_evaluations",
              "converged"]
    rows = list(zip(calib["dates"], calib["block"], calib["mrae"],
                    calib["residual_norm"], calib["n_evaluations"],
                    [int(c) for c in calib["converged"]]))
    return header, rows


def _fig9(run: Path):
    recon = _load_json(run, "reconstruction.json")
    window_std = sliding_window_std(_load_history(run))
    header = ["date", "block", "mrae_weight_decoder", "mrae_calibration",
              "window_std"]
    rows = [(date, block, w, c, s) for date, block, w, c, s
            in zip(recon["dates"], recon["block"],
                   recon["mrae_weight_decoder"], recon["mrae_calibration"],
                   window_std)]
    return header, rows


def _fig10(run: Path):
    report = _load_json(run, "wd_report.json")
    header = ["epoch", "train_loss", "val_price_mse"]
    rows = [(epoch, loss, val) for epoch, (loss, val)
            in enumerate(zip(report["train_loss"], report["val_price_mse"]))]
    return header, rows


def _fig11(run: Path):
    target = run / "wd.json"
    if not target.exists():
        raise MissingArtifactError("report needs wd.json; run the pipeline first")
    net = WeightDecoderNet.load(target)
    paths_file = run / "paths.bin"
    if not paths_file.exists():
        raise MissingArtifactError("report needs paths.bin; run the pipeline first")
    paths = load_paths(paths_file)
    header = ["dim", "value", "expiry", "bin_low", "bin_high", "mass"]
    rows = []
    for dim in range(net.latent_dim):
        sweep = latent_sweep_densities(net, paths, dim)
        lows, highs = sweep.edges[:-1], sweep.edges[1:]
        for value, per_expiry in zip(sweep.values, sweep.histograms):
            for expiry, hist in zip(sweep.expiries, per_expiry):
                for low, high, mass in zip(lows, highs, hist.mass):
                    rows.append((dim, value, expiry, low, high, mass))
    return header, rows


def _fig12(run: Path):
    recon = _load_json(run, "reconstruction.json")
    floor = recon["noise_floor"]
    header = ["date", "relative_mart_loss", "noise_floor"]
    rows = [(date, loss, floor) for date, loss
            in zip(recon["martingale"]["dates"],
                   recon["martingale"]["relative_loss"])]
    return header, rows


def _fig13(run: Path):
    compare = _load_json(run, "sabr_compare.json")
    history = _load_history(run)
    grid = history[0].grid
    ks, ts = grid.nodes()
    header = ["source", "strike_offset", "expiry_years", "vol"]
    rows = []
    for source, key in (("market", "surface_market"),
                        ("weight_decoder", "surface_weight_decoder"),
                        ("sabr", "surface_sabr")):
        vols = np.asarray([[np.nan if v is None else v for v in row]
                           for row in compare[key]], dtype=float)
        for dk, t, vol in zip(ks, ts, vols.ravel()):
            rows.append((source, dk, t, vol))
    return header, rows


def _fig14(run: Path):
    compare = _load_json(run, "sabr_compare.json")
    header = ["barrier", "price_wmc", "price_sabr"]
    rows = list(zip(compare["barriers"], compare["price_wmc"],
                    compare["price_sabr"]))
    return header, rows


_BUILDERS = {
    "fig2": _fig2, "fig3": _fig3, "fig4": _fig4, "fig5": _fig5,
    "fig6": _fig6, "fig7": _fig7, "fig8": _fig8, "fig9": _fig9,
    "fig10": _fig10, "fig11": _fig11, "fig12": _fig12, "fig13": _fig13,
    "fig14": _fig14,
}

REPORT_TAGS = tuple(sorted(_BUILDERS, key=lambda t: int(t[3:])))


def emit_report(run_dir, which: str, out=None) -> Path:
    """Write the CSV behind one figure tag and return its path."""
    run = Path(run_dir)
    if which not in _BUILDERS:
        known = ", ".join(REPORT_TAGS)
        raise ConfigError(f"unknown report tag {which!r} (known: {known})")
    header, rows = _BUILDERS[which](run)
    target = Path(out) if out is not None else run / "reports" / f"{which}.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return target
