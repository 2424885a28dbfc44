"""Latent-factor volatility surfaces priced by weighted Monte Carlo.

A pointwise variational autoencoder compresses normal-vol surfaces into a
few latent coordinates; a weight decoder turns those coordinates into path
weights over a fixed Brownian prior, so vanilla and path-dependent prices
come from one weighted path set.  A classic entropy-dual calibration and a
normal SABR model serve as benchmarks.
"""
from .bachelier import (OptionQuote, bachelier_price, implied_normal_vol,
                        intrinsic_value, parity_residual, put_from_call)
from .errors import (CheckpointError, CheckpointVersionError, ConfigError,
                     ConvergenceError, CurveError, DataFormatError, GridError,
                     MissingArtifactError, NoSolutionError, PathBindingError,
                     TrainingDivergedError, UnknownLossHeadError, VolwmcError)
from .exotics import BarrierCurve, barrier_call_price, barrier_sweep
from .market import (DEFAULT_GRID, DiscountCurve, MarketHistory, RegimeConfig,
                     SurfaceGrid, SwapSchedule, VolSurface, annuity_factor,
                     chronological_split, forward_swap_rate, load_history,
                     mrae, mrae_arrays, save_history, sliding_window_std,
                     synthetic_history)
from .paths import (PathSet, generate_brownian_paths, load_paths,
                    load_weights, save_paths, save_weights)
from .pipeline import (PACKAGE_VERSION, config_hash, default_config,
                       load_config, run_pipeline, validate_config)
from .reports import REPORT_TAGS, emit_report
from .sabr import (SabrFit, SabrParams, fit_sabr_smile, sabr_normal_vol,
                   simulate_sabr_paths)
from .vae import (CalibrationResult, FinetuneConfig, LatentPoint, Scaling,
                  SyntheticSurfaces, VaeConfig, VaeModel, calibrate_latent,
                  finetune_encoder, latent_sweep, reconstruct_direct,
                  sample_synthetic_surfaces, surface_observations, train_vae)
from .weight_decoder import (DensitySweep, PriceTargets, WeightDecoderConfig,
                             WeightDecoderNet, WmcReconstruction,
                             build_training_targets, latent_sweep_densities,
                             reconstruct_surface_via_wmc,
                             train_weight_decoder)
from .wmc import (DensityHistogram, DualSolution, MartingaleWindow,
                  PayoffColumn, PayoffMatrix, WeightVector,
                  martingale_constraint_columns, martingale_loss,
                  martingale_noise_floor, martingale_windows,
                  mc_standard_error, relative_entropy, risk_neutral_density,
                  solve_lagrange_dual, vanilla_payoffs, weighted_price,
                  weights_from_lagrange)

__version__ = PACKAGE_VERSION
