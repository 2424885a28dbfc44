"""Pointwise variational autoencoder over normal-vol surfaces.

The encoder reads a whole surface (49 standardized vols) and emits a latent
Gaussian (mu, logvar).  The decoder maps a single (z, strike offset, expiry)
triple to one vol, so each surface contributes 49 samples that share one
draw of z.  Trained decoders double as smooth surface interpolators and as
the generator behind synthetic-surface sampling and latent calibration.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit

from . import nn
from .errors import CheckpointError, GridError, TrainingDivergedError
from .market import MarketHistory, SurfaceGrid, VolSurface, mrae_arrays

# Positivity clamp for decoded vols: sigma_min + s * softplus((raw - sigma_min) / s).
# Smooth, strictly above sigma_min, and indistinguishable from the identity a few
# multiples of s above the floor.  Applied outside the training loss; the raw
# decoder output stays available for the synthetic-surface filter.
SIGMA_MIN = 1e-6
_CLAMP_SCALE = 1e-6


def clamp_vol(raw):
    x = (np.asarray(raw, dtype=float) - SIGMA_MIN) / _CLAMP_SCALE
    return SIGMA_MIN + _CLAMP_SCALE * np.logaddexp(0.0, x)


def clamp_vol_prime(raw):
    x = (np.asarray(raw, dtype=float) - SIGMA_MIN) / _CLAMP_SCALE
    return expit(x)


@dataclass(frozen=True)
class LatentPoint:
    """A point in the latent space."""

    z: np.ndarray

    def __post_init__(self):
        z = np.atleast_1d(np.asarray(self.z, dtype=float))
        if z.ndim != 1 or not np.all(np.isfinite(z)):
            raise ValueError("latent coordinates must be a finite vector")
        z = z.copy()
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    @property
    def dim(self):
        return len(self.z)

    @classmethod
    def origin(cls, dim: int):
        return cls(np.zeros(dim))


@dataclass(frozen=True)
class Scaling:
    """Input standardization captured from the training set.

    Vols are standardized by a global mean/std; node coordinates are min-max
    mapped to [-1, 1].  Width-10 layers want inputs of order one.
    """

    vol_mean: float
    vol_std: float
    dk_lo: float
    dk_hi: float
    t_lo: float
    t_hi: float

    @classmethod
    def from_history(cls, history: MarketHistory):
        vols = history.vol_matrix()
        grid = history.grid
        return cls(
            vol_mean=float(vols.mean()),
            vol_std=float(vols.std()),
            dk_lo=float(grid.strike_offsets[0]),
            dk_hi=float(grid.strike_offsets[-1]),
            t_lo=float(grid.expiries[0]),
            t_hi=float(grid.expiries[-1]),
        )

    def scale_vols(self, vols):
        return (np.asarray(vols, dtype=float) - self.vol_mean) / self.vol_std

    def unscale_vols(self, scaled):
        return self.vol_mean + self.vol_std * np.asarray(scaled, dtype=float)

    def scale_dk(self, dk):
        return -1.0 + 2.0 * (np.asarray(dk, dtype=float) - self.dk_lo) / (self.dk_hi - self.dk_lo)

    def scale_t(self, t):
        return -1.0 + 2.0 * (np.asarray(t, dtype=float) - self.t_lo) / (self.t_hi - self.t_lo)

    def node_features(self, grid: SurfaceGrid):
        """(size, 2) matrix of scaled (dk, t) pairs in grid.nodes() order."""
        ks, ts = grid.nodes()
        return np.column_stack([self.scale_dk(ks), self.scale_t(ts)])

    def to_doc(self):
        return {"vol_mean": self.vol_mean, "vol_std": self.vol_std,
                "dk_lo": self.dk_lo, "dk_hi": self.dk_hi,
                "t_lo": self.t_lo, "t_hi": self.t_hi}

    @classmethod
    def from_doc(cls, doc):
        return cls(**{k: float(doc[k]) for k in
                      ("vol_mean", "vol_std", "dk_lo", "dk_hi", "t_lo", "t_hi")})


def kl_divergence(mu, logvar):
    """KL(N(mu, diag exp(logvar)) || N(0, I)), averaged over a batch if 2-d."""
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    per = 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)
    return float(np.mean(per))


class VaeModel:
    """Encoder/decoder pair plus the scaling and grid they were trained on."""

    kind = "vae"

    def __init__(self, encoder: nn.DenseNet, decoder: nn.DenseNet,
                 latent_dim: int, beta: float, scaling: Scaling, grid: SurfaceGrid):
        if encoder.sizes[-1] != 2 * latent_dim:
            raise ValueError("encoder must emit 2 * latent_dim outputs")
        if decoder.sizes[0] != latent_dim + 2:
            raise ValueError("decoder must take latent_dim + 2 inputs")
        if encoder.sizes[0] != grid.size:
            raise GridError("encoder input width does not match the grid")
        self.encoder = encoder
        self.decoder = decoder
        self.latent_dim = latent_dim
        self.beta = beta
        self.scaling = scaling
        self.grid = grid

    @classmethod
    def create(cls, scaling: Scaling, grid: SurfaceGrid, latent_dim: int = 3,
               beta: float = 5e-5, hidden=(10, 10), seed: int = 0):
        widths = list(hidden)
        acts = ["elu"] * len(widths) + ["linear"]
        encoder = nn.DenseNet.create([grid.size] + widths + [2 * latent_dim],
                                     acts, seed=2 * seed)
        decoder = nn.DenseNet.create([latent_dim + 2] + widths + [1],
                                     acts, seed=2 * seed + 1)
        return cls(encoder, decoder, latent_dim, beta, scaling, grid)

    # -- encoding ------------------------------------------------------------

    def _flat_scaled(self, surface):
        if isinstance(surface, VolSurface):
            if surface.grid != self.grid:
                raise GridError("surface grid does not match the model grid")
            return self.scaling.scale_vols(surface.flat())
        vols = np.asarray(surface, dtype=float).ravel()
        if vols.size != self.grid.size:
            raise GridError("expected one vol per grid node")
        return self.scaling.scale_vols(vols)

    def encode(self, surface):
        """Deterministic (mu, logvar) for one surface."""
        out = self.encoder.forward(self._flat_scaled(surface))
        return out[: self.latent_dim], out[self.latent_dim:]

    def encode_batch(self, vols_scaled):
        out = self.encoder.forward(np.asarray(vols_scaled, dtype=float))
        return out[:, : self.latent_dim], out[:, self.latent_dim:]

    # -- decoding ------------------------------------------------------------

    def _latent(self, z):
        z = z.z if isinstance(z, LatentPoint) else np.asarray(z, dtype=float)
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent point must have dimension {self.latent_dim}")
        return z

    def decode_points(self, z, dks, ts, raw=False):
        """Vols at arbitrary (dk, t) points for one latent point."""
        z = self._latent(z)
        dks = np.atleast_1d(np.asarray(dks, dtype=float))
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        feats = np.column_stack([self.scaling.scale_dk(dks), self.scaling.scale_t(ts)])
        x = np.hstack([np.tile(z, (len(feats), 1)), feats])
        out = self.scaling.unscale_vols(self.decoder.forward(x)[:, 0])
        return out if raw else clamp_vol(out)

    def decode_point(self, z, dk: float, t: float, raw=False) -> float:
        return float(self.decode_points(z, [dk], [t], raw=raw)[0])

    def decode_surface(self, z, raw=False):
        """Vol matrix on the model grid, shaped like VolSurface.vols."""
        ks, ts = self.grid.nodes()
        return self.decode_points(z, ks, ts, raw=raw).reshape(self.grid.shape)

    def decode_grid(self, z, scaled_features, raw=False):
        """Decode pre-scaled (n, 2) node features for many latents at once.

        ``z`` is (m, latent_dim); returns (m, n) natural-unit vols.
        """
        z = np.asarray(z, dtype=float)
        m, n = z.shape[0], scaled_features.shape[0]
        x = np.hstack([np.repeat(z, n, axis=0), np.tile(scaled_features, (m, 1))])
        out = self.scaling.unscale_vols(self.decoder.forward(x)[:, 0]).reshape(m, n)
        return out if raw else clamp_vol(out)

    def decoder_greeks(self, z, dk: float, t: float):
        """Exact gradients of the decoded vol: (d sigma/dz, d sigma/ddk, d sigma/dt)."""
        dz, ddk, dt = self.decoder_greeks_many(z, [dk], [t])
        return dz[0], float(ddk[0]), float(dt[0])

    def decoder_greeks_many(self, z, dks, ts):
        """Batched greeks: (n, d) latent gradients plus (n,) dk and t gradients."""
        z = self._latent(z)
        dks = np.atleast_1d(np.asarray(dks, dtype=float))
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        feats = np.column_stack([self.scaling.scale_dk(dks), self.scaling.scale_t(ts)])
        x = np.hstack([np.tile(z, (len(feats), 1)), feats])
        out, cache = self.decoder.forward_cached(x)
        raw = self.scaling.unscale_vols(out[:, 0])
        # d sigma / d net_output, including the positivity clamp.
        douter = (clamp_vol_prime(raw) * self.scaling.vol_std)[:, None]
        _, dx = self.decoder.backward(cache, douter, want_input_grad=True)
        dz = dx[:, : self.latent_dim]
        ddk = dx[:, self.latent_dim] * 2.0 / (self.scaling.dk_hi - self.scaling.dk_lo)
        dt = dx[:, self.latent_dim + 1] * 2.0 / (self.scaling.t_hi - self.scaling.t_lo)
        return dz, ddk, dt

    # -- parameter plumbing (loss heads, gradient checks) ---------------------

    @property
    def n_params(self):
        return self.encoder.n_params + self.decoder.n_params

    def params_flat(self):
        return np.concatenate([self.encoder.params_flat(), self.decoder.params_flat()])

    def set_params_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError("flat parameter vector has wrong length")
        ne = self.encoder.n_params
        self.encoder.set_params_flat(theta[:ne])
        self.decoder.set_params_flat(theta[ne:])

    def copy(self):
        return VaeModel(self.encoder.copy(), self.decoder.copy(),
                        self.latent_dim, self.beta, self.scaling, self.grid)

    # -- persistence -----------------------------------------------------------

    def to_doc(self):
        return {
            "version": nn.CHECKPOINT_VERSION,
            "kind": self.kind,
            "latent_dim": self.latent_dim,
            "beta": self.beta,
            "scaling": self.scaling.to_doc(),
            "strike_offsets": list(self.grid.strike_offsets),
            "expiries": list(self.grid.expiries),
            "encoder": nn.net_to_doc(self.encoder),
            "decoder": nn.net_to_doc(self.decoder),
        }

    @classmethod
    def from_doc(cls, doc):
        try:
            grid = SurfaceGrid(tuple(doc["strike_offsets"]), tuple(doc["expiries"]))
            return cls(
                encoder=nn.net_from_doc(doc["encoder"]),
                decoder=nn.net_from_doc(doc["decoder"]),
                latent_dim=int(doc["latent_dim"]),
                beta=float(doc["beta"]),
                scaling=Scaling.from_doc(doc["scaling"]),
                grid=grid,
            )
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed vae checkpoint: {exc}") from exc

    def save(self, path):
        nn.write_json_doc(self.to_doc(), path)

    @classmethod
    def load(cls, path):
        return cls.from_doc(nn.read_json_doc(path, expected_kind=cls.kind))


def reparameterize(mu, logvar, noise):
    """z = mu + exp(logvar / 2) * noise, elementwise."""
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    noise = np.asarray(noise, dtype=float)
    return mu + np.exp(0.5 * logvar) * noise


def reconstruct_direct(model: VaeModel, surface) -> np.ndarray:
    """Decode through z = mu: the cheap, calibration-free reconstruction."""
    mu, _ = model.encode(surface)
    return model.decode_surface(mu)


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class VaeBatch:
    """One training batch: scaled vols, shared node features, per-surface noise."""

    vols_scaled: np.ndarray    # (batch, nodes)
    features: np.ndarray       # (nodes, 2), pre-scaled
    noise: np.ndarray          # (batch, latent_dim)


def _vae_loss_and_grads(model: VaeModel, batch: VaeBatch):
    """Loss and per-layer gradients of L = L_rec + beta * L_KL.

    Reconstruction is pointwise MSE in standardized vol space; each surface
    uses a single z draw shared by its nodes.
    """
    vols = batch.vols_scaled
    feats = batch.features
    noise = batch.noise
    b, n_nodes = vols.shape
    d = model.latent_dim

    enc_out, enc_cache = model.encoder.forward_cached(vols)
    mu, logvar = enc_out[:, :d], enc_out[:, d:]
    std = np.exp(0.5 * logvar)
    z = mu + std * noise

    dec_in = np.hstack([np.repeat(z, n_nodes, axis=0), np.tile(feats, (b, 1))])
    dec_out, dec_cache = model.decoder.forward_cached(dec_in)
    diff = dec_out[:, 0] - vols.ravel()

    l_rec = float(np.mean(diff * diff))
    kl_per = 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=1)
    l_kl = float(np.mean(kl_per))
    loss = l_rec + model.beta * l_kl

    d_out = (2.0 * diff / diff.size)[:, None]
    dec_grads, d_in = model.decoder.backward(dec_cache, d_out, want_input_grad=True)
    dz = d_in[:, :d].reshape(b, n_nodes, d).sum(axis=1)

    dmu = dz + model.beta * mu / b
    dlogvar = dz * noise * 0.5 * std + model.beta * 0.5 * (np.exp(logvar) - 1.0) / b
    enc_grads, _ = model.encoder.backward(enc_cache, np.hstack([dmu, dlogvar]))
    return loss, l_rec, l_kl, enc_grads, dec_grads


def _vae_head(model: VaeModel, batch: VaeBatch):
    loss, _, _, enc_grads, dec_grads = _vae_loss_and_grads(model, batch)
    return loss, np.concatenate([nn.flatten_grads(enc_grads), nn.flatten_grads(dec_grads)])


nn.register_loss_head("vae", _vae_head)


@dataclass(frozen=True)
class VaeConfig:
    latent_dim: int = 3
    beta: float = 5e-5
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 2000
    patience: int = 200
    lr_decay: float = 0.5
    lr_patience: int = 50
    min_lr: float = 1e-5
    hidden: tuple = (10, 10)
    seed: int = 0
    restarts: int = 1


@dataclass
class TrainingReport:
    """Per-epoch history plus the retained optimum."""

    train_loss: list = field(default_factory=list)
    train_rec_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = np.inf
    epochs_run: int = 0
    updates: int = 0
    final_learning_rate: float = np.nan
    stopped_early: bool = False


def validation_mse(model: VaeModel, vols_scaled, features) -> float:
    """Deterministic reconstruction MSE (z = mu) in standardized space."""
    mu, _ = model.encode_batch(vols_scaled)
    n = features.shape[0]
    dec_in = np.hstack([np.repeat(mu, n, axis=0), np.tile(features, (len(mu), 1))])
    pred = model.decoder.forward(dec_in)[:, 0]
    diff = pred - np.asarray(vols_scaled, dtype=float).ravel()
    return float(np.mean(diff * diff))


def train_vae(train: MarketHistory, validation: MarketHistory | None,
              config: VaeConfig = VaeConfig()):
    """Train a fresh VAE on a surface history.

    Returns (model, report); the model carries the parameters whose
    validation MSE was lowest (training loss stands in when no validation
    set is supplied).  With restarts > 1 the run is repeated from derived
    seeds and the best-validation model wins; width-10 nets land in poor
    basins often enough that a single start is a gamble.
    """
    best = None
    for r in range(max(1, config.restarts)):
        cfg_r = replace(config, seed=config.seed + 7919 * r, restarts=1)
        model, report = _train_vae_once(train, validation, cfg_r)
        if best is None or report.best_val_mse < best[1].best_val_mse:
            best = (model, report)
    return best


def _train_vae_once(train: MarketHistory, validation: MarketHistory | None,
                    config: VaeConfig):
    if len(train) == 0:
        raise ValueError("training history is empty")
    scaling = Scaling.from_history(train)
    model = VaeModel.create(scaling, train.grid, latent_dim=config.latent_dim,
                            beta=config.beta, hidden=config.hidden, seed=config.seed)
    feats = scaling.node_features(train.grid)
    x_train = scaling.scale_vols(train.vol_matrix())
    x_val = scaling.scale_vols(validation.vol_matrix()) if validation is not None else None

    rng = np.random.default_rng(config.seed)
    params = model.encoder.param_arrays() + model.decoder.param_arrays()
    adam = nn.AdamState.for_params(params, config.learning_rate)
    report = TrainingReport()
    best_params = model.params_flat()
    since_improve = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(x_train))
        epoch_loss = 0.0
        epoch_rec = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            noise = rng.standard_normal((len(idx), config.latent_dim))
            batch = VaeBatch(x_train[idx], feats, noise)
            loss, l_rec, _, enc_grads, dec_grads = _vae_loss_and_grads(model, batch)
            if not np.isfinite(loss):
                report.epochs_run = epoch
                raise TrainingDivergedError(
                    f"vae loss became non-finite at epoch {epoch}", report=report)
            adam_grads = [g for pair in enc_grads + dec_grads for g in pair]
            nn.adam_step(params, adam_grads, adam)
            epoch_loss += loss
            epoch_rec += l_rec
            n_batches += 1
            report.updates += 1

        report.train_loss.append(epoch_loss / n_batches)
        report.train_rec_mse.append(epoch_rec / n_batches)
        score = (validation_mse(model, x_val, feats) if x_val is not None
                 else report.train_loss[-1])
        report.val_mse.append(score)
        report.epochs_run = epoch + 1

        if score < report.best_val_mse:
            report.best_val_mse = score
            report.best_epoch = epoch
            best_params = model.params_flat()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve % config.lr_patience == 0 and adam.learning_rate > config.min_lr:
                adam.learning_rate = max(config.min_lr,
                                         adam.learning_rate * config.lr_decay)
            if since_improve >= config.patience:
                report.stopped_early = True
                break

    report.final_learning_rate = adam.learning_rate
    model.set_params_flat(best_params)
    return model, report


# -- latent calibration ---------------------------------------------------------


@dataclass(frozen=True)
class CalibrationResult:
    latent: LatentPoint
    residual_norm: float
    mrae: float
    n_evaluations: int
    converged: bool

    @property
    def z(self):
        return self.latent.z


def calibrate_latent(model: VaeModel, observations, init=None,
                     bounds=(-4.0, 4.0), max_nfev: int = 200) -> CalibrationResult:
    """Fit a latent point to observed vols by bounded least squares.

    ``observations`` is a sequence of (dk, t, sigma) rows; any subset of the
    surface works.  Trust-region reflective iterations use the decoder's
    analytic latent gradients as the Jacobian.
    """
    obs = np.asarray(observations, dtype=float)
    if obs.size == 0:
        raise ValueError("calibrate_latent needs at least one observation")
    obs = obs.reshape(-1, 3)
    dks, ts, sigmas = obs[:, 0], obs[:, 1], obs[:, 2]

    lo, hi = float(bounds[0]), float(bounds[1])
    if init is None:
        z0 = np.zeros(model.latent_dim)
    else:
        z0 = init.z if isinstance(init, LatentPoint) else np.asarray(init, dtype=float)
        z0 = np.clip(z0, lo + 1e-9, hi - 1e-9)

    def residual(z):
        return model.decode_points(z, dks, ts) - sigmas

    def jacobian(z):
        dz, _, _ = model.decoder_greeks_many(z, dks, ts)
        return dz

    res = least_squares(residual, z0, jac=jacobian, bounds=(lo, hi), method="trf",
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
    latent = LatentPoint(res.x)
    rec = model.decode_points(latent, dks, ts)
    return CalibrationResult(
        latent=latent,
        residual_norm=float(np.linalg.norm(rec - sigmas)),
        mrae=mrae_arrays(sigmas, rec),
        n_evaluations=int(res.nfev),
        converged=bool(res.status > 0),
    )


def surface_observations(surface: VolSurface) -> np.ndarray:
    """Full-grid (dk, t, sigma) rows for calibrate_latent."""
    ks, ts = surface.grid.nodes()
    return np.column_stack([ks, ts, surface.flat()])


# -- synthetic sampling -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSurfaces:
    """Latent draws that decoded to all-positive surfaces, plus the reject count."""

    latents: np.ndarray            # (kept, latent_dim)
    surfaces: list                 # kept VolSurface objects, date=None
    n_discarded: int

    def __len__(self):
        return len(self.surfaces)

    def __iter__(self):
        for z, s in zip(self.latents, self.surfaces):
            yield LatentPoint(z), s


def sample_synthetic_surfaces(model: VaeModel, n: int = 10000,
                              variance: float = 4.0, seed: int = 0) -> SyntheticSurfaces:
    """Decode latent draws z ~ N(0, variance * I) on the model grid.

    Surfaces whose raw (unclamped) decode contains a non-positive vol are
    discarded and counted; kept surfaces use the clamped decode.
    """
    rng = np.random.default_rng(seed)
    z = np.sqrt(variance) * rng.standard_normal((n, model.latent_dim))
    feats = model.scaling.node_features(model.grid)
    raw = model.decode_grid(z, feats, raw=True)
    keep = np.all(raw > 0.0, axis=1)
    vols = clamp_vol(raw[keep]).reshape(-1, *model.grid.shape)
    surfaces = [VolSurface(None, model.grid, v) for v in vols]
    return SyntheticSurfaces(latents=z[keep].copy(), surfaces=surfaces,
                             n_discarded=int(n - keep.sum()))


# -- encoder fine-tuning -----------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 500
    patience: int = 50
    logvar_target: float = -8.0
    holdout_fraction: float = 0.1
    seed: int = 0


def finetune_encoder(model: VaeModel, synthetic, config: FinetuneConfig = FinetuneConfig()):
    """Retrain the encoder on decoder-generated pairs; the decoder stays frozen.

    ``synthetic`` is a SyntheticSurfaces or any iterable of (latent, surface)
    pairs.  The encoder's mu head regresses onto the generating z and the
    logvar head onto a fixed small target.  Returns (model, report) with a
    bit-identical decoder.
    """
    pairs = list(synthetic)
    if not pairs:
        raise ValueError("finetune_encoder needs a non-empty synthetic set")
    z_all = np.array([(z.z if isinstance(z, LatentPoint) else np.asarray(z, dtype=float))
                      for z, _ in pairs])
    x_all = model.scaling.scale_vols(np.array([s.flat() for _, s in pairs]))
    targets = np.hstack([z_all, np.full_like(z_all, config.logvar_target)])

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(pairs))
    n_hold = max(1, int(round(config.holdout_fraction * len(pairs)))) if len(pairs) > 1 else 0
    hold, fit = order[:n_hold], order[n_hold:]
    if len(fit) == 0:
        fit, hold = order, order[:0]

    tuned = model.copy()
    encoder = tuned.encoder
    params = encoder.param_arrays()
    adam = nn.AdamState.for_params(params, config.learning_rate)
    report = TrainingReport()
    best_params = encoder.params_flat()

    def holdout_mse():
        if len(hold) == 0:
            return np.nan
        diff = encoder.forward(x_all[hold]) - targets[hold]
        return float(np.mean(diff * diff))

    since_improve = 0
    for epoch in range(config.epochs):
        perm = fit[rng.permutation(len(fit))]
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = (x_all[idx], targets[idx])
            loss, flat = nn.loss_and_gradients("mse", encoder, batch)
            if not np.isfinite(loss):
                report.epochs_run = epoch
                raise TrainingDivergedError(
                    f"fine-tune loss became non-finite at epoch {epoch}", report=report)
            grads = _unflatten_like(flat, params)
            nn.adam_step(params, grads, adam)
            epoch_loss += loss
            n_batches += 1
            report.updates += 1
        report.train_loss.append(epoch_loss / n_batches)
        score = holdout_mse()
        if np.isnan(score):
            score = report.train_loss[-1]
        report.val_mse.append(score)
        report.epochs_run = epoch + 1
        if score < report.best_val_mse:
            report.best_val_mse = score
            report.best_epoch = epoch
            best_params = encoder.params_flat()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                report.stopped_early = True
                break

    report.final_learning_rate = adam.learning_rate
    encoder.set_params_flat(best_params)
    return tuned, report


def _unflatten_like(flat, params):
    out = []
    offset = 0
    for p in params:
        out.append(flat[offset:offset + p.size].reshape(p.shape))
        offset += p.size
    return out


# -- latent diagnostics -----------------------------------------------------------


@dataclass(frozen=True)
class LatentSweep:
    dim: int
    values: np.ndarray
    origin_vols: np.ndarray     # grid-shaped
    vols: np.ndarray            # (len(values), *grid.shape)

    @property
    def differences(self):
        return self.vols - self.origin_vols[None, :, :]


def latent_sweep(model: VaeModel, dim: int, values=None, fixed=None) -> LatentSweep:
    """Decode surfaces along one latent axis, others held at ``fixed``."""
    if not 0 <= dim < model.latent_dim:
        raise ValueError(f"latent axis {dim} out of range for dim {model.latent_dim}")
    values = np.asarray([-2.0, -1.0, 0.0, 1.0, 2.0] if values is None else values,
                        dtype=float)
    base = (fixed.z if isinstance(fixed, LatentPoint)
            else np.zeros(model.latent_dim) if fixed is None
            else np.asarray(fixed, dtype=float))
    z = np.tile(base, (len(values), 1))
    z[:, dim] = values
    feats = model.scaling.node_features(model.grid)
    vols = model.decode_grid(z, feats).reshape(len(values), *model.grid.shape)
    origin = model.decode_surface(base)
    return LatentSweep(dim=dim, values=values, origin_vols=origin, vols=vols)
