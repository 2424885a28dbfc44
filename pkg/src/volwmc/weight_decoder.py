"""Latent coordinates to Monte Carlo path weights, trained on price surfaces.

A small dense net ends in a softmax over one specific path set, so a latent
point decodes straight to a reweighting of those paths.  Training pushes the
weighted vanilla prices toward Bachelier prices of the VAE-decoded surface,
with a small relative-entropy pull toward uniform.  Since the weights only
mean anything on the paths they were trained against, the net records the
path-set identity and refuses to run on anything else.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .bachelier import bachelier_price, implied_normal_vol
from .errors import (CheckpointError, NoSolutionError, PathBindingError,
                     TrainingDivergedError)
from .market import SurfaceGrid, mrae_arrays
from .paths import PathSet
from .vae import LatentPoint, VaeModel
from .wmc import (PayoffMatrix, WeightVector, risk_neutral_density,
                  vanilla_payoffs)


class WeightDecoderNet:
    """DenseNet from latent space to a softmax over path weights."""

    kind = "weight_decoder"

    def __init__(self, net: nn.DenseNet, identity: dict):
        if net.activations[-1] != "softmax":
            raise ValueError("weight decoder must end in a softmax readout")
        if net.sizes[-1] != identity["nu"]:
            raise ValueError("readout width must equal the path count")
        self.net = net
        self.identity = dict(identity)

    @classmethod
    def create(cls, paths: PathSet, latent_dim: int = 3, hidden=(20, 49),
               seed: int = 0):
        """Fresh net bound to ``paths``; the zeroed readout starts uniform."""
        sizes = [latent_dim] + list(hidden) + [paths.nu]
        acts = ["elu"] * len(hidden) + ["softmax"]
        net = nn.DenseNet.create(sizes, acts, seed=seed, zero_last_layer=True)
        return cls(net, paths.identity())

    @property
    def latent_dim(self):
        return self.net.sizes[0]

    @property
    def nu(self):
        return self.net.sizes[-1]

    def check_binding(self, paths: PathSet):
        if paths.identity() != self.identity:
            raise PathBindingError(
                f"weight decoder is bound to {self.identity}, "
                f"got paths {paths.identity()}")

    def decode_weights(self, z) -> WeightVector:
        z = z.z if isinstance(z, LatentPoint) else np.asarray(z, dtype=float)
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent point must have dimension {self.latent_dim}")
        return WeightVector(self.net.forward(z))

    def decode_weights_batch(self, z) -> np.ndarray:
        return self.net.forward(np.asarray(z, dtype=float))

    # parameter plumbing mirrors DenseNet so loss heads and checks plug in

    @property
    def n_params(self):
        return self.net.n_params

    def params_flat(self):
        return self.net.params_flat()

    def set_params_flat(self, theta):
        self.net.set_params_flat(theta)

    def copy(self):
        return WeightDecoderNet(self.net.copy(), self.identity)

    def to_doc(self):
        return {"version": nn.CHECKPOINT_VERSION, "kind": self.kind,
                "identity": dict(self.identity), "net": nn.net_to_doc(self.net)}

    @classmethod
    def from_doc(cls, doc):
        try:
            identity = dict(doc["identity"])
            for key in ("nu", "steps", "seed"):
                identity[key] = int(identity[key])
            for key in ("horizon", "sigma_prior"):
                identity[key] = float(identity[key])
            return cls(nn.net_from_doc(doc["net"]), identity)
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed weight-decoder checkpoint: {exc}") from exc

    def save(self, path):
        nn.write_json_doc(self.to_doc(), path)

    @classmethod
    def load(cls, path):
        return cls.from_doc(nn.read_json_doc(path, expected_kind=cls.kind))


# -- training targets --------------------------------------------------------


@dataclass(frozen=True)
class PriceTargets:
    """Bachelier prices of VAE-decoded surfaces, parity-consistent by build.

    ``mask`` is False where the raw decode was non-positive; those nodes are
    excluded from every loss and error metric.
    """

    latents: np.ndarray        # (m, d)
    calls: np.ndarray          # (m, nodes)
    puts: np.ndarray           # (m, nodes)
    mask: np.ndarray           # (m, nodes) bool
    grid: SurfaceGrid

    def __len__(self):
        return len(self.latents)


def build_training_targets(vae_model: VaeModel, latents,
                           grid: SurfaceGrid | None = None) -> PriceTargets:
    """Decode each latent to a vol surface and convert to call/put prices."""
    grid = grid or vae_model.grid
    z = np.asarray([(p.z if isinstance(p, LatentPoint) else p) for p in latents],
                   dtype=float)
    if z.size == 0:
        raise ValueError("build_training_targets needs at least one latent point")
    feats = vae_model.scaling.node_features(grid)
    raw = vae_model.decode_grid(z, feats, raw=True)
    mask = raw > 0.0
    from .vae import clamp_vol
    vols = clamp_vol(raw)
    ks, ts = grid.nodes()
    calls = bachelier_price(0.0, ks[None, :], vols, ts[None, :], flavor="call")
    puts = ks[None, :] + calls
    return PriceTargets(latents=z, calls=calls, puts=puts, mask=mask, grid=grid)


# -- loss head ----------------------------------------------------------------

PARITY_MODES = ("parity-constrained", "dual-payoff")


@dataclass(frozen=True)
class WdBatch:
    """Everything one weight-decoder loss evaluation needs."""

    z: np.ndarray              # (b, d)
    target_calls: np.ndarray   # (b, nodes)
    target_puts: np.ndarray    # (b, nodes)
    mask: np.ndarray           # (b, nodes)
    g_call: np.ndarray         # (nu, nodes)
    g_put: np.ndarray          # (nu, nodes)
    dks: np.ndarray            # (nodes,) strike offsets per column
    gamma: float
    parity_mode: str = "parity-constrained"
    parity_weight: float = 1.0


def _wd_loss_and_grads(model: WeightDecoderNet, batch: WdBatch):
    """Loss and gradients of L = L_rec,call + L_rec,put + gamma * D(p/q).

    In parity-constrained mode puts are dk + call exactly; in dual-payoff
    mode puts come from put payoffs and a parity penalty joins the loss.
    """
    if batch.parity_mode not in PARITY_MODES:
        raise ValueError(f"unknown parity mode {batch.parity_mode!r}")
    mask = batch.mask.astype(float)
    n_used = max(mask.sum(), 1.0)
    b, nu = batch.z.shape[0], model.nu

    p, cache = model.net.forward_cached(batch.z)
    calls = p @ batch.g_call
    diff_call = (calls - batch.target_calls) * mask
    l_call = float(np.sum(diff_call ** 2) / n_used)
    d_calls = 2.0 * diff_call / n_used

    if batch.parity_mode == "parity-constrained":
        puts = batch.dks[None, :] + calls
        diff_put = (puts - batch.target_puts) * mask
        l_put = float(np.sum(diff_put ** 2) / n_used)
        d_p = (d_calls + 2.0 * diff_put / n_used) @ batch.g_call.T
        parity_max = 0.0
    else:
        puts = p @ batch.g_put
        diff_put = (puts - batch.target_puts) * mask
        l_put = float(np.sum(diff_put ** 2) / n_used)
        parity = (batch.dks[None, :] + calls - puts) * mask
        l_parity = float(np.sum(parity ** 2) / n_used)
        l_put = l_put + batch.parity_weight * l_parity
        parity_max = float(np.abs(parity).max()) if parity.size else 0.0
        d_puts = 2.0 * diff_put / n_used
        d_parity = 2.0 * batch.parity_weight * parity / n_used
        d_p = ((d_calls + d_parity) @ batch.g_call.T
               + (d_puts - d_parity) @ batch.g_put.T)

    # D(p || uniform) = sum p ln(p nu); gradient ln(p nu) + 1, averaged.
    logp = np.log(p * nu)
    l_kl = float(np.mean(np.sum(p * logp, axis=1)))
    d_p = d_p + batch.gamma * (logp + 1.0) / b

    loss = l_call + l_put + batch.gamma * l_kl
    grads, _ = model.net.backward(cache, d_p)
    parts = {"call": l_call, "put": l_put, "kl": l_kl, "parity_max": parity_max}
    return loss, parts, grads


def _wd_head(model: WeightDecoderNet, batch: WdBatch):
    loss, _, grads = _wd_loss_and_grads(model, batch)
    return loss, nn.flatten_grads(grads)


nn.register_loss_head("weight_decoder", _wd_head)


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class WeightDecoderConfig:
    gamma: float = 1e-8
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 400
    patience: int = 60
    lr_decay: float = 0.5
    lr_patience: int = 25
    lr_min_delta: float = 1e-3
    min_lr: float = 1e-7
    hidden: tuple = (20, 49)
    parity_mode: str = "parity-constrained"
    parity_weight: float = 1.0
    seed: int = 0


@dataclass
class WeightDecoderReport:
    train_loss: list = field(default_factory=list)
    val_price_mse: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = np.inf
    epochs_run: int = 0
    updates: int = 0
    parity_max: float = 0.0
    stopped_early: bool = False


def _price_mse(model: WeightDecoderNet, targets: PriceTargets, batch: WdBatch):
    p = model.decode_weights_batch(batch.z)
    calls = p @ batch.g_call
    if batch.parity_mode == "parity-constrained":
        puts = batch.dks[None, :] + calls
    else:
        puts = p @ batch.g_put
    mask = batch.mask.astype(float)
    n_used = max(mask.sum(), 1.0)
    return float((np.sum(((calls - batch.target_calls) * mask) ** 2)
                  + np.sum(((puts - batch.target_puts) * mask) ** 2)) / n_used)


def train_weight_decoder(paths: PathSet, latents, targets: PriceTargets,
                         config: WeightDecoderConfig = WeightDecoderConfig(),
                         validation: PriceTargets | None = None,
                         payoffs: PayoffMatrix | None = None):
    """Fit a weight decoder to price targets on one path set.

    ``latents`` may be None to use the targets' own latent points.  The
    validation targets (typically the training-period daily latents) drive
    best-parameter retention; without them the training loss stands in.
    Returns (net, report).
    """
    if config.parity_mode not in PARITY_MODES:
        raise ValueError(f"unknown parity mode {config.parity_mode!r}")
    z = (targets.latents if latents is None
         else np.asarray([(p.z if isinstance(p, LatentPoint) else p) for p in latents],
                         dtype=float))
    if len(z) != len(targets):
        raise ValueError("latents and targets are misaligned")
    if len(z) == 0:
        raise ValueError("training set is empty")

    if payoffs is None:
        payoffs = vanilla_payoffs(paths, targets.grid, flavors=("call", "put"))
    g_call = payoffs.select("call").values
    g_put = payoffs.select("put").values
    ks, _ = targets.grid.nodes()

    model = WeightDecoderNet.create(paths, latent_dim=z.shape[1],
                                    hidden=config.hidden, seed=config.seed)

    def make_batch(idx, source: PriceTargets, zs):
        return WdBatch(z=zs[idx], target_calls=source.calls[idx],
                       target_puts=source.puts[idx], mask=source.mask[idx],
                       g_call=g_call, g_put=g_put, dks=ks, gamma=config.gamma,
                       parity_mode=config.parity_mode,
                       parity_weight=config.parity_weight)

    val_batch = None
    if validation is not None:
        val_batch = make_batch(np.arange(len(validation)), validation,
                               validation.latents)

    rng = np.random.default_rng(config.seed)
    params = model.net.param_arrays()
    adam = nn.AdamState.for_params(params, config.learning_rate)
    report = WeightDecoderReport()
    best_params = model.params_flat()
    since_improve = 0
    # Plateau detection for lr decay uses a relative threshold; without it the
    # epsilon-improvements of constant-lr oscillation keep the rate pinned high.
    lr_best = np.inf
    since_lr = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(z))
        epoch_loss = 0.0
        n_batches = 0
        parity_max = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, parts, grads = _wd_loss_and_grads(model, make_batch(idx, targets, z))
            if not np.isfinite(loss):
                report.epochs_run = epoch
                raise TrainingDivergedError(
                    f"weight-decoder loss became non-finite at epoch {epoch}",
                    report=report)
            nn.adam_step(params, [g for pair in grads for g in pair], adam)
            epoch_loss += loss
            parity_max = max(parity_max, parts["parity_max"])
            n_batches += 1
            report.updates += 1

        report.train_loss.append(epoch_loss / n_batches)
        if val_batch is not None:
            score = _price_mse(model, validation, val_batch)
        else:
            score = report.train_loss[-1]
        report.val_price_mse.append(score)
        report.epochs_run = epoch + 1
        report.parity_max = parity_max

        if score < report.best_val_mse:
            report.best_val_mse = score
            report.best_epoch = epoch
            best_params = model.params_flat()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                report.stopped_early = True
                break

        if score < lr_best * (1.0 - config.lr_min_delta):
            lr_best = score
            since_lr = 0
        else:
            since_lr += 1
            if since_lr >= config.lr_patience and adam.learning_rate > config.min_lr:
                adam.learning_rate = max(config.min_lr,
                                         adam.learning_rate * config.lr_decay)
                since_lr = 0

    model.set_params_flat(best_params)
    return model, report


# -- inference ------------------------------------------------------------------


@dataclass(frozen=True)
class WmcReconstruction:
    """Weighted-MC prices inverted back to vols; NaN where inversion failed."""

    grid: SurfaceGrid
    calls: np.ndarray          # grid-shaped call prices
    vols: np.ndarray           # grid-shaped implied vols, NaN where flagged
    flagged: np.ndarray        # grid-shaped bool, True where below intrinsic
    weights: WeightVector

    def mrae_vs(self, surface) -> float:
        """MRAE against a reference surface over the unflagged nodes."""
        ref = surface.vols if hasattr(surface, "vols") else np.asarray(surface)
        ok = ~self.flagged
        if not ok.any():
            return float("nan")
        return mrae_arrays(ref[ok], self.vols[ok])


def reconstruct_surface_via_wmc(net: WeightDecoderNet, paths: PathSet, z,
                                grid: SurfaceGrid,
                                payoffs: PayoffMatrix | None = None,
                                weights=None) -> WmcReconstruction:
    """Decode weights, price grid calls under them, invert to implied vols.

    Nodes whose weighted price does not exceed intrinsic value are flagged
    rather than fatal.  Pass ``weights`` to reuse an existing weight vector
    (e.g. from the classic dual solver) instead of decoding ``z``.
    """
    net.check_binding(paths)
    if weights is None:
        weights = net.decode_weights(z)
    if payoffs is None:
        payoffs = vanilla_payoffs(paths, grid, flavors=("call",))
    g_call = payoffs.select("call").values
    calls = (np.asarray(weights) @ g_call).reshape(grid.shape)

    ks, ts = grid.nodes()
    vols = np.full(grid.size, np.nan)
    flagged = np.zeros(grid.size, dtype=bool)
    flat_calls = calls.ravel()
    for i, (dk, t, price) in enumerate(zip(ks, ts, flat_calls)):
        try:
            vols[i] = implied_normal_vol(price, 0.0, dk, t, flavor="call")
        except NoSolutionError:
            flagged[i] = True
    return WmcReconstruction(grid=grid, calls=calls,
                             vols=vols.reshape(grid.shape),
                             flagged=flagged.reshape(grid.shape),
                             weights=WeightVector(np.asarray(weights)))


@dataclass(frozen=True)
class DensitySweep:
    dim: int
    values: np.ndarray
    expiries: tuple
    histograms: list          # histograms[i][j]: value i, expiry j
    edges: np.ndarray         # shared bin edges across every histogram


def latent_sweep_densities(net: WeightDecoderNet, paths: PathSet, dim: int,
                           values=None, expiries=None, bins: int = 60,
                           fixed=None) -> DensitySweep:
    """Risk-neutral terminal densities while one latent axis sweeps.

    All histograms share one set of bin edges so rows are comparable.
    """
    net.check_binding(paths)
    if not 0 <= dim < net.latent_dim:
        raise ValueError(f"latent axis {dim} out of range for dim {net.latent_dim}")
    values = np.asarray([-2.0, -1.0, 0.0, 1.0, 2.0] if values is None else values,
                        dtype=float)
    if expiries is None:
        expiries = tuple(t for t in (0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0)
                         if t <= paths.horizon + 1e-12)
    base = (fixed.z if isinstance(fixed, LatentPoint)
            else np.zeros(net.latent_dim) if fixed is None
            else np.asarray(fixed, dtype=float))

    terminals = [paths.terminal(t) for t in expiries]
    lo = min(t.min() for t in terminals)
    hi = max(t.max() for t in terminals)
    edges = np.linspace(lo, hi, bins + 1)

    histograms = []
    for v in values:
        z = base.copy()
        z[dim] = v
        w = net.decode_weights(z)
        histograms.append([risk_neutral_density(paths, w, t, bins=edges)
                           for t in expiries])
    return DensitySweep(dim=dim, values=values, expiries=tuple(expiries),
                        histograms=histograms, edges=edges)
