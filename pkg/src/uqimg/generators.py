"""Conditional latent-variable generators ``G(y, z; theta)``.

Two variants share one calling convention:

* ``AnalyticParams``: the exact Gaussian posterior of a Gaussian image prior
  under diagonal masking + white noise. ``G = mu_post + std_post * z`` with
  ``Z = N``. Used as an oracle for everything downstream.
* ``CVAEParams``: a conditional-VAE decoder MLP
  ``(values || mask, z) -> hidden -> hidden -> image`` with SiLU activations,
  trained by ``train_generator`` on the tape in :mod:`uqimg.numerics`.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import RngStream, Tape, as_tensor, backward


@dataclass(frozen=True)
class LatentPrior:
    dimension: int

    def __post_init__(self):
        if int(self.dimension) < 1:
            raise ValueError("latent dimension must be positive")


def sample_latent(prior, stream):
    return stream.normal(prior.dimension)


# --- analytic posterior ------------------------------------------------------

@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    std: np.ndarray  # diagonal factor: L = diag(std)

    def factor(self):
        return np.diag(self.std)

    def covariance(self):
        return np.diag(self.std * self.std)

    @property
    def variance(self):
        return self.std * self.std


def analytic_posterior(prior_mean, tau2, sigma2, m):
    """Per-pixel conjugate posterior for a N(prior_mean, tau2 I) prior.

    Observed pixel: precision-weighted blend of measurement and prior mean.
    Unobserved pixel: the prior is returned unchanged.
    """
    if not (tau2 > 0 and sigma2 > 0):
        raise ValueError("prior and noise variances must be positive")
    mu0 = np.asarray(prior_mean, dtype=np.float64)
    if mu0.shape != m.values.shape:
        raise ValueError("prior mean and measurement lengths differ")
    obs = m.mask == 1.0
    post_var_obs = 1.0 / (1.0 / sigma2 + 1.0 / tau2)
    mean = np.where(obs, (m.values / sigma2 + mu0 / tau2) * post_var_obs, mu0)
    var = np.where(obs, post_var_obs, tau2)
    return GaussianPosterior(mean, np.sqrt(var))


@dataclass(frozen=True)
class AnalyticParams:
    prior_mean: np.ndarray
    tau2: float
    sigma2: float
    variant: str = field(default="analytic", init=False)

    def __post_init__(self):
        object.__setattr__(self, "prior_mean", as_tensor(self.prior_mean, name="prior_mean").ravel())
        if not (self.tau2 > 0 and self.sigma2 > 0):
            raise ValueError("analytic variances must be strictly positive")

    @property
    def n_pixels(self):
        return self.prior_mean.size

    @property
    def latent_dim(self):
        return self.n_pixels

    def posterior(self, m):
        return analytic_posterior(self.prior_mean, self.tau2, self.sigma2, m)

    def arrays(self):
        return [("prior_mean", self.prior_mean), ("variances", np.array([self.tau2, self.sigma2]))]

    def meta(self):
        return {"variant": self.variant}


def fit_analytic(pixels, sigma2, tau2_floor=1e-4):
    """Empirical-Bayes Gaussian prior: per-pixel mean, pooled scalar variance."""
    px = np.asarray(pixels, dtype=np.float64)
    mu0 = px.mean(axis=0)
    tau2 = max(float(((px - mu0) ** 2).mean()), tau2_floor)
    return AnalyticParams(mu0, tau2, sigma2)


# --- conditional VAE ---------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 2e-3
    warmup_epochs: int = 2
    hidden: int = 64
    latent_dim: int = 16
    seed: int = 0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1 or self.latent_dim < 1:
            raise ValueError("training counts must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warm-up epochs must lie in [0, epochs]")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    def kl_weight(self, epoch):
        if self.warmup_epochs == 0:
            return 1.0
        return min(1.0, epoch / self.warmup_epochs)

    def config_hash(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


DECODER_KEYS = ("dec_in_y", "dec_in_z", "dec_b1", "dec_w2", "dec_b2", "dec_out", "dec_bout")
ENCODER_KEYS = ("enc_w1", "enc_b1", "enc_mu", "enc_bmu", "enc_lv", "enc_blv")


def _layer_shapes(n, hidden, z):
    return {
        "enc_w1": (3 * n, hidden), "enc_b1": (1, hidden),
        "enc_mu": (hidden, z), "enc_bmu": (1, z),
        "enc_lv": (hidden, z), "enc_blv": (1, z),
        "dec_in_y": (2 * n, hidden), "dec_in_z": (z, hidden), "dec_b1": (1, hidden),
        "dec_w2": (hidden, hidden), "dec_b2": (1, hidden),
        "dec_out": (hidden, n), "dec_bout": (1, n),
    }


def _silu(x):
    return x * 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class CVAEParams:
    n_pixels: int
    hidden: int
    latent_dim: int
    dropout_rate: float
    weights: dict
    # frozen inverted-dropout multipliers for the two hidden layers, or None
    dropout_masks: tuple | None = None
    config_hash: str = ""
    variant: str = field(default="cvae-mlp", init=False)

    def __post_init__(self):
        shapes = _layer_shapes(self.n_pixels, self.hidden, self.latent_dim)
        for k, s in shapes.items():
            w = self.weights.get(k)
            if w is None or w.shape != s:
                raise ValueError(f"weight {k}: expected shape {s}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"weight {k} is not finite")

    def arrays(self):
        out = [(k, self.weights[k]) for k in ENCODER_KEYS + DECODER_KEYS]
        if self.dropout_masks is not None:
            out += [("drop1", self.dropout_masks[0]), ("drop2", self.dropout_masks[1])]
        return out

    def meta(self):
        return {
            "variant": self.variant, "n_pixels": self.n_pixels, "hidden": self.hidden,
            "latent_dim": self.latent_dim, "dropout_rate": self.dropout_rate,
            "config_hash": self.config_hash,
        }

    def flat_weights(self, keys=ENCODER_KEYS + DECODER_KEYS):
        return np.concatenate([self.weights[k].ravel() for k in keys])

    def with_flat_weights(self, flat, keys=ENCODER_KEYS + DECODER_KEYS):
        shapes = _layer_shapes(self.n_pixels, self.hidden, self.latent_dim)
        new, pos = dict(self.weights), 0
        for k in keys:
            size = int(np.prod(shapes[k]))
            new[k] = np.asarray(flat[pos:pos + size], dtype=np.float64).reshape(shapes[k])
            pos += size
        if pos != len(flat):
            raise ValueError("flat weight vector has the wrong length")
        return replace(self, weights=new)

    def decode(self, values, mask, z):
        """Decoder forward pass on batches: values/mask (B, N), z (B, Z)."""
        w = self.weights
        ym = np.concatenate([values, mask], axis=1)
        h = _silu(ym @ w["dec_in_y"] + z @ w["dec_in_z"] + w["dec_b1"])
        if self.dropout_masks is not None:
            h = h * self.dropout_masks[0]
        h = _silu(h @ w["dec_w2"] + w["dec_b2"])
        if self.dropout_masks is not None:
            h = h * self.dropout_masks[1]
        return h @ w["dec_out"] + w["dec_bout"]


def init_cvae(n_pixels, cfg, stream):
    shapes = _layer_shapes(n_pixels, cfg.hidden, cfg.latent_dim)
    weights = {}
    for k in ENCODER_KEYS + DECODER_KEYS:
        s = shapes[k]
        if s[0] == 1:
            weights[k] = np.zeros(s)
        else:
            fan_in = s[0] + (cfg.latent_dim if k == "dec_in_y" else 0) + (2 * n_pixels if k == "dec_in_z" else 0)
            weights[k] = stream.normal(s) / np.sqrt(fan_in)
    weights["enc_lv"] = weights["enc_lv"] * 0.1
    return CVAEParams(n_pixels, cfg.hidden, cfg.latent_dim, cfg.dropout_rate, weights,
                      config_hash=cfg.config_hash())


def tape_decoder(tape, w, values, mask, z, drops=None):
    """Decoder graph on ``tape``; mirrors :meth:`CVAEParams.decode`."""
    ones = tape.constant(np.ones((values.shape[0], 1)))
    ym = tape.constant(np.concatenate([values, mask], axis=1))
    h = tape.silu(tape.add(tape.add(ym @ w["dec_in_y"], z @ w["dec_in_z"]), ones @ w["dec_b1"]))
    if drops is not None:
        h = tape.mul(h, tape.constant(drops[0]))
    h = tape.silu(tape.add(h @ w["dec_w2"], ones @ w["dec_b2"]))
    if drops is not None:
        h = tape.mul(h, tape.constant(drops[1]))
    return tape.add(h @ w["dec_out"], ones @ w["dec_bout"])


def _minibatch_loss(tape, w, x, values, mask, eps, beta, drops):
    """Build the CVAE loss on ``tape``: per-example l1 + beta * KL, batch-averaged."""
    b, n = x.shape
    z_dim = eps.shape[1]
    ones = tape.constant(np.ones((b, 1)))
    enc_in = tape.constant(np.concatenate([x, values, mask], axis=1))
    he = tape.silu(tape.add(enc_in @ w["enc_w1"], ones @ w["enc_b1"]))
    mu = tape.add(he @ w["enc_mu"], ones @ w["enc_bmu"])
    lv = tape.add(he @ w["enc_lv"], ones @ w["enc_blv"])
    std = tape.exp(tape.mul(lv, tape.constant(np.full((b, z_dim), 0.5))))
    z = tape.add(mu, tape.mul(std, tape.constant(eps)))

    xhat = tape_decoder(tape, w, values, mask, z, drops)

    rec = tape.mul(tape.mean(tape.abs(tape.sub(xhat, tape.constant(x)))), tape.constant(float(n)))
    kl_terms = tape.sub(tape.sub(tape.add(tape.square(mu), tape.exp(lv)), lv), tape.constant(np.ones((b, z_dim))))
    kl = tape.mul(tape.mean(kl_terms), tape.constant(0.5 * z_dim))
    loss = tape.add(rec, tape.mul(kl, tape.constant(float(beta))))
    return loss, rec, kl


def dropout_multipliers(rate, shape, stream):
    """Inverted dropout: keep with probability 1-rate, scale kept units by 1/(1-rate)."""
    keep = stream.uniform(shape) >= rate
    return keep / (1.0 - rate)


@dataclass
class TrainingRun:
    params: CVAEParams
    epoch_loss: list
    epoch_kl: list
    snapshots: list  # flat weight vectors, one per epoch in the final half
    batch_kl: list = field(default_factory=list)


def fit_cvae(cfg, data, stream, snapshot_start=None):
    """Run the CVAE training loop with plain SGD.

    ``snapshot_start`` (epoch index) enables per-epoch weight snapshots used by
    SWAG; by default snapshots cover the final half of training.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if not data.has_measurements:
        raise ValueError("training data needs measurements")
    params = init_cvae(data.n_pixels, cfg, stream.child(0))
    shuffle_s, noise_s, drop_s = stream.child(1), stream.child(2), stream.child(3)
    keys = ENCODER_KEYS + DECODER_KEYS
    w_vals = {k: params.weights[k].copy() for k in keys}
    if snapshot_start is None:
        snapshot_start = cfg.epochs // 2
    losses, kls, snaps, batch_kl = [], [], [], []
    n = len(data)
    for epoch in range(cfg.epochs):
        beta = cfg.kl_weight(epoch)
        order = shuffle_s.permutation(n)
        tot, tot_kl = 0.0, 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = idx.size
            tape = Tape()
            w = {k: tape.parameter(w_vals[k]) for k in keys}
            drops = None
            if cfg.dropout_rate > 0:
                drops = tuple(dropout_multipliers(cfg.dropout_rate, (b, cfg.hidden), drop_s) for _ in range(2))
            eps = noise_s.normal((b, cfg.latent_dim))
            loss, _, kl = _minibatch_loss(tape, w, data.pixels[idx], data.values[idx], data.masks[idx], eps, beta, drops)
            grads = backward(tape, loss)
            for k in keys:
                w_vals[k] = w_vals[k] - cfg.learning_rate * grads[w[k].id]
            tot += float(loss.value) * b
            tot_kl += float(kl.value) * b
            batch_kl.append(float(kl.value))
        losses.append(tot / n)
        kls.append(tot_kl / n)
        if epoch >= snapshot_start:
            snaps.append(np.concatenate([w_vals[k].ravel() for k in keys]))
    final = replace(params, weights=w_vals)
    return TrainingRun(final, losses, kls, snaps, batch_kl)


def train_generator(cfg, data, stream):
    return fit_cvae(cfg, data, stream).params


# --- evaluation --------------------------------------------------------------

def generate_batch(params, m, zs):
    """Evaluate ``G(m, z)`` for every row of ``zs`` (shape (T, Z)); returns (T, N)."""
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    if zs.shape[1] != params.latent_dim:
        raise ValueError(f"latent dimension {zs.shape[1]} != {params.latent_dim}")
    if m.values.size != params.n_pixels:
        raise ValueError(f"measurement length {m.values.size} != {params.n_pixels}")
    if params.variant == "analytic":
        post = params.posterior(m)
        return post.mean + zs * post.std
    t = zs.shape[0]
    return params.decode(np.broadcast_to(m.values, (t, m.values.size)),
                         np.broadcast_to(m.mask, (t, m.mask.size)), zs)


def generate(params, m, z):
    """Single sample ``G(m, z; params)`` as a flat pixel vector (raw, unclamped)."""
    return generate_batch(params, m, np.asarray(z, dtype=np.float64)[None, :])[0]


# --- persistence -------------------------------------------------------------

def params_to_blob(params):
    arrays = params.arrays()
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    sidecar = dict(params.meta(), arrays=[{"name": k, "shape": list(a.shape)} for k, a in arrays])
    return blob, sidecar


def params_from_blob(blob, sidecar):
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    arrays, pos = {}, 0
    for spec in sidecar["arrays"]:
        size = int(np.prod(spec["shape"]))
        arrays[spec["name"]] = flat[pos:pos + size].reshape(spec["shape"])
        pos += size
    if pos != flat.size:
        raise ValueError("parameter blob length does not match its sidecar")
    if sidecar["variant"] == "analytic":
        tau2, sigma2 = arrays["variances"]
        return AnalyticParams(arrays["prior_mean"], float(tau2), float(sigma2))
    if sidecar["variant"] == "cvae-mlp":
        masks = (arrays["drop1"], arrays["drop2"]) if "drop1" in arrays else None
        weights = {k: arrays[k] for k in ENCODER_KEYS + DECODER_KEYS}
        return CVAEParams(sidecar["n_pixels"], sidecar["hidden"], sidecar["latent_dim"],
                          sidecar["dropout_rate"], weights, masks, sidecar.get("config_hash", ""))
    raise ValueError(f"unknown generator variant {sidecar['variant']!r}")


def save_params(params, stem):
    stem = Path(stem)
    blob, sidecar = params_to_blob(params)
    stem.with_suffix(".bin").write_bytes(blob)
    sidecar["sha256"] = hashlib.sha256(blob).hexdigest()
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return sidecar["sha256"]


def load_params(stem):
    stem = Path(stem)
    return params_from_blob(stem.with_suffix(".bin").read_bytes(), json.loads(stem.with_suffix(".json").read_text()))


def params_hash(params):
    return hashlib.sha256(params_to_blob(params)[0]).hexdigest()
