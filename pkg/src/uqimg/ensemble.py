"""Surrogate parameter distributions: deep ensembles, MC-Dropout and SWAG-Diagonal."""

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .generators import fit_analytic, fit_cvae, load_params, params_hash, save_params, train_generator
from .numerics import RngStream

STRATEGIES = ("deep", "mc-dropout", "swag-diag")


@dataclass(frozen=True)
class Ensemble:
    members: tuple
    strategy: str
    seeds: tuple
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown ensemble strategy {self.strategy!r}")
        first = self.members[0]
        for m in self.members[1:]:
            same_arrays = {k: v.shape for k, v in m.arrays()} == {
                k: v.shape for k, v in first.arrays()}
            if m.variant != first.variant or m.n_pixels != first.n_pixels or not same_arrays:
                raise ValueError("ensemble members must share variant and shapes")

    def __len__(self):
        return len(self.members)

    @property
    def size(self):
        return len(self.members)

    @property
    def latent_dim(self):
        return self.members[0].latent_dim

    @property
    def n_pixels(self):
        return self.members[0].n_pixels

    def member_hashes(self):
        return [params_hash(m) for m in self.members]

    def digest(self):
        h = hashlib.sha256(self.strategy.encode())
        for mh in self.member_hashes():
            h.update(mh.encode())
        return h.hexdigest()

    def permuted(self, order):
        return replace(self, members=[self.members[i] for i in order], seeds=[self.seeds[i] for i in order])


# --- deep ensembles ----------------------------------------------------------

def train_deep_ensemble(cfg, data, master_seed, T2):
    """Member ``t`` (1-based) is trained from ``RngStream(master_seed, t)``."""
    if T2 < 1:
        raise ValueError("T2 must be >= 1")
    members = [train_generator(cfg, data, RngStream(master_seed, t)) for t in range(1, T2 + 1)]
    return Ensemble(members, "deep", range(1, T2 + 1), cfg.config_hash())


def train_analytic_ensemble(data, T2, master_seed, sigma2):
    """Empirical-Bayes analytic members, each fit on a bootstrap resample of ``data``.

    The resampling plays the role of the random initialization: members
    differ only through which training images they saw.
    """
    if T2 < 1:
        raise ValueError("T2 must be >= 1")
    n = len(data)
    members = []
    for t in range(1, T2 + 1):
        idx = RngStream(master_seed, t).integers(0, n, shape=n)
        members.append(fit_analytic(data.pixels[idx], sigma2))
    return Ensemble(members, "deep", range(1, T2 + 1), f"analytic-bootstrap:{n}")


# --- MC dropout --------------------------------------------------------------

def mc_dropout_ensemble(params, T2, stream):
    """Freeze ``T2`` inverted-dropout masks on a single trained network."""
    rate = params.dropout_rate
    if not rate > 0:
        raise ValueError("dropout disabled")
    if T2 < 1:
        raise ValueError("T2 must be >= 1")
    members, seeds = [], []
    for t in range(1, T2 + 1):
        s = stream.child(t)
        masks = tuple((s.uniform((1, params.hidden)) >= rate) / (1.0 - rate) for _ in range(2))
        members.append(replace(params, dropout_masks=masks))
        seeds.append(s.stream_id)
    return Ensemble(members, "mc-dropout", seeds, params.config_hash)


# --- SWAG-Diagonal -----------------------------------------------------------

@dataclass(frozen=True)
class SwagPosterior:
    mean: np.ndarray
    variance: np.ndarray
    snapshot_count: int
    template: object = None  # CVAEParams used to unflatten samples

    @property
    def std(self):
        return np.sqrt(self.variance)


def fit_swag(snapshots, template=None):
    """Per-weight mean and population variance of the collected snapshots."""
    if len(snapshots) < 2:
        raise ValueError("SWAG needs at least 2 snapshots")
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in snapshots])
    # shift by the first snapshot so identical snapshots give exactly zero
    dev = stack - stack[0]
    dbar = dev.mean(axis=0)
    mean = stack[0] + dbar
    var = ((dev - dbar) ** 2).mean(axis=0)
    return SwagPosterior(mean, var, len(snapshots), template)


def sample_swag_weights(p, T2, stream):
    return [p.mean + p.std * stream.child(t).normal(p.mean.shape) for t in range(1, T2 + 1)]


def sample_swag(p, T2, stream):
    if p.template is None:
        raise ValueError("SWAG posterior has no parameter template to unflatten samples into")
    members = [p.template.with_flat_weights(w) for w in sample_swag_weights(p, T2, stream)]
    seeds = [stream.child(t).stream_id for t in range(1, T2 + 1)]
    return Ensemble(members, "swag-diag", seeds, p.template.config_hash)


def build_ensemble(strategy, cfg, data, master_seed, T2, snapshot_policy="final-half"):
    """Dispatch used by the CLI; every strategy is deterministic in ``master_seed``."""
    if strategy == "deep":
        return train_deep_ensemble(cfg, data, master_seed, T2)
    if strategy == "mc-dropout":
        params = train_generator(cfg, data, RngStream(master_seed, 1))
        return mc_dropout_ensemble(params, T2, RngStream(master_seed, 0xD0))
    if strategy == "swag-diag":
        # at least two snapshots even for very short runs
        start = 0 if snapshot_policy == "all-epochs" else max(0, min(cfg.epochs // 2, cfg.epochs - 2))
        run = fit_cvae(cfg, data, RngStream(master_seed, 1), snapshot_start=start)
        post = fit_swag(run.snapshots, template=run.params)
        return sample_swag(post, T2, RngStream(master_seed, 0x5A))
    raise ValueError(f"unknown ensemble strategy {strategy!r}")


# --- persistence -------------------------------------------------------------

def save_ensemble(ens, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    hashes = [save_params(m, d / f"member_{i:03d}") for i, m in enumerate(ens.members)]
    manifest = {
        "strategy": ens.strategy,
        "T2": ens.size,
        "seeds": list(ens.seeds),
        "config_hash": ens.provenance,
        "members": [f"member_{i:03d}" for i in range(ens.size)],
        "member_sha256": hashes,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_ensemble(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    members = [load_params(d / name) for name in manifest["members"]]
    return Ensemble(members, manifest["strategy"], manifest["seeds"], manifest["config_hash"])
