"""Experiment configuration: a sectioned ``key = value`` file with a fixed key set."""

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .ensemble import STRATEGIES
from .generators import TrainingConfig
from .uq import DENSE_MAX_PIXELS, InferenceConfig


class ConfigError(ValueError):
    pass


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    return tuple(float(t) for t in text.split(",") if t.strip())


# section -> key -> (parser, default). Keys are case-insensitive.
SCHEMA = {
    "data": {
        "source": (str, "shapes"),
        "count": (int, 512),
        "height": (int, 16),
        "width": (int, 16),
        "mask-fraction": (float, 0.1),
        "noise-sigma": (float, 0.05),
        "seed": (int, 0),
        "test-count": (int, 64),
        "pool-count": (int, 200),
        "fractions": (_floats, (0.125, 0.25, 0.5, 1.0)),
    },
    "train": {
        "generator": (str, "cvae-mlp"),
        "epochs": (int, 20),
        "batch-size": (int, 32),
        "learning-rate": (float, 2e-3),
        "warmup-epochs": (int, 2),
        "hidden": (int, 64),
        "latent-dim": (int, 16),
        "seed": (int, 0),
    },
    "ensemble": {
        "strategy": (str, "deep"),
        "t2": (int, 5),
        "master-seed": (int, 0),
        "swag-snapshot-policy": (str, "final-half"),
        "dropout-rate": (float, 0.0),
    },
    "infer": {
        "t1": (int, 128),
        "eps2": (float, 1e-5),
        "seed": (int, 0),
        "dense-covariance": (_bool, False),
    },
    "conformal": {
        "alpha-start": (float, 0.01),
        "alpha-stop": (float, 0.99),
        "alpha-count": (int, 100),
        "split-count": (int, 100),
        "n-cal": (int, 100),
        "seed": (int, 0),
        "reference-count": (int, 100),
    },
    "outputs": {
        "directory": (str, "out"),
    },
}

GENERATORS = ("cvae-mlp", "analytic")
SNAPSHOT_POLICIES = ("final-half", "all-epochs")


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # section -> key -> parsed value
    base_dir: Path

    def __getitem__(self, section):
        return self.values[section]

    @property
    def output_dir(self):
        return (self.base_dir / self.values["outputs"]["directory"]).resolve()

    @property
    def source_path(self):
        src = self.values["data"]["source"]
        return None if src == "shapes" else (self.base_dir / src).resolve()

    def training_config(self):
        t, e = self.values["train"], self.values["ensemble"]
        return TrainingConfig(
            epochs=t["epochs"], batch_size=t["batch-size"], learning_rate=t["learning-rate"],
            warmup_epochs=t["warmup-epochs"], hidden=t["hidden"], latent_dim=t["latent-dim"],
            seed=t["seed"], dropout_rate=e["dropout-rate"],
        )

    def inference_config(self):
        i = self.values["infer"]
        return InferenceConfig(T1=i["t1"], eps2=i["eps2"], seed=i["seed"], dense_covariance=i["dense-covariance"])

    def canonical(self):
        """Everything except the output location, as sorted JSON."""
        body = {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in kv.items()}
                for s, kv in self.values.items() if s != "outputs"}
        return json.dumps(body, sort_keys=True)

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def parse_config(text, base_dir="."):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
    for section, keys in SCHEMA.items():
        given = parser[section] if parser.has_section(section) else {}
        for key in given:
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
        out = {}
        for key, (conv, default) in keys.items():
            if key in given:
                try:
                    out[key] = conv(given[key])
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
            else:
                out[key] = default
        values[section] = out
    cfg = ExperimentConfig(values, Path(base_dir))
    _validate(cfg)
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)


def _validate(cfg):
    d, e, c = cfg["data"], cfg["ensemble"], cfg["conformal"]
    checks = [
        (d["count"] >= 1 and d["test-count"] >= 1 and d["pool-count"] >= 0, "data counts must be positive"),
        (d["height"] >= 1 and d["width"] >= 1, "image sides must be positive"),
        (0.0 < d["mask-fraction"] <= 1.0, "mask-fraction must lie in (0, 1]"),
        (d["noise-sigma"] >= 0.0, "noise-sigma must be >= 0"),
        (d["fractions"] and all(0 < f <= 1 for f in d["fractions"]), "fractions must lie in (0, 1]"),
        (cfg["train"]["generator"] in GENERATORS, f"generator must be one of {GENERATORS}"),
        (e["strategy"] in STRATEGIES, f"strategy must be one of {STRATEGIES}"),
        (e["t2"] >= 1, "T2 must be >= 1"),
        (e["swag-snapshot-policy"] in SNAPSHOT_POLICIES, f"swag-snapshot-policy must be one of {SNAPSHOT_POLICIES}"),
        (0.0 < c["alpha-start"] <= c["alpha-stop"] < 1.0, "alpha grid must lie in (0, 1)"),
        (c["alpha-count"] >= 1 and c["split-count"] >= 1 and c["n-cal"] >= 1, "conformal counts must be positive"),
        (c["reference-count"] >= 1, "reference-count must be positive"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    if cfg["train"]["generator"] == "analytic" and e["strategy"] != "deep":
        raise ConfigError("the analytic generator only supports the deep (bootstrap) strategy")
    if e["strategy"] == "mc-dropout" and not e["dropout-rate"] > 0:
        raise ConfigError("mc-dropout needs dropout-rate > 0")
    try:
        cfg.training_config()
        inf = cfg.inference_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if inf.dense_covariance and d["height"] * d["width"] > DENSE_MAX_PIXELS:
        raise ConfigError(f"dense-covariance needs at most {DENSE_MAX_PIXELS} pixels")
