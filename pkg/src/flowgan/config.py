"""Flat ``key=value`` experiment configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Unknown keys, malformed lines and out-of-range values raise
:class:`ConfigError` carrying the offending line number. Relative paths are
resolved against the config file's directory at parse time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .evaluation.ais import AisConfig
from .training import OBJECTIVES, TrainConfig

DATASETS = ("ring8", "grid25", "two_moons", "idx")
CHECKPOINT_KINDS = ("last", "best_mode", "best_val")
# config keys that differ from the attribute name
_KEY_ALIASES = {"lambda": "lam"}
_PATH_FIELDS = ("idx_images", "idx_labels", "idx_test_images", "idx_test_labels", "output_dir")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())


@dataclass(frozen=True)
class ExperimentConfig:
    # training
    objective: str = "mle"
    lam: float = 0.0
    lr: float | None = None
    beta1: float | None = None
    beta2: float | None = None
    adam_eps: float = 1e-8
    batch_size: int = 128
    n_iters: int = 2000
    n_critic: int = 5
    penalty_coeff: float = 10.0
    divergence: str = "wgan"
    seed: int = 0
    eval_every: int = 500
    train_subsample: int = 1000
    score_samples: int = 2000
    record_wallclock: bool = False
    # architecture
    flow_layers: int = 6
    flow_kind: str = "affine"
    flow_width: int = 32
    prior: str = "gaussian"
    log_scale_clamp: float = 5.0
    critic_width: int = 32
    critic_depth: int = 2
    # data
    dataset: str = "ring8"
    n_samples: int = 8000
    data_seed: int = 1
    idx_images: str = ""
    idx_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    pool14: bool = False
    # evaluation
    classifier: bool = True
    classifier_seed: int = 0
    checkpoint: str = "last"
    eval_split: str = "test"
    eval_points: int = 0
    n_bandwidths: int = 40
    bandwidth_low: float = 0.005
    kde_samples: int = 10000
    n_z: int = 64
    spectral_seed: int = 0
    ais_chains: int = 64
    ais_temperatures: int = 1000
    ais_schedule: str = "sigmoid"
    ais_sigma_obs: float = 0.1
    ais_step: float = 0.05
    ais_sweeps: int = 2
    ais_seed: int = 0
    n_generate: int = 1000
    # output
    output_dir: str = "out"

    def __post_init__(self):
        _validate(self)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.as_dict().items() if k in names})

    def ais_config(self) -> AisConfig:
        return AisConfig(
            n_chains=self.ais_chains,
            n_temperatures=self.ais_temperatures,
            schedule=self.ais_schedule,
            sigma_obs=self.ais_sigma_obs,
            step_size=self.ais_step,
            n_sweeps=self.ais_sweeps,
            seed=self.ais_seed,
        )

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        """Canonical ``key=value`` form, one line per key in schema order."""
        inverse = {v: k for k, v in _KEY_ALIASES.items()}
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                s = "none"
            elif isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, float):
                s = repr(v)
            else:
                s = str(v)
            lines.append(f"{inverse.get(f.name, f.name)}={s}")
        return "\n".join(lines) + "\n"


_CHOICES = {
    "objective": OBJECTIVES,
    "divergence": ("wgan", "jsd"),
    "flow_kind": ("affine", "additive"),
    "prior": ("gaussian", "logistic"),
    "dataset": DATASETS,
    "checkpoint": CHECKPOINT_KINDS,
    "eval_split": ("val", "test"),
    "ais_schedule": ("sigmoid", "linear"),
}
_POSITIVE = {
    "batch_size", "n_critic", "eval_every", "train_subsample", "score_samples",
    "flow_width", "critic_width", "critic_depth", "n_samples", "n_bandwidths", "kde_samples",
    "n_z", "ais_chains", "ais_temperatures", "n_generate", "adam_eps", "log_scale_clamp",
    "ais_sigma_obs", "ais_step", "bandwidth_low",
}
_NONNEGATIVE = {"lam", "n_iters", "penalty_coeff", "flow_layers", "eval_points", "ais_sweeps"}


def _validate(cfg: ExperimentConfig) -> None:
    for name, allowed in _CHOICES.items():
        if getattr(cfg, name) not in allowed:
            raise ConfigError(f"{_key(name)} must be one of {', '.join(allowed)}")
    for name in _POSITIVE & {f.name for f in fields(cfg)}:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{_key(name)} must be > 0")
    for name in _NONNEGATIVE:
        if not getattr(cfg, name) >= 0:
            raise ConfigError(f"{_key(name)} must be >= 0")
    if cfg.lr is not None and not cfg.lr > 0:
        raise ConfigError("lr must be > 0")
    for name in ("beta1", "beta2"):
        v = getattr(cfg, name)
        if v is not None and not 0.0 <= v < 1.0:
            raise ConfigError(f"{name} must lie in [0, 1)")
    if not cfg.bandwidth_low < 1.0:
        raise ConfigError("bandwidth_low must be < 1")
    if cfg.dataset == "idx" and not cfg.idx_images:
        raise ConfigError("dataset=idx needs idx_images")


def _key(name: str) -> str:
    return {v: k for k, v in _KEY_ALIASES.items()}.get(name, name)


def _convert(raw: str, annotation: str, key: str):
    optional = "None" in annotation
    if optional and raw.lower() == "none":
        return None
    if annotation.startswith("bool"):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{key} expects true/false, got {raw!r}")
    if annotation.startswith("int"):
        return int(raw)
    if annotation.startswith("float"):
        v = float(raw)
        if math.isnan(v):
            raise ValueError(f"{key} must not be nan")
        return v
    return raw


def parse_config_text(text: str, base_dir=None, source=None) -> ExperimentConfig:
    schema = {f.name: f for f in fields(ExperimentConfig)}
    values: dict = {}
    where: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"malformed line {body!r} (expected key=value)", lineno, source)
        key, raw = (s.strip() for s in body.split("=", 1))
        name = _KEY_ALIASES.get(key, key)
        if name not in schema or key in _KEY_ALIASES.values():
            raise ConfigError(f"unknown key {key!r}", lineno, source)
        if name in values:
            raise ConfigError(f"duplicate key {key!r}", lineno, source)
        try:
            values[name] = _convert(raw, str(schema[name].type), key)
        except ValueError as err:
            raise ConfigError(f"bad value for {key}: {err}", lineno, source) from None
        where[name] = lineno
    if base_dir is not None:
        for name in _PATH_FIELDS:
            value = values.get(name, schema[name].default)
            if value:
                values[name] = str((Path(base_dir) / value).resolve())
    try:
        return ExperimentConfig(**values)
    except ConfigError as err:
        # attach the line that set the offending key, when there is one
        msg = str(err)
        for name, lineno in where.items():
            if msg.startswith(_key(name) + " "):
                raise ConfigError(msg, lineno, source) from None
        raise ConfigError(msg, None, source) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err.strerror}", None, path) from None
    return parse_config_text(text, base_dir=path.parent, source=path)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
