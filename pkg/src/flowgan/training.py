"""Learning objectives and the deterministic, resumable training loop."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .adversarial import (
    Critic,
    jsd_losses,
    wgan_critic_loss,
    wgan_generator_loss,
)
from .errors import DivergenceError
from .flow import FlowModel, build_flow, generate, log_likelihood
from .optim import AdamState, adam_step
from .rng import derive_seed, stream
from .tensor import NonFiniteError, Tensor

__all__ = [
    "TrainConfig",
    "MetricLog",
    "MetricRow",
    "TrainState",
    "TrainResult",
    "mle_loss",
    "hybrid_loss",
    "adam_step",
    "AdamState",
    "train",
    "dequantize_and_scale",
    "nats_to_bits_per_dim",
    "evaluate_nll",
]

log = logging.getLogger(__name__)

OBJECTIVES = ("mle", "adv", "hybrid")
CSV_HEADER = (
    "iteration",
    "train_nll_nats",
    "val_nll_nats",
    "train_bpd",
    "val_bpd",
    "adv_loss",
    "mode_score",
    "inception_score",
    "wallclock_s",
)
LOG256 = math.log(256.0)

# (lr, beta1, beta2) per objective family
ADAM_DEFAULTS = {"mle": (1e-3, 0.9, 0.999), "adv": (1e-4, 0.5, 0.9)}


@dataclass
class TrainConfig:
    objective: str = "mle"
    lam: float = 0.0
    lr: float | None = None
    beta1: float | None = None
    beta2: float | None = None
    adam_eps: float = 1e-8
    batch_size: int = 256
    n_iters: int = 2000
    n_critic: int = 5
    penalty_coeff: float = 10.0
    divergence: str = "wgan"
    seed: int = 0
    eval_every: int = 500
    train_subsample: int = 1000
    score_samples: int = 2000
    flow_layers: int = 6
    flow_kind: str = "affine"
    flow_width: int = 64
    prior: str = "gaussian"
    log_scale_clamp: float = 5.0
    critic_width: int = 64
    critic_depth: int = 2
    record_wallclock: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        for name in ("batch_size", "n_critic", "eval_every", "flow_width", "critic_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_iters < 0 or self.flow_layers < 0 or self.critic_depth < 1:
            raise ValueError("n_iters and flow_layers must be >= 0, critic_depth >= 1")

    @property
    def adversarial(self) -> bool:
        return self.objective in ("adv", "hybrid")

    def adam_hparams(self) -> tuple[float, float, float, float]:
        lr, b1, b2 = ADAM_DEFAULTS["mle" if self.objective == "mle" else "adv"]
        return (
            lr if self.lr is None else self.lr,
            b1 if self.beta1 is None else self.beta1,
            b2 if self.beta2 is None else self.beta2,
            self.adam_eps,
        )

    def build_model(self, dim: int) -> FlowModel:
        return build_flow(
            dim,
            self.flow_layers,
            self.flow_kind,
            (self.flow_width, self.flow_width),
            prior_kind=self.prior,
            seed=derive_seed(self.seed, "flow_init"),
            log_scale_clamp=self.log_scale_clamp,
        )

    def build_critic(self, dim: int) -> Critic:
        return Critic(
            dim,
            (self.critic_width,) * self.critic_depth,
            divergence=self.divergence,
            seed=derive_seed(self.seed, "critic_init"),
        )


@dataclass
class MetricRow:
    iteration: int
    train_nll_nats: float
    val_nll_nats: float
    train_bpd: float
    val_bpd: float
    adv_loss: float
    mode_score: float
    inception_score: float
    wallclock_s: float


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class MetricLog:
    rows: list[MetricRow] = field(default_factory=list)
    diverged: bool = False
    message: str = ""

    def append(self, row: MetricRow) -> None:
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ValueError("iterations must be strictly increasing")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, f.name)) for f in fields(MetricRow)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "MetricLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected MetricLog header {header}")
            rows = [MetricRow(int(r[0]), *map(float, r[1:])) for r in reader]
        return cls(rows)


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    iteration: int
    flow_params: dict[str, np.ndarray]
    critic_params: dict[str, np.ndarray]
    optim: dict[str, AdamState]
    rng_states: dict[str, dict]


@dataclass
class TrainResult:
    model: FlowModel
    critic: Critic | None
    checkpoints: dict[str, TrainState]
    log: MetricLog


def dequantize_and_scale(raw, seed) -> np.ndarray:
    """(pixel + Uniform[0, 1)) / 256 for integer pixels in 0..255."""
    raw = np.asarray(raw)
    if not np.issubdtype(raw.dtype, np.integer):
        if not np.all(raw == np.floor(raw)):
            raise ValueError("dequantization expects integer pixel values")
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise ValueError("pixel values must lie in 0..255")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return (raw.astype(np.float64) + rng.random(raw.shape)) / 256.0


def nats_to_bits_per_dim(nll_nats: float, d: int, scale_correction: float = 0.0) -> float:
    if d < 1:
        raise ValueError("d must be >= 1")
    return (nll_nats + scale_correction) / (d * math.log(2.0))


def mle_loss(model: FlowModel, x_batch) -> Tensor:
    """Negative mean exact log-likelihood of the batch."""
    x = T._wrap(x_batch)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("x_batch must be a nonempty [n, d] batch")
    return T.neg(T.mean(log_likelihood(model, x)))


def _adversarial_generator_loss(critic: Critic, x_fake: Tensor) -> Tensor:
    if critic.divergence == "jsd":
        dummy = x_fake.data[:1]
        return jsd_losses(critic, dummy, x_fake)[1]
    return wgan_generator_loss(critic, x_fake)


def _critic_loss(critic: Critic, x_real, x_fake, penalty_coeff, rng) -> Tensor:
    if critic.divergence == "jsd":
        return jsd_losses(critic, x_real, x_fake)[0]
    return wgan_critic_loss(critic, x_real, x_fake, penalty_coeff, rng)[0]


def _generator_objective(model, critic, x_real, z, objective: str, lam: float) -> Tensor:
    if objective == "mle":
        return mle_loss(model, x_real)
    x_fake, _ = generate(model, z)
    loss = _adversarial_generator_loss(critic, x_fake)
    if objective == "hybrid" and lam != 0.0:
        loss = T.add(loss, T.mul(lam, mle_loss(model, x_real)))
    return loss


def hybrid_loss(
    model: FlowModel,
    critic: Critic,
    x_real,
    z_batch,
    lam: float,
    penalty_coeff: float = 10.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """(generator_scalar, critic_scalar).

    generator_scalar = adversarial generator loss + lam * mle_loss(x_real);
    lam = 0 gives the adversarial loss itself, bit for bit.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    z = T._wrap(z_batch)
    gen = _generator_objective(model, critic, x_real, z, "hybrid", lam)
    with T.no_record():
        x_fake = model.generate_array(z.data)
    crit = _critic_loss(critic, T._wrap(x_real).data, x_fake, penalty_coeff, rng or np.random.default_rng())
    return gen, crit


def evaluate_nll(model: FlowModel, x: np.ndarray, chunk: int = 4096) -> float:
    """Mean exact NLL in nats; inf if the model assigns zero density."""
    parts = []
    with T.no_record():
        for start in range(0, len(x), chunk):
            try:
                parts.append(log_likelihood(model, x[start:start + chunk]).data)
            except (DivergenceError, NonFiniteError):
                return math.inf
    ll = np.concatenate(parts)
    return float(-np.mean(ll))


_RNG_LABELS = ("data", "prior", "interp", "eval")


def _snapshot(it, model, critic, optim, rngs) -> TrainState:
    return TrainState(
        iteration=it,
        flow_params={k: p.data.copy() for k, p in model.parameters().items()},
        critic_params={} if critic is None else {k: p.data.copy() for k, p in critic.parameters().items()},
        optim={k: s.copy() for k, s in optim.items()},
        rng_states={k: copy.deepcopy(g.bit_generator.state) for k, g in rngs.items()},
    )


def restore_params(params: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    if set(params) != set(values):
        raise ValueError("parameter names differ between model and checkpoint")
    for name, p in params.items():
        v = values[name]
        if v.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {v.shape} vs {p.shape}")
        p.data = np.array(v, dtype=np.float64)


class _Evaluator:
    def __init__(self, config: TrainConfig, dataset, classifier):
        self.config = config
        self.dataset = dataset
        self.classifier = classifier
        rng = stream(config.seed, "subsample")
        n = len(dataset.train)
        k = min(config.train_subsample, n)
        self.train_idx = np.sort(rng.choice(n, size=k, replace=False))
        self.p_star = None
        if classifier is not None and dataset.train_labels is not None:
            from .evaluation.scores import label_distribution

            self.p_star = label_distribution(dataset.train_labels, classifier.n_classes)

    def row(self, it, model, adv_loss, eval_rng, wallclock) -> MetricRow:
        from .evaluation.scores import inception_score, mode_score

        ds = self.dataset
        d = ds.dim
        corr = ds.scale_correction
        tr = evaluate_nll(model, ds.train[self.train_idx])
        va = evaluate_nll(model, ds.val)
        ms = is_ = math.nan
        if self.classifier is not None:
            try:
                samples = model.sample(self.config.score_samples, eval_rng)
                probs = self.classifier.predict_proba(samples)
                is_ = inception_score(probs)
                if self.p_star is not None:
                    ms = mode_score(probs, train_label_dist=self.p_star)
            except (DivergenceError, NonFiniteError):
                pass
        return MetricRow(
            it, tr, va,
            nats_to_bits_per_dim(tr, d, corr), nats_to_bits_per_dim(va, d, corr),
            adv_loss, ms, is_, wallclock,
        )


def train(
    config: TrainConfig,
    dataset,
    classifier=None,
    resume: TrainState | None = None,
    stop_at: int | None = None,
) -> TrainResult:
    """Run the configured objective and log metrics every ``eval_every`` steps.

    One iteration is one generator update; adversarial objectives precede it
    with ``n_critic`` critic updates. A non-finite loss or gradient halts the
    run, restores the last evaluated parameters and marks the log diverged.
    Checkpoints: ``last`` (latest evaluation), ``best_mode``, ``best_val``.
    """
    x_train = dataset.train
    dim = dataset.dim
    model = config.build_model(dim)
    critic = config.build_critic(dim) if config.adversarial else None
    gen_params = list(model.parameters().values())
    crit_params = [] if critic is None else list(critic.parameters().values())
    optim = {"gen": AdamState.zeros(gen_params)}
    if critic is not None:
        optim["critic"] = AdamState.zeros(crit_params)
    rngs = {label: stream(config.seed, label) for label in _RNG_LABELS}
    lr, b1, b2, eps = config.adam_hparams()

    start = 0
    if resume is not None:
        restore_params(model.parameters(), resume.flow_params)
        if critic is not None:
            restore_params(critic.parameters(), resume.critic_params)
        optim = {k: s.copy() for k, s in resume.optim.items()}
        for k, st in resume.rng_states.items():
            rngs[k].bit_generator.state = copy.deepcopy(st)
        start = resume.iteration

    evaluator = _Evaluator(config, dataset, classifier)
    metric_log = MetricLog()
    checkpoints: dict[str, TrainState] = {}
    best_mode = -math.inf
    best_val = math.inf
    t0 = time.perf_counter()
    last_adv = math.nan
    end = config.n_iters if stop_at is None else min(stop_at, config.n_iters)
    n = len(x_train)
    bsz = config.batch_size
    prior = model.prior

    def record(it):
        nonlocal best_mode, best_val
        wall = time.perf_counter() - t0 if config.record_wallclock else math.nan
        row = evaluator.row(it, model, last_adv, rngs["eval"], wall)
        metric_log.append(row)
        snap = _snapshot(it, model, critic, optim, rngs)
        checkpoints["last"] = snap
        if it == 0:
            # the untrained model is only a fallback for best_* selection
            checkpoints.setdefault("best_mode", snap)
            checkpoints.setdefault("best_val", snap)
        else:
            if row.mode_score > best_mode:
                best_mode = row.mode_score
                checkpoints["best_mode"] = snap
            if row.val_nll_nats < best_val:
                best_val = row.val_nll_nats
                checkpoints["best_val"] = snap
        if not math.isfinite(row.val_nll_nats):
            log.warning("iteration %d: validation NLL is %s", it, row.val_nll_nats)

    if resume is None:
        record(0)

    it = start
    try:
        while it < end:
            if critic is not None:
                for _ in range(config.n_critic):
                    xr = x_train[rngs["data"].integers(0, n, bsz)]
                    xf = model.generate_array(prior.sample(bsz, rngs["prior"]))
                    with T.Tape() as tape:
                        closs = _critic_loss(critic, xr, xf, config.penalty_coeff, rngs["interp"])
                    grads = tape.gradient(closs, crit_params)
                    adam_step(crit_params, grads, optim["critic"], lr, b1, b2, eps)
                    last_adv = closs.item()
            xr = x_train[rngs["data"].integers(0, n, bsz)]
            z = prior.sample(bsz, rngs["prior"]) if critic is not None else None
            with T.Tape() as tape:
                loss = _generator_objective(model, critic, xr, None if z is None else Tensor(z),
                                            config.objective, config.lam)
            grads = tape.gradient(loss, gen_params)
            adam_step(gen_params, grads, optim["gen"], lr, b1, b2, eps)
            it += 1
            if it % config.eval_every == 0 or it == config.n_iters:
                record(it)
    except (DivergenceError, NonFiniteError, T.DomainError) as err:
        metric_log.diverged = True
        metric_log.message = f"diverged at iteration {it + 1}: {err}"
        log.warning(metric_log.message)
        last = checkpoints.get("last")
        if last is not None:
            restore_params(model.parameters(), last.flow_params)
            if critic is not None:
                restore_params(critic.parameters(), last.critic_params)

    if it == end and (not metric_log.rows or metric_log.rows[-1].iteration != it) and not metric_log.diverged:
        # a stop_at between evaluations still leaves a resumable state
        checkpoints["last"] = _snapshot(it, model, critic, optim, rngs)
    return TrainResult(model, critic, checkpoints, metric_log)
