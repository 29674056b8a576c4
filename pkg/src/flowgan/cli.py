"""Command-line runner: ``flowgan <subcommand> --config FILE``.

Every subcommand writes CSV (or, for ``plot``, SVG) into the configured
output directory and exits 0; any library error becomes a one-line
diagnostic on stderr and exit status 1.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, parse_config
from .data import FormatError
from .errors import ConfigurationError, DivergenceError
from .evaluation.ais import ais_estimate
from .evaluation.density import gmm_bandwidth_search, kde_estimate
from .evaluation.scores import inception_score, label_distribution, mode_score
from .evaluation.spectral import ConvergenceError, spectral_report
from .experiment import (
    bandwidth_grid,
    build_classifier,
    build_dataset,
    eval_points,
    gmm_sweep,
    model_from_state,
)
from .flow import log_likelihood
from .svg import line_chart
from .tensor import DomainError, NonFiniteError, ShapeError, no_record
from .training import MetricLog, evaluate_nll, nats_to_bits_per_dim, train

log = logging.getLogger("flowgan")

SUBCOMMANDS = ("train", "eval-nll", "eval-gmm", "eval-kde", "eval-ais", "spectral", "sample", "score", "plot")
_HANDLED = (
    ConfigError, CheckpointError, FormatError, ConfigurationError, DivergenceError, NonFiniteError,
    DomainError, ShapeError, ConvergenceError, ValueError, OSError, FloatingPointError, KeyError,
)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def checkpoint_path(cfg: ExperimentConfig, kind: str | None = None) -> Path:
    return Path(cfg.output_dir) / f"checkpoint_{kind or cfg.checkpoint}.fg"


def _load_model(cfg: ExperimentConfig, args, dim: int):
    path = Path(args.checkpoint) if args.checkpoint else checkpoint_path(cfg)
    model = cfg.train_config().build_model(dim)
    shapes = {f"flow/{k}": p.shape for k, p in model.parameters().items()}
    if cfg.objective != "mle":
        critic = cfg.train_config().build_critic(dim)
        shapes.update({f"critic/{k}": p.shape for k, p in critic.parameters().items()})
    state, _ = load_checkpoint(path, shapes)
    return model_from_state(cfg, dim, state)


def cmd_train(cfg: ExperimentConfig, args) -> None:
    ds = build_dataset(cfg)
    clf = build_classifier(cfg, ds)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    prior_rows = []
    if args.resume:
        resume, _ = load_checkpoint(args.resume)
        metrics = out / "metrics.csv"
        if metrics.exists():
            prior_rows = [r for r in MetricLog.read_csv(metrics).rows if r.iteration <= resume.iteration]
    res = train(cfg.train_config(), ds, clf, resume=resume, stop_at=args.stop_at)
    full = MetricLog(prior_rows + res.log.rows, res.log.diverged, res.log.message)
    full.write_csv(out / "metrics.csv")
    text = cfg.to_text()
    for kind, state in res.checkpoints.items():
        save_checkpoint(checkpoint_path(cfg, kind), state, text)
    if res.log.diverged:
        log.warning("%s", res.log.message)


def cmd_eval_nll(cfg, args) -> None:
    ds = build_dataset(cfg)
    model = _load_model(cfg, args, ds.dim)
    rows = []
    for name, x in (("train", ds.train), ("val", ds.val), ("test", ds.test)):
        nll = evaluate_nll(model, x)
        rows.append((name, nll, nats_to_bits_per_dim(nll, ds.dim, ds.scale_correction)))
    write_csv(Path(cfg.output_dir) / "nll.csv", ("split", "nll_nats", "bpd"), rows)


def cmd_eval_gmm(cfg, args) -> None:
    ds = build_dataset(cfg)
    clf = build_classifier(cfg, ds)
    rows = gmm_sweep(ds, clf, bandwidth_grid(cfg), cfg.score_samples, cfg.seed)
    write_csv(Path(cfg.output_dir) / "gmm.csv", ("sigma", "val_nll", "mode_score"), rows.tolist())


def cmd_eval_kde(cfg, args) -> None:
    ds = build_dataset(cfg)
    model = _load_model(cfg, args, ds.dim)
    samples = model.sample(cfg.kde_samples, cfg.seed)
    sigma, curve = gmm_bandwidth_search(samples, ds.val, bandwidth_grid(cfg))
    x = eval_points(cfg, ds)
    kde = -float(np.mean(kde_estimate(samples, x, sigma)))
    exact = evaluate_nll(model, x)
    out = Path(cfg.output_dir)
    write_csv(out / "kde_bandwidth.csv", ("sigma", "val_nll"), curve.tolist())
    write_csv(out / "kde.csv", ("sigma", "kde_nll_nats", "exact_nll_nats"), [(sigma, kde, exact)])


def cmd_eval_ais(cfg, args) -> None:
    ds = build_dataset(cfg)
    model = _load_model(cfg, args, ds.dim)
    x = eval_points(cfg, ds)
    res = ais_estimate(model, x, cfg.ais_config())
    se = res.bootstrap_stderr(seed=cfg.ais_seed)
    with no_record():
        exact = log_likelihood(model, x).data
    rows = [(i, res.log_px[i], se[i], exact[i], float(res.acceptance[i].mean())) for i in range(len(x))]
    write_csv(Path(cfg.output_dir) / "ais.csv",
              ("point", "log_px", "stderr", "exact_log_px", "acceptance"), rows)
    for w in res.warnings[:5]:
        log.warning("AIS: %s", w)


def cmd_spectral(cfg, args) -> None:
    ds = build_dataset(cfg)
    model = _load_model(cfg, args, ds.dim)
    rep = spectral_report(model, cfg.n_z, cfg.spectral_seed)
    rows = list(zip(rep.log_sv.tolist(), rep.cdf.tolist()))
    rows.append(("avg_logdet", rep.avg_logdet))
    write_csv(Path(cfg.output_dir) / "spectral.csv", ("log_sv", "cdf"), rows)


def cmd_sample(cfg, args) -> None:
    ds = build_dataset(cfg)
    model = _load_model(cfg, args, ds.dim)
    x = model.sample(cfg.n_generate, cfg.seed)
    write_csv(Path(cfg.output_dir) / "samples.csv", [f"x{j}" for j in range(x.shape[1])], x.tolist())


def cmd_score(cfg, args) -> None:
    ds = build_dataset(cfg)
    clf = build_classifier(cfg, ds)
    if clf is None:
        raise ConfigurationError("scoring needs a labeled dataset and classifier=true")
    model = _load_model(cfg, args, ds.dim)
    probs = clf.predict_proba(model.sample(cfg.score_samples, cfg.seed))
    p_star = label_distribution(ds.train_labels, clf.n_classes)
    write_csv(Path(cfg.output_dir) / "scores.csv", ("inception_score", "mode_score"),
              [(inception_score(probs), mode_score(probs, train_label_dist=p_star))])


def _labelled_inputs(items) -> list[tuple[str, Path]]:
    out = []
    for item in items:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        out.append((label, Path(path)))
    return out


def _columns(path: Path, wanted) -> list[np.ndarray]:
    header, rows = read_csv(path)
    missing = [c for c in wanted if c not in header]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    rows = [r for r in rows if _is_number(r[0])]
    return [np.array([float(r[header.index(c)]) for r in rows]) for c in wanted]


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def cmd_plot(cfg, args) -> None:
    inputs = _labelled_inputs(args.inputs)
    if not inputs:
        raise ValueError("plot needs at least one --input")
    if args.kind == "nll":
        series = {}
        for label, p in inputs:
            it, val = _columns(p, ("iteration", "val_nll_nats"))
            series[label] = (it, val)
        svg = line_chart(series, "Validation NLL during training", "generator iteration", "NLL (nats)", log_y=True)
    elif args.kind == "gmm":
        series = {}
        for label, p in inputs:
            s, nll, ms = _columns(p, ("sigma", "val_nll", "mode_score"))
            series[f"{label} val NLL"] = (s, nll)
            series[f"{label} MODE"] = (s, ms)
        svg = line_chart(series, "GMM bandwidth sweep", "sigma", "value")
    else:
        series = {}
        for label, p in inputs:
            lsv, cdf = _columns(p, ("log_sv", "cdf"))
            series[label] = (lsv, cdf)
        svg = line_chart(series, "Jacobian singular values", "log singular value", "CDF", step=True)
    out = Path(args.output) if args.output else Path(cfg.output_dir if cfg else ".") / f"{args.kind}.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)


COMMANDS = {
    "train": cmd_train,
    "eval-nll": cmd_eval_nll,
    "eval-gmm": cmd_eval_gmm,
    "eval-kde": cmd_eval_kde,
    "eval-ais": cmd_eval_ais,
    "spectral": cmd_spectral,
    "sample": cmd_sample,
    "score": cmd_score,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowgan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "plot", help="key=value experiment config")
        p.add_argument("--out", help="override output_dir")
        if name not in ("train", "eval-gmm", "plot"):
            p.add_argument("--checkpoint", help="checkpoint file (default: from config)")
        if name == "train":
            p.add_argument("--resume", help="continue from this checkpoint")
            p.add_argument("--stop-at", type=int, default=None, help="stop after this iteration")
        if name == "plot":
            p.add_argument("--kind", choices=("nll", "gmm", "spectral"), required=True)
            p.add_argument("--input", dest="inputs", action="append", default=[],
                           help="CSV to plot, optionally as label=path; repeatable")
            p.add_argument("--output", help="SVG path (default: <output_dir>/<kind>.svg)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = parse_config(args.config) if args.config else None
        if cfg is not None and args.out:
            cfg = _override_output(cfg, args.out)
        COMMANDS[args.command](cfg, args)
    except _HANDLED as err:
        msg = str(err).splitlines()[0] if str(err) else type(err).__name__
        print(f"flowgan {args.command}: {type(err).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def _override_output(cfg: ExperimentConfig, out: str) -> ExperimentConfig:
    return replace(cfg, output_dir=str(Path(out).resolve()))


if __name__ == "__main__":
    sys.exit(main())
