"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The ring8 comparison runs (10k generator steps for MLE, ADV and HYBRID) are
trained once per session and shared by criteria 4, 5, 6 and 8.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import norm

from flowgan import tensor as T
from flowgan.adversarial import Critic, jsd_losses, wgan_critic_loss, wgan_generator_loss
from flowgan.config import ExperimentConfig
from flowgan.evaluation.ais import AisConfig, ais_estimate
from flowgan.evaluation.density import gmm_bandwidth_search, kde_estimate
from flowgan.evaluation.scores import inception_score, label_distribution, mode_score
from flowgan.evaluation.spectral import spectral_report
from flowgan.experiment import bandwidth_grid, build_classifier, build_dataset, gmm_sweep, model_from_state
from flowgan.flow import build_flow, generate, invert, log_likelihood
from flowgan.training import evaluate_nll, hybrid_loss, mle_loss, train

RUNS = {"mle": 0.0, "adv": 0.0, "hybrid": 1.0}


def ring8_config(objective: str) -> ExperimentConfig:
    return ExperimentConfig(objective=objective, lam=RUNS[objective], n_iters=10_000, eval_every=500,
                            dataset="ring8", n_samples=8000, data_seed=1, classifier_seed=0, seed=0)


@pytest.fixture(scope="session")
def ring8_runs():
    cfg = ring8_config("mle")
    ds = build_dataset(cfg)
    clf = build_classifier(cfg, ds)
    runs, seconds = {}, {}
    for objective in RUNS:
        c = ring8_config(objective)
        t0 = time.perf_counter()
        runs[objective] = (c, train(c.train_config(), ds, clf))
        seconds[objective] = time.perf_counter() - t0
    return ds, clf, runs, seconds


def random_flow(dim: int, seed: int):
    model = build_flow(dim, 4, "affine", (8, 8), seed=seed)
    rng = np.random.default_rng(seed)
    for p in model.parameters().values():
        p.data = p.data + 0.3 * rng.normal(size=p.shape)
    return model


def random_flows():
    return [random_flow(2 + i % 3, 100 + i) for i in range(20)]


def numeric_jacobian(fn, x, step=1e-6):
    d = len(x)
    jac = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        jac[:, j] = (fn(x + e) - fn(x - e)) / (2 * step)
    return jac


def test_criterion_01_exact_likelihood(report):
    t0 = time.perf_counter()
    worst = 0.0
    for i, model in enumerate(random_flows()):
        d = model.dim
        x = np.random.default_rng(i).normal(size=(5, d))
        ll = log_likelihood(model, x).data
        for k in range(len(x)):
            z = invert(model, x[k:k + 1])[0].data
            jac = numeric_jacobian(lambda v: invert(model, v[None, :])[0].data[0], x[k])
            oracle = math.exp(model.prior.logpdf_array(z)[0]) * abs(np.linalg.det(jac))
            worst = max(worst, abs(math.exp(ll[k]) - oracle) / oracle)
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 60
    report(1, ok, f"max relative error {worst:.2e} (< 1e-4) over 20 models, {secs:.1f}s (< 60s)")
    assert ok


def test_criterion_02_invertibility(report):
    worst = 0.0
    for i, model in enumerate(random_flows()):
        z = np.random.default_rng(i).normal(size=(1000, model.dim))
        x, _ = generate(model, z)
        back, _ = invert(model, x.data)
        worst = max(worst, float(np.max(np.abs(back.data - z))))
    ok = worst < 1e-6
    report(2, ok, f"max round-trip error {worst:.2e} (< 1e-6) over 20 models x 1000 points")
    assert ok


def _fd_relative_error(params, loss_fn) -> float:
    with T.Tape() as tape:
        loss = loss_fn()
    g = np.concatenate([t.data.ravel() for t in tape.gradient(loss, params)])
    v0 = np.concatenate([p.data.ravel() for p in params])

    def assign(v):
        off = 0
        for p in params:
            p.data = v[off:off + p.data.size].reshape(p.shape).copy()
            off += p.data.size

    def f(v):
        assign(v)
        with T.Tape():
            return loss_fn().item()

    fd = T.finite_diff_gradient(f, v0)
    assign(v0)
    # entries near zero are judged against the gradient scale
    return float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3 * np.max(np.abs(fd)))))


def test_criterion_03_gradient_suite(report):
    t0 = time.perf_counter()
    model = build_flow(2, 2, "affine", (6,), seed=7)
    rng = np.random.default_rng(7)
    for p in model.parameters().values():
        p.data = p.data + 0.3 * rng.normal(size=p.shape)
    wcritic = Critic(2, hidden=(8, 8), seed=7)
    jcritic = Critic(2, hidden=(8, 8), divergence="jsd", seed=8)
    x = rng.normal(size=(12, 2))
    z = rng.normal(size=(12, 2))
    x_hat = rng.normal(size=(12, 2))
    fake = model.generate_array(z)
    flow_params = list(model.parameters().values())
    n_flow = sum(p.data.size for p in flow_params)
    n_critic = wcritic.n_params

    def gen_fake():
        return generate(model, z)[0]

    cases = {
        "mle": (flow_params, lambda: mle_loss(model, x)),
        "wgan critic + penalty": (list(wcritic.parameters().values()),
                                  lambda: wgan_critic_loss(wcritic, x, fake, 10.0, x_hat=x_hat)[0]),
        "wgan generator": (flow_params, lambda: wgan_generator_loss(wcritic, gen_fake())),
        "jsd critic": (list(jcritic.parameters().values()), lambda: jsd_losses(jcritic, x, fake)[0]),
        "jsd generator": (flow_params, lambda: jsd_losses(jcritic, x, gen_fake())[1]),
        "hybrid": (flow_params, lambda: hybrid_loss(model, wcritic, x, z, 1.0)[0]),
    }
    errors = {name: _fd_relative_error(params, fn) for name, (params, fn) in cases.items()}
    secs = time.perf_counter() - t0
    worst = max(errors.values())
    ok = worst < 1e-4 and secs < 120 and n_flow <= 500 and n_critic <= 500
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    report(3, ok, f"relative errors: {detail} (< 1e-4); params flow {n_flow}, critic {n_critic}; {secs:.1f}s")
    assert ok


def test_criterion_04_nll_ordering(report, ring8_runs):
    _, _, runs, seconds = ring8_runs
    final = {k: res.log.rows[-1].val_nll_nats for k, (_, res) in runs.items()}
    adv_train = runs["adv"][1].log.column("train_nll_nats")
    total = sum(seconds.values())
    ok = (final["mle"] < final["hybrid"] < final["adv"]
          and final["adv"] - final["mle"] >= 2.0
          and adv_train[-1] > adv_train[0]
          and total < 15 * 60)
    report(4, ok, f"val NLL mle {final['mle']:.3f} < hybrid {final['hybrid']:.3f} < adv {final['adv']:.3f}; "
                  f"adv-mle {final['adv'] - final['mle']:.2f} (>= 2); adv train NLL {adv_train[0]:.3f} -> "
                  f"{adv_train[-1]:.3f}; {total / 60:.1f} min (< 15)")
    assert ok


def test_criterion_05_spectral_ordering(report, ring8_runs):
    _, _, runs, _ = ring8_runs
    reps = {k: spectral_report(res.model, n_z=64, seed=0) for k, (_, res) in runs.items()}
    avg = {k: r.avg_logdet for k, r in reps.items()}
    spread = {k: r.spread() for k, r in reps.items()}
    consistency = max(float(np.max(np.abs(r.sum_log_sv - r.logdet_fwd))) for r in reps.values())
    ordering = avg["adv"] < avg["hybrid"] < avg["mle"]
    ratio = spread["adv"] / spread["mle"]
    ok = ordering and ratio >= 2.0 and consistency < 1e-6
    report(5, ok, f"avg logdet adv {avg['adv']:.3f}, hybrid {avg['hybrid']:.3f}, mle {avg['mle']:.3f} "
                  f"(need adv < hybrid < mle: {ordering}); spread ratio adv/mle {ratio:.2f} (>= 2); "
                  f"consistency {consistency:.1e} (< 1e-6)")
    assert ok


def test_criterion_06_gmm_region(report, ring8_runs):
    ds, clf, runs, _ = ring8_runs
    cfg, res = runs["adv"]
    t0 = time.perf_counter()
    state = res.checkpoints["best_mode"]
    model = model_from_state(cfg, ds.dim, state)
    p_star = label_distribution(ds.train_labels, clf.n_classes)
    adv_nll = evaluate_nll(model, ds.val)
    adv_mode = mode_score(clf, model.sample(cfg.score_samples, cfg.seed), p_star)
    rows = gmm_sweep(ds, clf, bandwidth_grid(cfg), cfg.score_samples, cfg.seed)
    region = rows[(rows[:, 1] < adv_nll) & (rows[:, 2] > adv_mode)]
    secs = time.perf_counter() - t0
    ok = len(region) > 0 and secs < 5 * 60
    span = f"sigma {region[0, 0]:.4f}..{region[-1, 0]:.4f}" if len(region) else "empty"
    report(6, ok, f"adv best-MODE checkpoint (iter {state.iteration}): val NLL {adv_nll:.3f}, MODE {adv_mode:.3f}; "
                  f"{len(region)} GMM grid points dominate ({span}); {secs:.1f}s (< 300s)")
    assert ok


def test_criterion_07_ais_linear_gaussian(report):
    t0 = time.perf_counter()
    res = ais_estimate(build_flow(1, 0), [[0.0]], AisConfig(n_chains=64, n_temperatures=1000, sigma_obs=0.1))
    true = norm.logpdf(0.0, 0.0, math.sqrt(1 + 0.1**2))
    err = abs(res.log_px[0] - true)
    secs = time.perf_counter() - t0
    ok = err < 0.05 and secs < 180
    report(7, ok, f"AIS {res.log_px[0]:.4f} vs analytic {true:.4f}, error {err:.4f} (< 0.05); {secs:.1f}s (< 180s)")
    assert ok


def test_criterion_08_estimator_mismatch(report, ring8_runs):
    ds, _, runs, _ = ring8_runs
    x = ds.test[:20]
    gaps = {}
    for k, (cfg, res) in runs.items():
        model = res.model
        exact = evaluate_nll(model, x)
        ais = -float(np.mean(ais_estimate(model, x, cfg.ais_config()).log_px))
        samples = model.sample(cfg.kde_samples, cfg.seed)
        sigma, _ = gmm_bandwidth_search(samples, ds.val, bandwidth_grid(cfg))
        kde = -float(np.mean(kde_estimate(samples, x, sigma)))
        gaps[k] = (exact, ais - exact, kde - exact)
    ais_ok = any(abs(g[1]) > 0.5 for g in gaps.values())
    kde_ok = any(abs(g[2]) > 0.5 for g in gaps.values())
    ok = ais_ok and kde_ok
    detail = "; ".join(f"{k}: exact {e:.3f}, ais gap {a:+.3f}, kde gap {q:+.3f}" for k, (e, a, q) in gaps.items())
    report(8, ok, f"{detail} (each estimator > 0.5 nat on some model)")
    assert ok


def test_criterion_09_score_sanity(report):
    k = 10
    one_hot = np.eye(k)[np.arange(100 * k) % k]
    is_val = inception_score(one_hot)
    p_star = np.random.default_rng(0).dirichlet(np.ones(k))
    ms_val = mode_score(np.tile(p_star, (200, 1)), train_label_dist=p_star)
    ok = abs(is_val - k) <= 1e-9 and abs(ms_val - 1) <= 1e-9
    report(9, ok, f"inception {is_val:.12f} (K=10 +- 1e-9); mode {ms_val:.12f} (1 +- 1e-9)")
    assert ok


def test_criterion_10_reproducible_log(report, ring8_runs):
    ds, clf, runs, _ = ring8_runs
    cfg, first = runs["adv"]
    again = train(cfg.train_config(), ds, clf)
    a, b = first.log.to_csv(), again.log.to_csv()
    ok = a == b
    report(10, ok, f"adv MetricLog CSV rerun byte-identical: {ok} ({len(a)} bytes, {len(first.log.rows)} rows)")
    assert ok
