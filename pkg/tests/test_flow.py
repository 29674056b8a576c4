import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowgan import tensor as T
from flowgan.errors import DivergenceError
from flowgan.flow import (
    CouplingLayer,
    FlowModel,
    Prior,
    ScaleLayer,
    build_flow,
    generate,
    invert,
    log_likelihood,
    prior_logpdf,
    sample,
)

LOG_2PI = math.log(2 * math.pi)


def perturbed_flow(dim, n_layers, kind="affine", seed=0, scale=0.3, widths=(8, 8), prior="gaussian"):
    """A flow whose parameters are moved away from the identity initialization."""
    model = build_flow(dim, n_layers, kind, widths, prior_kind=prior, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for p in model.parameters().values():
        p.data = p.data + scale * rng.normal(size=p.shape)
    return model


def numeric_jacobian(fn, z, step=1e-6):
    d = len(z)
    jac = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        jac[:, j] = (fn(z + e) - fn(z - e)) / (2 * step)
    return jac


def scale_model(log_diag):
    return FlowModel([ScaleLayer(log_diag)], Prior("gaussian", len(log_diag)))


class TestPrior:
    def test_gaussian_origin_1d(self):
        assert prior_logpdf(Prior("gaussian", 1), [[0.0]]).item() == pytest.approx(-0.918939, abs=1e-6)

    def test_logistic_origin_2d(self):
        assert prior_logpdf(Prior("logistic", 2), [[0.0, 0.0]]).item() == pytest.approx(2 * math.log(0.25), abs=1e-12)

    def test_gaussian_3_4(self):
        assert prior_logpdf(Prior("gaussian", 2), [[3.0, 4.0]]).item() == pytest.approx(-12.5 - LOG_2PI, abs=1e-12)

    def test_logistic_far_tail_is_finite(self):
        v = prior_logpdf(Prior("logistic", 1), [[800.0], [-800.0]]).data
        np.testing.assert_allclose(v, [-800.0, -800.0], rtol=1e-12)

    @pytest.mark.parametrize("kind", ["gaussian", "logistic"])
    def test_integrates_to_one(self, kind):
        grid = np.linspace(-40, 40, 200001)[:, None]
        dens = np.exp(Prior(kind, 1).logpdf_array(grid))
        assert np.trapezoid(dens, grid[:, 0]) == pytest.approx(1.0, abs=1e-8)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Prior("cauchy", 2)


class TestLayers:
    def test_mask_needs_both_values(self):
        with pytest.raises(ValueError):
            CouplingLayer("affine", [1, 1])
        with pytest.raises(ValueError):
            CouplingLayer("affine", [1, 0, 1])

    def test_additive_logdet_is_zero(self):
        model = perturbed_flow(4, 4, "additive", prior="logistic")
        z = np.random.default_rng(0).normal(size=(10, 4))
        h = T.tensor(z)
        for layer in model.layers[1:]:
            h, ld = layer.forward(h)
            np.testing.assert_array_equal(ld.data, 0.0)
        _, total = generate(model, z)
        np.testing.assert_allclose(total.data, np.sum(model.layers[0].log_diag.data), atol=1e-15)

    def test_affine_log_scale_is_clamped(self):
        layer = CouplingLayer("affine", [1, 0], (3,), np.random.default_rng(0), log_scale_clamp=2.0)
        for p in layer.parameters().values():
            p.data = np.full(p.shape, 50.0)
        _, ld = layer.forward(T.tensor([[1.0, 1.0], [-3.0, 2.0]]))
        assert np.all(np.abs(ld.data) <= 2.0)

    def test_masks_alternate(self):
        model = build_flow(5, 4, seed=0)
        masks = [layer.mask for layer in model.layers[1:]]
        for a, b in zip(masks, masks[1:]):
            np.testing.assert_array_equal(a, 1 - b)


class TestBuildFlow:
    def test_scale_only_model_is_prior(self):
        model = build_flow(2, 0)
        x = np.random.default_rng(0).normal(size=(6, 2))
        np.testing.assert_array_equal(log_likelihood(model, x).data, Prior("gaussian", 2).logpdf_array(x))

    def test_initial_map_is_identity(self):
        model = build_flow(3, 6, "affine", (16, 16), seed=3)
        z = np.random.default_rng(1).normal(size=(20, 3))
        x, ld = generate(model, z)
        np.testing.assert_array_equal(x.data, z)
        np.testing.assert_array_equal(ld.data, 0.0)

    def test_dim_one_rejected(self):
        with pytest.raises(ValueError):
            build_flow(1, 2)

    def test_seed_7_round_trip(self):
        model = perturbed_flow(2, 2, "affine", seed=7)
        z = np.random.default_rng(7).normal(size=(100, 2))
        x, _ = generate(model, z)
        back, _ = invert(model, x.data)
        assert np.max(np.abs(back.data - z)) < 1e-6


class TestGenerateInvert:
    def test_identity(self):
        z = np.array([[0.3, -1.0]])
        x, ld = generate(build_flow(2, 0), z)
        np.testing.assert_array_equal(x.data, z)
        np.testing.assert_array_equal(ld.data, [0.0])

    def test_scale_layer(self):
        model = scale_model([math.log(2), math.log(3)])
        x, ld = generate(model, [[1.0, 1.0]])
        np.testing.assert_allclose(x.data, [[2.0, 3.0]], rtol=1e-15)
        assert ld.item() == pytest.approx(math.log(6), abs=1e-15)
        z, ldi = invert(model, [[2.0, 3.0]])
        np.testing.assert_allclose(z.data, [[1.0, 1.0]], rtol=1e-15)
        assert ldi.item() == pytest.approx(-math.log(6), abs=1e-15)

    def test_logdet_matches_numeric_jacobian(self):
        model = perturbed_flow(3, 4, "affine", seed=2)
        z = np.random.default_rng(2).normal(size=(5, 3))
        _, ld = generate(model, z)
        for i in range(len(z)):
            jac = numeric_jacobian(lambda v: model.generate_array(v[None, :])[0], z[i])
            assert ld.data[i] == pytest.approx(np.log(abs(np.linalg.det(jac))), rel=1e-4)

    def test_inverse_logdet_negates_forward(self):
        model = perturbed_flow(3, 4, "affine", seed=9)
        z = np.random.default_rng(9).normal(size=(50, 3))
        x, ld_f = generate(model, z)
        _, ld_i = invert(model, x.data)
        np.testing.assert_allclose(ld_f.data + ld_i.data, 0.0, atol=1e-8)

    def test_non_finite_reports_layer(self):
        model = scale_model([400.0])
        model.layers.append(ScaleLayer([400.0]))
        with pytest.raises(DivergenceError, match="layer 1"):
            generate(model, [[1.0]])

    def test_width_mismatch(self):
        with pytest.raises(T.ShapeError):
            generate(build_flow(2, 2), np.zeros((3, 3)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 4), st.sampled_from(["affine", "additive"]))
    def test_round_trip_property(self, seed, dim, kind):
        model = perturbed_flow(dim, 4, kind, seed=seed, scale=0.5)
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(64, dim))
        z *= np.minimum(1.0, 10.0 / np.linalg.norm(z, axis=1, keepdims=True)) * rng.uniform(0, 3)
        x, ld_f = generate(model, z)
        back, ld_i = invert(model, x.data)
        assert np.max(np.abs(back.data - z)) < 1e-6
        assert np.max(np.abs(ld_f.data + ld_i.data)) < 1e-8


class TestLogLikelihood:
    def test_identity_gaussian_origin(self):
        assert log_likelihood(build_flow(2, 0), [[0.0, 0.0]]).item() == pytest.approx(-LOG_2PI, abs=1e-12)

    def test_identity_logistic_origin(self):
        model = FlowModel([ScaleLayer([0.0])], Prior("logistic", 1))
        assert log_likelihood(model, [[0.0]]).item() == pytest.approx(math.log(0.25), abs=1e-12)

    @pytest.mark.parametrize("dim", [2, 3, 4])
    def test_matches_change_of_variables(self, dim):
        model = perturbed_flow(dim, 4, "affine", seed=dim)
        x = np.random.default_rng(dim).normal(size=(4, dim))
        ll = log_likelihood(model, x).data
        for i in range(len(x)):
            z, _ = invert(model, x[i:i + 1])
            jac = numeric_jacobian(lambda v: invert(model, v[None, :])[0].data[0], x[i])
            oracle = math.exp(model.prior.logpdf_array(z.data)[0]) * abs(np.linalg.det(jac))
            assert math.exp(ll[i]) == pytest.approx(oracle, rel=1e-4)

    def test_gradient_matches_finite_differences(self):
        model = perturbed_flow(2, 2, seed=4, widths=(4,))
        x = np.random.default_rng(4).normal(size=(6, 2))
        p = model.parameters()["layers.2.net.w0"]
        theta0 = p.data.copy()
        with T.Tape() as tape:
            out = T.sum_(log_likelihood(model, x))
        (g,) = tape.gradient(out, [p])

        def f(v):
            p.data = v.reshape(theta0.shape)
            return float(np.sum(log_likelihood(model, x).data))

        fd = T.finite_diff_gradient(f, theta0)
        p.data = theta0
        np.testing.assert_allclose(g.data, fd, rtol=1e-5, atol=1e-9)


class TestSample:
    def test_identity_mean_clt(self):
        x = sample(build_flow(2, 0), 10_000, seed=0)
        assert np.all(np.abs(x.mean(axis=0)) < 4 / math.sqrt(10_000))

    def test_deterministic(self):
        model = perturbed_flow(2, 2, seed=1)
        assert sample(model, 50, 3).tobytes() == sample(model, 50, 3).tobytes()

    def test_scale_layer_variance(self):
        x = sample(scale_model([math.log(2)]), 20_000, seed=0)
        assert x.var() == pytest.approx(4.0, rel=0.05)

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            sample(build_flow(2, 0), 0, 0)
