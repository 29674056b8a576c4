import math

import numpy as np
import pytest

from flowgan import tensor as T
from flowgan.adversarial import (
    Critic,
    DivergenceSpec,
    critic_value,
    gradient_penalty,
    jsd_losses,
    wgan_critic_loss,
    wgan_generator_loss,
    wgan_losses,
)
from flowgan.errors import DivergenceError
from flowgan.flow import build_flow, generate


def linear_critic(w, b=0.0, divergence="wgan"):
    critic = Critic(len(w), hidden=(), divergence=divergence, seed=0)
    params = critic.parameters()
    params["critic.w0"].data = np.asarray(w, dtype=np.float64).reshape(-1, 1)
    params["critic.b0"].data = np.array([b], dtype=np.float64)
    return critic


def flat(params):
    return np.concatenate([p.data.ravel() for p in params])


def set_flat(params, v):
    off = 0
    for p in params:
        n = p.data.size
        p.data = v[off:off + n].reshape(p.shape).copy()
        off += n


def fd_check(params, loss_fn, rtol=1e-4):
    with T.Tape() as tape:
        loss = loss_fn()
    g = flat(tape.gradient(loss, params))
    v0 = flat(params)

    def f(v):
        set_flat(params, v)
        with T.Tape():
            return loss_fn().item()

    fd = T.finite_diff_gradient(f, v0)
    set_flat(params, v0)
    np.testing.assert_allclose(g, fd, rtol=rtol, atol=1e-7)


class TestCritic:
    def test_zero_init_outputs_zero(self):
        critic = Critic(3, hidden=(5, 5), zero_init=True)
        np.testing.assert_array_equal(critic(np.random.default_rng(0).normal(size=(4, 3))).data, 0.0)

    def test_linear_value(self):
        assert critic_value(linear_critic([1.0, 2.0]), [[3.0, 1.0]]).item() == 5.0

    def test_param_count_from_widths(self):
        critic = Critic(4, hidden=(7, 3))
        assert critic.n_params == 4 * 7 + 7 + 7 * 3 + 3 + 3 * 1 + 1

    def test_width_mismatch(self):
        with pytest.raises(T.ShapeError):
            Critic(2)(np.zeros((3, 4)))

    def test_input_gradient_matches_fd(self):
        critic = Critic(3, hidden=(6, 6), seed=2)
        x0 = np.random.default_rng(2).normal(size=(1, 3))
        x = T.parameter(x0)
        with T.Tape() as tape:
            out = T.sum_(critic(x))
        (g,) = tape.gradient(out, [x])

        def f(v):
            return critic(v.reshape(1, 3)).item()

        fd = T.finite_diff_gradient(f, x0.ravel())
        np.testing.assert_allclose(g.data.ravel(), fd, rtol=1e-5, atol=1e-10)

    def test_jsd_output_clamped(self):
        critic = linear_critic([100.0], divergence="jsd")
        v = critic([[50.0], [-50.0]]).data
        np.testing.assert_array_equal(v, [1 - 1e-7, 1e-7])


class TestDivergenceSpec:
    def test_defaults(self):
        spec = DivergenceSpec()
        assert (spec.kind, spec.penalty_coeff, spec.n_critic) == ("wgan", 10.0, 5)

    def test_invalid(self):
        with pytest.raises(ValueError):
            DivergenceSpec(penalty_coeff=-1.0)
        with pytest.raises(ValueError):
            DivergenceSpec(kind="kl")


class TestWgan:
    def test_constant_critic(self):
        critic = Critic(2, hidden=(4,), zero_init=True)
        rng = np.random.default_rng(0)
        closs, gloss, pen = wgan_losses(critic, rng.normal(size=(8, 2)), rng.normal(size=(8, 2)), 10.0, rng)
        assert closs.item() == 10.0
        assert gloss.item() == 0.0
        assert pen.item() == 1.0

    def test_unit_norm_linear_has_zero_penalty(self):
        critic = linear_critic([0.6, 0.8])
        rng = np.random.default_rng(0)
        _, _, pen = wgan_losses(critic, rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), 10.0, rng)
        assert pen.item() == 0.0

    def test_identical_distributions_difference_is_zero_in_expectation(self):
        critic = Critic(2, hidden=(8,), seed=5)
        rng = np.random.default_rng(5)
        n = 10_000
        xr, xf = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        closs, _, pen = wgan_losses(critic, xr, xf, 10.0, rng)
        diff = closs.item() - 10.0 * pen.item()
        dr, df = critic(xr).data, critic(xf).data
        se = math.sqrt(dr.var(ddof=1) / n + df.var(ddof=1) / n)
        assert abs(diff) < 3 * se

    def test_constant_shift_only_changes_nothing_but_penalty(self):
        critic = linear_critic([0.3, -0.4], b=0.0)
        rng = np.random.default_rng(1)
        xr, xf = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        x_hat = np.random.default_rng(2).normal(size=(6, 2))
        a, _ = wgan_critic_loss(critic, xr, xf, 10.0, x_hat=x_hat)
        critic.parameters()["critic.b0"].data = np.array([7.5])
        b, _ = wgan_critic_loss(critic, xr, xf, 10.0, x_hat=x_hat)
        assert a.item() == pytest.approx(b.item(), abs=1e-12)

    def test_permutation_invariant(self):
        critic = Critic(2, hidden=(5,), seed=3)
        rng = np.random.default_rng(3)
        xr, xf = rng.normal(size=(7, 2)), rng.normal(size=(7, 2))
        x_hat = rng.normal(size=(7, 2))
        perm = rng.permutation(7)
        a, _ = wgan_critic_loss(critic, xr, xf, 10.0, x_hat=x_hat)
        b, _ = wgan_critic_loss(critic, xr[perm], xf[perm], 10.0, x_hat=x_hat[perm])
        assert a.item() == pytest.approx(b.item(), rel=1e-13)

    def test_critic_gradient_matches_fd(self):
        critic = Critic(3, hidden=(5, 5), seed=6)
        rng = np.random.default_rng(6)
        xr, xf = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        x_hat = rng.normal(size=(6, 3))
        params = list(critic.parameters().values())
        fd_check(params, lambda: wgan_critic_loss(critic, xr, xf, 10.0, x_hat=x_hat)[0])

    def test_generator_gradient_through_flow(self):
        model = build_flow(2, 2, "affine", (4,), seed=1)
        for p in model.parameters().values():
            p.data = p.data + 0.2 * np.random.default_rng(1).normal(size=p.shape)
        critic = Critic(2, hidden=(6,), seed=1)
        z = np.random.default_rng(2).normal(size=(8, 2))
        params = list(model.parameters().values())

        def loss():
            x, _ = generate(model, z)
            return wgan_generator_loss(critic, x)

        fd_check(params, loss)

    def test_non_finite_loss_is_divergence(self):
        critic = linear_critic([1.0, 1.0])
        with pytest.raises(DivergenceError):
            wgan_critic_loss(critic, [[1e308, 1e308]], [[0.0, 0.0]], 10.0, x_hat=np.zeros((1, 2)))

    def test_batch_width_mismatch(self):
        with pytest.raises(T.ShapeError):
            wgan_losses(Critic(2), np.zeros((3, 2)), np.zeros((3, 3)))


class TestJsd:
    def test_half_everywhere(self):
        critic = Critic(2, hidden=(3,), divergence="jsd", zero_init=True)
        rng = np.random.default_rng(0)
        closs, gloss = jsd_losses(critic, rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))
        assert -closs.item() == pytest.approx(2 * math.log(0.5), abs=1e-12)
        assert gloss.item() == pytest.approx(math.log(0.5), abs=1e-12)

    def test_perfect_critic_limit(self):
        critic = linear_critic([1000.0], divergence="jsd")
        closs, _ = jsd_losses(critic, [[1.0], [2.0]], [[-1.0], [-2.0]])
        assert -closs.item() == pytest.approx(0.0, abs=1e-6)

    def test_gradient_matches_fd(self):
        critic = Critic(3, hidden=(5, 5), divergence="jsd", seed=8)
        rng = np.random.default_rng(8)
        xr, xf = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        fd_check(list(critic.parameters().values()), lambda: jsd_losses(critic, xr, xf)[0])

    def test_requires_jsd_critic(self):
        with pytest.raises(ValueError):
            jsd_losses(Critic(2), np.zeros((2, 2)), np.zeros((2, 2)))


def test_penalty_outside_tape_context():
    critic = linear_critic([3.0, 4.0])
    pen = gradient_penalty(critic, np.zeros((2, 2)))
    assert pen.item() == pytest.approx(16.0)
