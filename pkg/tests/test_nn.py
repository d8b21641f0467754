import numpy as np
import pytest

from gridflex.nn import (
    Adam,
    HybridPolicy,
    Manifest,
    PolicyDistribution,
    PopArt,
    backward,
    dhuber,
    entropy,
    forward,
    gae,
    huber,
    jvp,
    kl_divergence,
    load_checkpoint,
    log_prob,
    orthogonal_init,
    save_checkpoint,
    td_update,
    value_of,
)


def dense_forward(theta, manifest, x):
    """Straight-line reimplementation used as the forward oracle."""
    a = np.atleast_2d(x)
    layers = manifest.weights(theta)
    for k, (w, b) in enumerate(layers):
        z = a @ w.T + b
        a = np.maximum(z, 0.0) if k < len(layers) - 1 else z
    return a


class TestForward:
    def test_zero_params_zero_output(self):
        m = Manifest([4, 8, 2])
        out = forward(np.zeros(m.n_params), m, np.ones((3, 4)))
        assert np.all(out == 0.0)

    def test_identity_single_layer(self):
        m = Manifest([3, 3])
        theta = np.zeros(m.n_params)
        theta[:9] = np.eye(3).reshape(-1)
        x = np.random.default_rng(0).standard_normal((5, 3))
        assert np.allclose(forward(theta, m, x), x)

    def test_matches_straight_line_recomputation(self):
        rng = np.random.default_rng(1)
        m = Manifest([6, 16, 8, 3])
        theta = rng.standard_normal(m.n_params)
        x = rng.standard_normal((10, 6))
        assert np.max(np.abs(forward(theta, m, x) - dense_forward(theta, m, x))) <= 1e-12

    def test_shape_mismatch_raises(self):
        m = Manifest([4, 2])
        with pytest.raises(ValueError, match="width"):
            forward(np.zeros(m.n_params), m, np.ones((1, 5)))

    def test_orthogonal_init_semi_orthonormal(self):
        rng = np.random.default_rng(2)
        m = Manifest([7, 16, 4])
        theta = orthogonal_init(m, rng)
        for k, (w, b) in enumerate(m.weights(theta)):
            assert np.all(b == 0.0)
            if w.shape[0] >= w.shape[1]:
                gram = w.T @ w   # columns orthonormal
            else:
                gram = w @ w.T   # rows orthonormal (wide layer)
            assert np.max(np.abs(gram - np.eye(gram.shape[0]))) <= 1e-10


class TestGradients:
    def numeric_grad(self, f, theta, h=1e-5):
        g = np.zeros_like(theta)
        for i in range(len(theta)):
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            g[i] = (f(up) - f(dn)) / (2 * h)
        return g

    def test_constant_loss_zero_gradient(self):
        m = Manifest([3, 4, 1])
        theta = np.random.default_rng(0).standard_normal(m.n_params)
        x = np.random.default_rng(1).standard_normal((6, 3))
        _, cache = forward(theta, m, x, want_cache=True)
        grad = backward(theta, m, cache, np.zeros((6, 1)))
        assert np.all(grad == 0.0)

    def test_linear_layer_squared_loss_analytic(self):
        # L = ||Wx - y||^2, gradient = 2(Wx - y) x^T.
        m = Manifest([3, 2])
        rng = np.random.default_rng(3)
        theta = rng.standard_normal(m.n_params)
        x = rng.standard_normal((1, 3))
        y = rng.standard_normal((1, 2))
        out, cache = forward(theta, m, x, want_cache=True)
        grad = backward(theta, m, cache, 2.0 * (out - y))
        w = theta[:6].reshape(2, 3)
        expected_w = 2.0 * (x @ w.T + theta[6:8] - y).T @ x
        assert np.allclose(grad[:6], expected_w.reshape(-1), atol=1e-12)

    def test_backward_matches_finite_differences(self):
        # Acceptance: relative error <= 1e-4 over >= 50 random nets/losses.
        count = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            sizes = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(2, 4)))]
            m = Manifest([int(rng.integers(2, 6)), *sizes, int(rng.integers(1, 4))])
            theta = 0.7 * rng.standard_normal(m.n_params)
            x = rng.standard_normal((4, m.n_in))
            w = rng.standard_normal((4, m.n_out))

            def loss(th):
                return float(np.sum(w * forward(th, m, x)))

            _, cache = forward(theta, m, x, want_cache=True)
            grad = backward(theta, m, cache, w)
            num = self.numeric_grad(loss, theta)
            denom = max(np.linalg.norm(num), 1e-8)
            assert np.linalg.norm(grad - num) / denom <= 1e-4
            count += 1
        assert count == 50

    def test_jvp_matches_directional_difference(self):
        rng = np.random.default_rng(11)
        m = Manifest([5, 12, 3])
        theta = rng.standard_normal(m.n_params)
        v = rng.standard_normal(m.n_params)
        x = rng.standard_normal((7, 5))
        h = 1e-6
        fd = (forward(theta + h * v, m, x) - forward(theta - h * v, m, x)) / (2 * h)
        assert np.max(np.abs(jvp(theta, m, x, v) - fd)) <= 1e-6


class TestDistributions:
    def dist(self, mean, log_std, logit):
        return PolicyDistribution(
            mean=np.atleast_2d(mean).astype(float),
            log_std=np.asarray(log_std, dtype=float),
            on_logit=np.atleast_2d(logit).astype(float),
        )

    def test_bernoulli_half(self):
        d = self.dist([[0.0]], [0.0], [[0.0]])
        lp = log_prob(d, np.array([[0.0]]), np.array([[1]]),
                      np.array([[False]]))
        # continuous part: standard normal at its mean
        expected = -0.5 * np.log(2 * np.pi) + np.log(0.5)
        assert lp[0] == pytest.approx(expected, abs=1e-12)

    def test_masked_dim_contributes_zero(self):
        d = self.dist([[0.0]], [0.0], [[3.7]])
        lp_masked = log_prob(d, np.array([[0.0]]), np.array([[1]]), np.array([[True]]))
        assert lp_masked[0] == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_gaussian_at_mean(self):
        d = self.dist(np.zeros((1, 1)), [0.0], np.zeros((1, 0)))
        lp = log_prob(d, np.zeros((1, 1)), np.zeros((1, 0)), np.zeros((1, 0), bool))
        assert lp[0] == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_kl_identical_zero(self):
        d = self.dist([[0.3, -1.0]], [0.1, -0.2], [[0.5]])
        assert kl_divergence(d, d, np.array([[False]])) == pytest.approx(0.0, abs=1e-14)

    def test_kl_bernoulli_hand_value(self):
        p = self.dist(np.zeros((1, 0)), np.zeros(0), [[0.0]])                      # p=0.5
        q = self.dist(np.zeros((1, 0)), np.zeros(0), [[np.log(0.25 / 0.75)]])     # q=0.25
        expected = 0.5 * np.log(2.0) + 0.5 * np.log(2.0 / 3.0)
        assert kl_divergence(p, q, np.array([[False]])) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.14384, abs=1e-5)

    def test_kl_gaussians_half(self):
        p = self.dist([[0.0]], [0.0], np.zeros((1, 0)))
        q = self.dist([[1.0]], [0.0], np.zeros((1, 0)))
        assert kl_divergence(p, q, np.zeros((1, 0), bool)) == pytest.approx(0.5, abs=1e-12)

    def test_kl_nonnegative_random(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p = self.dist(rng.standard_normal((3, 2)), rng.uniform(-1, 1, 2),
                          rng.standard_normal((3, 2)))
            q = self.dist(rng.standard_normal((3, 2)), rng.uniform(-1, 1, 2),
                          rng.standard_normal((3, 2)))
            mask = rng.uniform(size=(3, 2)) < 0.3
            assert kl_divergence(p, q, mask) >= -1e-12

    def test_entropy_finite(self):
        d = self.dist([[0.0]], [0.0], [[0.3]])
        assert np.isfinite(entropy(d, np.array([[False]])))


class TestGae:
    def test_lambda_zero_is_td_error(self):
        r = np.array([1.0, 2.0, 3.0])
        v = np.array([0.5, 1.0, 1.5, 0.0])
        adv = gae(r, v, gamma=0.9, lam=0.0)
        expected = r + 0.9 * v[1:] - v[:-1]
        assert np.allclose(adv, expected, atol=1e-12)

    def test_all_zero(self):
        assert np.all(gae(np.zeros(5), np.zeros(6), 0.95, 0.95) == 0.0)

    def test_hand_recursion_value(self):
        adv = gae(np.ones(3), np.zeros(4), gamma=0.95, lam=0.95)
        assert adv[0] == pytest.approx(1 + 0.9025 + 0.9025**2, abs=1e-12)
        assert adv[0] == pytest.approx(2.71700625, abs=1e-10)

    def test_lambda_one_monte_carlo_identity(self):
        rng = np.random.default_rng(9)
        r = rng.standard_normal(20)
        v = rng.standard_normal(21)
        v[-1] = 0.0
        gamma = 0.93
        adv = gae(r, v, gamma, lam=1.0)
        returns = np.zeros(20)
        acc = 0.0
        for t in range(19, -1, -1):
            acc = r[t] + gamma * acc
            returns[t] = acc
        assert np.max(np.abs(adv - (returns - v[:-1]))) <= 1e-10

    def test_length_check(self):
        with pytest.raises(ValueError):
            gae(np.zeros(3), np.zeros(3), 0.9, 0.9)


class TestTdUpdate:
    def test_zero_td_error_no_change(self):
        m = Manifest([2, 1])
        theta = np.zeros(m.n_params)  # V == 0 everywhere
        out = td_update(theta, m, np.ones((4, 2)), np.zeros(4), np.ones((4, 2)),
                        np.zeros(4, bool), gamma=0.9, lr=0.1)
        assert np.allclose(out, theta)

    def test_single_transition_closed_form(self):
        # Linear value net, |delta| < 1: update = lr * delta * grad V.
        m = Manifest([2, 1])
        rng = np.random.default_rng(4)
        theta = 0.1 * rng.standard_normal(m.n_params)
        s = np.array([[0.3, -0.2]])
        s2 = np.array([[0.1, 0.1]])
        r = np.array([0.5])
        v = forward(theta, m, s)[0, 0]
        v2 = forward(theta, m, s2)[0, 0]
        delta = r[0] + 0.9 * v2 - v
        expected = theta + 0.05 * delta * np.array([s[0, 0], s[0, 1], 1.0])
        out = td_update(theta, m, s, r, s2, np.zeros(1, bool), gamma=0.9, lr=0.05)
        assert np.allclose(out, expected, atol=1e-12)

    def test_converges_to_analytic_mrp_values(self):
        # 3-state Markov reward process, one-hot features, linear net:
        # TD(0) fixed point equals the Bellman solve.
        p = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        r = np.array([1.0, 0.0, -0.5])
        gamma = 0.9
        v_star = np.linalg.solve(np.eye(3) - gamma * p, r)
        m = Manifest([3, 1])
        theta = np.zeros(m.n_params)
        rng = np.random.default_rng(8)
        eye = np.eye(3)
        for _ in range(10000):
            s = int(rng.integers(0, 3))
            s2 = int(np.argmax(p[s]))
            theta = td_update(theta, m, eye[[s]], r[[s]], eye[[s2]],
                              np.zeros(1, bool), gamma=gamma, lr=0.05)
        v = forward(theta, m, eye)[:, 0]
        assert np.max(np.abs(v - v_star)) <= 1e-3

    def test_nonfinite_aborts(self):
        m = Manifest([2, 1])
        theta = np.zeros(m.n_params)
        with pytest.raises(FloatingPointError):
            td_update(theta, m, np.ones((1, 2)), np.array([np.nan]),
                      np.ones((1, 2)), np.zeros(1, bool), gamma=0.9, lr=0.1)

    def test_huber_shapes(self):
        assert huber(0.5) == pytest.approx(0.125)
        assert huber(3.0) == pytest.approx(1.0 * (3.0 - 0.5))
        assert dhuber(3.0) == 1.0
        assert dhuber(-3.0) == -1.0
        assert dhuber(0.25) == 0.25


class TestPopArt:
    def test_rescaling_preserves_denormalized_outputs(self):
        m = Manifest([3, 8, 1])
        rng = np.random.default_rng(6)
        theta = rng.standard_normal(m.n_params)
        pa = PopArt(beta=0.1)
        x = rng.standard_normal((5, 3))
        before = value_of(theta, m, x, pa)
        theta2 = pa.update(rng.normal(100.0, 10.0, size=64), theta, m)
        after = value_of(theta2, m, x, pa)
        assert np.max(np.abs(after - before)) <= 1e-8 * max(1.0, np.max(np.abs(before)))

    def test_normalize_round_trip(self):
        pa = PopArt()
        pa.update(np.array([10.0, 20.0]), np.zeros(Manifest([1, 1]).n_params), Manifest([1, 1]))
        x = np.array([3.0, 14.0])
        assert np.allclose(pa.denormalize(pa.normalize(x)), x)


class TestHybridPolicy:
    def test_param_vector_layout(self):
        pol = HybridPolicy(obs_dim=5, n_cont=2, n_disc=2, hidden=(8, 4))
        params = pol.init_params(np.random.default_rng(0))
        assert params.shape == (pol.n_params,)
        net, log_std = pol.split(params)
        assert log_std.shape == (2,)

    def test_surrogate_gradient_matches_fd(self):
        rng = np.random.default_rng(12)
        pol = HybridPolicy(obs_dim=4, n_cont=1, n_disc=1, hidden=(6,))
        params = pol.init_params(rng)
        obs = rng.standard_normal((8, 4))
        u = rng.standard_normal((8, 1))
        o = rng.integers(0, 2, (8, 1))
        mask = rng.uniform(size=(8, 1)) < 0.25
        w = rng.standard_normal(8)

        def f(p):
            return float(np.sum(w * pol.log_probs(p, obs, u, o, mask)))

        grad = pol.weighted_logprob_grad(params, obs, u, o, mask, w)
        h = 1e-6
        for i in rng.choice(pol.n_params, size=25, replace=False):
            up, dn = params.copy(), params.copy()
            up[i] += h
            dn[i] -= h
            num = (f(up) - f(dn)) / (2 * h)
            assert grad[i] == pytest.approx(num, abs=2e-5, rel=1e-4)

    def test_fvp_zero_vector(self):
        pol = HybridPolicy(obs_dim=3, n_cont=1, n_disc=1, hidden=(5,))
        params = pol.init_params(np.random.default_rng(1))
        obs = np.random.default_rng(2).standard_normal((6, 3))
        mask = np.zeros((6, 1), bool)
        out = pol.fisher_vector_product(params, obs, mask, np.zeros(pol.n_params))
        assert np.all(out == 0.0)

    def test_fvp_psd(self):
        rng = np.random.default_rng(13)
        pol = HybridPolicy(obs_dim=3, n_cont=2, n_disc=1, hidden=(5,))
        params = pol.init_params(rng)
        obs = rng.standard_normal((10, 3))
        mask = rng.uniform(size=(10, 1)) < 0.3
        for _ in range(20):
            v = rng.standard_normal(pol.n_params)
            hv = pol.fisher_vector_product(params, obs, mask, v)
            assert v @ hv >= -1e-10

    def test_fvp_matches_kl_gradient_fd(self):
        # H v vs central finite difference of grad KL along v.
        rng = np.random.default_rng(14)
        pol = HybridPolicy(obs_dim=4, n_cont=1, n_disc=2, hidden=(8,))
        params = pol.init_params(rng)
        obs = rng.standard_normal((12, 4))
        mask = rng.uniform(size=(12, 2)) < 0.3
        old = pol.dist(params, obs)
        v = rng.standard_normal(pol.n_params)
        h = 1e-5
        _, g_up = pol.kl_and_grad(old, params + h * v, obs, mask)
        _, g_dn = pol.kl_and_grad(old, params - h * v, obs, mask)
        fd = (g_up - g_dn) / (2 * h)
        hv = pol.fisher_vector_product(params, obs, mask, v)
        assert np.linalg.norm(hv - fd) / max(np.linalg.norm(fd), 1e-10) <= 1e-3

    def test_greedy_respects_mask(self):
        pol = HybridPolicy(obs_dim=3, n_cont=1, n_disc=1, hidden=(4,))
        params = pol.init_params(np.random.default_rng(3))
        u, o = pol.greedy(params, np.zeros(3), np.array([True]), np.array([0]))
        assert o[0] == 0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        sections = {"actor_0": rng.standard_normal(17), "critic_0": rng.standard_normal(5)}
        meta = {"algorithm": "cmacpo", "seed": 3}
        p = tmp_path / "ck.bin"
        save_checkpoint(p, sections, meta)
        loaded, m = load_checkpoint(p)
        assert m == meta
        for k in sections:
            assert np.array_equal(loaded[k], sections[k])

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b'{"format": "other"}\n')
        with pytest.raises(ValueError, match="not a gridflex checkpoint"):
            load_checkpoint(p)


class TestAdam:
    def test_ascends_simple_quadratic(self):
        # maximize -(x-3)^2
        theta = np.zeros(1)
        opt = Adam(1, lr=0.1)
        for _ in range(500):
            grad = -2.0 * (theta - 3.0)
            theta = opt.step(theta, grad)
        assert theta[0] == pytest.approx(3.0, abs=1e-2)
