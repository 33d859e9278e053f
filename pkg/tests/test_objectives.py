import numpy as np
import pytest
from scipy import integrate, stats

from hosm import autodiff as ad
from hosm import distributions as dists
from hosm import models as M
from hosm import objectives as obj
from hosm.autodiff import Tensor
from hosm.training import TrainConfig, train


def _small_pair(d=2, mode="full", seed=0):
    return M.ScoreModelPair.init(d, 0.3, seed=seed, rank=min(2, d), mode=mode, hidden1=6, hidden2=5)


def _batch(d=2, b=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((b, d)), rng.standard_normal((b, d))


# -- DSM ------------------------------------------------------------------------


def test_dsm_cheating_oracle_is_zero():
    z = np.random.default_rng(0).standard_normal((5, 3))
    assert float(obj.dsm_term(Tensor(-z / 0.2), z, 0.2).data) == 0.0


def test_dsm_zero_model_single_sample():
    model = M.FirstOrderModel.init(2, np.random.default_rng(0), zero=True)
    value, _ = obj.loss_dsm(model, np.zeros((1, 2)), np.array([[1.0, 0.0]]), 1.0)
    assert value == 0.5


def test_sigma_must_be_positive():
    model = M.FirstOrderModel.init(2, np.random.default_rng(0))
    x, z = _batch()
    for fn in (obj.loss_dsm, obj.loss_dsm_vr):
        with pytest.raises(ValueError):
            fn(model, x, z, 0.0)
    with pytest.raises(ValueError):
        obj.tweedie_mean(np.zeros(2), np.zeros(2), -1.0)


def test_dsm_vr_differs_from_dsm_by_zero_mean_terms():
    model = M.FirstOrderModel.init(3, np.random.default_rng(1), hidden=8)
    x, z = _batch(3, 6, seed=2)
    sigma = 0.3
    plain, _ = obj.loss_dsm(model, x, z, sigma)
    vr, _ = obj.loss_dsm_vr(model, x, z, sigma)
    s1_clean = M.eval_s1(model, x)
    diff = np.mean(np.sum(s1_clean * z, axis=1) / sigma + (np.sum(z * z, axis=1) - 3) / (2 * sigma**2))
    np.testing.assert_allclose(plain - vr, diff, rtol=1e-10, atol=1e-10)


def test_dsm_vr_zero_model_is_finite_constant():
    model = M.FirstOrderModel.init(2, np.random.default_rng(0), zero=True)
    x, z = _batch()
    for sigma in (1.0, 1e-3, 1e-6):
        value, grads = obj.loss_dsm_vr(model, x, z, sigma)
        np.testing.assert_allclose(value, 2 / (2 * sigma**2), rtol=1e-12)
        assert all(np.all(np.isfinite(g)) for g in grads)


def test_dsm_vr_gradient_unbiased():
    # paired estimates on the same (x, z): the difference has zero mean
    rng = np.random.default_rng(0)
    model = M.FirstOrderModel.init(2, rng, depth=1)
    sigma = 0.1
    diffs = []
    for _ in range(10_000):
        x = rng.standard_normal((4, 2))
        z = rng.standard_normal((4, 2))
        _, g0 = obj.loss_dsm(model, x, z, sigma)
        _, g1 = obj.loss_dsm_vr(model, x, z, sigma)
        diffs.append(np.concatenate([(a - b).ravel() for a, b in zip(g0, g1)]))
    diffs = np.array(diffs)
    se = diffs.std(axis=0, ddof=1) / np.sqrt(len(diffs))
    assert np.all(np.abs(diffs.mean(axis=0)) < 3 * se)


def test_linear_dsm_minimizer():
    rng = np.random.default_rng(0)
    pair = M.ScoreModelPair(M.FirstOrderModel.init(2, rng, depth=1),
                            M.SecondOrderModel.init(2, rng, rank=1, depth=1), 0.5)
    for i, (lr, steps, bs) in enumerate([(1e-2, 2000, 512), (1e-3, 2000, 512), (1e-4, 2000, 2048)]):
        cfg = TrainConfig(sigma=0.5, steps=steps, lr=lr, batch_size=bs, seed=i, objective="dsm")
        pair, _ = train(pair, dists.standard_normal(2), cfg)
    np.testing.assert_allclose(pair.first.net.weights[0], -np.eye(2) / 1.25, atol=0.02)
    np.testing.assert_allclose(pair.first.net.biases[0], 0.0, atol=0.02)


# -- D2SM -----------------------------------------------------------------------


def test_d2sm_cheating_construction_is_zero():
    z = np.random.default_rng(0).standard_normal((4, 3))
    sigma = 0.7
    target = (np.eye(3)[None] - z[:, :, None] * z[:, None, :]) / sigma**2
    assert float(obj.d2sm_term(Tensor(-target), z, sigma).data) == 0.0
    assert float(obj.d2sm_term(Tensor(-(1 - z * z) / sigma**2), z, sigma, diag=True).data) == 0.0


def test_d2sm_unit_noise_cancels_identity():
    psi = obj.psi_full(Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))), None)
    assert float(obj.d2sm_term(psi, np.array([[1.0]]), 1.0).data) == 0.0


def test_psi_construction():
    s1 = np.array([[1.0, 2.0]])
    alpha = np.array([[-1.0, 0.5]])
    beta = np.array([[[1.0], [3.0]]])
    psi = obj.psi_full(Tensor(s1), Tensor(alpha), Tensor(beta)).data[0]
    want = np.diag(alpha[0]) + beta[0] @ beta[0].T + np.outer(s1[0], s1[0])
    np.testing.assert_allclose(psi, want)
    np.testing.assert_allclose(obj.psi_diag(Tensor(s1), Tensor(alpha), Tensor(beta)).data[0], np.diag(want))


def test_diag_equals_full_in_one_dimension():
    pair = _small_pair(d=1)
    x, z = _batch(1, 5)
    full, _ = obj.loss_d2sm(pair, x, z, 0.4)
    diag, _ = obj.loss_d2sm_diag(pair, x, z, 0.4)
    np.testing.assert_allclose(full, diag, rtol=1e-12)


def test_full_loss_rejects_diag_model():
    x, z = _batch()
    with pytest.raises(ValueError):
        obj.loss_d2sm(_small_pair(mode="diag"), x, z, 0.3)


def test_d2sm_vr_zero_and_constant_psi():
    z = np.random.default_rng(0).standard_normal((3, 2))
    zero = Tensor(np.zeros((3, 2, 2)))
    assert float(obj.d2sm_vr_term(zero, zero, zero, z, 1e-3).data) == 0.0
    c = np.array([[1.0, -2.0], [-2.0, 0.5]])
    const = Tensor(np.broadcast_to(c, (3, 2, 2)).copy())
    value = float(obj.d2sm_vr_term(const, const, const, z, 1e-3).data)
    np.testing.assert_allclose(value, 2 * np.sum(c * c), rtol=1e-12)


def test_d2sm_vr_expectation_is_twice_plain_minus_constant():
    # 1-d with a polynomial psi: Gauss-Hermite nodes give exact expectations over z
    sigma, x0 = 0.3, 0.4
    nodes, weights = np.polynomial.hermite_e.hermegauss(40)
    weights = weights / weights.sum()
    psi = lambda y: 0.5 * y**2 - y + 0.3  # noqa: E731

    def expect(term):
        total = 0.0
        for zi, wi in zip(nodes, weights):
            total += wi * term(np.array([[zi]]))
        return total

    plain = expect(lambda z: float(obj.d2sm_term(Tensor(psi(x0 + sigma * z)[..., None]), z, sigma).data))
    vr = expect(lambda z: float(obj.d2sm_vr_term(
        Tensor(psi(x0 + sigma * z)[..., None]), Tensor(psi(x0 - sigma * z)[..., None]),
        Tensor(psi(np.array([[x0]]))[..., None]), z, sigma).data))
    noise_sq = expect(lambda z: float(np.sum(((1 - z * z) / sigma**2) ** 2)))
    np.testing.assert_allclose(vr, 2 * (plain - noise_sq), rtol=1e-9)


def test_joint_total_is_d2sm_plus_gamma_dsm():
    pair = _small_pair()
    x, z = _batch()
    for vr in (False, True):
        rep, _ = obj.loss_joint(pair, x, z, 0.3, gamma=2.5, vr=vr)
        np.testing.assert_allclose(rep.total, rep.d2sm + 2.5 * rep.dsm, rtol=1e-12)
        rep0, _ = obj.loss_joint(pair, x, z, 0.3, gamma=0.0, vr=vr)
        np.testing.assert_allclose(rep0.total, rep0.d2sm, rtol=1e-12)


@pytest.mark.parametrize("diag", [False, True])
@pytest.mark.parametrize("vr", [False, True])
@pytest.mark.parametrize("detach", [False, True])
def test_joint_gradients_match_finite_differences(diag, vr, detach):
    pair = _small_pair(mode="diag" if diag else "full", seed=3)
    x, z = _batch(2, 3, seed=4)
    sigma = 0.5
    _, grads = obj.loss_joint(pair, x, z, sigma, gamma=0.7, diag=diag, vr=vr, detach_s1=detach)

    def f(arrays):
        p = pair.with_arrays(arrays)
        leaves = M.pair_leaves(p)
        total, _, _ = obj.joint_loss_tape(p, leaves, x, z, sigma, 0.7, diag, vr, detach_s1=detach)
        return float(total.data)

    if detach:
        # detaching changes the gradient, not the value: compare against FD of a
        # surrogate where the second-order term sees frozen s1 values
        frozen = M.eval_s1(pair.first, np.concatenate([x + sigma * z, x - sigma * z, x]) if vr else x + sigma * z)

        def f(arrays):  # noqa: F811
            p = pair.with_arrays(arrays)
            leaves = M.pair_leaves(p)
            pts = np.concatenate([x + sigma * z, x - sigma * z, x]) if vr else x + sigma * z
            s1, alpha, beta = M.taped_scores(p, leaves, pts)
            b = x.shape[0]
            cut = lambda t, k: None if t is None else ad.take(t, slice(k * b, (k + 1) * b))  # noqa: E731
            psi = obj.psi_diag if diag else obj.psi_full
            fz = Tensor(frozen)
            if vr:
                dsm = obj.dsm_vr_term(cut(s1, 0), cut(s1, 2), z, sigma)
                d2 = obj.d2sm_vr_term(*[psi(cut(fz, k), cut(alpha, k), cut(beta, k)) for k in range(3)], z, sigma, diag)
            else:
                dsm = obj.dsm_term(s1, z, sigma)
                d2 = obj.d2sm_term(psi(fz, alpha, beta), z, sigma, diag)
            return float(d2.data) + 0.7 * float(dsm.data)

    want = ad.numerical_gradient(f, pair.arrays(), h=1e-6)
    for g, w in zip(grads, want):
        np.testing.assert_allclose(g, w, rtol=1e-5, atol=1e-7)


def test_linear_d2sm_minimizer():
    rng = np.random.default_rng(0)
    pair = M.ScoreModelPair(M.FirstOrderModel.init(2, rng, depth=1),
                            M.SecondOrderModel.init(2, rng, rank=1, depth=1), 0.5)
    for i, (lr, steps, bs) in enumerate([(1e-2, 2000, 512), (1e-3, 2000, 512), (1e-4, 2000, 2048)]):
        cfg = TrainConfig(sigma=0.5, steps=steps, lr=lr, batch_size=bs, seed=i)
        pair, _ = train(pair, dists.standard_normal(2), cfg)
    g = np.linspace(-1, 1, 11)
    x = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    x = x[np.linalg.norm(x, axis=1) <= 1]  # bulk of the data; the affine alpha drifts in the tails
    s2 = M.eval_s2(pair.second, x)
    np.testing.assert_allclose(s2, np.broadcast_to(-np.eye(2) / 1.25, s2.shape), atol=0.03)


def test_diag_d2sm_converges_to_gaussian_diagonal():
    rng = np.random.default_rng(0)
    pair = M.ScoreModelPair(M.FirstOrderModel.init(2, rng, depth=1),
                            M.SecondOrderModel.init(2, rng, depth=1, mode="diag"), 0.5)
    for i, (lr, steps, bs) in enumerate([(1e-2, 2000, 512), (1e-3, 2000, 512), (1e-4, 2000, 2048)]):
        cfg = TrainConfig(sigma=0.5, steps=steps, lr=lr, batch_size=bs, seed=i, objective="d2sm-joint-diag")
        pair, _ = train(pair, dists.standard_normal(2), cfg)
    x = np.random.default_rng(1).standard_normal((100, 2))
    np.testing.assert_allclose(M.eval_s2(pair.second, x, full=False), -1 / 1.25, atol=0.03)


# -- Tweedie moments --------------------------------------------------------------


def _gauss_posterior(mean, cov, sigma, xt):
    """Closed-form N(mean, cov) prior with N(0, sigma^2 I) noise."""
    d = len(mean)
    k = cov @ np.linalg.inv(cov + sigma**2 * np.eye(d))
    return mean + k @ (xt - mean), cov - k @ cov


@pytest.mark.parametrize("d", [1, 2])
def test_gaussian_moment_identities(d):
    rng = np.random.default_rng(d)
    mean = rng.standard_normal(d)
    cov = dists.random_spd(d, rng, cond=10.0) if d > 1 else np.array([[0.6]])
    sigma = 0.7
    noisy = dists.multivariate_normal(mean, cov).noisy(sigma)
    for xt in rng.standard_normal((3, d)) * 2:
        _, s1, s2 = noisy.scores(xt)
        pm, pc = _gauss_posterior(mean, cov, sigma, xt)
        np.testing.assert_allclose(obj.tweedie_mean(s1, xt, sigma), pm, atol=1e-10)
        np.testing.assert_allclose(obj.posterior_cov(s1, s2, xt, sigma), pc, atol=1e-10)
        np.testing.assert_allclose(obj.posterior_second_moment(s1, s2, xt, sigma), pc + np.outer(pm, pm), atol=1e-10)
        rec = obj.moment_recursion(2, xt, sigma, obj.dist_oracle(noisy))
        np.testing.assert_allclose(rec, obj.posterior_second_moment(s1, s2, xt, sigma), atol=1e-8)


def test_standard_normal_examples():
    xt = np.array([2.0, 0.0])
    s1 = -xt / 2
    s2 = -np.eye(2) / 2
    np.testing.assert_allclose(obj.tweedie_mean(s1, xt, 1.0), [1.0, 0.0])
    np.testing.assert_allclose(obj.posterior_cov(s1, s2, xt, 1.0), 0.5 * np.eye(2))
    np.testing.assert_allclose(obj.posterior_second_moment(s1, s2, xt, 1.0), np.outer([1, 0], [1, 0]) + 0.5 * np.eye(2))
    np.testing.assert_array_equal(obj.tweedie_mean(np.zeros(2), xt, 0.3), xt)
    np.testing.assert_allclose(obj.posterior_cov(s1, -np.eye(2) / 0.09, xt, 0.3), 0.0, atol=1e-15)
    np.testing.assert_allclose(obj.posterior_second_moment(s1, s2, xt, 1e-9), np.outer(xt, xt), atol=1e-12)


def test_asymmetric_s2_rejected():
    with pytest.raises(ValueError):
        obj.posterior_second_moment(np.zeros(2), np.array([[0.0, 1.0], [0.0, 0.0]]), np.zeros(2), 1.0)


def test_third_moment_matches_quadrature():
    sigma, xt = 1.0, 2.0
    noisy = dists.standard_normal(1).noisy(sigma)
    m3 = obj.moment_recursion(3, np.array([xt]), sigma, obj.dist_oracle(noisy))
    post = lambda x: stats.norm.pdf(x) * stats.norm.pdf(xt - x, 0, sigma)  # noqa: E731
    z, _ = integrate.quad(post, -np.inf, np.inf, epsabs=1e-14)
    m, _ = integrate.quad(lambda x: x**3 * post(x), -np.inf, np.inf, epsabs=1e-14)
    np.testing.assert_allclose(m3.reshape(-1)[0], m / z, rtol=1e-4)
    np.testing.assert_allclose(obj.moment_recursion(1, np.array([xt]), sigma, obj.dist_oracle(noisy)), [1.0])


def test_recursion_order_guard():
    oracle = obj.dist_oracle(dists.standard_normal(1).noisy(1.0))
    with pytest.raises(ValueError):
        obj.moment_recursion(4, np.zeros(1), 1.0, oracle)
    with pytest.raises(ValueError):
        obj.moment_recursion(0, np.zeros(1), 1.0, oracle)


def test_tweedie_mean_two_mode_quadrature():
    base = dists.two_mode_gaussian([3.0], [-3.0], np.eye(1))
    sigma = 1.5
    noisy = base.noisy(sigma)
    for xt in (-1.0, 0.5, 2.5):
        _, s1, _ = noisy.scores(np.array([xt]))
        dens = lambda x: np.exp(base.log_density(np.array([x]))) * stats.norm.pdf(xt - x, 0, sigma)  # noqa: E731
        z, _ = integrate.quad(dens, -15, 15, epsabs=1e-14)
        m, _ = integrate.quad(lambda x: x * dens(x), -15, 15, epsabs=1e-14)
        np.testing.assert_allclose(obj.tweedie_mean(s1, np.array([xt]), sigma), [m / z], rtol=1e-8)
