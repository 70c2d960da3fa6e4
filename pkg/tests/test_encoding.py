import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lsed.dictionary import AtomDictionary, AutoencoderModel, MixtureModel
from lsed.encoding import (
    GmmEncoder,
    L1Encoder,
    L1EncoderConfig,
    SannEncoder,
    encode_gmm,
    encode_l1,
    encode_sann,
    gmm_posteriors,
    lasso_cd,
    make_encoder,
    model_fingerprint,
)


def random_dictionary(rng, d, n):
    D = rng.standard_normal((d, n))
    return AtomDictionary(D / np.linalg.norm(D, axis=0))


def reference_l1(D, x, eps):
    """Interior-point solution of min ||a||_1 s.t. ||D a - x||^2 <= eps."""
    a = cp.Variable(D.shape[1])
    prob = cp.Problem(cp.Minimize(cp.norm1(a)), [cp.sum_squares(D @ a - x) <= eps])
    prob.solve(solver=cp.CLARABEL)
    return prob.value


# --- l1 ----------------------------------------------------------------------------


def test_identity_tiny_epsilon_reconstructs():
    x = np.array([0.3, -1.2, 2.0, 0.0])
    code = encode_l1(AtomDictionary(np.eye(4)), x, L1EncoderConfig(epsilon=1e-12))
    np.testing.assert_allclose(code.values, x, atol=1e-5)
    assert not code.constraint_unmet


def test_identity_soft_threshold_closed_form():
    # KKT on orthonormal D: a = soft(x, t) with ||a - x||^2 = eps
    x = np.array([1.0, 0.2, 0.0])
    eps = 2 * 0.1**2
    code = encode_l1(AtomDictionary(np.eye(3)), x, L1EncoderConfig(epsilon=eps))
    np.testing.assert_allclose(code.values, [0.9, 0.1, 0.0], atol=1e-9)
    for solver in ("cd",):
        alt = encode_l1(AtomDictionary(np.eye(3)), x, L1EncoderConfig(epsilon=eps, solver=solver))
        np.testing.assert_allclose(alt.values, [0.9, 0.1, 0.0], atol=1e-5)


def test_rotated_orthonormal_soft_threshold(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    z = np.array([2.0, -1.0, 0.5, 0.05, 0.0])
    x = Q @ z
    t = 0.3
    expected = np.sign(z) * np.maximum(np.abs(z) - t, 0)
    eps = float(np.sum((expected - z) ** 2))
    code = encode_l1(AtomDictionary(Q), x, L1EncoderConfig(epsilon=eps))
    np.testing.assert_allclose(code.values, expected, atol=1e-5)


@pytest.mark.parametrize("solver", ["homotopy", "cd"])
def test_small_instances_match_reference(solver):
    rng = np.random.default_rng(7)
    for _ in range(30):
        D = random_dictionary(rng, 3, 5)
        x = rng.standard_normal(3)
        eps = 0.1
        code = encode_l1(D, x, L1EncoderConfig(epsilon=eps, solver=solver))
        r = D.atoms @ code.values - x
        assert r @ r <= eps * (1 + 1e-9)
        ref = reference_l1(D.atoms, x, eps)
        assert np.abs(code.values).sum() <= ref * 1.01 + 1e-9


def test_zero_input_gives_zero_code(rng):
    D = random_dictionary(rng, 4, 9)
    np.testing.assert_array_equal(encode_l1(D, np.zeros(4)).values, np.zeros(9))


def test_infeasible_sets_flag():
    # one atom cannot reach x within eps; best code is the projection
    with pytest.warns(UserWarning, match="undercomplete"):
        D = AtomDictionary(np.array([[1.0], [0.0]]))
    code = encode_l1(D, np.array([1.0, 1.0]), L1EncoderConfig(epsilon=0.1))
    assert code.constraint_unmet
    np.testing.assert_allclose(code.values, [1.0], atol=1e-9)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        encode_l1(AtomDictionary(np.eye(3)), np.ones(4))


@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 2.0))
def test_l1_constraint_or_flag(seed, eps):
    rng = np.random.default_rng(seed)
    D = random_dictionary(rng, 6, 14)
    x = rng.standard_normal(6)
    code = encode_l1(D, x, L1EncoderConfig(epsilon=eps))
    r = D.atoms @ code.values - x
    assert code.constraint_unmet or r @ r <= eps * (1 + 1e-9)
    assert np.all(np.isfinite(code.values))


def test_lasso_cd_kkt(rng):
    D = random_dictionary(rng, 6, 10).atoms
    x = rng.standard_normal(6)
    lam = 0.2
    a = lasso_cd(D, x, lam)
    g = D.T @ (x - D @ a)
    on = np.abs(a) > 1e-10
    np.testing.assert_allclose(g[on], lam * np.sign(a[on]), atol=1e-6)
    assert np.all(np.abs(g[~on]) <= lam + 1e-6)


# --- autoencoder -----------------------------------------------------------------------


def sann_model(rng, d=4, n=3):
    return AutoencoderModel(rng.standard_normal((d, n)), rng.standard_normal(n), rng.standard_normal((n, d)), rng.standard_normal(d))


def test_sann_zero_model_half():
    m = AutoencoderModel(np.zeros((4, 3)), np.zeros(3), np.zeros((3, 4)), np.zeros(4))
    np.testing.assert_array_equal(encode_sann(m, np.ones(4)).values, np.full(3, 0.5))


def test_sann_saturation():
    m = AutoencoderModel(np.zeros((2, 2)), np.array([20.0, 0.0]), np.zeros((2, 2)), np.zeros(2))
    assert encode_sann(m, np.ones(2)).values[0] >= 1 - 1e-8


def test_sann_matches_scalar_loop(rng):
    m = sann_model(rng)
    x = rng.standard_normal(4)
    expected = []
    for i in range(3):
        z = m.bias[i] + sum(m.weights[j, i] * x[j] for j in range(4))
        expected.append(1 / (1 + np.exp(-z)))
    np.testing.assert_allclose(encode_sann(m, x).values, expected, rtol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_sann_lipschitz(seed):
    rng = np.random.default_rng(seed)
    m = sann_model(rng)
    x, dx = rng.standard_normal(4), rng.standard_normal(4) * 0.1
    delta = np.abs(encode_sann(m, x + dx).values - encode_sann(m, x).values)
    bound = 0.25 * np.linalg.norm(m.weights, axis=0) * np.linalg.norm(dx)
    assert np.all(delta <= bound + 1e-15)


def test_sann_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        encode_sann(sann_model(rng), np.ones(3))


# --- mixture ---------------------------------------------------------------------------


def test_single_component():
    m = MixtureModel(np.array([1.0]), np.zeros((1, 2)), np.ones((1, 2)))
    np.testing.assert_array_equal(encode_gmm(m, np.array([5.0, -3.0])).values, [1.0])


def test_identical_components_split_evenly():
    m = MixtureModel(np.array([0.5, 0.5]), np.ones((2, 3)), np.full((2, 3), 0.7))
    np.testing.assert_allclose(encode_gmm(m, np.array([9.0, 0.0, -4.0])).values, [0.5, 0.5], atol=1e-15)


def test_posterior_matches_naive_formula():
    w = np.array([0.2, 0.5, 0.3])
    mu = np.array([[0.0, 1.0], [1.0, -1.0], [-0.5, 0.5]])
    var = np.array([[1.0, 0.5], [0.3, 2.0], [1.5, 1.5]])
    m = MixtureModel(w, mu, var)
    x = np.array([0.4, -0.2])
    dens = []
    for n in range(3):
        p = w[n]
        for j in range(2):
            p *= np.exp(-((x[j] - mu[n, j]) ** 2) / (2 * var[n, j])) / np.sqrt(2 * np.pi * var[n, j])
        dens.append(p)
    np.testing.assert_allclose(encode_gmm(m, x).values, np.array(dens) / sum(dens), rtol=1e-12)


def test_far_probe_does_not_underflow():
    m = MixtureModel(np.array([0.5, 0.5]), np.array([[0.0] * 15, [1.0] * 15]), np.full((2, 15), 1e-3))
    code = encode_gmm(m, np.full(15, 400.0))
    assert not code.constraint_unmet
    np.testing.assert_allclose(code.values, [0.0, 1.0])


@given(st.integers(0, 2**32 - 1))
def test_gmm_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(4))
    w /= w.sum()
    mu, var = rng.standard_normal((4, 3)), rng.uniform(0.2, 2, (4, 3))
    perm = rng.permutation(4)
    a = MixtureModel(w, mu, var)
    wp = w[perm] / w[perm].sum()
    b = MixtureModel(wp, mu[perm], var[perm])
    x = rng.standard_normal(3)
    np.testing.assert_allclose(encode_gmm(b, x).values, encode_gmm(a, x).values[perm], atol=1e-12)


def test_batch_posteriors_sum_to_one(rng):
    m = MixtureModel(np.full(5, 0.2), rng.standard_normal((5, 3)), rng.uniform(0.1, 1, (5, 3)))
    post, bad = gmm_posteriors(m, rng.standard_normal((100, 3)) * 10)
    assert not bad.any()
    np.testing.assert_allclose(post.sum(1), 1.0, atol=1e-12)
    assert np.all((post >= 0) & (post <= 1))


# --- encoder contract ----------------------------------------------------------------------


def test_contract_dispatch(rng):
    gmm = make_encoder(MixtureModel(np.full(3, 1 / 3), rng.standard_normal((3, 4)), np.ones((3, 4))))
    sann = make_encoder(sann_model(rng))
    l1 = make_encoder(random_dictionary(rng, 4, 8))
    assert isinstance(gmm, GmmEncoder) and isinstance(sann, SannEncoder) and isinstance(l1, L1Encoder)
    x = rng.standard_normal(4)
    assert gmm.encode(x).values.sum() == pytest.approx(1.0, abs=1e-9)
    s = sann.encode(x).values
    assert np.all((s > 0) & (s < 1)) and s.size == sann.n_codes == 3
    np.testing.assert_array_equal(l1.encode(np.zeros(4)).values, np.zeros(8))
    assert l1.encode(x).model_id == l1.model_id == model_fingerprint(l1.model)


def test_batch_matches_single(rng):
    encs = [
        make_encoder(MixtureModel(np.full(3, 1 / 3), rng.standard_normal((3, 4)), np.ones((3, 4)))),
        make_encoder(sann_model(rng)),
        make_encoder(random_dictionary(rng, 4, 8)),
    ]
    X = rng.standard_normal((6, 4))
    for enc in encs:
        batch = enc.encode_batch(X)
        for i in range(6):
            np.testing.assert_allclose(batch[i], enc.encode(X[i]).values, atol=1e-12)


def test_encoders_are_deterministic(rng):
    enc = make_encoder(random_dictionary(rng, 5, 12))
    x = rng.standard_normal(5)
    assert enc.encode(x).values.tobytes() == enc.encode(x.copy()).values.tobytes()


def test_fingerprint_tracks_parameters():
    a = AtomDictionary(np.eye(3))
    b = AtomDictionary(np.eye(3)[:, [1, 0, 2]])
    assert model_fingerprint(a) != model_fingerprint(b)
    assert model_fingerprint(a) == model_fingerprint(AtomDictionary(np.eye(3)))
