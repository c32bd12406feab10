import numpy as np
import pytest
from scipy.special import gammaln as sp_gammaln
from scipy.special import psi as sp_psi
from scipy.special import softmax as sp_softmax

from symvi import autodiff as ad
from symvi.prior import (
    PriorConfig,
    dropped_leaf_constant,
    expected_kl_categorical,
    kl_bernoulli,
    kl_dirichlet,
    kl_total,
    split_prob,
    split_probs,
)
from symvi.relax import VariationalParams
from symvi.trees import Topology


def test_split_prob_values():
    assert split_prob(0, 0.95, 2.0) == pytest.approx(0.95)
    assert split_prob(1, 0.95, 2.0) == pytest.approx(0.2375)
    assert split_prob(3, 0.95, 2.0) == pytest.approx(0.059375)


def test_split_probs_heap_layout():
    topo = Topology(2)
    assert split_probs(topo, 0.95, 2.0) == pytest.approx([0.95, 0.2375, 0.2375])


def test_prior_config_validation():
    with pytest.raises(ValueError):
        PriorConfig(alpha=1.5)
    with pytest.raises(ValueError):
        PriorConfig(delta=-1.0)
    resolved = PriorConfig().resolved(4, 9, 3)
    assert np.allclose(resolved.sigma0, 10.0 * np.eye(4))
    assert resolved.logdet_sigma0 == pytest.approx(4 * np.log(10.0))
    assert np.array_equal(resolved.eta_op, np.ones(9))


def bern_kl(p_tilde, p):
    tape = ad.Tape()
    return float(kl_bernoulli(tape.leaf(p_tilde), p).value)


def test_kl_bernoulli_values():
    assert bern_kl(0.3, 0.3) == pytest.approx(0.0, abs=1e-14)
    # frozen from 30-digit evaluations of the closed form
    assert bern_kl(0.5, 0.25) == pytest.approx(0.14384103622589046, rel=1e-10)
    assert bern_kl(0.9, 0.1) == pytest.approx(1.7577796618689755, rel=1e-10)


def test_kl_bernoulli_monte_carlo():
    rng = np.random.default_rng(10)
    for _ in range(10):
        p_tilde = rng.uniform(0.05, 0.95)
        p = rng.uniform(0.05, 0.95)
        draws = rng.uniform(size=200_000) < p_tilde
        ratio = np.where(
            draws,
            np.log(p_tilde / p),
            np.log((1 - p_tilde) / (1 - p)),
        )
        se = ratio.std(ddof=1) / np.sqrt(len(ratio))
        assert abs(bern_kl(p_tilde, p) - ratio.mean()) <= 5 * se + 1e-12


def dir_kl(eta_tilde, eta):
    tape = ad.Tape()
    return float(kl_dirichlet(tape.leaf(eta_tilde), np.asarray(eta, float)).value)


def test_kl_dirichlet_values():
    assert dir_kl([1.0, 1.0, 1.0], [1.0, 1.0, 1.0]) == pytest.approx(0.0, abs=1e-14)
    assert dir_kl([2.0, 1.0], [1.0, 1.0]) == pytest.approx(0.19314718055994531, rel=1e-10)
    assert dir_kl([1.0, 2.0], [1.0, 1.0]) == pytest.approx(0.19314718055994531, rel=1e-10)


def test_kl_dirichlet_monte_carlo():
    rng = np.random.default_rng(11)
    for _ in range(5):
        m = rng.integers(2, 5)
        eta_tilde = rng.uniform(0.5, 4.0, m)
        eta = rng.uniform(0.5, 4.0, m)
        w = rng.dirichlet(eta_tilde, size=300_000)
        log_beta = lambda v: np.sum(sp_gammaln(v)) - sp_gammaln(np.sum(v))
        ratio = log_beta(eta) - log_beta(eta_tilde) + (eta_tilde - eta) @ np.log(w).T
        se = ratio.std(ddof=1) / np.sqrt(len(ratio))
        assert abs(dir_kl(eta_tilde, eta) - ratio.mean()) <= 5 * se


def cat_kl(pi_tilde, eta_tilde):
    tape = ad.Tape()
    return float(
        expected_kl_categorical(tape.leaf(pi_tilde), tape.leaf(eta_tilde)).value
    )


def test_expected_kl_categorical_values():
    # uniform soft labels with unit concentrations, m = 2
    assert cat_kl([0.5, 0.5], [1.0, 1.0]) == pytest.approx(0.30685281944005469, rel=1e-10)
    # one-hot labels: x log x -> 0 handling for the zero entry
    assert cat_kl([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1.0, rel=1e-10)
    # degenerate single category
    assert cat_kl([1.0], [2.7]) == pytest.approx(0.0, abs=1e-12)


def test_expected_kl_categorical_monte_carlo():
    rng = np.random.default_rng(12)
    for _ in range(5):
        m = rng.integers(2, 6)
        pi_tilde = rng.dirichlet(np.ones(m))
        eta_tilde = rng.uniform(0.5, 4.0, m)
        w = rng.dirichlet(eta_tilde, size=300_000)
        ratio = np.sum(pi_tilde * (np.log(pi_tilde) - np.log(w)), axis=1)
        se = ratio.std(ddof=1) / np.sqrt(len(ratio))
        assert abs(cat_kl(pi_tilde, eta_tilde) - ratio.mean()) <= 5 * se


def random_phi(rng, n_trees, topo, n_ops, n_features, scale=1.0):
    return VariationalParams(
        ell=rng.normal(scale=scale, size=(n_trees, topo.n_internal)),
        a_op=rng.normal(scale=scale, size=(n_trees, topo.n_internal, n_ops)),
        a_ft=rng.normal(scale=scale, size=(n_trees, topo.n_nodes, n_features)),
        log_eta_op=rng.normal(scale=0.3, size=n_ops),
        log_eta_ft=rng.normal(scale=0.3, size=n_features),
    )


def transcribed_kl(phi, prior, topo):
    """Literal numpy transcription of the composite KL, kept independent of
    the tape implementation."""

    def log_beta(v):
        return np.sum(sp_gammaln(v)) - sp_gammaln(np.sum(v))

    def dirichlet_term(eta_tilde, eta):
        return log_beta(eta) - log_beta(eta_tilde) + np.sum(
            (eta_tilde - eta) * (sp_psi(eta_tilde) - sp_psi(np.sum(eta_tilde)))
        )

    eta_op = np.exp(phi.log_eta_op)
    eta_ft = np.exp(phi.log_eta_ft)
    total = dirichlet_term(eta_op, prior.eta_op) + dirichlet_term(eta_ft, prior.eta_ft)
    depths = topo.depths()[: topo.n_internal]
    p_prior = prior.alpha * (1.0 + depths) ** (-prior.delta)
    for j in range(phi.ell.shape[0]):
        for zeta in range(topo.n_internal):
            pt = 1.0 / (1.0 + np.exp(-phi.ell[j, zeta]))
            p = p_prior[zeta]
            total += pt * np.log(pt / p) + (1 - pt) * np.log((1 - pt) / (1 - p))
            pi_op = sp_softmax(phi.a_op[j, zeta])
            total += np.sum(pi_op * (np.log(pi_op) - sp_psi(eta_op) + sp_psi(np.sum(eta_op))))
            pi_ft = sp_softmax(phi.a_ft[j, zeta])
            total += np.sum(pi_ft * (np.log(pi_ft) - sp_psi(eta_ft) + sp_psi(np.sum(eta_ft))))
    return float(total)


def test_kl_total_matches_transcription():
    rng = np.random.default_rng(21)
    prior = PriorConfig().resolved(2, 4, 3)
    topo = Topology(1)
    for _ in range(20):
        phi = random_phi(rng, 1, topo, 4, 3)
        tape = ad.Tape()
        mine = float(kl_total(phi.on_tape(tape), prior, topo).value)
        assert mine == pytest.approx(transcribed_kl(phi, prior, topo), abs=1e-12 * max(1, abs(mine)))


def test_kl_total_zero_trees_keeps_dirichlet_terms():
    prior = PriorConfig().resolved(1, 4, 3)
    topo = Topology(2)
    phi = VariationalParams(
        ell=np.zeros((0, topo.n_internal)),
        a_op=np.zeros((0, topo.n_internal, 4)),
        a_ft=np.zeros((0, topo.n_nodes, 3)),
        log_eta_op=np.log([2.0, 1.0, 1.0, 1.0]),
        log_eta_ft=np.zeros(3),
    )
    tape = ad.Tape()
    value = float(kl_total(phi.on_tape(tape), prior, topo).value)
    assert value == pytest.approx(dir_kl([2.0, 1.0, 1.0, 1.0], np.ones(4)), rel=1e-12)


def test_kl_total_at_prior_centered_point():
    # gates at the prior, uniform labels, prior concentrations:
    # only the categorical Jensen gaps remain and they are positive
    prior = PriorConfig().resolved(3, 4, 3)
    topo = Topology(2)
    probs = split_probs(topo, prior.alpha, prior.delta)
    phi = VariationalParams(
        ell=np.tile(np.log(probs / (1 - probs)), (2, 1)),
        a_op=np.zeros((2, topo.n_internal, 4)),
        a_ft=np.zeros((2, topo.n_nodes, 3)),
        log_eta_op=np.zeros(4),
        log_eta_ft=np.zeros(3),
    )
    tape = ad.Tape()
    value = float(kl_total(phi.on_tape(tape), prior, topo).value)
    n_node_terms = 2 * topo.n_internal
    expected = n_node_terms * (cat_kl(np.full(4, 0.25), np.ones(4)) + cat_kl(np.full(3, 1 / 3), np.ones(3)))
    assert value == pytest.approx(expected, rel=1e-10)
    assert value > 0


def test_kl_total_nonnegative_on_random_draws():
    rng = np.random.default_rng(22)
    prior = PriorConfig().resolved(3, 9, 4)
    topo = Topology(3)
    for _ in range(1000):
        phi = random_phi(rng, 2, topo, 9, 4, scale=rng.uniform(0.1, 2.0))
        tape = ad.Tape()
        assert float(kl_total(phi.on_tape(tape), prior, topo).value) >= -1e-10


def test_kl_total_gradient_matches_finite_differences():
    rng = np.random.default_rng(23)
    prior = PriorConfig().resolved(2, 4, 3)
    topo = Topology(1)
    phi = random_phi(rng, 1, topo, 4, 3)
    names = phi.names()
    shapes = {n: getattr(phi, n).shape for n in names}
    sizes = {n: getattr(phi, n).size for n in names}

    def unpack(flat):
        out = {}
        offset = 0
        for n in names:
            out[n] = flat[offset : offset + sizes[n]].reshape(shapes[n])
            offset += sizes[n]
        return VariationalParams(**out)

    def fn(tape, xs):
        flat = np.array([x.value for x in xs])
        offset = 0
        rebuilt = {}
        for n in names:
            block = xs[offset : offset + sizes[n]]
            # rebuild array-shaped nodes from scalar leaves via arithmetic
            # is awkward; instead evaluate kl_total on a fresh leaf and rely
            # on check below using full-array finite differences
            offset += sizes[n]
        raise NotImplementedError

    # full-array finite differences against the tape gradient
    flat0 = np.concatenate([getattr(phi, n).ravel() for n in names])
    tape = ad.Tape()
    nodes = phi.on_tape(tape)
    grads = tape.backward(kl_total(nodes, prior, topo))
    grad_flat = np.concatenate([np.asarray(grads[getattr(nodes, n)]).ravel() for n in names])

    h = 1e-6
    fd = np.empty_like(flat0)
    for i in range(flat0.size):
        up = flat0.copy()
        up[i] += h
        down = flat0.copy()
        down[i] -= h
        tape_u = ad.Tape()
        val_u = float(kl_total(unpack(up).on_tape(tape_u), prior, topo).value)
        tape_d = ad.Tape()
        val_d = float(kl_total(unpack(down).on_tape(tape_d), prior, topo).value)
        fd[i] = (val_u - val_d) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(grad_flat), np.abs(fd)), 1e-8)
    assert np.max(np.abs(grad_flat - fd) / denom) <= 1e-5


def test_dropped_leaf_constant():
    prior = PriorConfig().resolved(4, 9, 3)
    topo = Topology(3)
    p_leaf = split_prob(3, prior.alpha, prior.delta)
    expected = 3 * 8 * (-np.log1p(-p_leaf))
    assert dropped_leaf_constant(prior, topo, 3) == pytest.approx(expected, rel=1e-12)
