"""Problem oracle tests: exact gradients, partitions, second-moment bounds."""

import numpy as np
import pytest

from wagma.problems import (
    Problem,
    build_problem,
    draw_batch,
    epoch_batches,
    estimate_M,
    finite_diff_check,
    make_logistic,
    make_quadratic,
    make_tiny_mlp,
    partition_indices,
)

from oracles import central_difference_gradient, power_iteration_max_eig, sequential_sgd


# ---------------------------------------------------------------------------
# quadratic
# ---------------------------------------------------------------------------

def test_quadratic_d1_values():
    prob = make_quadratic(1, 1.0, seed=0, x_star=np.zeros(1))
    assert prob.loss(np.array([3.0])) == 4.5
    assert np.array_equal(prob.gradient(np.array([3.0])), np.array([3.0]))


def test_quadratic_gradient_zero_at_optimum():
    prob = make_quadratic(16, 25.0, seed=3)
    assert np.allclose(prob.gradient(prob.x_star), 0.0, atol=0.0)
    assert prob.loss(prob.x_star) == 0.0


def test_quadratic_lipschitz_matches_power_iteration():
    prob = make_quadratic(32, 10.0, seed=1)
    lam = power_iteration_max_eig(np.diag(prob.eigs))
    assert abs(lam - prob.lipschitz) / prob.lipschitz <= 1e-6


def test_quadratic_sample_mean_recovers_full_gradient():
    prob = make_quadratic(8, 4.0, seed=2)
    w = np.random.default_rng(0).standard_normal(8)
    mean_g = np.mean([prob.sample_gradient(w, e) for e in range(prob.n_samples)], axis=0)
    assert np.allclose(mean_g, prob.gradient(w), rtol=1e-12)


def test_quadratic_batch_gradient_handles_repeats():
    prob = make_quadratic(4, 2.0, seed=5)
    w = np.ones(4)
    idx = np.array([1, 1, 3])
    expected = (2 * prob.sample_gradient(w, 1) + prob.sample_gradient(w, 3)) / 3
    assert np.allclose(prob.batch_gradient(w, idx), expected, rtol=1e-15)


def test_quadratic_invalid_params():
    with pytest.raises(ValueError):
        make_quadratic(0, 2.0, 0)
    with pytest.raises(ValueError):
        make_quadratic(4, 0.5, 0)


# ---------------------------------------------------------------------------
# logistic
# ---------------------------------------------------------------------------

def test_logistic_loss_at_zero_is_ln2():
    prob = make_logistic(64, 5, margin=1.0, seed=0, l2=1e-3)
    assert abs(prob.loss(np.zeros(5)) - np.log(2.0)) < 1e-12


def test_logistic_gradient_matches_finite_differences_at_zero():
    prob = make_logistic(128, 8, margin=1.0, seed=1)
    fd = central_difference_gradient(prob.loss, np.zeros(8), step=1e-5)
    g = prob.gradient(np.zeros(8))
    assert np.max(np.abs(fd - g)) < 1e-6


def test_logistic_margin_is_enforced():
    # The construction guarantees separability: the negated gradient at the
    # origin aligns with the class-mean direction and classifies perfectly.
    prob = make_logistic(256, 6, margin=2.0, seed=4)
    assert prob.accuracy(-prob.gradient(np.zeros(6))) == 1.0


def test_logistic_degenerate_margin_rejected():
    with pytest.raises(ValueError):
        make_logistic(16, 4, margin=0.0, seed=0)
    with pytest.raises(ValueError):
        make_logistic(16, 4, margin=-1.0, seed=0)


def test_logistic_sequential_sgd_reaches_99_percent():
    # Frozen target from the sequential oracle: plain SGD, eta=0.5, b=16,
    # T=600 reaches >= 99% training accuracy on this instance.
    prob = make_logistic(4096, 20, margin=1.0, seed=7)
    part = np.arange(prob.n_samples)
    hist = sequential_sgd(
        prob,
        indices_for_step=lambda t: draw_batch(part, 16, seed=11, rank=0, t=t),
        eta=0.5,
        T=600,
    )
    assert prob.accuracy(hist[-1]) >= 0.99


# ---------------------------------------------------------------------------
# tiny MLP
# ---------------------------------------------------------------------------

def test_mlp_backprop_matches_finite_differences():
    prob = make_tiny_mlp((4, 6, 2), seed=9, n_samples=32)
    rng = np.random.default_rng(10)
    for _ in range(10):
        w = prob.initial_point() + 0.3 * rng.standard_normal(prob.d)
        fd = central_difference_gradient(prob.loss, w, step=1e-5)
        g = prob.gradient(w)
        rel = np.max(np.abs(fd - g) / np.maximum(1.0, np.abs(g)))
        assert rel <= 1e-5


def test_mlp_zero_everything_gives_zero_gradient():
    prob = make_tiny_mlp((3, 5, 2), seed=0, n_samples=16, zero_targets=True)
    g = prob.gradient(np.zeros(prob.d))
    assert np.array_equal(g, np.zeros(prob.d))


def test_mlp_duplicate_seed_identical():
    a = make_tiny_mlp((4, 8, 1), seed=42)
    b = make_tiny_mlp((4, 8, 1), seed=42)
    assert np.array_equal(a.X, b.X)
    assert np.array_equal(a.Y, b.Y)
    assert np.array_equal(a.initial_point(), b.initial_point())


def test_mlp_parameter_budget_enforced():
    with pytest.raises(ValueError):
        make_tiny_mlp((100, 100, 10), seed=0)


def test_mlp_sample_gradients_average_to_full():
    prob = make_tiny_mlp((3, 4, 2), seed=2, n_samples=8)
    w = prob.initial_point()
    mean_g = np.mean([prob.sample_gradient(w, e) for e in range(prob.n_samples)], axis=0)
    assert np.allclose(mean_g, prob.gradient(w), rtol=1e-10, atol=1e-14)


# ---------------------------------------------------------------------------
# finite_diff_check
# ---------------------------------------------------------------------------

def test_finite_diff_check_quadratic_tight():
    prob = make_quadratic(6, 10.0, seed=0)
    report = finite_diff_check(prob, np.ones(6), step=1e-5, tol=1e-9)
    assert report.passed
    assert report.max_rel_error <= 1e-9


class _ConstantProblem(Problem):
    def __init__(self, d):
        self.d = d
        self.n_samples = 1
        self.spec = {"kind": "constant"}

    def loss(self, w):
        return 7.0

    def gradient(self, w):
        return np.zeros(self.d)


def test_finite_diff_check_constant_loss():
    report = finite_diff_check(_ConstantProblem(3), np.zeros(3), step=1e-5, tol=0.0)
    assert report.max_rel_error == 0.0
    assert report.passed


def test_finite_diff_check_tol_zero_fails_on_nonlinear():
    prob = make_logistic(32, 4, margin=1.0, seed=3)
    report = finite_diff_check(prob, np.full(4, 0.1), step=1e-4, tol=0.0)
    assert not report.passed
    assert report.max_rel_error > 0.0


def test_finite_diff_check_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(_ConstantProblem(1), np.zeros(1), step=0.0, tol=1.0)


# ---------------------------------------------------------------------------
# estimate_M
# ---------------------------------------------------------------------------

def test_estimate_m_quadratic_d1():
    prob = make_quadratic(1, 1.0, seed=0, x_star=np.zeros(1))
    m_hat = estimate_M(prob, sample_count=4000, radius=2.0, seed=1)
    assert 1.9 <= m_hat <= 2.0


def test_estimate_m_zero_radius_at_optimum():
    prob = make_quadratic(3, 2.0, seed=1, x_star=np.zeros(3))
    assert estimate_M(prob, sample_count=50, radius=0.0, seed=0) == 0.0


def test_estimate_m_logistic_analytic_bound():
    prob = make_logistic(256, 8, margin=1.0, seed=5, l2=1e-2)
    radius = 1.5
    m_hat = estimate_M(prob, sample_count=2000, radius=radius, seed=2)
    # ||grad f_e|| <= ||x_e|| + l2 * ||w||, and ||w||_2 <= radius * sqrt(d)
    bound = float(np.max(np.linalg.norm(prob.X, axis=1))) + prob.l2 * radius * np.sqrt(prob.d)
    assert m_hat <= bound


# ---------------------------------------------------------------------------
# partitioning and batches
# ---------------------------------------------------------------------------

def test_partition_covers_disjointly():
    for n, P in [(64, 8), (100, 8), (17, 4)]:
        parts = partition_indices(n, P, seed=3)
        assert len(parts) == P
        sizes = [len(p) for p in parts]
        assert max(sizes) - min(sizes) <= 1
        allidx = np.concatenate(parts)
        assert sorted(allidx.tolist()) == list(range(n))


def test_draw_batch_reproducible_and_in_partition():
    part = np.array([3, 7, 11, 19])
    a = draw_batch(part, 8, seed=1, rank=2, t=5)
    b = draw_batch(part, 8, seed=1, rank=2, t=5)
    c = draw_batch(part, 8, seed=1, rank=2, t=6)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert set(a.tolist()) <= set(part.tolist())


def test_epoch_batches_unbiasedness_by_enumeration():
    # Mean of the per-batch gradients over one epoch equals the exact
    # partition gradient when the batch size divides the partition.
    prob = make_quadratic(8, 3.0, seed=4)
    part = partition_indices(prob.n_samples, 2, seed=0)[0]
    assert len(part) == 4
    w = np.random.default_rng(1).standard_normal(8)
    batches = epoch_batches(part, b=2, seed=9, rank=0, epoch=0)
    assert sorted(np.concatenate(batches).tolist()) == sorted(part.tolist())
    mean_of_batches = np.mean([prob.batch_gradient(w, b) for b in batches], axis=0)
    partition_grad = np.mean([prob.sample_gradient(w, int(e)) for e in part], axis=0)
    assert np.allclose(mean_of_batches, partition_grad, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_build_problem_roundtrip():
    for spec in [
        {"kind": "quadratic", "d": 5, "condition_number": 4.0, "seed": 6},
        {"kind": "logistic", "n_samples": 32, "d": 4, "margin": 1.0, "seed": 6},
        {"kind": "tiny_mlp", "layer_sizes": [3, 4, 1], "seed": 6},
    ]:
        a = build_problem(spec)
        bprob = build_problem(a.spec)
        w = np.linspace(-1, 1, a.d)
        assert a.loss(w) == bprob.loss(w)


def test_build_problem_unknown_kind():
    with pytest.raises(ValueError):
        build_problem({"kind": "nope"})
