"""Synthetic optimization problems with exact gradient oracles.

Each problem exposes the full-dataset objective F, its exact gradient, and
per-sample losses/gradients whose mean recovers F, so stochastic gradients
are unbiased. Constructions are deterministic in (spec, seed); nothing is
stored on disk. Known constants (optimum, curvature bound) are exposed
where they exist so diagnostics and acceptance checks can use them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "Problem",
    "QuadraticProblem",
    "LogisticProblem",
    "TinyMLPProblem",
    "make_quadratic",
    "make_logistic",
    "make_tiny_mlp",
    "build_problem",
    "partition_indices",
    "draw_batch",
    "epoch_batches",
    "finite_diff_check",
    "FiniteDiffReport",
    "estimate_M",
]


class Problem:
    """Interface shared by all problems.

    Subclasses fill in ``d``, ``n_samples``, per-sample losses and
    gradients, and optionally ``x_star`` / ``f_star`` / ``lipschitz``.
    Instances are immutable after construction; gradient evaluation is a
    pure function.
    """

    d: int
    n_samples: int
    x_star: Optional[np.ndarray] = None
    f_star: Optional[float] = None
    lipschitz: Optional[float] = None
    spec: dict

    def initial_point(self) -> np.ndarray:
        return np.zeros(self.d)

    def loss(self, w: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_gradient(self, w: np.ndarray, idx: int) -> np.ndarray:
        raise NotImplementedError

    def batch_gradient(self, w: np.ndarray, indices: np.ndarray) -> np.ndarray:
        """Mean gradient over the given sample indices (with multiplicity)."""
        g = np.zeros(self.d)
        for idx in indices:
            g += self.sample_gradient(w, int(idx))
        return g / len(indices)


class QuadraticProblem(Problem):
    """F(x) = 1/2 (x - x*)^T A (x - x*), A diagonal with eigenvalues
    log-spaced in [1, condition_number].

    Sample e is the e-th coordinate piece, scaled by d so the dataset mean
    recovers F: f_e(x) = (d/2) A_e (x_e - x*_e)^2. Stochastic gradients are
    therefore unbiased and vanish jointly at x*.
    """

    def __init__(self, d: int, condition_number: float, seed: int, x_star: Optional[np.ndarray] = None):
        if d < 1:
            raise ValueError("dimension must be >= 1")
        if condition_number < 1:
            raise ValueError("condition number must be >= 1")
        self.d = d
        self.n_samples = d
        self.eigs = np.logspace(0.0, np.log10(condition_number), d)
        rng = np.random.default_rng(seed)
        self.x_star = np.array(x_star, dtype=np.float64) if x_star is not None else rng.standard_normal(d)
        if self.x_star.shape != (d,):
            raise ValueError("x_star shape mismatch")
        self.f_star = 0.0
        self.lipschitz = float(condition_number)
        self.spec = {"kind": "quadratic", "d": d, "condition_number": condition_number, "seed": seed}

    def loss(self, w):
        r = w - self.x_star
        return float(0.5 * np.dot(self.eigs * r, r))

    def gradient(self, w):
        return self.eigs * (w - self.x_star)

    def sample_gradient(self, w, idx):
        g = np.zeros(self.d)
        g[idx] = self.d * self.eigs[idx] * (w[idx] - self.x_star[idx])
        return g

    def sample_loss(self, w, idx):
        return float(0.5 * self.d * self.eigs[idx] * (w[idx] - self.x_star[idx]) ** 2)

    def batch_gradient(self, w, indices):
        g = np.zeros(self.d)
        np.add.at(g, indices, self.d * self.eigs[indices] * (w[indices] - self.x_star[indices]))
        return g / len(indices)


class LogisticProblem(Problem):
    """L2-regularized logistic regression on separable two-class data.

    Points are gaussian, labeled by a random unit normal, then pushed apart
    along that normal so every sample has functional margin >= margin/2.
    The regularizer makes F strongly convex; gradients are exact.
    """

    def __init__(self, n_samples: int, d: int, margin: float, seed: int, l2: float = 1e-3):
        if margin <= 0:
            raise ValueError("margin must be positive")
        if n_samples < 1 or d < 1:
            raise ValueError("bad shape")
        rng = np.random.default_rng(seed)
        w_true = rng.standard_normal(d)
        w_true /= np.linalg.norm(w_true)
        X = rng.standard_normal((n_samples, d))
        raw = X @ w_true
        y = np.where(raw >= 0.0, 1.0, -1.0)
        X = X + np.outer(y * (margin / 2.0), w_true)
        self.X, self.y = X, y
        self.d = d
        self.n_samples = n_samples
        self.l2 = l2
        # Curvature bound of F: sigmoid'' <= 1/4 on the data term.
        gram_top = float(np.linalg.eigvalsh((X.T @ X) / n_samples)[-1])
        self.lipschitz = 0.25 * gram_top + l2
        self.spec = {"kind": "logistic", "n_samples": n_samples, "d": d, "margin": margin, "seed": seed, "l2": l2}

    def _margins(self, w):
        return self.y * (self.X @ w)

    def loss(self, w):
        z = self._margins(w)
        return float(np.mean(np.logaddexp(0.0, -z)) + 0.5 * self.l2 * np.dot(w, w))

    def gradient(self, w):
        z = self._margins(w)
        sig = 1.0 / (1.0 + np.exp(z))  # sigmoid(-z)
        return -(self.X.T @ (self.y * sig)) / self.n_samples + self.l2 * w

    def sample_gradient(self, w, idx):
        z = self.y[idx] * float(self.X[idx] @ w)
        sig = 1.0 / (1.0 + np.exp(z))
        return -self.y[idx] * sig * self.X[idx] + self.l2 * w

    def batch_gradient(self, w, indices):
        Xb, yb = self.X[indices], self.y[indices]
        z = yb * (Xb @ w)
        sig = 1.0 / (1.0 + np.exp(z))
        return -(Xb.T @ (yb * sig)) / len(indices) + self.l2 * w

    def accuracy(self, w) -> float:
        pred = np.where(self.X @ w >= 0.0, 1.0, -1.0)
        return float(np.mean(pred == self.y))


class TinyMLPProblem(Problem):
    """One-hidden-layer tanh network on synthetic regression data.

    Parameters are flattened as [W1 (h x in), b1 (h), W2 (out x h), b2 (out)].
    Loss is half mean squared error; the gradient is exact backprop.
    """

    def __init__(self, layer_sizes: tuple[int, int, int], seed: int, n_samples: int = 128,
                 zero_targets: bool = False):
        if len(layer_sizes) != 3 or min(layer_sizes) < 1:
            raise ValueError("layer_sizes must be (in, hidden, out) with positive entries")
        n_in, n_h, n_out = layer_sizes
        n_params = n_h * n_in + n_h + n_out * n_h + n_out
        if n_params > 10_000:
            raise ValueError(f"{n_params} parameters exceeds the 10_000 budget")
        self.layer_sizes = layer_sizes
        self.d = n_params
        self.n_samples = n_samples
        rng = np.random.default_rng(seed)
        self.X = rng.standard_normal((n_samples, n_in))
        if zero_targets:
            self.Y = np.zeros((n_samples, n_out))
        else:
            teacher_w = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
            self.Y = np.tanh(self.X @ teacher_w) + 0.1 * rng.standard_normal((n_samples, n_out))
        self._w0 = 0.5 * rng.standard_normal(n_params) / np.sqrt(n_in)
        self.spec = {
            "kind": "tiny_mlp", "layer_sizes": list(layer_sizes), "seed": seed,
            "n_samples": n_samples, "zero_targets": zero_targets,
        }

    def initial_point(self):
        return self._w0.copy()

    def _unpack(self, w):
        n_in, n_h, n_out = self.layer_sizes
        i = 0
        W1 = w[i:i + n_h * n_in].reshape(n_h, n_in); i += n_h * n_in
        b1 = w[i:i + n_h]; i += n_h
        W2 = w[i:i + n_out * n_h].reshape(n_out, n_h); i += n_out * n_h
        b2 = w[i:i + n_out]
        return W1, b1, W2, b2

    def _forward(self, w, X):
        W1, b1, W2, b2 = self._unpack(w)
        H = np.tanh(X @ W1.T + b1)
        return H @ W2.T + b2, H

    def loss(self, w):
        out, _ = self._forward(w, self.X)
        return float(0.5 * np.mean(np.sum((out - self.Y) ** 2, axis=1)))

    def _backprop(self, w, X, Y):
        W1, b1, W2, b2 = self._unpack(w)
        n = X.shape[0]
        H = np.tanh(X @ W1.T + b1)
        out = H @ W2.T + b2
        delta = (out - Y) / n                      # d loss / d out
        gW2 = delta.T @ H
        gb2 = delta.sum(axis=0)
        dH = (delta @ W2) * (1.0 - H ** 2)
        gW1 = dH.T @ X
        gb1 = dH.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def gradient(self, w):
        return self._backprop(w, self.X, self.Y)

    def sample_gradient(self, w, idx):
        return self._backprop(w, self.X[idx:idx + 1], self.Y[idx:idx + 1])

    def batch_gradient(self, w, indices):
        return self._backprop(w, self.X[indices], self.Y[indices])


def make_quadratic(d: int, condition_number: float, seed: int, x_star=None) -> QuadraticProblem:
    return QuadraticProblem(d, condition_number, seed, x_star=x_star)


def make_logistic(n_samples: int, d: int, margin: float, seed: int, l2: float = 1e-3) -> LogisticProblem:
    return LogisticProblem(n_samples, d, margin, seed, l2=l2)


def make_tiny_mlp(layer_sizes, seed: int, n_samples: int = 128, zero_targets: bool = False) -> TinyMLPProblem:
    return TinyMLPProblem(tuple(layer_sizes), seed, n_samples=n_samples, zero_targets=zero_targets)


_BUILDERS = {
    "quadratic": lambda s: make_quadratic(s["d"], s["condition_number"], s["seed"]),
    "logistic": lambda s: make_logistic(s["n_samples"], s["d"], s["margin"], s["seed"], s.get("l2", 1e-3)),
    "tiny_mlp": lambda s: make_tiny_mlp(s["layer_sizes"], s["seed"], s.get("n_samples", 128),
                                        s.get("zero_targets", False)),
}


def build_problem(spec: dict) -> Problem:
    """Construct a problem from its serialized spec dict."""
    try:
        kind = spec["kind"]
        builder = _BUILDERS[kind]
    except KeyError as exc:
        raise ValueError(f"unknown problem spec {spec!r}") from exc
    return builder(spec)


# ---------------------------------------------------------------------------
# data partitioning and batch draws
# ---------------------------------------------------------------------------

def partition_indices(n_samples: int, P: int, seed: int) -> list[np.ndarray]:
    """Disjoint covering partition by seeded shuffle; sizes within 1 of n/P."""
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n_samples)
    return [np.sort(part) for part in np.array_split(perm, P)]


def draw_batch(partition: np.ndarray, b: int, seed: int, rank: int, t: int) -> np.ndarray:
    """Sample b indices from a worker's partition, with replacement.

    Reproducible and collision-free across (seed, rank, t).
    """
    rng = np.random.default_rng([seed, rank, t])
    return partition[rng.integers(0, len(partition), size=b)]


def epoch_batches(partition: np.ndarray, b: int, seed: int, rank: int, epoch: int) -> list[np.ndarray]:
    """Shuffle the partition and chunk it into consecutive batches.

    Without-replacement epoch mode; exists for the unbiasedness
    enumeration test, not for training runs.
    """
    rng = np.random.default_rng([seed, rank, epoch, 0xE60C])
    perm = partition[rng.permutation(len(partition))]
    return [perm[i:i + b] for i in range(0, len(perm), b)]


# ---------------------------------------------------------------------------
# gradient checking and second-moment estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FiniteDiffReport:
    max_rel_error: float
    worst_coordinate: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_diff_check(problem: Problem, point: np.ndarray, step: float, tol: float) -> FiniteDiffReport:
    """Central differences per coordinate against the analytic gradient.

    Per-coordinate error is |fd - g| / max(1, |g|). Reports; never raises.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    w = np.asarray(point, dtype=np.float64)
    g = problem.gradient(w)
    worst, worst_i = 0.0, 0
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = step
        fd = (problem.loss(w + e) - problem.loss(w - e)) / (2.0 * step)
        err = abs(fd - g[i]) / max(1.0, abs(g[i]))
        if err > worst:
            worst, worst_i = err, i
    return FiniteDiffReport(max_rel_error=worst, worst_coordinate=worst_i, tol=tol)


def estimate_M(problem: Problem, sample_count: int, radius: float, seed: int) -> float:
    """Empirical max per-sample gradient norm near the initial point.

    Draws (sample index, point) pairs with the point uniform in the
    coordinate box of half-width ``radius`` around ``initial_point()`` and
    returns max ||grad f_e||. Used as the second-moment estimate in the
    replica-spread bound.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    rng = np.random.default_rng(seed)
    w0 = problem.initial_point()
    best = 0.0
    for _ in range(sample_count):
        e = int(rng.integers(0, problem.n_samples))
        w = w0 + radius * rng.uniform(-1.0, 1.0, size=problem.d)
        best = max(best, float(np.linalg.norm(problem.sample_gradient(w, e))))
    return best
