"""Client objective ensembles, gradient oracles, and their analytic constants.

The global objective is the *average* of the client losses,
f(x) = (1/N) sum_i f_i(x); all bound quantities use this convention.
Builders compute smoothness / heterogeneity constants from the data rather
than trusting caller-supplied values, and record how each constant was
obtained in ``ProblemInstance.constant_methods``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod


def softplus(z):
    # overflow-safe log(1 + exp(z))
    return np.logaddexp(0.0, z)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class ScalarQuadratic:
    """Client loss 0.5 * (x - b)^2 on a one-dimensional iterate."""

    b: float

    @property
    def dim(self) -> int:
        return 1

    def loss(self, x) -> float:
        return 0.5 * float((x[0] - self.b) ** 2)

    def grad(self, x):
        return np.array([x[0] - self.b])

    @property
    def local_minimizer(self):
        return np.array([float(self.b)])

    def lipschitz(self) -> float:
        return 1.0


@dataclass(frozen=True)
class LinearRegressionObjective:
    """Client loss 0.5 * ||A x - b||^2."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def loss(self, x) -> float:
        r = self.A @ x - self.b
        return 0.5 * float(r @ r)

    def grad(self, x):
        return self.A.T @ (self.A @ x - self.b)

    @property
    def n_samples(self) -> int:
        return self.A.shape[0]

    def grad_batch(self, x, indices):
        A = self.A[indices]
        return A.T @ (A @ x - self.b[indices]) * (self.A.shape[0] / len(indices))

    @property
    def local_minimizer(self):
        sol, *_ = np.linalg.lstsq(self.A, self.b, rcond=None)
        return sol

    def lipschitz(self) -> float:
        return float(np.linalg.eigvalsh(self.A.T @ self.A)[-1])


@dataclass(frozen=True)
class MLPObjective:
    """Softmax cross-entropy of a one-hidden-layer softplus network.

    Parameters are a flat vector: W1 (h, in), b1 (h), W2 (C, h), b2 (C).
    Softplus activations keep the loss smooth so the gradient Lipschitz
    constant is finite and estimable.
    """

    X: np.ndarray
    y: np.ndarray
    hidden: int
    n_classes: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=int)
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        din = self.X.shape[1]
        return self.hidden * din + self.hidden + self.n_classes * self.hidden + self.n_classes

    def _unpack(self, x):
        din, h, C = self.X.shape[1], self.hidden, self.n_classes
        i = 0
        W1 = x[i:i + h * din].reshape(h, din); i += h * din
        b1 = x[i:i + h]; i += h
        W2 = x[i:i + C * h].reshape(C, h); i += C * h
        b2 = x[i:i + C]
        return W1, b1, W2, b2

    def _forward(self, x, X):
        W1, b1, W2, b2 = self._unpack(x)
        Z1 = X @ W1.T + b1
        H = softplus(Z1)
        logits = H @ W2.T + b2
        logits = logits - logits.max(axis=1, keepdims=True)
        logZ = np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return Z1, H, logits, logZ

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def loss(self, x) -> float:
        _, _, logits, logZ = self._forward(x, self.X)
        ll = logits[np.arange(len(self.y)), self.y] - logZ[:, 0]
        return float(-ll.mean())

    def grad(self, x):
        return self._grad_on(x, np.arange(self.X.shape[0]))

    def grad_batch(self, x, indices):
        return self._grad_on(x, np.asarray(indices))

    def _grad_on(self, x, idx):
        X, y = self.X[idx], self.y[idx]
        W1, b1, W2, b2 = self._unpack(x)
        Z1, H, logits, logZ = self._forward(x, X)
        p = np.exp(logits - logZ)
        p[np.arange(len(y)), y] -= 1.0
        p /= len(y)
        dW2 = p.T @ H
        db2 = p.sum(axis=0)
        dH = p @ W2
        dZ1 = dH * sigmoid(Z1)
        dW1 = dZ1.T @ X
        db1 = dZ1.sum(axis=0)
        return np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])

    @property
    def local_minimizer(self):
        return None

    def lipschitz(self) -> float:
        raise NotImplementedError("estimated at the ensemble level")


@dataclass(frozen=True)
class ProblemInstance:
    """A federation of client objectives with known analytic constants.

    ``L`` is the per-client gradient Lipschitz bound, ``G`` the declared
    stochastic-gradient norm bound, ``sigma_l`` the intra-client gradient
    noise level and ``sigma_g`` the inter-client gradient divergence bound.
    """

    clients: tuple
    dim: int
    L: float
    G: float
    sigma_l: float
    sigma_g: float
    f_star: float | None = None
    global_optimum: np.ndarray | None = None
    constant_methods: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.clients) < 1 or self.dim < 1:
            raise ValueError("need at least one client and one dimension")
        if self.L <= 0 or self.sigma_l < 0 or self.sigma_g < 0:
            raise ValueError("invalid constants: require L > 0, sigma_l >= 0, sigma_g >= 0")

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def grad_mean(self, x):
        g = np.zeros(self.dim)
        for obj in self.clients:
            g += obj.grad(x)
        return g / self.n_clients

    def grad_sum(self, x):
        return self.grad_mean(x) * self.n_clients

    def loss_mean(self, x) -> float:
        return sum(obj.loss(x) for obj in self.clients) / self.n_clients


class GradientOracle:
    """Stochastic gradient source for one client.

    ``deterministic`` returns the exact gradient; ``gaussian`` adds isotropic
    noise with total second moment sigma_l^2 (per-coordinate variance
    sigma_l^2 / d); ``minibatch`` subsamples data rows. A draw whose norm
    exceeds the declared bound ``grad_bound`` is recorded as a violation
    instead of being projected, so unbiasedness is preserved and bound
    evaluators can refuse to certify.
    """

    def __init__(self, objective, noise_mode="deterministic", sigma_l=0.0,
                 batch_size=None, rng=None, grad_bound=None):
        if noise_mode not in ("deterministic", "gaussian", "minibatch"):
            raise ValueError(f"unknown noise mode {noise_mode!r}")
        if noise_mode != "deterministic" and rng is None:
            raise ValueError("stochastic oracle needs an rng stream")
        if noise_mode == "minibatch" and not hasattr(objective, "grad_batch"):
            raise ValueError("objective does not support minibatch sampling")
        self.objective = objective
        self.noise_mode = noise_mode
        self.sigma_l = float(sigma_l)
        self.batch_size = batch_size
        self.rng = rng
        self.grad_bound = grad_bound
        self.violations = 0

    def sample(self, x):
        if self.noise_mode == "deterministic":
            g = self.objective.grad(x)
        elif self.noise_mode == "gaussian":
            g = self.objective.grad(x)
            if self.sigma_l > 0:
                d = len(g)
                g = g + self.rng.normal(0.0, self.sigma_l / np.sqrt(d), size=d)
        else:
            n = self.objective.n_samples
            idx = self.rng.integers(0, n, size=self.batch_size)
            g = self.objective.grad_batch(x, idx)
        if self.grad_bound is not None and np.linalg.norm(g) > self.grad_bound:
            self.violations += 1
        return g


def sample_gradient(oracle: GradientOracle, x):
    """Draw one (possibly stochastic) gradient at ``x``."""
    return oracle.sample(x)


def _probe_grid(center, radius, dim, n_points=64, seed=12345):
    g = rngmod.stream(seed, "probe")
    pts = center + g.uniform(-radius, radius, size=(n_points, dim))
    return np.vstack([pts, center.reshape(1, -1)])


def _probe_constants(clients, dim, center, radius):
    """Max gradient norm and max client-vs-mean gradient gap on a probe grid."""
    pts = _probe_grid(center, radius, dim)
    gmax = 0.0
    divmax = 0.0
    for x in pts:
        grads = [obj.grad(x) for obj in clients]
        mean = sum(grads) / len(grads)
        for g in grads:
            gmax = max(gmax, float(np.linalg.norm(g)))
            divmax = max(divmax, float(np.linalg.norm(g - mean)))
    return gmax, divmax


def build_quadratic_ensemble(b_values, g_bound=None) -> ProblemInstance:
    """Ensemble of scalar quadratics 0.5 * (x - b_i)^2."""
    if len(b_values) == 0:
        raise ValueError("b_values must be nonempty")
    b = np.asarray(b_values, dtype=float)
    clients = tuple(ScalarQuadratic(float(bi)) for bi in b)
    opt = np.array([b.mean()])
    f_star = sum(c.loss(opt) for c in clients) / len(clients)
    # gradient gaps are constant in x for unit-curvature quadratics
    sigma_g = float(np.max(np.abs(b - b.mean()))) if len(b) > 1 else 0.0
    radius = max(2.0, 2.0 * float(np.max(np.abs(b - b.mean()))) + 1.0)
    gmax, _ = _probe_constants(clients, 1, opt, radius)
    methods = {"L": "max eigenvalue (exact, unit curvature)",
               "sigma_g": "closed form (constant gradient gaps)",
               "G": "declared" if g_bound is not None else "probe-grid estimate"}
    return ProblemInstance(
        clients=clients, dim=1, L=1.0,
        G=float(g_bound) if g_bound is not None else gmax,
        sigma_l=0.0, sigma_g=sigma_g, f_star=f_star, global_optimum=opt,
        constant_methods=methods)


def build_linear_regression_ensemble(A_list, b_list, g_bound=None,
                                     sigma_l=0.0) -> ProblemInstance:
    """Ensemble of least-squares clients 0.5 * ||A_i x - b_i||^2."""
    if len(A_list) != len(b_list) or len(A_list) == 0:
        raise ValueError("need matching nonempty A and b lists")
    clients = tuple(LinearRegressionObjective(A, b) for A, b in zip(A_list, b_list))
    dim = clients[0].dim
    if any(c.dim != dim for c in clients):
        raise ValueError("all A_i must share the same column dimension")
    L = max(c.lipschitz() for c in clients)
    M = sum(c.A.T @ c.A for c in clients)
    rhs = sum(c.A.T @ c.b for c in clients)
    opt = None
    f_star = None
    if np.linalg.matrix_rank(M) == dim:
        opt = np.linalg.solve(M, rhs)
        f_star = sum(c.loss(opt) for c in clients) / len(clients)
    center = opt if opt is not None else np.zeros(dim)
    spans = [np.linalg.norm(c.local_minimizer - center) for c in clients]
    radius = max(2.0, 2.0 * max(spans) + 1.0)
    gmax, divmax = _probe_constants(clients, dim, center, radius)
    methods = {"L": "max eigenvalue of A_i^T A_i over clients",
               "sigma_g": "probe-grid estimate",
               "G": "declared" if g_bound is not None else "probe-grid estimate"}
    return ProblemInstance(
        clients=clients, dim=dim, L=L,
        G=float(g_bound) if g_bound is not None else gmax,
        sigma_l=float(sigma_l), sigma_g=divmax, f_star=f_star,
        global_optimum=opt, constant_methods=methods)


def build_mlp_synthetic_ensemble(hidden_width, N, samples_per_client,
                                 heterogeneity, seed, n_classes=2,
                                 input_dim=2, g_bound=None) -> ProblemInstance:
    """Synthetic federation of one-hidden-layer classifiers.

    Each client draws Gaussian-mixture data; ``heterogeneity`` interpolates
    from identical label distributions (0) to fully skewed single-class
    partitions (1).
    """
    if hidden_width < 1:
        raise ValueError("hidden width must be >= 1")
    if not 0.0 <= heterogeneity <= 1.0:
        raise ValueError("heterogeneity must lie in [0, 1]")
    g = rngmod.stream(seed, "mlp-data")
    # well-separated class means
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    means = 4.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if input_dim > 2:
        means = np.hstack([means, np.zeros((n_classes, input_dim - 2))])
    means = means[:, :input_dim]
    clients = []
    uniform = np.full(n_classes, 1.0 / n_classes)
    for i in range(N):
        skew = np.zeros(n_classes)
        skew[i % n_classes] = 1.0
        p = (1.0 - heterogeneity) * uniform + heterogeneity * skew
        y = g.choice(n_classes, size=samples_per_client, p=p)
        X = means[y] + g.normal(0.0, 0.7, size=(samples_per_client, input_dim))
        clients.append(MLPObjective(X=X, y=y, hidden=hidden_width, n_classes=n_classes))
    clients = tuple(clients)
    dim = clients[0].dim
    # sampled estimates: random pairs for L, random points for G / sigma_g
    est = rngmod.stream(seed, "mlp-constants")
    L = 0.0
    for _ in range(200):
        x1 = est.normal(0.0, 1.0, size=dim)
        x2 = x1 + est.normal(0.0, 0.3, size=dim)
        for obj in clients:
            num = np.linalg.norm(obj.grad(x1) - obj.grad(x2))
            L = max(L, num / np.linalg.norm(x1 - x2))
    L *= 1.5
    gmax, divmax = 0.0, 0.0
    for _ in range(50):
        x = est.normal(0.0, 1.0, size=dim)
        grads = [obj.grad(x) for obj in clients]
        mean = sum(grads) / len(grads)
        for gr in grads:
            gmax = max(gmax, float(np.linalg.norm(gr)))
            divmax = max(divmax, float(np.linalg.norm(gr - mean)))
    methods = {"L": "sampled pair estimate (x1.5 margin)",
               "sigma_g": "sampled estimate",
               "G": "declared" if g_bound is not None else "sampled estimate"}
    return ProblemInstance(
        clients=clients, dim=dim, L=float(L),
        G=float(g_bound) if g_bound is not None else 2.0 * gmax,
        sigma_l=0.0, sigma_g=divmax, f_star=None, global_optimum=None,
        constant_methods=methods)
