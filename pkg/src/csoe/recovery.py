"""Sparse recovery of sinogram columns from codes.

Solves ``min_a 0.5 * ||D a - x||^2 + lam * ||a||_1`` three ways: classic
ISTA, unrolled LISTA layers with trainable ``(W, S, theta)``, and a damped
Newton solve of the smoothed problem (L1 replaced by
``sum_i sqrt(a_i^2 + eps^2)``) that serves as a differentiation oracle.

Arrays ``x`` may be a single ``m``-vector or an ``m x B`` matrix whose
columns are solved independently.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, NumericError
from .optim import Adam


def _matrix(D):
    return np.asarray(getattr(D, "values", D), dtype=np.float64)


def soft_threshold(v, theta):
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0):
        raise DomainError("threshold must be non-negative")
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def lipschitz_constant(D, tol=1e-10, max_iter=10000):
    """Largest eigenvalue of ``D^T D`` by power iteration from a fixed start."""
    D = _matrix(D)
    v = np.ones(D.shape[1]) / np.sqrt(D.shape[1])
    lam = 0.0
    for _ in range(max_iter):
        w = D.T @ (D @ v)
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0
        v = w / new
        if abs(new - lam) <= tol * new:
            return new
        lam = new
    return lam


def lasso_objective(D, x, a, lam):
    D = _matrix(D)
    r = D @ a - x
    return 0.5 * float(np.sum(r * r)) + float(np.sum(np.asarray(lam) * np.abs(a)))


def ista_solve(D, x, lam, T, return_history=False):
    """``T`` iterations of ISTA from ``a_0 = 0`` with step ``1/L``.

    For a matrix ``x``, ``lam`` may also hold one value per column. With
    ``return_history`` also returns the objective after every iteration
    (index 0 is the starting point).
    """
    lam = np.asarray(lam, dtype=np.float64) if np.ndim(lam) else float(lam)
    if not np.all(np.asarray(lam) > 0):
        raise ConfigError(f"lambda must be positive, got {lam}")
    D = _matrix(D)
    x = np.asarray(x, dtype=np.float64)
    L = lipschitz_constant(D)
    a = np.zeros((D.shape[1],) + x.shape[1:])
    history = [lasso_objective(D, x, a, lam)] if return_history else None
    if L > 0:
        for _ in range(int(T)):
            a = soft_threshold(a + D.T @ (x - D @ a) / L, lam / L)
            if return_history:
                history.append(lasso_objective(D, x, a, lam))
    return (a, history) if return_history else a


@dataclass
class ListaParams:
    """Unrolled LISTA layers: ``a_{t+1} = soft(W x + S a_t, theta_{t+1})``.

    ``theta`` holds one threshold per iteration, or a single shared one
    (shape ``(1,)``) when ``T`` iterations reuse it.
    """

    W: np.ndarray
    S: np.ndarray
    theta: np.ndarray
    T: int

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=np.float64))
        if self.T < 1:
            raise ConfigError("LISTA needs T >= 1")
        if self.theta.size not in (1, self.T):
            raise ConfigError("theta must be a scalar or have length T")
        if np.any(self.theta < 0):
            raise ConfigError("LISTA thresholds must be non-negative")

    def threshold(self, t):
        return self.theta[0] if self.theta.size == 1 else self.theta[t]

    def arrays(self):
        return {"W": self.W, "S": self.S, "theta": self.theta}

    def copy(self):
        return ListaParams(self.W.copy(), self.S.copy(), self.theta.copy(), self.T)


def lista_init(D, lam, T=16, shared_theta=False):
    """Initialise LISTA so that it reproduces ``T`` ISTA iterations exactly."""
    D = _matrix(D)
    L = lipschitz_constant(D)
    W = D.T / L
    S = np.eye(D.shape[1]) - (D.T @ D) / L
    theta = np.full(1 if shared_theta else T, lam / L)
    return ListaParams(W, S, theta, int(T))


def lista_forward(p, x):
    """Run the unrolled layers; returns ``(a_T, cache)`` for :func:`lista_backward`."""
    x = np.asarray(x, dtype=np.float64)
    b = p.W @ x
    zs, acts = [], []
    a = None
    for t in range(p.T):
        z = b if a is None else b + p.S @ a
        a = soft_threshold(z, p.threshold(t))
        zs.append(z)
        acts.append(a)
    return a, {"x": x, "z": zs, "a": acts}


def lista_backward(p, cache, delta_a):
    """Backpropagate through the unrolled layers.

    Returns gradients for ``W``, ``S``, ``theta`` and the input ``x``.
    """
    x, zs, acts = cache["x"], cache["z"], cache["a"]
    g = np.asarray(delta_a, dtype=np.float64)
    dS = np.zeros_like(p.S)
    dtheta = np.zeros(p.T)
    db = np.zeros_like(g)
    for t in range(p.T - 1, -1, -1):
        z = zs[t]
        gz = g * (np.abs(z) > p.threshold(t))
        dtheta[t] = -np.sum(gz * np.sign(z))
        db += gz
        if t > 0:
            dS += gz @ acts[t - 1].T if gz.ndim == 2 else np.outer(gz, acts[t - 1])
            g = p.S.T @ gz
    dW = db @ x.T if db.ndim == 2 else np.outer(db, x)
    if p.theta.size == 1:
        dtheta = np.array([dtheta.sum()])
    return {"W": dW, "S": dS, "theta": dtheta, "x": p.W.T @ db}


def smoothed_objective(D, x, a, lam, eps):
    D = _matrix(D)
    r = D @ a - x
    return 0.5 * float(r @ r) + lam * float(np.sum(np.sqrt(a * a + eps * eps)))


def exact_solve_smoothed(D, x, lam, eps, tol=1e-10, max_iter=500, warm_start=None, polish=2):
    """Minimise the smoothed problem by damped Newton.

    Iterates until the stationarity residual
    ``||D^T (D a - x) + lam * a / sqrt(a^2 + eps^2)||_2`` drops to ``tol`` (or
    to ``tol * ||D^T x||_inf`` when that is larger, so large-scale instances
    are judged relative to their own magnitude), then takes up to ``polish``
    further full Newton steps while they keep reducing the residual. The
    start point defaults to a long ISTA run.
    """
    if not eps > 0:
        raise ConfigError("eps must be positive")
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    D = _matrix(D)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        return np.column_stack([exact_solve_smoothed(D, x[:, j], lam, eps, tol, max_iter,
                                                     polish=polish)
                                for j in range(x.shape[1])])
    G = D.T @ D
    Dtx = D.T @ x
    target = tol * max(1.0, float(np.max(np.abs(Dtx))))
    a = ista_solve(D, x, lam, 300) if warm_start is None else np.array(warm_start, dtype=np.float64)

    def grad(a):
        return G @ a - Dtx + lam * a / np.sqrt(a * a + eps * eps)

    def newton_step(a, g):
        hdiag = lam * eps * eps / (a * a + eps * eps) ** 1.5
        return np.linalg.solve(G + np.diag(hdiag), g)

    def polished(a, g, gnorm):
        for _ in range(polish):
            cand = a - newton_step(a, g)
            gc = grad(cand)
            gcnorm = float(np.linalg.norm(gc))
            if not gcnorm < gnorm:
                break
            a, g, gnorm = cand, gc, gcnorm
        return a

    f = smoothed_objective(D, x, a, lam, eps)
    g = grad(a)
    gnorm = float(np.linalg.norm(g))
    it = 0
    for it in range(max_iter):
        if gnorm <= target:
            return polished(a, g, gnorm)
        step = newton_step(a, g)
        slope = float(g @ step)
        if slope <= 1e-13 * max(1.0, abs(f)):
            # objective differences are at roundoff level: judge by the residual
            cand = a - step
            gc = grad(cand)
            gcnorm = float(np.linalg.norm(gc))
            if not gcnorm < gnorm:
                break
            a, f, g, gnorm = cand, smoothed_objective(D, x, cand, lam, eps), gc, gcnorm
            continue
        t = 1.0
        while True:
            cand = a - t * step
            fc = smoothed_objective(D, x, cand, lam, eps)
            if fc <= f - 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        gc = grad(cand)
        gcnorm = float(np.linalg.norm(gc))
        if t < 1e-12 and gcnorm >= gnorm:
            break
        a, f, g, gnorm = cand, fc, gc, gcnorm
    if gnorm <= target:
        return polished(a, g, gnorm)
    raise NumericError("smoothed Newton solve did not converge",
                       {"iterations": it + 1, "grad_norm": gnorm, "target": target,
                        "lam": lam, "eps": eps})


def nmse(a_hat, a_true):
    """Normalised MSE, ``sum ||a_hat - a||^2 / sum ||a||^2`` over the batch."""
    return float(np.sum((a_hat - a_true) ** 2) / np.sum(a_true ** 2))


def fit_lista(params, D, train_a, steps=500, batch=64, lr=1e-3, seed=0):
    """Train LISTA parameters on ``0.5 * ||a_T - a||^2`` for fixed ``D``.

    ``train_a`` is an ``n x N`` matrix of sparse training signals; codes are
    ``D @ a`` (noiseless). Minibatches are drawn with a seeded generator.
    Returns the trained copy and the per-step losses.
    """
    D = _matrix(D)
    p = params.copy()
    opt = Adam(lr)
    rng = np.random.default_rng(seed)
    arrays = {"W": p.W, "S": p.S, "theta": p.theta}
    losses = []
    for _ in range(steps):
        idx = rng.choice(train_a.shape[1], size=min(batch, train_a.shape[1]), replace=False)
        a_true = train_a[:, idx]
        a_hat, cache = lista_forward(p, D @ a_true)
        diff = a_hat - a_true
        losses.append(0.5 * float(np.sum(diff * diff)) / a_true.shape[1])
        grads = lista_backward(p, cache, diff / a_true.shape[1])
        grads.pop("x")
        opt.step(arrays, grads)
        np.maximum(p.theta, 0.0, out=p.theta)
    return p, losses


def sparse_signals(n, k, count, rng, magnitude=(0.5, 1.5)):
    """``count`` columns with ``k`` random nonzeros of random sign and magnitude."""
    out = np.zeros((n, count))
    for j in range(count):
        support = rng.choice(n, size=k, replace=False)
        out[support, j] = rng.choice([-1.0, 1.0], size=k) * rng.uniform(*magnitude, size=k)
    return out


def recovered_support(a_est, a_true, rel=0.1):
    """True when ``|a_est| > rel * min|a_true[p]|`` selects exactly the true support."""
    p = np.flatnonzero(a_true)
    if p.size == 0:
        return not np.any(a_est)
    found = np.flatnonzero(np.abs(a_est) > rel * np.min(np.abs(a_true[p])))
    return np.array_equal(found, p)


def support_recovery_sweep(n=91, k_values=(1, 2, 3, 4, 5), trials=200, lam_rels=(1e-1, 3e-2, 1e-2),
                           c_m=2.0, T=5000, seed=0):
    """Noiseless ISTA support-recovery rates at ``m = ceil(c_m k ln n)``.

    Trials are spread evenly over ``k_values``; each draws its own sensing
    matrix and signal. Every trial is solved at each ``lam = rel * ||D^T x||_inf``
    and the rate of each ``rel`` is reported, so one ``lam`` setting is used
    for all trials.
    """
    from .sensing import make_sensing_matrix, required_measurements

    hits = np.zeros(len(lam_rels), dtype=int)
    for t in range(trials):
        k = k_values[t % len(k_values)]
        rng = np.random.default_rng([seed, t])
        D = make_sensing_matrix(required_measurements(k, n, c_m), n, int(rng.integers(2 ** 31))).values
        a = sparse_signals(n, k, 1, rng)[:, 0]
        x = D @ a
        scale = float(np.max(np.abs(D.T @ x)))
        for i, rel in enumerate(lam_rels):
            hits[i] += recovered_support(ista_solve(D, x, rel * scale, T), a)
    return {float(r): float(h / trials) for r, h in zip(lam_rels, hits)}
