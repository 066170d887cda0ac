"""Finite-difference verification suites for the analytic gradients.

Used both by the test-suite and by the ``gradcheck`` command. Every check
returns plain floats so callers can print or threshold them.
"""

from dataclasses import dataclass

import numpy as np

from . import obsnet as ob
from .recon_grad import backprop_approx, backprop_exact_dD, backprop_exact_dx, support_set
from .recovery import exact_solve_smoothed, sparse_signals
from .sensing import make_sensing_matrix

FD_STEP = 1e-5
EPS = 1e-3
# Instances are scaled so that lam >> eps: the exact rules are the eps -> 0
# limit of the smoothed problem and the gap shrinks like eps / lam.
SCALE = 1e4
LAM_FRACTION = 0.2
MAX_MARGIN = 0.95
MIN_SUPPORT_RATIO = 1e3


@dataclass
class ReconInstance:
    D: np.ndarray
    x: np.ndarray
    a: np.ndarray
    lam: float
    delta_a: np.ndarray
    split: object
    seed: int


def recon_instance(seed, m=20, n=50, k=4, eps=EPS, max_tries=50):
    """A seeded lasso instance whose smoothed solution has a clean support.

    Sub-seeds are tried until every off-support dual coordinate is at most
    ``MAX_MARGIN`` in magnitude and every support entry exceeds
    ``MIN_SUPPORT_RATIO * eps``, so small perturbations cannot change the
    support. The support may differ from the planted one; the rules only
    need the support of the actual minimiser.
    """
    for attempt in range(max_tries):
        ss = np.random.SeedSequence([int(seed), attempt])
        d_seed, rng_seed = ss.generate_state(2)
        D = np.array(make_sensing_matrix(m, n, int(d_seed)).values)
        rng = np.random.default_rng(int(rng_seed))
        a_true = sparse_signals(n, k, 1, rng, (1.0, 2.0))[:, 0] * SCALE
        x = D @ a_true
        lam = LAM_FRACTION * SCALE
        a = exact_solve_smoothed(D, x, lam, eps)
        split = support_set(a, max(1e-6 * np.abs(a).max(), 50 * eps))
        if split.p.size > m or np.min(np.abs(a[split.p])) < MIN_SUPPORT_RATIO * eps:
            continue
        u = D[:, split.q].T @ (x - D @ a) / lam
        if np.max(np.abs(u)) > MAX_MARGIN:
            continue
        return ReconInstance(D, x, a, lam, rng.standard_normal(n), split, int(seed))
    raise RuntimeError(f"no well-posed instance for seed {seed}")


def _rel(analytic, numeric):
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-300))


def check_recon_instance(inst, eps=EPS, h=FD_STEP):
    """Compare exact rules with central differences of ``delta_a . a*(D, x)``.

    Returns ``(rel_err_dx, rel_err_dD, q_columns_zero)``.
    """
    D, x, lam = inst.D, inst.x, inst.lam

    def loss(Dv, xv):
        return float(inst.delta_a @ exact_solve_smoothed(Dv, xv, lam, eps, warm_start=inst.a))

    dx = backprop_exact_dx(D, inst.a, inst.delta_a, inst.split)
    dD = backprop_exact_dD(D, inst.a, x, inst.delta_a, inst.split)
    fd_x = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        fd_x[i] = (loss(D, x + e) - loss(D, x - e)) / (2 * h)
    fd_D = np.empty_like(D)
    for i in range(D.shape[0]):
        for j in range(D.shape[1]):
            E = np.zeros_like(D)
            E[i, j] = h
            fd_D[i, j] = (loss(D + E, x) - loss(D - E, x)) / (2 * h)
    q_zero = bool(np.all(dD[:, inst.split.q] == 0.0))
    return _rel(dx, fd_x), _rel(dD, fd_D), q_zero


def recon_suite(count=50, seed=0):
    """Run :func:`check_recon_instance` over ``count`` seeded instances."""
    rows = []
    for i in range(count):
        inst = recon_instance(seed * 100003 + i)
        rows.append(check_recon_instance(inst))
    return {
        "instances": count,
        "max_rel_dx": max(r[0] for r in rows),
        "max_rel_dD": max(r[1] for r in rows),
        "q_zero": all(r[2] for r in rows),
    }


def cosine(u, v):
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def approx_cosine_suite(count=100, seed=0, m=20, n=50, k=4, max_cond=2.0):
    """Cosine similarity of approximate vs exact ``dx`` on well-conditioned supports.

    A support counts as well-conditioned when ``cond(D_p^T D_p) <= max_cond``
    (2.0 means the restricted isometry constant on ``p`` is at most 1/3);
    draws are rejected until that holds. Supports are planted, as LISTA
    outputs have exact zeros, so no solve is needed.
    """
    out = []
    rng = np.random.default_rng([seed, 1])
    while len(out) < count:
        D = make_sensing_matrix(m, n, int(rng.integers(2 ** 31))).values
        a = sparse_signals(n, k, 1, rng, (0.5, 1.5))[:, 0]
        p = np.flatnonzero(a)
        if np.linalg.cond(D[:, p].T @ D[:, p]) > max_cond:
            continue
        delta_a = rng.standard_normal(n)
        exact = backprop_exact_dx(D, a, delta_a)
        approx, _ = backprop_approx(D, a, D @ a, delta_a)
        out.append(cosine(exact, approx))
    return np.array(out)


# ---------------------------------------------------------------------------
# observation network

def _fd_grad(f, arr, h=1e-6, idx=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` (in place)."""
    grad = np.zeros_like(arr)
    coords = np.ndindex(arr.shape) if idx is None else idx
    for c in coords:
        old = arr[c]
        arr[c] = old + h
        fp = f()
        arr[c] = old - h
        fm = f()
        arr[c] = old
        grad[c] = (fp - fm) / (2 * h)
    return grad


def obsnet_suite(seed=0):
    """Per-block and end-to-end relative errors of the hand-written backward."""
    rng = np.random.default_rng(seed)
    res = {}

    x = rng.standard_normal((2, 3, 7, 6))
    k = rng.standard_normal((3, 3, 3, 3))
    out, caches = ob.mdcb_forward(x, k, (1, 2, 3))
    w = rng.standard_normal(out.shape)
    dx, dk = ob.mdcb_backward(k, caches, w)

    def f():
        return float(np.sum(ob.mdcb_forward(x, k, (1, 2, 3))[0] * w))
    res["mdcb"] = max(_rel(dk, _fd_grad(f, k)), _rel(dx, _fd_grad(f, x)))

    v = rng.standard_normal((2, 8, 5, 4))
    W1 = rng.standard_normal((2, 8))
    W2 = rng.standard_normal((8, 2))
    out, cache = ob.arfw_forward(v, W1, W2)
    w = rng.standard_normal(out.shape)
    dv, dW1, dW2 = ob.arfw_backward(W1, W2, cache, w)

    def f():
        return float(np.sum(ob.arfw_forward(v, W1, W2)[0] * w))
    res["arfw"] = max(_rel(dv, _fd_grad(f, v)), _rel(dW1, _fd_grad(f, W1)),
                      _rel(dW2, _fd_grad(f, W2)))

    c = rng.standard_normal((2, 3, 6, 5))
    out, cache = ob.center_pool_forward(c)
    w = rng.standard_normal(out.shape)
    dc = ob.center_pool_backward(cache, w)

    def f():
        return float(np.sum(ob.center_pool_forward(c)[0] * w))
    res["center_pool"] = _rel(dc, _fd_grad(f, c))

    cfg = ob.ObsConfig((12, 12), (4, 5))
    params = ob.init_obs_params(cfg, seed)
    img = rng.random((2, 1, 12, 12))
    y, cache = ob.obsnet_forward(img, params, cfg)
    w = rng.standard_normal(y.shape)
    grads = ob.obsnet_backward(cache, w, params, cfg)

    def f():
        return float(np.sum(ob.obsnet_forward(img, params, cfg)[0] * w))
    # Jacobian-vector products at 10 random parameter coordinates
    keys = sorted(params.arrays)
    worst = 0.0
    for _ in range(10):
        key = keys[rng.integers(len(keys))]
        arr = params.arrays[key]
        c0 = tuple(int(rng.integers(s)) for s in arr.shape)
        fd = _fd_grad(f, arr, idx=[c0])[c0]
        an = grads[key][c0]
        worst = max(worst, float(abs(fd - an) / max(abs(fd), abs(an), 1e-8)))
    res["end_to_end"] = worst
    return res
