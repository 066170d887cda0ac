"""Toy observation network mapping an image to a dense code.

Layout (all 3x3 convolutions, zero padded to keep spatial size)::

    image -> conv+relu (1->8) -> conv+relu (8->Cb)
          -> MDCB: one shared Cb->Cb kernel at each dilation, concatenated, relu
          -> ARFW channel gating
          -> centre pooling (added to its input), stride-2 subsample
          -> conv+relu (-> Ch) -> fully connected -> (rows, r) code

Feature maps are ``(N, C, H, W)`` float64 arrays. Every block has a
forward returning ``(out, cache)`` and a matching backward.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import ConfigError, UsageError


# ---------------------------------------------------------------------------
# dilated convolution

def _as_batch(fm):
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim == 3:
        return fm[None], True
    if fm.ndim != 4:
        raise ConfigError(f"expected a (C, H, W) or (N, C, H, W) map, got shape {fm.shape}")
    return fm, False


def _im2col(x, dilation):
    n, c, h, w = x.shape
    d = dilation
    xp = np.pad(x, ((0, 0), (0, 0), (d, d), (d, d)))
    cols = np.empty((n, c, 9, h, w))
    for ky in range(3):
        for kx in range(3):
            cols[:, :, 3 * ky + kx] = xp[:, :, ky * d:ky * d + h, kx * d:kx * d + w]
    return cols.reshape(n, c * 9, h * w)


def _col2im(dcols, shape, dilation):
    n, c, h, w = shape
    d = dilation
    dcols = dcols.reshape(n, c, 9, h, w)
    dxp = np.zeros((n, c, h + 2 * d, w + 2 * d))
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky * d:ky * d + h, kx * d:kx * d + w] += dcols[:, :, 3 * ky + kx]
    return dxp[:, :, d:d + h, d:d + w]


def conv_forward(x, kernel, dilation=1):
    """Batched 3x3 dilated cross-correlation; ``kernel`` is ``(O, C, 3, 3)``."""
    if int(dilation) != dilation or dilation < 1:
        raise ConfigError(f"dilation must be an integer >= 1, got {dilation}")
    dilation = int(dilation)
    n, c, h, w = x.shape
    cols = _im2col(x, dilation)
    out = np.matmul(kernel.reshape(kernel.shape[0], -1), cols)
    return out.reshape(n, kernel.shape[0], h, w), (x.shape, cols, dilation)


def conv_backward(kernel, cache, dout):
    shape, cols, dilation = cache
    n, o = dout.shape[:2]
    dflat = dout.reshape(n, o, -1)
    dkernel = np.matmul(dflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    dcols = np.matmul(kernel.reshape(o, -1).T, dflat)
    return _col2im(dcols, shape, dilation), dkernel


def dilated_conv(fm, kernel, dilation=1):
    """Dilated 3x3 convolution of a ``(C, H, W)`` or batched feature map."""
    x, single = _as_batch(fm)
    out, _ = conv_forward(x, np.asarray(kernel, dtype=np.float64), dilation)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# multiple dilated convolution branches

def mdcb_forward(fm, kernel, dilations=(1, 2, 3)):
    """Apply one shared kernel at each dilation and concatenate channels.

    Branches are ordered by ascending dilation.
    """
    if len(dilations) == 0:
        raise ConfigError("MDCB needs at least one dilation rate")
    x, single = _as_batch(fm)
    outs, caches = [], []
    for d in sorted(dilations):
        o, c = conv_forward(x, kernel, d)
        outs.append(o)
        caches.append(c)
    out = np.concatenate(outs, axis=1)
    return (out[0] if single else out), caches


def mdcb_backward(kernel, caches, dout):
    """Gradient of the shared kernel is the sum of per-branch gradients."""
    dout, _ = _as_batch(dout)
    cb = kernel.shape[0]
    dx = 0.0
    dkernel = np.zeros_like(kernel)
    for i, cache in enumerate(caches):
        dxi, dki = conv_backward(kernel, cache, dout[:, i * cb:(i + 1) * cb])
        dx = dx + dxi
        dkernel += dki
    return dx, dkernel


# ---------------------------------------------------------------------------
# adaptive receptive field weighting

_GATE_LO = np.finfo(np.float64).tiny
_GATE_HI = np.nextafter(1.0, 0.0)


def _sigmoid(v):
    # float64 rounds logits above ~37 to 1 (and below ~-745 to 0); clamp to keep gates in (0, 1)
    return np.clip(expit(v), _GATE_LO, _GATE_HI)


def arfw_forward(fm, W1, W2):
    """Aggregate (spatial mean), weight (``sigmoid(W2 relu(W1 a))``), modulate."""
    v, single = _as_batch(fm)
    agg = v.mean(axis=(2, 3))
    hidden = agg @ W1.T
    gate = _sigmoid(np.maximum(hidden, 0.0) @ W2.T)
    out = v * gate[:, :, None, None]
    cache = {"v": v, "a": agg, "h": hidden, "z": gate}
    return (out[0] if single else out), cache


def arfw_backward(W1, W2, cache, dout):
    dout, _ = _as_batch(dout)
    v, agg, hidden, gate = cache["v"], cache["a"], cache["h"], cache["z"]
    dz = np.sum(dout * v, axis=(2, 3))
    dg = dz * gate * (1.0 - gate)
    relu_h = np.maximum(hidden, 0.0)
    dW2 = dg.T @ relu_h
    dh = (dg @ W2) * (hidden > 0)
    dW1 = dh.T @ agg
    dagg = dh @ W1
    hw = v.shape[2] * v.shape[3]
    dv = dout * gate[:, :, None, None] + dagg[:, :, None, None] / hw
    return dv, dW1, dW2


# ---------------------------------------------------------------------------
# centre pooling

def center_pool(fm):
    """``out[c, i, j] = max_j' fm[c, i, j'] + max_i' fm[c, i', j]``."""
    out, _ = center_pool_forward(fm)
    return out


def center_pool_forward(fm):
    x, single = _as_batch(fm)
    row_arg = np.argmax(x, axis=3)
    col_arg = np.argmax(x, axis=2)
    row_max = np.take_along_axis(x, row_arg[..., None], axis=3)
    col_max = np.take_along_axis(x, col_arg[:, :, None, :], axis=2)
    out = row_max + col_max
    return (out[0] if single else out), (x.shape, row_arg, col_arg)


def center_pool_backward(cache, dout):
    """Route each summed gradient to the first argmax of its row / column."""
    shape, row_arg, col_arg = cache
    dout, _ = _as_batch(dout)
    dx = np.zeros(shape)
    np.put_along_axis(dx, row_arg[..., None], dout.sum(axis=3, keepdims=True), axis=3)
    col_grad = np.zeros(shape)
    np.put_along_axis(col_grad, col_arg[:, :, None, :], dout.sum(axis=2, keepdims=True), axis=2)
    return dx + col_grad


# ---------------------------------------------------------------------------
# full network

@dataclass(frozen=True)
class ObsConfig:
    frame: tuple
    out_shape: tuple
    stem_channels: int = 8
    branch_channels: int = 8
    head_channels: int = 4
    dilations: tuple = (1, 2, 3)
    ratio: int = 4
    use_mdcb: bool = True
    use_arfw: bool = True
    use_cp: bool = True
    pool_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "frame", tuple(int(v) for v in self.frame))
        object.__setattr__(self, "out_shape", tuple(int(v) for v in self.out_shape))
        object.__setattr__(self, "dilations", tuple(sorted(int(d) for d in self.dilations)))
        if self.use_arfw and not self.use_mdcb:
            raise ConfigError("ARFW must work with MDCB")
        if not self.dilations or min(self.dilations) < 1:
            raise ConfigError("dilations must be a non-empty set of integers >= 1")
        if self.use_arfw and self.features % self.ratio:
            raise ConfigError(f"ARFW ratio {self.ratio} must divide {self.features} channels")

    @property
    def branch_dilations(self):
        return self.dilations if self.use_mdcb else (1,)

    @property
    def features(self):
        return self.branch_channels * len(self.branch_dilations)

    @property
    def pooled_shape(self):
        s = self.pool_stride
        h, w = self.frame
        return (h + s - 1) // s, (w + s - 1) // s

    @property
    def fc_inputs(self):
        ph, pw = self.pooled_shape
        return self.head_channels * ph * pw


@dataclass
class ObsParams:
    """Trainable arrays of the observation network, keyed by name."""

    arrays: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.arrays[key]

    def count(self, keys=None):
        return int(sum(self.arrays[k].size for k in (keys or self.arrays)))

    def copy(self):
        return ObsParams({k: v.copy() for k, v in self.arrays.items()})


def init_obs_params(cfg, seed):
    """He-normal kernels and FC weights, ``1/fan_in`` gate matrices, zero FC bias."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 7])))

    def kernel(o, c):
        return rng.standard_normal((o, c, 3, 3)) * np.sqrt(2.0 / (9 * c))

    out_dim = cfg.out_shape[0] * cfg.out_shape[1]
    arrays = {
        "stem1": kernel(cfg.stem_channels, 1),
        "stem2": kernel(cfg.branch_channels, cfg.stem_channels),
        "branch": kernel(cfg.branch_channels, cfg.branch_channels),
    }
    c = cfg.features
    if cfg.use_arfw:
        arrays["W1"] = rng.standard_normal((c // cfg.ratio, c)) * np.sqrt(1.0 / c)
        arrays["W2"] = rng.standard_normal((c, c // cfg.ratio)) * np.sqrt(cfg.ratio / c)
    arrays["head"] = kernel(cfg.head_channels, c)
    arrays["fc_w"] = rng.standard_normal((out_dim, cfg.fc_inputs)) * np.sqrt(2.0 / cfg.fc_inputs)
    arrays["fc_b"] = np.zeros(out_dim)
    return ObsParams(arrays)


def obsnet_forward(image, params, cfg):
    """Predict codes for a ``(1, H, W)`` image or ``(N, 1, H, W)`` batch.

    Returns ``(xhat, cache)``; ``xhat`` has shape ``out_shape`` (or
    ``(N,) + out_shape``).
    """
    x, single = _as_batch(image)
    if x.shape[1] != 1 or x.shape[2:] != cfg.frame:
        raise ConfigError(f"image shape {x.shape[1:]} does not match (1, {cfg.frame[0]}, {cfg.frame[1]})")
    P = params.arrays
    cache = {}
    s1, cache["stem1"] = conv_forward(x, P["stem1"])
    s1 = np.maximum(s1, 0.0)
    cache["s1"] = s1
    s2, cache["stem2"] = conv_forward(s1, P["stem2"])
    s2 = np.maximum(s2, 0.0)
    cache["s2"] = s2
    v, cache["mdcb"] = mdcb_forward(s2, P["branch"], cfg.branch_dilations)
    v = np.maximum(v, 0.0)
    cache["v"] = v
    u = v
    if cfg.use_arfw:
        u, cache["arfw"] = arfw_forward(v, P["W1"], P["W2"])
    if cfg.use_cp:
        pooled, cache["cp"] = center_pool_forward(u)
        u = u + pooled
    s = cfg.pool_stride
    d = u[:, :, ::s, ::s]
    cache["pre_shape"] = u.shape
    hd, cache["head"] = conv_forward(d, P["head"])
    hd = np.maximum(hd, 0.0)
    cache["hd"] = hd
    feats = hd.reshape(len(x), -1)
    cache["feats"] = feats
    y = feats @ P["fc_w"].T + P["fc_b"]
    y = y.reshape((len(x),) + cfg.out_shape)
    return (y[0] if single else y), cache


def obsnet_backward(cache, delta_xhat, params, cfg):
    """Gradients of every parameter array given ``dL/dxhat``."""
    if not cache:
        raise UsageError("obsnet_backward needs the cache from obsnet_forward")
    P = params.arrays
    feats = cache["feats"]
    dy = np.asarray(delta_xhat, dtype=np.float64).reshape(len(feats), -1)
    grads = {"fc_w": dy.T @ feats, "fc_b": dy.sum(axis=0)}
    dhd = (dy @ P["fc_w"]).reshape(cache["hd"].shape) * (cache["hd"] > 0)
    dd, grads["head"] = conv_backward(P["head"], cache["head"], dhd)
    s = cfg.pool_stride
    du = np.zeros(cache["pre_shape"])
    du[:, :, ::s, ::s] = dd
    if cfg.use_cp:
        du = du + center_pool_backward(cache["cp"], du)
    dv = du
    if cfg.use_arfw:
        dv, grads["W1"], grads["W2"] = arfw_backward(P["W1"], P["W2"], cache["arfw"], du)
    dv = dv * (cache["v"] > 0)
    ds2, grads["branch"] = mdcb_backward(P["branch"], cache["mdcb"], dv)
    ds2 = ds2 * (cache["s2"] > 0)
    ds1, grads["stem2"] = conv_backward(P["stem2"], cache["stem2"], ds2)
    ds1 = ds1 * (cache["s1"] > 0)
    _, grads["stem1"] = conv_backward(P["stem1"], cache["stem1"], ds1)
    return grads


def ablate(cfg, **toggles):
    return replace(cfg, **toggles)
