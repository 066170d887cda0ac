"""Deterministic first-order optimizers over dicts of named arrays.

``scales`` maps key prefixes to step-size multipliers; the longest
matching prefix wins and unmatched keys use 1.
"""

import numpy as np

# step-size schedules understood by the training loop
SCHEDULES = ("constant", "cosine", "linear")


def _scale(scales, key):
    best = ""
    for prefix in scales:
        if key.startswith(prefix) and len(prefix) > len(best):
            best = prefix
    return scales[best] if best else 1.0


class SGD:
    name = "sgd"

    def __init__(self, lr, scales=None):
        self.lr = float(lr)
        self.scales = dict(scales or {})
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for key in sorted(grads):
            lr = self.lr * _scale(self.scales, key)
            if lr:
                params[key] -= lr * grads[key]

    def state_arrays(self):
        return {}

    def load_state(self, t, arrays):
        self.t = int(t)


class Adam:
    name = "adam"

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, scales=None):
        self.lr = float(lr)
        self.scales = dict(scales or {})
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for key in sorted(grads):
            g = grads[key]
            m = self.m.setdefault(key, np.zeros_like(g))
            v = self.v.setdefault(key, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr = self.lr * _scale(self.scales, key)
            if lr:
                params[key] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {}
        for key in sorted(self.m):
            out[f"adam_m/{key}"] = self.m[key]
            out[f"adam_v/{key}"] = self.v[key]
        return out

    def load_state(self, t, arrays):
        self.t = int(t)
        self.m = {k[len("adam_m/"):]: np.array(v) for k, v in arrays.items() if k.startswith("adam_m/")}
        self.v = {k[len("adam_v/"):]: np.array(v) for k, v in arrays.items() if k.startswith("adam_v/")}


def make_optimizer(name, lr, scales=None):
    if name == "sgd":
        return SGD(lr, scales=scales)
    if name == "adam":
        return Adam(lr, scales=scales)
    raise ValueError(f"unknown optimizer {name!r}")
