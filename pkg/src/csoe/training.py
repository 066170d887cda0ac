"""Synthetic scenes, the joint loss and the end-to-end trainer.

The model chains the observation network (image -> code ``xhat``), LISTA
layers applied to every code column (``xhat -> ahat``) and filtered
backprojection plus peak picking to obtain head locations. Training
minimises, per image,

    0.5 * ||xhat - D a||^2 + alpha * ||ahat - a||_1

where ``a`` is the ground-truth sinogram and the code target ``D a`` uses
the current sensing matrix as a constant. The L1 term reaches ``xhat`` and
``D`` through the support-based batch rules; ``W``, ``S`` and the
thresholds receive ordinary backpropagation-through-time gradients.
"""

import csv
import io
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import obsnet as ob
from .errors import ConfigError, GenerationError, NumericError, ParseError
from .optim import SCHEDULES, make_optimizer
from .radon import PointSet, Sinogram, decode_sinogram, default_angles, detector_size, radon_forward
from .recon_grad import backprop_approx, backprop_exact_dD, backprop_exact_dx, support_set
from .recovery import ListaParams, exact_solve_smoothed, lista_backward, lista_forward, lista_init
from .sensing import make_sensing_matrix, required_measurements
from .serialize import atomic_write_text, read_container, write_container

FORMAT_VERSION = 1
LOG_FIELDS = ["step", "total", "l2", "l1", "grad_norm_obs", "grad_norm_lista", "grad_norm_D"]


# ---------------------------------------------------------------------------
# scenes

@dataclass(frozen=True)
class Scene:
    image: np.ndarray
    truth: PointSet
    sinogram: Sinogram

    def code(self, D):
        return np.asarray(D) @ self.sinogram.values


def _rng(seed):
    entropy = [int(s) for s in seed] if isinstance(seed, (tuple, list)) else int(seed)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def render(points, sigmas, frame):
    """Sum of unit-peak isotropic Gaussian blobs."""
    h, w = frame
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    img = np.zeros(frame)
    for (r, c), s in zip(points, sigmas):
        img += np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2.0 * s * s))
    return img


def synth_scene(seed, frame, k, sigma_range=(0.8, 1.6), min_sep=4.0, angles=None, max_draws=20000):
    """Rejection-sample ``k`` heads and render them.

    Heads lie in ``[0, h-1] x [0, w-1]`` (the hull of pixel centres). Blob
    sigma grows with the row: half of its span within ``sigma_range``
    follows ``row / (h-1)`` and the other half is random.
    """
    h, w = frame
    if k < 0 or min_sep < 0:
        raise ConfigError("k and min_sep must be non-negative")
    angles = default_angles() if angles is None else np.asarray(angles, dtype=np.float64)
    rng = _rng(seed)
    pts = []
    draws = 0
    while len(pts) < k:
        if draws >= max_draws:
            raise GenerationError(f"could not place {k} heads {min_sep} px apart in a {h}x{w} frame "
                                  f"after {max_draws} draws")
        draws += 1
        cand = rng.uniform(0.0, 1.0, size=2) * (h - 1, w - 1)
        if all((cand[0] - p[0]) ** 2 + (cand[1] - p[1]) ** 2 >= min_sep ** 2 for p in pts):
            pts.append(cand)
    pts = np.array(pts, dtype=np.float64).reshape(-1, 2)
    lo, hi = sigma_range
    sigmas = lo + (hi - lo) * (0.5 * pts[:, 0] / max(h - 1, 1) + 0.5 * rng.uniform(size=len(pts)))
    truth = PointSet(pts, frame)
    return Scene(render(pts, sigmas, frame)[None], truth, radon_forward(truth, angles))


def make_scenes(seed, count, frame, k_range, sigma_range=(0.8, 1.6), min_sep=4.0, angles=None):
    """``count`` scenes; scene ``i`` draws its head count and layout from ``(seed, i)``."""
    out = []
    for i in range(count):
        k = int(_rng((seed, i, 1)).integers(k_range[0], k_range[1] + 1))
        out.append(synth_scene((seed, i), frame, k, sigma_range, min_sep, angles))
    return out


# ---------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class Hyper:
    frame: tuple = (32, 32)
    r: int = 90
    m: int = 0
    k_max: int = 5
    c_m: float = 2.0
    lam: float = 0.05
    alpha: float = 1.0
    T: int = 16
    dilations: tuple = (1, 2, 3)
    ratio: int = 4
    use_csoe: bool = True
    use_mdcb: bool = True
    use_cp: bool = True
    use_arfw: bool = True
    peak_threshold: float = 0.3
    peak_distance: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "frame", tuple(int(v) for v in self.frame))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.use_arfw and not self.use_mdcb:
            raise ConfigError("ARFW must work with MDCB")

    @property
    def n(self):
        return detector_size(*self.frame)

    @property
    def code_rows(self):
        """``m`` after resolving 0 to the measurement bound."""
        if self.m:
            return int(self.m)
        return required_measurements(self.k_max, self.n, self.c_m)

    @property
    def angles(self):
        return default_angles(self.r)

    def obs_config(self):
        rows = self.code_rows if self.use_csoe else self.n
        return ob.ObsConfig(self.frame, (rows, self.r), dilations=self.dilations, ratio=self.ratio,
                            use_mdcb=self.use_mdcb, use_arfw=self.use_arfw, use_cp=self.use_cp)

    def to_dict(self):
        d = asdict(self)
        d["frame"] = list(self.frame)
        d["dilations"] = list(self.dilations)
        return d


@dataclass
class Model:
    hyper: Hyper
    obs: ob.ObsParams
    lista: ListaParams = None
    D: np.ndarray = None
    seeds: dict = field(default_factory=dict)

    @property
    def obs_cfg(self):
        return self.hyper.obs_config()

    def param_dict(self):
        """References to every trainable array, keyed by group-qualified name."""
        out = {f"obs/{k}": v for k, v in self.obs.arrays.items()}
        if self.hyper.use_csoe:
            out.update({"lista/W": self.lista.W, "lista/S": self.lista.S,
                        "lista/theta": self.lista.theta, "D": self.D})
        return out


def build_model(hyper, model_seed=0, d_seed=0):
    obs = ob.init_obs_params(hyper.obs_config(), model_seed)
    seeds = {"model": int(model_seed), "D": int(d_seed)}
    if not hyper.use_csoe:
        return Model(hyper, obs, seeds=seeds)
    m = hyper.code_rows
    if m >= hyper.n:
        raise ConfigError(f"m={m} is not below n={hyper.n}; lower k_max or c_m, or set m")
    D = np.array(make_sensing_matrix(m, hyper.n, d_seed).values)
    return Model(hyper, obs, lista_init(D, hyper.lam, hyper.T), D, seeds)


def save_model(path, model, extra_header=None, extra_arrays=None):
    header = {"kind": "model", "format_version": FORMAT_VERSION, "hyper": model.hyper.to_dict(),
              "seeds": model.seeds, "T": model.lista.T if model.lista else None}
    header.update(extra_header or {})
    arrays = dict(model.param_dict())
    arrays.update(extra_arrays or {})
    write_container(path, header, arrays)


def load_model(path, with_extras=False):
    header, arrays = read_container(path)
    if header.get("kind") != "model":
        raise ParseError(f"{path}: not a model container")
    hyper = Hyper(**header["hyper"])
    obs = ob.ObsParams({k[4:]: np.array(v) for k, v in arrays.items() if k.startswith("obs/")})
    model = Model(hyper, obs, seeds=header.get("seeds", {}))
    if hyper.use_csoe:
        model.lista = ListaParams(np.array(arrays["lista/W"]), np.array(arrays["lista/S"]),
                                  np.array(arrays["lista/theta"]), int(header["T"]))
        model.D = np.array(arrays["D"])
    if with_extras:
        return model, header, arrays
    return model


# ---------------------------------------------------------------------------
# loss and training step

def joint_loss(x_hat, x, a_hat, a, alpha):
    """Return ``(loss, l2, l1, dL/dx_hat, dL/da_hat)`` with sums over all entries."""
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    e = x_hat - x
    d = a_hat - a
    l2 = 0.5 * float(np.sum(e * e))
    l1 = float(np.sum(np.abs(d)))
    return l2 + alpha * l1, l2, l1, e, alpha * np.sign(d)


def _columns(batch):
    """``(N, rows, r) -> (rows, N * r)`` with sample-major column order."""
    return batch.transpose(1, 0, 2).reshape(batch.shape[1], -1)


def _uncolumns(cols, n):
    return cols.reshape(cols.shape[0], n, -1).transpose(1, 0, 2)


@dataclass(frozen=True)
class StepOptions:
    mode: str = "approx"
    freeze_D: bool = False
    eps: float = 1e-6


def _norm(grads, prefix):
    sq = sum(float(np.sum(g * g)) for k, g in grads.items() if k.startswith(prefix))
    return math.sqrt(sq)


def loss_and_grads(model, scenes, options=StepOptions()):
    """Mean joint loss over ``scenes`` and gradients of every trainable array."""
    hp = model.hyper
    N = len(scenes)
    images = np.stack([s.image for s in scenes])
    A = np.stack([s.sinogram.values for s in scenes])
    xhat, cache = ob.obsnet_forward(images, model.obs, model.obs_cfg)
    grads = {}
    if not hp.use_csoe:
        _, l2, _, e, _ = joint_loss(xhat, A, 0.0, 0.0, 0.0)
        dxhat = e / N
        l1 = 0.0
    else:
        D = model.D
        X = np.einsum("mn,bnr->bmr", D, A)
        xc, ac = _columns(xhat), _columns(A)
        if options.mode == "approx":
            ahat, lcache = lista_forward(model.lista, xc)
        elif options.mode == "exact":
            ahat = exact_solve_smoothed(D, xc, hp.lam, options.eps)
        else:
            raise ConfigError(f"unknown backprop mode {options.mode!r}")
        _, l2, l1, e, da = joint_loss(xhat, X, ahat, ac, hp.alpha)
        da = da / N
        if options.mode == "approx":
            dx_rec, dD = backprop_approx(D, ahat, xc, da)
            lg = lista_backward(model.lista, lcache, da)
            grads.update({"lista/W": lg["W"], "lista/S": lg["S"], "lista/theta": lg["theta"]})
        else:
            dx_rec = np.zeros_like(xc)
            dD = np.zeros_like(D)
            tol = 50.0 * options.eps
            for j in range(xc.shape[1]):
                split = support_set(ahat[:, j], max(tol, 1e-6 * float(np.max(np.abs(ahat[:, j])))))
                dx_rec[:, j] = backprop_exact_dx(D, ahat[:, j], da[:, j], split)
                dD += backprop_exact_dD(D, ahat[:, j], xc[:, j], da[:, j], split)
        if not options.freeze_D:
            grads["D"] = dD
        dxhat = e / N + _uncolumns(dx_rec, N)
    for k, g in ob.obsnet_backward(cache, dxhat, model.obs, model.obs_cfg).items():
        grads[f"obs/{k}"] = g
    l2, l1 = l2 / N, l1 / N
    alpha = hp.alpha if hp.use_csoe else 0.0
    record = {"total": l2 + alpha * l1, "l2": l2, "l1": l1,
              "grad_norm_obs": _norm(grads, "obs/"), "grad_norm_lista": _norm(grads, "lista/"),
              "grad_norm_D": _norm(grads, "D")}
    return record, grads


def train_step(model, scenes, optimizer, options=StepOptions()):
    """One update from the mean gradient over ``scenes``; returns the metrics record."""
    record, grads = loss_and_grads(model, scenes, options)
    if not all(np.isfinite(v) for v in record.values()):
        raise NumericError("non-finite loss or gradient",
                           {**record, "step": optimizer.t + 1,
                            "param_norms": {k: float(np.linalg.norm(v))
                                            for k, v in model.param_dict().items()}})
    optimizer.step(model.param_dict(), grads)
    if model.lista is not None:
        np.maximum(model.lista.theta, 0.0, out=model.lista.theta)
    return record


# ---------------------------------------------------------------------------
# training loop

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 1e-3
    optimizer: str = "sgd"
    mode: str = "approx"
    freeze_D: bool = False
    d_lr_scale: float = 1.0
    checkpoint_every: int = 0
    schedule: str = "constant"

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.steps < 0 or self.batch < 1 or not self.lr >= 0:
            raise ConfigError("steps >= 0, batch >= 1 and lr >= 0 are required")

    def build_optimizer(self):
        return make_optimizer(self.optimizer, self.lr, {"D": self.d_lr_scale})

    def lr_at(self, step):
        """Step size for 0-based ``step``: constant, or decayed to 0 by cosine or linear."""
        if self.schedule == "constant" or self.steps <= 1:
            return self.lr
        frac = step / self.steps
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.lr * (1.0 - frac)


def _batch_indices(step, batch, count):
    """Scenes are visited in a fixed cyclic order, ``batch`` at a time."""
    start = step * batch
    return [(start + j) % count for j in range(batch)]


def format_log(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(row[k])) if k != "step" else int(row[k])) for k in LOG_FIELDS})
    return buf.getvalue()


def parse_log(text):
    """Inverse of :func:`format_log`; lines starting with ``#`` are skipped."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(lines)]


def save_checkpoint(path, model, optimizer, step, log):
    extra = {f"opt/{k}": v for k, v in optimizer.state_arrays().items()}
    save_model(path, model, {"checkpoint": {"step": int(step), "optimizer": optimizer.name,
                                            "lr": optimizer.lr, "scales": optimizer.scales,
                                            "opt_t": optimizer.t},
                             "log": format_log(log)}, extra)


def load_checkpoint(path):
    model, header, arrays = load_model(path, with_extras=True)
    ck = header.get("checkpoint")
    if ck is None:
        raise ParseError(f"{path}: model container holds no checkpoint state")
    opt = make_optimizer(ck["optimizer"], ck["lr"], ck.get("scales"))
    opt.load_state(ck["opt_t"], {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")})
    return model, opt, int(ck["step"]), parse_log(header.get("log", ""))


def train_loop(model, scenes, cfg=TrainConfig(), checkpoint_path=None, resume=False, log_path=None,
               progress=None):
    """Train for ``cfg.steps`` steps; returns ``(model, log_rows)``.

    With ``checkpoint_path`` and ``cfg.checkpoint_every > 0`` the model,
    optimizer state and log so far are written every that many steps; with
    ``resume`` an existing checkpoint there is loaded first and training
    continues from its step, producing the same result as an uninterrupted
    run.
    """
    if not scenes:
        raise ConfigError("training needs at least one scene")
    options = StepOptions(cfg.mode, cfg.freeze_D)
    optimizer = cfg.build_optimizer()
    log = []
    start = 0
    if resume and checkpoint_path and os.path.exists(checkpoint_path):
        model, optimizer, start, log = load_checkpoint(checkpoint_path)
    for step in range(start, cfg.steps):
        batch = [scenes[i] for i in _batch_indices(step, cfg.batch, len(scenes))]
        optimizer.lr = cfg.lr_at(step)
        try:
            record = train_step(model, batch, optimizer, options)
        except NumericError as exc:
            exc.diagnostics["step"] = step + 1
            raise
        log.append({"step": step + 1, **record})
        if progress:
            progress(log[-1])
        if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            try:
                save_checkpoint(checkpoint_path, model, optimizer, step + 1, log)
            except OSError as exc:
                raise OSError(f"cannot write checkpoint {checkpoint_path}: {exc}") from exc
    if log_path:
        atomic_write_text(log_path, format_log(log))
    return model, log


# ---------------------------------------------------------------------------
# inference

def predict_sinograms(model, images):
    """Recovered sinogram values ``(N, n, r)`` for a batch of images."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    xhat, _ = ob.obsnet_forward(images, model.obs, model.obs_cfg)
    if not model.hyper.use_csoe:
        return xhat
    ahat, _ = lista_forward(model.lista, _columns(xhat))
    return _uncolumns(ahat, len(images))


def decode_batch(model, images):
    hp = model.hyper
    out = []
    for values in predict_sinograms(model, images):
        sino = Sinogram(values, hp.angles, hp.frame)
        out.append(decode_sinogram(sino, hp.peak_threshold, hp.peak_distance))
    return out


def decode(model, image):
    """Locate heads in one ``(1, H, W)`` image; returns ``(PointSet, count)``."""
    pts = decode_batch(model, np.asarray(image)[None])[0]
    return pts, len(pts)


def sinogram_count(model, image):
    """Alternative count: mean over angles of the recovered column sums."""
    return float(np.mean(predict_sinograms(model, image)[0].sum(axis=0)))
