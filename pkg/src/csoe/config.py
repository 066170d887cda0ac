"""Experiment configuration: a flat ``key = value`` file with JSON values.

Blank lines and lines starting with ``#`` are ignored. Every key has a
default, unknown keys are rejected and each value is checked against the
type of its default.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError
from .optim import SCHEDULES
from .serialize import dumps_json


@dataclass(frozen=True)
class ExperimentConfig:
    frame_h: int = 32
    frame_w: int = 32
    r: int = 30
    m: int = 0
    c_m: float = 2.0
    k_min: int = 1
    k_max: int = 5
    lam: float = 0.05
    alpha: float = 0.1
    T: int = 16
    dilations: list = (1, 2, 3)
    ratio: int = 4
    use_csoe: bool = True
    use_mdcb: bool = True
    use_cp: bool = True
    use_arfw: bool = True
    sigma_min: float = 0.8
    sigma_max: float = 1.6
    min_sep: float = 4.0
    peak_threshold: float = 0.3
    peak_distance: float = 3.0
    data_seed: int = 1
    model_seed: int = 0
    d_seed: int = 0
    train_count: int = 1280
    steps: int = 2000
    batch: int = 64
    lr: float = 3e-4
    optimizer: str = "adam"
    schedule: str = "cosine"
    d_lr_scale: float = 0.01
    freeze_d: bool = False
    backprop: str = "approx"
    checkpoint_every: int = 0
    eval_threshold: float = 4.0
    matching: str = "greedy"
    group_count: int = 33

    def __post_init__(self):
        object.__setattr__(self, "dilations", [int(d) for d in self.dilations])
        problems = []
        if min(self.frame_h, self.frame_w) < 1:
            problems.append("frame_h and frame_w must be >= 1")
        if self.r < 2:
            problems.append("r must be >= 2 for filtered backprojection")
        if self.m < 0:
            problems.append("m must be >= 0 (0 selects the measurement bound)")
        if not 0 <= self.k_min <= self.k_max:
            problems.append("need 0 <= k_min <= k_max")
        if not self.dilations or min(self.dilations) < 1:
            problems.append("dilations must be a non-empty list of integers >= 1")
        if self.use_arfw and not self.use_mdcb:
            problems.append("ARFW must work with MDCB: set use_mdcb = true or use_arfw = false")
        if self.optimizer not in ("sgd", "adam"):
            problems.append("optimizer must be \"sgd\" or \"adam\"")
        if self.schedule not in SCHEDULES:
            problems.append(f"schedule must be one of {', '.join(SCHEDULES)}")
        if self.backprop not in ("approx", "exact"):
            problems.append("backprop must be \"approx\" or \"exact\"")
        if self.matching not in ("greedy", "hungarian"):
            problems.append("matching must be \"greedy\" or \"hungarian\"")
        if self.lam <= 0 or self.alpha < 0 or self.lr < 0 or self.eval_threshold <= 0:
            problems.append("need lam > 0, alpha >= 0, lr >= 0 and eval_threshold > 0")
        if self.steps < 0 or self.batch < 1 or self.T < 1 or self.group_count < 1:
            problems.append("need steps >= 0 and batch, T, group_count >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def frame(self):
        return (self.frame_h, self.frame_w)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        """Short sha256 of the canonical JSON form, embedded in every output."""
        return hashlib.sha256(dumps_json(self.to_dict()).encode()).hexdigest()[:16]

    def dump(self):
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_dict().items())

    def hyper(self):
        from .training import Hyper
        return Hyper(frame=self.frame, r=self.r, m=self.m, k_max=self.k_max, c_m=self.c_m,
                     lam=self.lam, alpha=self.alpha, T=self.T, dilations=tuple(self.dilations),
                     ratio=self.ratio, use_csoe=self.use_csoe, use_mdcb=self.use_mdcb,
                     use_cp=self.use_cp, use_arfw=self.use_arfw,
                     peak_threshold=self.peak_threshold, peak_distance=self.peak_distance)

    def train_config(self):
        from .training import TrainConfig
        return TrainConfig(steps=self.steps, batch=self.batch, lr=self.lr, optimizer=self.optimizer,
                           mode=self.backprop, freeze_D=self.freeze_d, d_lr_scale=self.d_lr_scale,
                           checkpoint_every=self.checkpoint_every, schedule=self.schedule)


_TYPES = {f.name: type(f.default) for f in fields(ExperimentConfig)}
_TYPES["dilations"] = list


def _check_type(key, value, where):
    want = _TYPES[key]
    ok = (isinstance(value, bool) if want is bool
          else isinstance(value, int) and not isinstance(value, bool) if want is int
          else isinstance(value, (int, float)) and not isinstance(value, bool) if want is float
          else isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
          if want is list else isinstance(value, want))
    if not ok:
        raise ConfigError(f"{where}: {key} expects {want.__name__}, got {json.dumps(value)}")
    return float(value) if want is float else value


def parse_config(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = (part.strip() for part in line.partition("="))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            value = json.loads(val)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{lineno}: value for {key!r} is not valid JSON ({exc.msg})") from None
        values[key] = _check_type(key, value, f"{source}:{lineno}")
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path):
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
