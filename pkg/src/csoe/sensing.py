"""Gaussian sensing matrices and the compressive encoding ``x = D a``."""

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ParseError
from .radon import radon_forward
from .serialize import read_container, write_container


@dataclass(frozen=True)
class SensingMatrix:
    """An ``m x n`` matrix with i.i.d. N(0, 1/m) entries.

    Row ``i`` is drawn from its own stream: ``PCG64(SeedSequence(seed).spawn(m)[i])``
    followed by ``standard_normal(n) / sqrt(m)``. Both the PCG64 bit
    generator and numpy's ziggurat normal sampler are platform-independent,
    so ``(seed, m, n)`` regenerate the matrix bit for bit.
    """

    values: np.ndarray
    seed: int

    @property
    def m(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[1]

    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.values, dtype="<f8").tobytes()).hexdigest()


@dataclass(frozen=True)
class CodeMatrix:
    """Column ``j`` is ``D @ a[:, j]``; ``provenance`` records (seed, m, n, angles)."""

    values: np.ndarray
    seed: int
    n: int
    angles: np.ndarray

    @property
    def m(self):
        return self.values.shape[0]


def make_sensing_matrix(m, n, seed):
    m, n = int(m), int(n)
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    if m >= n:
        raise ConfigError(f"m={m} must be smaller than n={n}, otherwise the code does not compress")
    children = np.random.SeedSequence(int(seed)).spawn(m)
    rows = [np.random.Generator(np.random.PCG64(child)).standard_normal(n) for child in children]
    values = np.vstack(rows) / math.sqrt(m)
    values.setflags(write=False)
    return SensingMatrix(values, int(seed))


def encode(D, a):
    """Compress every sinogram column: returns the ``m x r`` code."""
    if D.n != a.n:
        raise DomainError(f"sensing matrix expects n={D.n}, sinogram has n={a.n}")
    return CodeMatrix(D.values @ a.values, D.seed, a.n, a.angles)


def required_measurements(k, n, c_m=2.0):
    """Smallest ``m`` with ``m >= c_m * k * ln(n)``."""
    if k < 1 or n < 2 or not c_m > 1:
        raise ConfigError(f"need k >= 1, n >= 2, c_m > 1 (got k={k}, n={n}, c_m={c_m})")
    return int(math.ceil(c_m * k * math.log(n)))


def save_sensing_matrix(path, D):
    write_container(path, {"kind": "sensing", "m": D.m, "n": D.n, "seed": D.seed,
                           "sha256": D.digest()}, {"values": D.values})


def load_sensing_matrix(path):
    header, arrays = read_container(path)
    if header.get("kind") != "sensing":
        raise ParseError(f"{path}: not a sensing-matrix file")
    D = SensingMatrix(arrays["values"], int(header["seed"]))
    if (D.m, D.n) != (header["m"], header["n"]) or D.digest() != header["sha256"]:
        raise ParseError(f"{path}: payload does not match header")
    return D


def save_code(path, code):
    write_container(path, {"kind": "code", "m": code.m, "n": code.n, "seed": code.seed,
                           "angles": [float(a) for a in code.angles]},
                    {"values": code.values})


def load_code(path):
    header, arrays = read_container(path)
    if header.get("kind") != "code":
        raise ParseError(f"{path}: not a code file")
    return CodeMatrix(arrays["values"], int(header["seed"]), int(header["n"]),
                      np.asarray(header["angles"], dtype=np.float64))


def encode_points(D, points, angles):
    """Project and compress a point set; returns ``(sinogram, code)``."""
    sino = radon_forward(points, angles)
    return sino, encode(D, sino)

