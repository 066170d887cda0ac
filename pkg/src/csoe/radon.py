"""Point maps to sinograms and back.

Geometry: the detector is centred on the frame centre
``(cy, cx) = ((h-1)/2, (w-1)/2)`` and has ``n = ceil(sqrt(h^2 + w^2))`` bins
with the centre bin at ``(n-1)//2``. A point at ``(row, col)`` projects at
angle ``theta`` to the signed offset

    s = (col - cx) * cos(theta) + (row - cy) * sin(theta)

and its unit mass is split linearly between the two bins around
``centre + s``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateReconstructionError, DomainError, ParseError
from .serialize import read_container, write_container


def detector_size(h, w):
    return int(math.ceil(math.sqrt(h * h + w * w)))


def default_angles(r=90):
    """``r`` angles spread uniformly over [0, 179] degrees."""
    if r < 1:
        raise DomainError("need at least one angle")
    if r == 1:
        return np.zeros(1)
    return np.linspace(0.0, 179.0, r)


def _check_frame(frame):
    h, w = (int(v) for v in frame)
    if h < 1 or w < 1:
        raise DomainError(f"frame dims must be >= 1, got {frame}")
    return h, w


@dataclass(frozen=True)
class PointSet:
    """Sub-pixel ``(row, col)`` locations inside an ``h x w`` frame."""

    points: np.ndarray
    frame: tuple

    def __post_init__(self):
        h, w = _check_frame(self.frame)
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise DomainError("point coordinates must be finite")
        bad = (pts[:, 0] < 0) | (pts[:, 0] >= h) | (pts[:, 1] < 0) | (pts[:, 1] >= w)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise DomainError(f"point {i} at {tuple(pts[i])} lies outside frame {(h, w)}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "frame", (h, w))

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, frame):
        return cls(np.zeros((0, 2)), frame)

    def min_separation(self):
        if len(self) < 2:
            return math.inf
        diff = self.points[:, None, :] - self.points[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        dist[np.diag_indices(len(self))] = np.inf
        return float(dist.min())

    def union(self, other):
        if self.frame != other.frame:
            raise DomainError("cannot merge point sets from different frames")
        return PointSet(np.vstack([self.points, other.points]), self.frame)


@dataclass(frozen=True)
class Sinogram:
    values: np.ndarray
    angles: np.ndarray
    frame: tuple
    n: int = field(init=False)

    def __post_init__(self):
        h, w = _check_frame(self.frame)
        angles = np.asarray(self.angles, dtype=np.float64).ravel()
        values = np.asarray(self.values, dtype=np.float64)
        n = detector_size(h, w)
        if values.shape != (n, len(angles)):
            raise DomainError(f"sinogram shape {values.shape} != ({n}, {len(angles)})")
        _check_angles(angles)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "frame", (h, w))
        object.__setattr__(self, "n", n)

    @property
    def r(self):
        return len(self.angles)


def _check_angles(angles):
    angles = np.asarray(angles, dtype=np.float64).ravel()
    if angles.size == 0:
        raise DomainError("angle list is empty")
    if np.any(~np.isfinite(angles)) or np.any(angles < 0) or np.any(angles > 179):
        raise DomainError("angles must lie in [0, 179] degrees")
    if np.any(np.diff(angles) <= 0):
        raise DomainError("angles must be strictly increasing")
    return angles


def _trig(angles):
    rad = np.deg2rad(angles)
    cos, sin = np.cos(rad), np.sin(rad)
    # exact zeros at 0/90 degrees keep those projections axis-pure
    cos[np.abs(cos) < 1e-12] = 0.0
    sin[np.abs(sin) < 1e-12] = 0.0
    return cos, sin


def detector_positions(rows, cols, frame, angles):
    """Fractional detector coordinate for every (angle, point); shape (r, k)."""
    h, w = frame
    n = detector_size(h, w)
    cos, sin = _trig(np.asarray(angles, dtype=np.float64))
    dc = np.asarray(cols, dtype=np.float64) - (w - 1) / 2.0
    dr = np.asarray(rows, dtype=np.float64) - (h - 1) / 2.0
    s = cos[:, None] * dc[None, :] + sin[:, None] * dr[None, :]
    return (n - 1) // 2 + s


def radon_forward(points, angles):
    """Project a point set onto ``len(angles)`` detector columns.

    Every point contributes mass 1.0 per column, split between the two
    nearest detector bins. Positions beyond the last bin (possible only for
    points outside the hull of pixel centres) are clamped so mass is always
    conserved.
    """
    angles = _check_angles(angles)
    h, w = points.frame
    n = detector_size(h, w)
    r = len(angles)
    values = np.zeros((n, r))
    if len(points):
        t = np.clip(detector_positions(points.points[:, 0], points.points[:, 1],
                                       (h, w), angles), 0.0, n - 1)
        lo = np.minimum(np.floor(t).astype(np.int64), n - 2) if n > 1 else np.zeros_like(t, dtype=np.int64)
        frac = t - lo
        cols = np.broadcast_to(np.arange(r)[:, None], t.shape)
        np.add.at(values, (lo.ravel(), cols.ravel()), (1.0 - frac).ravel())
        if n > 1:
            np.add.at(values, ((lo + 1).ravel(), cols.ravel()), frac.ravel())
    return Sinogram(values, angles, (h, w))


def ramp_filter(size):
    """Frequency response of the discrete Ram-Lak filter for FFT length ``size``.

    Built from the band-limited spatial kernel (1/4 at 0, -1/(pi k)^2 at odd
    k) so the zero-frequency gain is not forced to zero.
    """
    k = np.concatenate([np.arange(1, size // 2 + 1, 2), np.arange(size // 2 - 1, 0, -2)])
    kernel = np.zeros(size)
    kernel[0] = 0.25
    kernel[1::2] = -1.0 / (np.pi * k) ** 2
    return 2.0 * np.real(np.fft.fft(kernel))


def filter_columns(values):
    n = values.shape[0]
    size = max(64, int(2 ** math.ceil(math.log2(2 * n))))
    padded = np.zeros((size, values.shape[1]))
    padded[:n] = values
    freq = np.fft.fft(padded, axis=0) * ramp_filter(size)[:, None]
    return np.real(np.fft.ifft(freq, axis=0))[:n]


def backproject(columns, angles, frame):
    """Unfiltered backprojection with linear interpolation; returns (h, w)."""
    h, w = frame
    n = columns.shape[0]
    rows, cols = np.mgrid[0:h, 0:w]
    t = detector_positions(rows.ravel(), cols.ravel(), frame, angles)
    lo = np.floor(t).astype(np.int64)
    frac = t - lo
    out = np.zeros(h * w)
    for j in range(len(angles)):
        col = columns[:, j]
        l, f = lo[j], frac[j]
        v0 = np.where((l >= 0) & (l < n), col[np.clip(l, 0, n - 1)], 0.0)
        v1 = np.where((l + 1 >= 0) & (l + 1 < n), col[np.clip(l + 1, 0, n - 1)], 0.0)
        out += (1.0 - f) * v0 + f * v1
    return out.reshape(h, w)


def fbp_inverse(sino):
    """Ram-Lak filtered backprojection of a sinogram onto its frame."""
    if sino.r < 2:
        raise DegenerateReconstructionError(
            f"filtered backprojection needs at least 2 angles, got {sino.r}")
    filtered = filter_columns(sino.values)
    return backproject(filtered, sino.angles, sino.frame) * np.pi / (2 * sino.r)


def extract_peaks(image, rel_threshold=0.4, min_distance=4.0, subpixel=False):
    """Greedy non-maximum suppression over 8-connected local maxima.

    Candidates must reach ``rel_threshold`` times the global maximum. They
    are accepted in descending value order (ties by row, then column) and a
    candidate closer than ``min_distance`` to an accepted peak is dropped.
    With ``subpixel`` each accepted peak is refined by a three-point
    parabolic fit along each axis, kept within half a pixel of the peak.
    """
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise DomainError("map contains non-finite values")
    if not 0 < rel_threshold <= 1:
        raise DomainError("rel_threshold must lie in (0, 1]")
    frame = image.shape
    top = image.max() if image.size else 0.0
    if top <= 0:
        return PointSet.empty(frame)
    padded = np.pad(image, 1, constant_values=-np.inf)
    h, w = frame
    is_max = np.ones(frame, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                is_max &= image >= padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    is_max &= (image >= rel_threshold * top) & (image > 0)
    rr, cc = np.nonzero(is_max)
    order = np.lexsort((cc, rr, -image[rr, cc]))
    accepted = []
    for i in order:
        p = (rr[i], cc[i])
        if all((p[0] - a[0]) ** 2 + (p[1] - a[1]) ** 2 >= min_distance ** 2 for a in accepted):
            accepted.append(p)
    pts = np.array(accepted, dtype=np.float64).reshape(-1, 2)
    if subpixel:
        pts = np.array([_parabolic(image, int(a), int(b)) for a, b in accepted]).reshape(-1, 2)
    return PointSet(pts, frame)


def _parabolic(image, row, col):
    """Per-axis three-point parabola vertex; axes touching the border stay put."""
    out = [float(row), float(col)]
    for axis, idx in enumerate((row, col)):
        line = image[:, col] if axis == 0 else image[row, :]
        if not 0 < idx < line.shape[0] - 1:
            continue
        lo, mid, hi = line[idx - 1], line[idx], line[idx + 1]
        curv = lo - 2.0 * mid + hi
        if curv < 0:
            out[axis] += float(np.clip(0.5 * (lo - hi) / curv, -0.5, 0.5))
    return tuple(out)


def decode_sinogram(sino, rel_threshold=0.2, min_distance=4.0, subpixel=True):
    return extract_peaks(fbp_inverse(sino), rel_threshold, min_distance, subpixel)


def save_sinogram(path, sino, **extra):
    header = {"kind": "sinogram", "n": sino.n, "r": sino.r,
              "angles": [float(a) for a in sino.angles], "frame": list(sino.frame)}
    header.update(extra)
    write_container(path, header, {"values": sino.values})


def load_sinogram(path):
    header, arrays = read_container(path)
    if header.get("kind") != "sinogram":
        raise ParseError(f"{path}: not a sinogram file")
    return Sinogram(arrays["values"], header["angles"], tuple(header["frame"]))


def save_map(path, image, **extra):
    image = np.asarray(image, dtype=np.float64)
    header = {"kind": "map", "frame": list(image.shape)}
    header.update(extra)
    write_container(path, header, {"values": image})


def load_map(path):
    header, arrays = read_container(path)
    if header.get("kind") != "map":
        raise ParseError(f"{path}: not a map file")
    return arrays["values"]
