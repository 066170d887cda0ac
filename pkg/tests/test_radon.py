import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csoe.errors import DegenerateReconstructionError, DomainError, ParseError
from csoe.radon import (PointSet, Sinogram, decode_sinogram, default_angles, detector_size,
                        extract_peaks, fbp_inverse, load_map, load_sinogram, radon_forward, save_map,
                        save_sinogram)


def brute_projection(points, angles, frame):
    """Independent per-point, per-angle projection with explicit loops."""
    h, w = frame
    n = math.ceil(math.sqrt(h * h + w * w))
    centre = (n - 1) // 2
    out = np.zeros((n, len(angles)))
    for j, deg in enumerate(angles):
        th = math.radians(deg)
        c, s = math.cos(th), math.sin(th)
        if abs(c) < 1e-12:
            c = 0.0
        if abs(s) < 1e-12:
            s = 0.0
        for row, col in points:
            t = centre + (col - (w - 1) / 2) * c + (row - (h - 1) / 2) * s
            lo = math.floor(t)
            f = t - lo
            out[lo, j] += 1 - f
            if f:
                out[lo + 1, j] += f
    return out


def random_points(rng, k, frame, sep):
    pts = []
    while len(pts) < k:
        p = rng.uniform(0, 1, 2) * (np.array(frame) - 1)
        if all(np.hypot(*(p - q)) >= sep for q in pts):
            pts.append(p)
    return np.array(pts).reshape(-1, 2)


def test_detector_size_and_angles():
    assert detector_size(64, 64) == 91
    assert detector_size(32, 32) == 46
    a = default_angles(90)
    assert a[0] == 0 and a[-1] == 179 and np.all(np.diff(a) > 0)


def test_empty_pointset_gives_zero_sinogram():
    s = radon_forward(PointSet.empty((20, 30)), default_angles(7))
    assert s.values.shape == (detector_size(20, 30), 7)
    assert not s.values.any()


def test_centre_point_hits_centre_bin():
    s = radon_forward(PointSet([[32, 32]], (65, 65)), [0, 45, 90, 135])
    centre = (s.n - 1) // 2
    for j in range(4):
        assert s.values[centre, j] == pytest.approx(1.0, abs=1e-12)
        assert s.values[:, j].sum() == pytest.approx(1.0, abs=1e-12)


def test_two_points_against_brute_force():
    pts = [[10, 20], [40, 50]]
    angles = default_angles(90)
    s = radon_forward(PointSet(pts, (64, 64)), angles)
    np.testing.assert_allclose(s.values.sum(axis=0), 2.0, atol=1e-12)
    np.testing.assert_allclose(s.values, brute_projection(pts, angles, (64, 64)), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 12))
def test_random_sets_match_brute_force_and_conserve_mass(seed, k):
    rng = np.random.default_rng(seed)
    frame = (int(rng.integers(5, 40)), int(rng.integers(5, 40)))
    pts = rng.uniform(0, 1, (k, 2)) * (np.array(frame) - 1)
    angles = default_angles(int(rng.integers(2, 30)))
    s = radon_forward(PointSet(pts, frame), angles)
    np.testing.assert_allclose(s.values, brute_projection(pts, angles, frame), atol=1e-12)
    np.testing.assert_allclose(s.values.sum(axis=0), k, atol=1e-9)
    assert np.all(s.values >= 0)


def test_linearity_over_disjoint_union():
    rng = np.random.default_rng(3)
    a = PointSet(random_points(rng, 4, (30, 30), 2), (30, 30))
    b = PointSet(random_points(rng, 3, (30, 30), 2), (30, 30))
    ang = default_angles(17)
    np.testing.assert_allclose(radon_forward(a.union(b), ang).values,
                               radon_forward(a, ang).values + radon_forward(b, ang).values, atol=1e-12)


def test_axis_angles_depend_on_one_coordinate():
    ang = [0.0, 90.0]
    base = radon_forward(PointSet([[5.3, 7.1]], (20, 20)), ang).values
    moved_row = radon_forward(PointSet([[12.9, 7.1]], (20, 20)), ang).values
    moved_col = radon_forward(PointSet([[5.3, 15.4]], (20, 20)), ang).values
    np.testing.assert_array_equal(base[:, 0], moved_row[:, 0])
    np.testing.assert_array_equal(base[:, 1], moved_col[:, 1])


@pytest.mark.parametrize("angles", [[-1.0], [180.0], [10.0, 5.0], []])
def test_bad_angles_rejected(angles):
    with pytest.raises(DomainError):
        radon_forward(PointSet([[1, 1]], (4, 4)), angles)


@pytest.mark.parametrize("pt", [[-0.1, 1], [4, 1], [1, 4.0], [np.nan, 1]])
def test_points_outside_frame_rejected(pt):
    with pytest.raises(DomainError):
        PointSet([pt], (4, 4))


def test_fbp_of_zero_is_zero_and_needs_two_angles():
    z = Sinogram(np.zeros((detector_size(16, 16), 5)), default_angles(5), (16, 16))
    assert not fbp_inverse(z).any()
    with pytest.raises(DegenerateReconstructionError):
        fbp_inverse(Sinogram(np.zeros((detector_size(16, 16), 1)), [0.0], (16, 16)))


def test_fbp_single_centred_point_peaks_at_point():
    img = fbp_inverse(radon_forward(PointSet([[31.5, 31.5]], (64, 64)), default_angles(90)))
    r, c = np.unravel_index(np.argmax(img), img.shape)
    assert np.hypot(r - 31.5, c - 31.5) <= 1.0


def test_fbp_two_points_two_local_maxima():
    truth = np.array([[20.0, 20.0], [40.0, 35.0]])
    img = fbp_inverse(radon_forward(PointSet(truth, (64, 64)), default_angles(90)))
    peaks = extract_peaks(img, 0.4, 4).points
    assert len(peaks) == 2
    for p in truth:
        assert np.min(np.hypot(*(peaks - p).T)) <= 1.0


def test_extract_peaks_trivial_maps():
    assert len(extract_peaks(np.zeros((8, 8)))) == 0
    m = np.zeros((8, 8))
    m[3, 5] = 2.0
    np.testing.assert_array_equal(extract_peaks(m).points, [[3, 5]])


def test_extract_peaks_suppression_and_tie_order():
    m = np.zeros((10, 10))
    m[2, 2] = m[2, 7] = 1.0  # equal values: row-major order decides
    m[2, 4] = 0.9            # closer than min_distance to (2, 2)
    pts = extract_peaks(m, 0.5, 3.0).points
    np.testing.assert_array_equal(pts, [[2, 2], [2, 7]])


def test_extract_peaks_five_points_round_trip():
    rng = np.random.default_rng(11)
    truth = random_points(rng, 5, (64, 64), 12)
    img = fbp_inverse(radon_forward(PointSet(truth, (64, 64)), default_angles(90)))
    peaks = extract_peaks(img, 0.4, 4).points
    assert len(peaks) == 5
    for p in peaks:
        assert np.min(np.hypot(*(truth - p).T)) <= 1.0


def test_round_trip_many_random_layouts():
    rng = np.random.default_rng(5)
    for trial in range(25):
        k = int(rng.integers(1, 21))
        truth = random_points(rng, k, (64, 64), 8)
        found = decode_sinogram(radon_forward(PointSet(truth, (64, 64)), default_angles(90))).points
        assert len(found) == k, trial
        d = np.hypot(*(found[:, None, :] - truth[None, :, :]).transpose(2, 0, 1))
        assert np.all(d.min(axis=1) <= 1.0)
        assert len(set(d.argmin(axis=1))) == k


def test_sinogram_and_map_serialisation(tmp_path):
    s = radon_forward(PointSet([[3.25, 4.5]], (9, 11)), default_angles(6))
    save_sinogram(tmp_path / "s.bin", s)
    back = load_sinogram(tmp_path / "s.bin")
    np.testing.assert_array_equal(back.values, s.values)
    np.testing.assert_array_equal(back.angles, s.angles)
    m = np.arange(12.0).reshape(3, 4)
    save_map(tmp_path / "m.bin", m)
    np.testing.assert_array_equal(load_map(tmp_path / "m.bin"), m)
    with pytest.raises(ParseError):
        load_map(tmp_path / "s.bin")
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-3] + b"xyz")
    with pytest.raises(ParseError):
        load_map(tmp_path / "bad.bin")
