import numpy as np
import pytest

from talkhead import kernels
from talkhead.kernels import _pykernels

try:
    from talkhead.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def _signals():
    sr = 16000
    t = np.arange(400) / sr
    rng = np.random.default_rng(0)
    return np.stack([
        np.zeros(400),
        0.5 * np.sin(2 * np.pi * 440 * t),
        0.3 * np.sin(2 * np.pi * 120 * t) + 0.1 * np.sin(2 * np.pi * 240 * t),
        rng.normal(0, 0.2, 400),
        np.full(400, 0.7),
    ])


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


def test_pure_python_pitch_values():
    p, v = _pykernels.pitch_track(_signals(), 16000.0, 60.0, 500.0, 0.3)
    assert v[0] == 0 and p[0] == 0
    assert abs(p[1] - 440) < 1 and v[1] == 1
    assert abs(p[2] - 120) < 2 and v[2] == 1
    assert v[3] == 0
    assert v[4] == 0  # DC only: mean removed -> no energy


@needs_ext
def test_backends_agree_on_pitch():
    w = _signals()
    pc, vc = _ckernels.pitch_track(w, 16000.0, 60.0, 500.0, 0.3)
    pp, vp = _pykernels.pitch_track(w, 16000.0, 60.0, 500.0, 0.3)
    np.testing.assert_array_equal(np.asarray(vc), np.asarray(vp))
    np.testing.assert_allclose(np.asarray(pc), np.asarray(pp), rtol=1e-9, atol=1e-9)


def _random_segments(rng, n, lo=-5, hi=70):
    return rng.integers(lo, hi, size=(n, 4)).astype(np.int64)


@pytest.mark.parametrize("impl", ["python", pytest.param("cython", marks=needs_ext)])
def test_bresenham_endpoints_and_symmetry(impl):
    draw = _pykernels.draw_segments if impl == "python" else _ckernels.draw_segments
    a = np.zeros((64, 64), np.uint8)
    draw(a, np.array([[3, 5, 40, 22]], np.int64))
    b = np.zeros((64, 64), np.uint8)
    draw(b, np.array([[40, 22, 3, 5]], np.int64))
    np.testing.assert_array_equal(a, b)  # direction independent
    assert a[5, 3] == 1 and a[22, 40] == 1
    assert a.sum() == 38  # one pixel per step along the major axis
    # 8-connected: each column between the endpoints has exactly one pixel
    assert all(a[:, x].sum() == 1 for x in range(3, 41))


@needs_ext
def test_backends_agree_on_raster():
    rng = np.random.default_rng(3)
    for _ in range(20):
        segs = _random_segments(rng, 12)
        a = np.zeros((64, 64), np.uint8)
        b = np.zeros((64, 64), np.uint8)
        _ckernels.draw_segments(a, segs)
        _pykernels.draw_segments(b, segs)
        np.testing.assert_array_equal(a, b)


def test_out_of_bounds_pixels_dropped():
    a = np.zeros((8, 8), np.uint8)
    kernels.draw_segments(a, np.array([[-3, 2, 12, 2]], np.int64))
    assert a[2].sum() == 8 and a.sum() == 8
