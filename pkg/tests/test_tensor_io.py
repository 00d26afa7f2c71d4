import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from talkhead import tensor_io as tio


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("t") / "x.tkt"
    tio.write_tensor(path, arr)
    back = tio.read_tensor(path)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_tensor_header_checks(tmp_path):
    p = tmp_path / "x.tkt"
    tio.write_tensor(p, np.zeros((2, 3), np.uint8))
    raw = bytearray(p.read_bytes())
    (tmp_path / "bad_magic.tkt").write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(tio.FormatError):
        tio.read_tensor(tmp_path / "bad_magic.tkt")
    (tmp_path / "short.tkt").write_bytes(bytes(raw[:-1]))
    with pytest.raises(tio.FormatError):
        tio.read_tensor(tmp_path / "short.tkt")


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 20), st.just(6)),
                  elements=st.floats(-10, 10, width=32)))
def test_pose_csv_round_trip_is_exact(tmp_path_factory, poses):
    path = tmp_path_factory.mktemp("p") / "poses.csv"
    tio.write_pose_csv(path, poses)
    np.testing.assert_array_equal(tio.read_pose_csv(path), poses)


def test_pose_csv_validation(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("frame,a,b\n0,1,2\n")
    with pytest.raises(tio.FormatError, match="header"):
        tio.read_pose_csv(p)
    p.write_text("frame,rx,ry,rz,tx,ty,tz\n1,0,0,0,0,0,0\n")
    with pytest.raises(tio.FormatError, match="0..T-1"):
        tio.read_pose_csv(p)
    p.write_text("frame,rx,ry,rz,tx,ty,tz\n0,nan,0,0,0,0,0\n")
    with pytest.raises(tio.FormatError, match="non-finite"):
        tio.read_pose_csv(p)


def test_keypoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(5, 10, 2)).astype(np.float32)
    jac = rng.normal(size=(5, 10, 2, 2)).astype(np.float32)
    tio.write_keypoints(tmp_path / "k.tkt", pos, jac, {"note": "x"})
    p2, j2 = tio.read_keypoints(tmp_path / "k.tkt")
    np.testing.assert_array_equal(p2, pos)
    np.testing.assert_array_equal(j2, jac)
    assert (tmp_path / "k.tkt.json").exists()


def test_frames_dir_round_trip(tmp_path):
    frames = np.random.default_rng(0).integers(0, 256, (3, 8, 8, 3)).astype(np.float32) / 255.0
    tio.write_frames_dir(tmp_path / "f", frames)
    np.testing.assert_array_equal(tio.read_frames_dir(tmp_path / "f"), frames)
    with pytest.raises(tio.FormatError):
        tio.read_frames_dir(tmp_path)
