import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctxmono3d import kitti_io as K
from ctxmono3d.geom_bev import BevBox

from conftest import FIXTURES

KROOT = FIXTURES / "kitti"
CALIB_TXT = (KROOT / "calib" / "000123.txt").read_text()
LABEL_TXT = (KROOT / "label_2" / "000123.txt").read_text()
CAR = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"
IDENTITY_CALIB = """P2: 1 0 0 0 0 1 0 0 0 0 1 0
R0_rect: 1 0 0 0 1 0 0 0 1
Tr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0
"""


# ---------------------------------------------------------------- calib


def test_calib_identity_fixture_exact():
    c = K.parse_calib(IDENTITY_CALIB)
    assert np.array_equal(c.P2, np.hstack([np.eye(3), np.zeros((3, 1))]))
    assert np.array_equal(c.velo_to_cam(), np.eye(4))


def test_calib_round_trip_bitwise():
    c = K.parse_calib(CALIB_TXT)
    assert K.serialize_calib(c) == CALIB_TXT
    assert list(c.entries)[:4] == ["P0", "P1", "P2", "P3"]


def test_calib_real_fixture_projects_into_image():
    c = K.parse_calib(CALIB_TXT)
    p = c.P2 @ np.array([0.0, 0.0, 10.0, 1.0])
    u, v = p[0] / p[2], p[1] / p[2]
    assert 0 <= u < 1242 and 0 <= v < 375


@pytest.mark.parametrize("key", ["P2", "R0_rect", "Tr_velo_to_cam"])
def test_calib_missing_key(key):
    text = "\n".join(l for l in IDENTITY_CALIB.splitlines() if not l.startswith(key + ":"))
    with pytest.raises(K.KittiFormatError, match=key):
        K.parse_calib(text)


def test_calib_malformed_and_count_errors():
    with pytest.raises(K.KittiFormatError, match=r"line 2.*field 3"):
        K.parse_calib(IDENTITY_CALIB.replace("R0_rect: 1 0 0", "R0_rect: 1 0 x"))
    with pytest.raises(K.KittiFormatError, match="needs 12 values"):
        K.parse_calib(IDENTITY_CALIB.replace("P2: 1 0 0 0 ", "P2: 1 0 0 "))
    with pytest.raises(K.KittiFormatError, match="line 1"):
        K.parse_calib("garbage\n" + IDENTITY_CALIB)


# ---------------------------------------------------------------- labels


def test_labels_empty():
    assert K.parse_labels("") == []


def test_label_single_car_fields():
    r = K.parse_label_line(CAR)
    assert r.cls == "Car" and r.truncation == 0.0 and r.occlusion == 0
    assert r.alpha == -1.58 and r.bbox == (587.01, 173.33, 614.12, 200.12)
    assert r.dims == (1.65, 1.67, 3.64) and r.location == (-0.65, 1.71, 46.70)
    assert r.rotation_y == -1.59 and r.score is None
    assert K.format_label(r) == CAR


def test_label_fixture_round_trip():
    recs = K.parse_labels(LABEL_TXT)
    assert [r.cls for r in recs] == ["Car", "Car", "Pedestrian", "DontCare"]
    assert recs[-1].is_dontcare
    assert K.serialize_labels(recs) == K.normalize_labels(LABEL_TXT) == LABEL_TXT


def test_label_normalize_canonical():
    messy = "Car  0 0 -1.580   587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.7 -1.59\n\n"
    assert K.normalize_labels(messy) == CAR + "\n"


def test_label_score_field():
    r = K.parse_label_line(CAR + " 0.8731")
    assert r.score == 0.8731
    assert K.parse_label_line(K.format_label(r)) == r


def test_label_errors_carry_locus():
    with pytest.raises(K.KittiFormatError, match="line 2.*15 or 16"):
        K.parse_labels(CAR + "\nCar 0 0\n")
    with pytest.raises(K.KittiFormatError, match="line 1.*field"):
        K.parse_labels(CAR.replace("587.01", "5x7"))
    bad_box = CAR.replace("587.01 173.33 614.12", "620.00 173.33 614.12")
    with pytest.raises(K.KittiFormatError):
        K.parse_labels(bad_box)
    with pytest.raises(K.KittiFormatError):
        K.parse_labels(CAR.replace("1.65 1.67 3.64", "1.65 0.00 3.64"))


def test_label_bev_conversion():
    r = K.parse_label_line(CAR)
    b = r.to_bev_box()
    assert (b.cx, b.cz, b.yaw, b.length, b.width) == (-0.65, 46.70, 1.59, 3.64, 1.67)
    back = K.LabelRecord.from_bev_box(b, bbox=r.bbox)
    assert back.rotation_y == pytest.approx(-1.59) and back.location == r.location


def test_difficulty():
    r = K.parse_label_line(CAR)  # height 26.79 px, no occlusion
    assert K.difficulty(r) == "moderate"
    assert not K.meets_difficulty(r, "easy") and K.meets_difficulty(r, "hard")
    recs = K.parse_labels(LABEL_TXT)
    assert [K.difficulty(x) for x in recs] == ["easy", "moderate", "easy", None]


# ---------------------------------------------------------------- velodyne


def test_velodyne_empty_and_fixed():
    assert K.read_velodyne(b"").shape == (0, 4)
    buf = struct.pack("<8f", 1.0, 2.0, 3.0, 0.5, -4.0, 5.5, 0.0, 1.0)
    cloud = K.read_velodyne(buf)
    assert cloud.dtype == np.float32
    assert cloud.tolist() == [[1.0, 2.0, 3.0, 0.5], [-4.0, 5.5, 0.0, 1.0]]


def test_velodyne_length_error():
    with pytest.raises(K.KittiFormatError, match="17"):
        K.read_velodyne(b"\0" * 17)


def test_velodyne_fixture_round_trip():
    buf = (KROOT / "velodyne" / "000123.bin").read_bytes()
    assert K.write_velodyne(K.read_velodyne(buf)) == buf


@given(st.integers(0, 50), st.integers(0, 2**31))
def test_velodyne_random_round_trip(n, seed):
    cloud = np.random.default_rng(seed).normal(size=(n, 4)).astype(np.float32)
    assert np.array_equal(K.read_velodyne(K.write_velodyne(cloud)), cloud)


# ---------------------------------------------------------------- projection


def test_identity_projection_principal_point():
    c = K.Calib.identity(f=700.0, cu=600.0, cv=180.0)
    uv, depth, valid = K.project_velo_to_image(np.array([[0.0, 0.0, 10.0, 0.0]]), c)
    assert uv[0].tolist() == [600.0, 180.0] and depth[0] == 10.0 and valid[0]


def test_behind_camera_invalid():
    c = K.Calib.identity(700.0, 600.0, 180.0)
    _, depth, valid = K.project_velo_to_image(np.array([[1.0, 0.0, -5.0, 0.0], [0.0, 0.0, 0.0, 0.0]]), c)
    assert not valid.any()


def test_projection_matches_hand_multiplication():
    c = K.parse_calib(CALIB_TXT)
    cloud = K.read_velodyne((KROOT / "velodyne" / "000123.bin").read_bytes())[:50]
    uv, depth, valid = K.project_velo_to_image(cloud, c)
    for k, p in enumerate(cloud.astype(np.float64)):
        xv = [p[0], p[1], p[2], 1.0]
        tr = [sum(c.Tr_velo_to_cam[i][j] * xv[j] for j in range(4)) for i in range(3)]
        xc = [sum(c.R0_rect[i][j] * tr[j] for j in range(3)) for i in range(3)] + [1.0]
        img = [sum(c.P2[i][j] * xc[j] for j in range(4)) for i in range(3)]
        assert abs(depth[k] - xc[2]) < 1e-9
        if xc[2] > 0:
            assert abs(uv[k, 0] - img[0] / img[2]) < 1e-4
            assert abs(uv[k, 1] - img[1] / img[2]) < 1e-4


@given(st.floats(0.1, 100), st.floats(-20, 20), st.floats(-3, 3), st.floats(1, 60))
def test_projection_homogeneous(s, x, y, z):
    c = K.parse_calib(CALIB_TXT)
    h = np.array([x, y, z, 1.0])
    a = c.P2 @ h
    b = c.P2 @ (s * h)
    assert np.allclose(a[:2] / a[2], b[:2] / b[2], atol=1e-9, rtol=0)


# ---------------------------------------------------------------- RoI points


def test_roi_empty_region():
    c = K.Calib.identity(700.0, 600.0, 180.0)
    cloud = np.array([[0.0, 0.0, 10.0, 0.0]])
    assert K.extract_roi_points(cloud, c, (0.0, 0.0, 10.0, 10.0)).shape == (0, 2)


def test_roi_single_point():
    c = K.Calib.identity(700.0, 600.0, 180.0)
    cloud = np.array([[1.0, 0.5, 10.0, 0.0], [30.0, 0.0, 10.0, 0.0]])
    pts = K.extract_roi_points(cloud, c, (600.0, 150.0, 700.0, 250.0))
    assert pts.tolist() == [[1.0, 10.0]]


def test_roi_box_equals_mask_on_fixture():
    f = K.load_frame(KROOT, 123)
    shape = (375, 1242)
    for rec in f.labels:
        if rec.is_dontcare:
            continue
        a = K.extract_roi_points(f.cloud, f.calib, rec.bbox, image_shape=shape)
        b = K.extract_roi_points(f.cloud, f.calib, K.box_to_mask(rec.bbox, shape), image_shape=shape)
        assert len(a) > 0 and np.array_equal(a, b)


@given(st.floats(0, 1100), st.floats(0, 300), st.floats(5, 140), st.floats(5, 70))
def test_roi_box_equals_mask_random(x1, y1, w, h):
    f = K.load_frame(KROOT, 123)
    box = (x1, y1, x1 + w, y1 + h)
    shape = (375, 1242)
    a = K.extract_roi_points(f.cloud, f.calib, box)
    b = K.extract_roi_points(f.cloud, f.calib, K.box_to_mask(box, shape))
    assert np.array_equal(a, b)


def test_roi_points_subset_of_cloud():
    f = K.load_frame(KROOT, 123)
    cam = K.velo_to_cam(f.cloud, f.calib)[:, [0, 2]]
    pts = K.extract_roi_points(f.cloud, f.calib, f.labels[0].bbox)
    have = {tuple(r) for r in cam.tolist()}
    assert all(tuple(p) in have for p in pts.tolist())


def test_height_filter():
    hf = K.HeightFilter(enabled=True)
    y = np.array([-0.5, 0.0, 1.0, 1.6, 1.7])
    assert hf.keep(y).tolist() == [True, True, True, False, False]
    lab = K.parse_label_line(CAR)  # y_base 1.71, h 1.65: band [-0.24, 1.61]
    assert hf.keep(y, lab).tolist() == [False, True, True, True, False]
    assert K.HeightFilter().keep(y).all()


def test_roi_region_errors():
    c = K.Calib.identity()
    cloud = np.zeros((1, 4))
    with pytest.raises(ValueError):
        K.extract_roi_points(cloud, c, (5.0, 0.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        K.extract_roi_points(cloud, c, (0.0, 0.0, 2000.0, 10.0), image_shape=(375, 1242))


# ---------------------------------------------------------------- frames


def test_frame_and_ids():
    assert K.frame_name(7) == "000007"
    with pytest.raises(ValueError):
        K.frame_name("12a")
    assert K.load_id_list((KROOT / "val.txt").read_text()) == ["000123"]
    with pytest.raises(K.KittiFormatError, match="line 2"):
        K.load_id_list("000001\nabc\n")


def test_load_frame_fixture():
    f = K.load_frame(KROOT, "000123")
    assert f.frame_id == "000123" and f.cloud.shape == (640, 4) and len(f.labels) == 4
    assert f.image_shape is None


def test_load_frame_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="calib"):
        K.load_frame(tmp_path, 1)


def test_png_size(tmp_path):
    p = tmp_path / "x.png"
    p.write_bytes(b"\x89PNG\r\n\x1a\n" + struct.pack(">I", 13) + b"IHDR" + struct.pack(">II", 1242, 375) + b"\0" * 5)
    assert K.png_size(p) == (375, 1242)
    q = tmp_path / "y.png"
    q.write_bytes(b"nope" * 10)
    with pytest.raises(K.KittiFormatError):
        K.png_size(q)


def test_label_dir_round_trip(tmp_path):
    recs = {"000123": K.parse_labels(LABEL_TXT), "000005": []}
    K.write_label_dir(tmp_path, recs)
    assert K.read_label_dir(tmp_path) == {"000005": [], "000123": recs["000123"]}
    assert (tmp_path / "000123.txt").read_text() == LABEL_TXT
