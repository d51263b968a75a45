import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctxmono3d import encoders_toy as enc
from ctxmono3d.gradsuite import fd_gradient
from ctxmono3d.weak3d_losses import relative_error


def test_init_deterministic():
    a, b, c = enc.init_params(3, 4, 8), enc.init_params(3, 4, 8), enc.init_params(4, 4, 8)
    assert a.equals(b)
    assert not a.equals(c)
    lim1 = np.sqrt(6.0 / (4 + 8))
    lim2 = np.sqrt(6.0 / (9 * 8 + 9 * 8))
    assert np.max(np.abs(a.w1)) <= lim1 and np.max(np.abs(a.w2)) <= lim2


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        enc.init_params(0, 0, 4)


def test_encode_zero_params():
    p = enc.init_params(0, 3, 5).zeros_like()
    y = enc.encode(p, np.random.default_rng(0).normal(size=(3, 4, 6)))
    assert y.shape == (5, 4, 6) and np.all(y == 0)


def test_encode_identity():
    p = enc.init_params(0, 3, 3).zeros_like()
    p.w1[...] = np.eye(3)
    p.w2[:, :, 1, 1] = np.eye(3)
    x = np.random.default_rng(1).uniform(0.1, 2.0, size=(3, 5, 4))
    assert np.array_equal(enc.encode(p, x), x)


def test_encode_shape_mismatch():
    with pytest.raises(ValueError):
        enc.encode(enc.init_params(0, 3, 3), np.zeros((2, 4, 4)))


def test_encode_gradient_sum_probe():
    rng = np.random.default_rng(2)
    p = enc.init_params(5, 3, 4)
    p.b1[:] = rng.normal(0, 0.1, size=p.b1.shape)
    x = rng.normal(size=(3, 5, 5))
    y, cache = enc.encode(p, x, return_cache=True)
    g, gx = enc.encode_backward(p, cache, np.ones_like(y))
    f = lambda: float(enc.encode(p, x).sum())
    num = fd_gradient(f, list(p.to_dict().values()) + [x], 1e-6)
    assert relative_error(np.concatenate([g.flat(), gx.ravel()]), num) < 1e-4


def test_roi_pool_constant_grid():
    F = np.full((4, 6, 6), 2.5)
    y = enc.roi_pool(F, enc.RoiRect(0.7, 1.2, 4.9, 5.5), enc.MlpParams.identity(4))
    assert np.allclose(y, 2.5, atol=1e-14)


def test_roi_align_one_exact_cell():
    F = np.random.default_rng(3).normal(size=(3, 5, 5))
    # the bilinear samples of cell (2, 3) straddle neighbours; a unit cell at an
    # interior location averages symmetric taps that straddle the center
    pooled = enc.roi_align(F, enc.RoiRect(3.0, 2.0, 4.0, 3.0))
    rows, cols, wts = enc.roi_weights(enc.RoiRect(3.0, 2.0, 4.0, 3.0), 5, 5)
    assert wts.sum() == pytest.approx(1.0)
    assert np.allclose(pooled, F[:, rows, cols] @ wts)
    # a cell at a grid corner clamps every sample to that cell
    assert np.allclose(enc.roi_align(F, enc.RoiRect(0.0, 0.0, 0.5, 0.5)), F[:, 0, 0])


def test_roi_align_linear_field_exact():
    # bilinear sampling reproduces an affine field exactly away from the border
    yy, xx = np.mgrid[0:6, 0:6].astype(float)
    F = np.stack([xx + 0.5, yy + 0.5])  # cell-center coordinates
    roi = enc.RoiRect(1.0, 1.0, 4.0, 5.0)
    assert np.allclose(enc.roi_align(F, roi), [2.5, 3.0], atol=1e-12)


def test_roi_errors():
    with pytest.raises(ValueError):
        enc.RoiRect(1.0, 1.0, 1.0, 2.0)
    with pytest.raises(ValueError):
        enc.roi_align(np.zeros((1, 3, 3)), enc.RoiRect(0.0, 0.0, 3.5, 2.0))


def test_roi_pool_gradient():
    rng = np.random.default_rng(4)
    F = rng.normal(size=(3, 6, 5))
    proj = enc.init_mlp(6, 3, 4)
    proj.ba[:] = rng.normal(0, 0.1, size=proj.ba.shape)
    roi = enc.RoiRect(0.4, 1.3, 3.7, 5.2)
    R = rng.normal(size=4)
    _, cache = enc.roi_pool(F, roi, proj, return_cache=True)
    gp, gF = enc.roi_pool_backward(proj, cache, R)
    f = lambda: float(enc.roi_pool(F, roi, proj) @ R)
    num = fd_gradient(f, list(proj.to_dict().values()) + [F], 1e-6)
    assert relative_error(np.concatenate([gp.flat(), gF.ravel()]), num) < 1e-4


@given(st.floats(0, 3), st.floats(0, 3), st.floats(0.3, 3), st.floats(0.3, 3), st.integers(0, 2**31))
def test_roi_pool_ignores_outside_support(x0, y0, w, h, seed):
    roi = enc.RoiRect(x0, y0, min(x0 + w, 6.0), min(y0 + h, 6.0))
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(2, 6, 6))
    rows, cols, _ = enc.roi_weights(roi, 6, 6)
    mask = np.ones((6, 6), bool)
    mask[rows, cols] = False
    G = F.copy()
    G[:, mask] = rng.normal(size=(2, int(mask.sum())))
    proj = enc.init_mlp(1, 2, 3)
    assert np.array_equal(enc.roi_pool(F, roi, proj), enc.roi_pool(G, roi, proj))


def test_multiscale():
    roi = enc.RoiRect(1.0, 1.0, 3.0, 3.0)
    p = enc.MlpParams.identity(2)
    F1, F2 = np.full((2, 8, 8), 1.5), np.full((2, 4, 4), 0.5)
    assert np.array_equal(enc.multiscale_concat([F1], roi, [p]), enc.roi_pool(F1, roi, p))
    out = enc.multiscale_concat([F1, F2], roi, [p, p])
    assert np.allclose(out, [1.5, 1.5, 0.5, 0.5])
    q = enc.init_mlp(0, 2, 5)
    assert enc.multiscale_concat([F1, F2], roi, [p, q]).shape == (7,)
    with pytest.raises(ValueError):
        enc.multiscale_concat([], roi, [])


def test_record_round_trip(tmp_path):
    p = enc.init_params(9, 3, 4)
    arrays = p.to_dict("enc.")
    arrays["scalar"] = np.array(3.25)
    path = tmp_path / "p.bin"
    enc.save_record(path, arrays)
    back = enc.load_record(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == np.shape(arrays[k])
        assert back[k].tobytes() == np.asarray(arrays[k]).tobytes()
    assert path.read_bytes()[:8] == b"CTXM3DP1"
    assert enc.dump_record(back) == path.read_bytes()


def test_record_errors():
    good = enc.dump_record({"a": np.arange(3.0)})
    with pytest.raises(ValueError, match="magic"):
        enc.parse_record(b"XXXXXXXX" + good[8:])
    with pytest.raises(ValueError, match="truncated"):
        enc.parse_record(good[:-4])
    with pytest.raises(ValueError, match="trailing"):
        enc.parse_record(good + b"\0")
