import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmodal import autodiff as ad
from xmodal import encoders as enc
from xmodal.gradcheck import check
from xmodal.synthdata import SceneConfig, generate_scene

CFG = enc.EncoderConfig()


@pytest.fixture(scope="module")
def params():
    return enc.init_encoder_params(CFG, np.random.default_rng(0))


def test_parameter_shapes(params):
    assert params["point.w1"].shape == (3, 32)
    assert params["patch.embed"].shape == (48, 32)
    assert params["head.shared_2d"].shape == (32, 16)
    assert params["mask_token"].shape == (1, 16)
    assert np.all(params["mask_token"].data == 0)


def test_glorot_bound():
    w = enc.glorot(np.random.default_rng(1), 30, 10)
    assert np.abs(w).max() <= np.sqrt(6 / 40)


def test_single_point_is_finite(params):
    out = enc.encode_points(np.array([[1.0, 2.0, 3.0]]), params, CFG)
    assert out.shape == (1, 32) and np.all(np.isfinite(out.data))


def test_fewer_points_than_k(params):
    out = enc.encode_points(np.random.default_rng(0).standard_normal((3, 3)), params, CFG)
    assert out.shape == (3, 32)


def test_point_permutation_equivariance(params):
    pts = np.random.default_rng(2).standard_normal((40, 3))
    perm = np.random.default_rng(3).permutation(40)
    a = enc.encode_points(pts, params, CFG).data
    b = enc.encode_points(pts[perm], params, CFG).data
    assert np.allclose(a[perm], b, atol=1e-12)


def test_normalize_points():
    x = enc.normalize_points(np.random.default_rng(4).uniform(0, 10, (20, 3)))
    assert np.allclose(x.mean(axis=0), 0, atol=1e-12)
    assert np.isclose(np.linalg.norm(x, axis=1).max(), 1.0)


def test_point_encoder_gradients():
    pts = np.random.default_rng(5).standard_normal((10, 3))
    small = enc.EncoderConfig(latent=4, shared_dim=2, knn_k=3)
    p = enc.init_encoder_params(small, np.random.default_rng(6))
    names = ["point.w1", "point.b1", "point.w2", "point.b2", "point.edge", "point.edge.b", "point.w3", "point.b3"]
    w = np.random.default_rng(7).standard_normal((10, 4))

    def build(*vals):
        q = dict(p) | dict(zip(names, vals))
        return ad.total(ad.mul(enc.encode_points(pts, q, small), ad.constant(w)))
    assert check(build, [p[n].data for n in names]) < 1e-6


def test_constant_image_gives_identical_patches(params):
    out = enc.encode_image(np.full((32, 32, 3), 0.3), params, CFG).data
    assert out.shape == (64, 32)
    assert np.allclose(out, out[0], atol=1e-12)


def test_indivisible_image_rejected(params):
    with pytest.raises(ad.ShapeError):
        enc.encode_image(np.zeros((30, 32, 3)), params, CFG)


def test_patchify_round_trip():
    img = np.random.default_rng(8).uniform(size=(8, 12, 3))
    assert np.array_equal(enc.unpatchify(enc.patchify(img, 4), (2, 3), 4), img)


def test_image_encoder_gradients():
    img = np.random.default_rng(9).uniform(size=(8, 8, 3))
    small = enc.EncoderConfig(latent=4, shared_dim=2)
    p = enc.init_encoder_params(small, np.random.default_rng(10))
    names = ["patch.embed", "patch.embed.b", "patch.mlp", "patch.mlp.b"]
    w = np.random.default_rng(11).standard_normal((4, 4))

    def build(*vals):
        q = dict(p) | dict(zip(names, vals))
        return ad.total(ad.mul(enc.encode_image(img, q, small), ad.constant(w)))
    assert check(build, [p[n].data for n in names]) < 1e-6


def test_upsample_constant_and_midpoint():
    out = enc.upsample_bilinear(ad.constant(np.full((4, 2), 1.5)), (2, 2), 4, 4).data
    assert out.shape == (64, 2) and np.allclose(out, 1.5)
    # 1-D section: nodes at pixel centers 1.5 and 5.5; pixel 3 and 4 straddle the midpoint 3.5
    line = enc._interp_1d(2, 4) @ np.array([0.0, 1.0])
    assert np.allclose(line, [0, 0, 0.125, 0.375, 0.625, 0.875, 1, 1])
    assert np.isclose((line[3] + line[4]) / 2, 0.5)


def test_upsample_factor_must_match_patch():
    with pytest.raises(ValueError):
        enc.upsample_bilinear(ad.constant(np.ones((4, 2))), (2, 2), 2, 4)


def test_upsample_gradients():
    w = np.random.default_rng(12).standard_normal((96, 3))
    err = check(lambda f: ad.total(ad.mul(enc.upsample_bilinear(f, (2, 3), 4, 4), ad.constant(w))),
                [np.random.default_rng(13).standard_normal((6, 3))])
    assert err < 1e-6


def test_heads_shapes_and_norms(params):
    s = generate_scene(SceneConfig(), 1)
    pl = enc.encode_points(s.points, params, CFG)
    il = enc.encode_image(s.image, params, CFG)
    fb = enc.project_heads(pl, il, params, (8, 8), 4)
    assert fb.f2d_shared.shape == (1024, 16) and fb.f3d_shared.shape == (s.n_points, 16)
    assert fb.g2d_specific.shape == (1024, 16) and fb.g3d_specific.shape == (s.n_points, 16)
    for f in (fb.f2d_shared, fb.f3d_shared):
        assert np.all(np.abs(np.linalg.norm(f.data, axis=1) - 1) <= 1e-9)
    cos = fb.f3d_shared.data @ fb.f2d_shared.data[:50].T
    assert cos.min() >= -1 - 1e-12 and cos.max() <= 1 + 1e-12


def test_heads_reject_zero_rows(params):
    p = dict(params)
    p["head.shared_3d"] = ad.parameter(np.zeros((32, 16)))
    with pytest.raises(ad.DegenerateInputError):
        enc.project_heads(ad.constant(np.ones((3, 32))), ad.constant(np.ones((64, 32))), p, (8, 8), 4)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100.0))
def test_shared_features_scale_invariant(c):
    p = enc.init_encoder_params(CFG, np.random.default_rng(0))
    pl = np.random.default_rng(1).standard_normal((5, 32))
    il = np.random.default_rng(2).standard_normal((4, 32))
    a = enc.project_heads(ad.constant(pl), ad.constant(il), p, (2, 2), 4)
    b = enc.project_heads(ad.constant(c * pl), ad.constant(c * il), p, (2, 2), 4)
    assert np.allclose(a.f3d_shared.data, b.f3d_shared.data, atol=1e-9)
    assert np.allclose(a.f2d_shared.data, b.f2d_shared.data, atol=1e-9)


@pytest.mark.slow
def test_head_outputs_finite_over_many_scenes(params):
    cfg = SceneConfig(n_rays=128)
    for seed in range(100):
        s = generate_scene(cfg, seed)
        fb = enc.project_heads(enc.encode_points(s.points, params, CFG), enc.encode_image(s.image, params, CFG),
                               params, (8, 8), 4)
        for v in (fb.f2d_shared, fb.f3d_shared, fb.g2d_specific, fb.g3d_specific):
            assert np.all(np.isfinite(v.data))
