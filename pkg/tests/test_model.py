import numpy as np
import pytest
from hypothesis import given, strategies as st

from lpr import model as M
from lpr import tensor as T
from lpr.pointcloud import SyntheticWorld, apply_pose, simulate_scan, yaw_pose, yaw_rotation
from lpr.range_image import ProjectionConfig, column_shift, project_cloud
from lpr.tensor import Tensor

TINY = M.ModelConfig(**M.TINY)


@pytest.fixture(scope="module")
def params():
    return M.init_params(TINY, seed=3)


def random_images(rng, n, cfg=TINY):
    img = rng.uniform(0.5, 60.0, size=(n, cfg.h, cfg.w)).astype(np.float32)
    img[rng.random(img.shape) < 0.2] = -1.0
    return img


def test_default_encoder_layers_reach_height_one():
    for h in (8, 16, 32, 64, 20, 100):
        cfg = M.ModelConfig(h=h, w=36, d_model=16, n_head=2, d_ffn=8, d_inter=8, d_output=8, n_clusters=2)
        assert all(l[0] >= 1 and l[1] >= 1 for l in cfg.rie_layers)
    assert [l[:2] for l in M.default_rie_layers(64, 256)] == [(5, 2), (3, 2), (3, 2), (3, 2), (2, 1)]
    assert len(M.default_rie_layers(32, 256)) == 4


def test_config_rejects_bad_layers_and_heads():
    with pytest.raises(M.ConfigError, match="not 1"):
        M.ModelConfig(h=8, w=36, d_model=16, n_head=2, rie_layers=((3, 1, 16),))
    with pytest.raises(M.ConfigError, match="divisible"):
        M.ModelConfig(d_model=30, n_head=4)


def test_config_text_round_trip():
    cfg = M.ModelConfig(h=16, w=90, d_model=24, n_head=3, num_tm_blocks=2)
    assert M.ModelConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(M.ConfigError):
        M.ModelConfig.from_text("bogus=1\n")


def test_paper_scale_shapes():
    cfg = M.ModelConfig(h=64, w=900)
    shapes = M.param_shapes(cfg)
    assert cfg.d_output == 256 and cfg.d_model == 256 and cfg.n_head == 4 and cfg.n_clusters == 64
    assert shapes["gdg.centers"] == (64, 256)
    assert shapes["gdg.mlp2.weight"] == (1024, 256)


def test_rie_zero_image_zero_bias_gives_zeros(params):
    out = M.rie_forward(Tensor(np.zeros((1, 1, TINY.h, TINY.w), np.float32)), params)
    assert out.shape == (1, TINY.w, TINY.d_model)
    assert not out.data.any()


@given(st.integers(0, 2**31 - 1), st.integers(-100, 100))
def test_rie_is_exactly_shift_equivariant(seed, s):
    rng = np.random.default_rng(seed)
    p = M.init_params(TINY, seed % 1000)
    img = random_images(rng, 1)
    a = M.rie_forward(M.images_to_tensor(img, TINY), p).data
    b = M.rie_forward(M.images_to_tensor(np.roll(img, s, axis=-1), TINY), p).data
    assert np.array_equal(np.roll(a, s, axis=1), b)


def test_single_column_attention_is_value_projection():
    cfg = M.ModelConfig(**{**M.TINY, "w": 1})
    p = M.init_params(cfg, 0)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 1, cfg.d_model)).astype(np.float32))
    att = M.multi_head_attention(x, p, "tm.0.").data
    v = T.linear(x, p["tm.0.wv"], p["tm.0.bv"])
    expect = T.linear(v, p["tm.0.wo"], p["tm.0.bo"]).data
    assert np.allclose(att, expect, atol=1e-6)


@given(st.integers(0, 2**31 - 1), st.integers(1, 35))
def test_tm_is_shift_equivariant(seed, s):
    rng = np.random.default_rng(seed)
    p = M.init_params(TINY, 1)
    F = rng.normal(size=(1, TINY.w, TINY.d_model)).astype(np.float32)
    a = M.tm_forward(Tensor(F), p).data
    b = M.tm_forward(Tensor(np.roll(F, s, axis=1)), p).data
    assert np.max(np.abs(np.roll(a, s, axis=1) - b)) < 1e-5


def test_tm_output_is_layer_normalised(params, rng):
    F = rng.normal(size=(2, TINY.w, TINY.d_model)).astype(np.float32)
    S = M.tm_forward(Tensor(F), params).data
    assert np.all(np.isfinite(S))
    beta = params["tm.0.ln2.beta"].data
    # with unit gamma the per-position mean equals the mean of beta
    assert np.max(np.abs(S.mean(axis=-1) - beta.mean())) < 1e-4


def test_gdg_permutation_invariance(params, rng):
    S = rng.normal(size=(1, TINY.w, 2 * TINY.d_model)).astype(np.float32)
    a = M.gdg_forward(Tensor(S), params).data
    for _ in range(10):
        b = M.gdg_forward(Tensor(S[:, rng.permutation(TINY.w)]), params).data
        assert np.max(np.abs(a - b)) < 1e-5


def test_gdg_degenerate_residuals():
    cfg = M.ModelConfig(**{**M.TINY, "num_tm_blocks": 0})
    p = M.init_params(cfg, 0)
    # zero assignment weights and a dominant bias give a hard assignment to cluster 0
    p["gdg.assign.weight"].data[:] = 0
    p["gdg.assign.bias"].data[:] = -1e4
    p["gdg.assign.bias"].data[0] = 0
    # dyadic centre values keep the residual sums exact in float32
    p["gdg.centers"].data[0] = np.arange(cfg.d_model) / 8.0 - 1.0
    S = np.tile(p["gdg.centers"].data[0], (1, cfg.w, 1))
    out = M.gdg_forward(Tensor(S), p).data
    zero_vlad = Tensor(np.zeros((1, cfg.n_clusters * cfg.d_model), np.float32))
    h = T.relu(T.linear(zero_vlad, p["gdg.mlp1.weight"], p["gdg.mlp1.bias"]))
    expect = T.l2_normalize(T.linear(h, p["gdg.mlp2.weight"], p["gdg.mlp2.bias"]), axis=-1).data
    assert np.all(np.isfinite(out))
    assert np.allclose(out, expect, atol=1e-6)


@given(st.integers(0, 2**31 - 1), st.integers(0, 35))
def test_forward_is_shift_invariant(seed, s):
    rng = np.random.default_rng(seed)
    p = M.init_params(TINY, 2)
    img = random_images(rng, 1)
    a = M.extract(img, p)
    b = M.extract(np.roll(img, s, axis=-1), p)
    assert np.linalg.norm(a - b) < 1e-5


def test_forward_on_rotated_scan():
    cfg = ProjectionConfig(w=36, h=8)
    world = SyntheticWorld.random(4, n_landmarks=300, extent=60)
    cloud = simulate_scan(world, yaw_pose(0, 0, 1.8, 0), beams=8, horizontal_samples=360)
    p = M.init_params(TINY, 5)
    base = M.descriptor_of(project_cloud(cloud, cfg), p)
    for k in (1, 5, 18):
        img = project_cloud(apply_pose(cloud, yaw_rotation(2 * np.pi * k / 36)), cfg)
        assert np.linalg.norm(M.descriptor_of(img, p) - base) < 1e-4


def test_descriptor_is_unit_norm(params, rng):
    d = M.extract(random_images(rng, 5), params)
    assert d.shape == (5, TINY.d_output)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-5)


def test_zero_block_model_has_no_projection():
    cfg = M.ModelConfig(**{**M.TINY, "num_tm_blocks": 0})
    p = M.init_params(cfg, 0)
    assert not any(k.startswith("tm.") for k, _ in p) and "gdg.in_proj.weight" not in p
    cfg3 = M.ModelConfig(**{**M.TINY, "num_tm_blocks": 3})
    p3 = M.init_params(cfg3, 0)
    assert "tm.2.in_proj.weight" in p3 and "tm.0.in_proj.weight" not in p3


def test_image_shape_mismatch(params):
    with pytest.raises(M.ConfigError):
        M.extract(np.zeros((1, 8, 40), np.float32), params)


def test_init_is_deterministic():
    a, b = M.init_params(TINY, 9), M.init_params(TINY, 9)
    assert all(np.array_equal(a[k].data, b[k].data) for k, _ in a)


def test_checkpoint_round_trip(tmp_path, params):
    params.save(tmp_path / "m.lprw")
    assert (tmp_path / "m.lprw.cfg").is_file()
    back = M.ModelParams.load(tmp_path / "m.lprw")
    assert back.config == params.config
    assert all(np.array_equal(back[k].data, params[k].data) for k, _ in params)


def test_descriptor_gradient_matches_finite_differences(rng):
    """Scalar function of the descriptor, a few entries per parameter, float64."""
    p = M.init_params(TINY, 4).astype(np.float64)
    img = random_images(rng, 2)
    proj = rng.normal(size=(2, TINY.d_output))
    with T.precision(np.float64):
        x = M.images_to_tensor(img, TINY, np.float64)
        p.zero_grad()
        T.backward(T.tsum(M.forward(x, p) * Tensor(proj)))
        for name, t in p:
            flat = t.data.reshape(-1)
            for idx in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                old = flat[idx]
                flat[idx] = old + 1e-6
                fp = float(np.sum(M.forward(x, p).data * proj))
                flat[idx] = old - 1e-6
                fm = float(np.sum(M.forward(x, p).data * proj))
                flat[idx] = old
                num = (fp - fm) / 2e-6
                ana = t.grad.reshape(-1)[idx]
                assert abs(ana - num) <= 1e-6 * max(1.0, abs(num)) + 1e-8, name
