import numpy as np
import pytest

from geomae.masking import select_mask
from geomae.model import autograd as ag
from geomae.model.data import merge_batches, scene_batch
from geomae.model.loss import compute_loss
from geomae.model.network import (
    ModelConfig,
    Predictions,
    decode_dual,
    decoder_param_names,
    encode,
    heads,
    init_params,
    point_features,
    positional_encoding,
    transformer_block,
    vfe_embed,
    window_attention,
    window_partition,
)
from geomae.model.optim import AdamW
from geomae.model.train import (
    TrainConfig,
    forward,
    gradients,
    load_params,
    loss_and_grads,
    save_params,
    train,
    write_loss_csv,
)
from geomae.pointcloud_io import PointCloud, empty_records
from geomae.reference_oracle import oracle_loss
from geomae.voxelizer import GridConfig, voxelize

SMALL = ModelConfig(d_model=16, n_heads=2, d_hidden=32, vfe_channels=(8, 16), head_hidden=16, window=(2, 2))


def _vfe_token(params, pts, center, cfg):
    seg = np.zeros(len(pts), dtype=np.int64)
    feats = point_features(pts, seg, 1, np.asarray(center)[None])
    return vfe_embed(params, feats, seg, 1, cfg).value[0]


def test_vfe_single_point():
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    pts = np.array([[0.3, 0.2, 1.0]])
    feats = point_features(pts, np.zeros(1, np.int64), 1, np.array([[0.25, 0.25, 1.0]]))
    np.testing.assert_array_equal(feats[0, 3:6], 0.0)
    tok = vfe_embed(params, feats, np.zeros(1, np.int64), 1, cfg)
    assert tok.shape == (1, 128)


def test_vfe_duplicates_and_permutations(rng):
    params = init_params(SMALL, 1)
    pts = rng.uniform(size=(12, 3))
    center = (0.5, 0.5, 0.5)
    base = _vfe_token(params, pts, center, SMALL)
    np.testing.assert_allclose(_vfe_token(params, np.concatenate([pts, pts]), center, SMALL), base, atol=1e-12)
    for _ in range(100):
        perm = rng.permutation(12)
        np.testing.assert_allclose(_vfe_token(params, pts[perm], center, SMALL), base, atol=1e-12)


def test_window_locality_in_one_block(rng):
    params = init_params(SMALL, 2)
    ij = np.array([[0, 0], [1, 1], [5, 5]])
    scene = np.zeros(3, np.int64)
    win = window_partition(ij, scene, SMALL.window, shifted=False)
    x = rng.normal(size=(3, 16))
    out = transformer_block(params, "enc.0", ag.Tensor(x), win, SMALL).value
    x2 = x.copy()
    x2[2] += 5.0
    out2 = transformer_block(params, "enc.0", ag.Tensor(x2), win, SMALL).value
    np.testing.assert_array_equal(out[:2], out2[:2])
    assert not np.array_equal(out[2], out2[2])


def test_shifted_windows_regroup_tokens():
    ij = np.array([[1, 1], [2, 2]])
    scene = np.zeros(2, np.int64)
    plain = window_partition(ij, scene, (2, 2), shifted=False)
    shifted = window_partition(ij, scene, (2, 2), shifted=True)
    assert plain.index.shape[0] == 2
    assert shifted.index.shape[0] == 1


def test_singleton_attention_is_value_projection(rng):
    params = init_params(SMALL, 3)
    x = ag.Tensor(rng.normal(size=(1, 16)))
    win = window_partition(np.array([[0, 0]]), np.zeros(1, np.int64), (2, 2), False)
    out = window_attention(params, "enc.0", x, win, SMALL).value
    qkv = x.value @ params["enc.0.qkv.w"].value + params["enc.0.qkv.b"].value
    v = qkv[:, 32:48]
    want = v @ params["enc.0.proj.w"].value + params["enc.0.proj.b"].value
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_encode_shape(rng):
    params = init_params(SMALL, 4)
    ij = rng.integers(0, 6, size=(9, 2))
    out = encode(params, ag.Tensor(rng.normal(size=(9, 16))), ij, SMALL)
    assert out.shape == (9, 16)


def test_decode_no_masked_tokens(rng):
    params = init_params(SMALL, 5)
    enc = ag.Tensor(rng.normal(size=(3, 16)))
    a, b = decode_dual(params, enc, np.arange(3), np.zeros(0, np.int64), np.array([[0, 0], [1, 0], [2, 0]]), SMALL)
    assert a.shape == (0, 16) and b.shape == (0, 16)


def test_isolated_mask_tokens_depend_only_on_position(rng):
    params = init_params(SMALL, 6)
    enc = ag.Tensor(rng.normal(size=(1, 16)))
    ij = np.array([[0, 0], [8, 8], [16, 0]])
    tp, ts = decode_dual(params, enc, np.array([0]), np.array([1, 2]), ij, SMALL)
    alone_p, alone_s = decode_dual(params, ag.Tensor(np.zeros((0, 16))), np.zeros(0, np.int64), np.array([0]), ij[1:2], SMALL)
    np.testing.assert_allclose(tp.value[0], alone_p.value[0], atol=1e-12)
    np.testing.assert_allclose(ts.value[0], alone_s.value[0], atol=1e-12)
    pe = positional_encoding(ij[1:], 16)
    assert not np.allclose(pe[0], pe[1])


def test_decoder_separation(rng):
    params = init_params(SMALL, 7)
    enc = ag.Tensor(rng.normal(size=(2, 16)))
    ij = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
    vis, msk = np.array([0, 2]), np.array([1, 3])
    _, ts = decode_dual(params, enc, vis, msk, ij, SMALL)
    for name in decoder_param_names(params, "dec_point"):
        params[name].value = params[name].value + rng.normal(size=params[name].shape)
    tp2, ts2 = decode_dual(params, enc, vis, msk, ij, SMALL)
    assert ts.value.tobytes() == ts2.value.tobytes()


def _tiny_batch(seed=0, n_vox=4, ratio=0.5):
    rng = np.random.default_rng(seed)
    grid = GridConfig((0, 0, 0), (n_vox, 1, 1), (1, 1, 1))
    pts = np.concatenate([rng.uniform([i, 0, 0], [i + 1, 1, 1], (6, 3)) for i in range(n_vox)])
    part = voxelize(PointCloud(pts), grid)
    return scene_batch(part, select_mask(part.group_ids, ratio, seed))


def test_head_shapes_and_zero_weights(rng):
    params = init_params(SMALL, 8)
    t = ag.Tensor(rng.normal(size=(2, 16)))
    pred = heads(params, t, t, np.array([3, 4]))
    assert [p.shape[1] for p in (pred.cent, pred.occ, pred.nor, pred.curv)] == [435, 145, 3, 3]
    for k, p in params.items():
        if k.startswith("head.") and k.endswith(".w"):
            p.value = np.zeros_like(p.value)
        if k.startswith("head.") and k.endswith("1.b"):
            p.value = np.full_like(p.value, 0.25)
    pred = heads(params, t, t)
    np.testing.assert_array_equal(pred.cent.value, 0.25)
    np.testing.assert_array_equal(pred.nor.value, 0.25)


@pytest.mark.parametrize("head_group,other", [(("cent", "occ"), "dec_surface"), (("nor", "curv"), "dec_point")])
def test_gradients_reach_only_own_decoder(head_group, other):
    batch = _tiny_batch(1)
    params = init_params(SMALL, 9)
    pred = forward(params, batch, SMALL)
    loss = sum((getattr(pred, h) * getattr(pred, h)).sum() for h in head_group)
    ag.backward(loss)
    grads = gradients(params)
    own = "dec_point" if other == "dec_surface" else "dec_surface"
    assert all(np.all(grads[k] == 0) for k in decoder_param_names(params, other))
    assert any(np.any(grads[k] != 0) for k in decoder_param_names(params, own))


def test_perfect_fit_loss_is_zero(rng):
    recs = empty_records(2)
    recs["voxel_id"] = [3, 9]
    recs["occupancy"] = rng.integers(0, 2, (2, 145))
    recs["centroid"] = rng.uniform(-0.5, 0.5, (2, 435)).astype(np.float32) * np.repeat(recs["occupancy"], 3, axis=1)
    recs["normal"] = [[0, 0, 1], [0, 0.6, 0.8]]
    recs["curvature"] = [[0.5, 0.3, 0.2], [0.7, 0.3, 0.0]]
    recs["surface_valid"] = 1
    pred = Predictions(
        ag.Tensor(recs["centroid"].astype(float)),
        ag.Tensor(np.where(recs["occupancy"] == 1, 1e3, -1e3)),
        ag.Tensor(recs["normal"].astype(float)),
        ag.Tensor(recs["curvature"].astype(float)),
        np.array([3, 9]),
    )
    assert compute_loss(pred, recs).total == 0.0


def test_hand_centroid_loss():
    recs = empty_records(1)
    recs["occupancy"][0, 0] = 1
    recs["centroid"][0, :3] = -0.5
    z = ag.Tensor
    pred = Predictions(z(np.zeros((1, 435))), z(np.zeros((1, 145))), z(np.zeros((1, 3))), z(np.zeros((1, 3))), np.array([0]))
    rep = compute_loss(pred, recs)
    assert rep.l_cent == 0.25
    assert rep.l_nor == 0.0 and rep.l_curv == 0.0 and rep.n_valid == 0


@pytest.mark.parametrize("sign_invariant", [False, True])
def test_loss_matches_loop_oracle(rng, sign_invariant):
    m = 4
    recs = empty_records(m)
    recs["voxel_id"] = np.arange(m)
    recs["occupancy"] = rng.integers(0, 2, (m, 145))
    recs["centroid"] = rng.uniform(-0.5, 0.5, (m, 435))
    recs["normal"] = rng.normal(size=(m, 3))
    recs["curvature"] = rng.uniform(size=(m, 3))
    recs["surface_valid"] = [1, 0, 1, 1]
    arrays = [rng.normal(size=(m, k)) * 3 for k in (435, 145, 3, 3)]
    pred = Predictions(*map(ag.Tensor, arrays), np.arange(m))
    rep = compute_loss(pred, recs, sign_invariant)
    ref = oracle_loss(*arrays, recs, sign_invariant_normal=sign_invariant)
    for key in ("l_cent", "l_occ", "l_nor", "l_curv", "total"):
        assert abs(getattr(rep, key) - ref[key]) <= 1e-12
    assert rep.total == rep.l_point + rep.l_surface
    assert rep.l_point == rep.l_cent + rep.l_occ
    assert rep.l_surface == rep.l_curv + rep.l_nor


def test_misaligned_ids_rejected():
    recs = empty_records(1)
    recs["voxel_id"] = 5
    z = ag.Tensor
    pred = Predictions(z(np.zeros((1, 435))), z(np.zeros((1, 145))), z(np.zeros((1, 3))), z(np.zeros((1, 3))), np.array([6]))
    with pytest.raises(ValueError, match="misaligned"):
        compute_loss(pred, recs)


def test_dead_path_gradient_is_exactly_zero():
    batch = _tiny_batch(2)
    params = init_params(SMALL, 10)
    params["unused"] = ag.parameter(np.ones(3))
    loss_and_grads(params, batch, SMALL)
    np.testing.assert_array_equal(gradients(params)["unused"], 0.0)


def test_adamw_zero_gradient_is_pure_decay():
    p = ag.parameter(np.array([1.5, -2.0, 0.25]))
    opt = AdamW({"w": p})
    before = p.value.copy()
    opt.step({"w": np.zeros(3)})
    np.testing.assert_array_equal(p.value, before - opt.lr * opt.weight_decay * before)
    assert opt.lr == 1e-5 and opt.betas == (0.9, 0.999) and opt.eps == 1e-8 and opt.weight_decay == 0.01


def test_adamw_first_step_magnitude():
    p = ag.parameter(np.array([0.0, 0.0]))
    opt = AdamW({"w": p}, lr=0.1, weight_decay=0.0)
    opt.step({"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p.value, [-0.1, 0.1], rtol=1e-7)


def test_merged_batches_keep_scenes_apart():
    a, b = _tiny_batch(3), _tiny_batch(4)
    merged = merge_batches([a, b])
    assert merged.n_tokens == a.n_tokens + b.n_tokens
    assert len(merged.records) == len(a.records) + len(b.records)
    params = init_params(SMALL, 11)
    pa = forward(params, a, SMALL).cent.value
    pm = forward(params, merged, SMALL).cent.value
    np.testing.assert_allclose(pm[: len(pa)], pa, atol=1e-12)


def test_short_training_run_and_blob_round_trip(tmp_path):
    cfg = TrainConfig(model=SMALL, steps=3, n_scenes=2, batch_size=2)
    res = train(cfg)
    assert [row[0] for row in res.history] == [0, 1, 2]
    write_loss_csv(tmp_path / "loss.csv", res.history)
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "step,l_cent,l_occ,l_nor,l_curv,total"
    save_params(tmp_path / "p.gmp", res.params, cfg.model)
    back, mcfg = load_params(tmp_path / "p.gmp")
    assert mcfg == SMALL
    for k, p in res.params.items():
        assert back[k].value.tobytes() == p.value.tobytes()


def test_nan_injection_raises():
    from geomae.model.train import NonFiniteLoss

    cfg = TrainConfig(model=SMALL, steps=3, n_scenes=1, inject_nan_step=1)
    with pytest.raises(NonFiniteLoss) as info:
        train(cfg)
    assert info.value.step == 1


def test_train_config_json_round_trip():
    cfg = TrainConfig(model=SMALL, steps=7)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    assert ModelConfig().n_heads == 2 and ModelConfig().d_hidden == 256
