import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pepr import nn
from pepr.errors import ConfigError, DataError
from pepr.models import (
    GroupScheme, TrainConfig, build_pepr_model, default_group_count, embed_and_classify,
    grouped_loss, grouped_predict, grouped_softmax, load_model, save_model, train_ensemble,
    train_pepr,
)


def blobs(n_classes=4, per_class=60, dim=6, seed=0, spread=0.3):
    rng = np.random.default_rng(seed)
    means = rng.normal(0, 3, (n_classes, dim))
    y = np.repeat(np.arange(n_classes), per_class)
    x = means[y] + rng.normal(0, spread, (len(y), dim))
    perm = rng.permutation(len(y))
    return x[perm].astype(np.float32), y[perm]


TINY = TrainConfig(epochs=3, steps_per_epoch=20, batch_size=32, width_factor=1 / 16, n_groups=2)


# ---------------------------------------------------------------- architecture


def widths(model):
    return model.embedder.dense_widths, model.head.dense_widths, model.regressors[0].dense_widths


def test_full_size_widths():
    m = build_pepr_model(128, 1000, None, 1.0, seed=0)
    assert widths(m) == ([128, 512, 512, 256], [256, 1000], [1000, 512, 256, 256])


def test_scaled_widths():
    m = build_pepr_model(8, 4, None, 1 / 16, seed=0)
    assert widths(m) == ([8, 32, 32, 16], [16, 4], [4, 32, 16, 16])


def test_grouped_widths():
    scheme = GroupScheme.contiguous(6, 2)
    m = build_pepr_model(8, 6, scheme, 1 / 16, seed=0)
    assert m.head.out_dim == 8 and m.regressors[0].in_dim == 8


def test_embedder_layout():
    kinds = [l.kind for l in build_pepr_model(8, 4, None, 1 / 16).embedder.layers]
    assert kinds == ["dense", "elu", "batch-norm", "dropout"] * 2 + ["dense", "elu", "batch-norm"]
    kinds = [l.kind for l in build_pepr_model(8, 4, None, 1 / 16).regressors[0].layers]
    assert kinds == ["dense", "tanh", "dense", "tanh", "dense", "leaky-relu"]


def test_bad_width_factor():
    with pytest.raises(ConfigError):
        build_pepr_model(8, 4, None, 0.0)
    with pytest.raises(ConfigError):
        TrainConfig(width_factor=-1)


def test_regressor_anchors_are_initial_values():
    m = build_pepr_model(8, 4, None, 1 / 16, seed=3, n_regressors=2)
    for reg in m.regressors:
        for k, v in reg.parameters().items():
            np.testing.assert_array_equal(reg.anchors[k], v)
    assert not np.array_equal(m.regressors[0].anchors["0.W"], m.regressors[1].anchors["0.W"])


# ---------------------------------------------------------------- grouping


def test_contiguous_scheme():
    s = GroupScheme.contiguous(10, 3)
    assert [len(g) for g in s.groups] == [4, 3, 3]
    assert s.width == 13
    assert default_group_count(1000) == 125
    assert default_group_count(3) == 1


def test_scheme_rejects_bad_partition():
    with pytest.raises(ConfigError):
        GroupScheme(((0, 1), (1, 2)))
    with pytest.raises(ConfigError):
        GroupScheme.contiguous(3, 4)


def test_grouped_softmax_uniform():
    s = GroupScheme.contiguous(6, 2)
    np.testing.assert_allclose(grouped_softmax(np.zeros((2, 8)), s), 0.25)


def test_grouped_softmax_single_group_is_flat(rng):
    s = GroupScheme.contiguous(5, 1)
    logits = rng.standard_normal((3, 6))
    np.testing.assert_allclose(grouped_softmax(logits, s), nn.softmax(logits), rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(1, 4), st.integers(0, 10_000))
def test_grouped_softmax_sums_to_group_count(n_classes, n_groups, seed):
    n_groups = min(n_groups, n_classes)
    s = GroupScheme.contiguous(n_classes, n_groups)
    logits = np.random.default_rng(seed).standard_normal((5, s.width)) * 4
    p = grouped_softmax(logits, s)
    for g in range(s.n_groups):
        np.testing.assert_allclose(p[:, s.slots(g)].sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(p.sum(axis=1), s.n_groups, atol=1e-6)


def test_grouped_width_mismatch():
    with pytest.raises(ConfigError):
        grouped_softmax(np.zeros((1, 7)), GroupScheme.contiguous(6, 2))


def test_grouped_loss_uniform():
    s = GroupScheme.contiguous(9, 3)
    loss, _ = grouped_loss(np.zeros((4, s.width)), [0, 4, 8, 2], s)
    assert loss == pytest.approx(3 * math.log(4), rel=1e-12)


def test_grouped_loss_perfect_prediction():
    s = GroupScheme.contiguous(4, 2)
    y = np.array([0, 3])
    logits = np.full((2, s.width), -1e3)
    t = np.full((2, 2), 2)  # others slot
    t[0, 0], t[1, 1] = 0, 1
    for i in range(2):
        for g in range(2):
            logits[i, s.offsets[g] + t[i, g]] = 1e3
    loss, _ = grouped_loss(logits, y, s)
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_grouped_loss_targets_others_slot(rng):
    s = GroupScheme.contiguous(4, 2)
    logits = rng.standard_normal((1, s.width))
    loss, _ = grouped_loss(logits, [1], s)
    lp0 = nn.log_softmax(logits[:, s.slots(0)])
    lp1 = nn.log_softmax(logits[:, s.slots(1)])
    assert loss == pytest.approx(-(lp0[0, 1] + lp1[0, 2]), rel=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_grouped_loss_single_group_equals_flat(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 10))
    s = GroupScheme.contiguous(c, 1)
    logits = rng.standard_normal((8, c + 1)) * 3
    y = rng.integers(0, c, 8)
    lg, gg = grouped_loss(logits, y, s)
    lf, gf = nn.softmax_cross_entropy(logits, y)
    assert abs(lg - lf) < 1e-9
    np.testing.assert_allclose(gg, gf, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_grouped_loss_finite_differences(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 9))
    s = GroupScheme.contiguous(c, int(rng.integers(1, c + 1)))
    logits = rng.standard_normal((int(rng.integers(1, 6)), s.width))
    y = rng.integers(0, c, len(logits))
    _, g = grouped_loss(logits, y, s)
    num = nn.numerical_gradient(lambda: grouped_loss(logits, y, s)[0], logits)
    assert nn.relative_error(g, num) < 1e-5


def test_grouped_loss_unknown_class():
    with pytest.raises(ConfigError):
        grouped_loss(np.zeros((1, 5)), [4], GroupScheme.contiguous(4, 1))


def test_grouped_predict_ignores_others():
    s = GroupScheme.contiguous(4, 2)  # columns: [c0 c1 oth | c2 c3 oth]
    p = np.array([[0.1, 0.2, 0.7, 0.05, 0.6, 0.35]])
    assert grouped_predict(p, s).tolist() == [3]


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def blob_data():
    x, y = blobs()
    return (x[:160], y[:160]), (x[160:], y[160:])


def test_training_separates_blobs(blob_data):
    (x, y), val = blob_data
    cfg = TrainConfig(epochs=5, steps_per_epoch=40, batch_size=32, lr=3e-3, width_factor=1 / 16,
                      n_groups=2, seed=0)
    result = train_pepr(x, y, cfg, val=val)
    assert result.log[-1]["validation_accuracy"] > 0.95
    assert result.log[-1]["regression_loss"] < result.log[0]["regression_loss"]
    assert [r["epoch"] for r in result.log] == [1, 2, 3, 4, 5]


def test_flat_training(blob_data):
    (x, y), val = blob_data
    cfg = TrainConfig(epochs=5, steps_per_epoch=40, batch_size=32, lr=3e-3, width_factor=1 / 16,
                      head="flat")
    result = train_pepr(x, y, cfg, val=val)
    assert result.model.variant == "flat"
    assert result.log[-1]["validation_accuracy"] > 0.95


def test_training_rejects_ood_rows(blob_data):
    (x, y), _ = blob_data
    y = y.copy()
    y[0] = -1
    with pytest.raises(DataError):
        train_pepr(x, y, TINY)


def _classifier_bytes(model):
    nets = (model.embedder, model.head)
    return [v.tobytes() for n in nets for v in list(n.parameters().values()) + list(n.buffers().values())]


def test_gradient_barrier(blob_data):
    (x, y), _ = blob_data
    ref = _classifier_bytes(train_pepr(x, y, TINY, n_regressors=0).model)
    for m, seeds in ((1, None), (3, None), (2, [[9, 9], [10, 10]])):
        got = _classifier_bytes(train_pepr(x, y, TINY, n_regressors=m, member_seeds=seeds).model)
        assert got == ref


def test_ensemble_of_one_matches_train_pepr(blob_data):
    (x, y), _ = blob_data
    a = train_pepr(x, y, TINY).model
    b = train_ensemble(x, y, TINY, 1).model
    for k, v in a.regressors[0].parameters().items():
        assert b.regressors[0].parameters()[k].tobytes() == v.tobytes()


def test_ensemble_seeding(blob_data):
    (x, y), _ = blob_data
    model = train_ensemble(x, y, TINY, 10).model
    anchors = {m.anchors["0.W"].tobytes() for m in model.regressors}
    assert len(anchors) == 10
    twin = train_ensemble(x, y, TINY, 2, member_seeds=[5, 5]).model
    for k, v in twin.regressors[0].parameters().items():
        assert twin.regressors[1].parameters()[k].tobytes() == v.tobytes()
    with pytest.raises(ConfigError):
        train_ensemble(x, y, TINY, 0)


def test_regressor_moves_away_from_anchor(blob_data):
    (x, y), _ = blob_data
    reg = train_pepr(x, y, TINY).model.regressors[0]
    assert any(not np.array_equal(v, reg.anchors[k]) for k, v in reg.parameters().items())


def test_anchor_is_fixed_point_without_data_term(rng):
    reg = build_pepr_model(6, 4, None, 1 / 16, seed=1).regressors[0]
    opt = nn.Adam(1e-2)
    yhat = nn.softmax(rng.standard_normal((16, 4)))
    z = rng.standard_normal((16, reg.out_dim))
    before = {k: v.copy() for k, v in reg.parameters().items()}
    for _ in range(20):
        zhat = reg.forward(yhat, train=True)
        _, gz, ga = nn.anchored_mse_loss(z, zhat, reg.parameters(), reg.anchors, 0.03, data_weight=0.0)
        reg.backward(gz)
        opt.step(reg.parameters(), {k: g + ga[k] for k, g in reg.gradients().items()})
    for k, v in reg.parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_embed_and_classify(blob_data):
    (x, y), (xv, _) = blob_data
    grouped = train_pepr(x, y, TINY).model
    z1, p1, l1 = embed_and_classify(xv, grouped)
    z2, p2, l2 = embed_and_classify(xv, grouped)
    assert z1.tobytes() == z2.tobytes() and p1.tobytes() == p2.tobytes()
    assert z1.shape[1] == grouped.embed_dim == grouped.regressors[0].out_dim
    np.testing.assert_allclose(p1.sum(axis=1), grouped.scheme.n_groups, atol=1e-5)
    flat = train_pepr(x, y, TINY.replace(head="flat")).model
    _, pf, _ = embed_and_classify(xv, flat)
    np.testing.assert_allclose(pf.sum(axis=1), 1.0, atol=1e-5)
    with pytest.raises(ConfigError):
        embed_and_classify(xv[:, :3], flat)


def test_training_is_deterministic(blob_data):
    (x, y), _ = blob_data
    a = train_pepr(x, y, TINY, n_regressors=2)
    b = train_pepr(x, y, TINY, n_regressors=2)
    assert _classifier_bytes(a.model) == _classifier_bytes(b.model)
    assert repr(a.log) == repr(b.log)  # validation_accuracy is nan without val


def test_model_round_trip(tmp_path, blob_data):
    (x, y), (xv, _) = blob_data
    res = train_pepr(x, y, TINY, n_regressors=3)
    save_model(tmp_path / "m.npz", res.model, res.config)
    model, cfg, meta = load_model(tmp_path / "m.npz")
    assert cfg == res.config and meta["n_regressors"] == 3
    assert model.scheme == res.model.scheme
    for a, b in zip(embed_and_classify(xv, model), embed_and_classify(xv, res.model)):
        assert a.tobytes() == b.tobytes()
    probe = np.random.default_rng(0).random((5, model.regressors[0].in_dim))
    for r1, r2 in zip(model.regressors, res.model.regressors):
        assert r1.forward(probe).tobytes() == r2.forward(probe).tobytes()
        for k in r1.anchors:
            assert r1.anchors[k].tobytes() == r2.anchors[k].tobytes()
