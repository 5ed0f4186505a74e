import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from montage_pretrain.autodiff import Tensor
from montage_pretrain.montage import make_template
from montage_pretrain.network import Architecture, FeatureGeometry, build_graph, grad_check, init_params
from montage_pretrain.objective import (blockwise_loss, erf_adaptive_loss, global_label, global_loss,
                                        hard_label_field, home_regions, label_weights, label_weights_grid,
                                        objective_loss, region_pool_weights, soft_label_field)

from conftest import kink_free_fixture

UNIFORM_RHO = np.array([4096, 10240, 10240, 25600]) / 50176


def eq2_reference(rho, r, tau):
    """Direct per-position evaluation, written independently of the vectorized code."""
    w = [0.0] * 4
    w[r] = max(tau, rho[r])
    if rho[r] == 1.0:
        return [1.0 if i == r else 0.0 for i in range(4)]
    for i in range(4):
        if i != r:
            w[i] = (1 - w[r]) * rho[i] / (1 - rho[r])
    return w


def test_label_weight_examples():
    assert label_weights([1, 0, 0, 0], 0, 0.7).tolist() == [1, 0, 0, 0]
    w = label_weights(UNIFORM_RHO, 0, 0.7)
    assert np.allclose(w, [0.7, 0.0667, 0.0667, 0.1667], atol=1e-4)
    assert abs(w.sum() - 1) < 1e-12
    rho = np.random.default_rng(0).dirichlet(np.ones(4))
    assert label_weights(rho, 2, 1.0).tolist() == [0, 0, 1, 0]
    with pytest.raises(ValueError):
        label_weights(rho, 0, 1.5)


def test_home_mass_above_tau_is_kept():
    w = label_weights([0.1, 0.9, 0.0, 0.0], 1, 0.7)
    assert w.tolist() == [pytest.approx(0.1), 0.9, 0.0, 0.0]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4).filter(lambda v: sum(v) > 1e-6),
       st.integers(0, 3), st.floats(0, 1))
def test_label_weights_simplex_and_reference(raw, r, tau):
    rho = np.array(raw) / sum(raw)
    w = label_weights(rho, r, tau)
    assert (w >= 0).all() and abs(w.sum() - 1) < 1e-12 and w[r] >= tau
    assert np.allclose(w, eq2_reference(rho, r, tau), atol=1e-9)
    if tau > 0.5:
        assert int(np.argmax(w)) == r


def geometry(canvas=96, split=24, stages=3):
    t = make_template(canvas, canvas, split, split)
    geo = FeatureGeometry.for_input(Architecture(num_classes=5, channels=(2,) * stages), canvas, canvas)
    return t, geo


def test_home_regions():
    t, geo = geometry()
    home = home_regions(t, geo)
    assert home.shape == (12, 12)
    assert np.bincount(home.ravel()).tolist() == [9, 27, 27, 81]
    assert home[0, 0] == 0 and home[0, 11] == 1 and home[11, 0] == 2 and home[11, 11] == 3


def one_hot_labels(classes, k=5):
    return np.eye(k)[list(classes)]


def test_soft_field_tau_one_equals_hard_field():
    t, geo = geometry()
    grid = np.random.default_rng(1).dirichlet(np.ones(4), size=(12, 12))
    soft = soft_label_field(grid, t, geo, 1.0)
    hard = hard_label_field(t, geo)
    assert np.array_equal(soft.weights, hard.weights)
    labels = one_hot_labels([0, 1, 2, 3])
    assert np.array_equal(soft.compose(labels), hard.compose(labels))


def test_soft_field_matches_per_position_oracle():
    t, geo = geometry()
    grid = np.random.default_rng(2).dirichlet(np.ones(4), size=(12, 12))
    labels = one_hot_labels([4, 1, 2, 0])
    field = soft_label_field(grid, t, geo, 0.7, labels=labels)
    home = home_regions(t, geo)
    for j in range(12):
        for k in range(12):
            w = eq2_reference(grid[j, k], home[j, k], 0.7)
            assert np.allclose(field.labels[j, k], np.array(w) @ labels, atol=1e-12)
    same = soft_label_field(grid, t, geo, 0.7, labels=one_hot_labels([3, 3, 3, 3]))
    assert np.allclose(same.labels, np.eye(5)[3], atol=1e-12)


def test_erf_loss_lower_bound_and_uniform():
    t, geo = geometry()
    labels = one_hot_labels([0, 1, 2, 3])[None]
    hard = hard_label_field(t, geo)
    target = hard.compose(labels)  # (1, 5, 12, 12)
    big = np.where(target > 0, 50.0, -50.0)
    assert erf_adaptive_loss(Tensor(big), hard, labels).value < 1e-30
    rep = erf_adaptive_loss(Tensor(np.zeros((1, 5, 12, 12))), hard, labels)
    assert rep.value == pytest.approx(np.log(5), abs=1e-14)
    assert np.allclose(rep.region_losses, np.log(5))


def test_erf_loss_entropy_when_prediction_matches():
    t, geo = geometry()
    grid = np.random.default_rng(3).dirichlet(np.ones(4), size=(12, 12))
    field = soft_label_field(grid, t, geo, 0.7)
    labels = one_hot_labels([0, 1, 2, 4])[None]
    target = field.compose(labels)
    with np.errstate(divide="ignore"):
        logits = np.log(np.maximum(target, 1e-300))
    rep = erf_adaptive_loss(Tensor(logits), field, labels)
    ent = -(np.where(target > 0, target * np.log(np.maximum(target, 1e-300)), 0)).sum(axis=1)[0]
    assert np.allclose(rep.loss_map[0], ent, atol=1e-9)


def test_erf_loss_weights_regions_equally():
    t, geo = geometry()
    hard = hard_label_field(t, geo)
    labels = one_hot_labels([0, 1, 2, 3])[None]
    logits = np.random.default_rng(4).normal(size=(1, 5, 12, 12))
    rep = erf_adaptive_loss(Tensor(logits), hard, labels)
    per_region = [rep.loss_map[0][hard.home == i].mean() for i in range(4)]
    per_position = rep.loss_map.mean()
    assert rep.value == pytest.approx(np.mean(per_region), abs=1e-14)
    assert abs(rep.value - per_position) > 1e-3  # the two averages really differ here
    assert np.allclose(rep.region_losses, per_region)


def test_erf_loss_scaling_one_region():
    # scaling region i's per-position losses by c moves the loss by (c - 1) L_i / 4
    t, geo = geometry()
    hard = hard_label_field(t, geo)
    labels = one_hot_labels([0, 1, 2, 3])[None]
    logits = np.random.default_rng(5).normal(size=(1, 5, 12, 12))
    base = erf_adaptive_loss(Tensor(logits), hard, labels)
    doubled = base.loss_map.copy()
    doubled[0][hard.home == 2] *= 3.0
    counts = np.bincount(hard.home.ravel())
    recomposed = sum(doubled[0][hard.home == i].sum() / counts[i] for i in range(4)) / 4
    assert recomposed == pytest.approx(base.value + 2.0 * base.region_losses[2] / 4, abs=1e-13)


def test_blockwise_pooling_oracle():
    t, geo = geometry()
    home = home_regions(t, geo)
    x = np.random.default_rng(6).normal(size=(1, 3, 12, 12))
    pooled = np.einsum("nchw,rhw->nrc", x, region_pool_weights(home))
    for i in range(4):
        assert np.allclose(pooled[0, i], x[0][:, home == i].mean(axis=1), atol=1e-14)
    const = np.full((1, 3, 12, 12), 2.5)
    assert np.allclose(np.einsum("nchw,rhw->nrc", const, region_pool_weights(home)), 2.5)


def test_blockwise_perfect_classifier():
    t, geo = geometry()
    home = home_regions(t, geo)
    feats = np.ones((1, 2, 12, 12))
    head_w = np.zeros((5, 2, 1, 1))
    head_w[3, 0] = 40.0
    labels = one_hot_labels([3, 3, 3, 3])[None]
    rep = blockwise_loss(Tensor(feats), Tensor(head_w), Tensor(np.zeros(5)), labels, home)
    assert rep.value < 1e-15


def test_global_label_and_loss():
    t = make_template(224, 224, 64, 64)
    labels = one_hot_labels([0, 1, 2, 3])
    assert np.allclose(global_label(labels, t)[:4], UNIFORM_RHO, atol=1e-15)
    assert np.array_equal(global_label(one_hot_labels([2, 2, 2, 2]), t), np.eye(5)[2])
    target = global_label(labels, t)
    feats = np.ones((1, 5, 14, 14))
    head_w = np.log(np.maximum(target, 1e-300)).reshape(5, 1, 1, 1) * np.eye(5)[:, :, None, None]
    rep = global_loss(Tensor(feats), Tensor(head_w), Tensor(np.zeros(5)), labels[None], t)
    ent = -(target[target > 0] * np.log(target[target > 0])).sum()
    assert rep.value == pytest.approx(ent, abs=1e-12)
    assert np.isnan(rep.region_losses).all()


@pytest.mark.parametrize("objective", ["erf_adaptive", "blockwise", "global"])
def test_full_loss_gradcheck(objective):
    arch = Architecture(num_classes=5, channels=(3, 4))
    params, x, _ = kink_free_fixture(arch, (2, 3, 16, 16))
    t = make_template(16, 16, 4, 4)
    geo = FeatureGeometry.for_input(arch, 16, 16)
    rng = np.random.default_rng(8)
    labels = np.eye(5)[rng.integers(0, 5, size=(2, 4))]
    field = (soft_label_field(rng.dirichlet(np.ones(4), size=(4, 4)), t, geo, 0.7) if objective == "erf_adaptive"
             else hard_label_field(t, geo))

    def fn(vec):
        g = build_graph(params.with_flat(vec), x)
        rep = objective_loss(objective, g, labels, t, field)
        rep.loss.backward()
        grads = g.param_grads()
        return rep.value, np.concatenate([grads[n].ravel() for n in params.names()])

    assert grad_check(fn, params.flat(), epsilon=1e-4, n_coords=200, rng=rng) < 1e-3


def test_objective_dispatch_errors():
    t, geo = geometry(32, 8, 2)
    g = build_graph(init_params(Architecture(num_classes=5, channels=(2, 2)), 0), np.zeros((1, 3, 32, 32)))
    labels = one_hot_labels([0, 1, 2, 3])[None]
    with pytest.raises(ValueError):
        objective_loss("erf_adaptive", g, labels, t, None)
    with pytest.raises(ValueError):
        objective_loss("blockwise", g, labels, t, None)
    with pytest.raises(ValueError):
        objective_loss("mystery", g, labels, t, hard_label_field(t, geo))
    assert objective_loss("global", g, labels, t).value == pytest.approx(np.log(5))


def test_weights_grid_degenerate_all_home():
    rho = np.zeros((2, 2, 4))
    rho[..., 1] = 1.0
    w = label_weights_grid(rho, np.full((2, 2), 1), 0.3)
    assert np.array_equal(w, np.broadcast_to([0, 1.0, 0, 0], (2, 2, 4)))
