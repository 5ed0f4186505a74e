import math

import numpy as np
import pytest

from montage_pretrain.dataset_io import BBox, load_annotations
from montage_pretrain.montage import PatchSource, assign_groups
from montage_pretrain.network import init_params, load_checkpoint
from montage_pretrain.sampling import POSITIVE, SampleRecord, SampleSet, build_sample_set
from montage_pretrain.synthetic import generate_shapes
from montage_pretrain.trainer import (ConfigError, TrainConfig, TrainingDiverged, evaluate, load_config, lr_at,
                                      parse_config_text, read_metrics, train)

from conftest import write_color_images


def fast(**kw):
    base = dict(total_iters=12, warmup_iters=3, refresh_interval=5, batch_assembled=2, canvas_w=64, canvas_h=64,
                split_x=16, split_y=16, channels=(4, 8, 8))
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def shapes(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    idx = load_annotations(generate_shapes(root, 40, seed=2))
    return assign_groups(build_sample_set(idx, seed=0))


def test_lr_full_scale_anchors():
    c = TrainConfig.full()
    assert (c.lr_start, c.lr_peak, c.warmup_iters, c.total_iters) == (0.2, 0.8, 1250, 64000)
    assert lr_at(0, c) == 0.2
    assert lr_at(1250, c) == 0.8
    assert lr_at(64000, c) == 0.0
    assert lr_at((1250 + 64000) // 2, c) == pytest.approx(0.4, abs=1e-12)
    assert abs(lr_at(1249.999999, c) - lr_at(1250, c)) < 1e-6


def test_lr_is_monotone_in_each_phase():
    c = TrainConfig()
    lrs = [lr_at(i, c) for i in range(c.total_iters + 1)]
    assert all(b > a for a, b in zip(lrs[:40], lrs[1:41]))
    assert all(b <= a for a, b in zip(lrs[40:], lrs[41:]))


def test_desk_profile_scales_lr():
    c = TrainConfig()
    assert (c.lr_start, c.lr_peak) == (0.2 * 8 / 512, 0.8 * 8 / 512)
    assert c.template().spec() == "96x96:24,24"
    assert TrainConfig(lr_peak=0.05).lr_peak == 0.05


def test_config_validation():
    with pytest.raises(ConfigError, match="warmup"):
        TrainConfig(total_iters=30).validate()
    TrainConfig(total_iters=0).validate()
    for bad in [dict(tau=1.5), dict(refresh_interval=0), dict(objective="x"), dict(lr_start=1.0, lr_peak=0.1),
                dict(split_x=60), dict(canvas_w=100, split_x=20)]:
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def test_config_file(tmp_path):
    text = """
    # desk run
    total_iters = 300
    warmup_iters = 10
    objective = block
    template = 128x128:32,32
    channels = 8, 16, 16
    relax_groups = yes
    tau = 0.6  # inline comment
    """
    vals = parse_config_text(text)
    assert vals["canvas_w"] == 128 and vals["split_y"] == 32 and vals["channels"] == (8, 16, 16)
    p = tmp_path / "run.cfg"
    p.write_text(text)
    c = load_config(p, tau=0.9)
    assert (c.objective, c.tau, c.total_iters, c.relax_groups) == ("blockwise", 0.9, 300, True)
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_text("learning = fast")
    with pytest.raises(ConfigError):
        parse_config_text("total_iters = many")
    assert load_config(None, profile="full").total_iters == 64000


def test_total_iters_zero_writes_init(tmp_path, shapes):
    r = train(fast(total_iters=0), shapes, out_dir=tmp_path)
    assert r.metrics == [] and [p.name for p in r.checkpoints] == ["final.ckpt"]
    params, meta = load_checkpoint(tmp_path / "final.ckpt")
    assert all(np.array_equal(params.arrays[n], r.init_params.arrays[n]) for n in params.names())
    assert (tmp_path / "metrics.csv").read_text() == "iter,lr,loss,L1,L2,L3,L4\n"


def test_refresh_schedule_and_stamps(shapes):
    stamps = []
    r = train(fast(total_iters=35, refresh_interval=10), shapes,
              on_step=lambda it, field, rep: stamps.append((it, field.stamp)))
    assert r.refreshes == [0, 10, 20, 30]
    assert all(s == (it // 10) * 10 for it, s in stamps)


def test_field_constant_between_refreshes(shapes):
    fields = {}
    train(fast(total_iters=10, refresh_interval=5), shapes,
          on_step=lambda it, field, rep: fields.setdefault(it, field.weights.copy()))
    for it in range(1, 5):
        assert np.array_equal(fields[it], fields[0])
    assert not np.array_equal(fields[5], fields[0])


def test_metrics_and_checkpoints(tmp_path, shapes):
    r = train(fast(), shapes, out_dir=tmp_path)
    m = read_metrics(tmp_path / "metrics.csv")
    assert len(m) == 12 and np.all(np.diff(m["iter"]) == 1)
    assert m.dtype.names == ("iter", "lr", "loss", "L1", "L2", "L3", "L4")
    assert np.allclose(m["loss"], (m["L1"] + m["L2"] + m["L3"] + m["L4"]) / 4, atol=1e-12)
    assert [p.name for p in r.checkpoints] == ["iter-000000.ckpt", "iter-000005.ckpt", "iter-000010.ckpt",
                                               "final.ckpt"]
    p0, meta = load_checkpoint(tmp_path / "iter-000000.ckpt")
    assert meta["iteration"] == 0 and meta["template"] == "64x64:16,16"
    assert all(np.array_equal(p0.arrays[n], r.init_params.arrays[n]) for n in p0.names())


def test_determinism(tmp_path, shapes):
    for name in ("a", "b"):
        train(fast(objective="erf_adaptive"), shapes, out_dir=tmp_path / name)
    for f in ("metrics.csv", "final.ckpt", "iter-000005.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("objective", ["blockwise", "global"])
def test_other_objectives_run(shapes, objective):
    r = train(fast(objective=objective), shapes)
    losses = [row[2] for row in r.metrics]
    assert len(losses) == 12 and all(math.isfinite(v) for v in losses)
    if objective == "global":
        assert all(math.isnan(v) for row in r.metrics for v in row[3:])


def test_divergence_aborts(shapes):
    with pytest.raises(TrainingDiverged, match="iteration"):
        with np.errstate(all="ignore"):
            train(fast(total_iters=60, warmup_iters=1, lr_start=1e12, lr_peak=1e12), shapes)


def test_norm_stays_finite_500_iters(shapes):
    r = train(fast(total_iters=500, warmup_iters=10, refresh_interval=100, batch_assembled=8), shapes)
    assert math.isfinite(r.params.norm())
    first = np.mean([row[2] for row in r.metrics[:125]])
    last = np.mean([row[2] for row in r.metrics[-125:]])
    assert last < first


def test_evaluate_chance_level(shapes):
    # labels assigned round-robin, unrelated to content -> accuracy near 1/5
    recs = tuple(SampleRecord(r.image_id, r.region, i % 5, POSITIVE, r.image_path, r.group)
                 for i, r in enumerate(shapes.records))
    balanced = SampleSet(recs, 4, 0, 10.0)
    cfg = fast()
    params = init_params(cfg.architecture(5), 1)
    rep = evaluate(params, balanced, cfg.template(), PatchSource(), epochs=6)
    sigma = math.sqrt(0.2 * 0.8 / rep.count)
    assert abs(rep.accuracy - 0.2) < 3 * sigma + 0.02
    assert rep.region_accuracy.shape == (4,) and rep.class_accuracy.shape == (5,)


def test_evaluate_separable_fixture(tmp_path):
    red, blue = (230, 20, 20), (20, 20, 230)
    specs, recs = [], []
    sizes = [(30, 30), (34, 30), (26, 30), (10, 36), (8, 30), (40, 10), (36, 8), (28, 28)]
    for n in range(32):
        w, h = sizes[n % len(sizes)]
        label = n % 2
        specs.append((f"{n}.png", (w, h), red if label == 0 else blue))
        recs.append((w, h, label))
    paths = write_color_images(tmp_path, specs)
    samples = assign_groups(SampleSet(tuple(
        SampleRecord(i, BBox(0, 0, w, h), label, POSITIVE, paths[i]) for i, (w, h, label) in enumerate(recs)),
        2, 0, 10.0))
    cfg = fast(total_iters=150, warmup_iters=5, refresh_interval=50, batch_assembled=4, objective="blockwise")
    r = train(cfg, samples)
    rep = evaluate(r.params, samples, cfg.template(), epochs=3)
    assert rep.accuracy == 1.0
    assert np.isnan(rep.class_accuracy[2]) and rep.macro_accuracy == 1.0


def test_evaluate_empty_set(shapes):
    cfg = fast()
    params = init_params(cfg.architecture(5), 0)
    small = SampleSet(shapes.records[:0], 4, 0, 10.0)
    with pytest.raises(ValueError):
        evaluate(params, small, cfg.template())
