"""End-to-end acceptance checks, one test per shipping criterion.

Each test prints a single `criterion N PASS` line (visible with -s) so a
release run can be audited at a glance. Oracles here are written from the
documented conventions, independently of the library internals, and the
timed criteria assert their own wall-clock budgets.
"""

import dataclasses
import json
import math
import os
import shutil
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from loffta import provider
from loffta.augment import (AugmentationPolicy, add_noise, apply_policy,
                            flip, resize, rotate, shear, translate)
from loffta.bench import bench_train
from loffta.model import (ModelConfig, cross_entropy, forward_pass,
                          init_params, loss_and_grads)
from loffta.pooling import pool, pool_cache
from loffta.provider import SyntheticSpec, build_cache
from loffta.records import FeatureRecord, ProviderDescriptor
from loffta.rng import RngStream
from loffta.store import (ShardReader, load_manifest, save_manifest,
                          shard_path, validate_cache, write_shard)
from loffta.trainer import TrainConfig, TrainingSession, train


# -- reference implementations (per-index, straight from the conventions) ----

def _nn(x: float) -> int:
    # round half down
    return math.ceil(x - 0.5)


def _snap(x: float) -> float:
    return round(x, 12)


def _oracle_flip(g, axis):
    h, w, d = g.shape
    out = np.zeros_like(g)
    for r in range(h):
        for c in range(w):
            if axis == "horizontal":
                out[r, c] = g[r, w - 1 - c]
            else:
                out[r, c] = g[h - 1 - r, c]
    return out


def _oracle_rotate(g, angle_deg):
    h, w, d = g.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(angle_deg)
    cos, sin = _snap(math.cos(t)), _snap(math.sin(t))
    out = np.zeros_like(g)
    for r in range(h):
        for c in range(w):
            sr = _nn(cos * (r - cy) - sin * (c - cx) + cy)
            sc = _nn(sin * (r - cy) + cos * (c - cx) + cx)
            if 0 <= sr < h and 0 <= sc < w:
                out[r, c] = g[sr, sc]
    return out


def _oracle_shear(g, ax_deg, ay_deg):
    h, w, d = g.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    tx = _snap(math.tan(math.radians(ax_deg)))
    ty = _snap(math.tan(math.radians(ay_deg)))
    out = np.zeros_like(g)
    for r in range(h):
        for c in range(w):
            sr = _nn(r - ty * (c - cx))
            sc = _nn(c - tx * (r - cy))
            if 0 <= sr < h and 0 <= sc < w:
                out[r, c] = g[sr, sc]
    return out


def _oracle_translate(g, dr, dc):
    h, w, d = g.shape
    out = np.zeros_like(g)
    for r in range(h):
        for c in range(w):
            sr, sc = r - dr, c - dc
            if 0 <= sr < h and 0 <= sc < w:
                out[r, c] = g[sr, sc]
    return out


def _oracle_resize(g, scale):
    """Half-pixel bilinear to floor(size*scale+0.5), then center crop/pad."""
    h, w, d = g.shape
    oh = int(math.floor(h * scale + 0.5))
    ow = int(math.floor(w * scale + 0.5))
    gd = g.astype(np.float64)
    res = np.zeros((oh, ow, d))
    for i in range(oh):
        sy = (i + 0.5) * (h / oh) - 0.5
        y0 = math.floor(sy)
        fy = sy - y0
        y0c = min(max(y0, 0), h - 1)
        y1c = min(max(y0 + 1, 0), h - 1)
        for j in range(ow):
            sx = (j + 0.5) * (w / ow) - 0.5
            x0 = math.floor(sx)
            fx = sx - x0
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            top = gd[y0c, x0c] * (1 - fx) + gd[y0c, x1c] * fx
            bot = gd[y1c, x0c] * (1 - fx) + gd[y1c, x1c] * fx
            res[i, j] = top * (1 - fy) + bot * fy
    out = np.zeros((h, w, d))
    if oh >= h:
        res = res[(oh - h) // 2:(oh - h) // 2 + h]
        rs = slice(0, h)
    else:
        rs = slice((h - oh) // 2, (h - oh) // 2 + oh)
    if ow >= w:
        res = res[:, (ow - w) // 2:(ow - w) // 2 + w]
        cs = slice(0, w)
    else:
        cs = slice((w - ow) // 2, (w - ow) // 2 + ow)
    out[rs, cs] = res
    return out


def _oracle_pool(g, mode, k, s):
    h, w, d = g.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    out = np.zeros((oh, ow, d))
    for i in range(oh):
        for j in range(ow):
            win = g[i * s:i * s + k, j * s:j * s + k].reshape(-1, d)
            out[i, j] = win.max(axis=0) if mode == "max" else win.mean(axis=0)
    return out


def _rand_grid(rng, h, w, d):
    return rng.standard_normal((h, w, d)).astype(np.float32)


# -- criterion 1: augmentation algebra ----------------------------------------

def test_criterion_1_augmentation_algebra():
    t0 = time.perf_counter()
    policy = AugmentationPolicy()
    rng = np.random.default_rng(101)
    for i in range(1000):
        h = int(rng.integers(1, 10))
        w = int(rng.integers(1, 10))
        d = int(rng.integers(1, 9))
        g = _rand_grid(rng, h, w, d)
        cls = rng.standard_normal(d).astype(np.float32)

        # involutions and identities, all bit-exact
        for axis in ("horizontal", "vertical"):
            assert flip(flip(g, axis), axis).tobytes() == g.tobytes()
        assert rotate(g, 0.0) is g
        assert shear(g, 0.0, 0.0) is g
        assert translate(g, 0, 0) is g
        assert resize(g, 1.0) is g
        ng, nc = add_noise(g, cls, 0.0, RngStream(i))
        assert ng is g and nc is cls

        # half-turn equals the composition of both flips
        both = flip(flip(g, "horizontal"), "vertical")
        assert rotate(g, 180.0).tobytes() == both.tobytes()

        # shape, dtype, and label survive the full policy
        rec = FeatureRecord(label=i % 17, cls=cls, grid=g)
        out = apply_policy(rec, policy, RngStream(7).derive(i))
        assert out.grid.shape == g.shape and out.grid.dtype == np.float32
        assert out.cls.shape == cls.shape
        assert out.label == rec.label
    dt = time.perf_counter() - t0
    assert dt < 30.0
    print(f"criterion 1 PASS: algebra on 1000 grids in {dt:.1f}s")


# -- criterion 2: oracle equivalence ------------------------------------------

def test_criterion_2_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    for _ in range(200):
        h = int(rng.integers(1, 10))
        w = int(rng.integers(1, 10))
        d = int(rng.integers(1, 9))
        g = _rand_grid(rng, h, w, d)

        for axis in ("horizontal", "vertical"):
            assert np.array_equal(flip(g, axis), _oracle_flip(g, axis))

        angle = float(rng.uniform(-180.0, 180.0))
        assert np.array_equal(rotate(g, angle), _oracle_rotate(g, angle))

        ax = float(rng.uniform(-60.0, 60.0))
        ay = float(rng.uniform(-60.0, 60.0))
        assert np.array_equal(shear(g, ax, ay), _oracle_shear(g, ax, ay))

        dr = int(rng.integers(-h, h + 1))
        dc = int(rng.integers(-w, w + 1))
        assert np.array_equal(translate(g, dr, dc), _oracle_translate(g, dr, dc))

        scale = float(rng.uniform(0.5, 2.0))
        got = resize(g, scale)
        want = _oracle_resize(g, scale)
        assert got.shape == want.shape
        assert np.max(np.abs(got.astype(np.float64) - want)) < 1e-6

        k = int(rng.integers(1, min(h, w) + 1))
        s = int(rng.integers(1, 4))
        assert np.array_equal(pool(g, "max", k, s),
                              _oracle_pool(g, "max", k, s).astype(np.float32))
        avg = pool(g, "average", k, s)
        assert np.max(np.abs(avg.astype(np.float64) -
                             _oracle_pool(g, "average", k, s))) < 1e-6
    dt = time.perf_counter() - t0
    assert dt < 60.0
    print(f"criterion 2 PASS: 200 grids vs per-index oracles in {dt:.1f}s")


# -- criterion 3: gradient check ----------------------------------------------

TINY = ModelConfig(feature_dim=3, grid_h=2, grid_w=2, num_classes=2,
                   embed_dim=8, depth=1, heads=2)


def _f64_params(seed):
    """Random double-precision weights with non-unit gains."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, v in init_params(TINY, RngStream(0)).items():
        if name.endswith("gain"):
            out[name] = 1.0 + 0.2 * rng.standard_normal(v.shape)
        else:
            out[name] = 0.5 * rng.standard_normal(v.shape)
    return out


def _loss_only(params, grid, cls, labels):
    logits, _ = forward_pass(params, TINY, grid, cls)
    loss, _, _ = cross_entropy(logits, labels)
    return loss


def test_criterion_3_finite_difference_gradients():
    t0 = time.perf_counter()
    step = 1e-4
    worst = 0.0
    for draw in range(5):
        rng = np.random.default_rng(300 + draw)
        grid = rng.standard_normal((3, 4, 3))
        cls = rng.standard_normal((3, 3))
        labels = np.array([0, 1, 1])
        params = _f64_params(900 + draw)

        loss, grads = loss_and_grads(params, TINY, grid, cls, labels)
        assert set(grads) == set(params)
        assert abs(loss - _loss_only(params, grid, cls, labels)) < 1e-12

        for name in sorted(params):
            t = params[name]
            for ix in np.ndindex(t.shape):
                orig = float(t[ix])
                t[ix] = orig + step
                lp = _loss_only(params, grid, cls, labels)
                t[ix] = orig - step
                lm = _loss_only(params, grid, cls, labels)
                t[ix] = orig
                fd = (lp - lm) / (2 * step)
                a = float(grads[name][ix])
                if abs(a) > 1e-8:
                    rel = abs(fd - a) / abs(a)
                    worst = max(worst, rel)
                    assert rel < 1e-4, (name, ix, a, fd)
    dt = time.perf_counter() - t0
    assert dt < 120.0
    print(f"criterion 3 PASS: full elementwise check, 5 draws, "
          f"worst rel err {worst:.2e}, {dt:.1f}s")


# -- criterion 4: normalization contract --------------------------------------

def test_criterion_4_layer_norm_contract():
    cfg = ModelConfig(feature_dim=12, grid_h=4, grid_w=4, num_classes=5,
                      embed_dim=32, depth=3, heads=4)
    params = init_params(cfg, RngStream(3))
    # keep every gain at 1 and bias at 0 (the init default) but push the
    # pre-normalization activations to unit scale so the contract is
    # exercised away from the epsilon regime
    params["proj.weight"] = params["proj.weight"] * 15.0

    rng = np.random.default_rng(44)
    grid = rng.standard_normal((8, 16, 12)).astype(np.float32)
    cls = rng.standard_normal((8, 12)).astype(np.float32)
    _, cache = forward_pass(params, cfg, grid, cls, want_cache=True)

    sites = {"stem": cache["proj_xhat"], "final": cache["xhatf"]}
    for i, blk in enumerate(cache["blocks"]):
        sites[f"block{i}.ln1"] = blk["xhat1"]
        sites[f"block{i}.ln2"] = blk["xhat2"]

    assert len(sites) == 2 + 2 * cfg.depth
    for name, x in sites.items():
        tok = x.astype(np.float64)
        mean = tok.mean(axis=-1)
        var = tok.var(axis=-1)
        assert np.max(np.abs(mean)) <= 1e-6, name
        assert np.max(np.abs(var - 1.0)) <= 1e-5, name
    print(f"criterion 4 PASS: {len(sites)} normalization sites, "
          f"all tokens zero-mean unit-variance")


# -- criteria 5-8 share one default-sized cache --------------------------------

COMPACT = dict(embed_dim=64, depth=2, heads=4)


@pytest.fixture(scope="module")
def default_cache(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept-cache")
    spec = SyntheticSpec()
    build_cache(spec, root)
    return root, spec


def _model_for(spec, **kw):
    return ModelConfig(feature_dim=spec.d, grid_h=spec.h, grid_w=spec.w,
                       num_classes=spec.classes, **kw)


def test_criterion_5_end_to_end_learning(default_cache):
    t0 = time.perf_counter()
    root, spec = default_cache
    model_cfg = _model_for(spec, **COMPACT)

    res = train(root, TrainConfig(), model_config=model_cfg, max_steps=2000,
                stop_fn=lambda e, m: m.accuracy >= 0.95)
    assert res.steps <= 2000
    assert res.best_metric >= 0.95

    # augmentations must not wreck a separable task: default policy vs none,
    # same seed, fixed epoch budget
    ta = train(root, TrainConfig(max_epochs=8), model_config=model_cfg)
    loff = train(root, TrainConfig(max_epochs=8,
                                   policy=AugmentationPolicy.disabled()),
                 model_config=model_cfg)
    assert ta.best_metric >= loff.best_metric - 0.01 - 1e-12
    dt = time.perf_counter() - t0
    assert dt < 300.0
    print(f"criterion 5 PASS: val acc {res.best_metric:.3f} at step "
          f"{res.steps}; augmented {ta.best_metric:.3f} vs plain "
          f"{loff.best_metric:.3f}; {dt:.1f}s")


def _endless_batches(session):
    epoch = 0
    while True:
        for idx in session.epoch_batches(epoch):
            yield idx, epoch
        epoch += 1


def _timed_step(session, batches):
    idx, epoch = next(batches)
    t0 = time.perf_counter()
    grid, cls, labels = session.prepare_batch(idx, epoch)
    session.run_step(grid, cls, labels)
    return time.perf_counter() - t0


def _paired_step_time_ratio(root_x, model_x, root_y, model_y, cfg,
                            rounds=24):
    """Median of per-round step-time ratios t_x / t_y.

    The two sessions advance alternately, one step each per round, so both
    see the same instantaneous machine speed; alternating who goes first
    removes any residual phase bias.
    """
    sx = TrainingSession(root_x, cfg, model_config=model_x)
    sy = TrainingSession(root_y, cfg, model_config=model_y)
    bx, by = _endless_batches(sx), _endless_batches(sy)
    for _ in range(3):
        _timed_step(sx, bx)
        _timed_step(sy, by)
    ratios = []
    for i in range(rounds):
        if i % 2 == 0:
            tx = _timed_step(sx, bx)
            ty = _timed_step(sy, by)
        else:
            ty = _timed_step(sy, by)
            tx = _timed_step(sx, bx)
        ratios.append(tx / ty)
    return float(np.median(ratios))


def test_criterion_6_decoupling(default_cache, tmp_path):
    # identical grids and classifier; only the provider metadata and the
    # feature width differ between runs
    bench_cfg = TrainConfig(batch_size=32, warmup_steps=5,
                            policy=AugmentationPolicy.disabled())
    spec_a = SyntheticSpec(classes=2, per_class={"train": 64, "val": 2},
                           d=768, h=4, w=4, seed=60)
    root_a = tmp_path / "d768"
    build_cache(spec_a, root_a)

    root_b = tmp_path / "d768-big-provider"
    shutil.copytree(root_a, root_b)
    mf = load_manifest(root_b)
    mf.provider = ProviderDescriptor(name="giant-sim", param_count=1_100_000_000,
                                     patch_size=14, source_image_size=224)
    save_manifest(mf, root_b)

    spec_c = dataclasses.replace(spec_a, d=1536)
    root_c = tmp_path / "d1536"
    build_cache(spec_c, root_c)

    model_a = _model_for(spec_a, embed_dim=256, depth=4, heads=4)
    model_c = _model_for(spec_c, embed_dim=256, depth=4, heads=4)

    # the host CPU speed wanders several percent over tens of seconds, so
    # timing whole runs back to back cannot resolve a 5% bound; instead
    # the two pipelines are stepped alternately and compared within each
    # round, which cancels the drift
    r_ab = _paired_step_time_ratio(root_a, model_a, root_b, model_a,
                                   bench_cfg)
    swap_delta = abs(r_ab - 1.0)
    assert swap_delta < 0.05

    # throughput is inverse step time
    ratio = _paired_step_time_ratio(root_a, model_a, root_c, model_c,
                                    bench_cfg)
    assert ratio >= 0.85

    # the training loop must never reach back to the feature source
    provider.reset_invocations()
    train(root_a, dataclasses.replace(bench_cfg, warmup_steps=2),
          model_config=_model_for(spec_a, embed_dim=32, depth=1, heads=4),
          max_steps=3)
    assert provider.INVOCATIONS == 0

    print(f"criterion 6 PASS: descriptor swap delta {swap_delta * 100:.1f}%, "
          f"width 768->1536 throughput ratio {ratio:.2f}, "
          f"provider invocations 0")


def test_criterion_7_constant_memory_pooling(tmp_path):
    counts = {"train": 48, "val": 8}
    base_spec = SyntheticSpec(classes=2, per_class=counts, d=32, h=8, w=8,
                              seed=70)
    hires_spec = dataclasses.replace(base_spec, h=16, w=16)
    base_root = tmp_path / "base"
    hires_root = tmp_path / "hires"
    pooled_root = tmp_path / "pooled"
    build_cache(base_spec, base_root)
    build_cache(hires_spec, hires_root)
    pooled_mf = pool_cache(hires_root, pooled_root, "max", 2, 2)

    base_mf = load_manifest(base_root)
    assert (pooled_mf.h, pooled_mf.w) == (base_mf.h, base_mf.w) == (8, 8)
    assert validate_cache(pooled_root).ok

    cfg = TrainConfig(batch_size=16, warmup_steps=2,
                      policy=AugmentationPolicy.disabled())
    model = ModelConfig(feature_dim=32, grid_h=8, grid_w=8, num_classes=2,
                        embed_dim=32, depth=1, heads=4)
    rep_base = bench_train(base_root, cfg, 10, model_config=model)
    rep_pool = bench_train(pooled_root, cfg, 10, model_config=model)

    peak_gap = (abs(rep_base.peak_tensor_bytes - rep_pool.peak_tensor_bytes)
                / rep_base.peak_tensor_bytes)
    assert peak_gap <= 0.01
    print(f"criterion 7 PASS: 16x16 pooled to 8x8; peak tensor bytes "
          f"{rep_pool.peak_tensor_bytes} vs base {rep_base.peak_tensor_bytes} "
          f"({peak_gap * 100:.2f}% apart)")


def test_criterion_8_determinism(default_cache):
    root, spec = default_cache
    cfg = TrainConfig(batch_size=32, seed=11)  # augmentation policy on
    model = _model_for(spec, embed_dim=32, depth=1, heads=4)

    batches = []
    for _ in range(2):
        session = TrainingSession(root, cfg, model_config=model)
        indices = next(iter(session.epoch_batches(0)))
        batches.append(session.prepare_batch(indices, 0))
    (g1, c1, l1), (g2, c2, l2) = batches
    assert g1.tobytes() == g2.tobytes()
    assert c1.tobytes() == c2.tobytes()
    assert l1.tobytes() == l2.tobytes()

    runs = [train(root, cfg, model_config=model, max_steps=100)
            for _ in range(2)]
    losses = [[r["loss"] for r in run.metrics.rows if r["split"] == "train"]
              for run in runs]
    assert len(losses[0]) == 100
    assert losses[0] == losses[1]
    for name in runs[0].params:
        assert np.array_equal(runs[0].params[name], runs[1].params[name])
    print("criterion 8 PASS: first batch bit-identical, 100-step loss "
          "sequences and final weights equal across runs")


# -- criterion 9: storage format ----------------------------------------------

def _mini_cache(root):
    spec = SyntheticSpec(classes=3, per_class={"train": 5, "val": 3},
                         d=6, h=3, w=2, seed=90)
    build_cache(spec, root)
    return spec


def test_criterion_9_format_and_corruption(tmp_path):
    rng = np.random.default_rng(909)
    records = [FeatureRecord(label=i,
                             cls=rng.standard_normal(5).astype(np.float32),
                             grid=rng.standard_normal((3, 2, 5)).astype(np.float32))
               for i in range(4)]

    p32 = tmp_path / "rt-0000.lfta"
    write_shard(records, "f32", p32)
    with ShardReader(p32) as reader:
        for i, rec in enumerate(records):
            got = reader.read_record(i)
            assert got.label == rec.label
            assert got.cls.tobytes() == rec.cls.tobytes()
            assert got.grid.tobytes() == rec.grid.tobytes()

    p16 = tmp_path / "rt16-0000.lfta"
    write_shard(records, "f16", p16)
    with ShardReader(p16) as reader:
        for i, rec in enumerate(records):
            got = reader.read_record(i)
            # readback is exactly the half-precision quantization of the input
            assert np.array_equal(got.cls,
                                  rec.cls.astype(np.float16).astype(np.float32))
            assert np.array_equal(got.grid,
                                  rec.grid.astype(np.float16).astype(np.float32))

    clean = tmp_path / "clean"
    spec = _mini_cache(clean)
    assert validate_cache(clean).ok
    record_bytes = 4 + (spec.d + spec.h * spec.w * spec.d) * 4

    def corrupted(name, mutate):
        root = tmp_path / name
        shutil.copytree(clean, root)
        mutate(root)
        report = validate_cache(root)
        assert not report.ok, name
        return " ".join(report.errors)

    def bad_magic(root):
        with open(shard_path(root, "train", 0), "r+b") as f:
            f.write(b"ZZZZ")

    def bad_count(root):
        mpath = root / "manifest.json"
        obj = json.loads(mpath.read_text())
        obj["splits"]["train"] += 1
        mpath.write_text(json.dumps(obj))

    def bad_shape(root):
        mpath = root / "manifest.json"
        obj = json.loads(mpath.read_text())
        obj["d"] += 1
        mpath.write_text(json.dumps(obj))

    def bad_label(root):
        with open(shard_path(root, "train", 0), "r+b") as f:
            f.seek(32 + 1 * record_bytes)
            f.write(struct.pack("<I", 99))

    def truncated(root):
        path = shard_path(root, "val", 0)
        os.truncate(path, path.stat().st_size - 7)

    assert "train-0000" in corrupted("magic", bad_magic)
    assert "CountMismatch" in corrupted("count", bad_count)
    assert "ShapeMismatch" in corrupted("shape", bad_shape)
    assert "99" in corrupted("label", bad_label)
    assert "CorruptShard" in corrupted("trunc", truncated)
    print("criterion 9 PASS: f32 round-trip bit-exact, f16 equals "
          "half-precision quantization, 5 corruption classes detected")
