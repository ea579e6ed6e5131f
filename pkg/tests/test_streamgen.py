import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttalab.corruption import CorruptionKind, SeveritySchedule
from ttalab.streamgen import (BBox, DatasetConfig, Scenario, ScenarioConfig, Tracklet, build_stream, crop_square,
                              dirichlet, extract_crop, ingest_tracklet_dir, lag1_label_agreement, load_dataset,
                              make_dataset, order_tracklets_noniid, save_dataset, subsample_frames, synth_tracklet)


def _fake_tracklets(labels, frames=1):
    return [Tracklet(i, int(y), np.zeros((frames, 4)), i) for i, y in enumerate(labels)]


# ---------------------------------------------------------------- synthesis


def test_zero_drift_repeats_the_first_frame():
    t = synth_tracklet(3, 10, 0.0, np.random.default_rng(0))
    assert np.array_equal(t.frames, np.repeat(t.frames[:1], 10, axis=0))


def test_consecutive_frames_closer_than_other_tracklets():
    rng = np.random.default_rng(1)
    near, far = [], []
    for i in range(100):
        c = i % 21
        a = synth_tracklet(c, 16, 1.0, rng)
        b = synth_tracklet(c, 16, 1.0, rng)
        near.append(np.linalg.norm(a.frames[1:] - a.frames[:-1], axis=1).mean())
        far.append(np.linalg.norm(a.frames[:-1] - b.frames[rng.integers(16)], axis=1).mean())
    assert np.mean(near) < np.mean(far)


def test_single_frame_tracklet_runs_in_every_scenario():
    ds = make_dataset(DatasetConfig(num_classes=3, tracklets_per_class=10, frames_per_tracklet=1))
    for sc, g in [(Scenario.FRAME_IID, None), (Scenario.TRACKLET_IID, None), (Scenario.TRACKLET_NONIID, 0.1),
                  (Scenario.TRACKLET_MIMIC, None)]:
        stream = build_stream(ds, ScenarioConfig(sc, g, CorruptionKind.FOG, batch_size=4))
        assert sum(len(b) for b in stream) > 0


def test_unknown_class_and_bad_length():
    with pytest.raises(ValueError):
        synth_tracklet(21, 4, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        synth_tracklet(0, 0, 1.0, np.random.default_rng(0))


def test_splits_disjoint_and_cover_every_class(dataset):
    ids = {s: {t.id for t in dataset.split(s)} for s in ("train", "val", "test")}
    assert not (ids["train"] & ids["val"]) and not (ids["train"] & ids["test"]) and not (ids["val"] & ids["test"])
    for s in ids:
        assert {t.label for t in dataset.split(s)} == set(range(dataset.num_classes))
    n = len(dataset.tracklets)
    assert (len(ids["train"]), len(ids["val"]), len(ids["test"])) == (n // 2, n * 3 // 10, n // 5)


def test_dataset_round_trip(tmp_path):
    ds = make_dataset(DatasetConfig(num_classes=3, tracklets_per_class=10, frames_per_tracklet=8, seed=4))
    manifest, _ = save_dataset(ds, tmp_path / "toy")
    assert manifest.read_text().startswith("#")
    back = load_dataset(tmp_path / "toy")
    assert back.config == ds.config
    for a, b in zip(ds.tracklets, back.tracklets):
        assert (a.id, a.label, a.split, a.corruption_seed) == (b.id, b.label, b.split, b.corruption_seed)
        assert np.array_equal(a.frames, b.frames)


# ---------------------------------------------------------------- subsampling and geometry


def test_subsample_examples():
    assert subsample_frames(list(range(12)), 5) == [0, 5, 10]
    assert subsample_frames(list(range(9)), 1) == list(range(9))
    got = subsample_frames(list(range(100)), 7)
    assert got == [i for i in range(100) if i % 7 == 0] and len(got) == 15
    with pytest.raises(ValueError):
        subsample_frames([1, 2], 0)


def _crop_reference(x0, y0, w, h, iw, ih):
    """The rule spelled out case by case."""
    side = 1.1 * max(w, h)
    if side > min(iw, ih):
        side = min(iw, ih)
    cx, cy = x0 + w / 2, y0 + h / 2
    half = side / 2
    if cx - half < 0:
        cx = half
    elif cx + half > iw:
        cx = iw - half
    if cy - half < 0:
        cy = half
    elif cy + half > ih:
        cy = ih - half
    return cx, cy, side


def test_crop_square_ten_percent_margin_cell():
    assert crop_square(BBox(200, 200, 100, 100, 1000, 1000))[2] == pytest.approx(110)


def test_crop_square_unclamped_keeps_center():
    cx, cy, side = crop_square(BBox(490, 480, 20, 40, 1000, 1000))
    assert (cx, cy) == (500, 500) and side == pytest.approx(44)


def test_crop_square_matches_reference_on_random_boxes():
    rng = np.random.default_rng(11)
    for _ in range(500):
        iw, ih = rng.uniform(20, 400, size=2)
        w, h = rng.uniform(1, 1.2 * max(iw, ih), size=2)
        x0 = rng.uniform(-w + 0.5, iw - 0.5)
        y0 = rng.uniform(-h + 0.5, ih - 0.5)
        assert crop_square(BBox(x0, y0, w, h, iw, ih)) == _crop_reference(x0, y0, w, h, iw, ih)


def test_crop_square_rejects_degenerate_boxes():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 5, 10, 10)
    with pytest.raises(ValueError):
        BBox(20, 0, 5, 5, 10, 10)


def test_ingestion_crops_each_subsampled_frame(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(10):
        np.save(tmp_path / f"f{i}.npy", rng.uniform(size=(40, 60)))
    (tmp_path / "car.txt").write_text("# frame x0 y0 w h\n" + "".join(f"f{i}.npy 10 5 20 16\n" for i in range(10)))
    (tr,) = ingest_tracklet_dir(tmp_path, {"car": 4}, interval=5)
    assert tr.label == 4 and tr.frames.shape == (2, 256)
    img = np.load(tmp_path / "f5.npy")
    expect = extract_crop(img, crop_square(BBox(10, 5, 20, 16, 60, 40))).ravel()
    assert np.allclose(tr.frames[1], np.clip(expect, 0, 1))


def test_extract_crop_of_constant_image_is_constant():
    out = extract_crop(np.full((30, 30), 0.25), (15, 15, 12), 16)
    assert out.shape == (16, 16) and np.allclose(out, 0.25)


# ---------------------------------------------------------------- Dirichlet


@given(st.floats(1e-4, 1e3), st.integers(2, 30), st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_dirichlet_is_a_distribution(gamma, k, seed):
    p = dirichlet(gamma, k, np.random.default_rng(seed))
    assert p.shape == (k,) and np.all(p >= 0) and abs(p.sum() - 1) < 1e-9


def test_dirichlet_rejects_bad_arguments():
    with pytest.raises(ValueError):
        dirichlet(0.0, 5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        dirichlet(1.0, 1, np.random.default_rng(0))


def test_dirichlet_component_means_are_calibrated():
    """Standardised component means behave like N(0, 1) draws.

    84 components are checked at once, so the bound on the largest |z|
    is set for that many comparisons (P(|z| > 4.5) * 84 < 1e-3).
    """
    k, n = 21, 10_000
    rng = np.random.default_rng(5)
    zs = []
    for gamma in (1e-4, 1e-1, 1.0, 1e3):
        draws = np.array([dirichlet(gamma, k, rng) for _ in range(n)])
        se = math.sqrt((k - 1) / (k * k * (k * gamma + 1)) / n)
        zs.append((draws.mean(axis=0) - 1 / k) / se)
    z = np.concatenate(zs)
    assert np.abs(z).max() < 4.5
    assert 0.75 < z.std() < 1.25


def test_dirichlet_variance_matches_formula_and_order():
    k, n = 21, 10_000
    rng = np.random.default_rng(6)
    var = {}
    for gamma in (1e-1, 1e3):
        draws = np.array([dirichlet(gamma, k, rng) for _ in range(n)])
        var[gamma] = draws.var(axis=0).mean()
        assert var[gamma] == pytest.approx((k - 1) / (k * k * (k * gamma + 1)), rel=0.1)
    assert var[1e3] < var[1e-1]


# ---------------------------------------------------------------- non-iid ordering


def test_large_gamma_mixes_two_classes_evenly():
    shares = [[], []]
    for seed in range(50):
        tr = _fake_tracklets([0] * 100 + [1] * 100)
        out = order_tracklets_noniid(tr, 1e3, 2, np.random.default_rng(seed))
        for s, half in enumerate((out[:100], out[100:])):
            shares[s].append(np.mean([t.label for t in half]))
    for s in shares:
        assert abs(np.mean(s) - 0.5) <= 0.10


def test_tiny_gamma_is_near_class_incremental():
    k = 21
    for seed in range(50):
        tr = _fake_tracklets(np.repeat(np.arange(k), 8))
        labels = [t.label for t in order_tracklets_noniid(tr, 1e-4, k, np.random.default_rng(seed))]
        assert sum(a != b for a, b in zip(labels, labels[1:])) <= 2 * k


@given(st.lists(st.integers(0, 5), min_size=1, max_size=60), st.sampled_from([1e-4, 1e-1, 1.0, 1e3]),
       st.integers(1, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_noniid_order_is_a_permutation(labels, gamma, slots, seed):
    tr = _fake_tracklets(labels)
    out = order_tracklets_noniid(tr, gamma, slots, np.random.default_rng(seed))
    assert sorted(t.id for t in out) == list(range(len(tr)))


def test_noniid_order_rejects_empty_input():
    with pytest.raises(ValueError):
        order_tracklets_noniid([], 1.0, 3, np.random.default_rng(0))


def test_label_autocorrelation_falls_with_gamma(dataset):
    agree = {}
    for gamma in (1e-4, 1e-1, 1e3):
        agree[gamma] = np.mean([lag1_label_agreement(build_stream(
            dataset, ScenarioConfig(Scenario.TRACKLET_NONIID, gamma, None, batch_size=64, seed=s)))
            for s in range(20)])
    assert agree[1e-4] >= agree[1e-1] >= agree[1e3]


# ---------------------------------------------------------------- streams


def test_frame_iid_has_one_sample_per_tracklet(dataset):
    stream = build_stream(dataset, ScenarioConfig(Scenario.FRAME_IID, None, None, batch_size=64))
    ids = np.concatenate([b.tracklet_ids for b in stream])
    assert len(ids) == len(dataset.split("test")) and len(set(ids.tolist())) == len(ids)


def test_tracklet_iid_static_corruption_is_consistent(dataset):
    cfg = ScenarioConfig(Scenario.TRACKLET_IID, None, CorruptionKind.SHOT_NOISE, SeveritySchedule(3), 10, seed=2)
    stream = build_stream(dataset, cfg)
    for b in stream:
        assert len(set(b.tracklet_ids.tolist())) == 1  # batches never mix tracklets
        assert np.all(b.severity == 3)
    lengths = [len(b) for b in stream]
    assert max(lengths) == 10 and min(lengths) == 6  # 16-frame tracklets: 10 + 6


def test_tracklet_frames_stay_in_order(dataset):
    stream = build_stream(dataset, ScenarioConfig(Scenario.TRACKLET_IID, None, None, batch_size=64))
    by_id = {t.id: t for t in dataset.split("test")}
    for b in stream:
        t = by_id[int(b.tracklet_ids[0])]
        assert np.array_equal(b.frame_index, np.arange(len(t.frames)))
        assert np.array_equal(b.x, t.frames)


def test_mimic_batches_replicate_one_frame(dataset):
    stream = build_stream(dataset, ScenarioConfig(Scenario.TRACKLET_MIMIC, None, CorruptionKind.FOG, batch_size=64))
    assert len(stream) == len(dataset.split("test"))
    for b in stream:
        assert len(b) == 64 and np.all(b.x == b.x[0])


def test_mimic_and_frame_iid_show_the_same_frames(dataset):
    cfg = dict(corruption=CorruptionKind.GLASS_BLUR, batch_size=64, seed=3)
    frame = build_stream(dataset, ScenarioConfig(Scenario.FRAME_IID, **cfg))
    mimic = build_stream(dataset, ScenarioConfig(Scenario.TRACKLET_MIMIC, **cfg))
    fx = np.concatenate([b.x for b in frame])
    assert np.array_equal(fx, np.stack([b.x[0] for b in mimic]))


def test_dynamic_severity_follows_the_schedule(dataset):
    sched = SeveritySchedule(4, dynamic=True)
    stream = build_stream(dataset, ScenarioConfig(Scenario.TRACKLET_IID, None, CorruptionKind.DEFOCUS_BLUR, sched))
    b = stream[0]
    assert b.severity[0] == 0.0 and np.allclose(b.severity, 4 * np.abs(np.sin(2 * np.pi / 32 * b.frame_index)))
    # zero severity leaves the frame untouched
    t = next(t for t in dataset.split("test") if t.id == b.tracklet_ids[0])
    assert np.array_equal(b.x[0], t.frames[0])


def test_stream_is_reproducible_and_seed_dependent(dataset):
    cfg = ScenarioConfig(Scenario.TRACKLET_NONIID, 0.1, CorruptionKind.IMPULSE_NOISE, batch_size=32, seed=7)
    a, b = build_stream(dataset, cfg), build_stream(dataset, cfg)
    assert all(np.array_equal(u.x, v.x) and np.array_equal(u.labels, v.labels) for u, v in zip(a, b))
    c = build_stream(dataset, ScenarioConfig(Scenario.TRACKLET_NONIID, 0.1, CorruptionKind.IMPULSE_NOISE,
                                             batch_size=32, seed=8))
    assert not all(np.array_equal(u.tracklet_ids, v.tracklet_ids) for u, v in zip(a, c))


def test_scenario_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(Scenario.TRACKLET_NONIID, None)
    with pytest.raises(ValueError):
        ScenarioConfig(Scenario.TRACKLET_IID, 0.1)
    with pytest.raises(ValueError):
        ScenarioConfig(batch_size=0)
