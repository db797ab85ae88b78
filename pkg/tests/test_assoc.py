import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshmap.assoc import (SemanticObservation, Track, Tracker, bbox_compatible, inlier_mask,
                           match_score, read_observations, step_tracking, write_observations)
from meshmap.pipeline import run_tracking, tracking_accuracy
from meshmap.sim import NoiseModel, synthesize_observations, tracking_scene


def make_obs(mask, kps, q=None, cls=0, bbox=None, oid=None, det_id=0):
    kps = np.asarray(kps, float)
    q = np.ones(len(kps)) if q is None else np.asarray(q, float)
    if bbox is None:
        bbox = (0, 0, mask.shape[1], mask.shape[0])
    return SemanticObservation(cls, mask, kps, np.ones(len(kps), bool), q, bbox,
                               object_id=oid, det_id=det_id)


def test_observation_validation():
    m = np.ones((10, 10))
    with pytest.raises(ValueError):
        SemanticObservation(0, m, np.zeros((3, 2)), np.ones(3, bool), np.ones(2), (0, 0, 5, 5))
    with pytest.raises(ValueError):
        SemanticObservation(0, m, np.zeros((3, 2)), np.ones(3, bool), np.ones(3), (8, 0, 5, 5))


def test_inlier_mask_examples():
    m = np.ones((10, 10))
    assert inlier_mask([[5.0, 5.0]], m).tolist() == [True]
    assert inlier_mask([[-0.5, 5.0], [10.0, 5.0], [5.0, 10.2], [np.nan, 1.0]], m).tolist() == \
        [False] * 4


def test_inlier_mask_checkerboard(rng):
    board = (np.add.outer(np.arange(12), np.arange(16)) % 2).astype(float)
    pts = rng.uniform(-2, 18, (300, 2))
    got = inlier_mask(pts, board)
    for (x, y), g in zip(pts, got):
        inside = 0 <= x < 16 and 0 <= y < 12
        assert g == (inside and board[int(np.floor(y)), int(np.floor(x))] == 1)


def test_match_score_examples():
    m = np.ones((10, 10))
    kps = [[1, 1], [2, 2], [3, 3]]
    a = make_obs(m, kps, q=[0.5, 0.7, 0.9])
    b = make_obs(m, kps)
    assert match_score(a, b, np.array(kps, float), np.array(kps, float)) == pytest.approx(2.1)
    bwd = np.array(kps, float)
    bwd[1] = [-5, -5]
    assert match_score(a, b, np.array(kps, float), bwd) == pytest.approx(1.4)
    c = make_obs(m, kps, cls=1)
    assert match_score(a, c, np.array(kps, float), np.array(kps, float)) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_match_score_bounds_and_monotone(seed):
    rng = np.random.default_rng(seed)
    m = (rng.uniform(size=(8, 8)) < 0.6).astype(float)
    kps = rng.uniform(0, 8, (6, 2))
    q = rng.uniform(size=6)
    a = make_obs(m, kps, q=q)
    b = make_obs(m, kps)
    fwd, bwd = rng.uniform(-1, 9, (6, 2)), rng.uniform(-1, 9, (6, 2))
    s = match_score(a, b, fwd, bwd)
    assert 0.0 <= s <= q.sum() + 1e-12
    q2 = q.copy()
    q2[rng.integers(6)] += 0.3
    assert match_score(make_obs(m, kps, q=q2), b, fwd, bwd) >= s


def test_bbox_compatibility():
    assert bbox_compatible((0, 0, 10, 10), (5, 5, 14, 7))
    assert not bbox_compatible((0, 0, 10, 10), (0, 0, 30, 10))
    assert not bbox_compatible((0, 0, 10, 10), (0, 0, 10, 6))
    assert not bbox_compatible((0, 0, 0, 10), (0, 0, 10, 10))


def identity_propagator(obs, t_from, t_to):
    return obs.keypoints


def blob(size, x0, y0, w, h):
    m = np.zeros((size, size))
    m[y0:y0 + h, x0:x0 + w] = 1
    return m


def blob_obs(x0, w=10, h=10, size=64, det_id=0, cls=0):
    m = blob(size, x0, 20, w, h)
    kps = [[x0 + 2.5, 22.5], [x0 + w - 2.5, 22.5], [x0 + w / 2, 20 + h - 2.5]]
    return make_obs(m, kps, cls=cls, bbox=(x0, 20, w, h), det_id=det_id)


def test_single_track_matched():
    tr = Tracker()
    assert tr.step(0, [blob_obs(5)], identity_propagator) == [0]
    assert step_tracking(tr, 1, [blob_obs(6)], identity_propagator) == [0]
    assert tr.tracks[0].frames == [0, 1] and tr.tracks[0].status == "active"


def test_two_tracks_match_brute_force_best_assignment():
    tr = Tracker()
    tr.step(0, [blob_obs(5), blob_obs(40)], identity_propagator)
    nxt = [blob_obs(41, det_id=0), blob_obs(6, det_id=1)]
    got = tr.step(1, nxt, identity_propagator)
    # brute-force: pick the permutation with the largest total score
    prev = [t.observations[0] for t in tr.tracks[:2]]
    best = max(itertools.permutations(range(2)),
               key=lambda p: sum(match_score(prev[i], nxt[p[i]], prev[i].keypoints,
                                             nxt[p[i]].keypoints) for i in range(2)))
    expected = [None, None]
    for i, j in enumerate(best):
        expected[j] = tr.tracks[i].track_id
    assert got == expected == [1, 0]


def test_incompatible_box_loses_track():
    tr = Tracker()
    tr.step(0, [blob_obs(5)], identity_propagator)
    # same keypoints land inside, but the box is 3x wider
    wide = blob_obs(3, w=30)
    wide.keypoints[:] = tr.tracks[0].last.keypoints
    assert tr.step(1, [wide], identity_propagator) == [1]
    assert tr.tracks[0].status == "lost"


def test_unmatched_track_is_lost_and_new_obs_spawn():
    tr = Tracker()
    tr.step(0, [blob_obs(5)], identity_propagator)
    assert tr.step(1, [blob_obs(45, cls=1)], identity_propagator) == [1]
    assert [t.status for t in tr.tracks] == ["lost", "active"]


def test_track_invariants():
    t = Track(0, 0)
    t.add(0, blob_obs(5))
    with pytest.raises(ValueError):
        t.add(2, blob_obs(5))
    with pytest.raises(ValueError):
        t.add(1, blob_obs(5, cls=2))


def test_observation_files_round_trip(tmp_path):
    scene = tracking_scene(n_frames=2)
    obs = synthesize_observations(scene, 0, NoiseModel(kp_sigma=0.5, seed=3))
    write_observations(tmp_path, obs)
    back = read_observations(tmp_path)
    assert len(back) == len(obs)
    for a, b in zip(obs, back):
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.kp_valid, b.kp_valid)
        assert np.array_equal(a.keypoints[a.kp_valid], b.keypoints[b.kp_valid])
        assert a.bbox == b.bbox and a.confidence == b.confidence and a.class_id == b.class_id


def test_tracking_accuracy_counts_errors():
    scene = tracking_scene(n_frames=3)
    obs = [synthesize_observations(scene, t) for t in range(3)]
    good = [[0, 1, 2, 3]] * 3
    assert tracking_accuracy(obs, good) == 1.0
    swapped = [[0, 1, 2, 3], [1, 0, 2, 3], [1, 0, 2, 3]]
    assert tracking_accuracy(obs, swapped) == pytest.approx(6 / 8)


def test_tracking_deterministic():
    scene = tracking_scene()
    noise = NoiseModel(kp_sigma=1.0, mask_pixels=2, seed=5)
    assert run_tracking(scene, noise)[1] == run_tracking(scene, noise)[1]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tracking_noiseless_is_perfect(seed):
    assert run_tracking(tracking_scene(seed=seed))[2] == 1.0
