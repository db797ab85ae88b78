"""Semantic observations and frame-to-frame instance tracking.

Tracks are continued by propagating a track's keypoints into the next frame
(and candidate keypoints back), counting confidence-weighted inliers against
the other detection's mask, and checking that box sizes agree.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BBOX_RATIO = 1.5


@dataclass(eq=False)
class SemanticObservation:
    """One detection: class, mask, keypoints, box and confidences.

    ``keypoints`` is (K, 2) pixels with ``kp_valid`` flags; ``bbox`` is
    ``(x, y, w, h)``; ``object_id`` carries the data association when known.
    """

    class_id: int
    mask: np.ndarray
    keypoints: np.ndarray
    kp_valid: np.ndarray
    kp_conf: np.ndarray
    bbox: tuple
    confidence: float = 1.0
    object_id: int | None = None
    det_id: int = 0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=float)
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        self.kp_valid = np.asarray(self.kp_valid, dtype=bool).reshape(-1)
        self.kp_conf = np.asarray(self.kp_conf, dtype=float).reshape(-1)
        if not (len(self.keypoints) == len(self.kp_valid) == len(self.kp_conf)):
            raise ValueError("keypoints, validity flags and confidences differ in length")
        H, W = self.mask.shape
        x, y, w, h = self.bbox
        if x < 0 or y < 0 or x + w > W or y + h > H:
            raise ValueError(f"bbox {self.bbox} outside {W}x{H} image")

    @property
    def n_keypoints(self):
        return len(self.keypoints)


def inlier_mask(points, mask):
    """Per point: inside the image and on a nonzero mask pixel (floor rounding)."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    H, W = mask.shape
    out = np.zeros(len(points), dtype=bool)
    ok = np.all(np.isfinite(points), axis=1)
    ok &= (points[:, 0] >= 0) & (points[:, 0] < W) & (points[:, 1] >= 0) & (points[:, 1] < H)
    cols = np.floor(points[ok, 0]).astype(int)
    rows = np.floor(points[ok, 1]).astype(int)
    out[ok] = mask[rows, cols] > 0
    return out


def match_score(obs_l, obs_m, fwd, bwd):
    """Confidence-weighted count of keypoints that are inliers both ways.

    ``fwd``: keypoints of ``obs_l`` propagated to ``obs_m``'s frame;
    ``bwd``: keypoints of ``obs_m`` propagated back to ``obs_l``'s frame.
    Different classes score 0.
    """
    if obs_l.class_id != obs_m.class_id:
        return 0.0
    fwd_in = inlier_mask(fwd, obs_m.mask)
    bwd_in = inlier_mask(bwd, obs_l.mask)
    k = min(len(fwd_in), len(bwd_in), len(obs_l.kp_conf))
    both = fwd_in[:k] & bwd_in[:k]
    return float(np.sum(obs_l.kp_conf[:k][both]))


def bbox_compatible(a, b, ratio=BBOX_RATIO):
    """Width and height of ``b`` each within a factor ``ratio`` of ``a``'s."""
    for sa, sb in ((a[2], b[2]), (a[3], b[3])):
        if sa <= 0 or sb <= 0:
            return False
        if not (1.0 / ratio <= sb / sa <= ratio):
            return False
    return True


@dataclass(eq=False)
class Track:
    track_id: int
    class_id: int
    frames: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    active: bool = True

    @property
    def status(self):
        return "active" if self.active else "lost"

    @property
    def last(self):
        return self.observations[-1]

    @property
    def last_frame(self):
        return self.frames[-1]

    def add(self, frame, obs):
        if self.frames and frame != self.frames[-1] + 1:
            raise ValueError("tracks hold consecutive frames only")
        if obs.class_id != self.class_id:
            raise ValueError("observation class differs from track class")
        self.frames.append(frame)
        self.observations.append(obs)

    def keypoint_measurements(self, q_min=0.5):
        """(frame, keypoints, usable) triples keeping only keypoints with ``q >= q_min``."""
        return [(t, o.keypoints, o.kp_valid & (o.kp_conf >= q_min))
                for t, o in zip(self.frames, self.observations)]


class Tracker:
    """Greedy frame-to-frame tracker; one instance per image sequence."""

    def __init__(self, bbox_ratio=BBOX_RATIO):
        self.tracks = []
        self.bbox_ratio = bbox_ratio
        self._next_id = 0

    @property
    def active_tracks(self):
        return [t for t in self.tracks if t.active]

    def _spawn(self, frame, obs):
        track = Track(self._next_id, obs.class_id)
        self._next_id += 1
        track.add(frame, obs)
        self.tracks.append(track)
        return track

    def step(self, frame, observations, propagator):
        """Associate ``observations`` of ``frame`` with the active tracks.

        ``propagator(obs, frame_from, frame_to)`` predicts where ``obs``'s
        keypoints appear in ``frame_to`` (NaN where unknown). Returns a list
        mapping each observation to its track id.
        """
        active = [t for t in self.active_tracks if t.last_frame == frame - 1]
        for t in self.active_tracks:
            if t.last_frame != frame - 1:
                t.active = False
        scores = np.zeros((len(active), len(observations)))
        bwd_cache = {}
        for i, track in enumerate(active):
            fwd = None
            for j, obs in enumerate(observations):
                if obs.class_id != track.class_id:
                    continue
                if fwd is None:
                    fwd = propagator(track.last, frame - 1, frame)
                if j not in bwd_cache:
                    bwd_cache[j] = propagator(obs, frame, frame - 1)
                scores[i, j] = match_score(track.last, obs, fwd, bwd_cache[j])
        assignment = [None] * len(observations)
        decided = set()
        # descending score; ties resolved by (track order, observation order)
        order = sorted(((-scores[i, j], i, j) for i in range(len(active))
                        for j in range(len(observations)) if scores[i, j] > 0))
        for _, i, j in order:
            if i in decided or assignment[j] is not None:
                continue
            decided.add(i)
            track = active[i]
            if bbox_compatible(track.last.bbox, observations[j].bbox, self.bbox_ratio):
                track.add(frame, observations[j])
                assignment[j] = track.track_id
            else:
                track.active = False
        for i, track in enumerate(active):
            if i not in decided:
                track.active = False
        for j, obs in enumerate(observations):
            if assignment[j] is None:
                assignment[j] = self._spawn(frame, obs).track_id
        return assignment


def step_tracking(tracker, frame, observations, propagator):
    """Functional alias for :meth:`Tracker.step`."""
    return tracker.step(frame, observations, propagator)


# --- observation files -----------------------------------------------------------

CSV_COLUMNS = ["det_id", "class", "kp_id", "u_pix", "v_pix", "q",
               "bbox_x", "bbox_y", "bbox_w", "bbox_h", "u_det"]


def write_observations(directory, observations):
    """One PGM mask per detection plus a ``keypoints.csv`` for the frame.

    Undetected keypoints are written with empty pixel fields and ``q = 0``.
    """
    from .raster import write_pgm

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "keypoints.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for obs in observations:
            write_pgm(directory / f"mask_{obs.det_id:03d}.pgm", obs.mask)
            for k in range(obs.n_keypoints):
                if obs.kp_valid[k]:
                    u, v = (repr(float(x)) for x in obs.keypoints[k])
                    q = repr(float(obs.kp_conf[k]))
                else:
                    u = v = ""
                    q = "0.0"
                w.writerow([obs.det_id, obs.class_id, k, u, v, q, *obs.bbox, repr(float(obs.confidence))])


def read_observations(directory):
    """Inverse of :func:`write_observations` (no data association)."""
    from .raster import read_pgm

    directory = Path(directory)
    rows = {}
    with open(directory / "keypoints.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        for r in reader:
            rows.setdefault(int(r["det_id"]), []).append(r)
    out = []
    for det_id in sorted(rows):
        rs = sorted(rows[det_id], key=lambda r: int(r["kp_id"]))
        kps = np.array([[float(r["u_pix"]) if r["u_pix"] else np.nan,
                         float(r["v_pix"]) if r["v_pix"] else np.nan] for r in rs])
        valid = np.array([bool(r["u_pix"]) for r in rs])
        q = np.array([float(r["q"]) for r in rs])
        r0 = rs[0]
        bbox = tuple(int(r0[k]) for k in ("bbox_x", "bbox_y", "bbox_w", "bbox_h"))
        mask = read_pgm(directory / f"mask_{det_id:03d}.pgm")
        out.append(SemanticObservation(int(r0["class"]), mask, kps, valid, q, bbox,
                                       float(r0["u_det"]), det_id=det_id))
    return out
