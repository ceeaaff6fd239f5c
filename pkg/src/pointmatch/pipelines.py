"""Task pipelines: pair planning, sliding-window tracking, depth, reconstruction.

A predictor maps an ordered frame pair (view1, view2) to three pointmaps, all
expressed in view1's camera frame:

  x_ii          view1's own content (ego map),
  x_ji          view2's content under the static-world hypothesis,
  x_ji_matched  view2's content where it actually is at view1's time.

The oracle predictor reads those from a synthetic scene and optionally
perturbs them: per-coordinate Gaussian noise scaled by depth, and one
log-normal scale factor per pair (monocular scale wobble). Long sequences are
processed in overlapping windows and stitched: scales harmonized by a median
norm ratio over overlap frames, later windows win on overlap, and queries
re-seed at each new window's keyframe by rounding projected track positions
to the nearest pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .geometry import (
    ConfidenceMap,
    DepthMap,
    Pointmap,
    depth_channel,
    project_points,
    unproject,
)
from .matching import sparsify_tracks
from .scenes import SceneSequence, gt_pointmap_matching, gt_rigid_pointmap

DEFAULT_WINDOW = 12
DEFAULT_OVERLAP = 4

_ROLE_EGO, _ROLE_RIGID, _ROLE_MATCHED, _ROLE_JITTER = 1, 2, 3, 9


@dataclass
class PairPrediction:
    """Predictor output for an ordered pair; all maps live in view1's camera."""

    frames: tuple[int, int]
    x_ii: Pointmap
    x_ji: Pointmap
    x_ji_matched: Pointmap
    conf_ii: ConfidenceMap
    conf_ji: ConfidenceMap
    conf_ji_matched: ConfidenceMap


class Predictor(Protocol):
    @property
    def frame_count(self) -> int: ...

    def predict(self, view1: int, view2: int) -> PairPrediction: ...


class OraclePredictor:
    """Scene-backed predictor with optional noise and per-pair scale jitter.

    sigma_point scales per-coordinate Gaussian noise by each pixel's depth;
    sigma_scale draws one exp(N(0, sigma^2)) factor per pair, applied to all
    three maps (they share the pair's unknown scale). Outputs are deterministic
    per (seed, pair): repeated calls return identical maps.

    confidence_mode "uniform" emits raw logit 1 everywhere; "noise" lowers the
    logit monotonically with the actually-injected noise magnitude.
    """

    def __init__(
        self,
        seq: SceneSequence,
        sigma_point: float = 0.0,
        sigma_scale: float = 0.0,
        seed: int = 0,
        confidence_mode: str = "uniform",
    ):
        if sigma_point < 0 or sigma_scale < 0:
            raise ValueError("noise magnitudes must be >= 0")
        if confidence_mode not in ("uniform", "noise"):
            raise ValueError("confidence_mode must be uniform or noise")
        self.seq = seq
        self.sigma_point = float(sigma_point)
        self.sigma_scale = float(sigma_scale)
        self.seed = int(seed)
        self.confidence_mode = confidence_mode

    @property
    def frame_count(self) -> int:
        return self.seq.frame_count

    def _rng(self, i: int, j: int, role: int) -> np.random.Generator:
        ss = np.random.SeedSequence((self.seed, i, j, role))
        return np.random.Generator(np.random.Philox(ss))

    def _perturb(self, pm: Pointmap, i: int, j: int, role: int) -> tuple[Pointmap, ConfidenceMap]:
        if self.sigma_point <= 0:
            return pm, ConfidenceMap(np.ones(pm.resolution))
        rng = self._rng(i, j, role)
        z = np.abs(pm.points[..., 2:3])
        eps = rng.normal(size=pm.points.shape) * (self.sigma_point * z)
        pts = pm.points + eps
        pts[~pm.valid] = 0.0
        if self.confidence_mode == "noise":
            mag = np.linalg.norm(eps, axis=-1)
            ref = self.sigma_point * np.maximum(z[..., 0], 1e-9)
            raw = 1.0 / (1.0 + mag / ref)
        else:
            raw = np.ones(pm.resolution)
        return Pointmap(pts, pm.valid), ConfidenceMap(raw)

    def predict(self, view1: int, view2: int) -> PairPrediction:
        seq = self.seq
        ego = unproject(seq.depths[view1], seq.intrinsics[view1])
        rigid = gt_rigid_pointmap(seq, view1, view2)
        matched = gt_pointmap_matching(seq, view1, view2)
        ego, c_e = self._perturb(ego, view1, view2, _ROLE_EGO)
        rigid, c_r = self._perturb(rigid, view1, view2, _ROLE_RIGID)
        matched, c_m = self._perturb(matched, view1, view2, _ROLE_MATCHED)
        if self.sigma_scale > 0:
            f = float(np.exp(self._rng(view1, view2, _ROLE_JITTER).normal() * self.sigma_scale))
            ego, rigid, matched = ego.scaled(f), rigid.scaled(f), matched.scaled(f)
        return PairPrediction(
            frames=(view1, view2),
            x_ii=ego,
            x_ji=rigid,
            x_ji_matched=matched,
            conf_ii=c_e,
            conf_ji=c_r,
            conf_ji_matched=c_m,
        )


@dataclass
class TaskPlan:
    """Ordered pair list for one window of a task.

    pairs are (view1, view2); heads names the decoder outputs the task
    consumes downstream.
    """

    task: str
    frames: tuple[int, ...]
    keyframe: int | None
    pairs: list[tuple[int, int]]
    heads: tuple[str, ...]


def plan_pairs(task: str, frames: Sequence[int]) -> TaskPlan:
    """Pair template per task over a window of frame indices.

    tracking: keyframe is the window's first frame, pairs (t, keyframe);
    video_depth: identical pairs (t, t);
    reconstruction: keyframe is the window's last frame, pairs (keyframe, t).
    """
    fr = tuple(int(f) for f in frames)
    if not fr:
        raise ValueError("empty frame window")
    if task == "tracking":
        kf = fr[0]
        return TaskPlan(task, fr, kf, [(t, kf) for t in fr], ("head3",))
    if task == "video_depth":
        return TaskPlan(task, fr, None, [(t, t) for t in fr], ("head1",))
    if task == "reconstruction":
        kf = fr[-1]
        return TaskPlan(task, fr, kf, [(kf, t) for t in fr], ("head1", "head2"))
    raise ValueError(f"unknown task {task!r}")


def window_starts(length: int, window: int = DEFAULT_WINDOW, overlap: int = DEFAULT_OVERLAP) -> list[int]:
    """Start indices of sliding windows covering a sequence.

    Stride is window - overlap; a final tail-aligned window is appended when
    the regular grid leaves frames uncovered. A sequence shorter than one
    window yields the single start 0 (callers clip the window).
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if window < 2:
        raise ValueError("window must be >= 2")
    if overlap < 0 or overlap >= window:
        raise ValueError("overlap must be in [0, window)")
    if length <= window:
        return [0]
    stride = window - overlap
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


@dataclass
class TrackingResult:
    tracks: np.ndarray  # (Q, L, 3), per-frame camera coordinates
    valid: np.ndarray  # (Q, L)
    starts: list[int]
    scales: list[float]  # harmonization factor applied to each window
    queries: np.ndarray  # (Q, 2) original pixels at frame 0


def track_3d(
    seq: SceneSequence,
    predictor: Predictor,
    queries: np.ndarray,
    window: int = DEFAULT_WINDOW,
    overlap: int = DEFAULT_OVERLAP,
    mode: str = "matched",
) -> TrackingResult:
    """Track query pixels of frame 0 across the whole sequence in 3D.

    Each window anchors at its first frame and reads that keyframe's content
    from the predictor's matched maps (pairs (t, keyframe)); mode "rigid"
    consumes the static-hypothesis maps instead (the no-motion baseline).
    Windows are stitched by median norm-ratio scale harmonization over overlap
    frames, later windows overwrite, and queries re-seed at the next keyframe
    by nearest-pixel rounding of the projected track.
    """
    if mode not in ("matched", "rigid"):
        raise ValueError("mode must be matched or rigid")
    length = seq.frame_count
    h, w = seq.resolution
    starts = window_starts(length, window, overlap)
    q = np.asarray(queries, dtype=np.int64)
    if q.ndim != 2 or q.shape[1] != 2:
        raise ValueError("queries must be (Q, 2) integer pixels")
    nq = q.shape[0]

    out = np.zeros((nq, length, 3))
    out_valid = np.zeros((nq, length), dtype=bool)
    cur_pix = q.copy()
    alive = np.ones(nq, dtype=bool)
    scales: list[float] = []
    prev_end = 0

    for wi, start in enumerate(starts):
        frames = list(range(start, min(start + window, length)))
        kf = frames[0]
        maps = []
        for t in frames:
            pred = predictor.predict(t, kf)
            maps.append(pred.x_ji_matched if mode == "matched" else pred.x_ji)
        safe_pix = np.where(alive[:, None], cur_pix, 0)
        tr_w, va_w = sparsify_tracks(maps, safe_pix)
        va_w &= alive[:, None]

        if wi == 0:
            s = 1.0
        else:
            ratios = []
            for fi, f in enumerate(frames):
                if f >= prev_end:
                    break
                both = va_w[:, fi] & out_valid[:, f]
                if both.any():
                    prev_n = np.linalg.norm(out[both, f], axis=1)
                    new_n = np.linalg.norm(tr_w[both, fi], axis=1)
                    ok = new_n > 1e-12
                    ratios.append(prev_n[ok] / new_n[ok])
            s = float(np.median(np.concatenate(ratios))) if ratios else 1.0
            tr_w = tr_w * s
        scales.append(s)

        for fi, f in enumerate(frames):
            out[:, f] = tr_w[:, fi]
            out_valid[:, f] = va_w[:, fi]
        prev_end = frames[-1] + 1

        if wi + 1 < len(starts):
            ns = starts[wi + 1]
            reseed_f = ns if ns in frames else frames[-1]
            ri = frames.index(reseed_f)
            pix, pv = project_points(tr_w[:, ri], seq.intrinsics[reseed_f])
            rounded = np.rint(pix).astype(np.int64)
            inb = (
                (rounded[:, 0] >= 0)
                & (rounded[:, 0] < w)
                & (rounded[:, 1] >= 0)
                & (rounded[:, 1] < h)
            )
            alive = alive & va_w[:, ri] & pv & inb
            cur_pix = np.where(alive[:, None], rounded, 0)

    return TrackingResult(tracks=out, valid=out_valid, starts=starts, scales=scales, queries=q)


def video_depth(seq: SceneSequence, predictor: Predictor) -> list[DepthMap]:
    """Per-frame depth from the ego maps of identical pairs (t, t)."""
    return [
        depth_channel(predictor.predict(t, t).x_ii) for t in range(seq.frame_count)
    ]


@dataclass
class ReconResult:
    points: np.ndarray  # (M, 3) merged cloud in keyframe camera coordinates
    maps: list[Pointmap]
    keyframe: int
    frames: list[int]


def feedforward_recon(
    seq: SceneSequence, predictor: Predictor, window: int = DEFAULT_WINDOW
) -> ReconResult:
    """Reconstruct one window, anchored at its last frame (the keyframe).

    Uses the final `window` frames (whole sequence if shorter). Each frame's
    content lands in keyframe coordinates via pairs (keyframe, t); the merged
    cloud stacks all valid points.
    """
    length = seq.frame_count
    frames = list(range(max(0, length - window), length))
    kf = frames[-1]
    maps = [predictor.predict(kf, t).x_ji for t in frames]
    clouds = [m.points[m.valid] for m in maps]
    points = np.concatenate(clouds, axis=0) if clouds else np.zeros((0, 3))
    return ReconResult(points=points, maps=maps, keyframe=kf, frames=frames)
