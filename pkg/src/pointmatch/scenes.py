"""Synthetic dynamic scenes with analytic ground truth.

A scene is a sinusoidal height-field backdrop plus a few convex rigid objects
(spheres, axis-aligned boxes) moving with constant world velocity, observed by
a smooth camera path. Everything is raycast analytically, so depth maps,
cross-time correspondences, occlusion and tracks come out in closed form
instead of from a mesh rasterizer.

Design notes that matter for exactness:
  - ray directions are z-normalized in the camera frame, so the ray parameter
    equals camera depth;
  - ground-truth matching and rigid pointmaps run through one shared kernel
    P_i(W_j + span * v). Static pixels have v = 0, so the two maps are
    bitwise identical there and residuals are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDomainError
from .geometry import (
    DepthMap,
    Intrinsics,
    Pointmap,
    Pose,
    project_points,
)

_RAY_TMIN = 1e-6
_OCCLUSION_TOL = 1e-6
_MIN_DZ = 1e-6
_BISECT_ITERS = 80
_SLOPE_BOUND = 0.3  # max |grad h|; keeps ray-surface crossings monotone in t

_CAMERA_PATHS = ("orbit", "linear", "random-smooth")


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    frame_count: int = 6
    height: int = 24
    width: int = 32
    object_count: int = 2
    motion_magnitude: float = 0.05
    camera_path: str = "orbit"
    camera_magnitude: float = 0.02
    track_count: int = 16

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")
        if self.height < 4 or self.width < 4:
            raise ValueError("resolution must be at least 4x4")
        if self.object_count < 0:
            raise ValueError("object_count must be >= 0")
        if self.motion_magnitude < 0 or self.camera_magnitude < 0:
            raise ValueError("magnitudes must be >= 0")
        if self.camera_path not in _CAMERA_PATHS:
            raise ValueError(f"camera_path must be one of {_CAMERA_PATHS}")
        if self.track_count < 0:
            raise ValueError("track_count must be >= 0")


@dataclass
class HeightField:
    """z = base + sum_k amp_k * sin(fx_k x + fy_k y + phase_k), slope-bounded."""

    base: float
    amps: np.ndarray  # (K,)
    freqs: np.ndarray  # (K, 2)
    phases: np.ndarray  # (K,)

    def height(self, xy: np.ndarray) -> np.ndarray:
        args = xy @ self.freqs.T + self.phases  # (..., K)
        return self.base + np.sin(args) @ self.amps

    @property
    def z_bounds(self) -> tuple[float, float]:
        a = float(np.abs(self.amps).sum())
        return self.base - a, self.base + a

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """First crossing along each ray; dirs need not be normalized.

        Assumes origins lie below the surface band (z < zmin) and rays point
        toward +z steeply enough that the crossing is unique; callers enforce
        that through the camera-path contract.
        """
        zmin, zmax = self.z_bounds
        oz, dz = origins[:, 2], dirs[:, 2]
        ok = dz > _MIN_DZ
        safe_dz = np.where(ok, dz, 1.0)
        lo = np.maximum((zmin - oz) / safe_dz, 0.0)
        hi = (zmax - oz) / safe_dz
        ok &= hi > 0

        def g(t):
            p = origins + t[:, None] * dirs
            return p[:, 2] - self.height(p[:, :2])

        lo = lo.copy()
        hi = np.where(ok, hi, lo + 1.0)
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            below = g(mid) < 0
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return hi, ok


@dataclass
class SceneObject:
    """Convex rigid body translating with constant world velocity.

    kind "sphere": size = (radius,); kind "box": size = half extents (3,),
    axis-aligned (objects translate, they do not spin).
    """

    kind: str
    center: np.ndarray
    size: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.kind not in ("sphere", "box"):
            raise ValueError("kind must be sphere or box")

    @property
    def dynamic(self) -> bool:
        return bool(np.linalg.norm(self.velocity) > 0)

    def offset_at(self, frame: int) -> np.ndarray:
        return frame * self.velocity

    def intersect(
        self, origins: np.ndarray, dirs: np.ndarray, frame: int
    ) -> tuple[np.ndarray, np.ndarray]:
        c = self.center + self.offset_at(frame)
        if self.kind == "sphere":
            r = float(self.size[0])
            oc = origins - c
            a = np.einsum("ij,ij->i", dirs, dirs)
            b = 2.0 * np.einsum("ij,ij->i", oc, dirs)
            cc = np.einsum("ij,ij->i", oc, oc) - r * r
            disc = b * b - 4.0 * a * cc
            hit = disc > 0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            t = (-b - sq) / (2.0 * a)
            return t, hit & (t > _RAY_TMIN)
        lo, hi = c - self.size, c + self.size
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[None, :] - origins) / dirs
            t2 = (hi[None, :] - origins) / dirs
        tn = np.nanmax(np.minimum(t1, t2), axis=1)
        tf = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tn <= tf) & (tn > _RAY_TMIN)
        return tn, hit


@dataclass
class TrackSet:
    """Ground-truth 3D tracks for a set of query pixels.

    query_frames: (Q,) frame each query was issued at.
    query_pixels: (Q, 2) integer (x, y).
    world/camera: (Q, T, 3); camera holds the point in frame t's camera frame.
    pixels: (Q, T, 2) projected pixel positions (zero where invisible).
    visible: (Q, T) bool; occluded or out-of-view frames are False.
    """

    query_frames: np.ndarray
    query_pixels: np.ndarray
    world: np.ndarray
    camera: np.ndarray
    pixels: np.ndarray
    visible: np.ndarray

    def __len__(self) -> int:
        return int(self.query_frames.shape[0])


@dataclass
class SceneSequence:
    config: SceneConfig
    intrinsics: list[Intrinsics]
    poses: list[Pose]  # world-to-camera, one per frame
    depths: list[DepthMap]
    dynamic_labels: np.ndarray  # (T, H, W) bool
    objects: list[SceneObject]
    background: HeightField
    tracks: TrackSet = field(default=None)  # type: ignore[assignment]
    # raycast caches: world hit points, surface ids (-1 bg, k>=0 object, miss invalid)
    hit_world: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    hit_id: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    hit_valid: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    @property
    def frame_count(self) -> int:
        return len(self.poses)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.config.height, self.config.width

    def velocity_of(self, surface_id: int) -> np.ndarray:
        if surface_id < 0:
            return np.zeros(3)
        return self.objects[surface_id].velocity


def _look_at(eye: np.ndarray, target: np.ndarray) -> Pose:
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if not n > 1e-9:
        raise ValueError("camera eye and target coincide")
    zc = fwd / n
    up = np.array([0.0, 1.0, 0.0])
    xc = np.cross(up, zc)
    xn = np.linalg.norm(xc)
    if xn < 1e-9:
        raise ValueError("camera looking along the up axis")
    xc /= xn
    yc = np.cross(zc, xc)
    r_c2w = np.stack([xc, yc, zc], axis=1)
    return Pose(r_c2w.T, -r_c2w.T @ eye)


def _camera_path(cfg: SceneConfig, rng: np.random.Generator) -> list[Pose]:
    t_idx = np.arange(cfg.frame_count, dtype=np.float64) - (cfg.frame_count - 1) / 2.0
    dist = 4.0
    target = np.array([0.0, 0.0, 0.0]) + rng.uniform(-0.1, 0.1, size=3) * np.array([1, 1, 0])
    poses = []
    if cfg.camera_path == "orbit":
        theta0 = rng.uniform(-0.05, 0.05)
        y0 = rng.uniform(-0.2, 0.2)
        for ti in t_idx:
            th = theta0 + ti * cfg.camera_magnitude
            eye = np.array([dist * np.sin(th), y0, -dist * np.cos(th)])
            poses.append(_look_at(eye, target))
    elif cfg.camera_path == "linear":
        x0 = rng.uniform(-0.2, 0.2)
        y0 = rng.uniform(-0.2, 0.2)
        for ti in t_idx:
            eye = np.array([x0 + ti * cfg.camera_magnitude, y0, -dist])
            poses.append(_look_at(eye, target))
    else:  # random-smooth: sum of two low-frequency sinusoids per axis
        base = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), -dist])
        amps = cfg.camera_magnitude * rng.uniform(0.3, 1.0, size=(2, 3))
        omegas = rng.uniform(0.3, 0.8, size=(2, 3))
        phis = rng.uniform(0.0, 2 * np.pi, size=(2, 3))
        for ti in t_idx:
            wob = (amps * np.sin(omegas * ti + phis)).sum(axis=0)
            poses.append(_look_at(base + wob, target))
    return poses


def _sample_background(rng: np.random.Generator) -> HeightField:
    k = 3
    amps = rng.uniform(0.04, 0.1, size=k)
    freqs = rng.uniform(0.3, 0.9, size=(k, 2)) * rng.choice([-1.0, 1.0], size=(k, 2))
    phases = rng.uniform(0.0, 2 * np.pi, size=k)
    # enforce the slope bound that makes raycast brackets monotone
    slope = float((np.abs(amps) * np.linalg.norm(freqs, axis=1)).sum())
    if slope > _SLOPE_BOUND:
        amps *= _SLOPE_BOUND / slope
    return HeightField(base=0.0, amps=amps, freqs=freqs, phases=phases)


def _sample_objects(cfg: SceneConfig, rng: np.random.Generator) -> list[SceneObject]:
    objects = []
    for _ in range(cfg.object_count):
        kind = "sphere" if rng.uniform() < 0.5 else "box"
        center = np.array(
            [rng.uniform(-0.9, 0.9), rng.uniform(-0.7, 0.7), rng.uniform(-1.6, -0.6)]
        )
        if kind == "sphere":
            size = np.array([rng.uniform(0.22, 0.45)])
        else:
            size = rng.uniform(0.18, 0.4, size=3)
        if cfg.motion_magnitude > 0:
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            velocity = cfg.motion_magnitude * d
        else:
            velocity = np.zeros(3)
        objects.append(SceneObject(kind, center, size, velocity))
    return objects


def _raycast(
    seq_objects: list[SceneObject],
    background: HeightField,
    origins: np.ndarray,
    dirs: np.ndarray,
    frame: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest surface along each ray: (t, surface_id, hit)."""
    t_best, hit_best = background.intersect(origins, dirs)
    t_best = np.where(hit_best, t_best, np.inf)
    id_best = np.where(hit_best, -1, -2)
    for k, obj in enumerate(seq_objects):
        t_k, hit_k = obj.intersect(origins, dirs, frame)
        closer = hit_k & (t_k < t_best)
        t_best = np.where(closer, t_k, t_best)
        id_best = np.where(closer, k, id_best)
    hit = id_best > -2
    return np.where(hit, t_best, 0.0), id_best, hit


def _frame_rays(seq: SceneSequence, frame: int, pix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-space (origins, dirs) for pixel coords pix (N, 2); dirs z-normalized in cam frame."""
    k = seq.intrinsics[frame]
    pose = seq.poses[frame]
    d_cam = np.stack(
        [(pix[:, 0] - k.cx) / k.fx, (pix[:, 1] - k.cy) / k.fy, np.ones(len(pix))], axis=1
    )
    r_c2w = pose.rotation.T
    dirs = d_cam @ r_c2w.T
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return origins, dirs


def raycast_pixels(
    seq: SceneSequence, frame: int, pix: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raycast arbitrary (possibly fractional) pixels at a frame.

    Returns (points_cam (N, 3), surface_id (N,), hit (N,)). The ray parameter
    is camera depth, so points_cam = depth * ((x-cx)/fx, (y-cy)/fy, 1).
    """
    _check_frame(seq, frame)
    pix = np.asarray(pix, dtype=np.float64)
    origins, dirs = _frame_rays(seq, frame, pix)
    t, sid, hit = _raycast(seq.objects, seq.background, origins, dirs, frame)
    k = seq.intrinsics[frame]
    d_cam = np.stack(
        [(pix[:, 0] - k.cx) / k.fx, (pix[:, 1] - k.cy) / k.fy, np.ones(len(pix))], axis=1
    )
    pts = np.where(hit[:, None], t[:, None] * d_cam, 0.0)
    return pts, sid, hit


def _visible_from(seq: SceneSequence, frame: int, world_pts: np.ndarray) -> np.ndarray:
    """True where a world point is the first surface hit from the frame's camera."""
    o = seq.poses[frame].center
    delta = world_pts - o
    dist = np.linalg.norm(delta, axis=-1)
    ok = dist > _RAY_TMIN
    safe = np.where(ok[..., None], delta, np.array([0.0, 0.0, 1.0]))
    dirs = safe / np.maximum(dist, _RAY_TMIN)[..., None]
    origins = np.broadcast_to(o, dirs.shape)
    t, _, hit = _raycast(
        seq.objects, seq.background, origins.reshape(-1, 3), dirs.reshape(-1, 3), frame
    )
    t = t.reshape(dist.shape)
    hit = hit.reshape(dist.shape)
    # the ray re-hits the queried surface at t == dist unless something is in front
    return ok & hit & (t >= dist - _OCCLUSION_TOL)


def _in_bounds(pix: np.ndarray, height: int, width: int) -> np.ndarray:
    # open pixel-extent rectangle: a point is in view if its projection falls
    # strictly inside the image footprint
    x, y = pix[..., 0], pix[..., 1]
    return (x > -0.5) & (x < width - 0.5) & (y > -0.5) & (y < height - 0.5)


def _check_frame(seq: SceneSequence, frame: int):
    if not isinstance(frame, (int, np.integer)):
        raise ValueError("frame index must be an integer")
    if frame < 0 or frame >= seq.frame_count:
        raise ValueError(f"frame index {frame} out of range [0, {seq.frame_count})")


def generate_scene(config: SceneConfig) -> SceneSequence:
    """Build a fully deterministic scene sequence from a config.

    The same config always produces the bitwise-identical sequence (the RNG is
    counter-based and every op is plain numpy).
    """
    rng = np.random.Generator(np.random.Philox(config.seed))
    background = _sample_background(rng)
    objects = _sample_objects(config, rng)
    poses = _camera_path(config, rng)
    return assemble_scene(config, background, objects, poses, rng)


def assemble_scene(
    config: SceneConfig,
    background: HeightField,
    objects: list[SceneObject],
    poses: list[Pose],
    rng: np.random.Generator | None = None,
) -> SceneSequence:
    """Render a sequence from explicit components (for scenes with pinned
    objects or trajectories); generate_scene is the sampled front door.

    rng only drives track-query sampling; None derives one from config.seed.
    """
    if len(poses) != config.frame_count:
        raise ValueError("pose count must match frame_count")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(config.seed))

    zmin, _ = background.z_bounds
    for p in poses:
        if p.center[2] > zmin - 0.5:
            raise ValueError("camera path runs into the scene volume; lower camera_magnitude")

    h, w = config.height, config.width
    f = 1.25 * max(h, w)
    k = Intrinsics(fx=f, fy=f, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)
    intrinsics = [k] * config.frame_count

    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1)

    seq = SceneSequence(
        config=config,
        intrinsics=intrinsics,
        poses=poses,
        depths=[],
        dynamic_labels=np.zeros((config.frame_count, h, w), dtype=bool),
        objects=objects,
        background=background,
    )

    hit_world = np.zeros((config.frame_count, h, w, 3))
    hit_id = np.full((config.frame_count, h, w), -2, dtype=np.int32)
    hit_valid = np.zeros((config.frame_count, h, w), dtype=bool)
    dyn = np.array([o.dynamic for o in objects], dtype=bool)

    for t in range(config.frame_count):
        origins, dirs = _frame_rays(seq, t, pix)
        tpar, sid, hit = _raycast(objects, background, origins, dirs, t)
        depth = np.where(hit, tpar, 0.0).reshape(h, w)
        seq.depths.append(DepthMap(depth, hit.reshape(h, w)))
        hit_world[t] = (origins + tpar[:, None] * dirs).reshape(h, w, 3)
        hit_world[t][~hit.reshape(h, w)] = 0.0
        hit_id[t] = sid.reshape(h, w)
        hit_valid[t] = hit.reshape(h, w)
        if len(objects):
            on_obj = sid >= 0
            lab = np.zeros(len(sid), dtype=bool)
            lab[on_obj] = dyn[sid[on_obj]]
            seq.dynamic_labels[t] = lab.reshape(h, w)

    seq.hit_world = hit_world
    seq.hit_id = hit_id
    seq.hit_valid = hit_valid

    q = min(config.track_count, int(hit_valid[0].sum()))
    if q > 0:
        flat = np.flatnonzero(hit_valid[0].ravel())
        chosen = rng.choice(flat, size=q, replace=False)
        qy, qx = np.unravel_index(np.sort(chosen), (h, w))
        qpix = np.stack([qx, qy], axis=1).astype(np.int64)
        seq.tracks = build_tracks(seq, np.zeros(q, dtype=np.int64), qpix)
    else:
        seq.tracks = build_tracks(seq, np.zeros(0, dtype=np.int64), np.zeros((0, 2), np.int64))
    return seq


def build_tracks(seq: SceneSequence, query_frames: np.ndarray, query_pixels: np.ndarray) -> TrackSet:
    """Analytic 3D tracks for integer query pixels.

    Raises ValueError if a query pixel is out of bounds or hits no surface at
    its query frame.
    """
    qf = np.asarray(query_frames, dtype=np.int64)
    qp = np.asarray(query_pixels, dtype=np.int64)
    if qp.ndim != 2 or qp.shape[1] != 2 or qf.shape != (qp.shape[0],):
        raise ValueError("queries must be (Q,) frames and (Q, 2) pixels")
    h, w = seq.resolution
    tn = seq.frame_count
    q = qp.shape[0]
    world = np.zeros((q, tn, 3))
    camera = np.zeros((q, tn, 3))
    pixels = np.zeros((q, tn, 2))
    visible = np.zeros((q, tn), dtype=bool)

    for qi in range(q):
        f0 = int(qf[qi])
        _check_frame(seq, f0)
        x, y = int(qp[qi, 0]), int(qp[qi, 1])
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"query pixel ({x}, {y}) outside {w}x{h} image")
        if not seq.hit_valid[f0, y, x]:
            raise ValueError(f"query pixel ({x}, {y}) hits no surface at frame {f0}")
        w0 = seq.hit_world[f0, y, x]
        vel = seq.velocity_of(int(seq.hit_id[f0, y, x]))
        spans = np.arange(tn, dtype=np.float64) - f0
        world[qi] = w0[None, :] + spans[:, None] * vel[None, :]

    for t in range(tn):
        cam_t = seq.poses[t].apply(world[:, t, :])
        camera[:, t, :] = cam_t
        pix_t, pv = project_points(cam_t, seq.intrinsics[t])
        inb = pv & _in_bounds(pix_t, h, w)
        vis = _visible_from(seq, t, world[:, t, :]) if q else np.zeros(0, bool)
        visible[:, t] = inb & vis
        pixels[:, t, :] = np.where(visible[:, t, None], pix_t, 0.0)

    return TrackSet(qf.copy(), qp.copy(), world, camera, pixels, visible)


def _matched_kernel(
    seq: SceneSequence, i: int, j: int, zero_motion: bool
) -> tuple[Pointmap, np.ndarray, np.ndarray]:
    """P_i(W_j + span * v) over frame j's pixel grid; shared by both gt maps."""
    w_j = seq.hit_world[j]
    ids = seq.hit_id[j]
    valid = seq.hit_valid[j].copy()
    if zero_motion:
        w_i = w_j
    else:
        vel = np.zeros_like(w_j)
        for k, obj in enumerate(seq.objects):
            if obj.dynamic:
                vel[ids == k] = obj.velocity
        w_i = w_j + float(i - j) * vel
    cam = seq.poses[i].apply(w_i)
    return Pointmap(cam, valid), w_i, valid


def gt_pointmap_matching(seq: SceneSequence, i: int, j: int) -> Pointmap:
    """Ground-truth matching pointmap: frame j's pixels located in frame i's camera.

    Cell (x, y) holds the frame-i camera coordinates of the scene point seen at
    frame j's pixel (x, y), after that point moved with its object. Pixels whose
    point is occluded or out of view at frame i are invalid.
    """
    _check_frame(seq, i)
    _check_frame(seq, j)
    pm, w_i, valid = _matched_kernel(seq, i, j, zero_motion=False)
    h, wdt = seq.resolution
    pix, pv = project_points(pm.points, seq.intrinsics[i])
    inb = pv & _in_bounds(pix, h, wdt)
    vis = _visible_from(seq, i, w_i.reshape(-1, 3)).reshape(h, wdt)
    out_valid = valid & inb & vis
    pts = pm.points.copy()
    pts[~out_valid] = 0.0
    return Pointmap(pts, out_valid)


def gt_rigid_pointmap(seq: SceneSequence, i: int, j: int) -> Pointmap:
    """Static-world transport of frame j's pointmap into frame i's camera.

    Every scene point is treated as static, and no visibility filtering is
    applied: validity is frame j's own. Dynamic pixels therefore disagree with
    gt_pointmap_matching by exactly the object displacement.
    """
    _check_frame(seq, i)
    _check_frame(seq, j)
    pm, _, _ = _matched_kernel(seq, i, j, zero_motion=True)
    return pm


def dynamic_pixel_fraction(seq: SceneSequence) -> float:
    """Fraction of valid pixels on moving objects, over all frames."""
    tot = int(seq.hit_valid.sum())
    if tot == 0:
        raise EmptyDomainError("scene has no valid pixels")
    return float(seq.dynamic_labels[seq.hit_valid].sum()) / tot
