"""Dynamic-mask-aware global alignment of pairwise pointmap predictions.

Variables: per-frame camera-to-world pose (rotation vector + translation),
one log-scale per edge, and a free global pointmap per frame. The energy pulls
each frame's global pointmap toward every edge's evidence,

    E3d = sum_e sum_{v in {ii, ji}} sum_px conf * rho(chi_v - (R_i (s_e x) + t_i))

with rho a pseudo-Huber penalty, plus a 2D term tying static pixels to the
matched maps' projected correspondences,

    E2d = lambda_2d * sum_e sum_{static px} rho2(project(R_i^T (chi_j - t_i)) - F_e)

The per-edge scale acts on camera-frame points before the rigid map, so frame
translations stay world-metric and the trajectory reads off the variables
directly. Dynamic pixels (per-edge 3x-median mask) are excluded from the 2D
term: their matched correspondences encode object motion, not camera motion.

The solver is first-order with a Gauss-Newton diagonal preconditioner (the
IRLS curvature w*u per residual) and a backtracking line search, so the energy
trace is monotone. Frame 0's pose and the first edge's scale are pinned (gauge
freedom).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, EmptyDomainError
from .geometry import EPS_Z, Intrinsics, Pointmap, Pose
from .matching import DynamicMask, dynamic_mask
from .metrics import umeyama
from .pipelines import PairPrediction, Predictor

_SMALL_ANGLE = 1e-7


def _skew(w):
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def rodrigues(w: np.ndarray) -> np.ndarray:
    """Rotation vector -> matrix, with a Taylor branch near zero."""
    w = np.asarray(w, dtype=np.float64)
    th2 = float(w @ w)
    k = _skew(w)
    if th2 < _SMALL_ANGLE**2:
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
    else:
        th = np.sqrt(th2)
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / th2
    return np.eye(3) + a * k + b * (k @ k)


def rodrigues_jacobian(w: np.ndarray) -> np.ndarray:
    """dR/dw as a (3, 3, 3) array: [k] is the derivative w.r.t. w[k].

    Closed form for exp-map derivatives; first-order Taylor below the
    small-angle threshold. Finite-difference checked in the tests.
    """
    w = np.asarray(w, dtype=np.float64)
    th2 = float(w @ w)
    out = np.empty((3, 3, 3))
    if th2 < _SMALL_ANGLE**2:
        k = _skew(w)
        for idx in range(3):
            e = np.zeros(3)
            e[idx] = 1.0
            ek = _skew(e)
            out[idx] = ek + 0.5 * (ek @ k + k @ ek)
        return out
    r = rodrigues(w)
    eye = np.eye(3)
    for idx in range(3):
        e = eye[idx]
        v = np.cross(w, (eye - r) @ e)
        out[idx] = ((w[idx] * _skew(w) + _skew(v)) / th2) @ r
    return out


def rotation_log(r: np.ndarray) -> np.ndarray:
    """Rotation matrix -> rotation vector (inverse of rodrigues)."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    th = float(np.arccos(tr))
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if th < _SMALL_ANGLE:
        return vee
    if th > np.pi - 1e-5:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        b = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(b), 0.0))
        k = int(np.argmax(axis))
        if axis[k] > 0:
            axis = b[:, k] / axis[k]
            axis /= np.linalg.norm(axis)
        if np.dot(axis, vee) < 0:
            axis = -axis
        return th * axis
    return (th / np.sin(th)) * vee


@dataclass
class AlignmentEdge:
    i: int
    j: int
    pred: PairPrediction
    mask: DynamicMask | None


@dataclass
class AlignmentProblem:
    """Frames, intrinsics, pairwise predictions and per-edge dynamic masks."""

    frames: list[int]
    intrinsics: list[Intrinsics]
    edges: list[AlignmentEdge]
    ego_maps: list[Pointmap]

    def __post_init__(self):
        n = len(self.frames)
        if len(self.intrinsics) != n or len(self.ego_maps) != n:
            raise ValueError("per-frame lists must match the frame count")
        for e in self.edges:
            if not (0 <= e.i < n and 0 <= e.j < n and e.i != e.j):
                raise ValueError("edge endpoints out of range")
        if n > 1 and not self._connected():
            raise ValueError("pair graph is disconnected")

    def _connected(self) -> bool:
        n = len(self.frames)
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for e in self.edges:
            ra, rb = find(e.i), find(e.j)
            parent[ra] = rb
        return len({find(f) for f in range(n)}) == 1


def build_pair_graph(seq, predictor: Predictor, stride: int = 5) -> AlignmentProblem:
    """Edges for all frame gaps 1..stride+1 (a symmetric sliding window).

    A stride at or beyond the sequence length degrades to adjacent-only.
    Each edge carries the pair prediction (view1 = earlier frame) and the
    dynamic mask thresholded from its matched-vs-rigid residuals; pairs with
    no co-visible pixels get an empty mask.
    """
    length = seq.frame_count
    if stride < 1:
        raise ValueError("stride must be >= 1")
    max_gap = 1 if stride >= length else stride + 1
    edges = []
    for i in range(length):
        for j in range(i + 1, min(i + max_gap, length - 1) + 1):
            pred = predictor.predict(i, j)
            try:
                mask = dynamic_mask(pred.x_ji_matched, pred.x_ji)
            except EmptyDomainError:
                mask = None
            edges.append(AlignmentEdge(i=i, j=j, pred=pred, mask=mask))
    ego = [predictor.predict(f, f).x_ii for f in range(length)]
    return AlignmentProblem(
        frames=list(range(length)),
        intrinsics=list(seq.intrinsics),
        edges=edges,
        ego_maps=ego,
    )


@dataclass
class AlignmentVariables:
    """Optimization state: c2w poses, per-edge log scales, global pointmaps."""

    rotvecs: np.ndarray  # (F, 3)
    translations: np.ndarray  # (F, 3)
    log_scales: np.ndarray  # (E,)
    pointmaps: np.ndarray  # (F, H, W, 3)

    def copy(self) -> "AlignmentVariables":
        return AlignmentVariables(
            self.rotvecs.copy(),
            self.translations.copy(),
            self.log_scales.copy(),
            self.pointmaps.copy(),
        )


_VAR_FIELDS = ("rotvecs", "translations", "log_scales", "pointmaps")


@dataclass
class AlignmentOptions:
    max_iters: int = 200
    tol: float = 1e-6  # relative improvement; three flat steps stop the run
    abs_tol: float = 1e-14  # energy below this is a solved problem
    lambda_2d: float = 0.01
    use_dynamic_mask: bool = True
    huber_delta: float = 1e-6
    init: str = "pairwise"  # or "identity"
    init_step: float = 1.0  # in units of the preconditioned (Newton-ish) step


@dataclass
class AlignmentResult:
    poses: list[Pose]  # world-to-camera
    scales: np.ndarray  # per edge
    pointmaps: list[Pointmap]  # aligned global maps, validity from ego maps
    energy_trace: list[float]
    converged: bool
    iterations: int
    variables: AlignmentVariables


@dataclass
class _EdgePre:
    """Flattened per-edge arrays the energy loops over."""

    i: int
    j: int
    edge_index: int
    idx_ii: np.ndarray
    pts_ii: np.ndarray
    w_ii: np.ndarray
    idx_ji: np.ndarray
    pts_ji: np.ndarray
    w_ji: np.ndarray
    idx_2d: np.ndarray
    f_2d: np.ndarray
    fx: float
    fy: float


def _prepare(problem: AlignmentProblem, opts: AlignmentOptions) -> list[_EdgePre]:
    pres = []
    for ei, e in enumerate(problem.edges):
        k = problem.intrinsics[e.i]
        pred = e.pred
        sel_ii = pred.x_ii.valid.ravel()
        sel_ji = pred.x_ji.valid.ravel()
        m = pred.x_ji_matched
        sel_2d = m.valid & (m.points[..., 2] > EPS_Z)
        if opts.use_dynamic_mask and e.mask is not None:
            sel_2d = sel_2d & ~e.mask.mask
        pts_m = m.points[sel_2d]
        f_2d = np.stack(
            [
                k.fx * pts_m[:, 0] / pts_m[:, 2] + k.cx,
                k.fy * pts_m[:, 1] / pts_m[:, 2] + k.cy,
            ],
            axis=1,
        )
        pres.append(
            _EdgePre(
                i=e.i,
                j=e.j,
                edge_index=ei,
                idx_ii=np.flatnonzero(sel_ii),
                pts_ii=pred.x_ii.points.reshape(-1, 3)[sel_ii],
                w_ii=pred.conf_ii.values.ravel()[sel_ii],
                idx_ji=np.flatnonzero(sel_ji),
                pts_ji=pred.x_ji.points.reshape(-1, 3)[sel_ji],
                w_ji=pred.conf_ji.values.ravel()[sel_ji],
                idx_2d=np.flatnonzero(sel_2d.ravel()),
                f_2d=f_2d,
                fx=k.fx,
                fy=k.fy,
            )
        )
    return pres


def _energy_and_grad(
    problem: AlignmentProblem,
    pres: list[_EdgePre],
    v: AlignmentVariables,
    opts: AlignmentOptions,
    want_grad: bool = True,
):
    n_frames = len(problem.frames)
    delta = opts.huber_delta
    rot = [rodrigues(v.rotvecs[f]) for f in range(n_frames)]
    jac = [rodrigues_jacobian(v.rotvecs[f]) for f in range(n_frames)] if want_grad else None
    scales = np.exp(v.log_scales)
    flat_maps = v.pointmaps.reshape(n_frames, -1, 3)

    energy = 0.0
    g = curv = None
    if want_grad:
        g = AlignmentVariables(
            np.zeros_like(v.rotvecs),
            np.zeros_like(v.translations),
            np.zeros_like(v.log_scales),
            np.zeros_like(v.pointmaps),
        )
        curv = AlignmentVariables(
            np.zeros_like(v.rotvecs),
            np.zeros_like(v.translations),
            np.zeros_like(v.log_scales),
            np.zeros_like(v.pointmaps),
        )
    g_maps = g.pointmaps.reshape(n_frames, -1, 3) if want_grad else None
    c_maps = curv.pointmaps.reshape(n_frames, -1, 3) if want_grad else None

    for pre in pres:
        r_i = rot[pre.i]
        t_i = v.translations[pre.i]
        s = scales[pre.edge_index]
        for idx, pts, w, fidx in (
            (pre.idx_ii, pre.pts_ii, pre.w_ii, pre.i),
            (pre.idx_ji, pre.pts_ji, pre.w_ji, pre.j),
        ):
            if idx.size == 0:
                continue
            mapped_local = pts @ r_i.T
            mapped = s * mapped_local + t_i
            chi = flat_maps[fidx][idx]
            r = chi - mapped
            # overflow to inf is fine here, the divergence check owns that case
            with np.errstate(over="ignore"):
                root = np.sqrt((r * r).sum(axis=1) + delta * delta)
            energy += float((w * (root - delta)).sum())
            if want_grad:
                wu = w / root
                gr = wu[:, None] * r
                g_maps[fidx][idx] += gr
                g.translations[pre.i] -= gr.sum(axis=0)
                g.log_scales[pre.edge_index] -= float((gr * mapped_local).sum()) * s
                sx = s * pts
                c_maps[fidx][idx] += wu[:, None]
                curv.translations[pre.i] += wu.sum()
                curv.log_scales[pre.edge_index] += float(
                    (wu * (s * s) * (pts * pts).sum(axis=1)).sum()
                )
                for axis in range(3):
                    dmap = sx @ jac[pre.i][axis].T
                    g.rotvecs[pre.i, axis] -= float((gr * dmap).sum())
                    curv.rotvecs[pre.i, axis] += float(
                        (wu * (dmap * dmap).sum(axis=1)).sum()
                    )
        if opts.lambda_2d > 0 and pre.idx_2d.size:
            d = flat_maps[pre.j][pre.idx_2d] - t_i
            y = d @ r_i  # R_i^T d, row form
            z = y[:, 2]
            ok = z > EPS_Z
            if not ok.any():
                continue
            yv, dv = y[ok], d[ok]
            zv = yv[:, 2]
            k_i = problem.intrinsics[pre.i]
            r2 = np.stack(
                [
                    pre.fx * yv[:, 0] / zv + k_i.cx,
                    pre.fy * yv[:, 1] / zv + k_i.cy,
                ],
                axis=1,
            )
            r2 -= pre.f_2d[ok]
            root2 = np.sqrt((r2 * r2).sum(axis=1) + delta * delta)
            energy += opts.lambda_2d * float((root2 - delta).sum())
            if want_grad:
                wu2 = opts.lambda_2d / root2
                gr2 = wu2[:, None] * r2
                # rows of the projection jacobian d(pix)/dy
                ju = np.zeros_like(yv)
                ju[:, 0] = pre.fx / zv
                ju[:, 2] = -pre.fx * yv[:, 0] / (zv * zv)
                jw = np.zeros_like(yv)
                jw[:, 1] = pre.fy / zv
                jw[:, 2] = -pre.fy * yv[:, 1] / (zv * zv)
                gy = gr2[:, 0:1] * ju + gr2[:, 1:2] * jw
                g_chi = gy @ r_i.T
                sub = np.zeros((pre.idx_2d.size, 3))
                sub[ok] = g_chi
                g_maps[pre.j][pre.idx_2d] += sub
                g.translations[pre.i] -= g_chi.sum(axis=0)
                ju_w = ju @ r_i.T
                jw_w = jw @ r_i.T
                c_chi = wu2[:, None] * (ju_w * ju_w + jw_w * jw_w)
                csub = np.zeros((pre.idx_2d.size, 3))
                csub[ok] = c_chi
                c_maps[pre.j][pre.idx_2d] += csub
                curv.translations[pre.i] += c_chi.sum(axis=0)
                for axis in range(3):
                    dy = dv @ jac[pre.i][axis]
                    g.rotvecs[pre.i, axis] += float((gy * dy).sum())
                    jr_u = (ju * dy).sum(axis=1)
                    jr_w = (jw * dy).sum(axis=1)
                    curv.rotvecs[pre.i, axis] += float(
                        (wu2 * (jr_u * jr_u + jr_w * jr_w)).sum()
                    )
    return energy, g, curv


def _chi_mm_update(
    problem: AlignmentProblem,
    pres: list[_EdgePre],
    v: AlignmentVariables,
    scales: np.ndarray,
) -> np.ndarray:
    """One majorize-minimize step on the pointmap block.

    For fixed poses and scales each pixel's 3D terms admit the IRLS update
    chi = sum(u m) / sum(u) with u = w / sqrt(|chi - m|^2 + delta^2), which
    cannot increase the 3D energy. The 2D term is ignored here; the caller
    keeps the step only if the total energy went down.
    """
    n_frames = len(problem.frames)
    flat = v.pointmaps.reshape(n_frames, -1, 3)
    num = np.zeros_like(flat)
    den = np.zeros((n_frames, flat.shape[1], 1))
    delta = 1e-6
    for pre in pres:
        r_i = rodrigues(v.rotvecs[pre.i])
        t_i = v.translations[pre.i]
        s = scales[pre.edge_index]
        for idx, pts, w, fidx in (
            (pre.idx_ii, pre.pts_ii, pre.w_ii, pre.i),
            (pre.idx_ji, pre.pts_ji, pre.w_ji, pre.j),
        ):
            if idx.size == 0:
                continue
            m = s * (pts @ r_i.T) + t_i
            r = flat[fidx][idx] - m
            u = w / np.sqrt((r * r).sum(axis=1) + delta * delta)
            num[fidx][idx] += u[:, None] * m
            den[fidx][idx] += u[:, None]
    out = v.pointmaps.copy().reshape(n_frames, -1, 3)
    hit = den[..., 0] > 0
    out[hit] = num[hit] / den[hit]
    return out.reshape(v.pointmaps.shape)


def _pose_mm_update(
    problem: AlignmentProblem,
    pres: list[_EdgePre],
    v: AlignmentVariables,
    scales: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted-Kabsch update of every non-gauge pose under the IRLS majorant.

    Each energy term involves exactly one pose (the edge's view1), so given
    pointmaps and scales the pose blocks separate per frame and the majorant
    minimizer is a weighted Procrustes fit of s*x onto the gathered chi.
    """
    n = len(problem.frames)
    flat = v.pointmaps.reshape(n, -1, 3)
    delta = 1e-6
    src: list[list[np.ndarray]] = [[] for _ in range(n)]
    dst: list[list[np.ndarray]] = [[] for _ in range(n)]
    wgt: list[list[np.ndarray]] = [[] for _ in range(n)]
    for pre in pres:
        r_i = rodrigues(v.rotvecs[pre.i])
        t_i = v.translations[pre.i]
        s = scales[pre.edge_index]
        for idx, pts, w, fidx in (
            (pre.idx_ii, pre.pts_ii, pre.w_ii, pre.i),
            (pre.idx_ji, pre.pts_ji, pre.w_ji, pre.j),
        ):
            if idx.size == 0:
                continue
            a = s * pts
            b = flat[fidx][idx]
            r = b - (a @ r_i.T + t_i)
            u = w / np.sqrt((r * r).sum(axis=1) + delta * delta)
            src[pre.i].append(a)
            dst[pre.i].append(b)
            wgt[pre.i].append(u)
    rot_out = v.rotvecs.copy()
    tr_out = v.translations.copy()
    for f in range(1, n):  # frame 0 carries the gauge
        if not src[f]:
            continue
        a = np.vstack(src[f])
        b = np.vstack(dst[f])
        u = np.concatenate(wgt[f])
        usum = float(u.sum())
        if usum <= 0:
            continue
        abar = (u[:, None] * a).sum(axis=0) / usum
        bbar = (u[:, None] * b).sum(axis=0) / usum
        h = (u[:, None] * (a - abar)).T @ (b - bbar)
        uu, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ uu.T))
        r_new = vt.T @ np.diag([1.0, 1.0, d]) @ uu.T
        rot_out[f] = rotation_log(r_new)
        tr_out[f] = bbar - r_new @ abar
    return rot_out, tr_out


def _scale_mm_update(
    problem: AlignmentProblem, pres: list[_EdgePre], v: AlignmentVariables
) -> np.ndarray:
    """Closed-form per-edge scale update under the IRLS majorant."""
    n = len(problem.frames)
    flat = v.pointmaps.reshape(n, -1, 3)
    delta = 1e-6
    out = v.log_scales.copy()
    scales = np.exp(v.log_scales)
    for pre in pres:
        if pre.edge_index == 0:
            continue  # gauge edge stays at scale 1
        r_i = rodrigues(v.rotvecs[pre.i])
        t_i = v.translations[pre.i]
        s = scales[pre.edge_index]
        num = den = 0.0
        for idx, pts, w, fidx in (
            (pre.idx_ii, pre.pts_ii, pre.w_ii, pre.i),
            (pre.idx_ji, pre.pts_ji, pre.w_ji, pre.j),
        ):
            if idx.size == 0:
                continue
            rx = pts @ r_i.T
            b = flat[fidx][idx] - t_i
            r = b - s * rx
            u = w / np.sqrt((r * r).sum(axis=1) + delta * delta)
            num += float((u * (b * rx).sum(axis=1)).sum())
            den += float((u * (rx * rx).sum(axis=1)).sum())
        # a non-positive fit would flip the map through the origin; keep s
        if den > 0 and num > 0:
            out[pre.edge_index] = float(np.log(num / den))
    return out


def _pose_scale_gauss_newton(
    problem: AlignmentProblem,
    pres: list[_EdgePre],
    v: AlignmentVariables,
    opts: AlignmentOptions,
    lm_damping: float,
) -> AlignmentVariables | None:
    """One damped Gauss-Newton step on poses and scales with maps fixed.

    Narrow-field scenes couple each edge's scale with the camera's forward
    translation into a long flat valley; first-order steps crawl through it,
    the GN normal system (a few dozen unknowns) crosses it directly. Uses the
    IRLS weights of the robust kernel, so the solved system is the curvature
    of the current majorant. Returns the stepped candidate (caller guards the
    energy) or None if the system cannot be solved.
    """
    n = len(problem.frames)
    n_edges = len(v.log_scales)
    dim = 6 * (n - 1) + max(n_edges - 1, 0)
    if dim == 0:
        return None
    delta = opts.huber_delta
    flat_maps = v.pointmaps.reshape(n, -1, 3)
    rot = [rodrigues(v.rotvecs[f]) for f in range(n)]
    jac = [rodrigues_jacobian(v.rotvecs[f]) for f in range(n)]
    scales = np.exp(v.log_scales)
    h = np.zeros((dim, dim))
    g = np.zeros(dim)

    def frame_cols(f):
        return 6 * (f - 1)

    def edge_col(e):
        return 6 * (n - 1) + (e - 1)

    for pre in pres:
        r_i = rot[pre.i]
        t_i = v.translations[pre.i]
        s = scales[pre.edge_index]
        cols = []
        if pre.i >= 1:
            base = frame_cols(pre.i)
            cols.extend(range(base, base + 6))
        has_scale = pre.edge_index >= 1
        if has_scale:
            cols.append(edge_col(pre.edge_index))
        if not cols:
            continue
        for idx, pts, w, fidx in (
            (pre.idx_ii, pre.pts_ii, pre.w_ii, pre.i),
            (pre.idx_ji, pre.pts_ji, pre.w_ji, pre.j),
        ):
            if idx.size == 0:
                continue
            mapped_local = pts @ r_i.T
            r = flat_maps[fidx][idx] - (s * mapped_local + t_i)
            u = w / np.sqrt((r * r).sum(axis=1) + delta * delta)
            jcols = []
            if pre.i >= 1:
                sx = s * pts
                for axis in range(3):
                    jcols.append(-(sx @ jac[pre.i][axis].T))
                eye = np.eye(3)
                for axis in range(3):
                    jcols.append(np.broadcast_to(-eye[axis], r.shape))
            if has_scale:
                jcols.append(-s * mapped_local)
            jmat = np.stack(jcols, axis=2)  # (N, 3, C)
            h_local = np.einsum("n,nac,nad->cd", u, jmat, jmat)
            g_local = np.einsum("n,nac,na->c", u, jmat, r)
            ix = np.asarray(cols)
            h[np.ix_(ix, ix)] += h_local
            g[ix] += g_local
        if opts.lambda_2d > 0 and pre.idx_2d.size and pre.i >= 1:
            d = flat_maps[pre.j][pre.idx_2d] - t_i
            y = d @ r_i
            ok = y[:, 2] > EPS_Z
            if not ok.any():
                continue
            yv, dv = y[ok], d[ok]
            zv = yv[:, 2]
            k_i = problem.intrinsics[pre.i]
            r2 = np.stack(
                [
                    pre.fx * yv[:, 0] / zv + k_i.cx,
                    pre.fy * yv[:, 1] / zv + k_i.cy,
                ],
                axis=1,
            ) - pre.f_2d[ok]
            u2 = opts.lambda_2d / np.sqrt((r2 * r2).sum(axis=1) + delta * delta)
            ju = np.zeros_like(yv)
            ju[:, 0] = pre.fx / zv
            ju[:, 2] = -pre.fx * yv[:, 0] / (zv * zv)
            jw = np.zeros_like(yv)
            jw[:, 1] = pre.fy / zv
            jw[:, 2] = -pre.fy * yv[:, 1] / (zv * zv)
            jcols2 = []
            for axis in range(3):
                dy = dv @ jac[pre.i][axis]
                jcols2.append(np.stack([(ju * dy).sum(1), (jw * dy).sum(1)], axis=1))
            for axis in range(3):
                # dy/dt = -R^T e_axis
                dyt = -r_i[axis]
                jcols2.append(
                    np.stack([ju @ dyt, jw @ dyt], axis=1)
                )
            jmat2 = np.stack(jcols2, axis=2)  # (M, 2, 6)
            base = frame_cols(pre.i)
            ix = np.arange(base, base + 6)
            h[np.ix_(ix, ix)] += np.einsum("n,nac,nad->cd", u2, jmat2, jmat2)
            g[ix] += np.einsum("n,nac,na->c", u2, jmat2, r2)

    h[np.diag_indices_from(h)] += lm_damping * (np.diag(h) + 1e-12)
    try:
        step = np.linalg.solve(h, -g)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(step)):
        return None
    cand = v.copy()
    for f in range(1, n):
        base = frame_cols(f)
        cand.rotvecs[f] += step[base : base + 3]
        cand.translations[f] += step[base + 3 : base + 6]
    for e in range(1, n_edges):
        cand.log_scales[e] += step[edge_col(e)]
    return cand


def alignment_energy(
    problem: AlignmentProblem, v: AlignmentVariables, options: AlignmentOptions | None = None
) -> float:
    """Total energy of a variable assignment (no gradients)."""
    opts = options or AlignmentOptions()
    pres = _prepare(problem, opts)
    energy, _, _ = _energy_and_grad(problem, pres, v, opts, want_grad=False)
    return energy


def _init_identity(problem: AlignmentProblem) -> AlignmentVariables:
    n = len(problem.frames)
    h, w = problem.ego_maps[0].resolution
    v = AlignmentVariables(
        rotvecs=np.zeros((n, 3)),
        translations=np.zeros((n, 3)),
        log_scales=np.zeros(len(problem.edges)),
        pointmaps=np.zeros((n, h, w, 3)),
    )
    for f in range(n):
        v.pointmaps[f] = problem.ego_maps[f].points
    return v


def _init_pairwise(problem: AlignmentProblem, opts: AlignmentOptions) -> AlignmentVariables:
    """Spanning-tree initialization from per-edge similarity fits.

    Each edge's (x_jj, x_ji) correspondence gives a cam_j -> cam_i similarity
    (Kabsch/Umeyama); BFS from frame 0 accumulates poses and per-frame scales,
    then edge scales and global maps are seeded consistently.
    """
    n = len(problem.frames)
    v = _init_identity(problem)
    if not problem.edges:
        return v

    rel: dict[tuple[int, int], tuple[float, np.ndarray, np.ndarray]] = {}
    for e in problem.edges:
        ego_j = problem.ego_maps[e.j]
        joint = ego_j.valid & e.pred.x_ji.valid
        if int(joint.sum()) < 3:
            continue
        src = ego_j.points[joint]
        dst = e.pred.x_ji.points[joint]
        try:
            s, r, t = umeyama(src, dst, with_scale=True)
        except EmptyDomainError:
            continue
        rel[(e.i, e.j)] = (s, r, t)

    rot = [np.eye(3) for _ in range(n)]
    cen = [np.zeros(3) for _ in range(n)]
    kappa = np.ones(n)
    seen = {0}
    frontier = [0]
    adj: dict[int, list[tuple[int, int, int]]] = {f: [] for f in range(n)}
    for e in problem.edges:
        adj[e.i].append((e.j, e.i, e.j))
        adj[e.j].append((e.i, e.i, e.j))
    while frontier:
        f = frontier.pop(0)
        for nxt, i, j in adj[f]:
            if nxt in seen or (i, j) not in rel:
                continue
            s, r, t = rel[(i, j)]
            if f == i:
                # child j: x_i = s r x_j + t, world map W_j = W_i o M
                rot[nxt] = rot[f] @ r
                cen[nxt] = kappa[f] * (rot[f] @ t) + cen[f]
                kappa[nxt] = kappa[f] * s
            else:
                # child i: invert the edge map
                rot[nxt] = rot[f] @ r.T
                cen[nxt] = cen[f] - (kappa[f] / s) * (rot[f] @ r.T @ t)
                kappa[nxt] = kappa[f] / s
            seen.add(nxt)
            frontier.append(nxt)

    for f in range(n):
        v.rotvecs[f] = rotation_log(rot[f])
        v.translations[f] = cen[f]
    for ei, e in enumerate(problem.edges):
        v.log_scales[ei] = float(np.log(max(kappa[e.i], 1e-12)))
    # gauge: normalize the first edge's scale to exactly 1
    shift = v.log_scales[0]
    if abs(shift) > 0:
        v.log_scales -= shift
        v.translations *= np.exp(-shift)
        kappa *= np.exp(-shift)

    h, w = problem.ego_maps[0].resolution
    num = np.zeros((n, h * w, 3))
    den = np.zeros((n, h * w, 1))
    scales = np.exp(v.log_scales)
    for ei, e in enumerate(problem.edges):
        r_i = rot[e.i]
        t_i = v.translations[e.i]
        s = scales[ei]
        for pm, conf, fidx in (
            (e.pred.x_ii, e.pred.conf_ii, e.i),
            (e.pred.x_ji, e.pred.conf_ji, e.j),
        ):
            sel = pm.valid.ravel()
            if not sel.any():
                continue
            pts = pm.points.reshape(-1, 3)[sel]
            wgt = conf.values.ravel()[sel][:, None]
            num[fidx][sel] += wgt * (s * (pts @ r_i.T) + t_i)
            den[fidx][sel] += wgt
    for f in range(n):
        base = kappa[f] * (problem.ego_maps[f].points.reshape(-1, 3) @ rot[f].T) + cen[f]
        filled = den[f][:, 0] > 0
        chi = base
        chi[filled] = num[f][filled] / den[f][filled]
        v.pointmaps[f] = chi.reshape(h, w, 3)
    return v


def global_align(
    problem: AlignmentProblem, options: AlignmentOptions | None = None
) -> AlignmentResult:
    """Jointly optimize poses, edge scales and global maps; monotone energy.

    AdaGrad-preconditioned gradient descent with a backtracking (Armijo) line
    search; frame 0's pose and edge 0's log-scale are held at the gauge.
    Raises DivergenceError if the energy ever goes non-finite.
    """
    opts = options or AlignmentOptions()
    n = len(problem.frames)
    if n == 0:
        raise ValueError("empty problem")
    if opts.init not in ("pairwise", "identity"):
        raise ValueError("init must be pairwise or identity")
    pres = _prepare(problem, opts)
    v = _init_pairwise(problem, opts) if opts.init == "pairwise" else _init_identity(problem)

    energy, _, _ = _energy_and_grad(problem, pres, v, opts, want_grad=False)
    if not np.isfinite(energy):
        raise DivergenceError("initial energy is non-finite", trace=[energy])
    trace = [energy]
    lam = opts.init_step
    lm_damping = 1e-3
    iters = 0
    converged = not problem.edges or energy < opts.abs_tol
    flat_tol_hits = 0

    while not converged and iters < opts.max_iters:
        e_before = trace[-1]
        e_cur = e_before
        v_begin = v.copy()

        def attempt(cand):
            nonlocal v, e_cur
            e_new, _, _ = _energy_and_grad(problem, pres, cand, opts, want_grad=False)
            if np.isfinite(e_new) and e_new < e_cur:
                v = cand
                e_cur = e_new

        # block-coordinate IRLS sweeps, each kept only if the energy drops
        cand = v.copy()
        cand.pointmaps = _chi_mm_update(problem, pres, v, np.exp(v.log_scales))
        attempt(cand)
        cand = v.copy()
        cand.rotvecs, cand.translations = _pose_mm_update(
            problem, pres, v, np.exp(v.log_scales)
        )
        attempt(cand)
        cand = v.copy()
        cand.log_scales = _scale_mm_update(problem, pres, v)
        attempt(cand)

        # damped Gauss-Newton on the pose/scale block (maps held fixed)
        for _ in range(4):
            cand = _pose_scale_gauss_newton(problem, pres, v, opts, lm_damping)
            if cand is None:
                break
            e_prev = e_cur
            attempt(cand)
            if e_cur < e_prev:
                lm_damping = max(lm_damping * 0.3, 1e-9)
                break
            lm_damping = min(lm_damping * 10.0, 1e8)

        # let the maps catch up with the stepped poses
        cand = v.copy()
        cand.pointmaps = _chi_mm_update(problem, pres, v, np.exp(v.log_scales))
        attempt(cand)

        # preconditioned gradient step with backtracking picks up the rest
        e0, g, curv = _energy_and_grad(problem, pres, v, opts, want_grad=True)
        g.rotvecs[0] = 0.0
        g.translations[0] = 0.0
        if g.log_scales.size:
            g.log_scales[0] = 0.0
        gnorm2 = 0.0
        for name in _VAR_FIELDS:
            ga = getattr(g, name)
            gnorm2 += float((ga * ga).sum())
        accepted = False
        if gnorm2 > 1e-32:
            direction = AlignmentVariables(
                g.rotvecs / (curv.rotvecs + 1e-12),
                g.translations / (curv.translations + 1e-12),
                g.log_scales / (curv.log_scales + 1e-12),
                g.pointmaps / (curv.pointmaps + 1e-12),
            )
            slope = 0.0
            for name in _VAR_FIELDS:
                slope += float((getattr(g, name) * getattr(direction, name)).sum())
            step = lam
            for _ in range(30):
                cand = v.copy()
                for name in _VAR_FIELDS:
                    getattr(cand, name)[...] -= step * getattr(direction, name)
                e_new, _, _ = _energy_and_grad(problem, pres, cand, opts, want_grad=False)
                if np.isfinite(e_new) and e_new <= e0 - 1e-4 * step * slope:
                    v = cand
                    e_cur = e_new
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                lam = min(step * 1.3, 4.0)

        # extrapolate along the iteration's net displacement; the sweeps
        # zigzag through the scale/map valley and this jumps down it
        if e_cur < e_before:
            for beta in (8.0, 3.0, 1.0):
                cand = v.copy()
                for name in _VAR_FIELDS:
                    getattr(cand, name)[...] += beta * (
                        getattr(v, name) - getattr(v_begin, name)
                    )
                e_prev = e_cur
                attempt(cand)
                if e_cur < e_prev:
                    break

        iters += 1
        if e_cur < e_before:
            trace.append(e_cur)
        rel = (e_before - e_cur) / max(e_before, 1e-30)
        if rel < opts.tol or e_cur < opts.abs_tol:
            flat_tol_hits += 1
            if flat_tol_hits >= 3 or e_cur < opts.abs_tol or not accepted:
                converged = True
        else:
            flat_tol_hits = 0

    if not np.isfinite(trace[-1]):
        raise DivergenceError("alignment energy went non-finite", trace=trace)

    # Cameras are read off the aligned maps: registering each ego map onto
    # its global map by a similarity gives every frame a pose, including
    # frames that never serve as an edge's reference view.
    poses = []
    for f in range(n):
        ego = problem.ego_maps[f]
        sel = ego.valid
        r_c2w = rodrigues(v.rotvecs[f])
        center = v.translations[f]
        if problem.edges and int(sel.sum()) >= 3:
            try:
                _, r_fit, t_fit = umeyama(
                    ego.points[sel], v.pointmaps[f][sel], with_scale=True
                )
                r_c2w, center = r_fit, t_fit
            except EmptyDomainError:
                pass
        poses.append(Pose(r_c2w.T, -r_c2w.T @ center))
    maps = [
        Pointmap(v.pointmaps[f], problem.ego_maps[f].valid) for f in range(n)
    ]
    return AlignmentResult(
        poses=poses,
        scales=np.exp(v.log_scales),
        pointmaps=maps,
        energy_trace=trace,
        converged=converged,
        iterations=iters,
        variables=v,
    )


def extract_trajectory(result: AlignmentResult) -> list[Pose]:
    """World-to-camera poses of the aligned sequence, frame order."""
    return list(result.poses)
