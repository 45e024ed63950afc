"""Double-layer sliding-window estimator.

The short window holds full keyframe states and inverse-depth landmarks and is
constrained by IMU, vision and marginalization-prior factors. The long window
holds positions of frames that carried an anchor range after they left the
short window. Each long-window pose keeps its ranging residual plus relative
links to the next ``link_horizon`` ranged poses, with the link measurement
taken from the short-window estimate at the moment the pose was promoted.
Ranged frames still inside the short window contribute their ranging residual
directly on the keyframe position.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial.distance import pdist

from . import geom, preint
from .config import EstimatorConfig
from .factors import (AnchorEstimate, Intrinsics, PriorFactor, pseudo_huber, range_residuals,
                      robust_weight, schur_marginalize, vision_residuals)
from .preint import ImuNoise, PreintegratedImu
from .sim import RangeMeasurement
from .state import RobotState

log = logging.getLogger(__name__)


class EstimatorError(RuntimeError):
    pass


@dataclass
class Frame:
    id: int
    state: RobotState
    obs: dict
    range: RangeMeasurement | None = None
    preint: PreintegratedImu | None = None  # from the previous short-window frame
    is_keyframe: bool = True
    sqrt_info: np.ndarray | None = None


@dataclass
class Landmark:
    id: int
    anchor: int  # frame id of the first observation in the window
    uv: np.ndarray
    inv_depth: float


@dataclass
class LongWindowPose:
    frame_id: int
    stamp: float
    p: np.ndarray
    range: RangeMeasurement
    links: dict = field(default_factory=dict)  # target frame id -> cached VIO delta


@dataclass
class WindowGraph:
    frames: list = field(default_factory=list)
    landmarks: dict = field(default_factory=dict)
    long_window: list = field(default_factory=list)
    anchor: AnchorEstimate | None = None
    prior: PriorFactor | None = None


@dataclass
class OptimizeReport:
    iterations: int = 0
    accepted: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    diverged: bool = False
    costs: dict = field(default_factory=dict)
    cost_history: list = field(default_factory=list)


@dataclass
class _Values:
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    ba: np.ndarray
    bw: np.ndarray
    lam: np.ndarray
    omega: np.ndarray
    anchor: np.ndarray | None


def normal_equations(groups, n, cache=None):
    """Accumulate ``H = J^T J`` and ``g = J^T r`` from factor groups.

    ``cache`` (a dict) keeps the scatter indices between calls with the same
    group structure.
    """
    if cache is not None and "hi" in cache:
        hi, gi = cache["hi"], cache["gi"]
    else:
        hi = np.concatenate([(cols[:, :, None] * n + cols[:, None, :]).ravel() for cols, _, _ in groups])
        gi = np.concatenate([cols.ravel() for cols, _, _ in groups])
        if cache is not None:
            cache["hi"], cache["gi"] = hi, gi
    hv, gv = [], []
    for cols, J, r in groups:
        Jt = np.swapaxes(J, 1, 2)
        hv.append((Jt @ J).ravel())
        gv.append((Jt @ r[:, :, None]).ravel())
    H = np.bincount(hi, weights=np.concatenate(hv), minlength=n * n)
    g = np.bincount(gi, weights=np.concatenate(gv), minlength=n)
    return H.reshape(n, n), g


class DampedSolver:
    """Solve ``(H + lam diag(H)) dx = -g`` for a sequence of damping values.

    The columns split into ``[dense | banded | scalar]`` at ``o`` and ``m``;
    ``band`` is the number of nonzero superdiagonals of the banded block.
    The scalar block (landmark inverse depths) has a diagonal Hessian and the
    banded one (long-window positions) a narrow band; both are eliminated by
    Schur complements before a dense Cholesky solve. ``solve`` raises
    ``LinAlgError`` if a reduced system is not positive definite.
    """

    def __init__(self, H, g, m, o=None, band=None):
        o = m if o is None else o
        band = (m - o) if band is None else band
        self.o, self.m, self.g = o, m, g
        self.D = np.maximum(np.diag(H), 1e-9)
        self.A = H[:o, :o]
        self.B = H[:o, m:]  # inverse depths only touch the dense block
        self.hc = np.diag(H)[m:]
        self.E = H[o:m, o:m]
        if m > o:
            self.u = min(band, len(self.E) - 1)
            C = H[o:m, :o]
            self.nzc = np.flatnonzero(np.any(C != 0, axis=0))
            self.C = C[:, self.nzc]

    def _banded_solve(self, lam, rhs):
        E = self.E
        k = len(E)
        u = self.u
        ab = np.zeros((u + 1, k))
        for d in range(u + 1):
            ab[u - d, d:] = np.diagonal(E, d)
        ab[u] += lam * self.D[self.o:self.m]
        return scipy.linalg.solveh_banded(ab, rhs, check_finite=False)

    def solve(self, lam):
        o, m, g = self.o, self.m, self.g
        S = self.A + np.diag(lam * self.D[:o])
        rhs = -g[:o].copy()
        dx = np.empty(len(g))
        if m < len(g):
            Cd = self.hc + lam * self.D[m:]
            if np.any(Cd <= 0):
                raise np.linalg.LinAlgError("non-positive landmark block")
            BC = self.B / Cd
            S -= BC @ self.B.T
            rhs += BC @ g[m:]
        if m > o:
            sol = self._banded_solve(lam, np.column_stack([self.C, -g[o:m]]))
            X, y = sol[:, :-1], sol[:, -1]
            nz = self.nzc
            S[np.ix_(nz, nz)] -= self.C.T @ X
            rhs[nz] -= self.C.T @ y
        cf = scipy.linalg.cho_factor(S, check_finite=False)
        dx[:o] = scipy.linalg.cho_solve(cf, rhs, check_finite=False)
        if m > o:
            dx[o:m] = y - X @ dx[:o][nz]
        if m < len(g):
            dx[m:] = (-g[m:] - self.B.T @ dx[:o]) / Cd
        return dx


class _Problem:
    """Frozen structure of one optimize call (variable layout and factor lists)."""

    def __init__(self, est: "Estimator"):
        g = est.graph
        cfg = est.config
        self.frame_index = {f.id: k for k, f in enumerate(g.frames)}
        nf = len(g.frames)
        col = 15 * nf

        self.imu = preint.ImuBatch.stack([f.preint for f in g.frames[1:]], [f.sqrt_info for f in g.frames[1:]]) \
            if nf > 1 else None

        self.prior = g.prior
        self.prior_cols = [self.frame_index[key] for key in g.prior.keys] if g.prior is not None else []

        # landmarks with an anchor frame and at least one more observation in the window
        self.lm_ids = []
        obs_i, obs_j, obs_l, uv_first, uv_cur = [], [], [], [], []
        if cfg.use_vision:
            observers = est.observers()
            for lid, lm in g.landmarks.items():
                ki = self.frame_index.get(lm.anchor)
                if ki is None:
                    continue
                others = [k for k in observers.get(lid, ()) if k != ki]
                if not others:
                    continue
                li = len(self.lm_ids)
                self.lm_ids.append(lid)
                for kj in others:
                    obs_i.append(ki)
                    obs_j.append(kj)
                    obs_l.append(li)
                    uv_first.append(lm.uv)
                    uv_cur.append(g.frames[kj].obs[lid])
        self.obs_i = np.asarray(obs_i, dtype=int)
        self.obs_j = np.asarray(obs_j, dtype=int)
        self.obs_l = np.asarray(obs_l, dtype=int)
        self.uv_first = np.asarray(uv_first, dtype=float).reshape(-1, 2)
        self.uv_cur = np.asarray(uv_cur, dtype=float).reshape(-1, 2)
        self.vis_active = np.ones(len(self.obs_i), dtype=bool)
        self.valid_now = self.vis_active
        self.scatter = {}

        # long window: only poses that have at least one factor
        anchor_on = cfg.use_uwb and g.anchor is not None
        self.omega_entries = [e for e in g.long_window if anchor_on or e.links]
        self.omega_index = {e.frame_id: m for m, e in enumerate(self.omega_entries)}
        self.anchor_free = anchor_on and not g.anchor.fixed
        self.anchor_col = col
        if self.anchor_free:
            col += 3
        # layout [frames | anchor | long window | inverse depths]: the long window
        # is banded and the inverse depths diagonal, both eliminated by the solver
        self.omega_col = col
        col += 3 * len(self.omega_entries)
        self.lm_col = col
        col += len(self.lm_ids)
        self.n = col

        # ranging: (is_omega, index, distance)
        rk, rd, romega = [], [], []
        if anchor_on:
            for k, f in enumerate(g.frames):
                if f.range is not None:
                    rk.append(k)
                    rd.append(f.range.distance)
                    romega.append(False)
            for m, e in enumerate(self.omega_entries):
                rk.append(m)
                rd.append(e.range.distance)
                romega.append(True)
        self.range_idx = np.asarray(rk, dtype=int)
        self.range_d = np.asarray(rd, dtype=float)
        self.range_omega = np.asarray(romega, dtype=bool)

        # relative links: source is always a long-window pose
        ls, lt, lt_omega, lz = [], [], [], []
        if cfg.use_uwb:
            for m, e in enumerate(self.omega_entries):
                for target, z in e.links.items():
                    if target in self.omega_index:
                        lt.append(self.omega_index[target])
                        lt_omega.append(True)
                    elif target in self.frame_index:
                        lt.append(self.frame_index[target])
                        lt_omega.append(False)
                    else:
                        continue
                    ls.append(m)
                    lz.append(z)
        self.link_src = np.asarray(ls, dtype=int)
        self.link_tgt = np.asarray(lt, dtype=int)
        self.link_tgt_omega = np.asarray(lt_omega, dtype=bool)
        self.link_z = np.asarray(lz, dtype=float).reshape(-1, 3)
        inner = self.link_tgt_omega
        span = np.abs(self.link_tgt[inner] - self.link_src[inner])
        self.omega_band = 3 * int(span.max(initial=0)) + 2

    def position_cols(self, idx, is_omega):
        return np.where(is_omega, self.omega_col + 3 * idx, 15 * idx)


class Estimator:
    """Sliding-window VIO with single-anchor UWB ranging."""

    def __init__(self, config: EstimatorConfig | None = None, intrinsics: Intrinsics | None = None):
        self.config = config or EstimatorConfig()
        self.config.validate()
        self.K = intrinsics
        self.graph = WindowGraph()
        self.gravity = np.asarray(self.config.gravity, dtype=float)
        self.imu_noise = ImuNoise(self.config.accel_noise_density, self.config.gyro_noise_density,
                                  self.config.accel_bias_walk, self.config.gyro_bias_walk)
        self._next_id = 0
        self._anchor_history = []
        self.anchor_fixed_at = None
        self.warnings = []
        self.last_report = OptimizeReport()

    # ------------------------------------------------------------ frames

    @property
    def frames(self):
        return self.graph.frames

    def observers(self):
        out = {}
        for k, f in enumerate(self.graph.frames):
            for lid in f.obs:
                out.setdefault(lid, []).append(k)
        return out

    def initialize(self, state: RobotState, obs=None, range_meas: RangeMeasurement | None = None):
        """Start the window from a known first state, anchored by a prior (gauge)."""
        if self.graph.frames:
            raise EstimatorError("estimator already initialized")
        f = Frame(self._take_id(), state.copy(), dict(obs or {}), self._usable_range(range_meas))
        self.graph.frames.append(f)
        self.graph.prior = PriorFactor.from_sigmas(f.id, state, self.config.initial_sigmas)
        if self.config.anchor_initial is not None and self.config.use_uwb:
            self.graph.anchor = AnchorEstimate(np.asarray(self.config.anchor_initial, dtype=float))
            if self.config.anchor_fixed_initially:
                self.graph.anchor.fix()
        return f

    def _take_id(self):
        i = self._next_id
        self._next_id += 1
        return i

    def _usable_range(self, r):
        return r if (r is not None and self.config.use_uwb) else None

    def preintegrate(self, t, accel, gyro) -> PreintegratedImu:
        """Preintegrate raw samples with the newest bias estimate."""
        s = self.graph.frames[-1].state
        return preint.preintegrate(t, accel, gyro, s.b_a, s.b_w, self.imu_noise)

    def add_frame(self, pre: PreintegratedImu, obs=None, range_meas: RangeMeasurement | None = None,
                  optimize=True) -> OptimizeReport:
        """Append a frame, optimize, then slide both windows."""
        g = self.graph
        if not g.frames:
            raise EstimatorError("call initialize() first")
        last = g.frames[-1]
        if pre.t1 <= last.state.stamp + 1e-12 or abs(pre.t0 - last.state.stamp) > 1e-6:
            raise EstimatorError("frame time does not advance from the previous frame")
        state = preint.predict(last.state, pre, self.gravity)
        state.stamp = pre.t1
        f = Frame(self._take_id(), state, dict(obs or {}), self._usable_range(range_meas), pre,
                  sqrt_info=pre.sqrt_information())
        f.is_keyframe = self.keyframe_decision(f.obs)
        g.frames.append(f)
        if self.config.use_vision and self.K is not None:
            self._init_landmarks(f)
        if self.config.use_uwb and g.anchor is None and self._n_ranged() >= self.config.anchor_min_ranges:
            cand = self.initialize_anchor()
            if self.anchor_observability(cand.position) >= self.config.anchor_min_observability:
                g.anchor = cand
            else:
                self._warn("anchor initialization deferred: ranging geometry is degenerate")
        report = self.optimize() if optimize else OptimizeReport()
        self._update_anchor_fixing()
        self._slide()
        return report

    def keyframe_decision(self, obs) -> bool:
        """Keyframe iff parallax to the last keyframe >= threshold or too few tracks."""
        kf = next((f for f in reversed(self.graph.frames) if f.is_keyframe), None)
        if kf is None:
            return True
        common = [lid for lid in obs if lid in kf.obs]
        if len(common) < self.config.keyframe_min_tracked:
            return True
        a = np.array([obs[lid] for lid in common])
        b = np.array([kf.obs[lid] for lid in common])
        parallax = float(np.mean(np.linalg.norm(a - b, axis=1)))
        return parallax >= self.config.keyframe_parallax_px

    def current_pose(self) -> geom.Pose:
        if not self.graph.frames:
            raise EstimatorError("no frames in the window")
        return self.graph.frames[-1].state.pose()

    @property
    def current_stamp(self):
        return self.graph.frames[-1].state.stamp

    # ------------------------------------------------------------ landmarks

    def _init_landmarks(self, newest: Frame):
        g = self.graph
        cfg = self.config
        observers = None
        for lid in newest.obs:
            if lid in g.landmarks:
                continue
            if observers is None:
                observers = self.observers()
            ks = observers.get(lid, [])
            if len(ks) < 2:
                continue
            frames = [g.frames[k] for k in ks]
            X = self._triangulate(frames, lid)
            if X is None:
                continue
            first = frames[0]
            depth = self._depth_in(first.state, X)
            if not (cfg.min_landmark_depth < depth < cfg.max_landmark_depth):
                continue
            if any(self._depth_in(f.state, X) <= cfg.min_landmark_depth for f in frames[1:]):
                continue
            g.landmarks[lid] = Landmark(lid, first.id, np.asarray(first.obs[lid], dtype=float), 1.0 / depth)

    def _cam_pose(self, s: RobotState):
        R_wb = s.R
        return R_wb @ self.K.R_bc, s.p + R_wb @ self.K.t_bc

    def _depth_in(self, s: RobotState, X):
        R_wc, p_wc = self._cam_pose(s)
        return float((R_wc.T @ (X - p_wc))[2])

    def _triangulate(self, frames, lid):
        A = []
        for f in frames:
            R_wc, p_wc = self._cam_pose(f.state)
            b = self.K.bearing(f.obs[lid])[0]
            P = np.hstack([R_wc.T, (-R_wc.T @ p_wc)[:, None]])
            A.append(b[0] * P[2] - P[0])
            A.append(b[1] * P[2] - P[1])
        _, s, Vt = np.linalg.svd(np.asarray(A))
        X = Vt[-1]
        if abs(X[3]) < 1e-12:
            return None
        return X[:3] / X[3]

    def landmark_world(self, lm: Landmark, state: RobotState | None = None):
        if state is None:
            state = self._frame_by_id(lm.anchor).state
        f = self.K.bearing(lm.uv)[0] / lm.inv_depth
        R_wc, p_wc = self._cam_pose(state)
        return R_wc @ f + p_wc

    def _frame_by_id(self, fid):
        for f in self.graph.frames:
            if f.id == fid:
                return f
        raise KeyError(fid)

    # ------------------------------------------------------------ anchor

    def _ranged_poses(self):
        """(key, position, distance) for every ranged pose, ordered by stamp."""
        g = self.graph
        items = [(e.stamp, e.frame_id, e.p, e.range.distance) for e in g.long_window]
        items += [(f.state.stamp, f.id, f.state.p, f.range.distance) for f in g.frames if f.range is not None]
        items.sort(key=lambda x: x[0])
        return items

    def _n_ranged(self):
        return len(self.graph.long_window) + sum(f.range is not None for f in self.graph.frames)

    def initialize_anchor(self) -> AnchorEstimate:
        """Multilateration guess for the anchor from all ranged poses.

        Solves ``|p_i|^2 - d_i^2 = 2 p_i.a - |a|^2`` linearly, falls back to an
        in-plane solve when the poses are (nearly) coplanar, then refines with
        a few Gauss-Newton steps on the ranges.
        """
        items = self._ranged_poses()
        if len(items) < max(4, self.config.anchor_min_ranges):
            raise EstimatorError("not enough ranges to initialize the anchor")
        P = np.array([it[2] for it in items])
        d = np.array([it[3] for it in items])
        a = refine_anchor(P, d, _multilaterate(P, d))
        r, U = range_residuals(P, a, d)
        cov = np.linalg.pinv(U.T @ U) * max(1e-6, float(r @ r) / max(1, len(r) - 3))
        self._anchor_history = []
        return AnchorEstimate(a, False, cov)

    def anchor_observability(self, anchor=None):
        """Smallest singular value of the stacked unit range directions over sqrt(N)."""
        items = self._ranged_poses()
        if anchor is None:
            if self.graph.anchor is None:
                return 0.0
            anchor = self.graph.anchor.position
        if not items:
            return 0.0
        P = np.array([it[2] for it in items])
        _, U = range_residuals(P, anchor, np.zeros(len(P)))
        return float(np.linalg.svd(U, compute_uv=False)[-1] / np.sqrt(len(P)))

    def anchor_extent_ratio(self):
        items = self._ranged_poses()
        if len(items) < 2:
            return 0.0
        P = np.array([it[2] for it in items])
        d = np.array([it[3] for it in items])
        return float(pdist(P).max() / max(np.mean(d), 1e-9))

    def _update_anchor_fixing(self):
        g = self.graph
        cfg = self.config
        if g.anchor is None or g.anchor.fixed:
            return
        self._anchor_history.append(g.anchor.position.copy())
        h = self._anchor_history
        n = cfg.anchor_fix_consecutive
        if len(h) < n + 1:
            return
        steps = np.linalg.norm(np.diff(np.array(h[-(n + 1):]), axis=0), axis=1)
        if steps.max() >= cfg.anchor_fix_tolerance:
            return
        ratio = self.anchor_extent_ratio()
        obs = self.anchor_observability()
        need = cfg.anchor_min_observability if cfg.anchor_fix_observability is None else cfg.anchor_fix_observability
        if ratio >= cfg.anchor_extent_ratio and obs >= need:
            g.anchor.fix()
            self.anchor_fixed_at = self.current_stamp
            log.info("anchor fixed at %s (t=%.2f)", g.anchor.position, self.current_stamp)
        else:
            self._warn(f"anchor stable but not fixed: extent ratio {ratio:.2f}, observability {obs:.3f}")

    def _warn(self, msg):
        key = msg.split(":")[0]
        if key not in self.warnings:
            log.warning(msg)
            self.warnings.append(key)

    # ------------------------------------------------------------ cost

    def _values(self, prob: _Problem) -> _Values:
        g = self.graph
        X = [np.array([getattr(f.state, a) for f in g.frames]) for a in ("p", "v", "q", "b_a", "b_w")]
        lam = np.array([g.landmarks[l].inv_depth for l in prob.lm_ids], dtype=float)
        om = np.array([e.p for e in prob.omega_entries], dtype=float).reshape(-1, 3)
        anchor = g.anchor.position.copy() if g.anchor is not None else None
        return _Values(*X, lam, om, anchor)

    def _positions(self, prob, vals, idx, is_omega):
        return np.where(is_omega[:, None], vals.omega[np.where(is_omega, idx, 0)] if len(vals.omega) else 0.0,
                        vals.p[np.where(is_omega, 0, idx)])

    def _evaluate(self, prob: _Problem, vals: _Values, linearize: bool, freeze=False):
        """Total cost, per-class costs and (when linearizing) weighted factor groups.

        A group is ``(cols (n, k), J (n, m, k), r (n, m))``: ``n`` factors of
        dimension ``m`` touching ``k`` columns each, already whitened and
        robust-reweighted. Linearizing refreshes the set of active vision
        observations unless ``freeze`` is set; ``prob.valid_now`` records the
        observations valid at ``vals``.
        """
        cfg = self.config
        costs = {"prior": 0.0, "imu": 0.0, "vision": 0.0, "range": 0.0, "link": 0.0}
        groups = []

        if prob.prior is not None:
            c = prob.prior_cols
            r, J = prob.prior.evaluate_arrays(vals.p[c], vals.v[c], vals.q[c], vals.ba[c], vals.bw[c])
            costs["prior"] = 0.5 * float(r @ r)
            if linearize:
                cols = np.concatenate([15 * k + np.arange(15) for k in prob.prior_cols])
                groups.append((cols[None], J[None], r[None]))

        if prob.imu is not None:
            xs = (vals.p, vals.v, vals.q, vals.ba, vals.bw)
            r, Ji, Jj = preint.imu_residuals(tuple(x[:-1] for x in xs), tuple(x[1:] for x in xs), prob.imu,
                                             self.gravity, jacobians=linearize)
            costs["imu"] = 0.5 * float(np.sum(r * r))
            if linearize:
                k = np.arange(len(r))[:, None]
                cols = np.hstack([15 * k + np.arange(15), 15 * (k + 1) + np.arange(15)])
                groups.append((cols, np.concatenate([Ji, Jj], axis=2), r))

        no = len(prob.obs_i)
        if no:
            Rs = geom.quat_to_rot_n(vals.q)
            ps = vals.p
            r, J_pi, J_thi, J_pj, J_thj, J_l, valid = vision_residuals(
                Rs[prob.obs_i], ps[prob.obs_i], Rs[prob.obs_j], ps[prob.obs_j], vals.lam[prob.obs_l],
                prob.uv_first, prob.uv_cur, self.K)
            info = 1.0 / cfg.pixel_sigma ** 2
            delta = cfg.vision_loss.delta
            qn = np.linalg.norm(r, axis=1)
            rho, _ = pseudo_huber(qn, delta)
            prob.valid_now = valid & (vals.lam[prob.obs_l] > 0)
            if linearize and not freeze:
                # observations invalid at the linearization point sit out this iteration
                prob.vis_active = prob.valid_now
            active = prob.vis_active
            costs["vision"] = float(info * np.sum(rho[active]))
            if np.any(active & ~valid):
                costs["vision"] = np.inf
            if linearize:
                s = np.sqrt(info * robust_weight(qn, delta)) * active
                Jb = np.concatenate([J_pi, J_thi, J_pj, J_thj, J_l[:, :, None]], axis=2) * s[:, None, None]
                base_i = 15 * prob.obs_i[:, None]
                base_j = 15 * prob.obs_j[:, None]
                c = np.concatenate([base_i + np.arange(3), base_i + 6 + np.arange(3),
                                    base_j + np.arange(3), base_j + 6 + np.arange(3),
                                    (prob.lm_col + prob.obs_l)[:, None]], axis=1)
                groups.append((c, Jb, r * s[:, None]))

        nr = len(prob.range_idx)
        if nr and vals.anchor is not None:
            P = self._positions(prob, vals, prob.range_idx, prob.range_omega)
            e, U = range_residuals(P, vals.anchor, prob.range_d)
            gr = cfg.uwb.gamma_r
            delta = cfg.range_loss.delta
            rho, _ = pseudo_huber(e, delta)
            costs["range"] = float(gr * np.sum(rho))
            if linearize:
                s = np.sqrt(gr * robust_weight(e, delta))
                pc = prob.position_cols(prob.range_idx, prob.range_omega)[:, None] + np.arange(3)
                Jr = (U * s[:, None])[:, None, :]
                if prob.anchor_free:
                    pc = np.hstack([pc, np.broadcast_to(prob.anchor_col + np.arange(3), (nr, 3))])
                    Jr = np.concatenate([Jr, -Jr], axis=2)
                groups.append((pc, Jr, (e * s)[:, None]))

        nl = len(prob.link_src)
        if nl:
            Pt = vals.omega[prob.link_src]
            Pj = self._positions(prob, vals, prob.link_tgt, prob.link_tgt_omega)
            w = np.sqrt(cfg.uwb.gamma_s)
            r = w * ((Pj - Pt) - prob.link_z)
            costs["link"] = 0.5 * float(np.sum(r * r))
            if linearize:
                cs = prob.omega_col + 3 * prob.link_src[:, None] + np.arange(3)
                ct = prob.position_cols(prob.link_tgt, prob.link_tgt_omega)[:, None] + np.arange(3)
                Jk = np.broadcast_to(np.hstack([-w * np.eye(3), w * np.eye(3)]), (nl, 3, 6))
                groups.append((np.hstack([cs, ct]), Jk, r))

        return sum(costs.values()), costs, groups if linearize else None

    def _apply(self, prob: _Problem, vals: _Values, dx) -> _Values:
        d = dx[:15 * len(vals.p)].reshape(-1, 15)
        q = geom.quat_mul_n(vals.q, geom.quat_exp_n(d[:, 6:9]))
        lam = vals.lam + dx[prob.lm_col:prob.lm_col + len(vals.lam)]
        om = vals.omega + dx[prob.omega_col:prob.omega_col + vals.omega.size].reshape(-1, 3)
        anchor = vals.anchor
        if prob.anchor_free:
            anchor = vals.anchor + dx[prob.anchor_col:prob.anchor_col + 3]
        return _Values(vals.p + d[:, 0:3], vals.v + d[:, 3:6], q, vals.ba + d[:, 9:12], vals.bw + d[:, 12:15],
                       lam, om, anchor)

    def _commit(self, prob: _Problem, vals: _Values):
        g = self.graph
        for k, f in enumerate(g.frames):
            f.state = RobotState(vals.p[k], vals.v[k], vals.q[k], vals.ba[k], vals.bw[k], f.state.stamp)
        for lid, lam in zip(prob.lm_ids, vals.lam):
            g.landmarks[lid].inv_depth = float(lam)
        for e, p in zip(prob.omega_entries, vals.omega):
            e.p = p.copy()
        if prob.anchor_free:
            g.anchor.position = vals.anchor.copy()

    def total_cost(self):
        prob = _Problem(self)
        return self._evaluate(prob, self._values(prob), False)[:2]

    # ------------------------------------------------------------ solver

    def _refresh_preintegration(self):
        thr = self.config.repreintegrate_threshold
        for prev, f in zip(self.graph.frames[:-1], self.graph.frames[1:]):
            s = prev.state
            db = np.concatenate([s.b_a - f.preint.bias_a, s.b_w - f.preint.bias_w])
            if np.linalg.norm(db) > thr:
                f.preint = preint.repreintegrate(f.preint, s.b_a, s.b_w)
                f.sqrt_info = f.preint.sqrt_information()

    def optimize(self, max_iterations=None) -> OptimizeReport:
        """Levenberg-Marquardt over every window variable.

        Accepted steps strictly decrease the total cost; a rejected step raises
        the damping by 10, an accepted one lowers it by 10.
        """
        cfg = self.config
        if len(self.graph.frames) < 2:
            rep = OptimizeReport()
            self.last_report = rep
            return rep
        self._refresh_preintegration()
        prob = _Problem(self)
        vals = self._values(prob)
        start = vals
        cost, costs, groups = self._evaluate(prob, vals, True)
        rep = OptimizeReport(initial_cost=cost, final_cost=cost, costs=costs, cost_history=[cost])
        lam = cfg.lm_initial_damping
        max_it = cfg.lm_max_iterations if max_iterations is None else max_iterations
        while rep.iterations < max_it:
            rep.iterations += 1
            H, gvec = normal_equations(groups, prob.n, prob.scatter)
            if np.linalg.norm(gvec) < 1e-12 * max(1.0, cost) or cost < 1e-24:
                rep.converged = True
                break
            solver = DampedSolver(H, gvec, prob.lm_col, prob.omega_col, prob.omega_band)
            step = None
            first = True
            while lam <= cfg.lm_max_damping:
                try:
                    dx = solver.solve(lam)
                except (np.linalg.LinAlgError, ValueError):
                    lam *= 10.0
                    continue
                if first:
                    # nothing left to gain under the local model: converged
                    first = False
                    predicted = -(gvec @ dx + 0.5 * dx @ (H @ dx))
                    if predicted < cfg.lm_cost_tolerance * max(cost, 1e-300):
                        break
                cand = self._apply(prob, vals, dx)
                # linearize at the candidate right away: most steps are accepted
                new_cost, new_costs, new_groups = self._evaluate(prob, cand, True, freeze=True)
                if np.isfinite(new_cost) and new_cost < cost:
                    step = (dx, cand, new_cost, new_costs, new_groups)
                    lam = max(lam / 10.0, 1e-12)
                    break
                lam *= 10.0
                if np.linalg.norm(dx) < 1e-12:
                    break
            if step is None:
                rep.diverged = lam > cfg.lm_max_damping
                rep.converged = not rep.diverged
                break
            dx, vals, new_cost, costs, groups = step
            rep.accepted += 1
            rel = (cost - new_cost) / max(cost, 1e-300)
            cost = new_cost
            rep.cost_history.append(cost)
            if rel < cfg.lm_cost_tolerance or np.linalg.norm(dx) < 1e-10:
                rep.converged = True
                break
            if rep.iterations < max_it and len(prob.obs_i) and np.any(prob.valid_now != prob.vis_active):
                cost, costs, groups = self._evaluate(prob, vals, True)
        if rep.diverged:
            log.warning("optimizer diverged (damping exceeded %.0e); state rolled back", cfg.lm_max_damping)
            vals = start
            cost, costs, _ = self._evaluate(prob, vals, False)
        self._commit(prob, vals)
        rep.final_cost = cost
        rep.costs = costs
        self.last_report = rep
        return rep

    # ------------------------------------------------------------ sliding

    def _slide(self):
        g = self.graph
        if len(g.frames) <= self.config.window_size:
            self._complete_links()
            return
        if g.frames[-2].is_keyframe:
            self._marginalize_oldest()
        else:
            self._discard_second_newest()
        self._complete_links()
        while len(g.long_window) > self.config.long_window_size:
            g.long_window.pop(0)

    def _promote(self, f: Frame):
        if f.range is None or not self.config.use_uwb:
            return
        e = LongWindowPose(f.id, f.state.stamp, f.state.p.copy(), f.range)
        lw = self.graph.long_window
        i = len(lw)
        while i > 0 and lw[i - 1].stamp > e.stamp:
            i -= 1
        lw.insert(i, e)

    def _complete_links(self):
        """Cache VIO deltas from each long-window pose to its next ranged poses."""
        h = self.config.uwb.link_horizon
        lw = self.graph.long_window
        if not lw:
            return
        items = self._ranged_poses()
        order = {it[1]: n for n, it in enumerate(items)}
        for e in lw:
            if len(e.links) >= h:
                continue
            n = order[e.frame_id]
            for it in items[n + 1:n + 1 + h]:
                if it[1] not in e.links:
                    e.links[it[1]] = np.asarray(it[2], dtype=float) - e.p

    def _marginalize_oldest(self):
        """Fold the oldest frame and the landmarks anchored there into the prior."""
        g = self.graph
        f0 = g.frames[0]
        dropped_lms = [lid for lid, lm in g.landmarks.items() if lm.anchor == f0.id] \
            if self.config.use_vision else []
        prior_keys = g.prior.keys if g.prior is not None else []

        # local problem: frame 0, its landmarks and the retained frames they touch
        index = {f.id: k for k, f in enumerate(g.frames)}
        observers = self.observers()
        touched = {0, 1} | {index[key] for key in prior_keys}
        # All landmarks anchored at frame 0 go into the prior with their observations;
        # the ones still tracked are then re-anchored and kept (their later
        # observations are reused, the usual sliding-window approximation).
        ending = list(dropped_lms)
        vis = []
        for lid in ending:
            for k in observers.get(lid, []):
                if k != 0:
                    vis.append((lid, k))
                    touched.add(k)
        frames_idx = sorted(touched)
        pos = {k: 15 * n for n, k in enumerate(frames_idx)}
        lm_pos = {lid: 15 * len(frames_idx) + m for m, lid in enumerate(ending)}
        n = 15 * len(frames_idx) + len(ending)
        groups = []

        if g.prior is not None:
            r, J = g.prior.evaluate([g.frames[index[key]].state for key in prior_keys])
            cols = np.concatenate([pos[index[key]] + np.arange(15) for key in prior_keys])
            groups.append((cols[None], J[None], r[None]))
        f1 = g.frames[1]
        r, Ji, Jj = preint.imu_residual(f0.state, f1.state, f1.preint, self.gravity, f1.sqrt_info)
        cols = np.concatenate([pos[0] + np.arange(15), pos[1] + np.arange(15)])
        groups.append((cols[None], np.hstack([Ji, Jj])[None], r[None]))

        if vis:
            cfg = self.config
            lms = [g.landmarks[lid] for lid, _ in vis]
            ks = np.array([k for _, k in vis])
            s0 = f0.state
            nv = len(vis)
            rr, J_pi, J_thi, J_pj, J_thj, J_l, valid = vision_residuals(
                np.repeat(s0.R[None], nv, 0), np.repeat(s0.p[None], nv, 0),
                np.array([g.frames[k].state.R for k in ks]), np.array([g.frames[k].state.p for k in ks]),
                np.array([lm.inv_depth for lm in lms]), np.array([lm.uv for lm in lms]),
                np.array([g.frames[k].obs[lid] for lid, k in vis]), self.K)
            info = 1.0 / cfg.pixel_sigma ** 2
            w = np.sqrt(info * robust_weight(np.linalg.norm(rr, axis=1), cfg.vision_loss.delta)) * valid
            Jb = np.concatenate([J_pi, J_thi, J_pj, J_thj, J_l[:, :, None]], axis=2) * w[:, None, None]
            bj = np.array([pos[k] for k in ks])[:, None]
            c = np.concatenate([np.broadcast_to(pos[0] + np.arange(3), (nv, 3)),
                                np.broadcast_to(pos[0] + 6 + np.arange(3), (nv, 3)),
                                bj + np.arange(3), bj + 6 + np.arange(3),
                                np.array([lm_pos[lid] for lid, _ in vis])[:, None]], axis=1)
            groups.append((c, Jb, rr * w[:, None]))

        H, b = normal_equations(groups, n)
        drop = list(range(15)) + [lm_pos[lid] for lid in ending]
        H_m, b_m, _ = schur_marginalize(H, b, drop)
        keep_frames = [k for k in frames_idx if k != 0]
        g.prior = PriorFactor.from_system([g.frames[k].id for k in keep_frames],
                                          [g.frames[k].state for k in keep_frames], H_m, b_m)

        g.frames.pop(0)
        g.frames[0].preint = None
        g.frames[0].sqrt_info = None
        # landmarks keep living, re-anchored at their next observer
        self._reanchor_after_removal(dropped_lms, f0)
        self._promote(f0)

    def _discard_second_newest(self):
        g = self.graph
        fs = g.frames[-2]
        newest = g.frames[-1]
        if g.prior is not None and fs.id in g.prior.keys:
            self._drop_from_prior(fs.id)
        newest.preint = preint.merge(fs.preint, newest.preint)
        newest.sqrt_info = newest.preint.sqrt_information()
        anchored = [lid for lid, lm in g.landmarks.items() if lm.anchor == fs.id]
        g.frames.pop(-2)
        if anchored:
            self._reanchor_after_removal(anchored, fs)
        self._promote(fs)

    def _reanchor_after_removal(self, lids, removed: Frame):
        g = self.graph
        for lid in lids:
            lm = g.landmarks[lid]
            X = self.landmark_world(lm, removed.state)
            nxt = [f for f in g.frames if lid in f.obs]
            if len(nxt) < 2:
                del g.landmarks[lid]
                continue
            depth = self._depth_in(nxt[0].state, X)
            if not (self.config.min_landmark_depth < depth < self.config.max_landmark_depth):
                del g.landmarks[lid]
                continue
            g.landmarks[lid] = Landmark(lid, nxt[0].id, np.asarray(nxt[0].obs[lid], dtype=float), 1.0 / depth)

    def _drop_from_prior(self, key):
        pr = self.graph.prior
        k = pr.keys.index(key)
        H = pr.J.T @ pr.J
        b = pr.J.T @ pr.r0
        keys = [x for x in pr.keys if x != key]
        x0 = [s for x, s in zip(pr.keys, pr.x0) if x != key]
        if not keys:
            self.graph.prior = None
            return
        H_m, b_m, _ = schur_marginalize(H, b, range(15 * k, 15 * k + 15))
        self.graph.prior = PriorFactor.from_system(keys, x0, H_m, b_m)


def refine_anchor(P, d, a0, iterations=20):
    """Damped Gauss-Newton on the range residuals from the guess ``a0``."""
    a = np.asarray(a0, dtype=float).copy()
    r, U = range_residuals(P, a, d)
    cost = float(r @ r)
    lam = 1e-3
    for _ in range(iterations):
        H = U.T @ U
        g = U.T @ r
        while lam < 1e8:
            step = -np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-9)), g)
            cand = a + step
            rc, Uc = range_residuals(P, cand, d)
            if float(rc @ rc) < cost:
                a, r, U, cost = cand, rc, Uc, float(rc @ rc)
                lam = max(lam / 10.0, 1e-9)
                break
            lam *= 10.0
        else:
            break
        if np.linalg.norm(step) < 1e-9:
            break
    return a


def _multilaterate(P, d):
    """Closed-form anchor guess from positions ``P`` and ranges ``d``."""
    c = P.mean(axis=0)
    Q = P - c
    # |q_i - a'|^2 = d_i^2 with a' = a - c:  -2 q_i.a' + |a'|^2 = d_i^2 - |q_i|^2
    A = np.hstack([-2.0 * Q, np.ones((len(Q), 1))])
    y = d ** 2 - np.sum(Q * Q, axis=1)
    _, s, Vt = np.linalg.svd(Q, full_matrices=False)
    if s[-1] > 0.1 * max(s[0], 1e-12):
        sol, *_ = np.linalg.lstsq(A, y, rcond=None)
        return sol[:3] + c
    # coplanar poses: solve in the plane, lift along the normal
    basis = Vt[:2]
    normal = Vt[2]
    Q2 = Q @ basis.T
    A2 = np.hstack([-2.0 * Q2, np.ones((len(Q2), 1))])
    y2 = d ** 2 - np.sum(Q2 * Q2, axis=1)
    sol, *_ = np.linalg.lstsq(A2, y2, rcond=None)
    a2 = sol[:2]
    h2 = sol[2] - a2 @ a2
    h = np.sqrt(max(h2, 0.0))
    a = c + basis.T @ a2 + h * normal
    if normal[2] < 0:
        a = c + basis.T @ a2 - h * normal
    return a
