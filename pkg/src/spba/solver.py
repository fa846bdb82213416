"""Alternating block L-BFGS over target pose, relative poses, and style.

Each outer iteration runs a bounded inner L-BFGS (fresh curvature memory)
on the target-pose block, then on all relative-pose blocks jointly, then on
the style block, and finally re-solves the external scale from pose
agreement. A guard rejects scale updates that would increase the total
loss, which keeps the recorded loss non-increasing across outer iterations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import line_search

from .alignment import solve_alpha_poses
from .errors import DegenerateObjectiveError, InitFailureError, StationaryCameraError
from .geometry import Twist, compose, exp_rotation, log_rotation
from .objective import Objective, ObjectiveConfig
from .shapespace import PointCloud, StyleVector, generate


@dataclass
class SolverConfig:
    max_outer_iters: int = 200
    inner_lbfgs_steps: int = 10
    lbfgs_memory: int = 10
    rel_tol: float = 1e-6
    rel_tol_patience: int = 3
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.max_outer_iters < 0:
            raise ValueError("max_outer_iters must be >= 0")
        for name in ("inner_lbfgs_steps", "lbfgs_memory", "rel_tol", "rel_tol_patience",
                     "wolfe_c1", "wolfe_c2", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolverState:
    p0: Twist
    deltas: list
    s: StyleVector
    alpha: float = 1.0
    iter: int = 0
    loss_history: list = field(default_factory=list)

    def global_poses(self) -> list:
        return [self.p0] + [compose(d, self.p0) for d in self.deltas]


def state_to_dict(state: SolverState) -> dict:
    return {
        "p0": {"omega": state.p0.omega.tolist(), "t": state.p0.t.tolist()},
        "deltas": [
            {"omega": d.omega.tolist(), "t": d.t.tolist()} for d in state.deltas
        ],
        "s": state.s.s.tolist(),
        "s_max": state.s.s_max,
        "alpha": state.alpha,
        "iter": state.iter,
        "loss_history": [
            {
                "iter": i,
                "l_ph": b.l_ph,
                "l_cd": b.l_cd,
                "l_invd": b.l_invd,
                "total": b.total,
            }
            for i, b in enumerate(state.loss_history)
        ],
    }


def state_from_dict(doc: dict) -> SolverState:
    from .objective import LossBreakdown

    history = [
        LossBreakdown(l_ph=r["l_ph"], l_cd=r["l_cd"], l_invd=r["l_invd"], total=r["total"])
        for r in doc.get("loss_history", [])
    ]
    return SolverState(
        p0=Twist(np.array(doc["p0"]["omega"]), np.array(doc["p0"]["t"])),
        deltas=[Twist(np.array(d["omega"]), np.array(d["t"])) for d in doc["deltas"]],
        s=StyleVector(np.array(doc["s"]), s_max=doc.get("s_max", 4.0)),
        alpha=doc.get("alpha", 1.0),
        iter=doc.get("iter", 0),
        loss_history=history,
    )


# ---------------------------------------------------------------------------
# Inner L-BFGS
# ---------------------------------------------------------------------------


def _two_loop(g, s_list, y_list, rho_list):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if y_list:
        q *= (s_list[-1] @ y_list[-1]) / (y_list[-1] @ y_list[-1])
    for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _backtrack(fun, x, d, f0, g0, c1, max_halvings=25):
    slope = float(g0 @ d)
    if slope >= 0:
        return None, f0, g0
    step = 1.0
    for _ in range(max_halvings):
        fn, gn = fun(x + step * d)
        if np.isfinite(fn) and fn <= f0 + c1 * step * slope:
            return step, fn, gn
        step *= 0.5
    return None, f0, g0


def _strong_wolfe(fun, x, d, f0, g0, c1, c2):
    cache = {}

    def cached(xv):
        key = xv.tobytes()
        if key not in cache:
            cache[key] = fun(xv)
        return cache[key]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            step = line_search(
                lambda xv: cached(xv)[0],
                lambda xv: cached(xv)[1],
                x,
                d,
                gfk=g0,
                old_fval=f0,
                c1=c1,
                c2=c2,
                maxiter=12,
            )[0]
        except (ValueError, FloatingPointError):
            step = None
    if step is None or not np.isfinite(step) or step <= 0:
        return _backtrack(fun, x, d, f0, g0, c1)
    f_new, g_new = cached(x + step * d)
    if not np.isfinite(f_new) or f_new > f0:
        return _backtrack(fun, x, d, f0, g0, c1)
    return step, f_new, g_new


def lbfgs_minimize(fun, x0, max_iters=10, memory=10, c1=1e-4, c2=0.9, grad_tol=1e-12):
    """Bounded L-BFGS run with strong-Wolfe steps; never increases f.

    ``fun`` maps x -> (f, grad). Returns (x, f, g, n_steps).
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    if not np.isfinite(f):
        raise FloatingPointError("objective not finite at the block start")
    s_list, y_list, rho_list = [], [], []
    steps = 0
    for _ in range(max_iters):
        if np.linalg.norm(g, np.inf) <= grad_tol:
            break
        d = -_two_loop(g, s_list, y_list, rho_list)
        if d @ g >= 0:
            d = -g
        step, f_new, g_new = _strong_wolfe(fun, x, d, f, g, c1, c2)
        if step is None:
            break
        x_new = x + step * d
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / sy)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)
        x, f, g = x_new, f_new, g_new
        steps += 1
    return x, f, g, steps


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------


def _param_scales(objective: Objective) -> np.ndarray:
    """Diagonal preconditioner: radians for rotations, object diameters for
    translations, mode standard deviations for style."""
    diameter = PointCloud(points=objective.basis.mean).diameter()
    diameter = diameter if diameter > 0 else 1.0
    scales = np.ones(objective.num_params)
    L = objective.num_frames
    for f in range(L):
        scales[6 * f + 3 : 6 * f + 6] = diameter
    return scales


def optimize(
    seq,
    basis,
    init: SolverState,
    cfg: SolverConfig = None,
    obj_cfg: ObjectiveConfig = None,
    upsample: int = 4,
    checkpoint_fn=None,
) -> SolverState:
    """Run the alternating optimization from ``init`` and return the final state.

    ``checkpoint_fn(state)``, when given, is called every
    ``cfg.checkpoint_every`` outer iterations.
    """
    cfg = cfg or SolverConfig()
    obj = Objective(seq, basis, obj_cfg, upsample=upsample)
    params = obj.pack(init.p0, init.deltas, init.s)
    alpha = float(init.alpha)
    try:
        breakdown, _ = obj.evaluate(params, alpha)
        breakdown.alpha = alpha
    except DegenerateObjectiveError as exc:
        raise InitFailureError(f"objective degenerate at the initial state: {exc}") from exc
    if not np.isfinite(breakdown.total):
        raise InitFailureError(f"objective not finite at the initial state ({breakdown.total})")

    if cfg.max_outer_iters == 0:
        return replace(init, iter=0)

    scales = _param_scales(obj)
    L = obj.num_frames
    blocks = [slice(0, 6), slice(6, 6 * L), slice(6 * L, obj.num_params)]
    s_slice = blocks[2]
    s_max = init.s.s_max

    def run_block(sl, f_ref):
        # Visibility (and pixel ownership) is frozen over one inner L-BFGS
        # run; re-masking inside the line search makes the loss a staircase
        # of membership jumps that defeats the Wolfe conditions. The result
        # is accepted only if it also descends under fresh visibility,
        # halving the step toward the start point when it does not.
        views = obj.compute_views(params)

        def block_fun(z):
            p = params.copy()
            p[sl] = z * scales[sl]
            try:
                bd, grad = obj.evaluate(p, alpha, views)
            except DegenerateObjectiveError:
                # Off-screen trial step; report +inf so the line search backs off.
                return np.inf, np.zeros(sl.stop - sl.start)
            return bd.total, grad[sl] * scales[sl]

        z0 = params[sl] / scales[sl]
        z_new, _, _, steps = lbfgs_minimize(
            block_fun,
            z0,
            max_iters=cfg.inner_lbfgs_steps,
            memory=cfg.lbfgs_memory,
            c1=cfg.wolfe_c1,
            c2=cfg.wolfe_c2,
        )
        if steps == 0:
            return params[sl].copy(), f_ref
        z_try = z_new
        for _ in range(4):
            p = params.copy()
            p[sl] = z_try * scales[sl]
            try:
                bd_fresh, _ = obj.evaluate(p, alpha)
            except DegenerateObjectiveError:
                bd_fresh = None
            if (
                bd_fresh is not None
                and np.isfinite(bd_fresh.total)
                and bd_fresh.total <= f_ref
            ):
                return z_try * scales[sl], bd_fresh.total
            z_try = 0.5 * (z_try + z0)
        return params[sl].copy(), f_ref

    history = [breakdown]
    f_current = breakdown.total
    stall = 0
    it = 0
    for it in range(1, cfg.max_outer_iters + 1):
        for sl in blocks[:2]:
            params[sl], f_current = run_block(sl, f_current)

        # Style block, projected back into its trust ball; the projected
        # point is accepted only if it does not undo the block's descent.
        s_candidate, f_new = run_block(s_slice, f_current)
        s_norm = float(np.linalg.norm(s_candidate))
        if s_norm > s_max:
            s_candidate = s_candidate * (s_max / s_norm)
            probe = params.copy()
            probe[s_slice] = s_candidate
            f_new = obj.evaluate(probe, alpha)[0].total
        if f_new <= f_current:
            params[s_slice] = s_candidate
            f_current = f_new

        # Scale update from pose agreement, guarded against loss increases.
        breakdown, _ = obj.evaluate(params, alpha)
        breakdown.alpha = alpha
        f_current = breakdown.total
        if seq.external is not None:
            omega0, t0, domegas, dts, s = obj.unpack(params)
            p0_t = Twist(omega0, t0)
            deltas_t = [Twist(domegas[i], dts[i]) for i in range(L - 1)]
            centroid = obj.generate_cloud(s).mean(axis=0)
            try:
                alpha_new = solve_alpha_poses(p0_t, deltas_t, seq.external, centroid).alpha
            except (StationaryCameraError, ValueError):
                alpha_new = None
            if alpha_new is not None and alpha_new > 0 and alpha_new != alpha:
                bd_new, _ = obj.evaluate(params, alpha_new)
                if np.isfinite(bd_new.total) and bd_new.total <= f_current:
                    alpha = alpha_new
                    bd_new.alpha = alpha_new
                    breakdown = bd_new
                    f_current = bd_new.total

        history.append(breakdown)
        if checkpoint_fn is not None and it % cfg.checkpoint_every == 0:
            checkpoint_fn(_state_from_params(obj, params, alpha, it, history, s_max))
        prev_total = history[-2].total
        rel_drop = (prev_total - f_current) / max(abs(prev_total), 1e-300)
        stall = stall + 1 if rel_drop < cfg.rel_tol else 0
        if stall >= cfg.rel_tol_patience:
            break
        if not np.isfinite(f_current):
            break

    return _state_from_params(obj, params, alpha, it, history, s_max)


def _state_from_params(obj, params, alpha, it, history, s_max) -> SolverState:
    omega0, t0, domegas, dts, s = obj.unpack(params)
    return SolverState(
        p0=Twist(omega0, t0),
        deltas=[Twist(domegas[i], dts[i]) for i in range(obj.num_frames - 1)],
        s=StyleVector(s, s_max=s_max),
        alpha=alpha,
        iter=it,
        loss_history=list(history),
    )


# ---------------------------------------------------------------------------
# Convergence-basin sweep
# ---------------------------------------------------------------------------


def perturb_pose(pose: Twist, magnitude_deg: float, diameter: float, rng) -> Twist:
    """Rotate by ``magnitude_deg`` about a random axis and shift the camera by
    the same number as a percentage of the object diameter."""
    if magnitude_deg == 0:
        return pose
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    R = exp_rotation(axis * np.deg2rad(magnitude_deg)) @ exp_rotation(pose.omega)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    t = pose.t + direction * (magnitude_deg / 100.0) * diameter
    return Twist(log_rotation(R), t)


def basin_sweep(
    seq,
    basis,
    gt: SolverState,
    magnitudes,
    seeds: int = 20,
    cfg: SolverConfig = None,
    obj_cfg: ObjectiveConfig = None,
    upsample: int = 4,
    base_seed: int = 0,
    converge_orientation_deg: float = 0.5,
    converge_center_frac: float = 0.01,
):
    """Convergence statistics under target-pose perturbations.

    For every magnitude and seed, runs the optimizer twice: once with the
    relative motion initialized from the external poses and once from zero
    motion. A run converges when the mean camera orientation error and the
    mean camera center error (as a fraction of the object diameter) fall
    under the given thresholds. Returns a list of row dicts.
    """
    from .initpose import init_alpha
    from .metrics import camera_metrics

    cfg = cfg or SolverConfig()
    gt_cloud = generate(basis, gt.s)
    diameter = gt_cloud.diameter()
    gt_poses = gt.global_poses()
    rows = []
    for magnitude in magnitudes:
        for mode in ("motion-init", "zero-init"):
            converged = 0
            p0_orient = []
            p0_center = []
            for k in range(seeds):
                rng = np.random.default_rng([base_seed, int(round(magnitude * 1000)), k])
                p0 = perturb_pose(gt.p0, magnitude, diameter, rng)
                alpha0 = init_alpha(seq, basis, gt.s, p0, upsample=upsample, fallback=gt.alpha)
                if mode == "motion-init" and seq.external is not None:
                    from .alignment import ScaleFactor, init_motion

                    deltas = init_motion(p0, seq.external, ScaleFactor(alpha0))
                else:
                    deltas = [Twist.identity() for _ in range(len(seq) - 1)]
                start = SolverState(p0=p0, deltas=deltas, s=gt.s, alpha=alpha0)
                try:
                    result = optimize(
                        seq, basis, start, cfg=cfg, obj_cfg=obj_cfg, upsample=upsample
                    )
                except (InitFailureError, DegenerateObjectiveError):
                    continue
                cam = camera_metrics(result.global_poses(), gt_poses)
                orient = cam["orientation_error_deg_mean"]
                center = cam["location_error_mean"]
                p0_orient.append(cam["orientation_error_deg"][0])
                p0_center.append(cam["location_error"][0])
                if orient < converge_orientation_deg and center < converge_center_frac * diameter:
                    converged += 1
            rows.append(
                {
                    "magnitude": magnitude,
                    "mode": mode,
                    "runs": seeds,
                    "converged_fraction": converged / seeds if seeds else 0.0,
                    "p0_orientation_error_deg": float(np.mean(p0_orient)) if p0_orient else float("nan"),
                    "p0_center_error": float(np.mean(p0_center)) if p0_center else float("nan"),
                }
            )
    return rows
