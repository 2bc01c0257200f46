import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

import metrics
from calculus import AxisymmetricCalculus, EVEN, ODD, d_u, over_sin
from errors import DegenerateFit, NotStrictlyConvex, ZeroMeanCurvature
from exact import (curvature_invariants, dt_log_mean_curvature, mean_curvature_at, sample_as_grid)
from flow import FlowState, Trajectory, dt_H_identity, dt_H_material, normal_time_derivative, tangential_speed, time_difference
from hypersurface import ProfileGrid, codazzi_residual, gauss_residual, sample_points, shape_data
from sphere import EquatorFrame, radial_distance, radial_projection, reflect, polar_to_ambient

PASS = 'pass'
FAIL = 'fail'
INCONCLUSIVE = 'inconclusive'
EXACT = 'exact'

MINIMALITY_TOL = 1e-10
DECAY_TOL = 1e-12
FIT_GAP = 1e-10
FIT_MATCH = 1e-8
# residual differences between levels below this (times 1 + max|A|^3) count as spatially exact
EXACT_FLOOR = 1e-8
NOISE_FACTOR = 1e3


def combine_status(statuses):
    statuses = list(statuses)
    if any(s == FAIL for s in statuses):
        return FAIL
    if any(s == INCONCLUSIVE for s in statuses):
        return INCONCLUSIVE
    return PASS


def check_tolerance(du, dt, max_A, tol_scale=10.0):
    """tol_scale (du^2 + dt) (1 + max|A|^3)."""
    return tol_scale * (du**2 + dt) * (1.0 + max_A**3)


def _max_A(states):
    return max(s.shape.max_A for s in states)


def _record_spacing(trajectory):
    t = trajectory.times
    return float(np.max(np.diff(t))) if len(t) > 1 else 0.0


def _step_size(trajectory):
    return max((e['dt'] for e in trajectory.step_log), default=0.0)


class CurvatureDerivatives:
    """Covariant derivatives of H and h at one state, in the (profile, angular) orthonormal frame."""

    def __init__(self, state):
        shape = state.shape
        calc = AxisymmetricCalculus(state.grid)
        n = shape.n
        self.n = n
        self.calc = calc
        self.H = shape.H
        self.a = shape.kappa1
        self.b = shape.kappa2
        self.A_sq = shape.A_sq
        self.C = shape.C
        self.lapH = shape.lapH
        self.c = calc.sigma(self.H)
        self.H_ss = calc.sigma2(self.H)
        self.kc = calc.k_times(self.c)
        self.a_s = calc.sigma(self.a)
        self.b_s = calc.sigma(self.b)
        self.lap_a, self.lap_b = calc.tensor_laplacian(self.a, self.b)
        self.lap_gradH = calc.one_form_laplacian(self.c)
        # nabla_phi h_{1 phi} = k (a - b) = b_sigma appears in two index placements
        self.gradA_sq = self.a_s**2 + 3 * (n - 1) * self.b_s**2
        self.h_hessH = self.a * self.H_ss + (n - 1) * self.b * self.kc
        self.strict = shape.convexity.strict
        self.P = self.c**2 / self.a if self.strict else None

    def require_strict(self):
        if not self.strict:
            raise NotStrictlyConvex("b^ij is undefined on a state that is not strictly convex")
        return self


class _DerivativeCache(dict):
    def __init__(self, trajectory):
        super().__init__()
        self.trajectory = trajectory

    def __missing__(self, j):
        value = CurvatureDerivatives(self.trajectory[j])
        self[j] = value
        return value


@dataclass
class EtaTensor:
    eta_uu: np.ndarray
    eta_ang: np.ndarray


def eta_tensor(state, derivs=None):
    """eta = Hess H + H h^2 - b(grad H, grad h), diagonal in the orthonormal frame."""
    d = (CurvatureDerivatives(state) if derivs is None else derivs).require_strict()
    ratio = d.c / d.a
    return EtaTensor(
        eta_uu=d.H_ss + d.H * d.a**2 - ratio * d.a_s,
        eta_ang=d.kc + d.H * d.b**2 - ratio * d.b_s,
    )


def theta(state, dtH):
    """Theta = dtH - b^ij H_i H_j."""
    state.shape.require_strict()
    return np.asarray(dtH, dtype=float) - state.shape.normgradH_sq


def q_quantity(state, theta_values):
    H = state.shape.H
    if np.any(H <= 0.0):
        raise ZeroMeanCurvature(f"Q = (Theta - n H) / H needs H > 0, min H = {np.min(H):.3e}")
    return (np.asarray(theta_values, dtype=float) - state.shape.n * H) / H


def harnack_expression(state, dtH, t, t0, V1, V_ang):
    """dtH + H / (2 (t - t0)) + 2 D_V H + A(V, V) - n H for V = V1 e_1 + V_ang e_phi."""
    d_sigma_H = state.shape.gradH_u / np.sqrt(state.shape.g_uu)
    return (dtH + state.shape.H / (2.0 * (t - t0)) + 2 * V1 * d_sigma_H
            + state.shape.kappa1 * V1**2 + state.shape.kappa2 * V_ang**2 - state.shape.n * state.shape.H)


def minimizer(state):
    """V* = -b grad H: profile component -H_sigma / kappa_1, angular component 0."""
    state.shape.require_strict()
    return -(state.shape.gradH_u / np.sqrt(state.shape.g_uu)) / state.shape.kappa1


def minimality(state, dtH, t, t0, rng, n_directions=8):
    """Per node, min over sampled V of expression(V) - expression(V*); directions cover +-profile and +-angular."""
    v_star = minimizer(state)
    base = harnack_expression(state, dtH, t, t0, v_star, 0.0)
    scale = 1.0 + np.abs(v_star)
    slack = np.full_like(base, np.inf)
    for j in range(n_directions):
        angle = 2 * math.pi * j / n_directions
        mag = rng.uniform(0.05, 2.0, size=base.shape) * scale
        full = harnack_expression(state, dtH, t, t0, mag * math.cos(angle), mag * math.sin(angle))
        slack = np.minimum(slack, full - base)
    return slack


@dataclass
class HarnackReport:
    times: List[float] = field(default_factory=list)
    theta: List[np.ndarray] = field(default_factory=list)
    q: List[np.ndarray] = field(default_factory=list)
    harnack_min_expr: List[np.ndarray] = field(default_factory=list)
    minimizer_v: List[np.ndarray] = field(default_factory=list)
    global_min: float = math.inf
    worst_node: int = -1
    worst_time: float = math.nan
    tolerance_used: float = 0.0
    minimality_slack: float = math.inf
    dtH_source: str = 'identity'
    skipped: int = 0

    @property
    def status(self):
        if not self.times:
            return INCONCLUSIVE
        ok = self.global_min >= -self.tolerance_used and self.minimality_slack >= -MINIMALITY_TOL
        return PASS if ok else FAIL

    def summary(self):
        return {
            'status': self.status,
            'global_min': self.global_min,
            'worst_node': self.worst_node,
            'worst_time': self.worst_time,
            'tolerance_used': self.tolerance_used,
            'minimality_slack': self.minimality_slack,
            'dtH_source': self.dtH_source,
            'checked_states': len(self.times),
            'skipped_states': self.skipped,
        }


def _dtH(trajectory, index, source, flip_ambient_sign):
    if source == 'material':
        return dt_H_material(trajectory, index)
    return dt_H_identity(trajectory[index], flip_ambient_sign=flip_ambient_sign)


def _harnack_indices(trajectory, t0, source):
    lo, hi = (1, len(trajectory) - 1) if source == 'material' else (0, len(trajectory))
    return [i for i in range(lo, hi) if trajectory[i].t > t0]


def harnack_check(trajectory, t0=None, tol=None, dtH_source='identity', flip_ambient_sign=False, tol_scale=10.0, seed=0):
    """
    Minimized Harnack expression Theta - n H + H / (2 (t - t0)) at every strictly convex recorded state.

    States that are not strictly convex or have H <= tol_convex are skipped and counted.
    """
    assert dtH_source in ('identity', 'material'), f"dtH_source must be 'identity' or 'material', got {dtH_source!r}"
    t0 = trajectory[0].t if t0 is None else t0
    rng = np.random.default_rng(seed)
    report = HarnackReport(dtH_source=dtH_source)
    if tol is None:
        tol = check_tolerance(trajectory[0].grid.du, _step_size(trajectory), _max_A(trajectory.states), tol_scale)
    report.tolerance_used = tol

    for i in _harnack_indices(trajectory, t0, dtH_source):
        state = trajectory[i]
        if not state.convexity.strict or np.min(state.shape.H) <= state.convexity.tol:
            report.skipped += 1
            continue
        dtH = _dtH(trajectory, i, dtH_source, flip_ambient_sign)
        th = theta(state, dtH)
        expr = th - state.shape.n * state.shape.H + state.shape.H / (2.0 * (state.t - t0))
        report.times.append(state.t)
        report.theta.append(th)
        report.q.append(q_quantity(state, th))
        report.harnack_min_expr.append(expr)
        report.minimizer_v.append(minimizer(state))
        k = int(np.argmin(expr))
        if expr[k] < report.global_min:
            report.global_min = float(expr[k])
            report.worst_node = k
            report.worst_time = state.t
        slack = minimality(state, dtH, state.t, t0, rng)
        report.minimality_slack = min(report.minimality_slack, float(np.min(slack)))
    return report


@dataclass
class QODEReport:
    epsilon: float
    times: List[float] = field(default_factory=list)
    margins: List[float] = field(default_factory=list)
    global_min: float = math.inf
    worst_node: int = -1
    worst_time: float = math.nan
    tolerance_used: float = 0.0

    @property
    def status(self):
        if not self.times:
            return INCONCLUSIVE
        return PASS if self.global_min >= -self.tolerance_used else FAIL

    def summary(self):
        return {
            'status': self.status,
            'epsilon': self.epsilon,
            'global_min': self.global_min,
            'worst_node': self.worst_node,
            'worst_time': self.worst_time,
            'tolerance_used': self.tolerance_used,
            'checked_states': len(self.times),
        }


def q_ode_check(trajectory, epsilon=0.01, t0=None, tol=None, dtH_source='identity', tol_scale=10.0):
    """Q(., t) >= q(t) = -1 / (2 (t - t0 - epsilon)) at every recorded time with t - t0 > epsilon."""
    t0 = trajectory[0].t if t0 is None else t0
    report = QODEReport(epsilon=epsilon)
    if tol is None:
        tol = check_tolerance(trajectory[0].grid.du, _step_size(trajectory), _max_A(trajectory.states), tol_scale)
    report.tolerance_used = tol
    for i in _harnack_indices(trajectory, t0 + epsilon, dtH_source):
        state = trajectory[i]
        if not state.convexity.strict or np.min(state.shape.H) <= state.convexity.tol:
            continue
        Q = q_quantity(state, theta(state, _dtH(trajectory, i, dtH_source, False)))
        margin = Q + 1.0 / (2.0 * (state.t - t0 - epsilon))
        k = int(np.argmin(margin))
        report.times.append(state.t)
        report.margins.append(float(margin[k]))
        if margin[k] < report.global_min:
            report.global_min = float(margin[k])
            report.worst_node = k
            report.worst_time = state.t
    return report


# ---------------------------------------------------------------------------
# evolution identities

def _log_s_rate(traj, i):
    """Normal-parametrization d/dt of log sqrt(g_uu), including the reparametrization stretch -tau_u."""
    state = traj[i]
    du = state.grid.du
    tau = tangential_speed(state)
    log_s = 0.5 * np.log(state.shape.g_uu)
    at_u = time_difference(traj, i, lambda j: 0.5 * np.log(traj[j].shape.g_uu))
    return at_u - tau * d_u(log_s, du, EVEN) - d_u(tau, du, ODD)


def _log_R_rate(traj, i):
    """Normal-parametrization d/dt of log R, R = sin(rho) sin(u)."""
    state = traj[i]
    grid = state.grid
    tau = tangential_speed(state)
    cot_rho = np.cos(grid.rho) / np.sin(grid.rho)
    rho_t = time_difference(traj, i, lambda j: traj[j].grid.rho)
    rho_u = d_u(grid.rho, grid.du, EVEN)
    return cot_rho * rho_t - tau * cot_rho * rho_u - np.cos(grid.u) * over_sin(tau, grid.u)


def _pair(x, y):
    return np.maximum(np.abs(x), np.abs(y))


def _metric(traj, i, D):
    d = D[i]
    return _pair(_log_s_rate(traj, i) + d.H * d.a, _log_R_rate(traj, i) + d.H * d.b)


def _inverse_metric(traj, i, D):
    d = D[i]
    return _pair(-2 * _log_s_rate(traj, i) - 2 * d.H * d.a, -2 * _log_R_rate(traj, i) - 2 * d.H * d.b)


def _kappa_rates(traj, i):
    return (normal_time_derivative(traj, i, lambda j: traj[j].shape.kappa1),
            normal_time_derivative(traj, i, lambda j: traj[j].shape.kappa2))


def _mixed_curvature(traj, i, D):
    d = D[i]
    k1, k2 = _kappa_rates(traj, i)
    return _pair(k1 - (d.H_ss + d.H * d.a**2 + d.H), k2 - (d.kc + d.H * d.b**2 + d.H))


def _curvature_heat(traj, i, D):
    d = D[i]
    n = d.n
    k1, k2 = _kappa_rates(traj, i)
    return _pair(k1 - (d.lap_a + d.A_sq * d.a + 2 * d.H - n * d.a),
                 k2 - (d.lap_b + d.A_sq * d.b + 2 * d.H - n * d.b))


def _curvature_lower(traj, i, D):
    d = D[i]
    n = d.n
    k1, k2 = _kappa_rates(traj, i)
    lhs1 = k1 + d.a * 2 * _log_s_rate(traj, i)
    lhs2 = k2 + d.b * 2 * _log_R_rate(traj, i)
    return _pair(lhs1 - (d.lap_a + d.A_sq * d.a - 2 * d.H * d.a**2 + 2 * d.H - n * d.a),
                 lhs2 - (d.lap_b + d.A_sq * d.b - 2 * d.H * d.b**2 + 2 * d.H - n * d.b))


def _mean_curvature(traj, i, D):
    return dt_H_material(traj, i) - dt_H_identity(traj[i])


def _laplacian_commutator(traj, i, D):
    d = D[i]
    lhs = normal_time_derivative(traj, i, lambda j: traj[j].shape.lapH) - d.calc.laplacian(dt_H_material(traj, i))
    return lhs - (2 * d.H * d.h_hessH + 2 * d.a * d.c**2)


def _dtH_evolution(traj, i, D):
    d = D[i]
    dtH = dt_H_material(traj, i)
    lhs = normal_time_derivative(traj, i, lambda j: dt_H_material(traj, j))
    rhs = (d.calc.laplacian(dtH) + 4 * d.H * d.h_hessH + 2 * d.a * d.c**2
           + (d.A_sq + d.n) * dtH + 2 * d.H**2 * d.C + 2 * d.H**3)
    return lhs - rhs


def _gradient_dtH(traj, i, D):
    d = D[i]
    lhs = d.calc.sigma(dt_H_material(traj, i))
    rhs = d.lap_gradH + d.calc.sigma(d.A_sq * d.H) + (d.a**2 - d.H * d.a) * d.c + d.c
    return lhs - rhs


def _commute(traj, i, D):
    d = D[i]
    return d.calc.sigma(d.lapH) - d.lap_gradH - (d.a**2 - d.H * d.a - (d.n - 1)) * d.c


def _A_sq_evolution(traj, i, D):
    d = D[i]
    lhs = normal_time_derivative(traj, i, lambda j: traj[j].shape.A_sq)
    rhs = (d.calc.laplacian(d.A_sq) - 2 * d.gradA_sq + 2 * d.A_sq**2
           + 2 * (2 * d.H**2 - d.n * d.A_sq))
    return lhs - rhs


def _codazzi(traj, i, D):
    return codazzi_residual(traj[i].grid, traj[i].shape)


def _gauss(traj, i, D):
    return gauss_residual(traj[i].grid, traj[i].shape)


# name -> (residual, required order); nested time differences only need first order
IDENTITIES = {
    'metric': (_metric, 1.9),
    'inverse_metric': (_inverse_metric, 1.9),
    'mixed_curvature': (_mixed_curvature, 1.9),
    'curvature_heat': (_curvature_heat, 1.9),
    'curvature_lower': (_curvature_lower, 1.9),
    'mean_curvature': (_mean_curvature, 1.9),
    'laplacian_commutator': (_laplacian_commutator, 0.9),
    'dtH_evolution': (_dtH_evolution, 0.9),
    'gradient_dtH': (_gradient_dtH, 1.9),
    'commute': (_commute, 1.9),
    'A_sq_evolution': (_A_sq_evolution, 1.9),
    'codazzi': (_codazzi, 1.9),
    'gauss': (_gauss, 1.9),
}


@dataclass
class IdentityEntry:
    name: str
    kind: str
    max_residual: List[float]
    tol: float
    status: str
    required_order: Optional[float] = None
    order: Optional[float] = None
    step_orders: List[float] = field(default_factory=list)
    differences: List[float] = field(default_factory=list)
    limit: Optional[float] = None
    worst_node: int = -1
    worst_time: float = math.nan

    def summary(self):
        return {
            'status': self.status,
            'kind': self.kind,
            'max_residual': self.max_residual,
            'tol': self.tol,
            'required_order': self.required_order,
            'order': self.order,
            'step_orders': self.step_orders,
            'differences': self.differences,
            'limit': self.limit,
            'worst_node': self.worst_node,
            'worst_time': self.worst_time,
        }


@dataclass
class IdentityReport:
    entries: Dict[str, IdentityEntry] = field(default_factory=dict)
    levels: List[int] = field(default_factory=list)

    @property
    def status(self):
        return combine_status(PASS if e.status == EXACT else e.status for e in self.entries.values())

    def summary(self):
        return {'status': self.status, 'levels': self.levels, 'entries': {k: e.summary() for k, e in self.entries.items()}}

    def to_frame(self):
        return metrics.identity_table(self)


def richardson_limit(coarser, finer, order):
    """Max over states of |R_fine - (R_coarse - R_fine) / (2^p - 1)|, p clipped to [1, 4]."""
    p = min(max(order, 1.0), 4.0)
    return max(float(np.max(np.abs(rf - (rc - rf) / (2.0**p - 1.0)))) for rc, rf in zip(coarser, finer))


def analysis_indices(trajectory, max_states=12, margin=2):
    lo, hi = margin, len(trajectory) - 1 - margin
    if hi < lo:
        return []
    count = min(max_states, hi - lo + 1)
    return sorted(set(int(round(x)) for x in np.linspace(lo, hi, count)))


def _residual_fields(trajectory, indices, names):
    D = _DerivativeCache(trajectory)
    fields = {name: [] for name in names}
    for i in indices:
        for name in names:
            fn, _ = IDENTITIES[name]
            fields[name].append(np.asarray(fn(trajectory, i, D), dtype=float))
    return fields


def identity_suite(trajectories, names=None, max_states=12, tol_scale=10.0):
    """
    Evaluate the evolution identities along one trajectory or along refinements of the same run.

    With a single trajectory each identity passes when its max residual is within the check tolerance
    (nested identities report inconclusive instead of failing). With three or more refinement levels
    (N doubling, identical recorded times) the observed order is fitted from the level-to-level
    differences of the residual fields on the coarsest nodes; differences at the rounding floor are
    reported as exact. Either way the Richardson limit of the residual must be within the tolerance.
    """
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    names = list(IDENTITIES) if names is None else list(names)
    report = IdentityReport(levels=[t[0].grid.N for t in trajectories])
    indices = analysis_indices(min(trajectories, key=len), max_states)
    if not indices:
        for name in names:
            report.entries[name] = IdentityEntry(name=name, kind='identity', max_residual=[], tol=0.0, status=INCONCLUSIVE,
                                                 required_order=IDENTITIES[name][1])
        return report
    max_A = max(_max_A(t.states) for t in trajectories)
    per_level = [_residual_fields(traj, indices, names) for traj in trajectories]

    for name in names:
        required = IDENTITIES[name][1]
        maxima = [max(float(np.max(np.abs(r))) for r in fields[name]) for fields in per_level]
        finest = trajectories[-1]
        tol = check_tolerance(finest[0].grid.du, _record_spacing(finest), max_A, tol_scale)
        stack = np.stack([np.abs(r) for r in per_level[-1][name]])
        t_idx, node = np.unravel_index(int(np.argmax(stack)), stack.shape)
        entry = IdentityEntry(name=name, kind='identity', max_residual=maxima, tol=tol, status=PASS,
                              required_order=required, worst_node=int(node), worst_time=finest[indices[t_idx]].t)

        if len(trajectories) < 3:
            if maxima[-1] > tol:
                entry.status = INCONCLUSIVE if required < 1.9 else FAIL
        else:
            coarse_N = trajectories[0][0].grid.N
            coarse = [[r[::traj[0].grid.N // coarse_N] for r in level[name]] for traj, level in zip(trajectories, per_level)]
            diffs = [max(float(np.max(np.abs(ra - rb))) for ra, rb in zip(coarse[lvl], coarse[lvl + 1]))
                     for lvl in range(len(trajectories) - 1)]
            entry.differences = diffs
            if max(diffs) <= EXACT_FLOOR * (1.0 + max_A**3):
                entry.status = EXACT
                entry.limit = maxima[-1]
            else:
                h = [math.pi / trajectories[lvl][0].grid.N for lvl in range(len(diffs))]
                entry.order, entry.step_orders = metrics.convergence_order(h, diffs)
                entry.limit = richardson_limit(coarse[-2], coarse[-1], entry.order)
                entry.status = PASS if entry.order >= required else FAIL
            # a nonzero limit fails whatever the observed order
            if entry.limit > tol:
                entry.status = FAIL
        report.entries[name] = entry
    return report


# ---------------------------------------------------------------------------
# inequalities

def _gradient_norm_rhs(d):
    """Upper bound for D_t (b^ij H_i H_j) after the algebraic step."""
    c, a = d.c, d.a
    P = d.P
    return (-(c**2 / a**2) * d.lap_a + 2 * (c / a) * d.lap_gradH + 2 * a * c**2
            + d.A_sq * P + 2 * d.H * d.calc.sigma(d.A_sq) * c / a + d.n * P)


def _gradient_norm_heat_rhs(d):
    c, a, b = d.c, d.a, d.b
    n = d.n
    P = d.P
    return (d.calc.laplacian(P)
            - 2 * (c**2 / a**2) * (d.a_s**2 / a + (n - 1) * d.b_s**2 / b)
            + 4 * (c / a) * (d.a_s * d.H_ss / a + (n - 1) * d.b_s * d.kc / b)
            - 2 * (d.H_ss**2 / a + (n - 1) * d.kc**2 / b)
            + 2 * a * c**2 + d.A_sq * P + 2 * d.H * d.calc.sigma(d.A_sq) * c / a + n * P)


def _gradient_norm_algebraic_sides(d):
    """-b b (2H g - n h)(grad H, grad H) + 2 b(grad H, grad H) and n b(grad H, grad H), from components."""
    c, a = d.c, d.a
    b_grad = c**2 / a
    quadratic = (2 * d.H - d.n * a) * c**2 / a**2
    return -quadratic + 2 * b_grad, d.n * b_grad


def _theta_fields(state, d):
    return dt_H_identity(state) - d.P


def _theta_rhs(state, d):
    n = d.n
    th = _theta_fields(state, d)
    eta = eta_tensor(state, d)
    trace = eta.eta_uu + (n - 1) * eta.eta_ang
    quad = eta.eta_uu**2 / d.a + (n - 1) * eta.eta_ang**2 / d.b - trace**2 / d.H
    return d.calc.laplacian(th) + 2 * (th - n * d.H)**2 / d.H + (d.A_sq + n) * th + 2 * quad + 2 * d.H**3


def inequality_slacks(trajectory, i, D=None):
    D = _DerivativeCache(trajectory) if D is None else D
    d = D[i].require_strict()
    for j in (i - 1, i + 1):
        D[j].require_strict()
    state = trajectory[i]
    dP = normal_time_derivative(trajectory, i, lambda j: D[j].P)
    dTheta = normal_time_derivative(trajectory, i, lambda j: _theta_fields(trajectory[j], D[j]))
    alg_lhs, alg_rhs = _gradient_norm_algebraic_sides(d)
    return {
        'gradient_norm': _gradient_norm_rhs(d) - dP,
        'gradient_norm_algebraic': alg_rhs - alg_lhs,
        'gradient_norm_heat': _gradient_norm_heat_rhs(d) - dP,
        'theta': dTheta - _theta_rhs(state, d),
    }


def inequality_suite(trajectory, max_states=12, tol_scale=10.0):
    """
    Two-sided evaluation of the gradient-norm and Theta inequalities at strictly convex recorded states.

    The heat form of the gradient-norm inequality carries fourth derivatives; when it misses the
    tolerance but stays inside the rounding-noise floor eps (1 + max|A|)^4 / du^4 it is inconclusive.
    """
    D = _DerivativeCache(trajectory)
    grid = trajectory[0].grid
    max_A = _max_A(trajectory.states)
    tol = check_tolerance(grid.du, _record_spacing(trajectory), max_A, tol_scale)
    noise = NOISE_FACTOR * np.finfo(float).eps * (1.0 + max_A)**4 / grid.du**4
    mins = {}
    for i in analysis_indices(trajectory, max_states, margin=1):
        if not all(trajectory[j].convexity.strict for j in (i - 1, i, i + 1)):
            continue
        for name, slack in inequality_slacks(trajectory, i, D).items():
            k = int(np.argmin(slack))
            if name not in mins or slack[k] < mins[name][0]:
                mins[name] = (float(slack[k]), k, trajectory[i].t)

    report = IdentityReport(levels=[grid.N])
    for name in ('gradient_norm', 'gradient_norm_algebraic', 'gradient_norm_heat', 'theta'):
        if name not in mins:
            report.entries[name] = IdentityEntry(name=name, kind='inequality', max_residual=[], tol=tol, status=INCONCLUSIVE)
            continue
        slack, node, t = mins[name]
        entry_tol = 0.0 if name == 'gradient_norm_algebraic' else tol
        status = PASS if slack >= -entry_tol - MINIMALITY_TOL else FAIL
        if status == FAIL and name == 'gradient_norm_heat' and slack >= -noise:
            status = INCONCLUSIVE
        report.entries[name] = IdentityEntry(name=name, kind='inequality', max_residual=[slack], tol=entry_tol,
                                             status=status, worst_node=node, worst_time=t)
    return report


# ---------------------------------------------------------------------------
# backward decay, limit equator and reflection

def fit_limit_equator(source, reference=None):
    """
    Equator minimizing the sum of squared heights of a point cloud.

    `source` is a point array, a ProfileGrid, a FlowState or a Trajectory (earliest state). Returns the
    fitted frame (e from the smallest eigenvector of the second-moment form) and the RMS height.
    """
    if isinstance(source, Trajectory):
        source = source[0]
    if isinstance(source, FlowState):
        source = source.grid
    if isinstance(source, ProfileGrid):
        reference = source.frame if reference is None else reference
        source = sample_points(source)
    pts = np.asarray(source, dtype=float)
    assert pts.ndim == 2 and pts.shape[0] >= pts.shape[1], f"need at least n + 2 sample points, got {pts.shape}"
    w, vecs = np.linalg.eigh(pts.T @ pts)
    if w[1] - w[0] <= FIT_GAP:
        raise DegenerateFit(f"smallest eigenvalue {w[0]:.3e} is not simple (next {w[1]:.3e})")
    e = vecs[:, 0]
    if reference is not None:
        if e @ reference.e < 0:
            e = -e
    elif e[np.argmax(np.abs(e))] < 0:
        e = -e
    axis_a = vecs[:, -1]
    if reference is not None:
        # keep the symmetry axis when it is orthogonal to the fitted e
        a = reference.axis_a - (reference.axis_a @ e) * e
        if np.linalg.norm(a) > 0.5:
            axis_a = a / np.linalg.norm(a)
    residual = float(np.sqrt(np.mean((pts @ e)**2)))
    return EquatorFrame(e=e, axis_a=axis_a), residual


def fit_equator_check(trajectory, tol=FIT_MATCH):
    state = trajectory[0]
    try:
        fitted, residual = fit_limit_equator(state)
    except DegenerateFit as e:
        return {'status': INCONCLUSIVE, 'message': str(e)}
    pts = sample_points(state.grid)
    rms_height = float(np.sqrt(np.mean((pts @ state.grid.frame.e)**2)))
    status = PASS if rms_height - residual <= tol * (1.0 + rms_height) else FAIL
    return {'status': status, 'e': fitted.e, 'residual': residual, 'rms_height': rms_height,
            'angle': float(np.arccos(np.clip(abs(fitted.e @ state.grid.frame.e), 0.0, 1.0)))}


@dataclass
class DecayReport:
    times: np.ndarray
    rates: Dict[str, Optional[float]]
    c0: float
    c1: float
    margins: Dict[str, float]
    passes: Dict[str, bool]
    fit_residuals: np.ndarray

    @property
    def status(self):
        return PASS if all(self.passes.values()) else FAIL

    def summary(self):
        return {'status': self.status, 'rates': self.rates, 'c0': self.c0, 'c1': self.c1,
                'margins': self.margins, 'passes': self.passes}


def decay_check(family, frame, t_window=(-5.0, 0.0), samples=41, fit_window=(-5.0, -1.0), N=64, rate_tol=0.01):
    """
    Backward bounds on the ancient sphere family over t_window.

    Checks H(t) <= H(0) e^{nt}, |A|(t) <= |A|(0) e^{nt} and d/dt log H >= n from closed forms, and fits
    exponential rates of sup H, sup |A|, sup |grad A|^2 and of the height of sampled states above their
    fitted equator; the height rate must match n within rate_tol.

    States are sampled from the centered member of the family; off-center members stop being graphs
    over e far back in time. grad A vanishes on spheres, so the realized c_1 of
    |grad A|^2 <= c_1 e^{2nt} must sit at the rounding floor.
    """
    n = family.n
    centered = replace(family, center_offset=0.0)
    ts = np.linspace(t_window[0], t_window[1], samples)
    H = mean_curvature_at(family, ts)
    A = np.sqrt(curvature_invariants(family, ts)['A_sq'])
    H0 = float(mean_curvature_at(family, 0.0))
    A0 = float(np.sqrt(curvature_invariants(family, 0.0)['A_sq']))
    growth = np.exp(n * ts)
    margins = {
        'H_bound': float(np.min(H0 * growth - H)),
        'A_bound': float(np.min(A0 * growth - A)),
        'log_H_rate': float(np.min(dt_log_mean_curvature(family, ts) - n)),
    }

    fit_ts = ts[(ts >= fit_window[0]) & (ts <= fit_window[1])]
    heights, grad_sq, residuals = [], [], []
    for t in fit_ts:
        grid = sample_as_grid(centered, t, N, frame)
        pts = sample_points(grid)
        fitted, residual = fit_limit_equator(pts, reference=frame)
        heights.append(float(np.max(np.abs(pts @ fitted.e))))
        residuals.append(residual)
        d = CurvatureDerivatives(FlowState.from_grid(grid, t))
        grad_sq.append(float(np.max(d.gradA_sq)))
    heights = np.array(heights)
    grad_sq = np.array(grad_sq)
    c1 = float(np.max(grad_sq * np.exp(-2 * n * fit_ts)))
    fit_H = mean_curvature_at(family, fit_ts)
    fit_A = np.sqrt(curvature_invariants(family, fit_ts)['A_sq'])

    rates = {
        'H': metrics.exponential_rate(fit_ts, fit_H),
        'A': metrics.exponential_rate(fit_ts, fit_A),
        'gradA_sq': metrics.exponential_rate(fit_ts, grad_sq) if np.min(grad_sq) > 1e-20 else None,
        'height': metrics.exponential_rate(fit_ts, heights),
    }
    passes = {
        'H_bound': margins['H_bound'] >= -DECAY_TOL,
        'A_bound': margins['A_bound'] >= -DECAY_TOL,
        'log_H_rate': margins['log_H_rate'] >= -DECAY_TOL,
        'height_rate': abs(rates['height'] / n - 1.0) <= rate_tol,
        'gradA_bound': c1 <= DECAY_TOL * (1.0 + A0**2),
    }
    return DecayReport(times=ts, rates=rates, c0=A0, c1=c1,
                       margins=margins, passes=passes, fit_residuals=np.array(residuals))


@dataclass
class ReflectionReport:
    is_graph: bool
    defect: Optional[float]
    violating_region: Optional[tuple]
    matched: int = 0
    tol: float = MINIMALITY_TOL

    @property
    def status(self):
        if not self.is_graph or self.defect is None:
            return INCONCLUSIVE
        return PASS if self.defect >= -self.tol else FAIL

    def summary(self):
        return {'status': self.status, 'is_graph': self.is_graph, 'defect': self.defect,
                'violating_region': list(self.violating_region) if self.violating_region else None,
                'matched': self.matched, 'tol': self.tol}


def reflection_check(state, spec, n_angles=16, tol=MINIMALITY_TOL):
    """
    Ordering of the reflected upper part against the lower part, measured in height over the equator.

    Points of M in {<x, V> > 0} are reflected, re-expressed as (radial value, projection), and compared
    with the graph of M at the same projection wherever that graph point lies in {<x, V> < 0}.
    """
    grid = state.grid if isinstance(state, FlowState) else state
    shape = state.shape if isinstance(state, FlowState) else shape_data(grid)
    spec.check_frame(grid.frame)
    frame = grid.frame
    if not shape.is_graph:
        return ReflectionReport(is_graph=False, defect=None, violating_region=None)

    pts = sample_points(grid, n_angles=n_angles)
    upper = pts[pts @ spec.v > 0]
    if upper.shape[0] == 0:
        return ReflectionReport(is_graph=True, defect=None, violating_region=None)
    refl = reflect(upper, spec)
    # reflected points on the axis through e have no projection
    keep = np.linalg.norm(refl - np.multiply.outer(refl @ frame.e, frame.e), axis=1) > 1e-10
    refl = refl[keep]
    sigma_r = radial_projection(refl, frame)
    rho_r = radial_distance(refl, frame)
    u_r = np.arccos(np.clip(sigma_r @ frame.axis_a, -1.0, 1.0))
    rho_g = grid.evaluate(u_r)
    graph_pts = polar_to_ambient(rho_g, sigma_r, frame)
    matched = graph_pts @ spec.v < 0
    if not np.any(matched):
        return ReflectionReport(is_graph=True, defect=None, violating_region=None)
    diff = np.cos(rho_r[matched]) - np.cos(rho_g[matched])
    bad = diff < -tol
    region = (float(np.min(u_r[matched][bad])), float(np.max(u_r[matched][bad]))) if np.any(bad) else None
    return ReflectionReport(is_graph=True, defect=float(np.min(diff)), violating_region=region, matched=int(np.sum(matched)), tol=tol)
