import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from calculus import EVEN, d_u
from errors import BoundaryIndex, ChartBreakdown, StepFailure, StepRejected
from hypersurface import ConvexityStatus, ProfileGrid, ShapeData, normal_speed_data, shape_data

CHART_TOL = 1e-6
MAX_REJECTIONS = 5
TERMINATIONS = ('reached_t_end', 'min_radius', 'convexity_lost', 'blowup', 'step_failure', 'chart_breakdown')

# explicit Runge-Kutta tableaus: (stage matrix rows, weights)
TABLEAUS = {
    'euler': ([], [1.0]),
    'rk4': ([[0.5], [0.0, 0.5], [0.0, 0.0, 1.0]], [1 / 6, 1 / 3, 1 / 3, 1 / 6]),
}


@dataclass
class FlowConfig:
    dt: float = 1e-4
    t_end: float = 0.2
    method: str = 'rk4'
    cfl_safety: float = 0.2
    stop_min_radius: float = 0.05
    stop_max_A: float = 1e3
    record_every: int = 1
    t_start: float = 0.0

    def __post_init__(self):
        assert self.dt > 0, f"dt must be positive, got {self.dt}"
        assert 0 < self.cfl_safety <= 1, f"cfl_safety must lie in (0, 1], got {self.cfl_safety}"
        assert 0 < self.stop_min_radius < math.pi / 2, f"stop_min_radius must lie in (0, pi/2), got {self.stop_min_radius}"
        assert self.method in TABLEAUS, f"method must be one of {list(TABLEAUS)}, got {self.method!r}"
        assert self.record_every >= 1, f"record_every must be >= 1, got {self.record_every}"
        assert self.t_end > self.t_start, f"t_end = {self.t_end} must exceed t_start = {self.t_start}"


@dataclass
class FlowState:
    t: float
    grid: ProfileGrid
    shape: ShapeData
    convexity: ConvexityStatus

    @classmethod
    def from_grid(cls, grid, t=0.0):
        shape = shape_data(grid)
        return cls(t=float(t), grid=grid, shape=shape, convexity=shape.convexity)


@dataclass
class Trajectory:
    states: List[FlowState] = field(default_factory=list)
    step_log: List[dict] = field(default_factory=list)
    termination: Optional[str] = None
    message: str = ''

    @property
    def times(self):
        return np.array([s.t for s in self.states])

    def __len__(self):
        return len(self.states)

    def __getitem__(self, index):
        return self.states[index]


def _velocity(grid):
    H, radial_dot = normal_speed_data(grid)
    worst = float(np.min(radial_dot))
    if worst <= CHART_TOL:
        k = int(np.argmin(radial_dot))
        raise ChartBreakdown(f"<nu, d/drho> = {worst:.3e} at u = {grid.u[k]:.4f}; the hypersurface is no longer a radial graph")
    # graph factor v = 1 / <nu, d/drho> turns the normal speed -H into a radial speed
    return -H / radial_dot


def rhs(state):
    """d rho / dt = -H v at every node."""
    return _velocity(state.grid)


def cfl_bound(grid, cfl_safety):
    """cfl_safety du^2 / (max v g^uu + 1); v g^uu = 1 / (sin(rho) sqrt(g_uu))."""
    rho_u = d_u(grid.rho, grid.du, EVEN)
    sin_rho = np.sin(grid.rho)
    scale = float(np.max(1.0 / (sin_rho * np.sqrt(rho_u**2 + sin_rho**2))))
    return cfl_safety * grid.du**2 / (scale + 1.0)


def step(state, dt, method='rk4'):
    stages, weights = TABLEAUS[method]
    grid = state.grid
    ks = [_velocity(grid)]
    for row in stages:
        rho = grid.rho + dt * sum(a * k for a, k in zip(row, ks))
        trial = grid.with_rho(rho)
        if not trial.is_valid():
            raise StepRejected(f"stage state left the chart at t = {state.t:.6g} (dt = {dt:.3e})")
        ks.append(_velocity(trial))
    rho = grid.rho + dt * sum(b * k for b, k in zip(weights, ks))
    new_grid = grid.with_rho(rho)
    if not new_grid.is_valid():
        raise StepRejected(f"rho left (0, pi) or became NaN at t = {state.t + dt:.6g} (dt = {dt:.3e})")
    return FlowState.from_grid(new_grid, state.t + dt)


def _log_entry(state, dt):
    return {'t': state.t, 'dt': dt, 'max_A': state.shape.max_A, 'convexity_margin': state.convexity.margin}


def run(initial, config, progress=True, log_fn=None):
    """
    Integrate from `initial` until t_end or a stopping condition, recording every `record_every` steps.

    The step size is min(dt, CFL bound); a rejected step is retried at half the size, and after
    MAX_REJECTIONS consecutive rejections the run ends with termination 'step_failure'.
    `log_fn`, if given, receives the step-log entry of every recorded state.
    """
    if initial.convexity.kind == 'nonconvex':
        warnings.warn(f"initial state is not weakly convex (margin {initial.convexity.margin:.3e}); flowing anyway")
    initially_convex = initial.convexity.kind != 'nonconvex'
    traj = Trajectory(states=[initial])
    if log_fn is not None:
        log_fn(_log_entry(initial, 0.0))
    state = initial
    accepted = 0
    cfl_warned = False
    pbar = tqdm(total=config.t_end - initial.t, disable=not progress, desc='flow', unit='t')

    while traj.termination is None:
        remaining = config.t_end - state.t
        dt_cfl = cfl_bound(state.grid, config.cfl_safety)
        if dt_cfl < config.dt and not cfl_warned:
            warnings.warn(f"step size limited by the CFL bound: {dt_cfl:.3e} < dt = {config.dt:.3e}")
            cfl_warned = True
        dt = min(config.dt, dt_cfl, remaining)

        rejections = 0
        new_state = None
        while new_state is None:
            try:
                new_state = step(state, dt, config.method)
            except StepRejected as e:
                rejections += 1
                if rejections >= MAX_REJECTIONS:
                    failure = StepFailure(f"{MAX_REJECTIONS} consecutive rejected steps, last: {e}")
                    print(f"!!! {failure}")
                    traj.termination = 'step_failure'
                    traj.message = str(failure)
                    break
                dt /= 2.0
            except ChartBreakdown as e:
                print(f"!!! {e}")
                traj.termination = 'chart_breakdown'
                traj.message = str(e)
                break
        if new_state is None:
            break

        state = new_state
        accepted += 1
        pbar.update(dt)
        traj.step_log.append(_log_entry(state, dt))

        if np.min(state.grid.rho) <= config.stop_min_radius:
            traj.termination = 'min_radius'
        elif state.shape.max_A > config.stop_max_A:
            traj.termination = 'blowup'
        elif initially_convex and state.convexity.kind == 'nonconvex':
            traj.termination = 'convexity_lost'
        elif state.t >= config.t_end - 1e-12 * max(1.0, abs(config.t_end)):
            traj.termination = 'reached_t_end'

        if accepted % config.record_every == 0 or traj.termination is not None:
            traj.states.append(state)
            if log_fn is not None:
                log_fn(traj.step_log[-1])
    pbar.close()
    return traj


def dt_H_identity(state, flip_ambient_sign=False):
    """Delta H + H |A|^2 + n H; flip_ambient_sign negates the ambient n H term (negative control)."""
    shape = state.shape
    sign = -1.0 if flip_ambient_sign else 1.0
    return shape.lapH + shape.H * shape.A_sq + sign * shape.n * shape.H


def tangential_speed(state):
    """u-velocity of the graph points relative to the normal flow, -H v rho_u / g_uu (odd in u)."""
    rho_u = d_u(state.grid.rho, state.grid.du, EVEN)
    return -state.shape.H * state.shape.graph_factor * rho_u / state.shape.g_uu


def time_difference(trajectory, index, values):
    if index <= 0 or index >= len(trajectory) - 1:
        raise BoundaryIndex(f"index {index} has no neighbor on both sides (trajectory has {len(trajectory)} states)")
    t0, t1, t2 = (trajectory[j].t for j in (index - 1, index, index + 1))
    h1, h2 = t1 - t0, t2 - t1
    f0, f1, f2 = (np.asarray(values(j), dtype=float) for j in (index - 1, index, index + 1))
    return (-h2 / (h1 * (h1 + h2))) * f0 + ((h2 - h1) / (h1 * h2)) * f1 + (h1 / (h2 * (h1 + h2))) * f2


def normal_time_derivative(trajectory, index, values, parity=EVEN):
    """
    Normal-parametrization time derivative of a per-node field.

    `values` maps a state index to the field at that state. The graph chart drifts tangentially with
    u-velocity tau relative to the normal flow, so D_t f = d_t f|_u - tau f_u.
    """
    state = trajectory[index]
    f = np.asarray(values(index), dtype=float)
    return time_difference(trajectory, index, values) - tangential_speed(state) * d_u(f, state.grid.du, parity)


def dt_H_material(trajectory, index):
    return normal_time_derivative(trajectory, index, lambda j: trajectory[j].shape.H)
