import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor

import numpy as np
import wandb

from exact import EquatorSolution, ShrinkingSphere, sample_as_grid
from flow import FlowConfig, FlowState, cfl_bound, dt_H_identity, run
from hypersurface import ProfileGrid, check_grid, cosine_profile
from metrics import trajectory_summary
from sphere import EquatorFrame, ReflectionSpec
from utils import get_random_run_name, seed_everything, suggested_num_workers, trajectory_frame, write_csv, write_json
from verifier import (EXACT, FAIL, INCONCLUSIVE, PASS, check_tolerance, combine_status, decay_check, fit_equator_check, harnack_check,
                      identity_suite, inequality_suite, q_ode_check, q_quantity, reflection_check, theta)

VERSION = '0.1.0'

warnings.filterwarnings(
    "ignore",
    message="step size limited by the CFL bound",
    category=UserWarning,
)


def build_initial(cfg, N=None):
    n = cfg['n']
    N = cfg['N'] if N is None else N
    frame = EquatorFrame.standard(n)
    init = cfg['initial']
    t_start = cfg['flow']['t_start']
    if init['kind'] == 'equator':
        grid = EquatorSolution(frame).sample_as_grid(N)
    elif init['kind'] == 'sphere':
        family = ShrinkingSphere(n=n, kappa0=init['kappa0'], center_offset=init['center_offset'])
        grid = sample_as_grid(family, t_start, N, frame)
    else:
        grid = ProfileGrid.from_profile(n, N, frame, cosine_profile(init['coefficients']))
    return check_grid(grid)


def flow_config(cfg, **overrides):
    values = dict(cfg['flow'])
    values.update(overrides)
    return FlowConfig(**values)


def sphere_family(cfg):
    init = cfg['initial']
    kappa0 = init['kappa0'] if init.get('kappa0') is not None else 0.5
    return ShrinkingSphere(n=cfg['n'], kappa0=kappa0, center_offset=init.get('center_offset') or 0.0)


def radius_error(cfg, trajectory):
    family = sphere_family(cfg)
    final = trajectory[-1]
    cos_exact = family.kappa0 * math.exp(family.n * final.t)
    cos_sim = float(np.mean(np.cos(final.grid.rho)))
    return abs(cos_sim - cos_exact) / cos_exact


def q_fields(trajectory):
    out = {}
    for idx, state in enumerate(trajectory.states):
        if state.convexity.strict and np.min(state.shape.H) > 0:
            out[idx] = q_quantity(state, theta(state, dt_H_identity(state)))
    return out


def _check_name(check):
    return check if isinstance(check, str) else check['name']


def _run_check(cfg, trajectory, check, t0):
    name = _check_name(check)
    tol_scale = cfg['harnack']['tol_scale']
    if name == 'harnack':
        h = cfg['harnack']
        return harnack_check(trajectory, t0=t0, dtH_source=h['dtH_source'], flip_ambient_sign=h['flip_ambient_sign'],
                             tol_scale=tol_scale, seed=cfg['seed']).summary()
    if name == 'q_ode':
        return q_ode_check(trajectory, epsilon=cfg['q_ode']['epsilon'], t0=t0, tol_scale=tol_scale).summary()
    if name == 'identities':
        return identity_suite(trajectory, max_states=cfg['identities']['max_states'], tol_scale=tol_scale).summary()
    if name == 'inequalities':
        return inequality_suite(trajectory, max_states=cfg['identities']['max_states'], tol_scale=tol_scale).summary()
    if name == 'decay':
        d = cfg['decay']
        return decay_check(sphere_family(cfg), trajectory[0].grid.frame, t_window=tuple(d['t_window']),
                           samples=d['samples'], fit_window=tuple(d['fit_window'])).summary()
    if name == 'reflection':
        spec = ReflectionSpec.tilted(trajectory[0].grid.frame, check['delta'])
        dt = max((e['dt'] for e in trajectory.step_log), default=cfg['flow']['dt'])
        reports = [reflection_check(state, spec, tol=check_tolerance(state.grid.du, dt, state.shape.max_A, tol_scale))
                   for state in trajectory.states]
        measured = [(r.defect, state.t, r) for r, state in zip(reports, trajectory.states) if r.defect is not None]
        if not measured:
            return {'status': INCONCLUSIVE, 'is_graph': all(r.is_graph for r in reports), 'defect': None, 'delta': check['delta']}
        _, t, worst = min(measured, key=lambda x: x[0])
        # any failing state fails the check, not only the one with the lowest defect
        status = combine_status(r.status for _, _, r in measured)
        return dict(worst.summary(), status=status, worst_time=t, delta=check['delta'])
    return fit_equator_check(trajectory)


def run_checks(cfg, trajectory, verbose=True):
    t0 = cfg['harnack']['t0']
    t0 = trajectory[0].t if t0 is None else t0
    checks = cfg['checks']
    if not checks:
        return {}
    if verbose:
        print(f"Running checks: {', '.join(_check_name(c) for c in checks)}")
    with ThreadPoolExecutor(max_workers=min(len(checks), suggested_num_workers())) as executor:
        futures = [executor.submit(_run_check, cfg, trajectory, check, t0) for check in checks]
        results = {_check_name(check): f.result() for check, f in zip(checks, futures)}
    if verbose:
        for name, result in results.items():
            print(f"  {name}: {result['status']}")
    return results


def exit_code(statuses, termination):
    if termination in ('step_failure', 'chart_breakdown'):
        return 1
    status = combine_status(PASS if s == EXACT else s for s in statuses)
    return {PASS: 0, FAIL: 2, INCONCLUSIVE: 3}[status]


def main(cfg, verbose=True):
    seed_everything(cfg['seed'])
    run_name = cfg['name'] or get_random_run_name()
    os.makedirs(cfg['output_dir'], exist_ok=True)

    wandb_cfg = cfg['wandb']
    tracker = wandb.init(
        entity=wandb_cfg['entity'],
        project=wandb_cfg['project'],
        name=run_name,
        config=cfg,
        mode='disabled' if wandb_cfg['project'] is None else wandb_cfg['mode'],
    )

    initial = FlowState.from_grid(build_initial(cfg), cfg['flow']['t_start'])
    if verbose:
        print(f"Scenario {run_name}: n = {cfg['n']}, N = {cfg['N']}, initial {cfg['initial']['kind']}, {initial.convexity.kind}")
    trajectory = run(initial, flow_config(cfg), progress=verbose, log_fn=tracker.log)
    summary = trajectory_summary(trajectory)
    if verbose:
        print(f"Terminated: {trajectory.termination} at t = {summary['t_final']:.6g} after {summary['steps']} steps")

    results = run_checks(cfg, trajectory, verbose=verbose)
    report = {
        'scenario': run_name,
        'version': VERSION,
        'termination': trajectory.termination,
        'trajectory': summary,
        'checks': results,
        'config': cfg,
    }
    if cfg['initial']['kind'] == 'sphere' and cfg['initial']['center_offset'] == 0.0:
        report['radius_relative_error'] = radius_error(cfg, trajectory)
    code = exit_code([r['status'] for r in results.values()], trajectory.termination)
    report['exit_code'] = code

    write_csv(trajectory_frame(trajectory, q_fields(trajectory)), os.path.join(cfg['output_dir'], f'{run_name}_trajectory.csv'))
    write_json(report, os.path.join(cfg['output_dir'], f'{run_name}_report.json'))
    tracker.summary.update({f'{k}_status': v['status'] for k, v in results.items()})
    tracker.finish()
    if verbose:
        print(f"Wrote results to {cfg['output_dir']} (exit code {code})")
    return code


def _run_level(cfg, N, dt, record_every):
    initial = FlowState.from_grid(build_initial(cfg, N), cfg['flow']['t_start'])
    conv = cfg['convergence']
    config = flow_config(cfg, dt=dt, record_every=record_every,
                         t_end=conv['t_end'] if conv['t_end'] is not None else cfg['flow']['t_end'])
    trajectory = run(initial, config, progress=False)
    # exact profile callables do not cross process boundaries
    first = trajectory.states[0]
    first.grid = first.grid.with_rho(first.grid.rho)
    return trajectory


def convergence(cfg, levels=3, verbose=True):
    """
    Run the scenario at N = base, 2 base, ... with a common time step and fit identity orders.

    The common step is half the CFL bound of the finest initial grid so every level records the
    same times. Returns (exit code, order table).
    """
    assert levels >= 3, f"a convergence study needs at least 3 levels, got {levels}"
    conv = cfg['convergence']
    Ns = [conv['base_N'] * 2**i for i in range(levels)]
    finest = build_initial(cfg, Ns[-1])
    dt = min(cfg['flow']['dt'], 0.5 * cfl_bound(finest, cfg['flow']['cfl_safety']))
    record_every = max(1, int(round(conv['record_spacing'] / dt)))
    if verbose:
        print(f"Convergence study over N = {Ns} with dt = {dt:.3e}, recording every {record_every} steps")

    workers = min(len(Ns), suggested_num_workers())
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_level, cfg, N, dt, record_every) for N in Ns]
        trajectories = [f.result() for f in futures]

    for N, traj in zip(Ns, trajectories):
        if verbose:
            print(f"  N = {N}: {traj.termination} with {len(traj)} recorded states")
        if traj.termination in ('step_failure', 'chart_breakdown'):
            return 1, None
    lengths = {len(t) for t in trajectories}
    if len(lengths) > 1:
        warnings.warn(f"levels recorded different numbers of states {sorted(lengths)}; comparing the common prefix")

    report = identity_suite(trajectories, max_states=conv['max_states'], tol_scale=cfg['harnack']['tol_scale'])
    table = report.to_frame()
    os.makedirs(cfg['output_dir'], exist_ok=True)
    write_csv(table, os.path.join(cfg['output_dir'], f"{cfg['name']}_convergence.csv"))
    if verbose:
        for name, entry in report.entries.items():
            order = 'exact' if entry.status == EXACT else f'{entry.order:.3f}'
            print(f"  {name}: order {order} ({entry.status})")
    code = 0 if all(e.status in (PASS, EXACT) for e in report.entries.values()) else 2
    return code, table
