import argparse
import json
import math
import os
import sys
import warnings

import numpy as np
import yaml

from errors import Collapsed, ScenarioError
from exact import ShrinkingSphere, oracle_table
from hypersurface import MIN_INTERVALS, cosine_profile
from simulate import convergence, main
from utils import FLOAT_FORMAT, deep_merge

DEFAULTS_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'configs', 'default_flow.yaml')
CHECKS = ('harnack', 'q_ode', 'identities', 'inequalities', 'decay', 'reflection', 'fit_equator')
SCENARIO_VERSION = 1


def load_defaults():
    with open(DEFAULTS_PATH, 'r') as f:
        return yaml.safe_load(f)


def _require(condition, field, message):
    if not condition:
        raise ScenarioError(field, message)


def validate_scenario(cfg):
    _require(cfg.get('spec') == SCENARIO_VERSION, 'spec', f"schema version must be {SCENARIO_VERSION}, got {cfg.get('spec')!r}")
    _require(isinstance(cfg['n'], int) and cfg['n'] >= 2, 'n', f"must be an integer >= 2, got {cfg['n']!r}")
    _require(isinstance(cfg['N'], int) and cfg['N'] >= MIN_INTERVALS, 'N', f"must be an integer >= {MIN_INTERVALS}, got {cfg['N']!r}")

    init = cfg['initial']
    kind = init.get('kind')
    _require(kind in ('equator', 'sphere', 'profile'), 'initial.kind', f"must be equator, sphere or profile, got {kind!r}")
    if kind == 'sphere':
        _require(isinstance(init.get('kappa0'), (int, float)) and 0 < init['kappa0'] < 1, 'initial.kappa0',
                 f"must lie in (0, 1), got {init.get('kappa0')!r}")
        _require(isinstance(init.get('center_offset'), (int, float)), 'initial.center_offset', "must be a number")
    if kind == 'profile':
        coeffs = init.get('coefficients')
        _require(isinstance(coeffs, list) and len(coeffs) >= 1 and all(isinstance(c, (int, float)) for c in coeffs),
                 'initial.coefficients', "must be a non-empty list of numbers")
        rho = cosine_profile(coeffs)(np.linspace(0.0, math.pi, 1025))
        _require(np.all(rho > 0) and np.all(rho < math.pi), 'initial.coefficients',
                 f"profile leaves (0, pi): range [{np.min(rho):.4f}, {np.max(rho):.4f}]")

    flow = cfg['flow']
    _require(flow['dt'] > 0, 'flow.dt', f"must be positive, got {flow['dt']}")
    _require(flow['t_end'] > flow['t_start'], 'flow.t_end', f"must exceed t_start = {flow['t_start']}")
    _require(flow['method'] in ('rk4', 'euler'), 'flow.method', f"must be rk4 or euler, got {flow['method']!r}")
    _require(0 < flow['cfl_safety'] <= 1, 'flow.cfl_safety', f"must lie in (0, 1], got {flow['cfl_safety']}")
    _require(0 < flow['stop_min_radius'] < math.pi / 2, 'flow.stop_min_radius', f"must lie in (0, pi/2), got {flow['stop_min_radius']}")
    _require(isinstance(flow['record_every'], int) and flow['record_every'] >= 1, 'flow.record_every', "must be a positive integer")

    _require(isinstance(cfg['checks'], list), 'checks', "must be a list")
    for i, check in enumerate(cfg['checks']):
        name = check if isinstance(check, str) else check.get('name') if isinstance(check, dict) else None
        _require(name in CHECKS, f'checks[{i}]', f"unknown check {name!r}; known: {', '.join(CHECKS)}")
        if name == 'reflection':
            _require(isinstance(check, dict) and isinstance(check.get('delta'), (int, float)) and 0 < check['delta'] < math.pi / 4,
                     f'checks[{i}].delta', "reflection needs delta in (0, pi/4)")

    _require(cfg['harnack']['dtH_source'] in ('identity', 'material'), 'harnack.dtH_source',
             f"must be identity or material, got {cfg['harnack']['dtH_source']!r}")
    _require(cfg['q_ode']['epsilon'] > 0, 'q_ode.epsilon', "must be positive")
    return cfg


def load_scenario(path, overrides=None):
    """Scenario JSON merged over the YAML defaults, then command-line overrides."""
    with open(path, 'r') as f:
        try:
            scenario = json.load(f)
        except json.JSONDecodeError as e:
            raise ScenarioError('file', f"cannot parse: {e}")
    if not isinstance(scenario, dict):
        raise ScenarioError('file', "top level must be an object")
    cfg = deep_merge(load_defaults(), scenario)
    cfg = deep_merge(cfg, {k: v for k, v in (overrides or {}).items() if v is not None})
    return validate_scenario(cfg)


def _scenario_or_exit(path, overrides):
    try:
        return load_scenario(path, overrides)
    except OSError as e:
        print(f"{path}: {e}", file=sys.stderr)
    except ScenarioError as e:
        print(f"{path}: {e}", file=sys.stderr)
    return None


def cmd_run(args):
    cfg = _scenario_or_exit(args.scenario, {'output_dir': args.output_dir, 'seed': args.seed})
    if cfg is None:
        return 1
    try:
        return main(cfg, verbose=not args.quiet)
    except (ValueError, RuntimeError, AssertionError) as e:
        print(f"{args.scenario}: {e}", file=sys.stderr)
        return 1


def cmd_convergence(args):
    if args.levels < 3:
        print(f"--levels must be at least 3, got {args.levels}", file=sys.stderr)
        return 1
    cfg = _scenario_or_exit(args.scenario, {'output_dir': args.output_dir, 'seed': args.seed})
    if cfg is None:
        return 1
    try:
        code, _ = convergence(cfg, levels=args.levels, verbose=not args.quiet)
    except (ValueError, RuntimeError, AssertionError) as e:
        print(f"{args.scenario}: {e}", file=sys.stderr)
        return 1
    return code


def cmd_oracle(args):
    try:
        family = ShrinkingSphere(n=args.n, kappa0=args.kappa0)
        table = oracle_table(family, args.t)
    except (AssertionError, Collapsed) as e:
        print(f"oracle: {e}", file=sys.stderr)
        return 1
    table.to_csv(sys.stdout, index=False, float_format=FLOAT_FORMAT)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(description="Mean curvature flow of convex hypersurfaces in S^{n+1}: simulation and verification.")
    sub = parser.add_subparsers(dest='command', required=True)

    p_run = sub.add_parser('run', help="Flow a scenario and run its checks.")
    p_run.add_argument('scenario', help="Path to the scenario JSON file.")
    p_conv = sub.add_parser('convergence', help="Identity residual orders over grid refinements.")
    p_conv.add_argument('scenario', help="Path to the scenario JSON file.")
    p_conv.add_argument('--levels', type=int, default=3, help="Number of refinement levels (N doubles per level, >= 3).")
    for p in (p_run, p_conv):
        p.add_argument('--output-dir', default=None, help="Overrides output_dir of the scenario.")
        p.add_argument('--seed', type=int, default=None, help="Seed for the sampled Harnack directions.")
        p.add_argument('--quiet', action='store_true', help="No progress output.")

    p_oracle = sub.add_parser('oracle', help="Closed-form values of the shrinking sphere family as CSV.")
    p_oracle.add_argument('--n', type=int, default=2)
    p_oracle.add_argument('--kappa0', type=float, default=0.5)
    p_oracle.add_argument('--t', type=float, nargs='+', default=[0.0])
    return parser


def cli(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, 'quiet', False):
        warnings.filterwarnings("ignore", category=UserWarning)
    return {'run': cmd_run, 'convergence': cmd_convergence, 'oracle': cmd_oracle}[args.command](args)


if __name__ == '__main__':
    sys.exit(cli())
