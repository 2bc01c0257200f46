import json
import math
import os
import random

import numpy as np
import pandas as pd

TRAJECTORY_COLUMNS = ['t', 'k', 'u_k', 'rho_k', 'H_k', 'kappa1_k', 'kappa2_k', 'A_sq_k', 'Q_k']
FLOAT_FORMAT = '%.17g'
NON_FINITE = {'inf': math.inf, '-inf': -math.inf, 'nan': math.nan}


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed)


def get_random_run_name():
    sizes = ["tiny", "small", "slim", "round", "great", "wide"]

    adjectives = [
        "ancient", "convex", "shrinking", "smooth", "steady", "umbilic",
        "geodesic", "polar", "spherical", "minimal", "tilted", "mirrored"]

    shapes = [
        "cap", "sphere", "equator", "meridian", "hemisphere", "lune",
        "pole", "graph", "slice", "shell", "orbit", "chart"
    ]
    return '_'.join([
        random.choice(sizes),
        random.choice(adjectives),
        random.choice(shapes)
    ])


def suggested_num_workers():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def deep_merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        # JSON has no inf / nan; they are written as strings and restored by read_json
        return value if math.isfinite(value) else repr(value)
    return obj


def write_json(obj, path):
    with open(path, 'w') as f:
        json.dump(to_jsonable(obj), f, indent=2, sort_keys=False)


def from_jsonable(obj):
    if isinstance(obj, dict):
        return {k: from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [from_jsonable(v) for v in obj]
    if isinstance(obj, str) and obj in NON_FINITE:
        return NON_FINITE[obj]
    return obj


def read_json(path):
    with open(path) as f:
        return from_jsonable(json.load(f))


def trajectory_frame(trajectory, q_fields=None):
    frames = []
    for idx, state in enumerate(trajectory.states):
        q = None if q_fields is None else q_fields.get(idx)
        N1 = state.grid.node_count
        frames.append(pd.DataFrame({
            't': np.full(N1, state.t),
            'k': np.arange(N1),
            'u_k': state.grid.u,
            'rho_k': state.grid.rho,
            'H_k': state.shape.H,
            'kappa1_k': state.shape.kappa1,
            'kappa2_k': state.shape.kappa2,
            'A_sq_k': state.shape.A_sq,
            'Q_k': np.full(N1, np.nan) if q is None else q,
        }))
    return pd.concat(frames, ignore_index=True)[TRAJECTORY_COLUMNS]


def write_csv(frame, path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
