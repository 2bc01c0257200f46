import math

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression


def fit_slope(x, y):
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    y = np.asarray(y, dtype=float)
    assert x.shape[0] == y.shape[0] >= 2, f"need at least two samples to fit a slope, got {x.shape[0]} and {y.shape[0]}"
    return float(LinearRegression().fit(x, y).coef_[0])


def convergence_order(h, errors):
    """
    Observed order of accuracy from errors at mesh sizes h.

    Returns the slope of the least-squares line through (log h, log error) and the per-step orders
    between consecutive refinements.
    """
    h = np.asarray(h, dtype=float)
    errors = np.asarray(errors, dtype=float)
    assert h.shape == errors.shape, f"h and errors must have equal length. got {h.shape} and {errors.shape}"
    floor = np.finfo(float).tiny
    log_e = np.log(np.maximum(errors, floor))
    steps = [float((log_e[i] - log_e[i + 1]) / math.log(h[i] / h[i + 1])) for i in range(len(h) - 1)]
    return fit_slope(np.log(h), log_e), steps


def exponential_rate(t, values):
    values = np.asarray(values, dtype=float)
    assert np.all(values > 0), "exponential rate needs positive values"
    return fit_slope(t, np.log(values))


def identity_table(report):
    rows = []
    for name, entry in report.entries.items():
        row = {
            'identity': name,
            'kind': entry.kind,
            'status': entry.status,
            'required_order': entry.required_order,
            'order': entry.order,
            'step_orders': ' '.join(f'{o:.4f}' for o in entry.step_orders),
            'tol': entry.tol,
            'limit': entry.limit,
        }
        for N, value in zip(report.levels, entry.max_residual):
            row[f'residual_N{N}'] = value
        for N, value in zip(report.levels[1:], entry.differences):
            row[f'difference_N{N}'] = value
        rows.append(row)
    return pd.DataFrame(rows)


def trajectory_summary(trajectory):
    log = pd.DataFrame(trajectory.step_log)
    final = trajectory[-1]
    return {
        'termination': trajectory.termination,
        'message': trajectory.message,
        'steps': len(trajectory.step_log),
        'recorded_states': len(trajectory),
        't_final': final.t,
        'min_rho': float(np.min(final.grid.rho)),
        'max_rho': float(np.max(final.grid.rho)),
        'max_A': float(log['max_A'].max()) if len(log) else final.shape.max_A,
        'min_convexity_margin': float(log['convexity_margin'].min()) if len(log) else final.convexity.margin,
        'min_dt': float(log['dt'].min()) if len(log) else 0.0,
        'max_dt': float(log['dt'].max()) if len(log) else 0.0,
    }
