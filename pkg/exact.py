import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp

from errors import Collapsed, NotAGraph
from hypersurface import ProfileGrid
from sphere import EquatorFrame


@dataclass(frozen=True)
class ShrinkingSphere:
    """
    Ancient shrinking geodesic sphere, cos r(t) = kappa0 * exp(n t).

    The center sits on the symmetry axis at angle center_offset from e, so every sample stays
    rotationally symmetric about axis_a.
    """
    n: int
    kappa0: float
    center_offset: float = 0.0

    def __post_init__(self):
        assert self.n >= 2, f"n must be >= 2, got {self.n}"
        assert 0.0 < self.kappa0 < 1.0, f"kappa0 must lie in (0, 1), got {self.kappa0}"

    @property
    def collapse_time(self):
        return -math.log(self.kappa0) / self.n

    def center(self, frame):
        a = self.center_offset
        return math.cos(a) * frame.e + math.sin(a) * frame.axis_a


@dataclass(frozen=True)
class EquatorSolution:
    frame: EquatorFrame

    def mean_curvature_at(self, t):
        return 0.0

    def sample_as_grid(self, N):
        return ProfileGrid.from_profile(self.frame.n, N, self.frame, lambda u: np.full_like(np.asarray(u, dtype=float), math.pi / 2))


def _check_time(s, t):
    t = np.asarray(t, dtype=float)
    if np.any(t >= s.collapse_time):
        raise Collapsed(f"t = {np.max(t):.6g} is at or past the collapse time {s.collapse_time:.6g}")
    return t


def _cos_radius(s, t):
    return s.kappa0 * np.exp(s.n * _check_time(s, t))


def _cot_radius(s, t):
    c = _cos_radius(s, t)
    return c / np.sqrt(1.0 - c**2)


def radius_at(s, t):
    return np.arccos(_cos_radius(s, t))


def mean_curvature_at(s, t):
    return s.n * _cot_radius(s, t)


def curvature_invariants(s, t):
    """H, |A|^2 and C = tr(h^3) of the sphere at time t (all principal curvatures equal cot r)."""
    k = _cot_radius(s, t)
    return {'H': s.n * k, 'A_sq': s.n * k**2, 'C': s.n * k**3}


def dt_mean_curvature(s, t):
    """d/dt H = H^3 / n + n H, the time derivative of n cot r(t)."""
    H = mean_curvature_at(s, t)
    return H**3 / s.n + s.n * H


def dt2_mean_curvature(s, t):
    k = _cot_radius(s, t)
    return s.n**3 * k * (1 + k**2) * (1 + 3 * k**2)


def dt_log_mean_curvature(s, t):
    """d/dt log H = n / sin^2 r >= n, with equality only in the limit r -> pi/2."""
    c = _cos_radius(s, t)
    return s.n / (1.0 - c**2)


def harnack_closed_form(s, t, t_origin):
    """Minimized Harnack expression on the sphere, H^3 / n + H / (2 (t - t_origin)); t_origin = -inf drops the last term."""
    t = np.asarray(t, dtype=float)
    assert np.all(t > t_origin), f"Harnack expression needs t > t_origin = {t_origin}"
    H = mean_curvature_at(s, t)
    out = H**3 / s.n
    if np.isfinite(t_origin):
        out = out + H / (2.0 * (t - t_origin))
    return out


def theta_inequality_sides(s, t):
    """
    Both sides of the Theta evolution inequality on the sphere, from closed forms.

    grad H = 0 makes Theta = dH/dt and eta = H h^2, whose quadratic term vanishes; the two sides
    then agree identically.
    """
    n = s.n
    H = mean_curvature_at(s, t)
    A_sq = curvature_invariants(s, t)['A_sq']
    theta = dt_mean_curvature(s, t)
    lhs = dt2_mean_curvature(s, t)
    rhs = 2 * (theta - n * H)**2 / H + (A_sq + n) * theta + 2 * H**3
    return lhs, rhs


def sphere_profile(s, t):
    """Graph function rho(u) of the sphere at time t, solving cos r = cos(rho) cos(a) + sin(rho) sin(a) cos(u)."""
    r = float(radius_at(s, t))
    a = s.center_offset
    if abs(a) >= r or abs(a) + r >= math.pi / 2:
        raise NotAGraph(f"sphere of radius {r:.6g} centered at offset {a:.6g} is not a radial graph over the equator")
    cos_r = math.cos(r)

    def profile(u):
        u = np.asarray(u, dtype=float)
        A = math.cos(a)
        B = math.sin(a) * np.cos(u)
        # far intersection of the ray from e with the sphere
        return np.arctan2(B, A) + np.arccos(cos_r / np.sqrt(A**2 + B**2))
    return profile


def sample_as_grid(s, t, N, frame):
    assert frame.n == s.n, f"frame is for n = {frame.n}, sphere for n = {s.n}"
    return ProfileGrid.from_profile(s.n, N, frame, sphere_profile(s, t))


def integrate_radius(s, t_values, rtol=1e-12, atol=1e-14):
    t_values = np.atleast_1d(_check_time(s, t_values))
    r0 = math.acos(s.kappa0)
    out = np.full_like(t_values, r0)

    def rhs(t, r):
        return -s.n / np.tan(r)

    # forward and backward from the reference time
    for end in (max(float(t_values.max()), 0.0), min(float(t_values.min()), 0.0)):
        if end == 0.0:
            continue
        sol = solve_ivp(rhs, (0.0, end), [r0], method='DOP853', dense_output=True, rtol=rtol, atol=atol)
        assert sol.success, f"radius integration failed: {sol.message}"
        mask = t_values > 0 if end > 0 else t_values < 0
        out[mask] = sol.sol(t_values[mask])[0]
    return out


def oracle_table(s, t_list, t_origin=-math.inf):
    t = _check_time(s, np.asarray(t_list, dtype=float))
    inv = curvature_invariants(s, t)
    H0 = float(mean_curvature_at(s, 0.0))
    return pd.DataFrame({
        't': t,
        'r': radius_at(s, t),
        'H': inv['H'],
        'A_sq': inv['A_sq'],
        'harnack_min': harnack_closed_form(s, t, t_origin),
        'H_bound': H0 * np.exp(s.n * t),
    })
