import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space

from errors import DegeneratePole

UNIT_TOL = 1e-12
POLE_TOL = 1e-10

# Points on S^{n+1} are plain float arrays of shape (..., n+2); every function
# below broadcasts over the leading axes.
SpherePoint = np.ndarray


def sphere_point(coords, tol=UNIT_TOL):
    x = np.asarray(coords, dtype=float)
    norms = np.linalg.norm(x, axis=-1)
    assert np.all(np.abs(norms - 1.0) <= tol), f"point(s) not on the unit sphere, |x| - 1 up to {np.max(np.abs(norms - 1.0)):.3e}"
    return x


@dataclass(frozen=True)
class EquatorFrame:
    e: np.ndarray
    axis_a: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        e = np.asarray(self.e, dtype=float)
        a = np.asarray(self.axis_a, dtype=float)
        assert e.shape == a.shape and e.ndim == 1, f"e and axis_a must be vectors of equal length, got {e.shape} and {a.shape}"
        assert abs(np.linalg.norm(e) - 1) <= UNIT_TOL, "|e| must be 1"
        assert abs(np.linalg.norm(a) - 1) <= UNIT_TOL, "|axis_a| must be 1"
        assert abs(e @ a) <= UNIT_TOL, f"<e, axis_a> must vanish, got {e @ a:.3e}"
        assert self.lam == 1.0, "only the unit sphere (lambda = 1) is supported"
        object.__setattr__(self, 'e', e)
        object.__setattr__(self, 'axis_a', a)

    @classmethod
    def standard(cls, n):
        assert n >= 1, f"n must be positive, got {n}"
        eye = np.eye(n + 2)
        return cls(e=eye[0], axis_a=eye[1])

    @property
    def ambient_dim(self):
        return self.e.shape[0]

    @property
    def n(self):
        return self.ambient_dim - 2

    def complement(self):
        basis = null_space(np.stack([self.e, self.axis_a])).T
        # fix signs so the largest entry of each row is positive
        for i, row in enumerate(basis):
            if row[np.argmax(np.abs(row))] < 0:
                basis[i] = -row
        return basis

    @property
    def w(self):
        return self.complement()[0]


@dataclass(frozen=True)
class ReflectionSpec:
    v: np.ndarray
    delta: float

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        assert abs(np.linalg.norm(v) - 1) <= UNIT_TOL, "reflection normal must be a unit vector"
        assert 0.0 < self.delta < math.pi / 4, f"delta must lie in (0, pi/4), got {self.delta}"
        object.__setattr__(self, 'v', v)

    @classmethod
    def tilted(cls, frame, delta, direction=None):
        """Normal V = -sin(delta) e + cos(delta) m for a unit direction m in E (default axis_a)."""
        m = frame.axis_a if direction is None else np.asarray(direction, dtype=float)
        m = m - (m @ frame.e) * frame.e
        m = m / np.linalg.norm(m)
        return cls(v=-math.sin(delta) * frame.e + math.cos(delta) * m, delta=delta)

    def check_frame(self, frame):
        assert abs(self.v @ frame.e + math.sin(self.delta)) <= UNIT_TOL, \
            f"<V, e> = {self.v @ frame.e:.3e} does not match -sin(delta) = {-math.sin(self.delta):.3e}"


def height(x, frame):
    return np.asarray(x) @ frame.e


def radial_distance(x, frame):
    return np.arccos(np.clip(height(x, frame), -1.0, 1.0))


def radial_projection(x, frame):
    x = np.asarray(x, dtype=float)
    h = height(x, frame)
    x_perp = x - np.multiply.outer(h, frame.e)
    norms = np.linalg.norm(x_perp, axis=-1)
    if np.any(norms < POLE_TOL):
        raise DegeneratePole(f"radial projection of a pole is the whole equator (|x'| = {np.min(norms):.3e})")
    return x_perp / norms[..., None]


def reflect(x, spec):
    x = np.asarray(x, dtype=float)
    return x - 2.0 * np.multiply.outer(x @ spec.v, spec.v)


def polar_to_ambient(rho, sigma, frame):
    rho = np.asarray(rho, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return np.cos(rho)[..., None] * frame.e + np.sin(rho)[..., None] * sigma
