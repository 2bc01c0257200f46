import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.fft import dct
from scipy.interpolate import CubicSpline

from calculus import AxisymmetricCalculus, EVEN, d_u, d_uu, even_pole_limit
from errors import NotStrictlyConvex
from sphere import EquatorFrame

MIN_INTERVALS = 16
TOL_CONVEX = 1e-8



@dataclass(frozen=True)
class ProfileGrid:
    """Axisymmetric radial graph rho(u) over the equator, nodes u_k = k pi / N."""
    n: int
    rho: np.ndarray
    frame: EquatorFrame
    profile: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        assert self.n >= 2, f"hypersurface dimension must be >= 2, got {self.n}"
        assert rho.ndim == 1 and rho.shape[0] - 1 >= MIN_INTERVALS, f"need N >= {MIN_INTERVALS} intervals, got {rho.shape[0] - 1}"
        assert self.frame.n == self.n, f"frame is for S^{self.frame.n + 1}, grid for n = {self.n}"
        object.__setattr__(self, 'rho', rho)

    @classmethod
    def from_profile(cls, n, N, frame, profile):
        u = np.linspace(0.0, math.pi, N + 1)
        return cls(n=n, rho=profile(u), frame=frame, profile=profile)

    def with_rho(self, rho):
        return ProfileGrid(n=self.n, rho=rho, frame=self.frame)

    @property
    def N(self):
        return self.rho.shape[0] - 1

    @property
    def node_count(self):
        return self.rho.shape[0]

    @property
    def u(self):
        return np.linspace(0.0, math.pi, self.node_count)

    @property
    def du(self):
        return math.pi / self.N

    def is_valid(self):
        return bool(np.all(np.isfinite(self.rho)) and np.all(self.rho > 0.0) and np.all(self.rho < math.pi))

    def neumann_defect(self):
        r = self.rho
        left = (-3 * r[0] + 4 * r[1] - r[2]) / (2 * self.du)
        right = (3 * r[-1] - 4 * r[-2] + r[-3]) / (2 * self.du)
        return max(abs(left), abs(right))

    def evaluate(self, u):
        u = np.asarray(u, dtype=float)
        if self.profile is not None:
            return self.profile(u)
        # even extension through both poles makes the profile 2 pi periodic
        uu = np.concatenate([-self.u[:0:-1], self.u, 2 * math.pi - self.u[-2::-1]])
        rr = np.concatenate([self.rho[:0:-1], self.rho, self.rho[-2::-1]])
        spline = CubicSpline(uu, rr)
        return spline(np.mod(u, 2 * math.pi))


def cosine_profile(coefficients):
    """rho(u) = pi/2 - a_0 - sum_m a_m cos(m u) for coefficients [a_0, a_1, ...]."""
    coefficients = [float(c) for c in coefficients]

    def profile(u):
        u = np.asarray(u, dtype=float)
        out = np.full_like(u, math.pi / 2 - coefficients[0])
        for m, a in enumerate(coefficients[1:], start=1):
            out = out - a * np.cos(m * u)
        return out
    return profile


@dataclass
class Embedding:
    positions: np.ndarray   # (N+1, n+2) on S^{n+1}
    tangent: np.ndarray     # x_u
    nu: np.ndarray          # outward unit normal, tangent to the sphere
    radial_dir: np.ndarray  # unit radial coordinate direction d/drho
    slice_positions: np.ndarray
    slice_tangent: np.ndarray
    slice_second: np.ndarray
    slice_nu: np.ndarray
    slice_radial: np.ndarray


def _lift(frame, w, slice_vectors):
    basis = np.stack([frame.e, frame.axis_a, w])
    return slice_vectors @ basis


def embed(grid):
    """
    Positions, tangents and outward normals along the meridian in the plane of e, axis_a and w.

    Ambient derivatives of x = cos(rho) e + sin(rho) sigma(u) use the exact rotation of the
    meridian frame (sigma, sigma') and finite differences of rho only, so rho = const is exact.
    """
    u = grid.u
    rho = grid.rho
    rho_u = d_u(rho, grid.du, EVEN)
    rho_uu = d_uu(rho, grid.du, EVEN)
    c, s = np.cos(rho), np.sin(rho)
    zero = np.zeros_like(u)
    E = np.stack([np.ones_like(u), zero, zero], axis=1)
    sig = np.stack([zero, np.cos(u), np.sin(u)], axis=1)
    dsig = np.stack([zero, -np.sin(u), np.cos(u)], axis=1)
    sig[[0, -1], 2] = 0.0
    X = c[:, None] * E + s[:, None] * sig
    X_u = (-s * rho_u)[:, None] * E + (c * rho_u)[:, None] * sig + s[:, None] * dsig
    X_uu = ((-c * rho_u**2 - s * rho_uu)[:, None] * E
            + (-s * rho_u**2 + c * rho_uu - s)[:, None] * sig
            + (2 * c * rho_u)[:, None] * dsig)
    # X_u x X points away from e for any graph (equals sin(rho) d/drho - rho_u sigma')
    nu = np.cross(X_u, X)
    nu /= np.linalg.norm(nu, axis=1)[:, None]
    radial = -s[:, None] * E + c[:, None] * sig
    w = grid.frame.w
    return Embedding(
        positions=_lift(grid.frame, w, X),
        tangent=_lift(grid.frame, w, X_u),
        nu=_lift(grid.frame, w, nu),
        radial_dir=_lift(grid.frame, w, radial),
        slice_positions=X,
        slice_tangent=X_u,
        slice_second=X_uu,
        slice_nu=nu,
        slice_radial=radial,
    )


@dataclass(frozen=True)
class ConvexityStatus:
    kind: str
    margin: float
    tol: float

    @property
    def strict(self):
        return self.kind == 'strict'


@dataclass
class ShapeData:
    n: int
    position: np.ndarray
    nu: np.ndarray
    g_uu: np.ndarray
    g_ang: np.ndarray
    kappa1: np.ndarray
    kappa2: np.ndarray
    H: np.ndarray
    A_sq: np.ndarray
    C: np.ndarray
    gradH_u: np.ndarray
    lapH: np.ndarray
    graph_factor: np.ndarray
    radial_dot: np.ndarray
    height_normal: np.ndarray
    convexity: ConvexityStatus
    b_uu: Optional[np.ndarray] = None
    b_ang: Optional[np.ndarray] = None
    normgradH_sq: Optional[np.ndarray] = None

    @property
    def h2_uu(self):
        return self.kappa1**2

    @property
    def h2_ang(self):
        return self.kappa2**2

    @property
    def max_A(self):
        return float(np.sqrt(np.max(self.A_sq)))

    @property
    def is_graph(self):
        return bool(np.all(self.height_normal < 0.0))

    def require_strict(self):
        if not self.convexity.strict:
            raise NotStrictlyConvex(f"state is {self.convexity.kind} (margin {self.convexity.margin:.3e}); b^ij is undefined")
        return self


def convexity_status(shape, tol_convex=None):
    if tol_convex is None:
        tol_convex = TOL_CONVEX * max(1.0, float(np.sqrt(np.max(shape.A_sq))))
    margin = float(min(np.min(shape.kappa1), np.min(shape.kappa2)))
    if margin > tol_convex:
        kind = 'strict'
    elif margin < -tol_convex:
        kind = 'nonconvex'
    else:
        kind = 'weak'
    return ConvexityStatus(kind=kind, margin=margin, tol=tol_convex)


def principal_curvatures(grid, emb=None):
    """kappa_1 (profile) and kappa_2 (rotation) at every node, with h_ij = -<d_i d_j x, nu>."""
    emb = embed(grid) if emb is None else emb
    X, X_u, X_uu, nu = emb.slice_positions, emb.slice_tangent, emb.slice_second, emb.slice_nu
    g_uu = np.sum(X_u**2, axis=1)
    # the sphere's own curvature term of d_u d_u x is normal to nu
    kappa1 = -np.sum(X_uu * nu, axis=1) / g_uu
    R = X[:, 2]
    kappa2 = np.zeros_like(kappa1)
    kappa2[1:-1] = nu[1:-1, 2] / R[1:-1]
    return kappa1, even_pole_limit(kappa2)


def normal_speed_data(grid):
    emb = embed(grid)
    kappa1, kappa2 = principal_curvatures(grid, emb)
    radial_dot = np.sum(emb.slice_nu * emb.slice_radial, axis=1)
    return kappa1 + (grid.n - 1) * kappa2, radial_dot


def shape_data(grid, tol_convex=None):
    emb = embed(grid)
    kappa1, kappa2 = principal_curvatures(grid, emb)
    g_uu = np.sum(emb.slice_tangent**2, axis=1)
    R = emb.slice_positions[:, 2]

    n = grid.n
    H = kappa1 + (n - 1) * kappa2
    A_sq = kappa1**2 + (n - 1) * kappa2**2
    C = kappa1**3 + (n - 1) * kappa2**3
    radial_dot = np.sum(emb.nu * emb.radial_dir, axis=1)
    gradH_u = d_u(H, grid.du, EVEN)

    calc = AxisymmetricCalculus(grid)
    shape = ShapeData(
        n=n,
        position=emb.positions,
        nu=emb.nu,
        g_uu=g_uu,
        g_ang=R**2,
        kappa1=kappa1,
        kappa2=kappa2,
        H=H,
        A_sq=A_sq,
        C=C,
        gradH_u=gradH_u,
        lapH=calc.laplacian(H),
        graph_factor=1.0 / radial_dot,
        radial_dot=radial_dot,
        height_normal=emb.nu @ grid.frame.e,
        convexity=None,
    )
    shape.convexity = convexity_status(shape, tol_convex)
    if shape.convexity.strict:
        shape.b_uu = 1.0 / kappa1
        shape.b_ang = 1.0 / kappa2
        shape.normgradH_sq = shape.b_uu * gradH_u**2 / g_uu
    return shape


def _spectral_derivatives(rho):
    """rho, rho_u, rho_uu at the nodes from the DCT-I cosine series of the even profile."""
    N = rho.shape[0] - 1
    y = dct(rho, type=1)
    coef = y / N
    coef[0] /= 2.0
    coef[-1] /= 2.0
    m = np.arange(N + 1)
    # the Nyquist mode has no resolvable derivative on the grid
    m_d = m.astype(float)
    m_d[-1] = 0.0
    u = np.linspace(0.0, math.pi, N + 1)
    mu = np.outer(u, m)
    d1 = -(np.sin(mu) * m_d) @ coef
    d2 = -(np.cos(mu) * m_d**2) @ coef
    return d1, d2


def analytic_axisym_curvatures(grid):
    """Closed-form principal curvatures of the rotational graph, derivatives taken spectrally."""
    rho = grid.rho
    u = grid.u
    rho_u, rho_uu = _spectral_derivatives(rho)
    rho_u[0] = 0.0
    rho_u[-1] = 0.0
    sin_r = np.sin(rho)
    cos_r = np.cos(rho)
    s = np.sqrt(rho_u**2 + sin_r**2)
    kappa1 = (sin_r**2 * cos_r + 2 * rho_u**2 * cos_r - sin_r * rho_uu) / s**3
    kappa2 = np.empty_like(kappa1)
    su = np.sin(u[1:-1])
    kappa2[1:-1] = (sin_r[1:-1] * cos_r[1:-1] * su - rho_u[1:-1] * np.cos(u[1:-1])) / (s[1:-1] * sin_r[1:-1] * su)
    # on the axis rho_u / sin(u) -> +-rho_uu, and the hypersurface is umbilic
    kappa2[0] = (sin_r[0] * cos_r[0] - rho_uu[0]) / sin_r[0]**2
    kappa2[-1] = (sin_r[-1] * cos_r[-1] - rho_uu[-1]) / sin_r[-1]**2
    return kappa1, kappa2


def laplace_beltrami(grid, values):
    values = np.asarray(values, dtype=float)
    assert values.shape == grid.rho.shape, f"field has shape {values.shape}, grid has {grid.rho.shape}"
    return AxisymmetricCalculus(grid).laplacian(values)


def codazzi_residual(grid, shape=None):
    """R d_u kappa_2 - R_u (kappa_1 - kappa_2): Codazzi on a rotational hypersurface, times R."""
    shape = shape_data(grid) if shape is None else shape
    calc = AxisymmetricCalculus(grid)
    dk2 = d_u(shape.kappa2, grid.du, EVEN)
    return calc.R * dk2 - calc.R_u * (shape.kappa1 - shape.kappa2)


def gauss_residual(grid, shape=None):
    """-R_ss - R (1 + kappa_1 kappa_2): intrinsic (profile, angular) curvature vs 1 + kappa_1 kappa_2, times R."""
    shape = shape_data(grid) if shape is None else shape
    calc = AxisymmetricCalculus(grid)
    return -calc.radius_second_derivative() - calc.R * (grid.frame.lam + shape.kappa1 * shape.kappa2)


def sample_points(grid, n_angles=16):
    """Point cloud of the full rotational hypersurface: meridians at angles in the plane of two complement vectors."""
    comp = grid.frame.complement()
    w1 = comp[0]
    w2 = comp[1] if comp.shape[0] > 1 else comp[0]
    u = grid.u
    rho = grid.rho
    pts = []
    for phi in np.linspace(0.0, 2 * math.pi, n_angles, endpoint=False):
        theta = math.cos(phi) * w1 + math.sin(phi) * w2
        sigma = np.cos(u)[:, None] * grid.frame.axis_a + np.sin(u)[:, None] * theta
        pts.append(np.cos(rho)[:, None] * grid.frame.e + np.sin(rho)[:, None] * sigma)
    pts = np.concatenate(pts, axis=0)
    if comp.shape[0] > 2:
        # one meridian along each remaining complement direction, so no direction is missed
        for w_extra in comp[2:]:
            for sgn in (1.0, -1.0):
                sigma = np.cos(u)[:, None] * grid.frame.axis_a + np.sin(u)[:, None] * (sgn * w_extra)
                pts = np.concatenate([pts, np.cos(rho)[:, None] * grid.frame.e + np.sin(rho)[:, None] * sigma], axis=0)
    return pts


def check_grid(grid):
    defect = grid.neumann_defect()
    if defect > 10 * grid.du**2 * max(1.0, float(np.max(np.abs(d_uu(grid.rho, grid.du))))):
        warnings.warn(f"profile is not smooth at the poles: one-sided slope {defect:.3e}")
    return grid
