import numpy as np

# Parity of a per-node field under reflection through either pole
# (u -> -u at u = 0, u -> 2*pi - u at u = pi).
EVEN = 1.0
ODD = -1.0


def _ghosted(f, parity):
    f = np.asarray(f, dtype=float)
    return np.concatenate([parity * f[1:2], f, parity * f[-2:-1]])


def d_u(f, du, parity=EVEN):
    ext = _ghosted(f, parity)
    return (ext[2:] - ext[:-2]) / (2.0 * du)


def d_uu(f, du, parity=EVEN):
    ext = _ghosted(f, parity)
    return (ext[2:] - 2.0 * ext[1:-1] + ext[:-2]) / du**2


def even_pole_limit(q):
    """Complete an even field at the poles from its interior values, (4 q_1 - q_2) / 3."""
    q = np.array(q, dtype=float)
    q[0] = (4.0 * q[1] - q[2]) / 3.0
    q[-1] = (4.0 * q[-2] - q[-3]) / 3.0
    return q


def over_sin(f, u):
    """f / sin(u) for an odd field f; the quotient is even and completed at the poles."""
    f = np.asarray(f, dtype=float)
    out = np.zeros_like(f)
    out[1:-1] = f[1:-1] / np.sin(u[1:-1])
    return even_pole_limit(out)


def odd_pole_limit(q):
    q = np.array(q, dtype=float)
    q[0] = 0.0
    q[-1] = 0.0
    return q


class AxisymmetricCalculus:
    """
    Covariant calculus on a rotational hypersurface x(u, theta) = cos(rho) e + sin(rho)(cos(u) a + sin(u) theta).

    Works in the orthonormal frame {e_1 = d/dsigma, e_phi} where sigma is arclength along the
    profile; R = sin(rho) sin(u) is the rotational radius and k = R_sigma / R its log-derivative.
    Tensors are diagonal in this frame, so every operator acts on the profile component and on one
    representative angular component (multiplicity n - 1).

    Near the axis only odd-over-odd quotients are formed: truncation errors of even fields do not
    vanish on the axis, and dividing them by R would destroy second-order accuracy there.
    """

    def __init__(self, grid):
        self.n = grid.n
        self.u = grid.u
        self.du = grid.du
        rho = grid.rho
        self.rho_u = d_u(rho, self.du, EVEN)
        self.rho_uu = d_uu(rho, self.du, EVEN)
        self.sin_rho = np.sin(rho)
        self.cos_rho = np.cos(rho)
        self.cot_rho = self.cos_rho / self.sin_rho
        self.g_uu = self.rho_u**2 + self.sin_rho**2
        self.s = np.sqrt(self.g_uu)
        self.s_u = (self.rho_u * self.rho_uu + self.sin_rho * self.cos_rho * self.rho_u) / self.s
        self.R = self.sin_rho * np.sin(self.u)
        self.R[0] = 0.0
        self.R[-1] = 0.0
        self.R_u = self.cos_rho * self.rho_u * np.sin(self.u) + self.sin_rho * np.cos(self.u)

    def sigma(self, f, parity=EVEN):
        return d_u(f, self.du, parity) / self.s

    def sigma2(self, f, parity=EVEN):
        return d_uu(f, self.du, parity) / self.g_uu - d_u(f, self.du, parity) * self.s_u / self.s**3

    def k_times(self, f):
        """k * f for an odd field f (L'Hopital limit at the poles)."""
        f = np.asarray(f, dtype=float)
        return (self.cot_rho * self.rho_u * f + np.cos(self.u) * over_sin(f, self.u)) / self.s

    def over_R(self, f):
        """f / R for an odd field f; the quotient is even and completed at the poles."""
        q = np.zeros_like(np.asarray(f, dtype=float))
        q[1:-1] = f[1:-1] / self.R[1:-1]
        return even_pole_limit(q)

    def hessian(self, f):
        """Diagonal of the Hessian of an even scalar: (profile, angular)."""
        return self.sigma2(f), self.k_times(self.sigma(f))

    def laplacian(self, f):
        # pole values continue the interior stencil to O(du^4)
        pp, ang = self.hessian(np.asarray(f, dtype=float))
        return even_pole_limit(pp + (self.n - 1) * ang)

    def tensor_laplacian(self, a, b):
        """
        Rough Laplacian of the diagonal Codazzi tensor diag(a, b, ..., b): returns (profile, angular).

        The curvature-of-frame terms k^2 (a - b) are written as k b_sigma using the Codazzi relation
        k (a - b) = b_sigma.
        """
        a_s = self.sigma(a)
        b_s = self.sigma(b)
        k_b_s = self.k_times(b_s)
        lap_a = self.sigma2(a) + (self.n - 1) * self.k_times(a_s) - 2 * (self.n - 1) * k_b_s
        lap_b = self.sigma2(b) + (self.n - 1) * k_b_s + 2 * k_b_s
        return lap_a, lap_b

    def one_form_laplacian(self, c):
        """
        Profile component of the rough Laplacian of the one-form c dsigma (c odd).

        (Delta w)_1 = c_ss + (n - 1) k (c_s - k c) = c_ss + (n - 1) R_s (c / R)_s.
        """
        phi = self.over_R(c)
        out = self.sigma2(c, ODD) + (self.n - 1) * (self.R_u / self.s) * self.sigma(phi)
        return odd_pole_limit(out)

    def radius_second_derivative(self):
        """R_sigma_sigma; by the Gauss equation -R_ss = R (1 + kappa_1 kappa_2)."""
        return self.sigma2(self.R, ODD)
