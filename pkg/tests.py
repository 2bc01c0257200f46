import contextlib
import io
import json
import math
import os
import tempfile
import unittest
from unittest import mock

import numpy as np
import pandas as pd

import metrics
from calculus import EVEN, ODD, d_u, d_uu, even_pole_limit, over_sin
from errors import BoundaryIndex, Collapsed, DegenerateFit, DegeneratePole, NotAGraph, NotStrictlyConvex, ScenarioError
from exact import (EquatorSolution, ShrinkingSphere, curvature_invariants, dt2_mean_curvature, dt_mean_curvature,
                   harnack_closed_form, integrate_radius, mean_curvature_at, oracle_table, radius_at, sample_as_grid,
                   theta_inequality_sides, sphere_profile)
from flow import FlowConfig, FlowState, dt_H_identity, dt_H_material, run, time_difference
from hypersurface import (ProfileGrid, analytic_axisym_curvatures, codazzi_residual, cosine_profile, embed,
                          gauss_residual, laplace_beltrami, principal_curvatures, sample_points, shape_data)
from run import cli, load_defaults, validate_scenario
from simulate import exit_code
from sphere import (EquatorFrame, ReflectionSpec, height, polar_to_ambient, radial_distance,
                    radial_projection, reflect, sphere_point)
from utils import TRAJECTORY_COLUMNS, deep_merge, read_json, to_jsonable, trajectory_frame, write_json
from verifier import (EXACT, FAIL, IDENTITIES, INCONCLUSIVE, PASS, CurvatureDerivatives, analysis_indices, check_tolerance,
                      combine_status, decay_check, fit_equator_check, fit_limit_equator, harnack_check, identity_suite,
                      inequality_suite, q_ode_check, q_quantity, reflection_check, theta)


def sphere_trajectory(N=32, t_end=0.01, record_every=10, kappa0=0.5):
    frame = EquatorFrame.standard(2)
    family = ShrinkingSphere(n=2, kappa0=kappa0)
    initial = FlowState.from_grid(sample_as_grid(family, 0.0, N, frame), 0.0)
    config = FlowConfig(dt=1e-4, t_end=t_end, record_every=record_every)
    return family, run(initial, config, progress=False)


PERTURBED = [0.6, 0.15, 0.05]
NEAR_EQUATOR = [0.2, 0.0, 0.02]


def perturbed_grid(N, coefficients=PERTURBED, n=2):
    return ProfileGrid.from_profile(n, N, EquatorFrame.standard(n), cosine_profile(coefficients))


def perturbed_trajectory(N=64, dt=1e-4, t_end=0.02, record_every=20, coefficients=PERTURBED):
    initial = FlowState.from_grid(perturbed_grid(N, coefficients), 0.0)
    return run(initial, FlowConfig(dt=dt, t_end=t_end, record_every=record_every), progress=False)


def max_error_order(Ns, errors):
    order, _ = metrics.convergence_order([math.pi / N for N in Ns], errors)
    return order


class TestSphere(unittest.TestCase):
    def test_sphere_point_rejects_off_sphere(self):
        with self.assertRaises(AssertionError):
            sphere_point([1.0, 1.0, 0.0, 0.0])

    def test_standard_frame_complement(self):
        frame = EquatorFrame.standard(3)
        comp = frame.complement()
        self.assertEqual(comp.shape, (3, 5))
        np.testing.assert_allclose(comp @ comp.T, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(comp @ frame.e, 0.0, atol=1e-12)
        np.testing.assert_allclose(comp @ frame.axis_a, 0.0, atol=1e-12)

    def test_frame_requires_orthogonal_axis(self):
        with self.assertRaises(AssertionError):
            EquatorFrame(e=np.array([1.0, 0.0, 0.0, 0.0]), axis_a=np.array([1.0, 0.0, 0.0, 0.0]))

    def test_radial_projection_of_pole(self):
        frame = EquatorFrame.standard(2)
        with self.assertRaises(DegeneratePole):
            radial_projection(frame.e, frame)

    def test_polar_roundtrip(self):
        frame = EquatorFrame.standard(2)
        sigma = frame.complement()[1]
        x = polar_to_ambient(0.7, sigma, frame)
        self.assertAlmostEqual(float(np.linalg.norm(x)), 1.0, places=12)
        self.assertAlmostEqual(float(radial_distance(x, frame)), 0.7, places=12)
        np.testing.assert_allclose(radial_projection(x, frame), sigma, atol=1e-12)
        self.assertAlmostEqual(float(height(x, frame)), math.cos(0.7), places=12)

    def test_reflection_is_an_involutive_isometry(self):
        frame = EquatorFrame.standard(2)
        spec = ReflectionSpec.tilted(frame, 0.2)
        spec.check_frame(frame)
        self.assertAlmostEqual(float(spec.v @ frame.e), -math.sin(0.2), places=12)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 4))
        x /= np.linalg.norm(x, axis=1)[:, None]
        y = reflect(x, spec)
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(reflect(y, spec), x, atol=1e-12)

    def test_reflection_delta_range(self):
        frame = EquatorFrame.standard(2)
        with self.assertRaises(AssertionError):
            ReflectionSpec.tilted(frame, math.pi / 4)

    def test_reflected_height_on_equator(self):
        frame = EquatorFrame.standard(2)
        spec = ReflectionSpec.tilted(frame, 0.3)
        s = np.linspace(0.0, 2 * math.pi, 12, endpoint=False)
        x = np.stack([np.zeros(12), np.cos(s), np.sin(s), np.zeros(12)], axis=1)
        np.testing.assert_allclose(height(reflect(x, spec), frame), 2 * math.sin(0.3) * (x @ spec.v), atol=1e-12)


class TestCalculus(unittest.TestCase):
    def setUp(self):
        self.u = np.linspace(0.0, math.pi, 65)
        self.du = math.pi / 64

    def test_first_derivative_even(self):
        np.testing.assert_allclose(d_u(np.cos(self.u), self.du, EVEN), -np.sin(self.u), atol=1e-3)

    def test_first_derivative_odd(self):
        np.testing.assert_allclose(d_u(np.sin(self.u), self.du, ODD), np.cos(self.u), atol=1e-3)

    def test_second_derivative_even(self):
        np.testing.assert_allclose(d_uu(np.cos(2 * self.u), self.du, EVEN), -4 * np.cos(2 * self.u), atol=1e-2)

    def test_over_sin_pole_limit(self):
        np.testing.assert_allclose(over_sin(np.sin(self.u), self.u), 1.0, atol=1e-3)

    def test_even_pole_limit_exact_for_quadratics(self):
        q = np.cos(self.u)**2
        q_broken = q.copy()
        q_broken[[0, -1]] = 5.0
        np.testing.assert_allclose(even_pole_limit(q_broken)[[0, -1]], 1.0, atol=1e-3)


class TestExactSolutions(unittest.TestCase):
    def setUp(self):
        self.family = ShrinkingSphere(n=2, kappa0=0.5)

    def test_initial_values(self):
        self.assertAlmostEqual(float(radius_at(self.family, 0.0)), math.pi / 3, places=12)
        self.assertAlmostEqual(float(mean_curvature_at(self.family, 0.0)), 2 / math.sqrt(3), places=12)
        self.assertAlmostEqual(float(dt_mean_curvature(self.family, 0.0)), 16 / (3 * math.sqrt(3)), places=10)

    def test_collapse_time(self):
        self.assertAlmostEqual(self.family.collapse_time, math.log(2) / 2, places=12)
        with self.assertRaises(Collapsed):
            radius_at(self.family, self.family.collapse_time)

    def test_radius_law(self):
        self.assertAlmostEqual(float(radius_at(self.family, 0.2)), math.acos(0.5 * math.exp(0.4)), places=12)
        self.assertAlmostEqual(float(radius_at(self.family, 0.2)), 0.72889, places=5)

    def test_integrated_radius_matches_closed_form(self):
        t = np.array([-1.0, -0.3, 0.0, 0.1, 0.2])
        np.testing.assert_allclose(integrate_radius(self.family, t), radius_at(self.family, t), atol=1e-9)

    def test_time_derivatives(self):
        h = 1e-5
        for t in (-2.0, 0.0, 0.2):
            fd = (mean_curvature_at(self.family, t + h) - mean_curvature_at(self.family, t - h)) / (2 * h)
            self.assertAlmostEqual(float(fd), float(dt_mean_curvature(self.family, t)), places=5)
            fd2 = (dt_mean_curvature(self.family, t + h) - dt_mean_curvature(self.family, t - h)) / (2 * h)
            self.assertAlmostEqual(float(fd2), float(dt2_mean_curvature(self.family, t)), places=4)

    def test_curvature_invariants(self):
        inv = curvature_invariants(self.family, 0.0)
        k = 1 / math.sqrt(3)
        self.assertAlmostEqual(float(inv['A_sq']), 2 * k**2, places=12)
        self.assertAlmostEqual(float(inv['C']), 2 * k**3, places=12)

    def test_theta_inequality_is_sharp_on_spheres(self):
        for n in (2, 3, 5):
            family = ShrinkingSphere(n=n, kappa0=0.3)
            lhs, rhs = theta_inequality_sides(family, np.linspace(-2.0, 0.1, 7))
            np.testing.assert_allclose(lhs, rhs, rtol=1e-10)

    def test_harnack_closed_form(self):
        H = float(mean_curvature_at(self.family, 0.1))
        self.assertAlmostEqual(float(harnack_closed_form(self.family, 0.1, -math.inf)), H**3 / 2, places=12)
        self.assertAlmostEqual(float(harnack_closed_form(self.family, 0.1, 0.0)), H**3 / 2 + H / 0.2, places=12)

    def test_oracle_table(self):
        table = oracle_table(self.family, [0.0, -1.0])
        self.assertEqual(list(table.columns), ['t', 'r', 'H', 'A_sq', 'harnack_min', 'H_bound'])
        self.assertAlmostEqual(table['H'][1], 0.135646, places=5)
        self.assertAlmostEqual(table['H_bound'][1], 0.1562717, places=6)
        self.assertTrue(np.all(table['H'] <= table['H_bound'] + 1e-15))

    def test_offcenter_profile_lies_on_the_sphere(self):
        family = ShrinkingSphere(n=2, kappa0=0.5, center_offset=0.2)
        frame = EquatorFrame.standard(2)
        grid = sample_as_grid(family, 0.0, 64, frame)
        pts = sample_points(grid)
        np.testing.assert_allclose(pts @ family.center(frame), 0.5, atol=1e-12)

    def test_offcenter_profile_must_be_a_graph(self):
        with self.assertRaises(NotAGraph):
            sphere_profile(ShrinkingSphere(n=2, kappa0=0.5, center_offset=1.2), 0.0)

    def test_equator_is_static(self):
        eq = EquatorSolution(EquatorFrame.standard(2))
        self.assertEqual(eq.mean_curvature_at(3.0), 0.0)
        np.testing.assert_allclose(eq.sample_as_grid(32).rho, math.pi / 2)


class TestHypersurface(unittest.TestCase):
    def setUp(self):
        self.frame = EquatorFrame.standard(2)

    def test_grid_requires_enough_intervals(self):
        with self.assertRaises(AssertionError):
            ProfileGrid(n=2, rho=np.full(9, 1.0), frame=self.frame)

    def test_embedding(self):
        grid = ProfileGrid.from_profile(2, 64, self.frame, cosine_profile([0.6, 0.15, 0.05]))
        emb = embed(grid)
        np.testing.assert_allclose(np.linalg.norm(emb.positions, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(emb.nu, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.sum(emb.nu * emb.positions, axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.sum(emb.nu * emb.tangent, axis=1), 0.0, atol=1e-12)

    def test_sphere_curvatures(self):
        family = ShrinkingSphere(n=2, kappa0=0.5)
        shape = shape_data(sample_as_grid(family, 0.0, 64, self.frame))
        k = 1 / math.sqrt(3)
        np.testing.assert_allclose(shape.kappa1, k, atol=1e-8)
        np.testing.assert_allclose(shape.kappa2, k, atol=1e-8)
        np.testing.assert_allclose(shape.H, 2 * k, atol=1e-8)
        np.testing.assert_allclose(shape.graph_factor, 1.0, atol=1e-10)
        self.assertTrue(shape.convexity.strict)
        self.assertTrue(shape.is_graph)

    def test_curvatures_match_spectral_formula(self):
        grid = ProfileGrid.from_profile(2, 128, self.frame, cosine_profile([0.6, 0.15, 0.05]))
        k1, k2 = principal_curvatures(grid)
        a1, a2 = analytic_axisym_curvatures(grid)
        np.testing.assert_allclose(k1, a1, atol=5e-3)
        np.testing.assert_allclose(k2, a2, atol=5e-3)

    def test_codazzi_and_gauss(self):
        grid = ProfileGrid.from_profile(2, 128, self.frame, cosine_profile([0.6, 0.15, 0.05]))
        self.assertLess(float(np.max(np.abs(codazzi_residual(grid)))), 1e-2)
        sphere_grid = sample_as_grid(ShrinkingSphere(n=2, kappa0=0.5), 0.0, 64, self.frame)
        self.assertLess(float(np.max(np.abs(gauss_residual(sphere_grid)))), 1e-2)

    def test_equator_is_weakly_convex(self):
        shape = shape_data(EquatorSolution(self.frame).sample_as_grid(32))
        self.assertEqual(shape.convexity.kind, 'weak')
        with self.assertRaises(NotStrictlyConvex):
            shape.require_strict()

    def test_laplacian_of_constant(self):
        grid = ProfileGrid.from_profile(2, 64, self.frame, cosine_profile([0.6, 0.15]))
        np.testing.assert_allclose(laplace_beltrami(grid, np.full(65, 3.0)), 0.0, atol=1e-10)

    def test_laplacian_of_cos_u_on_centered_sphere(self):
        # a centered sphere of radius r is a round n-sphere of radius sin(r) in these coordinates
        grid = sample_as_grid(ShrinkingSphere(n=2, kappa0=0.5), 0.0, 128, self.frame)
        expected = -2 * np.cos(grid.u) / math.sin(math.pi / 3)**2
        np.testing.assert_allclose(laplace_beltrami(grid, np.cos(grid.u)), expected, atol=2e-3)

    def test_curvatures_converge_at_second_order(self):
        Ns = [64, 128, 256]
        errors = []
        for N in Ns:
            grid = perturbed_grid(N)
            k1, k2 = principal_curvatures(grid)
            a1, a2 = analytic_axisym_curvatures(grid)
            errors.append(max(float(np.max(np.abs(k1 - a1))), float(np.max(np.abs(k2 - a2)))))
        self.assertGreaterEqual(max_error_order(Ns, errors), 1.9)

    def test_codazzi_and_gauss_converge_at_second_order(self):
        Ns = [64, 128, 256]
        codazzi = [float(np.max(np.abs(codazzi_residual(perturbed_grid(N))))) for N in Ns]
        gauss = [float(np.max(np.abs(gauss_residual(perturbed_grid(N))))) for N in Ns]
        self.assertGreaterEqual(max_error_order(Ns, codazzi), 1.9)
        self.assertGreaterEqual(max_error_order(Ns, gauss), 1.9)

    def test_nested_derivatives_converge_next_to_the_poles(self):
        commute = IDENTITIES['commute'][0]
        Ns = [64, 128, 256]
        errors = []
        for N in Ns:
            state = FlowState.from_grid(perturbed_grid(N))
            residual = commute(None, 0, {0: CurvatureDerivatives(state)})
            errors.append(float(np.max(np.abs(residual[[1, 2, -3, -2]]))))
        self.assertGreaterEqual(max_error_order(Ns, errors), 1.8)

    def test_spline_evaluation(self):
        profile = cosine_profile([0.6, 0.15, 0.05])
        grid = ProfileGrid.from_profile(2, 128, self.frame, profile).with_rho(profile(np.linspace(0.0, math.pi, 129)))
        u = np.linspace(0.01, math.pi - 0.01, 37)
        np.testing.assert_allclose(grid.evaluate(u), profile(u), atol=1e-5)

    def test_sample_points_on_sphere(self):
        grid = ProfileGrid.from_profile(3, 32, EquatorFrame.standard(3), cosine_profile([0.5, 0.1]))
        pts = sample_points(grid, n_angles=8)
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)


class TestFlow(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.family, cls.traj = sphere_trajectory()

    def test_config_validation(self):
        with self.assertRaises(AssertionError):
            FlowConfig(dt=0.0)
        with self.assertRaises(AssertionError):
            FlowConfig(method='midpoint')

    def test_sphere_run_records(self):
        self.assertEqual(self.traj.termination, 'reached_t_end')
        self.assertEqual(len(self.traj), 11)
        self.assertAlmostEqual(self.traj[-1].t, 0.01, places=10)

    def test_sphere_follows_radius_law(self):
        final = self.traj[-1]
        np.testing.assert_allclose(final.grid.rho, radius_at(self.family, final.t), atol=1e-7)

    def test_dtH_identity_on_sphere(self):
        state = self.traj[0]
        np.testing.assert_allclose(dt_H_identity(state), dt_mean_curvature(self.family, 0.0), atol=1e-8)
        flipped = dt_H_identity(state, flip_ambient_sign=True)
        np.testing.assert_allclose(dt_H_identity(state) - flipped, 2 * 2 * state.shape.H, atol=1e-10)

    def test_material_derivative_on_sphere(self):
        i = 5
        expected = dt_mean_curvature(self.family, self.traj[i].t)
        np.testing.assert_allclose(dt_H_material(self.traj, i), expected, rtol=1e-4)

    def test_time_difference_boundaries(self):
        with self.assertRaises(BoundaryIndex):
            time_difference(self.traj, 0, lambda j: self.traj[j].grid.rho)
        with self.assertRaises(BoundaryIndex):
            time_difference(self.traj, len(self.traj) - 1, lambda j: self.traj[j].grid.rho)

    def test_min_radius_stop(self):
        frame = EquatorFrame.standard(2)
        initial = FlowState.from_grid(sample_as_grid(ShrinkingSphere(n=2, kappa0=0.8), 0.0, 32, frame), 0.0)
        traj = run(initial, FlowConfig(dt=1e-4, t_end=1.0, stop_min_radius=0.6, record_every=100), progress=False)
        self.assertEqual(traj.termination, 'min_radius')
        self.assertLessEqual(float(np.min(traj[-1].grid.rho)), 0.6)

    def test_equator_stays_put(self):
        initial = FlowState.from_grid(EquatorSolution(EquatorFrame.standard(2)).sample_as_grid(32), 0.0)
        traj = run(initial, FlowConfig(dt=1e-3, t_end=0.01), progress=False)
        np.testing.assert_allclose(traj[-1].grid.rho, math.pi / 2, atol=1e-12)

    def test_time_order_of_euler_and_rk4(self):
        frame = EquatorFrame.standard(2)
        initial = FlowState.from_grid(sample_as_grid(self.family, 0.0, 16, frame), 0.0)

        def final_rho(method, dt):
            config = FlowConfig(dt=dt, t_end=0.2, method=method, cfl_safety=1.0, record_every=1000)
            return run(initial, config, progress=False)[-1].grid.rho

        def self_convergence_order(method, dts):
            rho = [final_rho(method, dt) for dt in dts]
            d1 = float(np.max(np.abs(rho[0] - rho[1])))
            d2 = float(np.max(np.abs(rho[1] - rho[2])))
            return math.log2(d1 / d2)

        self.assertAlmostEqual(self_convergence_order('euler', [4e-3, 2e-3, 1e-3]), 1.0, delta=0.1)
        self.assertGreater(self_convergence_order('rk4', [8e-3, 4e-3, 2e-3]), 3.5)

    def test_step_failure_after_repeated_rejections(self):
        initial = FlowState.from_grid(perturbed_grid(32), 0.0)
        with mock.patch.object(ProfileGrid, 'is_valid', return_value=False), contextlib.redirect_stdout(io.StringIO()):
            traj = run(initial, FlowConfig(dt=1e-4, t_end=0.01), progress=False)
        self.assertEqual(traj.termination, 'step_failure')
        self.assertEqual(len(traj), 1)
        self.assertIn('rejected', traj.message)
        self.assertEqual(exit_code([PASS], traj.termination), 1)

    def test_chart_breakdown(self):
        initial = FlowState.from_grid(perturbed_grid(32), 0.0)

        def tangent_normal(grid):
            return np.ones(grid.node_count), np.zeros(grid.node_count)

        with mock.patch('flow.normal_speed_data', side_effect=tangent_normal), contextlib.redirect_stdout(io.StringIO()):
            traj = run(initial, FlowConfig(dt=1e-4, t_end=0.01), progress=False)
        self.assertEqual(traj.termination, 'chart_breakdown')
        self.assertEqual(exit_code([PASS], traj.termination), 1)


class TestVerifier(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.family, cls.traj = sphere_trajectory()

    def test_tolerance_and_status(self):
        self.assertAlmostEqual(check_tolerance(0.1, 0.01, 2.0, 10.0), 10 * 0.02 * 9.0)
        self.assertEqual(combine_status([PASS, INCONCLUSIVE]), INCONCLUSIVE)
        self.assertEqual(combine_status([PASS, FAIL, INCONCLUSIVE]), FAIL)
        self.assertEqual(combine_status([]), PASS)

    def test_q_on_sphere(self):
        state = self.traj[0]
        Q = q_quantity(state, theta(state, dt_H_identity(state)))
        np.testing.assert_allclose(Q, 2 / 3, atol=1e-8)

    def test_theta_needs_strict_convexity(self):
        state = FlowState.from_grid(EquatorSolution(EquatorFrame.standard(2)).sample_as_grid(32))
        with self.assertRaises(NotStrictlyConvex):
            theta(state, np.zeros(33))

    def test_harnack_on_sphere(self):
        report = harnack_check(self.traj)
        self.assertEqual(report.status, PASS)
        self.assertGreater(report.global_min, 0.0)
        self.assertGreaterEqual(report.minimality_slack, -1e-10)
        self.assertEqual(len(report.times), len(self.traj) - 1)

    def test_ancient_harnack_minimum(self):
        report = harnack_check(self.traj, t0=-math.inf)
        self.assertAlmostEqual(report.global_min, 4 / (3 * math.sqrt(3)), places=6)

    def test_negative_control_fails(self):
        report = harnack_check(self.traj, t0=-1e6, flip_ambient_sign=True)
        self.assertEqual(report.status, FAIL)
        self.assertLess(report.global_min, -1.0)

    def test_material_harnack_source(self):
        report = harnack_check(self.traj, dtH_source='material')
        self.assertEqual(report.status, PASS)
        self.assertEqual(len(report.times), len(self.traj) - 2)

    def test_q_ode_on_sphere(self):
        report = q_ode_check(self.traj, epsilon=1e-3)
        self.assertEqual(report.status, PASS)
        self.assertGreater(report.global_min, 0.0)

    def test_identities_on_sphere(self):
        report = identity_suite(self.traj)
        self.assertEqual(report.status, PASS)
        self.assertEqual(set(report.entries), {
            'metric', 'inverse_metric', 'mixed_curvature', 'curvature_heat', 'curvature_lower', 'mean_curvature',
            'laplacian_commutator', 'dtH_evolution', 'gradient_dtH', 'commute', 'A_sq_evolution', 'codazzi', 'gauss'})
        table = report.to_frame()
        self.assertEqual(len(table), 13)
        self.assertIn('residual_N32', table.columns)

    def test_identities_need_interior_states(self):
        _, short = sphere_trajectory(t_end=0.002, record_every=10)
        report = identity_suite(short, names=['metric'])
        self.assertEqual(report.entries['metric'].status, INCONCLUSIVE)

    def test_analysis_indices(self):
        self.assertEqual(analysis_indices(self.traj, max_states=3), [2, 5, 8])

    def test_inequalities_on_sphere(self):
        report = inequality_suite(self.traj)
        self.assertEqual(report.status, PASS)
        self.assertEqual(list(report.entries), ['gradient_norm', 'gradient_norm_algebraic', 'gradient_norm_heat', 'theta'])

    def test_decay_on_ancient_sphere(self):
        report = decay_check(self.family, EquatorFrame.standard(2), samples=21, N=32)
        self.assertEqual(report.status, PASS)
        self.assertAlmostEqual(report.rates['height'], 2.0, places=3)
        self.assertGreaterEqual(report.margins['log_H_rate'], 0.0)

    def test_fit_equator(self):
        frame = EquatorFrame.standard(2)
        grid = sample_as_grid(self.family, -3.0, 64, frame)
        fitted, residual = fit_limit_equator(grid)
        self.assertGreater(float(fitted.e @ frame.e), 1 - 1e-9)
        c = 0.5 * math.exp(-6.0)
        self.assertLess(abs(residual - c) / c, 1e-3)

        fitted, residual = fit_limit_equator(EquatorSolution(frame).sample_as_grid(32))
        self.assertLess(residual, 1e-12)

    def test_fit_equator_degenerate(self):
        s = np.linspace(0.0, 2 * math.pi, 16, endpoint=False)
        pts = np.stack([np.cos(s), np.sin(s), np.zeros(16), np.zeros(16)], axis=1)
        with self.assertRaises(DegenerateFit):
            fit_limit_equator(pts)

    def test_reflection_centered_sphere(self):
        frame = EquatorFrame.standard(2)
        grid = sample_as_grid(self.family, 0.0, 64, frame)
        report = reflection_check(FlowState.from_grid(grid), ReflectionSpec.tilted(frame, 0.1))
        self.assertEqual(report.status, PASS)
        self.assertGreater(report.matched, 0)

    def test_reflection_offcenter_sphere(self):
        frame = EquatorFrame.standard(2)
        grid = sample_as_grid(ShrinkingSphere(n=2, kappa0=0.5, center_offset=0.2), 0.0, 64, frame)
        state = FlowState.from_grid(grid)
        self.assertEqual(reflection_check(state, ReflectionSpec.tilted(frame, 0.3)).status, PASS)
        # the plane leaves the center on the reflected side
        report = reflection_check(state, ReflectionSpec.tilted(frame, 0.1))
        self.assertEqual(report.status, FAIL)
        self.assertIsNotNone(report.violating_region)

    def test_reflection_through_the_center(self):
        frame = EquatorFrame.standard(2)
        grid = sample_as_grid(ShrinkingSphere(n=2, kappa0=0.5, center_offset=0.2), 0.0, 64, frame)
        report = reflection_check(FlowState.from_grid(grid), ReflectionSpec.tilted(frame, 0.2))
        self.assertLessEqual(abs(report.defect), 1e-10)
        self.assertEqual(report.status, PASS)

    def test_reflection_near_equator_sphere(self):
        frame = EquatorFrame.standard(2)
        family = ShrinkingSphere(n=2, kappa0=math.cos(math.pi / 2 - 0.01))
        report = reflection_check(FlowState.from_grid(sample_as_grid(family, 0.0, 64, frame)), ReflectionSpec.tilted(frame, 0.1))
        self.assertEqual(report.status, PASS)
        self.assertGreater(report.defect, 1e-3)

    def test_reflection_of_asymmetric_nonconvex_profile(self):
        frame = EquatorFrame.standard(2)
        # leans toward axis_a by more than the tilt of the plane, with a cos(3u) dent at the pole u = 0
        state = FlowState.from_grid(ProfileGrid.from_profile(2, 128, frame, cosine_profile([0.5, -0.25, 0.0, 0.08])))
        self.assertEqual(state.convexity.kind, 'nonconvex')
        report = reflection_check(state, ReflectionSpec.tilted(frame, 0.05))
        self.assertTrue(report.is_graph)
        self.assertLess(report.defect, 0.0)
        self.assertEqual(report.status, FAIL)
        self.assertIsNotNone(report.violating_region)

    def test_decay_on_offcenter_family(self):
        family = ShrinkingSphere(n=2, kappa0=0.5, center_offset=0.2)
        report = decay_check(family, EquatorFrame.standard(2), samples=21, N=32)
        self.assertEqual(report.status, PASS)
        self.assertTrue(report.passes['gradA_bound'])
        self.assertLess(report.c1, 1e-12)

    def test_fit_equator_check(self):
        near = FlowState.from_grid(perturbed_grid(64, NEAR_EQUATOR))
        result = fit_equator_check([near])
        self.assertEqual(result['status'], PASS)
        self.assertAlmostEqual(result['residual'], result['rms_height'], places=10)

        frame = EquatorFrame.standard(2)
        tilted = sample_as_grid(ShrinkingSphere(n=2, kappa0=0.5, center_offset=0.05), -3.0, 64, frame)
        result = fit_equator_check([FlowState.from_grid(tilted, -3.0)])
        self.assertEqual(result['status'], FAIL)
        self.assertAlmostEqual(result['angle'], 0.05, places=3)


class TestPerturbedFlow(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.traj = perturbed_trajectory()

    def test_run_stays_strictly_convex(self):
        self.assertEqual(self.traj.termination, 'reached_t_end')
        self.assertEqual(len(self.traj), 11)
        self.assertTrue(all(s.convexity.strict for s in self.traj.states))

    def test_harnack(self):
        report = harnack_check(self.traj)
        self.assertEqual(report.status, PASS)
        self.assertGreaterEqual(report.minimality_slack, -1e-10)
        # grad H does not vanish, so V* is a genuine vector field
        self.assertGreater(max(float(np.max(np.abs(v))) for v in report.minimizer_v), 1e-3)

    def test_q_ode(self):
        self.assertEqual(q_ode_check(self.traj, epsilon=0.005).status, PASS)

    def test_inequalities(self):
        report = inequality_suite(self.traj)
        for name in ('gradient_norm', 'gradient_norm_algebraic', 'theta'):
            self.assertEqual(report.entries[name].status, PASS, name)
        self.assertNotEqual(report.entries['gradient_norm_heat'].status, FAIL)

    def test_tangential_correction(self):
        i = 5
        identity = dt_H_identity(self.traj[i])
        corrected = float(np.max(np.abs(dt_H_material(self.traj, i) - identity)))
        at_fixed_u = float(np.max(np.abs(time_difference(self.traj, i, lambda j: self.traj[j].shape.H) - identity)))
        self.assertLess(corrected, at_fixed_u / 5)


class TestIdentityConvergence(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.levels = [perturbed_trajectory(N, dt=2e-5, t_end=0.004, record_every=40) for N in (32, 64, 128)]

    def test_levels_share_recorded_times(self):
        for traj in self.levels[1:]:
            np.testing.assert_allclose(traj.times, self.levels[0].times, atol=1e-15)

    def test_nonzero_limit_fails_despite_order(self):
        def flipped_mean_curvature(traj, i, D):
            return dt_H_material(traj, i) - dt_H_identity(traj[i], flip_ambient_sign=True)

        with mock.patch.dict(IDENTITIES, {'flipped_mean_curvature': (flipped_mean_curvature, 1.9)}):
            report = identity_suite(self.levels, names=['mean_curvature', 'flipped_mean_curvature'])
        right = report.entries['mean_curvature']
        wrong = report.entries['flipped_mean_curvature']
        self.assertIn(right.status, (PASS, EXACT))
        self.assertLessEqual(right.limit, right.tol)
        self.assertEqual(wrong.status, FAIL)
        self.assertGreater(wrong.limit, 1.0)


class TestMetricsAndUtils(unittest.TestCase):
    def test_convergence_order(self):
        h = np.array([0.1, 0.05, 0.025])
        order, steps = metrics.convergence_order(h, 3.0 * h**2)
        self.assertAlmostEqual(order, 2.0, places=10)
        np.testing.assert_allclose(steps, [2.0, 2.0], atol=1e-10)

    def test_exponential_rate(self):
        t = np.linspace(-5.0, -1.0, 9)
        self.assertAlmostEqual(metrics.exponential_rate(t, 3.0 * np.exp(2.0 * t)), 2.0, places=10)

    def test_deep_merge(self):
        merged = deep_merge({'a': {'x': 1, 'y': 2}, 'b': 1}, {'a': {'y': 3}, 'c': 4})
        self.assertEqual(merged, {'a': {'x': 1, 'y': 3}, 'b': 1, 'c': 4})

    def test_to_jsonable(self):
        self.assertEqual(to_jsonable({'v': np.array([1.0, np.inf]), 'k': np.int64(3)}), {'v': [1.0, 'inf'], 'k': 3})

    def test_non_finite_values_survive_json(self):
        report = {'global_min': math.inf, 'worst_time': math.nan, 'values': [1.5, -math.inf]}
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'report.json')
            write_json(report, path)
            parsed = read_json(path)
        self.assertEqual(parsed['global_min'], math.inf)
        self.assertTrue(math.isnan(parsed['worst_time']))
        self.assertEqual(parsed['values'], [1.5, -math.inf])

    def test_trajectory_frame(self):
        _, traj = sphere_trajectory(t_end=0.002, record_every=10)
        frame = trajectory_frame(traj)
        self.assertEqual(list(frame.columns), TRAJECTORY_COLUMNS)
        self.assertEqual(len(frame), len(traj) * 33)
        self.assertTrue(frame['Q_k'].isna().all())


class TestCli(unittest.TestCase):
    def _scenario(self, tmp, **fields):
        scenario = {
            'spec': 1,
            'name': 'small_sphere',
            'n': 2,
            'N': 32,
            'initial': {'kind': 'sphere', 'kappa0': 0.5, 'center_offset': 0.0},
            'flow': {'dt': 1e-4, 't_end': 0.005, 'record_every': 10},
            'checks': ['harnack', 'q_ode', 'identities'],
            'q_ode': {'epsilon': 0.001},
        }
        scenario.update(fields)
        path = os.path.join(tmp, 'scenario.json')
        with open(path, 'w') as f:
            json.dump(scenario, f)
        return path

    def _cli(self, argv):
        out, err = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = cli(argv)
        return code, out.getvalue()

    def test_oracle(self):
        code, out = self._cli(['oracle', '--t', '0', '-1'])
        self.assertEqual(code, 0)
        table = pd.read_csv(io.StringIO(out))
        self.assertAlmostEqual(table['H'][0], 2 / math.sqrt(3), places=12)
        self.assertAlmostEqual(table['H'][1], 0.135646, places=5)

    def test_oracle_past_collapse(self):
        code, _ = self._cli(['oracle', '--t', '1.0'])
        self.assertEqual(code, 1)

    def test_too_few_levels(self):
        code, _ = self._cli(['convergence', 'missing.json', '--levels', '2'])
        self.assertEqual(code, 1)

    def test_invalid_scenarios(self):
        base = load_defaults()
        with self.assertRaises(ScenarioError) as ctx:
            validate_scenario(deep_merge(base, {'spec': 1, 'N': 8}))
        self.assertEqual(ctx.exception.field, 'N')
        with self.assertRaises(ScenarioError) as ctx:
            validate_scenario(deep_merge(base, {'spec': 1, 'checks': ['reflection']}))
        self.assertEqual(ctx.exception.field, 'checks[0].delta')
        with self.assertRaises(ScenarioError) as ctx:
            validate_scenario(deep_merge(base, {'spec': 2}))
        self.assertEqual(ctx.exception.field, 'spec')

    def test_run_passes_on_sphere(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _ = self._cli(['run', self._scenario(tmp), '--output-dir', tmp, '--quiet'])
            self.assertEqual(code, 0)
            with open(os.path.join(tmp, 'small_sphere_report.json')) as f:
                report = json.load(f)
            self.assertEqual(report['termination'], 'reached_t_end')
            self.assertEqual({k: v['status'] for k, v in report['checks'].items()},
                             {'harnack': PASS, 'q_ode': PASS, 'identities': PASS})
            self.assertLess(report['radius_relative_error'], 1e-6)
            table = pd.read_csv(os.path.join(tmp, 'small_sphere_trajectory.csv'))
            self.assertEqual(list(table.columns), TRAJECTORY_COLUMNS)
            np.testing.assert_allclose(table['Q_k'], table['H_k']**2 / 2, rtol=1e-6)

    def test_negative_control_exit_code(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._scenario(tmp, checks=['harnack'], harnack={'flip_ambient_sign': True, 't0': -1.0e6})
            code, _ = self._cli(['run', path, '--output-dir', tmp, '--quiet'])
            self.assertEqual(code, 2)

    def test_reruns_write_identical_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._scenario(tmp, checks=[])
            contents = []
            for sub in ('first', 'second'):
                out_dir = os.path.join(tmp, sub)
                code, _ = self._cli(['run', path, '--output-dir', out_dir, '--quiet'])
                self.assertEqual(code, 0)
                with open(os.path.join(out_dir, 'small_sphere_trajectory.csv'), 'rb') as f:
                    contents.append(f.read())
        self.assertEqual(contents[0], contents[1])

    def test_report_round_trips_through_json(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._scenario(tmp, checks=['harnack'], harnack={'t0': 1.0})
            code, _ = self._cli(['run', path, '--output-dir', tmp, '--quiet'])
            self.assertEqual(code, 3)
            report = read_json(os.path.join(tmp, 'small_sphere_report.json'))
        harnack = report['checks']['harnack']
        self.assertEqual(harnack['status'], INCONCLUSIVE)
        self.assertEqual(harnack['global_min'], math.inf)
        self.assertTrue(math.isnan(harnack['worst_time']))

    def test_unreadable_scenario(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'broken.json')
            with open(path, 'w') as f:
                f.write('{"spec": 1,')
            code, _ = self._cli(['run', path, '--output-dir', tmp, '--quiet'])
            self.assertEqual(code, 1)


if __name__ == '__main__':
    unittest.main()
