import io
import math
import os
import unittest
from unittest.mock import patch

import networkx as nx
import numpy as np
from pydantic import ValidationError
from scipy.spatial.transform import Rotation

from test import _test_env  # noqa: F401
from test._test_env import TEST_ROOT

from scripts.common.errors import EmptyWindowError, InsufficientSamplesError, NonFiniteStateError
from scripts.synchronization.consensus_controller import KinematicController
from scripts.synchronization.distance_kernels import (
    DistanceKernel,
    arccos_sqrt,
    linear_cos,
    quadratic,
    two_agent_rate_constant,
)
from scripts.synchronization.graph_topology import NetworkGraph, cycle_graph, path_graph, random_tree, triangle_graph
from scripts.synchronization.simulator import (
    SimulationConfig,
    analyze_trace,
    arccot_closed_form,
    closed_loop_step,
    constant_limit_check,
    fit_exponential_rate,
    lyapunov_rate_mismatch,
    format_trace_csv,
    max_pairwise_angle,
    random_cap_state,
    random_state,
    read_trace_csv,
    simulate,
    trace_csv_header,
    two_agent_scalar,
    two_agent_state,
    two_agent_theta_rate,
    write_trace_csv,
)
from scripts.synchronization.sphere_core import drive_with_omega, geodesic_angle, log_time_omega


def _two_agent_run(kernel, theta0, t_end, dt, record_every=1):
    return simulate(
        SimulationConfig(
            graph=path_graph(2),
            kernels=kernel,
            t_end=t_end,
            dt=dt,
            record_every=record_every,
            initial_vectors=two_agent_state(theta0).vectors,
        )
    )


def _pair_angles(trace):
    return geodesic_angle(trace.states[:, 0], trace.states[:, 1])


class SimulationConfigTests(unittest.TestCase):
    def test_exactly_one_start_source(self):
        with self.assertRaises(ValidationError):
            SimulationConfig(graph=path_graph(2), kernels=linear_cos(), t_end=1.0, dt=0.1)
        with self.assertRaises(ValidationError):
            SimulationConfig(
                graph=path_graph(2), kernels=linear_cos(), t_end=1.0, dt=0.1, seed=1, initial_vectors=np.eye(3)[:2]
            )

    def test_step_bounds(self):
        with self.assertRaises(ValidationError):
            SimulationConfig(graph=path_graph(2), kernels=linear_cos(), t_end=0.01, dt=0.1, seed=1)
        with self.assertRaises(ValidationError):
            SimulationConfig(graph=path_graph(2), kernels=linear_cos(), t_end=1.0, dt=0.0, seed=1)
        with self.assertRaises(ValidationError):
            SimulationConfig(graph=path_graph(2), kernels=linear_cos(), t_end=1.0, dt=0.1, record_every=0, seed=1)

    def test_initial_vectors_must_match_graph(self):
        with self.assertRaises(ValidationError):
            SimulationConfig(graph=triangle_graph(), kernels=linear_cos(), t_end=1.0, dt=0.1, initial_vectors=np.eye(3)[:2])

    def test_defaults_come_from_environment(self):
        with patch.dict(os.environ, {"SPHERESYNC_DT": "0.02", "SPHERESYNC_T_END": "3", "SPHERESYNC_RECORD_EVERY": "7"}):
            config = SimulationConfig(graph=path_graph(2), kernels=linear_cos(), seed=4)
        self.assertEqual((config.dt, config.t_end, config.record_every), (0.02, 3.0, 7))

    def test_seeded_initial_state(self):
        config = SimulationConfig(graph=path_graph(3), kernels=linear_cos(), t_end=1.0, dt=0.1, seed=8)
        np.testing.assert_array_equal(config.initial_state().vectors, random_state(3, 8).vectors)


class SimulateTests(unittest.TestCase):
    def test_synchronized_state_is_constant(self):
        start = np.tile([0.0, 0.6, 0.8], (3, 1))
        trace = simulate(
            SimulationConfig(graph=triangle_graph(), kernels=arccos_sqrt(), t_end=10.0, dt=1e-2, record_every=50, initial_vectors=start)
        )
        self.assertTrue(trace.valid)
        np.testing.assert_allclose(trace.states, np.broadcast_to(start, trace.states.shape), atol=1e-15)
        np.testing.assert_array_equal(trace.V, np.zeros(len(trace)))

    def test_sampling_grid(self):
        trace = simulate(
            SimulationConfig(graph=path_graph(3), kernels=linear_cos(), t_end=1.0, dt=0.03, record_every=10, seed=2)
        )
        # 34 steps of 1/34: samples at 0, 10, 20, 30 and the final step
        self.assertEqual(len(trace), 5)
        self.assertEqual(trace.times[0], 0.0)
        self.assertAlmostEqual(trace.times[-1], 1.0, places=12)
        self.assertEqual(trace.states.shape, (5, 3, 3))
        self.assertEqual(trace.edge_error_norms.shape, (5, 2))
        self.assertEqual(trace.omega_norms.shape, (5, 3))

    def test_lyapunov_is_nonincreasing(self):
        for seed in range(4):
            trace = simulate(
                SimulationConfig(graph=cycle_graph(5), kernels=arccos_sqrt(), t_end=5.0, dt=1e-2, record_every=1, seed=seed)
            )
            self.assertTrue(trace.valid, trace.failure)
            self.assertTrue(np.all(np.diff(trace.V) <= 1e-10 * (1.0 + trace.V[0])))
            self.assertTrue(np.all(trace.Vdot <= 0.0))

    def test_two_agent_exponential_bound(self):
        theta0 = math.pi / 4
        trace = _two_agent_run(linear_cos(), theta0, t_end=10.0, dt=1e-3, record_every=10)
        theta = _pair_angles(trace)
        self.assertLess(theta[-1], 1e-4)
        self.assertTrue(np.all(theta <= theta0 * np.exp(-trace.times) * (1.0 + 1e-3)))

    def test_two_agent_arccot_law(self):
        kernel = arccos_sqrt()
        theta0 = math.pi / 4
        trace = _two_agent_run(kernel, theta0, t_end=20.0, dt=5e-3, record_every=20)
        expected = arccot_closed_form(trace.times, theta0, two_agent_rate_constant(kernel))
        self.assertLess(float(np.max(np.abs(_pair_angles(trace) - expected))), 1e-5)

    def test_matches_scalar_reduction(self):
        dt = 1e-2
        for kernel, theta0 in ((linear_cos(), 1.0), (arccos_sqrt(), 2.0)):
            trace = _two_agent_run(kernel, theta0, t_end=5.0, dt=dt)
            scalar = two_agent_scalar(kernel, theta0, t_end=5.0, dt=dt)
            np.testing.assert_allclose(trace.times, scalar.times, atol=1e-12)
            self.assertLess(float(np.max(np.abs(_pair_angles(trace) - scalar.thetas))), 10 * dt * dt)

    def test_global_rotation_commutes_with_the_flow(self):
        rotation = Rotation.from_rotvec([0.3, -1.1, 0.7])
        start = random_state(5, seed=21).vectors
        graph = cycle_graph(5)

        def run(vectors):
            return simulate(
                SimulationConfig(graph=graph, kernels=arccos_sqrt(), t_end=3.0, dt=1e-2, record_every=10, initial_vectors=vectors)
            )

        base = run(start)
        turned = run(rotation.apply(start))
        np.testing.assert_allclose(turned.V, base.V, atol=1e-12)
        np.testing.assert_allclose(turned.edge_error_norms, base.edge_error_norms, atol=1e-12)
        np.testing.assert_allclose(turned.omega_norms, base.omega_norms, atol=1e-12)
        rotated = rotation.apply(base.states.reshape(-1, 3)).reshape(base.states.shape)
        np.testing.assert_allclose(turned.states, rotated, atol=1e-10)

    def test_second_order_in_step(self):
        finals = []
        for dt in (0.01, 0.005, 0.0025):
            trace = simulate(
                SimulationConfig(graph=cycle_graph(4), kernels=linear_cos(), t_end=2.0, dt=dt, record_every=1000, seed=3)
            )
            finals.append(float(trace.V[-1]))
        first, second = abs(finals[0] - finals[1]), abs(finals[1] - finals[2])
        self.assertLess(second, first)
        self.assertGreater(first / second, 3.0)

    def test_trees_synchronize_exponentially(self):
        for n_nodes in range(2, 7):
            for tree in nx.nonisomorphic_trees(n_nodes):
                graph = NetworkGraph(n_nodes=n_nodes, edges=tuple(sorted((min(a, b) + 1, max(a, b) + 1) for a, b in tree.edges())))
                start = random_cap_state(n_nodes, seed=n_nodes, half_angle=0.7)
                self.assertLess(max_pairwise_angle(start.vectors), math.pi / 2)
                trace = simulate(
                    SimulationConfig(graph=graph, kernels=linear_cos(), t_end=50.0, dt=1e-2, record_every=10, initial_vectors=start.vectors)
                )
                report = analyze_trace(trace)
                self.assertTrue(report.synchronized, graph.edges)
                self.assertGreater(report.exp_rate, 0.0)
                self.assertGreater(report.r_squared, 0.999, graph.edges)
                np.testing.assert_allclose(np.linalg.norm(report.limit_vector), 1.0)

    def test_cycle_equilibrium_does_not_move(self):
        phi = 2.0 * math.pi * np.arange(4) / 4
        start = np.stack([np.cos(phi), np.sin(phi), np.zeros(4)], axis=1)
        trace = simulate(
            SimulationConfig(graph=cycle_graph(4), kernels=linear_cos(), t_end=1.0, dt=1e-2, record_every=10, initial_vectors=start)
        )
        self.assertLess(float(np.max(geodesic_angle(trace.states[-1], trace.states[0]))), 1e-10)
        self.assertFalse(analyze_trace(trace).synchronized)

    def test_control_evaluated_twice_per_step(self):
        config = SimulationConfig(graph=path_graph(3), kernels=linear_cos(), t_end=1.0, dt=0.1, record_every=1, seed=4)
        with patch.object(KinematicController, "control", autospec=True, side_effect=KinematicController.control) as control:
            trace = simulate(config)
        self.assertEqual(len(trace), 11)
        self.assertEqual(control.call_count, 1 + 2 * 10)

    def test_lyapunov_increase_flags_and_stops(self):
        repulsive = DistanceKernel(f=lambda s: np.asarray(s), f_prime=lambda s: -np.ones_like(np.asarray(s, dtype=float)))
        trace = _two_agent_run(repulsive, 1.0, t_end=5.0, dt=1e-2)
        self.assertFalse(trace.valid)
        self.assertIn("lyapunov increase", trace.failure)
        self.assertLess(trace.times[-1], 5.0)

    def test_non_finite_state_aborts(self):
        broken = DistanceKernel(
            f=lambda s: np.asarray(s),
            f_prime=lambda s: np.where(np.asarray(s) > 0.5, np.nan, 1.0),
        )
        with self.assertRaises(NonFiniteStateError):
            _two_agent_run(broken, 1.5, t_end=1.0, dt=1e-2)


class DissipationTests(unittest.TestCase):
    """One closed-loop step reproduces dV/dt = -|omega|^2 to first order in the step."""

    def _assert_first_order(self, graph, kernel, seed):
        controller = KinematicController(graph, kernel)
        state = random_state(graph.n_nodes, seed).vectors
        coarse = lyapunov_rate_mismatch(controller, state, 1e-3)
        fine = lyapunov_rate_mismatch(controller, state, 1e-4)
        self.assertTrue(fine < 0.2 * coarse or coarse < 1e-9, f"seed {seed}: {coarse:.3e} -> {fine:.3e}")

    def test_trees(self):
        kernels = (linear_cos(), arccos_sqrt(), quadratic())
        for seed in range(6):
            with self.subTest(seed=seed):
                self._assert_first_order(random_tree(3 + seed, seed), kernels[seed % 3], seed)

    def test_cycles(self):
        kernels = (linear_cos(), arccos_sqrt(), quadratic())
        for seed in range(6):
            with self.subTest(seed=seed):
                self._assert_first_order(cycle_graph(3 + seed), kernels[seed % 3], 100 + seed)

    def test_mismatch_is_nonnegative_and_small(self):
        controller = KinematicController(triangle_graph(), linear_cos())
        mismatch = lyapunov_rate_mismatch(controller, random_state(3, 7).vectors, 1e-4)
        self.assertGreaterEqual(mismatch, 0.0)
        self.assertLess(mismatch, 1e-2)

    def test_cached_control_gives_the_same_step(self):
        controller = KinematicController(cycle_graph(5), quadratic())
        state = random_state(5, 11).vectors
        omegas, _ = controller.control(state)
        np.testing.assert_array_equal(
            closed_loop_step(controller, state, 1e-2, omegas=omegas),
            closed_loop_step(controller, state, 1e-2),
        )


class TwoAgentReductionTests(unittest.TestCase):
    def test_rate_at_one_radian(self):
        self.assertAlmostEqual(two_agent_theta_rate(linear_cos(), 1.0), -2.0 * math.sin(1.0), places=14)
        self.assertAlmostEqual(two_agent_theta_rate(linear_cos(), 1.0), -1.6829, places=4)

    def test_zero_angle_is_an_equilibrium(self):
        scalar = two_agent_scalar(linear_cos(), 0.0, t_end=1.0, dt=0.1)
        np.testing.assert_array_equal(scalar.thetas, np.zeros(11))

    def test_quarter_turn_reached_at_inverse_rate(self):
        kernel = arccos_sqrt()
        c = two_agent_rate_constant(kernel)
        scalar = two_agent_scalar(kernel, math.pi / 2, t_end=1.0 / c, dt=1e-3)
        self.assertAlmostEqual(scalar.thetas[-1], math.pi / 4, delta=1e-6)

    def test_closed_form_starts_at_theta0(self):
        self.assertAlmostEqual(float(arccot_closed_form(0.0, 0.3, 0.5)), 0.3, places=15)
        self.assertAlmostEqual(float(arccot_closed_form(2.0, math.pi / 2, 0.5)), math.pi / 4, places=15)

    def test_rejects_antipodal_start(self):
        with self.assertRaises(ValueError):
            two_agent_scalar(linear_cos(), math.pi, t_end=1.0, dt=0.1)


class DiagnosticsTests(unittest.TestCase):
    def test_exact_exponential(self):
        t = np.linspace(0.0, 10.0, 1001)
        fit = fit_exponential_rate(t, np.exp(-2.0 * t))
        self.assertAlmostEqual(fit.rate, 2.0, delta=1e-6)
        self.assertGreater(fit.r_squared, 0.999999)
        self.assertEqual(fit.n_samples, 501)

    def test_algebraic_decay_has_poor_fit(self):
        t = np.linspace(10.0, 100.0, 1000)
        fit = fit_exponential_rate(t, 1.0 / (1.0 + t), window=1.0)
        self.assertLess(fit.r_squared, 0.99)
        self.assertAlmostEqual(fit.r_squared, 0.93, delta=0.01)

    def test_constant_series(self):
        t = np.linspace(0.0, 1.0, 50)
        self.assertAlmostEqual(fit_exponential_rate(t, np.full(50, 3.0)).rate, 0.0, delta=1e-12)

    def test_floor_and_sample_count(self):
        t = np.linspace(0.0, 1.0, 30)
        values = np.where(t < 0.5, np.exp(-t), 1e-16)
        self.assertEqual(fit_exponential_rate(t, values, window=1.0).n_samples, 15)
        with self.assertRaises(InsufficientSamplesError):
            fit_exponential_rate(t, values, window=0.5)

    def test_frozen_state_has_no_drift(self):
        trace = simulate(
            SimulationConfig(
                graph=path_graph(2), kernels=linear_cos(), t_end=2.0, dt=0.1, record_every=1, initial_vectors=np.tile([1.0, 0.0, 0.0], (2, 1))
            )
        )
        checks = constant_limit_check(trace)
        self.assertEqual([c.tail_drift for c in checks], [0.0, 0.0])
        self.assertTrue(all(c.constant_limit for c in checks))

    def test_log_time_drive_has_no_constant_limit(self):
        decades = tuple(math.e ** k for k in range(1, 7))
        traj = drive_with_omega([1.0, 0.0, 0.0], log_time_omega(), 1.0, decades[-1], 1e-2, checkpoints=decades, record_every=1000)
        (check,) = constant_limit_check(traj, tail=0.7)
        self.assertFalse(check.constant_limit)
        self.assertGreater(check.tail_drift, 0.9)
        for a, b in zip(decades[:-1], decades[1:]):
            self.assertAlmostEqual(float(geodesic_angle(traj.sample_at(a), traj.sample_at(b))), 1.0, delta=1e-3)

    def test_empty_tail_window(self):
        traj = drive_with_omega([1.0, 0.0, 0.0], log_time_omega(), 1.0, 2.0, 1.0)
        with self.assertRaises(EmptyWindowError):
            constant_limit_check(traj, tail=0.25)

    def test_max_pairwise_angle(self):
        self.assertAlmostEqual(max_pairwise_angle(np.eye(3)), math.pi / 2, places=15)
        self.assertEqual(max_pairwise_angle([[0.0, 0.0, 1.0]]), 0.0)


class InitialStateTests(unittest.TestCase):
    def test_random_state_is_deterministic(self):
        np.testing.assert_array_equal(random_state(6, 42).vectors, random_state(6, 42).vectors)
        self.assertFalse(np.array_equal(random_state(6, 42).vectors, random_state(6, 43).vectors))

    def test_single_agent(self):
        state = random_state(1, 0)
        self.assertEqual(state.vectors.shape, (1, 3))
        self.assertAlmostEqual(float(np.linalg.norm(state.vectors[0])), 1.0, places=15)

    def test_uniform_on_sphere(self):
        for seed in (0, 1, 2):
            means = random_state(100_000, seed).vectors.mean(axis=0)
            self.assertLess(float(np.max(np.abs(means))), 0.01)

    def test_cap_state_stays_in_cap(self):
        state = random_cap_state(50, seed=3, half_angle=0.4)
        self.assertTrue(np.all(state.vectors[:, 2] >= math.cos(0.4) - 1e-12))
        self.assertLess(max_pairwise_angle(state.vectors), 0.8)


class TraceCsvTests(unittest.TestCase):
    def setUp(self):
        self.trace = simulate(
            SimulationConfig(graph=path_graph(2), kernels=arccos_sqrt(), t_end=1.0, dt=0.05, record_every=5, seed=12)
        )

    def test_header(self):
        self.assertEqual(
            trace_csv_header(2, 1),
            ["t", "V", "Vdot", "omega_norm_1", "omega_norm_2", "edge_err_1", "nx_1", "ny_1", "nz_1", "nx_2", "ny_2", "nz_2"],
        )
        self.assertTrue(format_trace_csv(self.trace).startswith("t,V,Vdot,omega_norm_1,omega_norm_2,edge_err_1,nx_1"))

    def test_state_at_sample(self):
        self.assertEqual(len(self.trace), 5)
        last = self.trace.state_at(-1)
        self.assertAlmostEqual(last.time, 1.0, places=12)
        np.testing.assert_array_equal(last.vectors, self.trace.states[-1])

    def test_output_is_deterministic(self):
        again = simulate(
            SimulationConfig(graph=path_graph(2), kernels=arccos_sqrt(), t_end=1.0, dt=0.05, record_every=5, seed=12)
        )
        self.assertEqual(format_trace_csv(self.trace), format_trace_csv(again))

    def test_file_round_trip_is_exact(self):
        path = TEST_ROOT / "traces" / "pair.csv"
        write_trace_csv(self.trace, path)
        loaded = read_trace_csv(path)
        for name in ("times", "states", "V", "Vdot", "omega_norms", "edge_error_norms"):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(self.trace, name), name)

    def test_rejects_foreign_header(self):
        with self.assertRaises(ValueError):
            read_trace_csv(io.StringIO("t,V,Vdot,edge_err_1,nx_1\n0,0,0,0,1\n"))


if __name__ == "__main__":
    unittest.main()
