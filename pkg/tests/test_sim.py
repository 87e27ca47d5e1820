import dataclasses

import numpy as np
import pytest

from riskmpc import obstacles, sim
from riskmpc.bootstrap import BootstrapParams
from riskmpc.obstacles import (
    DiscParams,
    DragBallParams,
    make_constant_velocity,
    make_drag_ball,
    make_frisbee,
    step_obstacle,
)
from riskmpc.planner import PlannerConfig
from riskmpc.sim import FigureEight, Scenario, aim_obstacle, measure, run_episode, summarize

DT = 0.05


def fast_scenario(**kwargs):
    """Small, quick-running scenario used across the sim tests."""
    defaults = dict(
        case="constant_velocity",
        seed=5,
        bootstrap=BootstrapParams(
            n_train=60, n_step=5, rank_threshold=12.0, rank_relax=4,
            ensemble_size=12, window=16, horizon=10,
        ),
        planner=PlannerConfig(epsilon=0.25),
        crossing_delay=(1.0, 2.0),
        tail_duration=2.0,
    )
    defaults.update(kwargs)
    return Scenario(**defaults)


class TestObstacleStep:
    def test_constant_velocity_advances_linearly(self):
        model = make_constant_velocity([0, 0, 0], [1.0, 0, 0], radius=0.2)
        out = step_obstacle(model, DT)
        np.testing.assert_allclose(out.center, [0.05, 0.0, 0.0], atol=1e-15)

    def test_dragfree_ball_is_ballistic(self):
        model = make_drag_ball([0, 0, 10.0], [3.0, 0, 5.0], 0.2, DragBallParams(drag_rate=0.0))
        out = model
        for _ in range(40):
            out = step_obstacle(out, DT)
        t = 40 * DT
        np.testing.assert_allclose(
            out.center, [3.0 * t, 0.0, 10.0 + 5.0 * t - 0.5 * 9.81 * t * t], atol=1e-8
        )

    def test_linear_drag_matches_closed_form(self):
        c = 0.4
        v0 = np.array([4.0, -1.0, 6.0])
        model = make_drag_ball([0, 0, 0], v0, 0.2, DragBallParams(drag_rate=c))
        out = model
        for _ in range(60):
            out = step_obstacle(out, DT)
        t = 60 * DT
        g = np.array([0.0, 0.0, -9.81])
        v_term = g / c
        pos = v_term * t + (v0 - v_term) * (1.0 - np.exp(-c * t)) / c
        np.testing.assert_allclose(out.center, pos, atol=1e-6)
        vel = v_term + (v0 - v_term) * np.exp(-c * t)
        np.testing.assert_allclose(out.velocity, vel, atol=1e-6)

    def test_no_gravity_ball_speed_decays(self):
        model = make_drag_ball([0, 0, 0], [5.0, 2.0, 1.0], 0.2,
                               DragBallParams(drag_rate=0.3, gravity=0.0))
        speeds = []
        out = model
        for _ in range(50):
            out = step_obstacle(out, DT)
            speeds.append(np.linalg.norm(out.velocity))
        assert all(s2 <= s1 + 1e-12 for s1, s2 in zip(speeds, speeds[1:]))

    def test_disc_flies_smooth_and_curved(self):
        model = make_frisbee(
            [0, 0, 2.0], [6.0, 0, 0.5], 0.25, attitude=(0.05, -0.08, 0.0),
            rates=(0.0, 0.0, 50.0),
        )
        track = [model.center.copy()]
        out = model
        for _ in range(120):
            out = step_obstacle(out, DT)
            track.append(out.center.copy())
        track = np.asarray(track)
        assert np.all(np.isfinite(track))
        assert out.state.shape == (12,)
        # curved: lateral deviation from the launch line builds up
        assert abs(track[-1, 1]) > 0.05
        # smooth: per-step displacement changes slowly
        steps = np.diff(track, axis=0)
        assert np.max(np.linalg.norm(np.diff(steps, axis=0), axis=1)) < 0.05

    def test_state_dimensions_enforced(self):
        with pytest.raises(ValueError):
            obstacles.ObstacleModel(kind="frisbee", state=np.zeros(6), radius=0.2)
        with pytest.raises(ValueError):
            obstacles.ObstacleModel(kind="unknown", state=np.zeros(6), radius=0.2)


class TestMeasure:
    def test_zero_width_exact(self):
        rng = np.random.default_rng(0)
        out = measure(np.array([1.0, 2.0, 3.0]), 0.0, rng)
        np.testing.assert_array_equal(out, [1.0, 2.0, 3.0])

    def test_bounds_and_mean(self):
        rng = np.random.default_rng(1)
        center = np.array([0.5, -1.0, 2.0])
        draws = np.array([measure(center, 0.125, rng) for _ in range(10**5)])
        dev = draws - center
        assert np.all(np.abs(dev) <= 0.125)
        # mean within 3 sigma of the uniform mean estimator
        sigma = 0.125 / np.sqrt(3.0) / np.sqrt(10**5)
        assert np.all(np.abs(dev.mean(axis=0)) <= 3.0 * sigma)

    def test_seeded_stream_repeats(self):
        a = [measure(np.zeros(3), 0.1, np.random.default_rng(7)) for _ in range(1)]
        b = [measure(np.zeros(3), 0.1, np.random.default_rng(7)) for _ in range(1)]
        np.testing.assert_array_equal(a, b)


class TestAiming:
    def test_crossing_passes_through_reference_curve(self):
        sc = fast_scenario(crossing_offset=(0.0, 0.0))
        rng = np.random.default_rng(3)
        obstacle, k_cross = aim_obstacle(sc, rng)
        out = obstacle
        for _ in range(k_cross):
            out = step_obstacle(out, sc.dt)
        target = sc.reference.outputs(k_cross * sc.dt)[0, :3]
        np.testing.assert_allclose(out.center, target, atol=1e-9)

    def test_speed_in_case_range(self):
        for case in ("constant_velocity", "drag_ball", "frisbee"):
            sc = fast_scenario(case=case)
            rng = np.random.default_rng(11)
            obstacle, _ = aim_obstacle(sc, rng)
            speed = np.linalg.norm(obstacle.velocity)
            lo, hi = sim.SPEED_RANGES[case]
            assert lo <= speed <= hi + 1e-12


class TestEpisode:
    def test_far_obstacle_is_uneventful(self):
        # park the obstacle far away: obstacle crosses the curve long after
        # the episode ends
        sc = fast_scenario(crossing_delay=(50.0, 50.0), max_duration=7.0,
                           crossing_offset=(0.0, 0.0))
        res = run_episode(sc, 0)
        assert not res.collided
        assert res.d_min > 5.0
        assert res.n_infeasible == 0

    def test_blind_tracking_collides_on_designed_crossing(self):
        sc = fast_scenario(planner_enabled=False, crossing_offset=(0.0, 0.0), seed=9)
        res = run_episode(sc, 0)
        assert res.collided

    def test_planner_avoids_designed_crossing(self):
        sc = fast_scenario(crossing_offset=(0.0, 0.0), seed=9,
                           planner=PlannerConfig(epsilon=0.05))
        res = run_episode(sc, 0)
        if res.feasible_throughout:
            assert not res.collided
        assert res.d_min > sc.obstacle_radius + sc.planner.agent_radius or not res.feasible_throughout

    def test_determinism(self):
        sc = fast_scenario(dump_trajectories=True)
        a = run_episode(sc, 3)
        b = run_episode(sc, 3)
        assert a.d_min == b.d_min
        np.testing.assert_array_equal(a.trajectories["agent"], b.trajectories["agent"])
        c = run_episode(sc, 4)
        assert c.d_min != a.d_min

    def test_collision_flag_consistent(self):
        sc = fast_scenario(planner_enabled=False, crossing_offset=(0.0, 0.0), seed=9)
        res = run_episode(sc, 0)
        assert res.collided == (res.d_min < sc.obstacle_radius + sc.planner.agent_radius)


class TestMonteCarlo:
    def test_single_run_equals_episode(self):
        sc = fast_scenario()
        rows, episodes = sim.monte_carlo(sc, n_runs=1, epsilons=[0.25], jobs=1)
        direct = run_episode(
            dataclasses.replace(
                sc, planner=dataclasses.replace(sc.planner, epsilon=0.25)
            ),
            0,
        )
        assert rows[0]["n_runs"] == 1
        assert rows[0]["mean_d_min"] == pytest.approx(direct.d_min)
        assert episodes[0].collided == direct.collided

    def test_matched_seeds_across_epsilons(self):
        sc = fast_scenario()
        rows, episodes = sim.monte_carlo(sc, n_runs=2, epsilons=[0.5, 1.0], jobs=1)
        # same run index means the same obstacle launch across risk levels
        assert episodes[0].seed_key == episodes[2].seed_key

    def test_summary_shape(self):
        sc = fast_scenario()
        rows, _ = sim.monte_carlo(sc, n_runs=2, epsilons=[0.5], jobs=1)
        row = rows[0]
        for key in ("pct_feasible", "pct_success", "mean_d_min", "std_d_min", "n_runs"):
            assert key in row

    def test_rejects_zero_runs(self):
        with pytest.raises(ValueError):
            sim.monte_carlo(fast_scenario(), n_runs=0, epsilons=[0.5])
