import itertools

import numpy as np
import pytest

import scanbot.mode_machine as mm
from scanbot.weighting import WeightingFactors

TH = mm.Thresholds(a_ht=0.8, a_ft=0.5, a_pt=0.9, eps=0.05)
K_G = np.diag([400.0] * 3 + [20.0] * 3)
K_GN = 10.0 * np.eye(7)


def factors(a_h=0.0, a_p=0.0, a_f=0.0):
    return WeightingFactors(a_h=a_h, a_p=a_p, a_f=a_f)


class TestSelectMode:
    def test_grasp_has_priority(self):
        mode = mm.select_mode(factors(a_h=0.9, a_p=1.0, a_f=1.0), 0.0, True,
                              TH, mm.Mode.SCANNING)
        assert mode is mm.Mode.HUMAN_GUIDED

    def test_no_trajectory_waits(self):
        mode = mm.select_mode(factors(), float("inf"), False, TH, mm.Mode.WAITING)
        assert mode is mm.Mode.WAITING

    def test_scanning_by_position(self):
        mode = mm.select_mode(factors(a_p=0.95, a_f=0.6), 0.01, True,
                              TH, mm.Mode.RECOVERY)
        assert mode is mm.Mode.SCANNING

    def test_contact_alone_confirms_scanning(self):
        mode = mm.select_mode(factors(a_p=0.0, a_f=0.7), 0.2, True,
                              TH, mm.Mode.RECOVERY)
        assert mode is mm.Mode.SCANNING

    def test_recovery_otherwise(self):
        mode = mm.select_mode(factors(a_p=0.95, a_f=0.1), 0.2, True,
                              TH, mm.Mode.SCANNING)
        assert mode is mm.Mode.RECOVERY

    def test_alternative_grouping_flag(self):
        # contact alone does not suffice under the alternative precedence
        w = factors(a_p=0.0, a_f=0.7)
        assert mm.select_mode(w, 0.2, True, TH, mm.Mode.RECOVERY,
                              contact_overrides_error=False) is mm.Mode.RECOVERY
        assert mm.select_mode(w, 0.01, True, TH, mm.Mode.RECOVERY,
                              contact_overrides_error=False) is mm.Mode.SCANNING

    def test_exhaustive_truth_table(self):
        # every branch against an independently coded predicate
        d = 1e-6
        for a_h, a_p, a_f, err, has_traj in itertools.product(
                [0.0, TH.a_ht - d, TH.a_ht, 1.0],
                [0.0, TH.a_pt, TH.a_pt + d, 1.0],
                [0.0, TH.a_ft, TH.a_ft + d, 1.0],
                [0.0, TH.eps - d, TH.eps, 2 * TH.eps],
                [True, False]):
            got = mm.select_mode(factors(a_h, a_p, a_f), err, has_traj,
                                 TH, mm.Mode.WAITING)
            if a_h >= TH.a_ht:
                expected = mm.Mode.HUMAN_GUIDED
            elif not has_traj:
                expected = mm.Mode.WAITING
            elif ((err < TH.eps) and (a_p > TH.a_pt)) or (a_f > TH.a_ft):
                expected = mm.Mode.SCANNING
            else:
                expected = mm.Mode.RECOVERY
            assert got is expected, (a_h, a_p, a_f, err, has_traj)

    def test_corner_rows_of_mode_table(self):
        # recovery: not grasped, no contact, error too large for proximity
        assert mm.select_mode(factors(a_p=0.5), 0.2, True, TH,
                              mm.Mode.SCANNING) is mm.Mode.RECOVERY
        # human-guided: grasped, anything else
        assert mm.select_mode(factors(a_h=1.0, a_p=0.3, a_f=0.2), 0.2, True,
                              TH, mm.Mode.SCANNING) is mm.Mode.HUMAN_GUIDED
        # scanning: close and in contact
        assert mm.select_mode(factors(a_p=1.0, a_f=1.0), 0.0, True, TH,
                              mm.Mode.WAITING) is mm.Mode.SCANNING
        # waiting: nothing available
        assert mm.select_mode(factors(), float("inf"), False, TH,
                              mm.Mode.WAITING) is mm.Mode.WAITING


class TestTaskProgress:
    def test_advance_only_while_scanning(self):
        p = mm.TaskProgress(T=30.0, N_pts=100, dt=1e-3)
        p = mm.advance_progress(p, mm.Mode.SCANNING)
        assert p.scan_ticks == 1
        for mode in (mm.Mode.RECOVERY, mm.Mode.WAITING, mm.Mode.HUMAN_GUIDED):
            assert mm.advance_progress(p, mode).scan_ticks == 1

    def test_increment_value(self):
        p = mm.TaskProgress(T=30.0, N_pts=100, dt=1e-3, scan_ticks=1000)
        p2 = mm.advance_progress(p, mm.Mode.SCANNING)
        assert abs(p2.t_p - 1.001) < 1e-12

    def test_clamps_and_flags_completion(self):
        p = mm.TaskProgress(T=1.0, N_pts=10, dt=1e-3, scan_ticks=1000)
        assert p.complete
        assert p.t_p == 1.0
        assert mm.advance_progress(p, mm.Mode.SCANNING).scan_ticks == 1000

    def test_exact_tick_identity(self):
        p = mm.TaskProgress(T=5.0, N_pts=10, dt=1e-3)
        modes = [mm.Mode.SCANNING, mm.Mode.RECOVERY] * 700
        scanning = 0
        for mode in modes:
            p = mm.advance_progress(p, mode)
            scanning += mode is mm.Mode.SCANNING
        assert p.scan_ticks == scanning
        assert p.t_p == scanning * 1e-3


class TestTrajectoryIndex:
    def test_start_clamps_to_one(self):
        assert mm.trajectory_index(0.0, 30.0, 100) == 1

    def test_end(self):
        assert mm.trajectory_index(30.0, 30.0, 100) == 100

    def test_midpoint(self):
        assert mm.trajectory_index(15.0, 30.0, 100) == 50

    def test_nearest_integer(self):
        assert mm.trajectory_index(0.154, 30.0, 100) == 1
        assert mm.trajectory_index(0.16, 30.0, 100) == 1
        assert mm.trajectory_index(0.45, 30.0, 100) == 2

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            mm.trajectory_index(31.0, 30.0, 100)


class TestDirectives:
    def test_human_guided_row(self):
        d = mm.directives_for(mm.Mode.HUMAN_GUIDED, K_G, K_GN)
        assert d.x_d_source is mm.XdSource.CURRENT_POSE
        assert d.q_dn_policy is mm.QdnPolicy.CURRENT_Q
        assert np.all(d.K_d_max == 0.0) and np.all(d.K_dn_max == 0.0)

    def test_scanning_row(self):
        d = mm.directives_for(mm.Mode.SCANNING, K_G, K_GN)
        assert d.x_d_source is mm.XdSource.SCAN_TRAJECTORY
        assert d.q_dn_policy is mm.QdnPolicy.NOMINAL
        np.testing.assert_array_equal(d.K_d_max, K_G)
        np.testing.assert_array_equal(d.K_dn_max, K_GN)

    def test_recovery_row(self):
        d = mm.directives_for(mm.Mode.RECOVERY, K_G, K_GN)
        assert d.x_d_source is mm.XdSource.RECOVERY_PLAN
        assert d.q_dn_policy is mm.QdnPolicy.RESAMPLE_EVERY_100_CYCLES
        np.testing.assert_array_equal(d.K_d_max, K_G)

    def test_waiting_row(self):
        d = mm.directives_for(mm.Mode.WAITING, K_G, K_GN)
        assert d.x_d_source is mm.XdSource.FROZEN_POSE
        assert d.q_dn_policy is mm.QdnPolicy.FROZEN_Q
        np.testing.assert_array_equal(d.K_d_max, K_G)


class TestThresholds:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            mm.Thresholds(a_ht=1.5)
        with pytest.raises(ValueError):
            mm.Thresholds(eps=-1.0)


class TestModeTracker:
    def test_transitions_recorded(self):
        tracker = mm.ModeTracker()
        assert tracker.update(mm.Mode.WAITING, 0.0) is False
        assert tracker.update(mm.Mode.RECOVERY, 1.0) is True
        assert tracker.update(mm.Mode.RECOVERY, 1.001) is False
        assert tracker.update(mm.Mode.SCANNING, 2.0) is True
        assert tracker.transitions == [(1.0, "waiting", "recovery"),
                                       (2.0, "recovery", "scanning")]
