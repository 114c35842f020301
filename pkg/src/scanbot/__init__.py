"""Multi-modal interaction control for a redundant scanning manipulator.

Library layout:
    robot_core   kinematics and dynamics of the 7-DOF chain
    weighting    smooth [0,1] weighting factors (grasp, proximity, contact)
    mode_machine mode selection, task progress, per-mode directives
    planner      minimum-jerk recovery trajectories and SLERP
    perception   synthetic skeleton / point cloud / scan-trajectory pipeline
    controller   the impedance control law shared by all modes, plus probes
    sim          closed-loop contact simulation with scripted scenarios
    cli          batch runner: run / check / plot
"""

from .robot_core import (
    JointState,
    Pose,
    RobotModel,
    Twist,
    Wrench,
    forward_dynamics,
    forward_kinematics,
    gravity,
    integrate,
    jacobian,
    jacobian_dot_times_dq,
    coriolis_matrix,
    mass_matrix,
    null_projector,
    pseudoinverse,
)

__version__ = "0.1.0"
