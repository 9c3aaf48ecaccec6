"""Sliding-window state and problem assembly over one trajectory interval.

The window of interval k holds the control points whose basis support
intersects [t_{k-1}, t_k) - the n_cp newly appended ones plus the trailing
three older ones - and the bias states at both interval ends. Problems are
assembled over exactly these blocks; all other control points are fixed by
construction of the cubic support.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .factors import (
    BiasFactorGroup,
    ImuFactorGroup,
    LidarFactorGroup,
    ReprojectionFactorGroup,
)
from .solver import PriorFactorGroup, Problem

logger = logging.getLogger(__name__)


@dataclass
class WindowState:
    """Active control point indices and the bias states of one interval."""

    cp_indices: range
    bg_prev: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba_prev: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg_curr: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba_curr: np.ndarray = field(default_factory=lambda: np.zeros(3))


class WindowLayout:
    """Maps global control point indices to problem blocks and offsets."""

    def __init__(self, problem, traj, cp_indices):
        self.problem = problem
        self.rot_block = {}
        self.pos_block = {}
        for g in cp_indices:
            self.rot_block[g] = problem.add_block(f"rot_{g}", traj.rotation_cps[g], kind="so3")
        for g in cp_indices:
            self.pos_block[g] = problem.add_block(f"pos_{g}", traj.position_cps[g])

    def cp_offset(self, kind, g):
        blocks = self.rot_block if kind == "rot" else self.pos_block
        if g not in blocks:
            raise KeyError(f"control point {kind}_{g} outside the window")
        return self.problem.block_offset(blocks[g])

    def rot_value_fn(self, values):
        return lambda g: values[self.rot_block[g]]

    def pos_value_fn(self, values):
        return lambda g: values[self.pos_block[g]]


def _filter_by_window(traj, factors, cp_lo, cp_hi, label):
    """Drop factors whose segment touches control points outside the window."""
    kept, dropped = [], 0
    for f in factors:
        try:
            i = traj.knot_vector.segment_of(f.t)
        except Exception:
            dropped += 1
            continue
        if i - 3 < cp_lo or i > cp_hi:
            dropped += 1
            continue
        kept.append(f)
    if dropped:
        logger.warning("rejected %d %s factors referencing states outside the window",
                       dropped, label)
    return kept


def build_window_problem(traj, window, gravity_world, extrinsics,
                         imu_factors=(), lidar_factors=(), reproj_factors=(),
                         bias_factor=None, prior=None, optimize_bias=True):
    """Assemble the joint problem of Eq-style sliding-window optimization.

    With optimize_bias=False (IMU-only bootstrap) the bias states stay at
    their current estimates: they are not added as blocks and prior entries
    referring to them bind as fixed values.

    Returns (problem, layout, groups_by_name).
    """
    problem = Problem()
    layout = WindowLayout(problem, traj, window.cp_indices)
    cp_lo, cp_hi = window.cp_indices[0], window.cp_indices[-1]

    bias_block_idx = {}
    if optimize_bias:
        bias_block_idx["bg_prev"] = problem.add_block("bg_prev", window.bg_prev)
        bias_block_idx["ba_prev"] = problem.add_block("ba_prev", window.ba_prev)
        bias_block_idx["bg_curr"] = problem.add_block("bg_curr", window.bg_curr)
        bias_block_idx["ba_curr"] = problem.add_block("ba_curr", window.ba_curr)

    groups = {}
    imu_factors = _filter_by_window(traj, imu_factors, cp_lo, cp_hi, "imu")
    if imu_factors:
        if optimize_bias:
            bias_blocks = (bias_block_idx["bg_prev"], bias_block_idx["ba_prev"])
            g = ImuFactorGroup(traj, imu_factors, layout, gravity_world,
                               bias_blocks=bias_blocks)
        else:
            g = ImuFactorGroup(traj, imu_factors, layout, gravity_world,
                               fixed_bias=(window.bg_prev, window.ba_prev))
        problem.add_group(g)
        groups["imu"] = g

    lidar_factors = _filter_by_window(traj, lidar_factors, cp_lo, cp_hi, "lidar")
    if lidar_factors:
        g = LidarFactorGroup(traj, lidar_factors, layout, extrinsics)
        problem.add_group(g)
        groups["lidar"] = g

    reproj_factors = _filter_by_window(traj, reproj_factors, cp_lo, cp_hi, "visual")
    if reproj_factors:
        g = ReprojectionFactorGroup(traj, reproj_factors, layout, extrinsics)
        problem.add_group(g)
        groups["visual"] = g

    if bias_factor is not None and optimize_bias:
        idx = (bias_block_idx["bg_prev"], bias_block_idx["ba_prev"],
               bias_block_idx["bg_curr"], bias_block_idx["ba_curr"])
        off = tuple(problem.block_offset(i) for i in idx)
        g = BiasFactorGroup(bias_factor, idx, off)
        problem.add_group(g)
        groups["bias"] = g

    if prior is not None:
        bindings = []
        for spec in prior.block_specs:
            if spec.name in problem.index:
                bindings.append(problem.index[spec.name])
            elif spec.name == "bias_g":
                bindings.append(bias_block_idx["bg_prev"] if optimize_bias
                                else window.bg_prev)
            elif spec.name == "bias_a":
                bindings.append(bias_block_idx["ba_prev"] if optimize_bias
                                else window.ba_prev)
            else:
                # retained control point not part of this window: hold fixed
                g_idx = int(spec.name.split("_")[1])
                kind = "rot" if spec.name.startswith("rot") else "pos"
                value = (traj.rotation_cps[g_idx] if kind == "rot"
                         else traj.position_cps[g_idx])
                bindings.append(value)
        g = PriorFactorGroup(problem, prior, bindings)
        problem.add_group(g)
        groups["prior"] = g

    return problem, layout, groups


def write_back(traj, window, layout, values, optimize_bias=True):
    """Copy solved block values into the trajectory and window bias states."""
    for g, bi in layout.rot_block.items():
        traj.rotation_cps[g] = values[bi]
    for g, bi in layout.pos_block.items():
        traj.position_cps[g] = values[bi]
    if optimize_bias:
        problem = layout.problem
        window.bg_prev = values[problem.index["bg_prev"]]
        window.ba_prev = values[problem.index["ba_prev"]]
        window.bg_curr = values[problem.index["bg_curr"]]
        window.ba_curr = values[problem.index["ba_curr"]]


def marginalize_window(problem, layout, values, window, n_shared=3):
    """Prior over the trailing shared control points and the current bias.

    The trailing k=3 control points of interval k are exactly the states
    shared with interval k+1; together with the bias at t_k they form the
    retained set. Bias specs are renamed to the junction-relative names the
    next window binds against.
    """
    from .solver import marginalize

    shared = list(window.cp_indices)[-n_shared:]
    keep = [layout.rot_block[g] for g in shared]
    keep += [layout.pos_block[g] for g in shared]
    keep += [problem.index["bg_curr"], problem.index["ba_curr"]]
    prior = marginalize(problem, values, keep)
    for spec in prior.block_specs:
        if spec.name == "bg_curr":
            spec.name = "bias_g"
        elif spec.name == "ba_curr":
            spec.name = "bias_a"
    return prior
