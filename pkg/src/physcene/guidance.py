"""Collision, room-layout and reachability guidance objectives and their gradient.

All objectives are non-positive sums of 3D IoUs. The gradient used during
sampling only moves object locations and yaw angles; it is taken by central
finite differences in physical units and mapped back to the encoded scene
vector.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from physcene.diffusion import GuidanceConfig
from physcene.geometry import OrientedBox3, box_arrays, obb_iou_3d, obb_iou_3d_batch
from physcene.reachability import DEFAULT_RESOLUTION, AgentSpec, ReachResult, reach_pipeline
from physcene.scene import FloorPlan, SceneCodec, SceneLayout, scene_boxes, slots_to_boxes

BoxesLike = SceneLayout | Sequence[OrientedBox3]


def _boxes(scene: BoxesLike) -> list[OrientedBox3]:
    return scene_boxes(scene) if isinstance(scene, SceneLayout) else list(scene)


def _pair_iou_sum(left: Sequence[OrientedBox3], right: Sequence[OrientedBox3]) -> float:
    return float(sum(obb_iou_3d(a, b) for a in left for b in right))


def phi_coll(scene: BoxesLike) -> float:
    """``-sum_{i != j} IoU(b_i, b_j)`` over ordered pairs (each unordered pair twice)."""
    boxes = _boxes(scene)
    total = 0.0
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            total += obb_iou_3d(boxes[i], boxes[j])
    return -2.0 * total


def phi_layout(scene: BoxesLike, floor: FloorPlan) -> float:
    """``-sum_i sum_w IoU(b_i, wall_w)`` against the exterior wall barriers."""
    return -_pair_iou_sum(_boxes(scene), floor.walls)


def phi_reach(
    scene: BoxesLike,
    floor: FloorPlan,
    agent: AgentSpec,
    resolution: float = DEFAULT_RESOLUTION,
    endpoints: str = "largest",
    reach: Optional[ReachResult] = None,
) -> float:
    """``-sum_i sum_j IoU(b_i, agent_j)`` along the path joining the two largest regions.

    Zero when the walkable map has fewer than two regions.
    """
    boxes = _boxes(scene)
    if reach is None:
        reach = reach_pipeline(boxes, floor, agent, resolution, endpoints)
    if reach.path is None:
        return 0.0
    return -_pair_iou_sum(boxes, reach.path.boxes)


@dataclass
class GuidanceReport:
    phi_coll: float
    phi_layout: float
    phi_reach: float
    phi_total: float
    gammas: tuple[float, float, float]
    object_gradients: dict[int, np.ndarray] = field(default_factory=dict)
    wall_time: float = 0.0


def evaluate_guidance(
    scene: SceneLayout,
    floor: FloorPlan,
    agent: AgentSpec,
    cfg: GuidanceConfig,
    resolution: float = DEFAULT_RESOLUTION,
    with_gradients: bool = True,
) -> GuidanceReport:
    """All three objectives, their weighted total and per-object physical gradients.

    Object gradients are ``(d/dx, d/dy, d/dz, d/dyaw)`` of the weighted total.
    """
    start = time.perf_counter()
    indexed = slots_to_boxes(scene)
    boxes = [b for _, b in indexed]
    reach = reach_pipeline(boxes, floor, agent, resolution)
    pc = phi_coll(boxes)
    pl = phi_layout(boxes, floor)
    pr = phi_reach(boxes, floor, agent, reach=reach)
    g1, g2, g3 = cfg.gammas
    total = g1 * pc + g2 * pl + g3 * pr
    grads = {}
    if with_gradients and boxes:
        agents = reach.path.boxes if reach.path is not None else []
        phys = physical_gradient(boxes, floor.walls, agents, cfg)
        grads = {idx: phys[k] for k, (idx, _) in enumerate(indexed)}
    return GuidanceReport(pc, pl, pr, total, cfg.gammas, grads, time.perf_counter() - start)


def _perturbed(boxes: Sequence[OrientedBox3], h_t: float, h_a: float):
    """Central-difference stencil: for each box, +/- steps in x, y, z and yaw.

    Returns stacked arrays ordered ``(box, coordinate, sign)`` with sign
    ``+`` first.
    """
    c, hlf, yaw = box_arrays(boxes)
    n = len(boxes)
    pc = np.repeat(c[:, None, None, :], 4, axis=1).repeat(2, axis=2).copy()
    ph = np.repeat(hlf[:, None, None, :], 4, axis=1).repeat(2, axis=2)
    py = np.repeat(yaw[:, None, None], 4, axis=1).repeat(2, axis=2).copy()
    for k in range(3):
        pc[:, k, 0, k] += h_t
        pc[:, k, 1, k] -= h_t
    py[:, 3, 0] += h_a
    py[:, 3, 1] -= h_a
    return pc.reshape(n * 8, 3), ph.reshape(n * 8, 3), py.reshape(n * 8)


def physical_gradient(
    boxes: Sequence[OrientedBox3],
    walls: Sequence[OrientedBox3],
    agents: Sequence[OrientedBox3],
    cfg: GuidanceConfig,
    incidents: Optional[Counter] = None,
) -> np.ndarray:
    """``(n, 4)`` central-difference gradient of the weighted objective.

    Moving box ``i`` only changes the terms that involve it, so each stencil
    point evaluates ``-(2*g1*sum_j IoU(b_i', b_j) + g2*sum_w IoU(b_i', wall_w)
    + g3*sum_l IoU(b_i', agent_l))``. Agent boxes are held fixed.
    """
    n = len(boxes)
    out = np.zeros((n, 4))
    if n == 0:
        return out
    g1, g2, g3 = cfg.gammas
    targets: list[OrientedBox3] = []
    weights: list[float] = []
    owner: list[int] = []
    if g1 > 0:
        targets += list(boxes)
        weights += [2.0 * g1] * n
        owner += list(range(n))
    if g2 > 0:
        targets += list(walls)
        weights += [g2] * len(walls)
        owner += [-1] * len(walls)
    if g3 > 0:
        targets += list(agents)
        weights += [g3] * len(agents)
        owner += [-1] * len(agents)
    if not targets:
        return out
    h_t, h_a = cfg.fd_step_translation, cfg.fd_step_angle
    pc, ph, py = _perturbed(boxes, h_t, h_a)
    tc, th, ty = box_arrays(targets)
    P, M = len(pc), len(targets)
    iou = obb_iou_3d_batch(
        np.repeat(pc, M, axis=0),
        np.repeat(ph, M, axis=0),
        np.repeat(py, M),
        np.tile(tc, (P, 1)),
        np.tile(th, (P, 1)),
        np.tile(ty, P),
    ).reshape(n, 4, 2, M)
    w = np.asarray(weights)
    own = np.asarray(owner)
    keep = own[None, :] != np.arange(n)[:, None]  # (n, M): drop self pairs
    phi = -(iou * (w * keep)[:, None, None, :]).sum(axis=-1)  # (n, 4, 2)
    steps = np.array([h_t, h_t, h_t, h_a])
    grad = (phi[:, :, 0] - phi[:, :, 1]) / (2.0 * steps)
    bad = ~np.isfinite(grad)
    if bad.any():
        if incidents is not None:
            incidents["nonfinite_stencil"] += int(bad.sum())
        grad[bad] = 0.0
    return grad


def guidance_gradient(
    x0_encoded: np.ndarray,
    floor: FloorPlan,
    agent: AgentSpec,
    cfg: GuidanceConfig,
    codec: SceneCodec,
    resolution: float = DEFAULT_RESOLUTION,
    incidents: Optional[Counter] = None,
    endpoints: str = "largest",
) -> np.ndarray:
    """Gradient of the weighted objective with respect to the encoded scene.

    Only location and orientation channels of occupied slots are non-zero.
    The yaw derivative reaches the ``(cos, sin)`` channels through
    ``yaw = atan2(sin, cos)`` evaluated at the raw channel values.
    """
    x0 = np.asarray(x0_encoded, dtype=float)
    grad = np.zeros_like(x0)
    if not cfg.any_weight:
        return grad
    scene = codec.decode(x0)
    indexed = slots_to_boxes(scene)
    if not indexed:
        return grad
    boxes = [b for _, b in indexed]
    agents: list[OrientedBox3] = []
    if cfg.gamma_reach > 0:
        reach = reach_pipeline(boxes, floor, agent, resolution, endpoints)
        if reach.path is not None:
            agents = reach.path.boxes
    walls = floor.walls if cfg.gamma_layout > 0 else []
    phys = physical_gradient(boxes, walls, agents, cfg, incidents)
    rows = grad.reshape(codec.n_slots, codec.slot_dim)
    raw = codec.slot_rows(x0)
    half_range = codec.stats.loc_half_range
    for k, (slot, _) in enumerate(indexed):
        rows[slot, codec.loc] = phys[k, :3] * half_range
        c, s = raw[slot, codec.orient]
        r2 = c * c + s * s
        if r2 > 1e-12 and math.isfinite(r2):
            rows[slot, codec.orient] = phys[k, 3] * np.array([-s / r2, c / r2])
    return grad
