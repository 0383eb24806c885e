"""Mass-spring cloth with two kinematic grippers and a rigid sphere.

Grid layout: node ``n = i * cols + j``; rows ``i`` run across the cloth
(x axis), columns ``j`` run along the pull axis (y axis).  The left gripper
holds column ``j = 0``, the right gripper column ``j = cols - 1``.  The cloth
rests flat in the ``z = 0`` plane centred on the origin.

Spring families
---------------
structural  grid neighbours; follow the material law, tension only.
shear       diagonals; linear, ``shear_scale * E0``, compression only.
bending     two-apart neighbours; linear, ``bending_stiffness * E0``,
            compression only.

Shear and bending springs only resist shortening, so a uniform uniaxial
stretch loads nothing but the structural springs along the pull axis and the
gripper force equals ``stress_at(law, eps) * A0`` exactly at equilibrium.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .material import MaterialLaw, SampleGeometry

log = logging.getLogger(__name__)

KIND_LAW_TENSION = 0
KIND_LINEAR_COMPRESSION = 1


class SimulationError(RuntimeError):
    """Non-finite state after a step; reduce dt or raise substeps."""

    def __init__(self, msg: str, node: int = -1):
        super().__init__(msg)
        self.node = node


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.05                 # s per action step
    substeps: int = 200
    damping: float = 0.01            # kg/s per node, absolute velocity damping
    total_mass: float = 0.05         # kg, spread uniformly over nodes
    bending_stiffness: float = 0.1   # fraction of the initial modulus
    shear_scale: float = 0.5         # fraction of the initial modulus
    sphere_center: tuple[float, float, float] = (0.0, 0.0, -0.07)
    sphere_radius: float = 0.0       # 0 disables collision
    gravity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "sphere_center", tuple(float(c) for c in self.sphere_center))
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.sphere_radius < 0:
            raise ValueError("sphere_radius must be >= 0")
        if self.damping < 0 or self.total_mass <= 0:
            raise ValueError("damping must be >= 0 and total_mass > 0")

    def node_mass(self, geometry: SampleGeometry) -> float:
        return self.total_mass / geometry.n_nodes

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        return cls(**d)


@dataclass
class ClothState:
    positions: np.ndarray            # (rows, cols, 3)
    velocities: np.ndarray           # (rows, cols, 3)
    grasp_left: np.ndarray           # flat node indices
    grasp_right: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if self.positions.shape != self.velocities.shape or self.positions.shape[-1] != 3:
            raise ValueError("positions and velocities must both be (rows, cols, 3)")
        if len(self.grasp_left) == 0 or len(self.grasp_right) == 0:
            raise ValueError("grasp sets must be non-empty")
        if np.intersect1d(self.grasp_left, self.grasp_right).size:
            raise ValueError("grasp sets must be disjoint")

    @property
    def shape(self) -> tuple[int, int]:
        return self.positions.shape[0], self.positions.shape[1]

    @property
    def flat_positions(self) -> np.ndarray:
        return self.positions.reshape(-1, 3)

    def copy(self) -> ClothState:
        return ClothState(self.positions.copy(), self.velocities.copy(),
                          self.grasp_left.copy(), self.grasp_right.copy(), self.time)


@dataclass(frozen=True)
class ForceReading:
    left: np.ndarray = field(default_factory=lambda: np.zeros(3))
    right: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def per_gripper(self) -> tuple[np.ndarray, np.ndarray]:
        return self.left, self.right

    @property
    def magnitude(self) -> float:
        """Norm of the left gripper's reaction force (N)."""
        return float(np.linalg.norm(self.left))


@dataclass(frozen=True)
class Topology:
    rows: int
    cols: int
    si: np.ndarray
    sj: np.ndarray
    rest: np.ndarray
    area: np.ndarray
    kind: np.ndarray
    klin: np.ndarray          # linear modulus for compression springs, Pa
    family: np.ndarray        # 0 structural, 1 shear, 2 bending
    moduli: np.ndarray
    knots: np.ndarray
    grasp_left: np.ndarray
    grasp_right: np.ndarray
    node_mass: float


def grid_positions(geometry: SampleGeometry) -> np.ndarray:
    r, c = geometry.rows, geometry.cols
    x = (np.arange(r) / (r - 1) - 0.5) * geometry.cloth_width
    y = (np.arange(c) / (c - 1) - 0.5) * geometry.rest_length
    pos = np.zeros((r, c, 3))
    pos[..., 0] = x[:, None]
    pos[..., 1] = y[None, :]
    return pos


def grid_edges(rows: int, cols: int) -> np.ndarray:
    """Undirected structural edges of a rows x cols grid, shape (E, 2)."""
    idx = np.arange(rows * cols).reshape(rows, cols)
    along = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    across = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    return np.concatenate([along, across])


@functools.lru_cache(maxsize=64)
def topology(geometry: SampleGeometry, law: MaterialLaw, config: SimConfig) -> Topology:
    r, c = geometry.rows, geometry.cols
    idx = np.arange(r * c).reshape(r, c)
    pos = grid_positions(geometry).reshape(-1, 3)
    # One structural spring per row carries the pull-axis load, so the
    # per-spring area is A0 / rows; the cross direction mirrors it.
    a_pull = geometry.cross_section / r
    a_cross = geometry.cross_section * (geometry.rest_length / geometry.cloth_width) / c
    e0 = law.initial_modulus
    pairs, areas, kinds, klins, fams = [], [], [], [], []

    def add(a, b, area, kind, klin, fam):
        pairs.append(np.stack([a.ravel(), b.ravel()], axis=1))
        n = a.size
        areas.append(np.full(n, area))
        kinds.append(np.full(n, kind, dtype=np.int64))
        klins.append(np.full(n, klin))
        fams.append(np.full(n, fam, dtype=np.int64))

    add(idx[:, :-1], idx[:, 1:], a_pull, KIND_LAW_TENSION, 0.0, 0)
    add(idx[:-1, :], idx[1:, :], a_cross, KIND_LAW_TENSION, 0.0, 0)
    a_mean = 0.5 * (a_pull + a_cross)
    k_shear = config.shear_scale * e0
    add(idx[:-1, :-1], idx[1:, 1:], a_mean, KIND_LINEAR_COMPRESSION, k_shear, 1)
    add(idx[:-1, 1:], idx[1:, :-1], a_mean, KIND_LINEAR_COMPRESSION, k_shear, 1)
    k_bend = config.bending_stiffness * e0
    if c > 2:
        add(idx[:, :-2], idx[:, 2:], a_pull, KIND_LINEAR_COMPRESSION, k_bend, 2)
    if r > 2:
        add(idx[:-2, :], idx[2:, :], a_cross, KIND_LINEAR_COMPRESSION, k_bend, 2)
    ij = np.concatenate(pairs)
    si, sj = ij[:, 0].copy(), ij[:, 1].copy()
    rest = np.linalg.norm(pos[sj] - pos[si], axis=1)
    return Topology(
        rows=r, cols=c, si=si, sj=sj, rest=rest,
        area=np.concatenate(areas), kind=np.concatenate(kinds),
        klin=np.concatenate(klins), family=np.concatenate(fams),
        moduli=np.array(law.moduli), knots=np.array(law.knots),
        grasp_left=idx[:, 0].copy(), grasp_right=idx[:, -1].copy(),
        node_mass=config.node_mass(geometry))


@numba.njit(cache=True)
def _law_stress(eps, moduli, knots):
    s = 0.0
    prev = 0.0
    for k in range(knots.shape[0]):
        if eps <= knots[k]:
            return s + moduli[k] * (eps - prev)
        s += moduli[k] * (knots[k] - prev)
        prev = knots[k]
    return s + moduli[moduli.shape[0] - 1] * (eps - prev)


@numba.njit(cache=True)
def _law_energy_density(eps, moduli, knots):
    # integral of stress over [0, eps]
    w = 0.0
    s = 0.0
    prev = 0.0
    for k in range(knots.shape[0]):
        if eps <= knots[k]:
            d = eps - prev
            return w + s * d + 0.5 * moduli[k] * d * d
        d = knots[k] - prev
        w += s * d + 0.5 * moduli[k] * d * d
        s += moduli[k] * d
        prev = knots[k]
    d = eps - prev
    return w + s * d + 0.5 * moduli[moduli.shape[0] - 1] * d * d


@numba.njit(cache=True)
def _spring_forces(pos, si, sj, rest, area, kind, klin, moduli, knots, out):
    """Accumulate spring forces into `out` (n, 3); returns degenerate count."""
    degenerate = 0
    for s in range(si.shape[0]):
        a = si[s]
        b = sj[s]
        dx = pos[b, 0] - pos[a, 0]
        dy = pos[b, 1] - pos[a, 1]
        dz = pos[b, 2] - pos[a, 2]
        length = math.sqrt(dx * dx + dy * dy + dz * dz)
        if length == 0.0:
            degenerate += 1
            continue
        eps = (length - rest[s]) / rest[s]
        if kind[s] == 0:
            if eps <= 0.0:
                continue
            tension = _law_stress(eps, moduli, knots) * area[s]
        else:
            if eps >= 0.0:
                continue
            tension = klin[s] * eps * area[s]
        f = tension / length
        out[a, 0] += f * dx
        out[a, 1] += f * dy
        out[a, 2] += f * dz
        out[b, 0] -= f * dx
        out[b, 1] -= f * dy
        out[b, 2] -= f * dz
    return degenerate


@numba.njit(cache=True)
def _elastic_energy(pos, si, sj, rest, area, kind, klin, moduli, knots):
    e = 0.0
    for s in range(si.shape[0]):
        a = si[s]
        b = sj[s]
        dx = pos[b, 0] - pos[a, 0]
        dy = pos[b, 1] - pos[a, 1]
        dz = pos[b, 2] - pos[a, 2]
        eps = (math.sqrt(dx * dx + dy * dy + dz * dz) - rest[s]) / rest[s]
        if kind[s] == 0:
            if eps > 0.0:
                e += area[s] * rest[s] * _law_energy_density(eps, moduli, knots)
        elif eps < 0.0:
            e += 0.5 * klin[s] * area[s] * rest[s] * eps * eps
    return e


@numba.njit(cache=True)
def _advance(pos, vel, grasp, grasp_start, grasp_disp, n_sub, h, mass, damping,
             gravity, center, radius, si, sj, rest, area, kind, klin, moduli, knots,
             force_out):
    n = pos.shape[0]
    is_grasp = np.zeros(n, dtype=np.bool_)
    for g in range(grasp.shape[0]):
        is_grasp[grasp[g]] = True
    inv_denom = 1.0 / (1.0 + h * damping / mass)
    degenerate = 0
    for step in range(n_sub):
        # kinematic grippers follow a linear path; the final substep lands exactly
        for g in range(grasp.shape[0]):
            v = grasp[g]
            for d in range(3):
                if step == n_sub - 1:
                    target = grasp_start[g, d] + grasp_disp[g, d]
                else:
                    target = grasp_start[g, d] + grasp_disp[g, d] * ((step + 1.0) / n_sub)
                vel[v, d] = (target - pos[v, d]) / h
                pos[v, d] = target
        force_out[:, :] = 0.0
        degenerate += _spring_forces(pos, si, sj, rest, area, kind, klin, moduli, knots,
                                     force_out)
        for v in range(n):
            if is_grasp[v]:
                continue
            for d in range(3):
                vel[v, d] = (vel[v, d] + h * (force_out[v, d] / mass + gravity[d])) * inv_denom
                pos[v, d] += h * vel[v, d]
            if radius > 0.0:
                rx = pos[v, 0] - center[0]
                ry = pos[v, 1] - center[1]
                rz = pos[v, 2] - center[2]
                r = math.sqrt(rx * rx + ry * ry + rz * rz)
                if r < radius:
                    if r == 0.0:
                        rx, ry, rz, r = 0.0, 0.0, 1.0, 1.0
                    nx, ny, nz = rx / r, ry / r, rz / r
                    pos[v, 0] = center[0] + nx * radius
                    pos[v, 1] = center[1] + ny * radius
                    pos[v, 2] = center[2] + nz * radius
                    vn = vel[v, 0] * nx + vel[v, 1] * ny + vel[v, 2] * nz
                    if vn < 0.0:
                        vel[v, 0] -= vn * nx
                        vel[v, 1] -= vn * ny
                        vel[v, 2] -= vn * nz
    return degenerate


def build_cloth(geometry: SampleGeometry, law: MaterialLaw, config: SimConfig) -> ClothState:
    """Flat cloth at rest; grippers hold the two boundary columns."""
    top = topology(geometry, law, config)
    pos = grid_positions(geometry)
    return ClothState(pos, np.zeros_like(pos), top.grasp_left.copy(),
                      top.grasp_right.copy(), 0.0)


def _spring_args(top: Topology):
    return (top.si, top.sj, top.rest, top.area, top.kind, top.klin, top.moduli, top.knots)


def internal_forces(state: ClothState, geometry: SampleGeometry, law: MaterialLaw,
                    config: SimConfig) -> np.ndarray:
    """Spring forces on every node, shape (rows, cols, 3), in N."""
    top = topology(geometry, law, config)
    flat = np.ascontiguousarray(state.flat_positions)
    out = np.zeros_like(flat)
    degenerate = _spring_forces(flat, *_spring_args(top), out)
    if degenerate:
        log.warning("skipped %d zero-length springs", degenerate)
    internal_forces.degenerate_springs = degenerate
    return out.reshape(state.positions.shape)


internal_forces.degenerate_springs = 0


def elastic_energy(state: ClothState, geometry: SampleGeometry, law: MaterialLaw,
                   config: SimConfig) -> float:
    top = topology(geometry, law, config)
    return float(_elastic_energy(np.ascontiguousarray(state.flat_positions), *_spring_args(top)))


def kinetic_energy(state: ClothState, geometry: SampleGeometry, config: SimConfig) -> float:
    return 0.5 * config.node_mass(geometry) * float(np.sum(state.velocities ** 2))


def _reading(forces: np.ndarray, top: Topology, config: SimConfig) -> ForceReading:
    weight = top.node_mass * np.asarray(config.gravity)
    left = forces[top.grasp_left].sum(axis=0) + len(top.grasp_left) * weight
    right = forces[top.grasp_right].sum(axis=0) + len(top.grasp_right) * weight
    return ForceReading(left, right)


def _grasp_displacements(action, n_left: int, n_right: int) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64)
    if a.shape == (3,):
        a = np.stack([a, a])
    if a.shape != (2, 3):
        raise ValueError(f"action must be a 3-vector or (2, 3), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("action must be finite")
    return np.concatenate([np.repeat(a[:1], n_left, axis=0), np.repeat(a[1:], n_right, axis=0)])


def step(state: ClothState, action, geometry: SampleGeometry, law: MaterialLaw,
         config: SimConfig) -> tuple[ClothState, ForceReading]:
    """Advance one action step of length ``config.dt``.

    `action` is a displacement (m) applied to both grippers, or a (2, 3) array
    with separate left/right displacements.  Grasped nodes end exactly at
    ``start + action``; free nodes take ``config.substeps`` semi-implicit Euler
    steps with implicit velocity damping and sphere projection.
    """
    top = topology(geometry, law, config)
    grasp = np.concatenate([top.grasp_left, top.grasp_right])
    disp = _grasp_displacements(action, len(top.grasp_left), len(top.grasp_right))
    pos = np.ascontiguousarray(state.flat_positions).copy()
    vel = np.ascontiguousarray(state.velocities.reshape(-1, 3)).copy()
    start = pos[grasp].copy()
    forces = np.zeros_like(pos)
    h = config.dt / config.substeps
    degenerate = _advance(pos, vel, grasp, start, disp, config.substeps, h, top.node_mass,
                          config.damping, np.asarray(config.gravity),
                          np.asarray(config.sphere_center), config.sphere_radius,
                          *_spring_args(top), forces)
    if degenerate:
        log.warning("skipped %d zero-length spring evaluations", degenerate)
    # exact kinematic assignment
    pos[grasp] = start + disp
    bad = ~np.isfinite(pos).all(axis=1) | ~np.isfinite(vel).all(axis=1)
    if bad.any():
        node = int(np.flatnonzero(bad)[0])
        raise SimulationError(f"non-finite state at node {node}; reduce dt or raise substeps",
                              node)
    new = ClothState(pos.reshape(state.positions.shape), vel.reshape(state.positions.shape),
                     state.grasp_left, state.grasp_right, state.time + config.dt)
    return new, _reading(forces, top, config)


def stable_substeps(law: MaterialLaw, geometry: SampleGeometry, config: SimConfig,
                    safety: float = 0.5) -> int:
    """Substep count keeping semi-implicit Euler below its stability limit.

    Bounds the largest eigenvalue of M^-1 K by twice the largest per-node sum
    of spring stiffnesses (Gershgorin), using the steepest law segment.
    """
    top = topology(geometry, law, config)
    k = np.where(top.kind == KIND_LAW_TENSION, max(law.moduli), top.klin) * top.area / top.rest
    per_node = np.bincount(top.si, k, geometry.n_nodes) + np.bincount(top.sj, k, geometry.n_nodes)
    omega = math.sqrt(2.0 * per_node.max() / top.node_mass)
    h_max = safety * 2.0 / omega
    return max(config.substeps, int(math.ceil(config.dt / h_max)))


def with_stable_substeps(law: MaterialLaw, geometry: SampleGeometry, config: SimConfig,
                         minimum: int = 1) -> SimConfig:
    probe = replace(config, substeps=max(1, minimum))
    return replace(config, substeps=stable_substeps(law, geometry, probe))


def downsample_indices(source: int, target: int) -> np.ndarray:
    """Stride selection keeping both ends.

    Indices are first taken with the largest uniform stride that still leaves
    `target` of them, then `target` evenly spaced entries of that set are kept
    (25 -> 12 keeps 12 of the even indices 0..24).
    """
    if target > source:
        raise ValueError(f"cannot downsample {source} to larger size {target}")
    if target < 2:
        raise ValueError("target must keep at least 2 indices")
    stride = (source - 1) // (target - 1)
    candidates = np.arange(0, source, stride)
    if candidates[-1] != source - 1:
        candidates = np.append(candidates, source - 1)
    pick = np.rint(np.linspace(0, candidates.size - 1, target)).astype(np.int64)
    return candidates[pick].astype(np.int64)


def downsample(positions: np.ndarray, rows: int, cols: int | None = None) -> np.ndarray:
    """Select a rows x cols sub-grid from a (R, C, ...) node array.

    The first and last rows/columns are always kept, so corner and gripper
    nodes survive.
    """
    cols = rows if cols is None else cols
    ri = downsample_indices(positions.shape[0], rows)
    ci = downsample_indices(positions.shape[1], cols)
    return positions[np.ix_(ri, ci)]


def downsample_state(state: ClothState, rows: int, cols: int | None = None) -> ClothState:
    cols = rows if cols is None else cols
    pos = downsample(state.positions, rows, cols)
    vel = downsample(state.velocities, rows, cols)
    idx = np.arange(rows * cols).reshape(rows, cols)
    return ClothState(pos.copy(), vel.copy(), idx[:, 0].copy(), idx[:, -1].copy(), state.time)


def trajectory_rows(times, actions, forces, positions) -> list[list]:
    """Rows of the trajectory log: header then one row per step."""
    positions = np.asarray(positions)
    n_nodes = positions.reshape(positions.shape[0], -1, 3).shape[1]
    header = ["t", "action_x", "action_y", "action_z", "force_N"]
    header += [f"node_{i}_{c}" for i in range(n_nodes) for c in "xyz"]
    rows = [header]
    flat = positions.reshape(positions.shape[0], -1)
    for t, a, f, p in zip(times, np.asarray(actions), forces, flat):
        rows.append([repr(float(t)), *(repr(float(v)) for v in a), repr(float(f)),
                     *(repr(float(v)) for v in p)])
    return rows


def write_trajectory_csv(path, times, actions, forces, positions) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(trajectory_rows(times, actions, forces, positions))


def run_manifest(config: SimConfig, geometry: SampleGeometry, law: MaterialLaw,
                 seed: int | None = None) -> dict:
    return {"sim_config": config.to_dict(), "geometry": geometry.to_dict(),
            "law": law.to_dict(), "seed": seed}
