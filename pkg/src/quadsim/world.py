"""Procedural scene generation and resets for the flight tasks.

Generation is a pure function of (seed, parameters): obstacle courses are
sampled in a corridor around the spawn-goal segment and accepted only when
a coarse-grid BFS with inflated obstacles connects spawn to goal; race
tracks chain gates along a smooth open loop with bounded turn angles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from quadsim.sensors import PrimitiveSet, pack_primitives, sdf_np

SCENE_FORMAT_VERSION = 1

# obstacle size ranges (meters)
SPHERE_R = (0.3, 1.0)
BOX_HALF = (0.2, 1.0)  # side in [0.4, 2.0]
CYL_R = (0.2, 0.6)
CYL_HH = (0.5, 2.0)  # height in [1, 4]

GRID_RES = 0.25


class GenerationError(RuntimeError):
    def __init__(self, message, seed=None):
        super().__init__(f"{message} (seed={seed})")
        self.seed = seed


@dataclass
class Gate:
    center: np.ndarray
    normal: np.ndarray
    inner_radius: float = 0.8
    frame_width: float = 0.3
    order: int = 0

    def to_json(self):
        return {
            "center": list(map(float, self.center)),
            "normal": list(map(float, self.normal)),
            "inner_radius": float(self.inner_radius),
            "frame_width": float(self.frame_width),
            "order": int(self.order),
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            center=np.array(d["center"]), normal=np.array(d["normal"]),
            inner_radius=d["inner_radius"], frame_width=d["frame_width"],
            order=d["order"],
        )


@dataclass
class Scene:
    prims: PrimitiveSet
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    spawn: np.ndarray
    goal: np.ndarray
    gates: list = field(default_factory=list)
    seed: int = 0
    style: str = "outdoor"

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": SCENE_FORMAT_VERSION,
                "seed": int(self.seed),
                "style": self.style,
                "bounds_lo": list(map(float, self.bounds_lo)),
                "bounds_hi": list(map(float, self.bounds_hi)),
                "spawn": list(map(float, self.spawn)),
                "goal": list(map(float, self.goal)),
                "spheres": self.prims.spheres.tolist(),
                "boxes": self.prims.boxes.tolist(),
                "cylinders": self.prims.cylinders.tolist(),
                "ground_z": self.prims.ground_z,
                "gates": [g.to_json() for g in self.gates],
            },
            indent=None,
        )

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        d = json.loads(text)
        if d.get("version") != SCENE_FORMAT_VERSION:
            raise GenerationError(f"unsupported scene format version {d.get('version')}")
        prims = PrimitiveSet(
            spheres=np.array(d["spheres"]).reshape(-1, 4),
            boxes=np.array(d["boxes"]).reshape(-1, 6),
            cylinders=np.array(d["cylinders"]).reshape(-1, 5),
            ground_z=d["ground_z"],
        )
        return cls(
            prims=prims,
            bounds_lo=np.array(d["bounds_lo"]),
            bounds_hi=np.array(d["bounds_hi"]),
            spawn=np.array(d["spawn"]),
            goal=np.array(d["goal"]),
            gates=[Gate.from_json(g) for g in d["gates"]],
            seed=d["seed"],
            style=d["style"],
        )


@dataclass
class RandomizationSpec:
    """Per-episode uniform resampling ranges for sim-to-real robustness."""

    drag_coeff: tuple = (0.1, 0.5)
    latency: tuple = (2.0, 8.0)
    action_scale: tuple = (1.0, 1.0)
    per_episode: bool = True

    def __post_init__(self):
        for name in ("drag_coeff", "latency", "action_scale"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise GenerationError(f"invalid randomization range for {name}")


def randomize_params(spec: RandomizationSpec, seed: int, episode: int, n: int = 1):
    """Uniform per-env samples, deterministic per (seed, episode index)."""
    rng = np.random.default_rng([seed & 0x7FFFFFFF, episode])
    return {
        "drag_coeff": rng.uniform(*spec.drag_coeff, size=n),
        "latency": rng.uniform(*spec.latency, size=n),
        "action_scale": rng.uniform(*spec.action_scale, size=n),
    }


# ---------------------------------------------------------------------------
# feasibility oracle: coarse-grid BFS with inflated obstacles


def grid_path_exists(scene: Scene, r_quad: float = 0.15, res: float = GRID_RES) -> bool:
    """6-connected BFS from spawn to goal over the inflated occupancy grid."""
    lo = scene.bounds_lo + 1e-9
    hi = scene.bounds_hi - 1e-9
    dims = np.maximum(2, np.ceil((hi - lo) / res).astype(int))
    axes = [lo[i] + (np.arange(dims[i]) + 0.5) * (hi[i] - lo[i]) / dims[i] for i in range(3)]
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
    prims = pack_primitives([scene.prims] * 1)
    sd = sdf_np_all(pts, prims)
    free = (sd > r_quad + 0.05).reshape(tuple(dims))

    def cell_of(p):
        idx = ((p - lo) / (hi - lo) * dims).astype(int)
        return tuple(np.clip(idx, 0, dims - 1))

    start, target = cell_of(scene.spawn), cell_of(scene.goal)
    if not free[start] or not free[target]:
        return False
    visited = np.zeros_like(free)
    visited[start] = True
    frontier = visited.copy()
    while True:
        grown = visited.copy()
        grown[1:, :, :] |= visited[:-1, :, :]
        grown[:-1, :, :] |= visited[1:, :, :]
        grown[:, 1:, :] |= visited[:, :-1, :]
        grown[:, :-1, :] |= visited[:, 1:, :]
        grown[:, :, 1:] |= visited[:, :, :-1]
        grown[:, :, :-1] |= visited[:, :, 1:]
        grown &= free
        if grown[target]:
            return True
        if np.array_equal(grown, visited):
            return False
        visited = grown


def sdf_np_all(points: np.ndarray, prims) -> np.ndarray:
    """sdf_np over many query points for a single packed scene."""
    if prims.batch != 1:
        raise GenerationError("sdf_np_all expects a single-scene pack")
    n = points.shape[0]
    rep = type(prims)(
        spheres=np.broadcast_to(prims.spheres, (n,) + prims.spheres.shape[1:]),
        sph_valid=np.broadcast_to(prims.sph_valid, (n,) + prims.sph_valid.shape[1:]),
        boxes=np.broadcast_to(prims.boxes, (n,) + prims.boxes.shape[1:]),
        box_valid=np.broadcast_to(prims.box_valid, (n,) + prims.box_valid.shape[1:]),
        cylinders=np.broadcast_to(prims.cylinders, (n,) + prims.cylinders.shape[1:]),
        cyl_valid=np.broadcast_to(prims.cyl_valid, (n,) + prims.cyl_valid.shape[1:]),
        ground_z=np.broadcast_to(prims.ground_z, (n,)),
    )
    return sdf_np(points, rep)


def scene_sdf(scene: Scene, points: np.ndarray) -> np.ndarray:
    return sdf_np_all(np.atleast_2d(points), pack_primitives([scene.prims]))


# ---------------------------------------------------------------------------
# obstacle courses


def gen_obstacle_course(
    seed: int,
    spawn: np.ndarray,
    goal: np.ndarray,
    density: float,
    style: str = "outdoor",
    r_quad: float = 0.15,
    clearance: float = 0.5,
    corridor_halfwidth: float = 3.0,
    max_attempts: int = 100,
) -> Scene:
    """Obstacles sampled in a corridor around the spawn->goal segment.

    density is obstacles per square meter of corridor plan area. Indoor
    style adds a floor/ceiling pair and shell walls; outdoor has a ground
    plane only. Scenes failing the grid feasibility check are resampled.
    """
    spawn = np.asarray(spawn, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    span = goal - spawn
    dist = float(np.linalg.norm(span))
    if dist <= 2.0:
        raise GenerationError("spawn and goal must be more than 2 m apart", seed)
    if density < 0:
        raise GenerationError("density must be >= 0", seed)

    fwd = span / dist
    fwd_h = np.array([fwd[0], fwd[1], 0.0])
    fwd_h = fwd_h / max(np.linalg.norm(fwd_h), 1e-9)
    left = np.array([-fwd_h[1], fwd_h[0], 0.0])

    height = 3.0 if style == "indoor" else 4.0
    pad = 1.5
    corners = []
    for a in (-pad, dist + pad):
        for b in (-corridor_halfwidth - pad, corridor_halfwidth + pad):
            corners.append(spawn + fwd_h * a + left * b)
    corners = np.array(corners)
    lo = np.array([corners[:, 0].min(), corners[:, 1].min(), 0.0])
    hi = np.array([corners[:, 0].max(), corners[:, 1].max(), height])

    plan_area = dist * 2 * corridor_halfwidth
    n_total = int(round(density * plan_area))

    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed & 0x7FFFFFFF, attempt])
        n_cyl = int(round(0.4 * n_total))
        n_sph = int(round(0.3 * n_total))
        n_box = n_total - n_cyl - n_sph

        def corridor_point(n):
            along = rng.uniform(0.0, dist, size=n)
            lat = rng.uniform(-corridor_halfwidth, corridor_halfwidth, size=n)
            z = rng.uniform(0.3, height - 0.3, size=n)
            pts = spawn[None] + along[:, None] * fwd_h[None] + lat[:, None] * left[None]
            pts[:, 2] = z
            return pts

        spheres = np.zeros((0, 4))
        if n_sph:
            c = corridor_point(n_sph)
            r = rng.uniform(*SPHERE_R, size=n_sph)
            spheres = np.column_stack([c, r])
        boxes = np.zeros((0, 6))
        if n_box:
            c = corridor_point(n_box)
            h = rng.uniform(*BOX_HALF, size=(n_box, 3))
            boxes = np.column_stack([c, h])
        cylinders = np.zeros((0, 5))
        if n_cyl:
            c = corridor_point(n_cyl)
            r = rng.uniform(*CYL_R, size=n_cyl)
            hh = rng.uniform(*CYL_HH, size=n_cyl)
            c[:, 2] = hh  # trunks stand on the ground
            cylinders = np.column_stack([c, r, hh])

        shell_boxes = np.zeros((0, 6))
        if style == "indoor":
            cx, cy = (lo[:2] + hi[:2]) / 2
            sx, sy = (hi[:2] - lo[:2]) / 2
            wall_t = 0.1
            shell_boxes = np.array(
                [
                    [cx, cy, height + wall_t, sx + 1, sy + 1, wall_t],  # ceiling
                    [lo[0] - wall_t, cy, height / 2, wall_t, sy + 1, height],
                    [hi[0] + wall_t, cy, height / 2, wall_t, sy + 1, height],
                    [cx, lo[1] - wall_t, height / 2, sx + 1, wall_t, height],
                    [cx, hi[1] + wall_t, height / 2, sx + 1, wall_t, height],
                ]
            )

        prims = PrimitiveSet(
            spheres=spheres,
            boxes=np.vstack([boxes, shell_boxes]) if len(shell_boxes) else boxes,
            cylinders=cylinders,
            ground_z=0.0,
        )

        # drop obstacles that violate spawn/goal clearance zones
        keep_min = r_quad + clearance
        ends = np.stack([spawn, goal])

        def dist_spheres(rows):
            d = np.linalg.norm(ends[:, None, :] - rows[None, :, :3], axis=-1)
            return (d - rows[None, :, 3]).min(axis=0)

        def dist_boxes(rows):
            q = np.abs(ends[:, None, :] - rows[None, :, :3]) - rows[None, :, 3:6]
            out = np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(-1), 0.0)
            return out.min(axis=0)

        def dist_cyls(rows):
            dxy = np.linalg.norm(ends[:, None, :2] - rows[None, :, :2], axis=-1) - rows[None, :, 3]
            dz = np.abs(ends[:, None, 2] - rows[None, :, 2]) - rows[None, :, 4]
            out = np.sqrt(np.maximum(dxy, 0) ** 2 + np.maximum(dz, 0) ** 2)
            out += np.minimum(np.maximum(dxy, dz), 0.0)
            return out.min(axis=0)

        if len(prims.spheres):
            prims.spheres = prims.spheres[dist_spheres(prims.spheres) > keep_min]
        if len(prims.boxes):
            keep = np.ones(len(prims.boxes), dtype=bool)
            keep[: len(boxes)] = dist_boxes(prims.boxes[: len(boxes)]) > keep_min
            prims.boxes = prims.boxes[keep]  # shell walls always kept
        if len(prims.cylinders):
            prims.cylinders = prims.cylinders[dist_cyls(prims.cylinders) > keep_min]

        scene = Scene(
            prims=prims, bounds_lo=lo, bounds_hi=hi, spawn=spawn.copy(),
            goal=goal.copy(), seed=seed, style=style,
        )
        if grid_path_exists(scene, r_quad=r_quad):
            return scene
    raise GenerationError(f"no feasible scene after {max_attempts} attempts", seed)


# ---------------------------------------------------------------------------
# race tracks


def gen_race_track(seed: int, n_gates: int, spread: float = 10.0) -> Scene:
    """Gates chained along a smooth open loop with bounded heading turns.

    Consecutive gate spacing is sampled in [4, spread]; normals follow the
    local travel direction.
    """
    if n_gates < 1:
        raise GenerationError("need at least one gate", seed)
    if spread < 4.0:
        raise GenerationError("spread must be >= 4 m", seed)
    rng = np.random.default_rng(seed & 0x7FFFFFFF)
    spawn = np.array([0.0, 0.0, 1.5])
    heading = 0.0
    pos = spawn.copy()
    gates = []
    for k in range(n_gates):
        spacing = rng.uniform(4.0, spread)
        heading += rng.uniform(-np.pi / 6, np.pi / 6) if k else 0.0
        d = np.array([np.cos(heading), np.sin(heading), 0.0])
        pos = pos + d * spacing
        center = pos.copy()
        center[2] = rng.uniform(1.0, 2.5)
        gates.append(Gate(center=center, normal=d.copy(), order=k))
    pts = np.array([g.center for g in gates] + [spawn])
    lo = pts.min(axis=0) - 5.0
    hi = pts.max(axis=0) + 5.0
    lo[2] = 0.0
    hi[2] = max(hi[2], 4.0)
    return Scene(
        prims=PrimitiveSet(ground_z=0.0),
        bounds_lo=lo, bounds_hi=hi, spawn=spawn, goal=gates[-1].center.copy(),
        gates=gates, seed=seed, style="racing",
    )


# ---------------------------------------------------------------------------
# resets


def formation_offsets(kind: str, n_agents: int, side: float = 2.0) -> np.ndarray:
    """Formation templates centered at the origin: line | square | circle."""
    if n_agents == 1:
        return np.zeros((1, 3))
    if kind == "line":
        xs = (np.arange(n_agents) - (n_agents - 1) / 2) * side
        out = np.zeros((n_agents, 3))
        out[:, 1] = xs
        return out
    if kind == "square":
        rows = int(np.ceil(np.sqrt(n_agents)))
        out = []
        for i in range(n_agents):
            out.append([(i % rows) * side, (i // rows) * side, 0.0])
        out = np.array(out)
        return out - out.mean(axis=0)
    if kind == "circle":
        ang = 2 * np.pi * np.arange(n_agents) / n_agents
        r = side / (2 * np.sin(np.pi / n_agents))
        return np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(n_agents)], axis=-1)
    raise GenerationError(f"unknown formation '{kind}'")


def sample_reset(
    scene: Scene,
    n_agents: int,
    formation: np.ndarray,
    rng: np.random.Generator,
    d_min: float = 0.6,
    r_quad: float = 0.15,
    clearance: float = 0.3,
    max_attempts: int = 100,
):
    """Collision-free spawns plus formation goals.

    Returns (spawns (n_agents,3), goals (n_agents,3)). Spawns jitter around
    scene.spawn + formation offsets; goals are scene.goal + offsets.
    """
    formation = np.asarray(formation, dtype=np.float64)
    if formation.shape != (n_agents, 3):
        raise GenerationError(f"formation template must have shape ({n_agents}, 3)")
    packed = pack_primitives([scene.prims])
    for _ in range(max_attempts):
        spawns = scene.spawn[None] + formation + rng.normal(scale=0.15, size=(n_agents, 3))
        spawns[:, 2] = np.clip(
            spawns[:, 2], scene.bounds_lo[2] + 0.3, scene.bounds_hi[2] - 0.3
        )
        if n_agents > 1:
            dd = np.linalg.norm(spawns[:, None] - spawns[None], axis=-1)
            dd[np.arange(n_agents), np.arange(n_agents)] = np.inf
            if dd.min() < d_min:
                continue
        sd = sdf_np_all(spawns, packed)
        if sd.min() <= r_quad + clearance:
            continue
        inside = np.all(spawns > scene.bounds_lo + 0.2, axis=-1) & np.all(
            spawns < scene.bounds_hi - 0.2, axis=-1
        )
        if not inside.all():
            continue
        goals = scene.goal[None] + formation
        return spawns, goals
    raise GenerationError("could not place agents", scene.seed)
