"""Ray-cast depth/LiDAR sensing over analytic primitives, IMU, and
point-mass attitude reconstruction.

Rendering is plain numpy and carries no gradients; policy gradients flow
through state-dependent rewards only. Depth is Euclidean distance along the
(unit) ray, not z-depth, which keeps camera and LiDAR semantics identical.

Camera frame convention: optical axis = body +x, image left = body +y,
image up = body +z (FLU). Pixel (row 0, col 0) is the top-left corner.

Primitive shapes: spheres, axis-aligned boxes, finite capped z-aligned
cylinders, and an optional ground plane.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from quadsim import autodiff as ad
from quadsim.autodiff import Var

FAR = 1e9


class SensorContractError(ValueError):
    pass


@dataclass
class PrimitiveSet:
    """Struct-of-arrays obstacle container for one scene.

    spheres:   (S, 4)  cx, cy, cz, r
    boxes:     (Bx, 6) cx, cy, cz, hx, hy, hz   (half extents)
    cylinders: (C, 5)  cx, cy, cz, r, hh        (z-aligned, half height)
    ground_z:  plane z = ground_z when not None
    """

    spheres: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    cylinders: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    ground_z: float | None = None

    def __post_init__(self):
        self.spheres = np.asarray(self.spheres, dtype=np.float64).reshape(-1, 4)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 6)
        self.cylinders = np.asarray(self.cylinders, dtype=np.float64).reshape(-1, 5)

    @property
    def n_solids(self) -> int:
        return len(self.spheres) + len(self.boxes) + len(self.cylinders)

    def bounding_spheres(self) -> np.ndarray:
        """(P, 4) center+radius covers for every solid primitive."""
        parts = []
        if len(self.spheres):
            parts.append(self.spheres)
        if len(self.boxes):
            r = np.linalg.norm(self.boxes[:, 3:6], axis=-1)
            parts.append(np.concatenate([self.boxes[:, :3], r[:, None]], axis=-1))
        if len(self.cylinders):
            r = np.sqrt(self.cylinders[:, 3] ** 2 + self.cylinders[:, 4] ** 2)
            parts.append(np.concatenate([self.cylinders[:, :3], r[:, None]], axis=-1))
        if not parts:
            return np.zeros((0, 4))
        return np.concatenate(parts, axis=0)


@dataclass
class BatchedPrimitives:
    """Padded per-env primitive arrays; invalid padding lanes never hit."""

    spheres: np.ndarray  # (B, Sm, 4)
    sph_valid: np.ndarray  # (B, Sm) bool
    boxes: np.ndarray  # (B, Bm, 6)
    box_valid: np.ndarray
    cylinders: np.ndarray  # (B, Cm, 5)
    cyl_valid: np.ndarray
    ground_z: np.ndarray  # (B,), nan = no ground plane

    @property
    def batch(self) -> int:
        return self.spheres.shape[0]

    def masked(self, keep_sph, keep_box, keep_cyl) -> "BatchedPrimitives":
        return BatchedPrimitives(
            spheres=self.spheres,
            sph_valid=self.sph_valid & keep_sph,
            boxes=self.boxes,
            box_valid=self.box_valid & keep_box,
            cylinders=self.cylinders,
            cyl_valid=self.cyl_valid & keep_cyl,
            ground_z=self.ground_z,
        )


def pack_primitives(sets: list[PrimitiveSet]) -> BatchedPrimitives:
    B = len(sets)
    Sm = max((len(s.spheres) for s in sets), default=0)
    Bm = max((len(s.boxes) for s in sets), default=0)
    Cm = max((len(s.cylinders) for s in sets), default=0)
    spheres = np.zeros((B, max(Sm, 1), 4))
    sph_valid = np.zeros((B, max(Sm, 1)), dtype=bool)
    boxes = np.zeros((B, max(Bm, 1), 6))
    box_valid = np.zeros((B, max(Bm, 1)), dtype=bool)
    cylinders = np.zeros((B, max(Cm, 1), 5))
    cyl_valid = np.zeros((B, max(Cm, 1)), dtype=bool)
    ground = np.full(B, np.nan)
    for i, s in enumerate(sets):
        if len(s.spheres):
            spheres[i, : len(s.spheres)] = s.spheres
            sph_valid[i, : len(s.spheres)] = True
        if len(s.boxes):
            boxes[i, : len(s.boxes)] = s.boxes
            box_valid[i, : len(s.boxes)] = True
        if len(s.cylinders):
            cylinders[i, : len(s.cylinders)] = s.cylinders
            cyl_valid[i, : len(s.cylinders)] = True
        if s.ground_z is not None:
            ground[i] = s.ground_z
    return BatchedPrimitives(spheres, sph_valid, boxes, box_valid, cylinders, cyl_valid, ground)


# ---------------------------------------------------------------------------
# ray-primitive intersections (exact analytic forms)


def _ray_spheres(o, d, spheres, valid):
    """o (B,3), d (B,R,3) unit, spheres (B,S,4) -> t (B,R,S) with inf misses."""
    oc = o[:, None, :] - spheres[..., :3]  # (B,S,3)
    b = np.einsum("brk,bsk->brs", d, oc)
    c = np.sum(oc * oc, axis=-1) - spheres[..., 3] ** 2  # (B,S)
    disc = b * b - c[:, None, :]
    with np.errstate(invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = -b - sq
        t2 = -b + sq
    t = np.where(t1 >= 0.0, t1, np.where(t2 >= 0.0, t2, np.inf))
    t = np.where((disc >= 0.0) & valid[:, None, :], t, np.inf)
    return t


def _ray_boxes(o, d, boxes, valid):
    """Slab test. boxes (B,Bx,6) center+half -> t (B,R,Bx)."""
    lo = boxes[..., :3] - boxes[..., 3:6]  # (B,Bx,3)
    hi = boxes[..., :3] + boxes[..., 3:6]
    od = o[:, None, None, :]  # (B,1,1,3)
    dd = d[:, :, None, :]  # (B,R,1,3)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[:, None] - od) / dd  # (B,R,Bx,3)
        t2 = (hi[:, None] - od) / dd
        tn = np.minimum(t1, t2)
        tf = np.maximum(t1, t2)
    # 0/0 -> nan when the origin sits exactly on a slab plane; treat as miss
    tn = np.nan_to_num(tn, nan=np.inf)
    tf = np.nan_to_num(tf, nan=-np.inf)
    t_near = np.max(tn, axis=-1)
    t_far = np.min(tf, axis=-1)
    hit = (t_near <= t_far) & (t_far >= 0.0) & valid[:, None, :]
    t = np.where(t_near >= 0.0, t_near, t_far)
    return np.where(hit, t, np.inf)


def _ray_cylinders(o, d, cyls, valid):
    """Finite capped z-cylinders (B,C,5) -> t (B,R,C)."""
    cx, cy, cz, r, hh = (cyls[..., i] for i in range(5))  # each (B,C)
    ox = o[:, 0:1, None] - cx[:, None, :]  # (B,1,C)
    oy = o[:, 1:2, None] - cy[:, None, :]
    oz = o[:, 2:3, None] - cz[:, None, :]
    dx = d[..., 0][:, :, None]  # (B,R,1)
    dy = d[..., 1][:, :, None]
    dz = d[..., 2][:, :, None]

    a = dx * dx + dy * dy  # (B,R,1) broadcast against C
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - (r * r)[:, None, :]
    disc = b * b - a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        ts1 = (-b - sq) / a
        ts2 = (-b + sq) / a

    def side_ok(t):
        z = oz + t * dz
        return (disc >= 0.0) & (a > 1e-300) & (t >= 0.0) & (np.abs(z) <= hh[:, None, :])

    t_side = np.where(side_ok(ts1), ts1, np.where(side_ok(ts2), ts2, np.inf))

    with np.errstate(divide="ignore", invalid="ignore"):
        t_top = (hh[:, None, :] - oz) / dz
        t_bot = (-hh[:, None, :] - oz) / dz

        def cap_ok(t):
            x = ox + t * dx
            y = oy + t * dy
            with np.errstate(invalid="ignore"):
                inside = x * x + y * y <= (r * r)[:, None, :]
            return (t >= 0.0) & np.isfinite(t) & inside

        t_top = np.where(cap_ok(t_top), t_top, np.inf)
        t_bot = np.where(cap_ok(t_bot), t_bot, np.inf)
    t = np.minimum(t_side, np.minimum(t_top, t_bot))
    return np.where(valid[:, None, :], t, np.inf)


def _ray_ground(o, d, ground_z):
    """Ground plane z = g -> t (B,R); nan ground means no plane."""
    oz = o[:, 2][:, None]
    dz = d[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ground_z[:, None] - oz) / dz
    ok = np.isfinite(t) & (t >= 0.0)
    return np.where(ok, t, np.inf)


def ray_primitive(origin: np.ndarray, direction: np.ndarray, prim) -> float | None:
    """Single-ray convenience: smallest t >= 0 against one primitive.

    ``prim`` is ("sphere", (4,)), ("box", (6,)), ("cylinder", (5,)) or
    ("ground", z). Directions must be unit-norm.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise SensorContractError("ray direction must be unit-norm")
    o = np.asarray(origin, dtype=np.float64)[None, :]
    d = direction[None, None, :]
    kind, data = prim
    if kind == "sphere":
        t = _ray_spheres(o, d, np.asarray(data, dtype=np.float64)[None, None, :], np.ones((1, 1), bool))
    elif kind == "box":
        t = _ray_boxes(o, d, np.asarray(data, dtype=np.float64)[None, None, :], np.ones((1, 1), bool))
    elif kind == "cylinder":
        t = _ray_cylinders(o, d, np.asarray(data, dtype=np.float64)[None, None, :], np.ones((1, 1), bool))
    elif kind == "ground":
        t = _ray_ground(o, d, np.full(1, float(data)))[..., None]
    else:
        raise SensorContractError(f"unknown primitive kind '{kind}'")
    tv = float(t.min())
    return tv if np.isfinite(tv) else None


def raycast(prims: BatchedPrimitives, origins: np.ndarray, dirs: np.ndarray,
            max_range: float, chunk_elems: int = 8_000_000) -> np.ndarray:
    """Nearest-hit distance for a bundle of unit rays.

    origins (B,3), dirs (B,R,3) -> (B,R) clamped to max_range (misses too).
    Work is chunked over envs to bound temporary-array memory.
    """
    B, R = dirs.shape[:2]
    P = prims.spheres.shape[1] + prims.boxes.shape[1] + prims.cylinders.shape[1]
    rows = max(1, min(B, chunk_elems // max(1, R * max(P, 1))))
    out = np.empty((B, R))
    for s in range(0, B, rows):
        sl = slice(s, min(B, s + rows))
        o = origins[sl]
        d = dirs[sl]
        t = np.full((o.shape[0], R), np.inf)
        if prims.sph_valid[sl].any():
            t = np.minimum(t, _ray_spheres(o, d, prims.spheres[sl], prims.sph_valid[sl]).min(axis=-1))
        if prims.box_valid[sl].any():
            t = np.minimum(t, _ray_boxes(o, d, prims.boxes[sl], prims.box_valid[sl]).min(axis=-1))
        if prims.cyl_valid[sl].any():
            t = np.minimum(t, _ray_cylinders(o, d, prims.cylinders[sl], prims.cyl_valid[sl]).min(axis=-1))
        t = np.minimum(t, _ray_ground(o, d, prims.ground_z[sl]))
        out[sl] = np.minimum(t, max_range)
    return out


# ---------------------------------------------------------------------------
# camera / LiDAR models


@dataclass
class CameraIntrinsics:
    width: int = 64
    height: int = 64
    fov_h: float = np.deg2rad(90.0)
    fov_v: float = np.deg2rad(75.0)
    max_range: float = 10.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (0 < self.fov_h < np.pi and 0 < self.fov_v < np.pi):
            raise SensorContractError("FOV must lie in (0, pi)")
        if self.width * self.height < 1 or self.max_range <= 0:
            raise SensorContractError("need width*height >= 1 and max_range > 0")
        self.offset = np.asarray(self.offset, dtype=np.float64)

    def pixel_dirs(self) -> np.ndarray:
        """(H*W, 3) unit directions in the camera (body) frame."""
        th = np.tan(self.fov_h / 2)
        tv = np.tan(self.fov_v / 2)
        cols = (np.arange(self.width) + 0.5) / self.width
        rows = (np.arange(self.height) + 0.5) / self.height
        y = th * (1.0 - 2.0 * cols)  # + y = image left
        z = tv * (1.0 - 2.0 * rows)  # + z = image top
        zz, yy = np.meshgrid(z, y, indexing="ij")
        d = np.stack([np.ones_like(yy), yy, zz], axis=-1).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class LidarPattern:
    n_azimuth: int = 16
    n_elevation: int = 4
    azimuth_extent: float = 2 * np.pi
    elevation_extent: float = np.deg2rad(30.0)
    max_range: float = 20.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (0 < self.azimuth_extent <= 2 * np.pi and 0 < self.elevation_extent < np.pi):
            raise SensorContractError("angular extents out of range")
        self.offset = np.asarray(self.offset, dtype=np.float64)

    @property
    def n_rays(self) -> int:
        return self.n_azimuth * self.n_elevation

    def ray_dirs(self) -> np.ndarray:
        """(A*E, 3) unit directions in the body frame."""
        az = np.linspace(0.0, self.azimuth_extent, self.n_azimuth, endpoint=False)
        el = (
            np.linspace(-0.5, 0.5, self.n_elevation) * self.elevation_extent
            if self.n_elevation > 1
            else np.zeros(1)
        )
        aa, ee = np.meshgrid(az, el, indexing="ij")
        d = np.stack(
            [np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1
        ).reshape(-1, 3)
        return d


def fov_cull(prims: BatchedPrimitives, cam_pos: np.ndarray, cam_R: np.ndarray,
             intrinsics: CameraIntrinsics):
    """Conservative keep-masks: bounding sphere vs frustum planes + range.

    Never discards a primitive any in-FOV ray could hit within range; the
    ground plane is unbounded and always kept (it is not in the masks).
    Returns (keep_spheres, keep_boxes, keep_cylinders) boolean arrays.
    """
    th = np.tan(intrinsics.fov_h / 2)
    tv = np.tan(intrinsics.fov_v / 2)
    normals = np.array(
        [
            [th, -1.0, 0.0],
            [th, 1.0, 0.0],
            [tv, 0.0, -1.0],
            [tv, 0.0, 1.0],
            [1.0, 0.0, 0.0],  # behind-camera plane
        ]
    )
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)

    def keep(arr_center, radius):
        # camera-frame centers: R^T (c - pos)
        rel = arr_center - cam_pos[:, None, :]
        local = np.einsum("bji,bpj->bpi", cam_R, rel)
        sd = np.einsum("kp,bnp->bnk", normals, local)  # (B,P,5)
        inside = np.all(sd >= -radius[..., None] - 1e-9, axis=-1)
        rng_ok = np.linalg.norm(local, axis=-1) - radius <= intrinsics.max_range + 1e-9
        return inside & rng_ok

    ks = keep(prims.spheres[..., :3], prims.spheres[..., 3])
    kb = keep(prims.boxes[..., :3], np.linalg.norm(prims.boxes[..., 3:6], axis=-1))
    kc = keep(
        prims.cylinders[..., :3],
        np.sqrt(prims.cylinders[..., 3] ** 2 + prims.cylinders[..., 4] ** 2),
    )
    return ks, kb, kc


def render_depth(prims: BatchedPrimitives, body_pos: np.ndarray, body_R: np.ndarray,
                 intrinsics: CameraIntrinsics, cull: bool = True) -> np.ndarray:
    """Depth images (B, H, W), Euclidean ray distance, max-range clamped."""
    B = body_pos.shape[0]
    cam_pos = body_pos + np.einsum("bij,j->bi", body_R, intrinsics.offset)
    d_cam = intrinsics.pixel_dirs()
    dirs = np.einsum("bij,rj->bri", body_R, d_cam)
    use = prims
    if cull:
        ks, kb, kc = fov_cull(prims, cam_pos, body_R, intrinsics)
        use = prims.masked(ks, kb, kc)
    t = raycast(use, cam_pos, dirs, intrinsics.max_range)
    return t.reshape(B, intrinsics.height, intrinsics.width)


def render_lidar(prims: BatchedPrimitives, body_pos: np.ndarray, body_R: np.ndarray,
                 pattern: LidarPattern) -> np.ndarray:
    """Range array (B, A*E) over the body-attached LiDAR ray pattern."""
    origin = body_pos + np.einsum("bij,j->bi", body_R, pattern.offset)
    dirs = np.einsum("bij,rj->bri", body_R, pattern.ray_dirs())
    # range-ball cull only: the pattern may sweep a full circle
    def ball_keep(center, radius):
        dist = np.linalg.norm(center - origin[:, None, :], axis=-1)
        return dist - radius <= pattern.max_range + 1e-9

    use = prims.masked(
        ball_keep(prims.spheres[..., :3], prims.spheres[..., 3]),
        ball_keep(prims.boxes[..., :3], np.linalg.norm(prims.boxes[..., 3:6], axis=-1)),
        ball_keep(
            prims.cylinders[..., :3],
            np.sqrt(prims.cylinders[..., 3] ** 2 + prims.cylinders[..., 4] ** 2),
        ),
    )
    return raycast(use, origin, dirs, pattern.max_range)


# ---------------------------------------------------------------------------
# signed distance to the nearest obstacle (numpy and differentiable twins)


def sdf_np(points: np.ndarray, prims: BatchedPrimitives) -> np.ndarray:
    """Signed distance (B,) from points (B,3) to the nearest scene surface."""
    B = points.shape[0]
    best = np.full(B, FAR)
    if prims.sph_valid.any():
        d = np.linalg.norm(points[:, None, :] - prims.spheres[..., :3], axis=-1)
        d = d - prims.spheres[..., 3]
        d = np.where(prims.sph_valid, d, FAR)
        best = np.minimum(best, d.min(axis=-1))
    if prims.box_valid.any():
        q = np.abs(points[:, None, :] - prims.boxes[..., :3]) - prims.boxes[..., 3:6]
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        d = np.where(prims.box_valid, outside + inside, FAR)
        best = np.minimum(best, d.min(axis=-1))
    if prims.cyl_valid.any():
        dxy = (
            np.linalg.norm(points[:, None, :2] - prims.cylinders[..., :2], axis=-1)
            - prims.cylinders[..., 3]
        )
        dz = np.abs(points[:, None, 2] - prims.cylinders[..., 2]) - prims.cylinders[..., 4]
        outside = np.sqrt(np.maximum(dxy, 0.0) ** 2 + np.maximum(dz, 0.0) ** 2)
        inside = np.minimum(np.maximum(dxy, dz), 0.0)
        d = np.where(prims.cyl_valid, outside + inside, FAR)
        best = np.minimum(best, d.min(axis=-1))
    has_ground = np.isfinite(prims.ground_z)
    gz = np.where(has_ground, prims.ground_z, -FAR)
    best = np.minimum(best, np.where(has_ground, points[:, 2] - gz, FAR))
    return best


def sdf_var(p: Var, prims: BatchedPrimitives) -> Var:
    """Differentiable twin of sdf_np on a (B,3) position Var.

    Gradient routes to the argmin primitive (exact subgradient of the hard
    min); values agree with sdf_np to float64 precision.
    """
    B = p.value.shape[0]
    parts = []
    if prims.sph_valid.any():
        S = prims.spheres.shape[1]
        pe = ad.expand(p, 1, S)
        diff = ad.sub(pe, Var(prims.spheres[..., :3]))
        d = ad.sub(ad.norm(diff), Var(prims.spheres[..., 3]))
        parts.append(ad.where_mask(prims.sph_valid, d, Var(np.full((B, S), FAR))))
    if prims.box_valid.any():
        Bx = prims.boxes.shape[1]
        pe = ad.expand(p, 1, Bx)
        q = ad.sub(ad.absval(ad.sub(pe, Var(prims.boxes[..., :3]))), Var(prims.boxes[..., 3:6]))
        outside = ad.norm(ad.maximum(q, 0.0))
        # max over the 3 components, then clamp to <= 0
        qmax = ad.maximum(ad.maximum(ad.index_last(q, 0), ad.index_last(q, 1)), ad.index_last(q, 2))
        inside = ad.minimum(qmax, 0.0)
        d = ad.add(outside, inside)
        parts.append(ad.where_mask(prims.box_valid, d, Var(np.full((B, Bx), FAR))))
    if prims.cyl_valid.any():
        C = prims.cylinders.shape[1]
        pxy = ad.slice_last(p, 0, 2)
        pz = ad.index_last(p, 2)
        pe = ad.expand(pxy, 1, C)
        dxy = ad.sub(
            ad.norm(ad.sub(pe, Var(prims.cylinders[..., :2]))), Var(prims.cylinders[..., 3])
        )
        dz = ad.sub(
            ad.absval(ad.sub(ad.expand(pz, 1, C), Var(prims.cylinders[..., 2]))),
            Var(prims.cylinders[..., 4]),
        )
        outside = ad.sqrt(
            ad.add(
                ad.square(ad.maximum(dxy, 0.0)),
                ad.add(ad.square(ad.maximum(dz, 0.0)), 1e-300),
            )
        )
        inside = ad.minimum(ad.maximum(dxy, dz), 0.0)
        d = ad.add(outside, inside)
        parts.append(ad.where_mask(prims.cyl_valid, d, Var(np.full((B, C), FAR))))
    has_ground = np.isfinite(prims.ground_z)
    if has_ground.any():
        gz = np.where(has_ground, prims.ground_z, -FAR)
        dg = ad.sub(ad.index_last(p, 2), Var(gz))
        dg = ad.where_mask(has_ground, dg, Var(np.full(B, FAR)))
        parts.append(ad.reshape(dg, (B, 1)))
    if not parts:
        return Var(np.full(B, FAR))
    return ad.amin(ad.concat(parts, axis=-1), axis=-1)


# ---------------------------------------------------------------------------
# IMU


@dataclass
class ImuModel:
    """Accelerometer + gyro with white noise and random-walk bias.

    Measurement model (body frame): accel = R^T (v_dot - g) + b_a + n_a,
    gyro = w + b_g + n_g. Biases evolve as b += rw_std*sqrt(dt)*N(0,1).
    Deterministic under a fixed seed.
    """

    batch: int
    accel_noise_std: float = 0.0
    gyro_noise_std: float = 0.0
    accel_bias_rw_std: float = 0.0
    gyro_bias_rw_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.accel_noise_std, self.gyro_noise_std,
               self.accel_bias_rw_std, self.gyro_bias_rw_std) < 0:
            raise SensorContractError("noise/drift stds must be >= 0")
        self.accel_bias = np.zeros((self.batch, 3))
        self.gyro_bias = np.zeros((self.batch, 3))
        self._rng = np.random.default_rng(self.seed)

    def reset(self, env_mask=None):
        if env_mask is None:
            self.accel_bias[:] = 0.0
            self.gyro_bias[:] = 0.0
        else:
            self.accel_bias[env_mask] = 0.0
            self.gyro_bias[env_mask] = 0.0

    def read(self, body_R: np.ndarray, w_body: np.ndarray | None,
             v_dot: np.ndarray, g_vec: np.ndarray, dt: float):
        """(accel, gyro) body-frame measurements; advances bias state."""
        sq = np.sqrt(dt)
        self.accel_bias += self.accel_bias_rw_std * sq * self._rng.standard_normal((self.batch, 3))
        self.gyro_bias += self.gyro_bias_rw_std * sq * self._rng.standard_normal((self.batch, 3))
        specific = np.einsum("bji,bj->bi", body_R, v_dot - g_vec)
        accel = specific + self.accel_bias
        if self.accel_noise_std:
            accel = accel + self.accel_noise_std * self._rng.standard_normal((self.batch, 3))
        if w_body is None:
            w_body = np.zeros((self.batch, 3))
        gyro = w_body + self.gyro_bias
        if self.gyro_noise_std:
            gyro = gyro + self.gyro_noise_std * self._rng.standard_normal((self.batch, 3))
        return accel, gyro


# ---------------------------------------------------------------------------
# point-mass attitude reconstruction


def ema_update(v_ema: np.ndarray, v: np.ndarray, alpha: float) -> np.ndarray:
    """v_ema' = (1-alpha) v_ema + alpha v, 0 < alpha <= 1."""
    if not (0.0 < alpha <= 1.0):
        raise SensorContractError("ema alpha must lie in (0, 1]")
    return (1.0 - alpha) * v_ema + alpha * v


def reconstruct_attitude(a_thrust: np.ndarray, v_ema: np.ndarray) -> np.ndarray:
    """Attitude for point-mass states from thrust direction + velocity EMA.

    Body z follows the thrust vector (world up when thrust is degenerate).
    Body x keeps the horizontal heading of the velocity EMA exactly (world
    x when the horizontal speed is negligible): its xy components equal the
    heading and its z component is chosen so x_B is orthogonal to z_B, which
    needs z_B to have a vertical component; near-horizontal thrust falls
    back to plain orthogonalization. Returns (B,3,3) matrices with columns
    (x_B, y_B, z_B).
    """
    B = a_thrust.shape[0]
    tn = np.linalg.norm(a_thrust, axis=-1)
    z_b = np.where(
        (tn > 1e-6)[:, None], a_thrust / np.maximum(tn, 1e-12)[:, None],
        np.array([0.0, 0.0, 1.0]),
    )
    horiz = v_ema.copy()
    horiz[:, 2] = 0.0
    hn = np.linalg.norm(horiz, axis=-1)
    x_ref = np.where((hn > 1e-3)[:, None], horiz / np.maximum(hn, 1e-12)[:, None],
                     np.array([1.0, 0.0, 0.0]))
    zz = z_b[:, 2]
    upright = np.abs(zz) > 0.1
    # heading-preserving solve: pick x_z with x . z_B = 0
    xz = -(x_ref[:, 0] * z_b[:, 0] + x_ref[:, 1] * z_b[:, 1]) / np.where(upright, zz, 1.0)
    x_solve = np.stack([x_ref[:, 0], x_ref[:, 1], xz], axis=-1)
    # fallback: Gram-Schmidt of x_ref against z_B (heading only approximate)
    x_gs = x_ref - np.sum(x_ref * z_b, axis=-1, keepdims=True) * z_b
    x_raw = np.where(upright[:, None], x_solve, x_gs)
    xn = np.linalg.norm(x_raw, axis=-1)
    # x_ref parallel to z_b: fall back to any axis orthogonal to z
    parallel_fb = np.cross(np.broadcast_to([0.0, 1.0, 0.0], (B, 3)), z_b)
    fn = np.linalg.norm(parallel_fb, axis=-1)
    parallel_fb = parallel_fb / np.maximum(fn, 1e-12)[:, None]
    x_b = np.where((xn > 1e-9)[:, None], x_raw / np.maximum(xn, 1e-12)[:, None], parallel_fb)
    y_b = np.cross(z_b, x_b)
    return np.stack([x_b, y_b, z_b], axis=-1)


def yaw_of(R: np.ndarray) -> np.ndarray:
    """Yaw angle (rotation of body x about world z), (B,)."""
    return np.arctan2(R[..., 1, 0], R[..., 0, 0])


# ---------------------------------------------------------------------------
# depth/LiDAR dump format: 16-byte header (magic, width, height, frame index)
# followed by row-major little-endian float32 pixels

DUMP_MAGIC = b"DAIM"


def write_depth_dump(path, image: np.ndarray, frame_index: int = 0) -> None:
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 1:
        img = img[None, :]
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC)
        f.write(struct.pack("<III", w, h, frame_index))
        f.write(img.tobytes(order="C"))


def read_depth_dump(path):
    """Returns (image (H,W) float32, frame_index)."""
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:4] != DUMP_MAGIC:
            raise SensorContractError(f"not a depth dump: {path}")
        w, h, idx = struct.unpack("<III", head[4:])
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != w * h:
        raise SensorContractError(f"truncated depth dump: {path}")
    return data.reshape(h, w), idx
