"""Differentiable quadrotor dynamics: four models plus the inner rate loop.

All models advance batched states with explicit Euler at ``params.dt`` and
stay differentiable end-to-end through the autodiff tape. Conventions are
fixed once here: world frame is z-up with gravity (0, 0, -9.81); thrust is
mass-normalized (acceleration units); quaternions are (w, x, y, z).

Model-specific action semantics:

* full / simplified: command = (collective thrust accel c, body rates).
* point-mass continuous: command = thrust-only acceleration in world frame;
  gravity is added by the dynamics, so hover is u = -g.
* point-mass discrete: command = TOTAL commanded acceleration with gravity
  folded in, so hover is u = 0. Consumers that need the thrust direction
  subtract g_vec back out.

The discrete-time velocity update averages (u_{t-1} + u_t)/2 with
u_{-1} = u_0: the as-published average over (u_t, u_{t+1}) needs the next
action, which a causal simulator does not have; under a constant action the
two are identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from quadsim import autodiff as ad
from quadsim.autodiff import Tape, Var

GRAVITY = np.array([0.0, 0.0, -9.81])

MODEL_NAMES = ("full", "simplified", "pm_continuous", "pm_discrete")


class ContractError(ValueError):
    """A dynamics precondition was violated (bad shape, non-finite state)."""


@dataclass
class QuadParams:
    """Physical and control parameters, shared read-only across a batch.

    drag_coeff and latency may be scalars or per-env (B,) arrays (domain
    randomization). ``lag_decay`` = exp(-latency*dt) is precomputed so the
    per-step math contains no transcendentals.
    """

    mass: float = 1.0
    inertia: np.ndarray = field(
        default_factory=lambda: np.diag([2.3e-3, 2.3e-3, 4.0e-3])
    )
    drag_matrix_diag: np.ndarray = field(default_factory=lambda: np.zeros(3))
    drag_coeff: np.ndarray | float = 0.3
    latency: np.ndarray | float = 4.0
    g_vec: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    rate_gains: np.ndarray = field(default_factory=lambda: np.array([20.0, 20.0, 8.0]))
    dt: float = 0.01

    inertia_inv: np.ndarray = field(init=False)
    lag_decay: np.ndarray | float = field(init=False)

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=np.float64)
        J = self.inertia
        if J.shape != (3, 3) or not np.allclose(J, J.T):
            raise ContractError("inertia must be a symmetric 3x3 matrix")
        if np.any(np.linalg.eigvalsh(J) <= 0):
            raise ContractError("inertia must be positive definite")
        if self.dt <= 0:
            raise ContractError("dt must be positive")
        self.drag_matrix_diag = np.asarray(self.drag_matrix_diag, dtype=np.float64)
        if np.any(self.drag_matrix_diag < 0) or np.any(np.asarray(self.drag_coeff) < 0):
            raise ContractError("drag terms must be non-negative")
        if np.any(np.asarray(self.latency) < 0):
            raise ContractError("latency must be non-negative")
        self.g_vec = np.asarray(self.g_vec, dtype=np.float64)
        self.rate_gains = np.asarray(self.rate_gains, dtype=np.float64)
        self.inertia_inv = np.linalg.inv(J)
        self.lag_decay = np.exp(-np.asarray(self.latency, dtype=np.float64) * self.dt)

    def with_randomized(self, drag_coeff=None, latency=None) -> "QuadParams":
        """Copy with per-env drag/latency overrides (arrays of shape (B,))."""
        out = replace(
            self,
            drag_coeff=self.drag_coeff if drag_coeff is None else drag_coeff,
            latency=self.latency if latency is None else latency,
        )
        return out


@dataclass
class QuadState:
    """Batched state; only the fields a model integrates are populated."""

    p: Var
    v: Var
    q: Var | None = None  # full model attitude
    R: Var | None = None  # simplified model attitude
    w: Var | None = None  # body rates (full model)
    a_lat: Var | None = None  # latent acceleration (pm_continuous)
    u_prev: Var | None = None  # previous total accel command (pm_discrete)

    @property
    def batch(self) -> int:
        return self.p.value.shape[0]

    def fields(self):
        out = {"p": self.p, "v": self.v}
        for name in ("q", "R", "w", "a_lat", "u_prev"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out

    def detached(self) -> "QuadState":
        kw = {name: Var(v.value) for name, v in self.fields().items()}
        return QuadState(**kw)

    def values(self):
        return {name: v.value for name, v in self.fields().items()}


def _bview(arr: np.ndarray, batch: int) -> Var:
    """Constant broadcast to (batch, ...) without copying."""
    return Var(np.broadcast_to(arr, (batch,) + arr.shape))


def _check_state_finite(state: QuadState):
    for name, v in state.fields().items():
        if not np.all(np.isfinite(v.value)):
            raise ContractError(f"non-finite state field '{name}'")


def _qconj(q: Var) -> Var:
    return ad.concat([ad.slice_last(q, 0, 1), ad.neg(ad.slice_last(q, 1, 4))], axis=-1)


def rate_loop(w: Var, w_cmd: Var, params: QuadParams) -> Var:
    """Body-rate P controller with gyroscopic feedforward.

    tau = J (K_w * (w_cmd - w)) + w x (J w). The referenced geometric
    controller leaves the torque mapping open; this stand-in is exact at
    zero rate error and keeps the step differentiable.
    """
    B = w.value.shape[0]
    kw = _bview(params.rate_gains, B)
    err = ad.mul(kw, ad.sub(w_cmd, w))
    feedback = ad.matvec3(Var(params.inertia), err)
    gyro = ad.cross(w, ad.matvec3(Var(params.inertia), w))
    return ad.add(feedback, gyro)


def step_full(state: QuadState, thrust: Var, w_cmd: Var, params: QuadParams) -> QuadState:
    """One explicit-Euler step of the full rigid-body model.

    p' = p + v dt
    v' = v + (g + c z_B - R D R^T v) dt
    q' = normalize(q + 0.5 q x (0, w) dt)
    w' = w + J^-1 (tau - w x J w) dt,  tau from rate_loop
    """
    _check_state_finite(state)
    B = state.batch
    p, v, q, w = state.p, state.v, state.q, state.w
    g = _bview(params.g_vec, B)

    z_b = ad.quat_rotate(q, _bview(np.array([0.0, 0.0, 1.0]), B))
    v_body = ad.quat_rotate(_qconj(q), v)
    drag = ad.quat_rotate(q, ad.mul(_bview(params.drag_matrix_diag, B), v_body))
    v_dot = ad.sub(ad.add(g, ad.mul(z_b, thrust)), drag)

    tau = rate_loop(w, w_cmd, params)
    gyro = ad.cross(w, ad.matvec3(Var(params.inertia), w))
    w_dot = ad.matvec3(Var(params.inertia_inv), ad.sub(tau, gyro))

    zero = Var(np.zeros((B, 1)))
    q_dot = ad.mul(ad.quat_mul(q, ad.concat([zero, w], axis=-1)), 0.5)

    dt = params.dt
    return QuadState(
        p=ad.add(p, ad.mul(v, dt)),
        v=ad.add(v, ad.mul(v_dot, dt)),
        q=ad.quat_normalize(ad.add(q, ad.mul(q_dot, dt))),
        w=ad.add(w, ad.mul(w_dot, dt)),
    )


def _gram_schmidt_columns(R: Var) -> Var:
    x = ad.index_last(R, 0)
    y = ad.index_last(R, 1)
    xn = ad.div(x, ad.norm(x))
    y_orth = ad.sub(y, ad.mul(xn, ad.dot(y, xn)))
    yn = ad.div(y_orth, ad.norm(y_orth))
    zn = ad.cross(xn, yn)
    return ad.stack([xn, yn, zn], axis=-1)


def _div_by_batch_scalar(v: Var, s: Var) -> Var:
    return ad.div(v, s)


def step_simplified(state: QuadState, thrust: Var, w: Var, params: QuadParams) -> QuadState:
    """Explicit Euler of v' = R(0,0,c) + g, R' = R [w]x, re-orthonormalized.

    Body rates are taken directly as inputs; rate dynamics are bypassed.
    """
    _check_state_finite(state)
    B = state.batch
    p, v, R = state.p, state.v, state.R
    g = _bview(params.g_vec, B)

    z_b = ad.index_last(R, 2)  # third column
    v_dot = ad.add(ad.mul(z_b, thrust), g)

    wx, wy, wz = (ad.index_last(w, i) for i in range(3))
    zero = Var(np.zeros(B))
    skew = ad.stack(
        [
            ad.stack([zero, ad.neg(wz), wy], axis=-1),
            ad.stack([wz, zero, ad.neg(wx)], axis=-1),
            ad.stack([ad.neg(wy), wx, zero], axis=-1),
        ],
        axis=-2,
    )
    R_dot = ad.matmat3(R, skew)

    dt = params.dt
    R_next = _gram_schmidt_columns(ad.add(R, ad.mul(R_dot, dt)))
    return QuadState(
        p=ad.add(p, ad.mul(v, dt)),
        v=ad.add(v, ad.mul(v_dot, dt)),
        R=R_next,
    )


def step_pm_continuous(state: QuadState, u: Var, params: QuadParams) -> QuadState:
    """Point-mass step with exact first-order control latency.

    a' = u + (a - u) exp(-lambda dt)   (exact lag solution, precomputed decay)
    v' = v + (a' + g - d v) dt
    p' = p + v dt
    """
    _check_state_finite(state)
    B = state.batch
    p, v, a = state.p, state.v, state.a_lat
    g = _bview(params.g_vec, B)
    decay = Var(np.broadcast_to(np.asarray(params.lag_decay), (B,)))
    d = Var(np.broadcast_to(np.asarray(params.drag_coeff), (B,)))

    a_next = ad.add(u, ad.mul(ad.sub(a, u), decay))
    v_dot = ad.sub(ad.add(a_next, g), ad.mul(d, v))
    dt = params.dt
    return QuadState(
        p=ad.add(p, ad.mul(v, dt)),
        v=ad.add(v, ad.mul(v_dot, dt)),
        a_lat=a_next,
    )


def step_pm_discrete(state: QuadState, u: Var, params: QuadParams) -> QuadState:
    """Second-order kinematic step on total commanded acceleration.

    p' = p + v dt + u dt^2 / 2
    v' = v + (u_prev + u) dt / 2
    """
    _check_state_finite(state)
    p, v, u_prev = state.p, state.v, state.u_prev
    dt = params.dt
    return QuadState(
        p=ad.add(p, ad.add(ad.mul(v, dt), ad.mul(u, 0.5 * dt * dt))),
        v=ad.add(v, ad.mul(ad.add(u_prev, u), 0.5 * dt)),
        u_prev=u,
    )


def action_squash(raw: Var, lo: np.ndarray, hi: np.ndarray) -> Var:
    """tanh-squash then affine-map into [lo, hi]; strictly inside the box."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    B = raw.value.shape[0]
    center = _bview((lo + hi) * 0.5, B) if lo.ndim == 1 else Var((lo + hi) * 0.5)
    half = _bview((hi - lo) * 0.5, B) if lo.ndim == 1 else Var((hi - lo) * 0.5)
    return ad.add(center, ad.mul(half, ad.tanh(raw)))


# ---------------------------------------------------------------------------
# uniform model interface


class DynamicsModel:
    """Shared interface: init_state / step / hover command / action box."""

    name: str = ""
    action_dim: int = 0

    def __init__(self, params: QuadParams):
        self.params = params

    def init_state(self, p: np.ndarray, v: np.ndarray) -> QuadState:
        raise NotImplementedError

    def step(self, state: QuadState, action: Var) -> QuadState:
        """Advance one step. ``action`` is a squashed (B, action_dim) Var."""
        raise NotImplementedError

    def hover_action(self, batch: int) -> np.ndarray:
        """The documented hover fixed-point action, in command units."""
        raise NotImplementedError

    def action_box(self):
        """Default (lo, hi) command-space bounds for action squashing."""
        raise NotImplementedError

    def thrust_accel(self, state: QuadState) -> np.ndarray:
        """World-frame thrust acceleration estimate for attitude/IMU use."""
        raise NotImplementedError


class FullQuadrotor(DynamicsModel):
    name = "full"
    action_dim = 4  # thrust, body rates

    def init_state(self, p, v):
        B = p.shape[0]
        q = np.zeros((B, 4))
        q[:, 0] = 1.0
        return QuadState(p=Var(np.array(p, dtype=np.float64)),
                         v=Var(np.array(v, dtype=np.float64)),
                         q=Var(q), w=Var(np.zeros((B, 3))))

    def step(self, state, action):
        thrust = ad.index_last(action, 0)
        w_cmd = ad.slice_last(action, 1, 4)
        return step_full(state, thrust, w_cmd, self.params)

    def hover_action(self, batch):
        a = np.zeros((batch, self.action_dim))
        a[:, 0] = -self.params.g_vec[2]
        return a

    def action_box(self):
        gz = -self.params.g_vec[2]
        lo = np.array([0.0, -6.0, -6.0, -3.0])
        hi = np.array([2.0 * gz, 6.0, 6.0, 3.0])
        return lo, hi

    def attitude_np(self, state) -> np.ndarray:
        return quat_to_matrix_np(state.q.value)


class SimplifiedQuadrotor(DynamicsModel):
    name = "simplified"
    action_dim = 4

    def init_state(self, p, v):
        B = p.shape[0]
        R = np.broadcast_to(np.eye(3), (B, 3, 3)).copy()
        return QuadState(p=Var(np.array(p, dtype=np.float64)),
                         v=Var(np.array(v, dtype=np.float64)), R=Var(R))

    def step(self, state, action):
        thrust = ad.index_last(action, 0)
        w = ad.slice_last(action, 1, 4)
        return step_simplified(state, thrust, w, self.params)

    def hover_action(self, batch):
        a = np.zeros((batch, self.action_dim))
        a[:, 0] = -self.params.g_vec[2]
        return a

    def action_box(self):
        gz = -self.params.g_vec[2]
        lo = np.array([0.0, -6.0, -6.0, -3.0])
        hi = np.array([2.0 * gz, 6.0, 6.0, 3.0])
        return lo, hi

    def attitude_np(self, state) -> np.ndarray:
        return state.R.value


class PointMassContinuous(DynamicsModel):
    name = "pm_continuous"
    action_dim = 3  # thrust-only acceleration, world frame

    def init_state(self, p, v):
        B = p.shape[0]
        a0 = np.broadcast_to(-self.params.g_vec, (B, 3)).copy()
        return QuadState(p=Var(np.array(p, dtype=np.float64)),
                         v=Var(np.array(v, dtype=np.float64)), a_lat=Var(a0))

    def step(self, state, action):
        return step_pm_continuous(state, action, self.params)

    def hover_action(self, batch):
        return np.broadcast_to(-self.params.g_vec, (batch, 3)).copy()

    def action_box(self):
        gz = -self.params.g_vec[2]
        lo = np.array([-6.0, -6.0, gz - 6.0])
        hi = np.array([6.0, 6.0, gz + 6.0])
        return lo, hi

    def thrust_accel(self, state):
        return state.a_lat.value


class PointMassDiscrete(DynamicsModel):
    name = "pm_discrete"
    action_dim = 3  # total commanded acceleration, world frame

    def init_state(self, p, v):
        B = p.shape[0]
        return QuadState(p=Var(np.array(p, dtype=np.float64)),
                         v=Var(np.array(v, dtype=np.float64)),
                         u_prev=Var(np.zeros((B, 3))))

    def step(self, state, action):
        return step_pm_discrete(state, action, self.params)

    def hover_action(self, batch):
        return np.zeros((batch, 3))

    def action_box(self):
        return np.full(3, -6.0), np.full(3, 6.0)

    def thrust_accel(self, state):
        return state.u_prev.value - self.params.g_vec


_MODELS = {
    cls.name: cls
    for cls in (FullQuadrotor, SimplifiedQuadrotor, PointMassContinuous, PointMassDiscrete)
}


def make_model(name: str, params: QuadParams) -> DynamicsModel:
    try:
        return _MODELS[name](params)
    except KeyError:
        raise ContractError(f"unknown dynamics model '{name}'; choose from {MODEL_NAMES}")


# ---------------------------------------------------------------------------
# numpy attitude helpers (no gradients; sensors and observation assembly)


def quat_to_matrix_np(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotate_np(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    u = q[..., 1:]
    w = q[..., :1]
    uv = np.cross(u, np.broadcast_to(v, u.shape))
    uuv = np.cross(u, uv)
    return v + 2.0 * (w * uv + uuv)


# ---------------------------------------------------------------------------
# recorded-rollout gradient extraction


@dataclass
class RolloutGrad:
    grad: np.ndarray
    detached: bool  # True when a detach/reset boundary cut the path


def rollout_grad(
    model: DynamicsModel,
    state0: QuadState,
    raw_actions: np.ndarray,
    t1: int,
    t2: int,
    weights: dict[str, np.ndarray] | None = None,
    squash: bool = False,
) -> RolloutGrad:
    """d(w . s_{t2}) / d(a_{t1}) through a freshly recorded rollout.

    raw_actions has shape (T, B, action_dim); weights maps state field
    names to per-field weight arrays (defaults to all ones). When squash is
    set, actions pass through the model's action box first.
    """
    T = raw_actions.shape[0]
    if not (0 <= t1 < t2 <= T):
        raise ContractError(f"need 0 <= t1 < t2 <= T, got t1={t1}, t2={t2}, T={T}")
    tape = Tape()
    action_vars = [tape.leaf(raw_actions[t]) for t in range(T)]
    lo, hi = model.action_box()
    state = state0
    for t in range(T):
        act = action_squash(action_vars[t], lo, hi) if squash else action_vars[t]
        state = model.step(state, act)
        if t + 1 == t2:
            break
    root = None
    for name, var in state.fields().items():
        if weights is not None:
            if name not in weights:
                continue
            w_arr = np.asarray(weights[name], dtype=np.float64)
        else:
            w_arr = np.ones_like(var.value)
        term = ad.vsum(ad.mul(var, Var(np.broadcast_to(w_arr, var.value.shape))))
        root = term if root is None else ad.add(root, term)
    grads = tape.backward(root)
    target = action_vars[t1]
    return RolloutGrad(grad=grads[target], detached=not tape.reaches(root, target))
