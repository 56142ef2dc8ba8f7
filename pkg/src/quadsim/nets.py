"""Minimal neural components on the autodiff tape, plus Adam and the
weight container used for checkpoints and policy export.

Parameters live as named float64 numpy arrays in a ParamSet; each training
window binds them as fresh leaves on that window's tape. The container
format is a versioned JSON manifest (layer names, shapes, activation tags,
observation spec) next to a little-endian float32 blob.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from quadsim import autodiff as ad
from quadsim.autodiff import Tape, Var

CONTAINER_VERSION = 1
LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 2.0


class IntegrityError(RuntimeError):
    pass


class ParamSet:
    """Ordered named parameter arrays + per-tape leaf binding."""

    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}
        self.tags: dict[str, str] = {}

    def add(self, name: str, array: np.ndarray, tag: str = "linear") -> None:
        if name in self.arrays:
            raise ValueError(f"duplicate parameter '{name}'")
        self.arrays[name] = np.asarray(array, dtype=np.float64)
        self.tags[name] = tag

    def bind(self, tape: Tape | None) -> dict[str, Var]:
        """Leaves on `tape`, or untracked constants when tape is None."""
        if tape is None:
            return {k: Var(v) for k, v in self.arrays.items()}
        return {k: tape.leaf(v) for k, v in self.arrays.items()}

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, v in self.arrays.items():
            out.add(k, v.copy(), self.tags[k])
        return out

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def round_to_f32(self) -> None:
        """Quantize in place to float32-representable values (export prep)."""
        for k in self.arrays:
            self.arrays[k] = self.arrays[k].astype(np.float32).astype(np.float64)


def _xavier(rng, n_in, n_out, scale=1.0):
    s = scale * np.sqrt(2.0 / (n_in + n_out))
    return rng.normal(scale=s, size=(n_in, n_out))


# ---------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, ps: ParamSet, name: str, n_in: int, n_out: int, rng,
                 scale: float = 1.0, tag: str = "linear"):
        self.name = name
        ps.add(f"{name}.W", _xavier(rng, n_in, n_out, scale), tag)
        ps.add(f"{name}.b", np.zeros(n_out), tag)

    def __call__(self, lv: dict, x: Var) -> Var:
        b = ad.expand(lv[f"{self.name}.b"], 0, x.value.shape[0])
        return ad.add(ad.matmul(x, lv[f"{self.name}.W"]), b)


class MLP:
    """tanh MLP; the final layer is linear."""

    def __init__(self, ps, name, n_in, hidden, n_out, rng, out_scale=1.0):
        sizes = [n_in] + list(hidden) + [n_out]
        self.layers = []
        for i in range(len(sizes) - 1):
            last = i == len(sizes) - 2
            self.layers.append(
                Linear(ps, f"{name}.l{i}", sizes[i], sizes[i + 1], rng,
                       scale=out_scale if last else 1.0,
                       tag="linear" if last else "tanh")
            )

    def __call__(self, lv, x):
        for i, layer in enumerate(self.layers):
            x = layer(lv, x)
            if i < len(self.layers) - 1:
                x = ad.tanh(x)
        return x


class GRUCell:
    """Single-layer gated recurrence (standard GRU equations)."""

    def __init__(self, ps, name, n_in, n_hidden, rng):
        self.name = name
        self.n_hidden = n_hidden
        ps.add(f"{name}.Wi", _xavier(rng, n_in, 3 * n_hidden), "gru")
        ps.add(f"{name}.Wh", _xavier(rng, n_hidden, 3 * n_hidden), "gru")
        ps.add(f"{name}.bi", np.zeros(3 * n_hidden), "gru")
        ps.add(f"{name}.bh", np.zeros(3 * n_hidden), "gru")

    def __call__(self, lv, x: Var, h: Var) -> Var:
        H = self.n_hidden
        B = x.value.shape[0]
        gi = ad.add(ad.matmul(x, lv[f"{self.name}.Wi"]), ad.expand(lv[f"{self.name}.bi"], 0, B))
        gh = ad.add(ad.matmul(h, lv[f"{self.name}.Wh"]), ad.expand(lv[f"{self.name}.bh"], 0, B))
        r = ad.sigmoid(ad.add(ad.slice_last(gi, 0, H), ad.slice_last(gh, 0, H)))
        z = ad.sigmoid(ad.add(ad.slice_last(gi, H, 2 * H), ad.slice_last(gh, H, 2 * H)))
        n = ad.tanh(
            ad.add(
                ad.slice_last(gi, 2 * H, 3 * H),
                ad.mul(r, ad.slice_last(gh, 2 * H, 3 * H)),
            )
        )
        one_minus_z = ad.sub(1.0, z)
        return ad.add(ad.mul(one_minus_z, n), ad.mul(z, h))


class ConvEncoder:
    """Two 3x3 stride-2 conv layers (1->c1->c2) + flatten + linear."""

    def __init__(self, ps, name, height, width, n_out, rng, c1=8, c2=16):
        self.name = name
        self.c1, self.c2 = c1, c2
        self.h1 = (height - 3) // 2 + 1
        self.w1 = (width - 3) // 2 + 1
        self.h2 = (self.h1 - 3) // 2 + 1
        self.w2 = (self.w1 - 3) // 2 + 1
        if self.h2 < 1 or self.w2 < 1:
            raise ValueError(f"image {height}x{width} too small for the 2-conv encoder")
        ps.add(f"{name}.k1", _xavier(rng, 9, c1), "conv")
        ps.add(f"{name}.b1", np.zeros(c1), "conv")
        ps.add(f"{name}.k2", _xavier(rng, 9 * c1, c2), "conv")
        ps.add(f"{name}.b2", np.zeros(c2), "conv")
        self.flat = c2 * self.h2 * self.w2
        self.out = Linear(ps, f"{name}.out", self.flat, n_out, rng, tag="tanh")

    def _conv(self, lv, x: Var, kname: str, bname: str) -> Var:
        """One conv layer as im2col + matmul; returns (B*L, c_out) rows."""
        B = x.value.shape[0]
        cols = ad.im2col(x, 3, 2)  # (B, C*9, L)
        L = cols.value.shape[-1]
        ck = cols.value.shape[1]
        flat = ad.reshape(ad.transpose3(cols), (B * L, ck))
        bias = ad.expand(lv[bname], 0, B * L)
        return ad.tanh(ad.add(ad.matmul(flat, lv[kname]), bias))

    def __call__(self, lv, img: Var) -> Var:
        # img: (B, H, W) -> (B, n_out)
        B, H, W = img.value.shape
        x = ad.reshape(img, (B, 1, H, W))
        y = self._conv(lv, x, f"{self.name}.k1", f"{self.name}.b1")
        x = ad.reshape(
            ad.transpose3(ad.reshape(y, (B, self.h1 * self.w1, self.c1))),
            (B, self.c1, self.h1, self.w1),
        )
        y = self._conv(lv, x, f"{self.name}.k2", f"{self.name}.b2")
        feat = ad.reshape(y, (B, self.flat))
        return ad.tanh(self.out(lv, feat))


# ---------------------------------------------------------------------------
# policy / value


@dataclass
class PolicyArch:
    proprio_dim: int
    action_dim: int
    visual: dict | None = None  # {"kind","height","width"} or {"kind","rays"}
    recurrent: bool = True
    hidden: int = 64
    mlp: tuple = (128, 128)
    conv_feat: int = 32
    log_sigma_init: float = -1.2
    log_sigma_max: float = LOG_SIGMA_MAX
    # fixed per-field input conditioning; physical units stay at the env
    # boundary and the scale ships inside the export container
    input_scale: tuple | None = None


class PolicyNet:
    """Optionally recurrent, optionally convolutional Gaussian policy.

    forward gives (mu, log_sigma, next_hidden); log_sigma is state-dependent
    and clamped to [-5, 2]. Raw action samples are squashed by the env.
    """

    def __init__(self, arch: PolicyArch, rng):
        self.arch = arch
        self.ps = ParamSet()
        feat_dim = arch.proprio_dim
        self.encoder = None
        if arch.visual is not None:
            if arch.visual["kind"] == "depth":
                self.encoder = ConvEncoder(
                    self.ps, "enc", arch.visual["height"], arch.visual["width"],
                    arch.conv_feat, rng,
                )
                feat_dim += arch.conv_feat
            else:  # lidar ranges enter as a flat vector
                self.encoder = Linear(self.ps, "enc.lidar", arch.visual["rays"],
                                      arch.conv_feat, rng, tag="tanh")
                feat_dim += arch.conv_feat
        self.gru = None
        trunk_in = feat_dim
        if arch.recurrent:
            self.gru = GRUCell(self.ps, "gru", feat_dim, arch.hidden, rng)
            trunk_in = arch.hidden
        self.trunk = MLP(self.ps, "trunk", trunk_in, arch.mlp, arch.mlp[-1], rng)
        self.mu_head = Linear(self.ps, "mu", arch.mlp[-1], arch.action_dim, rng, scale=0.01)
        self.sig_head = Linear(self.ps, "sig", arch.mlp[-1], arch.action_dim, rng, scale=0.01)
        self.ps.arrays["sig.b"][:] = arch.log_sigma_init

    def initial_hidden(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.arch.hidden))

    def forward(self, lv, proprio: Var, visual, hidden: Var | None):
        x = proprio
        if self.arch.input_scale is not None:
            scale = np.asarray(self.arch.input_scale, dtype=np.float64)
            x = ad.mul(x, Var(np.broadcast_to(scale, x.value.shape)))
        if self.encoder is not None:
            if visual is None:
                raise ValueError("policy expects a visual observation")
            img = visual if isinstance(visual, Var) else Var(np.asarray(visual, dtype=np.float64))
            img = ad.mul(img, 1.0 / float(self.arch.visual.get("max_range", 1.0)))
            if self.arch.visual["kind"] == "depth":
                feat = self.encoder(lv, img)
            else:
                feat = ad.tanh(self.encoder(lv, img))
            x = ad.concat([x, feat], axis=-1)
        h_next = hidden
        if self.gru is not None:
            h_next = self.gru(lv, x, hidden)
            x = h_next
        z = ad.tanh(self.trunk(lv, x))
        mu = self.mu_head(lv, z)
        log_sigma = ad.clamp(self.sig_head(lv, z), LOG_SIGMA_MIN, self.arch.log_sigma_max)
        return mu, log_sigma, h_next


class ValueNet:
    """Privileged-state MLP critic: (B, K) -> (B,)."""

    def __init__(self, n_in: int, rng, hidden=(128, 128), input_scale=None):
        self.ps = ParamSet()
        self.mlp = MLP(self.ps, "value", n_in, hidden, 1, rng)
        self.input_scale = (
            np.asarray(input_scale, dtype=np.float64) if input_scale is not None else None
        )

    def forward(self, lv, x) -> Var:
        xv = x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))
        if self.input_scale is not None:
            xv = ad.mul(xv, Var(np.broadcast_to(self.input_scale, xv.value.shape)))
        return ad.index_last(self.mlp(lv, xv), 0)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8), deterministic."""

    def __init__(self, ps: ParamSet, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                 grad_clip: float | None = None):
        self.ps = ps
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in ps.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in ps.arrays.items()}

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Applies one update; returns the (pre-clip) global grad norm."""
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        scale = 1.0
        if self.grad_clip is not None and gnorm > self.grad_clip:
            scale = self.grad_clip / (gnorm + 1e-12)
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            g = g * scale
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * (g * g)
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            self.ps.arrays[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return gnorm


# ---------------------------------------------------------------------------
# weight container (checkpoints and exports share the format)


def save_container(dirpath: str, param_sets: dict[str, ParamSet], meta: dict) -> None:
    """Write manifest.json + weights.bin (little-endian float32)."""
    os.makedirs(dirpath, exist_ok=True)
    layers = []
    blobs = []
    offset = 0
    for set_name, ps in param_sets.items():
        for name, arr in ps.arrays.items():
            a32 = arr.astype("<f4")
            layers.append(
                {
                    "set": set_name,
                    "name": name,
                    "shape": list(arr.shape),
                    "activation": ps.tags[name],
                    "offset": offset,
                }
            )
            blobs.append(a32.tobytes(order="C"))
            offset += a32.size
    manifest = {
        "format_version": CONTAINER_VERSION,
        "total_floats": offset,
        "layers": layers,
        **meta,
    }
    with open(os.path.join(dirpath, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    with open(os.path.join(dirpath, "weights.bin"), "wb") as f:
        f.write(b"".join(blobs))


def load_container(dirpath: str):
    """Returns (param_sets dict, manifest dict); float32 values embedded in
    float64 arrays so forward math matches across save/load round trips."""
    mpath = os.path.join(dirpath, "manifest.json")
    bpath = os.path.join(dirpath, "weights.bin")
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IntegrityError(f"unreadable manifest: {e}")
    if manifest.get("format_version") != CONTAINER_VERSION:
        raise IntegrityError(f"unsupported container version {manifest.get('format_version')}")
    try:
        blob = np.fromfile(bpath, dtype="<f4")
    except OSError as e:
        raise IntegrityError(f"unreadable weight blob: {e}")
    if blob.size != manifest["total_floats"]:
        raise IntegrityError(
            f"weight blob holds {blob.size} floats, manifest expects {manifest['total_floats']}"
        )
    sets: dict[str, ParamSet] = {}
    for layer in manifest["layers"]:
        ps = sets.setdefault(layer["set"], ParamSet())
        n = int(np.prod(layer["shape"])) if layer["shape"] else 1
        vals = blob[layer["offset"] : layer["offset"] + n]
        if vals.size != n:
            raise IntegrityError(f"layer '{layer['name']}' truncated")
        ps.add(layer["name"], vals.astype(np.float64).reshape(layer["shape"]),
               layer["activation"])
    return sets, manifest
