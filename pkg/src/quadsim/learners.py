"""On-policy learners over the batched flight tasks.

Four algorithms share one chassis:

* BPTT      - pure first-order: differentiate summed discounted control
              reward through the unrolled dynamics.
* SHAC      - BPTT over short windows plus a learned terminal value trained
              on the control reward (TD-lambda targets).
* SHA2C     - asymmetric variant: the terminal value is trained on the
              sparse goal reward, so dense gradients shape short-term
              behavior while the critic injects long-horizon, possibly
              non-differentiable objectives.
* PPO       - clipped-surrogate RL on the non-differentiable reward scalar
              with GAE; tanh-squashed Gaussian with log-prob correction.

Exploration noise uses counter-based Philox streams keyed by
(seed, update, step), so training is bit-reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from dataclasses import replace as dataclasses_replace

import numpy as np

from quadsim import autodiff as ad
from quadsim import nets
from quadsim.autodiff import Tape, Var
from quadsim.tasks import FlightTask


@dataclass
class LearnerOptions:
    algo: str = "sha2c"
    horizon: int = 16
    gamma: float = 0.99
    td_lambda: float = 0.95
    k_steps: int | None = None  # critic k-step return window; None -> horizon
    actor_lr: float = 2e-3
    critic_lr: float = 2e-3
    critic_iters: int = 8
    grad_clip: float = 5.0
    explore: bool = True
    recurrent: bool = True
    hidden: int = 64
    mlp: tuple = (128, 128)
    conv_feat: int = 32
    log_sigma_init: float = -1.2
    log_sigma_max: float = 2.0
    # PPO specifics
    ppo_horizon: int = 32
    clip_eps: float = 0.2
    ppo_epochs: int = 4
    ppo_minibatch: int = 512
    entropy_coef: float = 1e-3
    value_coef: float = 0.5
    reward_norm: bool = True  # PPO: scale rewards by a running return std
    seed: int = 0


ALGOS = ("bptt", "shac", "sha2c", "ppo")


def make_learner(env: FlightTask, opts: LearnerOptions):
    try:
        cls = {"bptt": BPTT, "shac": SHAC, "sha2c": SHA2C, "ppo": PPO}[opts.algo]
    except KeyError:
        raise ValueError(f"unknown algorithm '{opts.algo}'; choose from {ALGOS}")
    return cls(env, opts)


# ---------------------------------------------------------------------------
# return computations (numpy; scalar oracles mirror these in tests)


def td_lambda_targets(r, values, bootstrap, done, gamma, lam, k=None):
    """TD(lambda) regression targets with termination cuts.

    r, done: (T, N); values: (T, N) holding V(s_t); bootstrap: (N,) V(s_T).
    k limits the return window (defaults to the full horizon).
    """
    T, N = r.shape
    cont = 1.0 - done.astype(np.float64)
    if k is None or k >= T:
        G = np.empty((T, N))
        nxt = bootstrap
        for t in reversed(range(T)):
            v_next = values[t + 1] if t + 1 < T else bootstrap
            G[t] = r[t] + gamma * cont[t] * ((1.0 - lam) * v_next + lam * nxt)
            nxt = G[t]
        return G
    G = np.empty((T, N))
    for t in range(T):
        steps = min(k, T - t)
        # n-step returns G^(n), n = 1..steps, with cuts at done
        running = np.zeros(N)
        alive = np.ones(N)
        disc = 1.0
        mix = np.zeros(N)
        weight_left = 1.0
        for n in range(1, steps + 1):
            running = running + disc * alive * r[t + n - 1]
            v_next = values[t + n] if t + n < T else bootstrap
            g_n = running + gamma * disc * alive * cont[t + n - 1] * v_next
            w = (1.0 - lam) * lam ** (n - 1) if n < steps else lam ** (n - 1)
            mix = mix + w * g_n
            weight_left -= w if n < steps else 0.0
            alive = alive * cont[t + n - 1]
            disc *= gamma
        G[t] = mix
    return G


def gae_advantages(r, values, bootstrap, done, gamma, lam):
    """Standard GAE with cuts at done; returns (advantages, value targets)."""
    T, N = r.shape
    cont = 1.0 - done.astype(np.float64)
    adv = np.zeros((T, N))
    acc = np.zeros(N)
    for t in reversed(range(T)):
        v_next = values[t + 1] if t + 1 < T else bootstrap
        delta = r[t] + gamma * cont[t] * v_next - values[t]
        acc = delta + gamma * lam * cont[t] * acc
        adv[t] = acc
    return adv, adv + values


def normalize(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


# ---------------------------------------------------------------------------
# common chassis


class BaseLearner:
    needs_critic = False

    def __init__(self, env: FlightTask, opts: LearnerOptions):
        self.env = env
        self.opts = opts
        self.update_count = 0
        rng = np.random.default_rng([opts.seed & 0x7FFFFFFF, 0x11])
        spec = env.obs_spec()
        self.policy = nets.PolicyNet(
            nets.PolicyArch(
                proprio_dim=spec["proprio_dim"],
                action_dim=spec["action_dim"],
                visual=spec["visual"],
                recurrent=opts.recurrent,
                hidden=opts.hidden,
                mlp=tuple(opts.mlp),
                conv_feat=opts.conv_feat,
                log_sigma_init=opts.log_sigma_init,
                log_sigma_max=opts.log_sigma_max,
                input_scale=env.proprio_scale(),
            ),
            rng,
        )
        self.actor_opt = nets.Adam(self.policy.ps, opts.actor_lr, grad_clip=opts.grad_clip)
        self.value = None
        self.critic_opt = None
        if self.needs_critic:
            self.value = nets.ValueNet(env.privileged_dim(), rng, hidden=tuple(opts.mlp),
                                       input_scale=env.privileged_scale())
            self.critic_opt = nets.Adam(self.value.ps, opts.critic_lr, grad_clip=opts.grad_clip)
        self.hidden = self.policy.initial_hidden(env.N) if opts.recurrent else None

    def _noise(self, t: int, shape) -> np.ndarray:
        bit = np.random.Philox(
            key=self.opts.seed & 0xFFFFFFFF, counter=[self.update_count, t, 0, 0]
        )
        return np.random.Generator(bit).standard_normal(shape)

    def _sample_action(self, mu: Var, log_sigma: Var, t: int):
        if not self.opts.explore:
            return mu
        eps = self._noise(t, mu.value.shape)
        return ad.add(mu, ad.mul(ad.exp(log_sigma), Var(eps)))

    def _reset_hidden_rows(self, h: Var, done: np.ndarray) -> Var:
        zeros = Var(np.zeros_like(h.value))
        return ad.where_mask(done, zeros, h)

    def update(self) -> dict:
        raise NotImplementedError

    # greedy acting for evaluation / export checks
    def act(self, obs, hidden, lv=None):
        lv = lv or self.policy.ps.bind(None)
        h = Var(hidden) if hidden is not None else None
        mu, _sig, h2 = self.policy.forward(lv, obs.proprio.detach(), obs.visual, h)
        return mu.value, (h2.value if h2 is not None else None)


class _WindowRollout:
    """Shared differentiable-window collection for BPTT/SHAC/SHA2C."""

    def collect_window(self, record_privileged: bool):
        env, opts = self.env, self.opts
        T = opts.horizon
        tape = Tape()
        lv = self.policy.ps.bind(tape)
        env.detach_states()
        obs = env.observe()
        h = Var(self.hidden) if opts.recurrent else None
        disc_sum = None
        rewards_ctrl = np.empty((T, env.N))
        rewards_goal = np.empty((T, env.N))
        dones = np.empty((T, env.N), dtype=bool)
        priv = np.empty((T, env.N, env.privileged_dim())) if record_privileged else None
        for t in range(T):
            if record_privileged:
                priv[t] = env.privileged_state()
            mu, log_sigma, h = self.policy.forward(lv, obs.proprio, obs.visual, h)
            a = self._sample_action(mu, log_sigma, t)
            out = env.step(a)
            if opts.recurrent:
                h = self._reset_hidden_rows(h, out.done)
            term = ad.mul(ad.vmean(out.r_ctrl), opts.gamma**t)
            disc_sum = term if disc_sum is None else ad.add(disc_sum, term)
            rewards_ctrl[t] = out.r_ctrl.value
            rewards_goal[t] = out.r_goal
            dones[t] = out.done
            obs = out.obs
        if opts.recurrent:
            self.hidden = h.value
        return tape, lv, disc_sum, rewards_ctrl, rewards_goal, dones, priv

    def _critic_fit(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        """Full-batch MSE regression; returns the final loss value."""
        X = inputs.reshape(-1, inputs.shape[-1])
        y = targets.reshape(-1)
        loss_val = 0.0
        for _ in range(self.opts.critic_iters):
            tape = Tape()
            lvv = self.value.ps.bind(tape)
            pred = self.value.forward(lvv, X)
            loss = ad.vmean(ad.square(ad.sub(pred, Var(y))))
            grads = tape.backward(loss)
            self.critic_opt.step({k: grads[lvv[k]] for k in lvv})
            loss_val = float(loss.value)
        return loss_val


class BPTT(BaseLearner, _WindowRollout):
    """First-order policy optimization straight through the dynamics."""

    def update(self) -> dict:
        t0 = time.perf_counter()
        tape, lv, disc_sum, r_ctrl, _rg, _dn, _pv = self.collect_window(False)
        loss = ad.neg(ad.mul(disc_sum, 1.0 / self.opts.horizon))
        if not np.isfinite(loss.value):
            raise FloatingPointError("non-finite BPTT loss; check reward terms")
        grads = tape.backward(loss)
        gnorm = self.actor_opt.step({k: grads[lv[k]] for k in lv})
        self.update_count += 1
        return {
            "loss": float(loss.value),
            "grad_norm": gnorm,
            "reward_mean": float(r_ctrl.mean()),
            "steps_per_sec": self.opts.horizon * self.env.N / (time.perf_counter() - t0),
        }


class SHAC(BaseLearner, _WindowRollout):
    """Short-horizon windows closed by a critic trained on R_ctrl."""

    needs_critic = True
    critic_reward = "ctrl"

    def update(self) -> dict:
        t0 = time.perf_counter()
        opts = self.opts
        tape, lv, disc_sum, r_ctrl, r_goal, dones, priv = self.collect_window(True)

        # terminal value: critic weights constant, gradient flows via state
        lvv_const = self.value.ps.bind(None)
        v_term = self.value.forward(lvv_const, self.env.privileged_var())
        body = ad.add(disc_sum, ad.mul(ad.vmean(v_term), opts.gamma**opts.horizon))
        loss = ad.neg(ad.mul(body, 1.0 / opts.horizon))
        if not np.isfinite(loss.value):
            raise FloatingPointError("non-finite actor loss; check reward terms")
        grads = tape.backward(loss)
        gnorm = self.actor_opt.step({k: grads[lv[k]] for k in lv})

        r_fit = r_ctrl if self.critic_reward == "ctrl" else r_goal
        values = self._values_np(priv)
        boot = self._bootstrap_np()
        targets = td_lambda_targets(
            r_fit, values, boot, dones, opts.gamma, opts.td_lambda, opts.k_steps
        )
        closs = self._critic_fit(priv, targets)
        self.update_count += 1
        return {
            "loss": float(loss.value),
            "critic_loss": closs,
            "grad_norm": gnorm,
            "reward_mean": float(r_fit.mean()),
            "steps_per_sec": opts.horizon * self.env.N / (time.perf_counter() - t0),
        }

    def _values_np(self, priv: np.ndarray) -> np.ndarray:
        lvv = self.value.ps.bind(None)
        T, N, K = priv.shape
        return self.value.forward(lvv, priv.reshape(T * N, K)).value.reshape(T, N)

    def _bootstrap_np(self) -> np.ndarray:
        lvv = self.value.ps.bind(None)
        return self.value.forward(lvv, self.env.privileged_state()).value


class SHA2C(SHAC):
    """Asymmetric short-horizon actor-critic: terminal value from R_goal.

    The actor accumulates discounted differentiable control rewards and a
    terminal value whose critic regresses k-step TD-lambda returns of the
    sparse goal reward, so the zeroth-order task signal enters only through
    the critic.
    """

    critic_reward = "goal"


class PPO(BaseLearner):
    """Clipped surrogate + GAE on the RL reward scalar.

    Rewards are scaled by a running estimate of the discounted-return
    standard deviation (classic vec-env normalization); without it the
    critic chases targets two orders of magnitude above its init and the
    advantages are value-error noise.
    """

    needs_critic = True

    def __init__(self, env, opts):
        if opts.recurrent:
            # recurrent PPO replay is out of desk scope; use the MLP policy
            opts = dataclasses_replace(opts, recurrent=False)
        super().__init__(env, opts)
        self._ret_trace = np.zeros(env.N)
        self._ret_count = 1e-4
        self._ret_mean = 0.0
        self._ret_m2 = 1.0

    def _scale_rewards(self, rewards: np.ndarray, dones: np.ndarray) -> np.ndarray:
        if not self.opts.reward_norm:
            return rewards
        T = rewards.shape[0]
        for t in range(T):
            self._ret_trace = rewards[t] + self.opts.gamma * self._ret_trace
            b = self._ret_trace
            # parallel Welford merge of the batch into the running moments
            n_b = b.size
            mean_b = float(b.mean())
            var_b = float(b.var())
            delta = mean_b - self._ret_mean
            tot = self._ret_count + n_b
            self._ret_mean += delta * n_b / tot
            self._ret_m2 += var_b * n_b + delta * delta * self._ret_count * n_b / tot
            self._ret_count = tot
            self._ret_trace = np.where(dones[t], 0.0, self._ret_trace)
        std = np.sqrt(self._ret_m2 / self._ret_count)
        return rewards / max(std, 1e-8)

    def _log_prob(self, mu: Var, log_sigma: Var, a_raw: Var, half: np.ndarray) -> Var:
        z = ad.div(ad.sub(a_raw, mu), ad.exp(log_sigma))
        base = ad.neg(
            ad.add(
                ad.add(ad.mul(ad.vsum(ad.square(z), axis=-1), 0.5),
                       ad.vsum(log_sigma, axis=-1)),
                0.5 * np.log(2 * np.pi) * mu.value.shape[-1],
            )
        )
        # tanh-squash correction: log|da/draw| = log(half) + log(1 - tanh^2)
        # with log(1 - tanh(x)^2) = 2 (log 2 - x - softplus(-2x))
        corr = ad.add(
            ad.mul(ad.sub(ad.sub(np.log(2.0), a_raw), ad.softplus(ad.mul(a_raw, -2.0))), 2.0),
            Var(np.log(half) * np.ones_like(a_raw.value)),
        )
        return ad.sub(base, ad.vsum(corr, axis=-1))

    def update(self) -> dict:
        t0 = time.perf_counter()
        env, opts = self.env, self.opts
        T = opts.ppo_horizon
        half = (env.action_hi - env.action_lo) / 2.0
        half_rows = half if half.ndim == 2 else np.broadcast_to(half, (env.N,) + half.shape)

        lv = self.policy.ps.bind(None)
        lvv = self.value.ps.bind(None)
        env.detach_states()
        obs = env.observe()
        P = obs.proprio.value.shape[-1]
        pro = np.empty((T, env.N, P))
        vis = None
        if obs.visual is not None:
            vis = np.empty((T,) + obs.visual.shape)
        a_raws = np.empty((T, env.N, env.action_dim))
        logps = np.empty((T, env.N))
        values = np.empty((T, env.N))
        rewards = np.empty((T, env.N))
        dones = np.empty((T, env.N), dtype=bool)
        priv = np.empty((T, env.N, env.privileged_dim()))

        for t in range(T):
            pro[t] = obs.proprio.value
            if vis is not None:
                vis[t] = obs.visual
            priv[t] = env.privileged_state()
            mu, log_sigma, _h = self.policy.forward(lv, obs.proprio.detach(), obs.visual, None)
            eps = self._noise(t, mu.value.shape)
            a_raw = Var(mu.value + np.exp(log_sigma.value) * eps)
            logps[t] = self._log_prob(mu, log_sigma, a_raw, half_rows).value
            values[t] = self.value.forward(lvv, priv[t]).value
            out = env.step(a_raw)
            a_raws[t] = a_raw.value
            rewards[t] = out.r_rl
            dones[t] = out.done
            obs = out.obs

        boot = self.value.forward(lvv, env.privileged_state()).value
        scaled = self._scale_rewards(rewards, dones)
        adv, rets = gae_advantages(scaled, values, boot, dones, opts.gamma, opts.td_lambda)
        adv_n = normalize(adv)

        pro_f = pro.reshape(T * env.N, P)
        vis_f = vis.reshape((T * env.N,) + vis.shape[2:]) if vis is not None else None
        a_f = a_raws.reshape(T * env.N, env.action_dim)
        old_f = logps.reshape(-1)
        adv_f = adv_n.reshape(-1)
        ret_f = rets.reshape(-1)
        priv_f = priv.reshape(T * env.N, -1)
        half_f = np.broadcast_to(half_rows, (T,) + half_rows.shape).reshape(T * env.N, -1)

        pi_loss = v_loss = ent = 0.0
        n_rows = T * env.N
        mb = min(opts.ppo_minibatch, n_rows)
        for epoch in range(opts.ppo_epochs):
            order = np.random.Generator(
                np.random.Philox(key=self.opts.seed & 0xFFFFFFFF,
                                 counter=[self.update_count, 0xB, epoch, 0])
            ).permutation(n_rows)
            for s in range(0, n_rows, mb):
                rows = order[s : s + mb]
                tape = Tape()
                lv = self.policy.ps.bind(tape)
                mu, log_sigma, _ = self.policy.forward(
                    lv, Var(pro_f[rows]),
                    vis_f[rows] if vis_f is not None else None, None,
                )
                logp = self._log_prob(mu, log_sigma, Var(a_f[rows]), half_f[rows])
                ratio = ad.exp(ad.sub(logp, Var(old_f[rows])))
                r_clip = ad.clamp(ratio, 1.0 - opts.clip_eps, 1.0 + opts.clip_eps)
                adv_rows = Var(adv_f[rows])
                surr = ad.vmean(
                    ad.minimum(ad.mul(ratio, adv_rows), ad.mul(r_clip, adv_rows))
                )
                entropy = ad.vmean(
                    ad.add(ad.vsum(log_sigma, axis=-1),
                           0.5 * mu.value.shape[-1] * np.log(2 * np.pi * np.e))
                )
                actor_loss = ad.neg(ad.add(surr, ad.mul(entropy, opts.entropy_coef)))
                grads = tape.backward(actor_loss)
                self.actor_opt.step({k: grads[lv[k]] for k in lv})

                tape_v = Tape()
                lvv_t = self.value.ps.bind(tape_v)
                pred = self.value.forward(lvv_t, priv_f[rows])
                value_loss = ad.vmean(ad.square(ad.sub(pred, Var(ret_f[rows]))))
                gv = tape_v.backward(ad.mul(value_loss, opts.value_coef))
                self.critic_opt.step({k: gv[lvv_t[k]] for k in lvv_t})

                pi_loss = float(actor_loss.value)
                v_loss = float(value_loss.value)
                ent = float(entropy.value)

        self.update_count += 1
        return {
            "loss": pi_loss,
            "critic_loss": v_loss,
            "entropy": ent,
            "reward_mean": float(rewards.mean()),
            "steps_per_sec": T * env.N / (time.perf_counter() - t0),
        }


# ---------------------------------------------------------------------------
# evaluation


def wilson_interval(successes: int, n: int, z: float = 1.96):
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    spread = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, center - spread), min(1.0, center + spread))


def evaluate(env: FlightTask, policy: nets.PolicyNet, n_episodes: int, seed: int,
             max_steps: int | None = None) -> dict:
    """Greedy (mean-action) rollouts until n_episodes finish."""
    out = env.reset(seed)
    env.reset_stats()
    lv = policy.ps.bind(None)
    hidden = policy.initial_hidden(env.N) if policy.arch.recurrent else None
    obs = out.obs
    cap = max_steps or (env.config.episode_len * (n_episodes // env.n_envs + 2) * 2)
    steps = 0
    while env.finished_episodes < n_episodes and steps < cap:
        h = Var(hidden) if hidden is not None else None
        mu, _s, h2 = policy.forward(lv, obs.proprio.detach(), obs.visual, h)
        res = env.step(Var(mu.value))
        if hidden is not None:
            hidden = np.where(res.done[:, None], 0.0, h2.value)
        obs = res.obs
        steps += 1
    lo, hi = wilson_interval(env.successful_episodes, env.finished_episodes)
    return {
        "episodes": env.finished_episodes,
        "success_rate": env.success_rate,
        "collision_rate": env.collision_rate,
        "mean_episode_reward": env.mean_episode_return,
        "success_ci95": (lo, hi),
        "steps": steps,
    }
