"""Operator surface: train / eval / bench / export / dump-scene / dump-depth.

Overrides are hydra-style key=value pairs after the subcommand, e.g.

    quadsim train task=position dyn=pm_continuous algo=sha2c n_envs=256 \
        updates=300 seed=1

Exit codes: 0 ok, 2 config error, 3 runtime error. The output root comes
from --out or the QUADSIM_OUT_ROOT environment variable (default ./runs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from quadsim import config as cfgmod
from quadsim import dynamics as dyn
from quadsim import io as qio
from quadsim import learners as ln
from quadsim import nets
from quadsim import sensors as sn
from quadsim import tasks as tk
from quadsim import world as wd
from quadsim.autodiff import Var

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _out_root(args) -> str:
    return args.out or os.environ.get("QUADSIM_OUT_ROOT", "runs")


def _run_dir(args, cfg, kind: str) -> str:
    name = cfg.run_name or f"{kind}_{cfg.task.task}_{cfg.learn.algo}_s{cfg.seed}_{int(time.time())}"
    path = os.path.join(_out_root(args), name)
    os.makedirs(path, exist_ok=True)
    return path


def _save_checkpoint(path: str, learner, env, cfg, update: int) -> None:
    meta = {
        "observation_spec": env.obs_spec(),
        "architecture": {
            "recurrent": learner.policy.arch.recurrent,
            "hidden": learner.policy.arch.hidden,
            "mlp": list(learner.policy.arch.mlp),
            "conv_feat": learner.policy.arch.conv_feat,
            "log_sigma_init": learner.policy.arch.log_sigma_init,
            "log_sigma_max": learner.policy.arch.log_sigma_max,
            "input_scale": list(learner.policy.arch.input_scale or []) or None,
        },
        "update": update,
        "algo": cfg.learn.algo,
    }
    sets = {"policy": learner.policy.ps}
    if learner.value is not None:
        sets["value"] = learner.value.ps
    nets.save_container(path, sets, meta)


def _policy_from_container(path: str):
    sets, manifest = nets.load_container(path)
    spec = manifest["observation_spec"]
    arch_meta = manifest["architecture"]
    scale = arch_meta.get("input_scale")
    arch = nets.PolicyArch(
        proprio_dim=spec["proprio_dim"],
        action_dim=spec["action_dim"],
        visual=spec["visual"],
        recurrent=arch_meta["recurrent"],
        hidden=arch_meta["hidden"],
        mlp=tuple(arch_meta["mlp"]),
        conv_feat=arch_meta["conv_feat"],
        log_sigma_init=arch_meta.get("log_sigma_init", -1.2),
        log_sigma_max=arch_meta.get("log_sigma_max", 2.0),
        input_scale=tuple(scale) if scale else None,
    )
    policy = nets.PolicyNet(arch, np.random.default_rng(0))
    loaded = sets["policy"]
    if set(loaded.arrays) != set(policy.ps.arrays):
        raise nets.IntegrityError("container layers do not match the architecture")
    for k in policy.ps.arrays:
        if loaded.arrays[k].shape != policy.ps.arrays[k].shape:
            raise nets.IntegrityError(
                f"layer '{k}' shape {loaded.arrays[k].shape} != {policy.ps.arrays[k].shape}"
            )
    policy.ps = loaded
    return policy, manifest


def _spec_diff(a: dict, b: dict, prefix="") -> list[str]:
    out = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k, "<missing>"), b.get(k, "<missing>")
        if isinstance(va, dict) and isinstance(vb, dict):
            out += _spec_diff(va, vb, f"{prefix}{k}.")
        elif va != vb:
            out.append(f"{prefix}{k}: checkpoint={va!r} config={vb!r}")
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = cfgmod.resolve(args.config, args.overrides)
    run_dir = _run_dir(args, cfg, "train")
    cfgmod.save_resolved(cfg, os.path.join(run_dir, "config.json"))
    env = tk.make_task(cfg.resolved_task())
    env.reset(seed=cfg.seed)
    opts = cfg.learn
    opts.seed = cfg.seed
    learner = ln.make_learner(env, opts)
    _save_checkpoint(os.path.join(run_dir, "checkpoint_init"), learner, env, cfg, 0)
    metrics = qio.MetricsWriter(os.path.join(run_dir, "metrics.csv"))
    t_start = time.perf_counter()
    try:
        for u in range(cfg.updates):
            m = learner.update()
            row = {
                "update": u,
                "wall_time": round(time.perf_counter() - t_start, 3),
                "success_rate": round(env.success_rate, 4),
                "episodes": env.finished_episodes,
                **{k: (round(v, 6) if isinstance(v, float) else v) for k, v in m.items()},
            }
            metrics.write(row)
            if args.verbose and (u % 10 == 0 or u == cfg.updates - 1):
                print(f"[{u}] " + " ".join(f"{k}={v}" for k, v in row.items()))
            if cfg.checkpoint_every and (u + 1) % cfg.checkpoint_every == 0:
                _save_checkpoint(
                    os.path.join(run_dir, f"checkpoint_{u + 1:06d}"), learner, env, cfg, u + 1
                )
    finally:
        metrics.close()
    _save_checkpoint(os.path.join(run_dir, "checkpoint_final"), learner, env, cfg, cfg.updates)
    learner.policy.ps.round_to_f32()
    _save_checkpoint(os.path.join(run_dir, "export"), learner, env, cfg, cfg.updates)
    print(run_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = cfgmod.resolve(args.config, args.overrides)
    policy, manifest = _policy_from_container(args.checkpoint)
    env = tk.make_task(cfg.resolved_task())
    diff = _spec_diff(manifest["observation_spec"], env.obs_spec())
    if diff:
        print("observation spec mismatch between checkpoint and config:", file=sys.stderr)
        for line in diff:
            print("  " + line, file=sys.stderr)
        return EXIT_CONFIG
    run_dir = _run_dir(args, cfg, "eval")
    traj = qio.TrajectoryWriter(os.path.join(run_dir, "trajectories.jsonl"),
                                env_limit=cfg.record_envs)
    stats = _evaluate_recorded(env, policy, cfg, traj)
    traj.close()
    with open(os.path.join(run_dir, "eval.json"), "w") as f:
        json.dump(stats, f, indent=2)
    print(json.dumps(stats, indent=2))
    return EXIT_OK


def _evaluate_recorded(env, policy, cfg, traj: qio.TrajectoryWriter) -> dict:
    out = env.reset(cfg.eval_seed)
    env.reset_stats()
    lv = policy.ps.bind(None)
    hidden = policy.initial_hidden(env.N) if policy.arch.recurrent else None
    obs = out.obs
    cap = env.config.episode_len * (cfg.eval_episodes // env.n_envs + 2) * 2
    step = 0
    while env.finished_episodes < cfg.eval_episodes and step < cap:
        h = Var(hidden) if hidden is not None else None
        mu, _s, h2 = policy.forward(lv, obs.proprio.detach(), obs.visual, h)
        res = env.step(Var(mu.value))
        traj.write_step(step, env.state.values(), mu.value, res.r_ctrl.value,
                        res.r_goal, res.terminated, res.truncated)
        if hidden is not None:
            hidden = np.where(res.done[:, None], 0.0, h2.value)
        obs = res.obs
        step += 1
    lo, hi = ln.wilson_interval(env.successful_episodes, env.finished_episodes)
    return {
        "episodes": env.finished_episodes,
        "success_rate": env.success_rate,
        "collision_rate": env.collision_rate,
        "mean_episode_reward": env.mean_episode_return,
        "success_ci95": [lo, hi],
        "steps": step,
    }


def bench_physics(model_name: str, n_envs: int, n_steps: int, trials: int,
                  warmup: int, seed: int = 0) -> float:
    """Median steps/sec over trials for raw (untracked) dynamics stepping."""
    rng = np.random.default_rng(seed)
    params = dyn.QuadParams(dt=0.01)
    model = dyn.make_model(model_name, params)
    state = model.init_state(rng.normal(size=(n_envs, 3)), rng.normal(size=(n_envs, 3)) * 0.1)
    act = model.hover_action(n_envs) + rng.normal(size=(n_envs, model.action_dim)) * 0.05
    times = []
    for trial in range(warmup + trials):
        t0 = time.perf_counter()
        s = state
        for _ in range(n_steps):
            s = model.step(s, Var(act))
        dt_w = time.perf_counter() - t0
        if trial >= warmup:
            times.append(dt_w)
    return n_envs * n_steps / float(np.median(times))


def bench_depth(n_envs: int, n_frames: int, trials: int, warmup: int,
                width=64, height=64, seed: int = 0) -> float:
    """Median depth images/sec on a canned cluttered scene."""
    rng = np.random.default_rng(seed)
    prim_sets = []
    for _ in range(min(n_envs, 64)):
        spheres = np.column_stack([
            rng.uniform(-8, 8, size=(6, 2)), rng.uniform(0, 4, size=6),
            rng.uniform(0.3, 1.0, size=6),
        ])
        boxes = np.column_stack([
            rng.uniform(-8, 8, size=(6, 2)), rng.uniform(0, 4, size=6),
            rng.uniform(0.2, 1.0, size=(6, 3)),
        ])
        cyls = np.column_stack([
            rng.uniform(-8, 8, size=(6, 2)), rng.uniform(0, 4, size=6),
            rng.uniform(0.2, 0.6, size=6), rng.uniform(0.5, 2.0, size=6),
        ])
        prim_sets.append(sn.PrimitiveSet(spheres=spheres, boxes=boxes,
                                         cylinders=cyls, ground_z=0.0))
    reps = (n_envs + len(prim_sets) - 1) // len(prim_sets)
    prims = sn.pack_primitives((prim_sets * reps)[:n_envs])
    cam = sn.CameraIntrinsics(width=width, height=height, max_range=12.0)
    pos = rng.uniform(-2, 2, size=(n_envs, 3)) + np.array([0, 0, 1.5])
    yaw = rng.uniform(0, 2 * np.pi, size=n_envs)
    R = tk.rotz_np(yaw)
    times = []
    for trial in range(warmup + trials):
        t0 = time.perf_counter()
        for _ in range(n_frames):
            sn.render_depth(prims, pos, R, cam)
        dt_w = time.perf_counter() - t0
        if trial >= warmup:
            times.append(dt_w)
    return n_envs * n_frames / float(np.median(times))


def cmd_bench(args) -> int:
    cfg = cfgmod.resolve(args.config, args.overrides)
    run_dir = _run_dir(args, cfg, "bench")
    report = {
        "method": {
            "trials": cfg.bench_trials,
            "warmup_batches": cfg.bench_warmup,
            "statistic": "median",
        },
        "physics": [],
        "depth": [],
    }
    print(f"{'model':<14}{'envs':>8}{'steps/sec':>16}")
    for name in dyn.MODEL_NAMES:
        for n_envs in cfg.bench_env_counts:
            n_steps = max(2, min(50, 40_000 // n_envs))
            sps = bench_physics(name, n_envs, n_steps, cfg.bench_trials, cfg.bench_warmup)
            report["physics"].append({"model": name, "n_envs": n_envs, "steps_per_sec": sps})
            print(f"{name:<14}{n_envs:>8}{sps:>16.0f}")
    print(f"{'depth 64x64':<14}{'envs':>8}{'images/sec':>16}")
    for n_envs in cfg.bench_env_counts:
        n_frames = max(1, min(10, 2048 // n_envs))
        ips = bench_depth(n_envs, n_frames, cfg.bench_trials, cfg.bench_warmup)
        report["depth"].append({"n_envs": n_envs, "images_per_sec": ips})
        print(f"{'depth 64x64':<14}{n_envs:>8}{ips:>16.0f}")
    with open(os.path.join(run_dir, "bench.json"), "w") as f:
        json.dump(report, f, indent=2)
    print(run_dir)
    return EXIT_OK


def cmd_export(args) -> int:
    policy, manifest = _policy_from_container(args.checkpoint)
    policy.ps.round_to_f32()
    out_dir = args.dest
    nets.save_container(out_dir, {"policy": policy.ps}, {
        "observation_spec": manifest["observation_spec"],
        "architecture": manifest["architecture"],
        "update": manifest.get("update", -1),
        "algo": manifest.get("algo", "unknown"),
    })
    # round-trip self check: reloaded forward must agree bit-for-bit
    reloaded, _m = _policy_from_container(out_dir)
    rng = np.random.default_rng(123)
    spec = manifest["observation_spec"]
    pro = rng.normal(size=(100, spec["proprio_dim"]))
    vis = None
    if spec["visual"] is not None and spec["visual"]["kind"] == "depth":
        vis = rng.uniform(0, spec["visual"]["max_range"],
                          size=(100, spec["visual"]["height"], spec["visual"]["width"]))
    elif spec["visual"] is not None:
        vis = rng.uniform(0, spec["visual"]["max_range"], size=(100, spec["visual"]["rays"]))
    h = Var(policy.initial_hidden(100)) if policy.arch.recurrent else None
    a = policy.forward(policy.ps.bind(None), Var(pro), vis, h)[0].value
    b = reloaded.forward(reloaded.ps.bind(None), Var(pro), vis, h)[0].value
    if not np.array_equal(a, b):
        raise nets.IntegrityError("export round-trip produced different policy outputs")
    print(out_dir)
    return EXIT_OK


def cmd_dump_scene(args) -> int:
    cfg = cfgmod.resolve(args.config, args.overrides)
    t = cfg.task
    if t.task == "racing":
        scene = wd.gen_race_track(cfg.seed, t.n_gates, t.gate_spread)
    else:
        scene = wd.gen_obstacle_course(
            cfg.seed, np.array([0.0, 0.0, 1.2]), np.array([t.goal_dist, 0.0, 1.5]),
            density=t.density if t.task == "avoidance" else 0.0,
            style=t.style, r_quad=t.collision_radius,
        )
    with open(args.dest, "w") as f:
        f.write(scene.to_json())
    print(args.dest)
    return EXIT_OK


def cmd_dump_depth(args) -> int:
    with open(args.scene) as f:
        scene = wd.Scene.from_json(f.read())
    prims = sn.pack_primitives([scene.prims])
    cam = sn.CameraIntrinsics(width=args.width, height=args.height,
                              max_range=args.max_range)
    pose = np.array([json_float(x) for x in args.pose.split(",")])
    if pose.shape != (4,):
        raise cfgmod.ConfigError("pose must be x,y,z,yaw")
    pos = pose[None, :3]
    R = tk.rotz_np(np.array([pose[3]]))
    img = sn.render_depth(prims, pos, R, cam)[0]
    sn.write_depth_dump(args.dest, img.astype(np.float32), frame_index=args.frame_index)
    print(args.dest)
    return EXIT_OK


def json_float(x: str) -> float:
    return float(x.strip())


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadsim", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON config file", default=None)
        sp.add_argument("--out", help="output root (or QUADSIM_OUT_ROOT)", default=None)
        sp.add_argument("--verbose", action="store_true")
        sp.add_argument("overrides", nargs="*", help="key=value overrides")

    sp = sub.add_parser("train", help="train a policy; writes a run directory")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("checkpoint", help="checkpoint/export container directory")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="throughput sweep (physics and depth)")
    common(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("export", help="re-export a checkpoint as a deploy container")
    sp.add_argument("checkpoint")
    sp.add_argument("dest")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("dump-scene", help="generate a scene and write JSON")
    sp.add_argument("dest")
    common(sp)
    sp.set_defaults(func=cmd_dump_scene)

    sp = sub.add_parser("dump-depth", help="render one depth frame to a dump file")
    sp.add_argument("scene", help="scene JSON path")
    sp.add_argument("dest")
    sp.add_argument("--pose", default="0,0,1.2,0", help="x,y,z,yaw")
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--max-range", type=float, default=10.0)
    sp.add_argument("--frame-index", type=int, default=0)
    sp.set_defaults(func=cmd_dump_depth)
    return p


def main(argv=None) -> int:
    # parse_known_args lets key=value overrides appear after option flags
    args, extra = build_parser().parse_known_args(argv)
    bad = [e for e in extra if "=" not in e or e.startswith("-")]
    if bad:
        print(f"unrecognized arguments: {' '.join(bad)}", file=sys.stderr)
        return EXIT_CONFIG
    if hasattr(args, "overrides"):
        args.overrides = list(args.overrides) + extra
    elif extra:
        print(f"unrecognized arguments: {' '.join(extra)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except cfgmod.ConfigError as e:
        print("config error:", file=sys.stderr)
        for prob in e.problems:
            print("  " + prob, file=sys.stderr)
        return EXIT_CONFIG
    except (tk.TaskContractError, wd.GenerationError, nets.IntegrityError,
            sn.SensorContractError, dyn.ContractError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
