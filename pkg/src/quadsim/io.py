"""Run-directory artifacts: metrics CSV and trajectory JSONL dumps."""

from __future__ import annotations

import csv
import json

TRAJECTORY_SCHEMA_VERSION = 1


class MetricsWriter:
    """Append-only CSV, one row per update; columns fixed by the first row."""

    def __init__(self, path):
        self.path = path
        self._file = open(path, "w", newline="")
        self._writer = None
        self.rows = 0

    def write(self, row: dict) -> None:
        if self._writer is None:
            self._writer = csv.DictWriter(self._file, fieldnames=list(row.keys()))
            self._writer.writeheader()
        self._writer.writerow(row)
        self._file.flush()
        self.rows += 1

    def close(self) -> None:
        self._file.close()


class TrajectoryWriter:
    """JSON-lines, one record per (env, step)."""

    def __init__(self, path, env_limit: int | None = None):
        self._file = open(path, "w")
        self.env_limit = env_limit

    def write_step(self, step: int, states: dict, actions, r_ctrl, r_goal,
                   terminated, truncated) -> None:
        import numpy as np

        n = len(r_goal) if self.env_limit is None else min(self.env_limit, len(r_goal))
        for e in range(n):
            rec = {
                "v": TRAJECTORY_SCHEMA_VERSION,
                "env": e,
                "step": int(step),
                "state": {
                    k: np.asarray(v[e]).ravel().tolist() for k, v in states.items()
                },
                "action": np.asarray(actions[e]).ravel().tolist(),
                "r_ctrl": float(r_ctrl[e]),
                "r_goal": float(r_goal[e]),
                "terminated": int(terminated[e]),
                "truncated": bool(truncated[e]),
            }
            self._file.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        self._file.close()


def read_trajectory(path):
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
