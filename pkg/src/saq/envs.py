"""Toy environments: a pointmass corridor maze and a bimodal bandit.

Maze geometry: cell (row, col) spans x in [col, col+1), y in [row, row+1).
The state is the continuous (x, y) position; actions live in [-1, 1]^2 and
move the point by dt * action with axis-separated wall collision.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .data import Transition, TransitionDataset

DEFAULT_MAZE_TEXT = """\
########
#S.....#
######.#
#......#
#.######
#......#
#####.G#
########
"""

_WALL_MARGIN = 1e-6


@dataclass
class MazeSpec:
    walls: np.ndarray            # (H, W) bool, True = wall
    start: tuple[int, int]       # (row, col)
    goal: tuple[int, int]        # (row, col)
    goal_radius: float = 0.5
    dt: float = 0.25
    max_episode_len: int = 150

    def __post_init__(self):
        self.walls = np.asarray(self.walls, dtype=bool)
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if self.walls[cell]:
                raise ValueError(f"{name} cell {cell} is a wall")
        if not (0 < self.dt <= 1):
            raise ValueError("dt must be in (0, 1]")
        if self.goal_radius <= 0:
            raise ValueError("goal radius must be positive")

    @property
    def height(self):
        return self.walls.shape[0]

    @property
    def width(self):
        return self.walls.shape[1]

    def cell_center(self, cell) -> np.ndarray:
        r, c = cell
        return np.array([c + 0.5, r + 0.5])

    @property
    def goal_center(self) -> np.ndarray:
        return self.cell_center(self.goal)

    def is_wall_at(self, x: float, y: float) -> bool:
        r, c = int(np.floor(y)), int(np.floor(x))
        if r < 0 or c < 0 or r >= self.height or c >= self.width:
            return True
        return bool(self.walls[r, c])


def parse_maze_text(text: str) -> MazeSpec:
    rows = [line for line in text.splitlines() if line]
    width = max(len(r) for r in rows)
    walls = np.ones((len(rows), width), dtype=bool)
    start = goal = None
    for r, line in enumerate(rows):
        for c, ch in enumerate(line):
            if ch == "#":
                continue
            walls[r, c] = False
            if ch == "S":
                start = (r, c)
            elif ch == "G":
                goal = (r, c)
            elif ch != ".":
                raise ValueError(f"unknown maze character {ch!r} at row {r}, col {c}")
    if start is None or goal is None:
        raise ValueError("maze text must contain exactly one S and one G")
    return MazeSpec(walls=walls, start=start, goal=goal)


def load_maze_file(path) -> MazeSpec:
    with open(path, "r", encoding="utf-8") as f:
        return parse_maze_text(f.read())


def default_maze() -> MazeSpec:
    return parse_maze_text(DEFAULT_MAZE_TEXT)


def _slide_axis(spec: MazeSpec, x: float, y: float, delta: float, axis: int):
    """Move one coordinate, blocking at the wall face if the target cell is a wall."""
    if delta == 0:
        return x if axis == 0 else y
    new = (x if axis == 0 else y) + delta
    probe = (new, y) if axis == 0 else (x, new)
    if not spec.is_wall_at(*probe):
        return new
    if delta > 0:
        return np.floor(new) - _WALL_MARGIN
    return np.ceil(new) + _WALL_MARGIN


def maze_step(spec: MazeSpec, state, action):
    """One dynamics step: returns (next_state, reward, terminal).

    Terminal signals goal arrival; episode length truncation is the rollout
    loop's job (the step function is stateless).
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    x = _slide_axis(spec, state[0], state[1], spec.dt * action[0], axis=0)
    y = _slide_axis(spec, x, state[1], spec.dt * action[1], axis=1)
    next_state = np.array([x, y])
    at_goal = np.linalg.norm(next_state - spec.goal_center) < spec.goal_radius
    reward = 1.0 if at_goal else 0.0
    return next_state, reward, bool(at_goal)


class ScriptedExpert:
    """Waypoint-following controller along a BFS shortest path to the goal."""

    def __init__(self, spec: MazeSpec):
        self.spec = spec
        self.distance = self._bfs_distances()
        if not np.isfinite(self.distance[spec.start]):
            raise ValueError("goal unreachable from start")

    def _bfs_distances(self) -> np.ndarray:
        spec = self.spec
        dist = np.full(spec.walls.shape, np.inf)
        dist[spec.goal] = 0
        q = deque([spec.goal])
        while q:
            r, c = q.popleft()
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nr, nc = r + dr, c + dc
                if 0 <= nr < spec.height and 0 <= nc < spec.width \
                        and not spec.walls[nr, nc] and not np.isfinite(dist[nr, nc]):
                    dist[nr, nc] = dist[r, c] + 1
                    q.append((nr, nc))
        return dist

    def waypoint(self, state) -> np.ndarray:
        spec = self.spec
        r, c = int(np.floor(state[1])), int(np.floor(state[0]))
        r = min(max(r, 0), spec.height - 1)
        c = min(max(c, 0), spec.width - 1)
        if (r, c) == spec.goal:
            return spec.goal_center
        best, best_d = (r, c), self.distance[r, c]
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < spec.height and 0 <= nc < spec.width and self.distance[nr, nc] < best_d:
                best, best_d = (nr, nc), self.distance[nr, nc]
        return spec.cell_center(best)

    def __call__(self, state) -> np.ndarray:
        target = self.waypoint(state)
        raw = (target - np.asarray(state, dtype=np.float64)) / self.spec.dt
        peak = np.max(np.abs(raw))
        if peak > 1.0:
            raw = raw / peak  # uniform rescale keeps the heading exact
        return raw


def rollout(spec: MazeSpec, policy, rng: np.random.Generator | None = None,
            noise_scale: float = 0.0):
    """Run one episode from the start cell. Returns (transitions, success)."""
    transitions = []
    state = spec.cell_center(spec.start)
    for _ in range(spec.max_episode_len):
        action = np.asarray(policy(state), dtype=np.float64)
        if noise_scale > 0 and rng is not None:
            action = action + rng.normal(0.0, noise_scale, size=2)
        action = np.clip(action, -1.0, 1.0)
        next_state, reward, terminal = maze_step(spec, state, action)
        transitions.append(Transition(state, action, reward, next_state, terminal))
        state = next_state
        if terminal:
            return transitions, True
    return transitions, False


def generate_demonstrations(spec: MazeSpec, n_trajectories: int, noise_scale: float,
                            seed: int) -> TransitionDataset:
    """Concatenated scripted-expert rollouts with Gaussian action noise."""
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    expert = ScriptedExpert(spec)
    all_transitions = []
    root = np.random.SeedSequence(seed)
    for traj_seed in root.spawn(n_trajectories):
        rng = np.random.default_rng(traj_seed)
        transitions, success = rollout(spec, expert, rng, noise_scale)
        if not success and noise_scale == 0:
            raise RuntimeError("noiseless expert rollout failed to reach the goal")
        all_transitions.extend(transitions)
    return TransitionDataset.from_transitions(
        all_transitions,
        metadata={"env": "maze", "generator_seed": seed, "n_trajectories": n_trajectories,
                  "noise_scale": noise_scale},
    )


def generate_bimodal_bandit(n_samples: int, noise_sigma: float, seed: int) -> TransitionDataset:
    """Single-step dataset with two action modes per state: a = +s or a = -s."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    states = rng.uniform(-1.0, 1.0, size=(n_samples, 2))
    signs = np.where(rng.random(n_samples) < 0.5, 1.0, -1.0)
    actions = signs[:, None] * states
    if noise_sigma > 0:
        actions = actions + rng.normal(0.0, noise_sigma, size=actions.shape)
    return TransitionDataset(
        states=states,
        actions=actions,
        rewards=np.ones(n_samples),
        next_states=states.copy(),
        terminals=np.ones(n_samples, dtype=bool),
        metadata={"env": "bimodal-bandit", "generator_seed": seed, "noise_sigma": noise_sigma,
                  "mode_signs_positive_fraction": float(np.mean(signs > 0))},
    )
