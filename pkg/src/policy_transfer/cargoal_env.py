"""CarGoal: drive a kinematic car to a goal the policy cannot see.

Tasks share dynamics and differ only in the goal point. The scalar
``reset``/``step`` functions are the reference API; :class:`VecCarGoal` steps
many episodes in lockstep with the same update equations and is what the
rollout code uses.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .math_core import ConfigurationError, make_rng

OBS_DIM = 5
ACT_DIM = 2


@dataclass(frozen=True)
class EnvParams:
    dt: float = 0.1
    accel: float = 2.0
    drag: float = 0.1
    v_max: float = 3.0
    wheelbase: float = 0.5
    max_steer: float = 0.6
    arena: float = 10.0
    max_steps: int = 1000
    w_align: float = 0.05
    w_prog: float = 1.0
    w_goal: float = 100.0


DEFAULT_PARAMS = EnvParams()


@dataclass(frozen=True)
class Task:
    task_id: str
    goal: tuple[float, float]
    goal_radius: float = 1.0

    def __post_init__(self):
        goal = tuple(float(g) for g in self.goal)
        object.__setattr__(self, "goal", goal)
        if len(goal) != 2 or not all(np.isfinite(goal)):
            raise ConfigurationError(f"task {self.task_id}: goal must be a finite 2D point")
        if max(abs(g) for g in goal) > DEFAULT_PARAMS.arena:
            raise ConfigurationError(f"task {self.task_id}: goal {goal} outside the arena")
        if not self.goal_radius > 0:
            raise ConfigurationError(f"task {self.task_id}: goal_radius must be positive")

    @classmethod
    def polar(cls, task_id: str, angle_deg: float, radius: float, goal_radius: float = 1.0) -> "Task":
        a = np.deg2rad(angle_deg)
        return cls(task_id, (radius * np.cos(a), radius * np.sin(a)), goal_radius)

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "goal": list(self.goal), "goal_radius": self.goal_radius}

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        return cls(str(d["task_id"]), tuple(d["goal"]), float(d.get("goal_radius", 1.0)))


def default_base_tasks() -> list[Task]:
    """Three goals 6 m out at 0, 120 and 240 degrees."""
    return [Task.polar(f"base_{a}", a, 6.0) for a in (0, 120, 240)]


def default_target_task() -> Task:
    """Goal at 60 degrees, 8 m out: outside the convex hull of the base goals."""
    return Task.polar("target_60", 60, 8.0)


def save_task(task: Task, path) -> None:
    with open(path, "w") as f:
        json.dump(task.to_dict(), f, indent=1)


def load_task(path) -> Task:
    with open(path) as f:
        return Task.from_dict(json.load(f))


@dataclass(frozen=True)
class CarState:
    position: tuple[float, float]
    heading: float
    speed: float = 0.0
    step_count: int = 0


@dataclass(frozen=True)
class StepResult:
    next_obs: np.ndarray
    reward: float
    done: bool
    success: bool


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    w = np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)
    return float(w) if np.ndim(w) == 0 else w


def observe(pos, heading, speed, params: EnvParams = DEFAULT_PARAMS) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.float64)
    heading = np.asarray(heading, dtype=np.float64)
    speed = np.asarray(speed, dtype=np.float64)
    return np.stack(
        [pos[..., 0], pos[..., 1], np.cos(heading), np.sin(heading), speed / params.v_max], axis=-1
    )


def observation(state: CarState, params: EnvParams = DEFAULT_PARAMS) -> np.ndarray:
    return observe(state.position, state.heading, state.speed, params)


def dynamics(pos, heading, speed, action, params: EnvParams = DEFAULT_PARAMS):
    """One Euler step of the kinematic car; works on scalars or batches."""
    action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    steer, throttle = action[..., 0], action[..., 1]
    dt = params.dt
    speed = np.clip(speed + params.accel * throttle * dt - params.drag * speed * dt, 0.0, params.v_max)
    heading = wrap_angle(heading + (speed / params.wheelbase) * np.tan(params.max_steer * steer) * dt)
    direction = np.stack([np.cos(heading), np.sin(heading)], axis=-1)
    pos = np.clip(np.asarray(pos) + speed[..., None] * direction * dt, -params.arena, params.arena)
    return pos, heading, speed


def shaped_reward(prev_pos, pos, heading, goal, goal_radius, params: EnvParams = DEFAULT_PARAMS):
    """Alignment + progress + goal bonus, evaluated at the post-step state."""
    goal = np.asarray(goal, dtype=np.float64)
    d_prev = np.linalg.norm(np.asarray(prev_pos) - goal, axis=-1)
    delta = goal - np.asarray(pos)
    d_next = np.linalg.norm(delta, axis=-1)
    bearing = np.arctan2(delta[..., 1], delta[..., 0])
    inside = d_next < goal_radius
    r = (
        params.w_align * np.cos(bearing - heading)
        + params.w_prog * (d_prev - d_next)
        + params.w_goal * inside
    )
    return r, inside


def reward(prev_state: CarState, next_state: CarState, task: Task, params: EnvParams = DEFAULT_PARAMS) -> float:
    r, _ = shaped_reward(prev_state.position, next_state.position, next_state.heading, task.goal, task.goal_radius, params)
    return float(r)


def reset(task: Task, seed, params: EnvParams = DEFAULT_PARAMS) -> tuple[CarState, np.ndarray]:
    """Car at the arena centre, at rest, heading uniform from the seed's stream."""
    rng = make_rng(seed)
    heading = wrap_angle(rng.uniform(-np.pi, np.pi))
    state = CarState((0.0, 0.0), heading, 0.0, 0)
    return state, observation(state, params)


def step(state: CarState, action, task: Task, params: EnvParams = DEFAULT_PARAMS) -> tuple[CarState, StepResult]:
    pos, heading, speed = dynamics(np.array(state.position), state.heading, state.speed, action, params)
    nxt = CarState((float(pos[0]), float(pos[1])), float(heading), float(speed), state.step_count + 1)
    r, inside = shaped_reward(state.position, pos, heading, task.goal, task.goal_radius, params)
    success = bool(inside)
    done = success or nxt.step_count >= params.max_steps
    return nxt, StepResult(observation(nxt, params), float(r), done, success)


@dataclass
class VecCarGoal:
    """Many independent episodes of one task stepped in lockstep.

    Finished episodes are frozen: their state stops changing and they collect
    zero reward. ``active`` marks episodes still running.
    """

    task: Task
    n: int
    params: EnvParams = DEFAULT_PARAMS
    pos: np.ndarray = field(init=False)
    heading: np.ndarray = field(init=False)
    speed: np.ndarray = field(init=False)
    steps: np.ndarray = field(init=False)
    active: np.ndarray = field(init=False)
    success: np.ndarray = field(init=False)

    def reset(self, seeds) -> np.ndarray:
        seeds = list(seeds)
        if len(seeds) != self.n:
            raise ConfigurationError(f"need {self.n} seeds, got {len(seeds)}")
        states = [reset(self.task, s, self.params)[0] for s in seeds]
        return self.set_states(states)

    def set_states(self, states) -> np.ndarray:
        self.pos = np.array([s.position for s in states], dtype=np.float64)
        self.heading = np.array([s.heading for s in states], dtype=np.float64)
        self.speed = np.array([s.speed for s in states], dtype=np.float64)
        self.steps = np.array([s.step_count for s in states], dtype=np.int64)
        self.active = np.ones(self.n, dtype=bool)
        self.success = np.zeros(self.n, dtype=bool)
        return self.obs()

    def obs(self) -> np.ndarray:
        return observe(self.pos, self.heading, self.speed, self.params)

    def step(self, actions) -> tuple[np.ndarray, np.ndarray]:
        """Advance active episodes; returns (next_obs, reward)."""
        pos, heading, speed = dynamics(self.pos, self.heading, self.speed, actions, self.params)
        r, inside = shaped_reward(self.pos, pos, heading, self.task.goal, self.task.goal_radius, self.params)
        act = self.active
        self.pos = np.where(act[:, None], pos, self.pos)
        self.heading = np.where(act, heading, self.heading)
        self.speed = np.where(act, speed, self.speed)
        self.steps = self.steps + act
        self.success |= act & inside
        r = np.where(act, r, 0.0)
        self.active = act & ~inside & (self.steps < self.params.max_steps)
        return self.obs(), r


TRAJECTORY_HEADER = ["step", "x", "y", "heading", "speed", "steer", "throttle", "reward", "done", "success"]


def write_trajectory_csv(path, rows) -> None:
    """``rows``: iterables ordered as :data:`TRAJECTORY_HEADER`."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRAJECTORY_HEADER)
        for row in rows:
            w.writerow(row)


def rollout_trajectory(actor, task: Task, seed, params: EnvParams = DEFAULT_PARAMS) -> list[list]:
    """Single episode with ``actor(obs) -> action``; rows for :func:`write_trajectory_csv`."""
    state, obs = reset(task, seed, params)
    rows = []
    while True:
        a = np.clip(np.asarray(actor(obs), dtype=np.float64), -1.0, 1.0)
        state, res = step(state, a, task, params)
        rows.append([state.step_count, state.position[0], state.position[1], state.heading, state.speed,
                     a[0], a[1], res.reward, int(res.done), int(res.success)])
        obs = res.next_obs
        if res.done:
            return rows


def with_goal(task: Task, goal) -> Task:
    return replace(task, goal=tuple(goal))
