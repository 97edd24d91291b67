"""Analytic toy environments and scripted data-generating policies.

The point-mass task is a 2-D double integrator driven toward a fixed goal;
every quantity has a closed form, so model-learning and planning claims can
be checked against exact oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

DT = 0.05
VEL_LIMIT = 3.0
GOAL = np.array([1.0, 1.0])
ACTION_COST = 0.01
START_NOISE = 0.01
MAX_STEPS = 200
DEFAULT_V_CAP = 1.5


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_steps: int
    reward: str
    constrained: bool = False


class PointMassEnv:
    """Double integrator: state (x, y, vx, vy), action (ax, ay) in [-1, 1]^2.

    Position integrates the previous velocity, then velocity integrates the
    clipped action; reward is negative goal distance minus a small action
    cost, evaluated at the post-step position.
    """

    def __init__(self, v_cap: Optional[float] = None, max_steps: int = MAX_STEPS):
        self.v_cap = v_cap
        self.spec = EnvSpec(
            state_dim=4,
            action_dim=2,
            action_low=np.array([-1.0, -1.0], dtype=np.float32),
            action_high=np.array([1.0, 1.0], dtype=np.float32),
            max_steps=max_steps,
            reward="-||pos - goal||_2 - 0.01 ||a||^2",
            constrained=v_cap is not None,
        )
        self._state = np.zeros(4)
        self._t = 0

    def reset(self, seed=0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self._state = np.zeros(4)
        self._state[:2] = rng.normal(0.0, START_NOISE, size=2)
        self._t = 0
        return self._state.copy()

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        pos = self._state[:2] + DT * self._state[2:]
        vel = np.clip(self._state[2:] + DT * a, -VEL_LIMIT, VEL_LIMIT)
        self._state = np.concatenate([pos, vel])
        self._t += 1
        reward = -float(np.linalg.norm(pos - GOAL)) - ACTION_COST * float(a @ a)
        done = self._t >= self.spec.max_steps
        return self._state.copy(), reward, done

    def violation(self, state, action) -> bool:
        """Constraint predicate: x-velocity above the cap (never for the base env)."""
        if self.v_cap is None:
            return False
        return float(state[2]) > self.v_cap


def pointmass_env(max_steps: int = MAX_STEPS) -> PointMassEnv:
    return PointMassEnv(v_cap=None, max_steps=max_steps)


def pointmass_constrained_env(
    v_cap: float = DEFAULT_V_CAP, max_steps: int = MAX_STEPS
) -> PointMassEnv:
    return PointMassEnv(v_cap=v_cap, max_steps=max_steps)


ENVS = {
    "pointmass": pointmass_env,
    "pointmass_constrained": pointmass_constrained_env,
}


def make_env(name: str, v_cap: Optional[float] = None) -> PointMassEnv:
    if name not in ENVS:
        raise ValueError(f"unknown environment {name!r}; options: {sorted(ENVS)}")
    if name == "pointmass_constrained":
        return pointmass_constrained_env(DEFAULT_V_CAP if v_cap is None else v_cap)
    return pointmass_env()


# kp is the stated gain for each quality tier; kd damps velocity.
_POLICY_PARAMS = {
    "medium": (0.5, 2.4, 0.3),
    "expert": (1.5, 1.2, 0.05),
}


def scripted_policy(quality: str, env: PointMassEnv, seed: int) -> Callable:
    """Data-generating policy of graded quality; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    low = env.spec.action_low.astype(np.float64)
    high = env.spec.action_high.astype(np.float64)

    if quality == "random":

        def policy(state):
            return rng.uniform(low, high)

        return policy

    if quality not in _POLICY_PARAMS:
        raise ValueError(f"unknown policy quality {quality!r}")
    kp, kd, noise = _POLICY_PARAMS[quality]

    def policy(state):
        a = kp * (GOAL - state[:2]) - kd * state[2:]
        a = a + rng.normal(0.0, noise, size=2)
        return np.clip(a, low, high)

    return policy


# --- planning-time constraint hooks (state layout: x, y, vx, vy) ---


def velocity_penalty_reward(
    v_cap: float = DEFAULT_V_CAP, alpha: float = 0.5, weight: float = 100.0
) -> Callable:
    """Reward transform r' = alpha*r + (1-alpha)*weight*min(v_cap - vx, 0)."""

    def transform(states, actions, rewards):
        vx = np.asarray(states)[..., 2]
        hinge = np.minimum(v_cap - vx, 0.0)
        return alpha * np.asarray(rewards) + (1.0 - alpha) * weight * hinge

    return transform


def velocity_rollout_penalty(v_cap: float = DEFAULT_V_CAP, weight: float = 100.0) -> Callable:
    """Uncertainty penalty weight*max(vx - v_cap, 0), added to the pruning signal."""

    def penalty(states, actions):
        vx = np.asarray(states)[..., 2]
        return weight * np.maximum(vx - v_cap, 0.0)

    return penalty


def height_bonus_reward(alpha: float = 0.4, weight: float = 100.0) -> Callable:
    """Objective swap: r' = alpha*r + (1-alpha)*weight*y, rewarding high y-position."""

    def transform(states, actions, rewards):
        y = np.asarray(states)[..., 1]
        return alpha * np.asarray(rewards) + (1.0 - alpha) * weight * y

    return transform
