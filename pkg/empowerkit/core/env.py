"""
Empowerkit - PlanarLift environment

A deterministic 2-D kinematic lifting task. The robot (intrinsic state) is an
end effector (x, h) with a gripper aperture; the environment (extrinsic
state) is an object resting on a table at h = 0, plus optional distractor
dimensions that are resampled from N(0, 1) every step regardless of the
action. Reward is sparse: alpha * (obj_h - lift_threshold) while the object
is grasped and above the lift threshold, zero otherwise.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ContractViolation
from .numerics import make_rng, spawn_rngs

logger = logging.getLogger(__name__)

WORKSPACE_X = 0.5
WORKSPACE_H = 0.5
ACTION_BOUNDS = np.array([0.05, 0.05, 0.2])
INTRINSIC_DIM = 3
START_EE = (0.0, 0.1)
OBJECT_SPAWN = 0.3


@dataclass(frozen=True)
class EnvConfig:
    grasp_radius: float = 0.03
    grip_close_threshold: float = 0.5
    lift_threshold: float = 0.01
    reward_scale: float = 50.0
    episode_len: int = 100
    distractor_dim: int = 0

    def __post_init__(self):
        if min(self.grasp_radius, self.grip_close_threshold, self.lift_threshold, self.reward_scale) <= 0:
            raise ContractViolation("environment thresholds and reward scale must be positive")
        if self.episode_len < 1 or self.distractor_dim < 0:
            raise ContractViolation("episode_len must be positive and distractor_dim non-negative")

    @property
    def extrinsic_dim(self):
        return 2 + self.distractor_dim

    @property
    def state_dim(self):
        return INTRINSIC_DIM + self.extrinsic_dim

    @property
    def max_return(self):
        return self.episode_len * self.reward_scale * (WORKSPACE_H - self.lift_threshold)


@dataclass(frozen=True)
class EnvAction:
    """End-effector displacement (m) and grip change; clipped before dynamics."""

    d_ee_x: float = 0.0
    d_ee_h: float = 0.0
    d_grip: float = 0.0

    def to_array(self):
        return np.array([self.d_ee_x, self.d_ee_h, self.d_grip])


@dataclass(frozen=True)
class EnvState:
    ee_x: float
    ee_h: float
    grip: float
    obj_x: float
    obj_h: float
    grasped: bool = False
    distractor: tuple = ()
    t: int = 0

    def as_vector(self):
        return np.concatenate([[self.ee_x, self.ee_h, self.grip, self.obj_x, self.obj_h], self.distractor])


@dataclass(frozen=True)
class StateSplit:
    intrinsic: np.ndarray
    extrinsic: np.ndarray

    def full(self):
        return np.concatenate([self.intrinsic, self.extrinsic])


def split_state(state):
    """intrinsic = (ee_x, ee_h, grip); extrinsic = (obj_x, obj_h) + distractor."""
    return StateSplit(
        np.array([state.ee_x, state.ee_h, state.grip]),
        np.concatenate([[state.obj_x, state.obj_h], state.distractor]),
    )


def _distractor(config, rng):
    return tuple(float(v) for v in rng.normal(0.0, 1.0, size=config.distractor_dim))


def reset(config, rng):
    """Start state: EE at (0, 0.1), grip open, object on the table at a uniform x."""
    obj_x = float(rng.uniform(-OBJECT_SPAWN, OBJECT_SPAWN))
    return EnvState(START_EE[0], START_EE[1], 1.0, obj_x, 0.0, False, _distractor(config, rng), 0)


def clip_action(action):
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape != (3,):
        raise ContractViolation(f"action must have 3 components, got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise ContractViolation(f"non-finite action {action}")
    return np.clip(action, -ACTION_BOUNDS, ACTION_BOUNDS)


def extrinsic_reward(config, grasped, obj_h):
    if grasped and obj_h > config.lift_threshold:
        return config.reward_scale * (obj_h - config.lift_threshold)
    return 0.0


def step(config, state, action, rng):
    """
    Advance one step.

    The grasp engages when the EE is within grasp_radius of the object on both
    axes and the grip is below grip_close_threshold; a grasped object moves
    rigidly with the EE and drops to the table as soon as the grip reopens.

    Returns:
        (next_state, extrinsic_reward, done)
    """
    d_x, d_h, d_grip = clip_action(action)
    ee_x = float(np.clip(state.ee_x + d_x, -WORKSPACE_X, WORKSPACE_X))
    ee_h = float(np.clip(state.ee_h + d_h, 0.0, WORKSPACE_H))
    grip = float(np.clip(state.grip + d_grip, 0.0, 1.0))
    closed = grip < config.grip_close_threshold

    obj_x, obj_h, grasped = state.obj_x, state.obj_h, state.grasped
    if grasped and not closed:
        grasped = False
        obj_h = 0.0
    elif grasped:
        obj_x = float(np.clip(obj_x + (ee_x - state.ee_x), -WORKSPACE_X, WORKSPACE_X))
        obj_h = float(np.clip(obj_h + (ee_h - state.ee_h), 0.0, WORKSPACE_H))
    elif closed and abs(ee_x - obj_x) < config.grasp_radius and abs(ee_h - obj_h) < config.grasp_radius:
        grasped = True

    t = state.t + 1
    next_state = EnvState(ee_x, ee_h, grip, obj_x, obj_h, grasped, _distractor(config, rng), t)
    return next_state, extrinsic_reward(config, grasped, obj_h), t >= config.episode_len


@dataclass
class Transition:
    """One step with the state split into intrinsic and extrinsic parts."""

    s_in: np.ndarray
    s_ex: np.ndarray
    action: np.ndarray
    r_e: float
    done: bool
    s_ex_next: np.ndarray
    step: int = 0

    def to_json(self):
        return {
            'step': self.step,
            's_in': [float(v) for v in self.s_in],
            's_ex': [float(v) for v in self.s_ex],
            'action': [float(v) for v in self.action],
            'r_e': float(self.r_e),
            'done': bool(self.done),
        }


def write_trajectory(path, transitions):
    """JSON-lines dump, one transition per line."""
    with Path(path).open('w') as fh:
        for transition in transitions:
            fh.write(json.dumps(transition.to_json(), sort_keys=True) + '\n')


class PlanarLift:
    """Single environment instance owning its generator."""

    def __init__(self, config=None, seed=0, rng=None):
        self.config = config or EnvConfig()
        self.rng = rng if rng is not None else make_rng(seed)
        self.state = None

    def reset(self):
        self.state = reset(self.config, self.rng)
        return self.state

    def step(self, action):
        if self.state is None:
            raise ContractViolation("reset() must be called before step()")
        self.state, reward, done = step(self.config, self.state, action, self.rng)
        return self.state, reward, done


@dataclass
class VecStepResult:
    """
    Batched step output. ``next_obs`` holds the post-step states used for
    transitions; ``obs`` holds the states the policy acts on next, which are
    fresh reset states for slots that finished an episode.
    """

    obs: np.ndarray
    next_obs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    next_states: list = field(default_factory=list)


class VecPlanarLift:
    """N independent PlanarLift instances with automatic reset on done."""

    def __init__(self, n_envs, config=None, seed=0, rngs=None):
        if n_envs < 1:
            raise ContractViolation("n_envs must be at least 1")
        self.config = config or EnvConfig()
        rngs = rngs if rngs is not None else spawn_rngs(seed, n_envs)
        self.envs = [PlanarLift(self.config, rng=rng) for rng in rngs]

    @property
    def n_envs(self):
        return len(self.envs)

    def reset(self):
        return np.stack([env.reset().as_vector() for env in self.envs])

    def states(self):
        return [env.state for env in self.envs]

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n_envs, 3):
            raise ContractViolation(f"expected actions of shape {(self.n_envs, 3)}, got {actions.shape}")
        obs, next_obs, rewards, dones, next_states = [], [], [], [], []
        for env, action in zip(self.envs, actions):
            state, reward, done = env.step(action)
            next_states.append(state)
            next_obs.append(state.as_vector())
            rewards.append(reward)
            dones.append(done)
            obs.append(env.reset().as_vector() if done else state.as_vector())
        return VecStepResult(np.stack(obs), np.stack(next_obs), np.array(rewards), np.array(dones), next_states)


def split_vector(obs):
    """Split full state vectors (..., 3 + extrinsic) into (intrinsic, extrinsic)."""
    obs = np.asarray(obs)
    return obs[..., :INTRINSIC_DIM], obs[..., INTRINSIC_DIM:]
