"""Desk-scale environments: the seeded tabular stochastic game, its
single-agent non-stationary variant, and two particle tasks (cooperative
navigation, regular polygon control) with closed-form rewards.

All episodes last exactly 40 steps.  Vectorised wrappers run a full round of
episodes in parallel so a round is a handful of batched numpy calls.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .streams import stream

N_OBS = 30
N_AGENTS = 3
N_ACTIONS = 5
HORIZON = 40

DT = 0.1
DAMPING = 0.25
MAX_SPEED = 1.0
AGENT_RADIUS = 0.1

PENTAGON_MAX_AREA = 5.0 / np.tan(np.pi / 5.0)  # scaled area of a regular pentagon


class DomainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tabular stochastic game


@dataclass
class GameSpec:
    """Tabular cooperative game: T[o, a0, a1, a2] -> dist over next obs."""

    n_obs: int
    n_agents: int
    n_actions: int
    horizon: int
    T: np.ndarray
    R: np.ndarray
    seed: int

    def validate(self) -> None:
        shape = (self.n_obs,) + (self.n_actions,) * self.n_agents
        if self.T.shape != shape + (self.n_obs,):
            raise DomainError(f"T shape {self.T.shape} invalid")
        if self.R.shape != shape:
            raise DomainError(f"R shape {self.R.shape} invalid")
        if np.any(self.T < 0) or np.any(np.abs(self.T.sum(axis=-1) - 1.0) > 1e-9):
            raise DomainError("T rows are not probability vectors")
        if np.any(self.R < 0) or np.any(self.R > 1):
            raise DomainError("R entries outside [0, 1]")


@dataclass
class StepResult:
    obs: object          # per-agent observation (same index for tabular games)
    reward: float
    done: bool


def _dirichlet_rows(rng, shape) -> np.ndarray:
    # Dirichlet(1,...,1) over the last axis == normalized Exponential(1) draws
    e = rng.exponential(1.0, size=shape)
    return e / e.sum(axis=-1, keepdims=True)


def gen_stochastic_game(seed: int) -> GameSpec:
    """Random 30-obs / 3-agent / 5-action game, deterministic in the seed."""
    shape = (N_OBS,) + (N_ACTIONS,) * N_AGENTS
    T = _dirichlet_rows(stream(seed, "game", "T"), shape + (N_OBS,))
    R = stream(seed, "game", "R").uniform(0.0, 1.0, size=shape)
    spec = GameSpec(N_OBS, N_AGENTS, N_ACTIONS, HORIZON, T, R, seed)
    spec.validate()
    return spec


def sample_rows(rows: np.ndarray, rng) -> np.ndarray:
    """Inverse-CDF sample one index per probability row (n, k)."""
    cdf = np.cumsum(rows, axis=-1)
    u = rng.random(rows.shape[0])
    return np.minimum((cdf < u[:, None]).sum(axis=-1), rows.shape[1] - 1)


def tabular_step(spec: GameSpec, o: int, joint_action, rng,
                 step_count: int = 0) -> StepResult:
    """One transition o' ~ T[o, a0, a1, a2], r = R[o, a0, a1, a2]."""
    if not 0 <= o < spec.n_obs:
        raise DomainError(f"observation {o} out of range")
    a = tuple(int(x) for x in joint_action)
    if len(a) != spec.n_agents or any(not 0 <= x < spec.n_actions for x in a):
        raise DomainError(f"joint action {a} out of range")
    row = spec.T[(o,) + a]
    o_next = int(sample_rows(row[None, :], rng)[0])
    return StepResult(o_next, float(spec.R[(o,) + a]), step_count + 1 >= spec.horizon)


@dataclass
class NSGameSpec:
    """Single-agent non-stationary variant: 5 noise-blended transition
    tensors rotate per round; agents 1 and 2 follow fixed stochastic policies."""

    base: GameSpec
    tensors: np.ndarray       # (5, 30, 5, 5, 5, 30), each row-stochastic
    beta: float
    fixed_policies: np.ndarray  # (2, 30, 5)

    def active_tensor(self, round_index: int) -> np.ndarray:
        return self.tensors[round_index % 5]


def gen_nonstationary_variant(seed: int, beta: float = 0.3) -> NSGameSpec:
    if not 0.0 <= beta <= 1.0:
        raise DomainError(f"beta {beta} outside [0, 1]")
    base = gen_stochastic_game(seed)
    tensors = np.empty((5,) + base.T.shape)
    for i in range(5):
        noise = _dirichlet_rows(stream(seed, "ns", "noise", i), base.T.shape)
        tensors[i] = (1.0 - beta) * base.T + beta * noise
    fixed = _dirichlet_rows(stream(seed, "ns", "policies"), (2, N_OBS, N_ACTIONS))
    return NSGameSpec(base, tensors, beta, fixed)


class TabularVecEnv:
    """Runs ``n_envs`` independent episodes of the stochastic game in lockstep.

    All agents observe the shared tabular observation index.  Initial
    observations are uniform over the observation space.
    """

    def __init__(self, spec: GameSpec, n_envs: int, rng):
        self.spec = spec
        self.n_envs = n_envs
        self.rng = rng
        self.obs = None
        self.t = 0

    @property
    def n_agents(self) -> int:
        return self.spec.n_agents

    @property
    def obs_dim(self) -> int:
        return self.spec.n_obs

    def reset(self) -> np.ndarray:
        self.obs = self.rng.integers(0, self.spec.n_obs, size=self.n_envs)
        self.t = 0
        return self.obs

    def transition_tensor(self) -> np.ndarray:
        return self.spec.T

    def step(self, actions: np.ndarray):
        """actions: (n_agents, n_envs) ints -> (next_obs, rewards, done)."""
        idx = (self.obs,) + tuple(actions)
        rows = self.transition_tensor()[idx]
        rewards = self.spec.R[idx]
        self.obs = sample_rows(rows, self.rng)
        self.t += 1
        return self.obs, rewards, self.t >= self.spec.horizon


class NSGameVecEnv(TabularVecEnv):
    """Single-agent view: agent 0 acts, the two frozen policies are part of
    the environment, and the active transition tensor rotates per round."""

    def __init__(self, ns: NSGameSpec, n_envs: int, rng):
        super().__init__(ns.base, n_envs, rng)
        self.ns = ns
        self.round_index = 0

    @property
    def n_agents(self) -> int:
        return 1

    def set_round(self, round_index: int) -> None:
        self.round_index = round_index

    def transition_tensor(self) -> np.ndarray:
        return self.ns.active_tensor(self.round_index)

    def step(self, actions: np.ndarray):
        a0 = actions[0]
        a1 = sample_rows(self.ns.fixed_policies[0][self.obs], self.rng)
        a2 = sample_rows(self.ns.fixed_policies[1][self.obs], self.rng)
        return super().step(np.stack([a0, a1, a2]))


# ---------------------------------------------------------------------------
# particle tasks


@dataclass
class ParticleState:
    agent_pos: np.ndarray      # (n_agents, 2)
    agent_vel: np.ndarray      # (n_agents, 2)
    landmark_pos: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    radius: float = AGENT_RADIUS


def particle_step(state: ParticleState, accelerations) -> ParticleState:
    """Damped point-mass integrator with acceleration and speed limits."""
    a = np.clip(np.asarray(accelerations, dtype=np.float64), -1.0, 1.0)
    if not np.all(np.isfinite(a)):
        raise ArithmeticError("non-finite acceleration")
    if a.shape != state.agent_pos.shape:
        raise DomainError("acceleration shape mismatch")
    vel = (1.0 - DAMPING) * state.agent_vel + a * DT
    speed = np.linalg.norm(vel, axis=-1, keepdims=True)
    over = speed > MAX_SPEED
    vel = np.where(over, vel * (MAX_SPEED / np.maximum(speed, 1e-12)), vel)
    pos = state.agent_pos + vel * DT
    return ParticleState(pos, vel, state.landmark_pos, state.radius)


def _collision_pairs(pos: np.ndarray, radius: float) -> int:
    n = pos.shape[0]
    count = 0
    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(pos[i] - pos[j]) < 2.0 * radius:
                count += 1
    return count


def coopnav_reward(state: ParticleState) -> float:
    """Negative sum over landmarks of the closest agent distance, minus the
    collision penalty over unordered agent pairs."""
    if state.agent_pos.shape[0] != 4 or state.landmark_pos.shape[0] != 4:
        raise DomainError("cooperative navigation needs 4 agents and 4 landmarks")
    d = np.linalg.norm(state.landmark_pos[:, None, :] - state.agent_pos[None, :, :],
                       axis=-1)
    return float(-d.min(axis=1).sum() - _collision_pairs(state.agent_pos, state.radius))


def _bound_penalty(x: float) -> float:
    ax = abs(x)
    if ax < 0.9:
        return 0.0
    if ax < 1.0:
        return 10.0 * (ax - 0.9)
    return float(np.exp(2.0 * ax - 2.0))


def _convex_area_perimeter(pos: np.ndarray):
    """(is_convex, shoelace area, perimeter) for the polygon given by ordering
    the 5 points by angle about their centroid."""
    center = pos.mean(axis=0)
    rel = pos - center
    order = np.argsort(np.arctan2(rel[:, 1], rel[:, 0]))
    v = pos[order]
    nxt = np.roll(v, -1, axis=0)
    perimeter = float(np.linalg.norm(nxt - v, axis=1).sum())
    area = 0.5 * float(np.abs(np.sum(v[:, 0] * nxt[:, 1] - nxt[:, 0] * v[:, 1])))
    # uniform cross-product sign over consecutive edges <=> convex
    edges = nxt - v
    cross = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] \
        - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
    convex = bool(np.all(cross > 1e-12) or np.all(cross < -1e-12))
    return convex, area, perimeter


def polygon_reward(state: ParticleState) -> float:
    """Similarity of the 5 agents to a regular pentagon: perimeter-normalised
    area, clamped at 1000, minus bound and collision penalties."""
    pos = state.agent_pos
    if pos.shape[0] != 5:
        raise DomainError("polygon control needs 5 agents")
    convex, area, perimeter = _convex_area_perimeter(pos)
    if convex and perimeter > 1e-12:
        s_scaled = area * (10.0 / perimeter) ** 2
    else:
        s_scaled = 0.0
    gap = PENTAGON_MAX_AREA - s_scaled
    alt = np.inf if gap <= 1e-12 else 1.0 / gap
    shape_term = min(max(s_scaled, alt), 1000.0)
    p_b = sum(_bound_penalty(state.agent_pos[i, 0]) + _bound_penalty(state.agent_pos[i, 1])
              for i in range(4))
    p_c = _collision_pairs(pos, state.radius)
    return float(shape_term - 4.0 * p_c - p_b)


def fixed_pentagon_policy(state: ParticleState) -> np.ndarray:
    """Unit acceleration of agent 4 toward the centroid of agents 0..3."""
    if state.agent_pos.shape[0] != 5:
        raise DomainError("fixed pentagon policy needs 5 agents")
    delta = state.agent_pos[:4].mean(axis=0) - state.agent_pos[4]
    norm = np.linalg.norm(delta)
    if norm < 1e-12:
        return np.zeros(2)
    return delta / norm


class ParticleVecEnv:
    """Batched particle episodes.  Subclasses define observation layout,
    reward, and the set of learning agents."""

    n_agents_total = 0
    n_learning = 0
    n_landmarks = 0

    def __init__(self, n_envs: int, rng):
        self.n_envs = n_envs
        self.rng = rng
        self.t = 0
        self.pos = None
        self.vel = None
        self.landmarks = None

    @property
    def n_agents(self) -> int:
        return self.n_learning

    def reset(self):
        self.pos = self.rng.uniform(-1, 1, size=(self.n_envs, self.n_agents_total, 2))
        self.vel = np.zeros_like(self.pos)
        self.landmarks = self.rng.uniform(-1, 1, size=(self.n_envs, self.n_landmarks, 2))
        self.t = 0
        return self.observations()

    def state(self, env_idx: int) -> ParticleState:
        lm = self.landmarks[env_idx] if self.n_landmarks else np.zeros((0, 2))
        return ParticleState(self.pos[env_idx], self.vel[env_idx], lm)

    def _integrate(self, accel: np.ndarray) -> None:
        accel = np.clip(accel, -1.0, 1.0)
        self.vel = (1.0 - DAMPING) * self.vel + accel * DT
        speed = np.linalg.norm(self.vel, axis=-1, keepdims=True)
        over = speed > MAX_SPEED
        self.vel = np.where(over, self.vel * (MAX_SPEED / np.maximum(speed, 1e-12)),
                            self.vel)
        self.pos = self.pos + self.vel * DT

    def observations(self) -> list:
        raise NotImplementedError

    def rewards(self) -> np.ndarray:
        raise NotImplementedError

    def step(self, actions):
        """actions: list per learning agent of (n_envs, 2) accelerations."""
        accel = np.zeros_like(self.pos)
        for i in range(self.n_learning):
            accel[:, i, :] = actions[i]
        self._script_agents(accel)
        self._integrate(accel)
        self.t += 1
        return self.observations(), self.rewards(), self.t >= HORIZON

    def _script_agents(self, accel: np.ndarray) -> None:
        pass


class CoopNavVecEnv(ParticleVecEnv):
    n_agents_total = 4
    n_learning = 4
    n_landmarks = 4
    obs_dim = 2 + 2 + 4 * 2 + 3 * 2

    def observations(self) -> list:
        obs = []
        for i in range(4):
            own = self.pos[:, i, :]
            others = np.delete(self.pos, i, axis=1) - own[:, None, :]
            lm = self.landmarks - own[:, None, :]
            obs.append(np.concatenate(
                [own, self.vel[:, i, :], lm.reshape(self.n_envs, -1),
                 others.reshape(self.n_envs, -1)], axis=1))
        return obs

    def rewards(self) -> np.ndarray:
        d = np.linalg.norm(self.landmarks[:, :, None, :] - self.pos[:, None, :, :],
                           axis=-1)
        r = -d.min(axis=2).sum(axis=1)
        pd = np.linalg.norm(self.pos[:, :, None, :] - self.pos[:, None, :, :], axis=-1)
        iu = np.triu_indices(4, k=1)
        r -= (pd[:, iu[0], iu[1]] < 2.0 * AGENT_RADIUS).sum(axis=1)
        return r


class PolygonVecEnv(ParticleVecEnv):
    n_agents_total = 5
    n_learning = 4
    n_landmarks = 0
    obs_dim = 2 + 2 + 4 * 2

    def observations(self) -> list:
        obs = []
        for i in range(4):
            own = self.pos[:, i, :]
            others = np.delete(self.pos, i, axis=1) - own[:, None, :]
            obs.append(np.concatenate(
                [own, self.vel[:, i, :], others.reshape(self.n_envs, -1)], axis=1))
        return obs

    def rewards(self) -> np.ndarray:
        return np.array([polygon_reward(self.state(e)) for e in range(self.n_envs)])

    def _script_agents(self, accel: np.ndarray) -> None:
        delta = self.pos[:, :4, :].mean(axis=1) - self.pos[:, 4, :]
        norm = np.linalg.norm(delta, axis=-1, keepdims=True)
        accel[:, 4, :] = np.where(norm > 1e-12, delta / np.maximum(norm, 1e-12), 0.0)


# ---------------------------------------------------------------------------
# serialization


def _tensor_entry(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _tensor_from(entry: dict) -> np.ndarray:
    return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])


def _checksum(parts) -> str:
    h = hashlib.sha256()
    for arr in parts:
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def gamespec_to_json(spec: GameSpec) -> str:
    payload = {
        "kind": "stochastic-game",
        "n_obs": spec.n_obs, "n_agents": spec.n_agents,
        "n_actions": spec.n_actions, "horizon": spec.horizon,
        "seed": spec.seed,
        "T": _tensor_entry(spec.T), "R": _tensor_entry(spec.R),
        "sha256": _checksum([spec.T, spec.R]),
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def gamespec_from_json(text: str) -> GameSpec:
    d = json.loads(text)
    T, R = _tensor_from(d["T"]), _tensor_from(d["R"])
    if _checksum([T, R]) != d["sha256"]:
        raise DomainError("game spec checksum mismatch")
    spec = GameSpec(d["n_obs"], d["n_agents"], d["n_actions"], d["horizon"],
                    T, R, d["seed"])
    spec.validate()
    return spec


def nsgamespec_to_json(ns: NSGameSpec) -> str:
    payload = {
        "kind": "ns-game",
        "base": json.loads(gamespec_to_json(ns.base)),
        "beta": ns.beta,
        "tensors": _tensor_entry(ns.tensors),
        "fixed_policies": _tensor_entry(ns.fixed_policies),
        "sha256": _checksum([ns.tensors, ns.fixed_policies]),
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def nsgamespec_from_json(text: str) -> NSGameSpec:
    d = json.loads(text)
    tensors = _tensor_from(d["tensors"])
    fixed = _tensor_from(d["fixed_policies"])
    if _checksum([tensors, fixed]) != d["sha256"]:
        raise DomainError("game spec checksum mismatch")
    base = gamespec_from_json(json.dumps(d["base"]))
    return NSGameSpec(base, tensors, d["beta"], fixed)
