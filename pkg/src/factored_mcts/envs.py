"""Deterministic factored-action environments with exact oracles.

Two environments:

* ``cmab`` — a contextual bandit chain over three 7-valued sub-actions.  In
  each state exactly one sub-action drives the transition and the relevant
  index rotates with the state, so the ground-truth relevance mask is known
  in closed form.  A dynamic-programming oracle gives the optimal return.

* ``gridkey-k{2,3,4}`` — a small key-and-door gridworld with the factored
  action space turn x forward x pick x open.  Picking needs the right key
  color, opening needs a held key, the matching door color, and facing the
  door.  A breadth-first-search oracle gives the shortest solution length
  for any layout.

Step functions are pure on immutable state values; thin env classes wrap
them with the gym-style reset/step interface the training loop uses.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .actions import AbstractionMask, FactoredAction, FactoredActionSpace

# ---------------------------------------------------------------------------
# Contextual multi-armed bandit chain
# ---------------------------------------------------------------------------

CMAB_CARDINALITIES = (7, 7, 7)
CMAB_HORIZON = 25
CMAB_OBS_WIDTH = 64


class EpisodeOver(RuntimeError):
    """A terminated episode was stepped."""


@dataclass(frozen=True)
class CmabState:
    s: int = 0
    t: int = 0


def cmab_space() -> FactoredActionSpace:
    return FactoredActionSpace(CMAB_CARDINALITIES)


def cmab_relevant_index(s: int) -> int:
    """Index of the sub-action that drives the transition from state s."""
    return (s // 6) % 3


def cmab_ground_truth_mask(state: CmabState | int) -> AbstractionMask:
    s = state.s if isinstance(state, CmabState) else int(state)
    bits = [0, 0, 0]
    bits[cmab_relevant_index(s)] = 1
    return AbstractionMask(bits=tuple(bits))


def cmab_step(state: CmabState, action: FactoredAction,
              horizon: int = CMAB_HORIZON) -> tuple[CmabState, float]:
    """One transition.  Reward equals the pre-transition state.

    Even states advance by the relevant sub-action's value, odd states by its
    complement to 6, so the increment is always in [0, 6].
    """
    if state.t >= horizon:
        raise EpisodeOver(f"episode ended at t={state.t}")
    cmab_space().validate_action(action)
    i = cmab_relevant_index(state.s)
    a_i = action.values[i]
    if state.s % 2 == 0:
        s_next = state.s + a_i
    else:
        s_next = state.s + (6 - a_i)
    return CmabState(s=s_next, t=state.t + 1), float(state.s)


def cmab_observation(state: CmabState | int, width: int = CMAB_OBS_WIDTH) -> np.ndarray:
    """State scaled by 1 / ((max cardinality - 1) * horizon), tiled to width."""
    s = state.s if isinstance(state, CmabState) else int(state)
    value = s / ((max(CMAB_CARDINALITIES) - 1) * CMAB_HORIZON)
    return np.full(width, value, dtype=np.float32)


@lru_cache(maxsize=None)
def cmab_optimal_return(horizon: int = CMAB_HORIZON, start_s: int = 0) -> float:
    """Exact optimal undiscounted return via backward dynamic programming.

    Rewards are r_t = s_t for t = 0..horizon-1.  Increments are bounded by 6,
    so only states up to start_s + 6 * horizon are reachable.
    """
    max_s = start_s + 6 * horizon
    values = np.zeros(max_s + 7, dtype=np.float64)
    for _ in range(horizon):
        nxt = np.zeros_like(values)
        for s in range(max_s + 1):
            i = cmab_relevant_index(s)
            best = -np.inf
            for a_i in range(CMAB_CARDINALITIES[i]):
                inc = a_i if s % 2 == 0 else 6 - a_i
                best = max(best, values[s + inc])
            nxt[s] = s + best
        values = nxt
    return float(values[start_s])


class CmabEnv:
    """Stateful wrapper; the environment itself is deterministic."""

    env_id = "cmab"
    horizon = CMAB_HORIZON

    def __init__(self, obs_width: int = CMAB_OBS_WIDTH):
        self.space = cmab_space()
        self.observation_width = obs_width
        self.state = CmabState()

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        self.state = CmabState()
        return cmab_observation(self.state, self.observation_width)

    def step(self, action: FactoredAction) -> tuple[np.ndarray, float, bool]:
        self.state, reward = cmab_step(self.state, action, self.horizon)
        done = self.state.t >= self.horizon
        return cmab_observation(self.state, self.observation_width), reward, done

    def ground_truth_mask(self) -> AbstractionMask:
        return cmab_ground_truth_mask(self.state)


# ---------------------------------------------------------------------------
# Key-and-door gridworld
# ---------------------------------------------------------------------------

# Orientations: 0 up, 1 right, 2 down, 3 left (row/col deltas).
DIR_DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))

TURN_NOOP, TURN_LEFT, TURN_RIGHT = 0, 1, 2
FWD_NOOP, FWD_MOVE = 0, 1


@lru_cache(maxsize=None)
def _gridkey_space(num_colors: int) -> FactoredActionSpace:
    return FactoredActionSpace((3, 2, 1 + num_colors, 1 + num_colors))


@dataclass(frozen=True)
class GridKeyConfig:
    grid_size: int = 6
    num_colors: int = 4
    horizon: int = 120

    def space(self) -> FactoredActionSpace:
        return _gridkey_space(self.num_colors)

    @property
    def observation_width(self) -> int:
        g2 = self.grid_size * self.grid_size
        return g2 * (4 + 2 * self.num_colors) + 4


@dataclass(frozen=True)
class GridKeyState:
    agent: tuple[int, int]
    direction: int
    key_pos: tuple[int, int] | None   # None once picked up
    held: bool
    door_pos: tuple[int, int]
    door_open: bool
    goal_pos: tuple[int, int]
    walls: frozenset[tuple[int, int]]
    color: int                        # shared key/door color this episode
    t: int = 0


def gridkey_reset(rng: np.random.Generator, config: GridKeyConfig) -> GridKeyState:
    """Random solvable layout: a wall column with one door splits the grid;
    agent and key start on one side, the goal on the other."""
    g = config.grid_size
    walls = {(r, c) for r in range(g) for c in range(g)
             if r in (0, g - 1) or c in (0, g - 1)}
    wall_col = int(rng.integers(2, g - 2))
    door_row = int(rng.integers(1, g - 1))
    for r in range(1, g - 1):
        if r != door_row:
            walls.add((r, wall_col))
    door_pos = (door_row, wall_col)

    left = [(r, c) for r in range(1, g - 1) for c in range(1, wall_col)]
    right = [(r, c) for r in range(1, g - 1) for c in range(wall_col + 1, g - 1)]
    start_side, goal_side = (left, right) if rng.random() < 0.5 else (right, left)

    picks = rng.choice(len(start_side), size=2, replace=False)
    agent = start_side[picks[0]]
    key_pos = start_side[picks[1]]
    goal_pos = goal_side[int(rng.integers(len(goal_side)))]
    return GridKeyState(
        agent=agent,
        direction=int(rng.integers(4)),
        key_pos=key_pos,
        held=False,
        door_pos=door_pos,
        door_open=False,
        goal_pos=goal_pos,
        walls=frozenset(walls),
        color=int(rng.integers(config.num_colors)),
    )


def gridkey_step(state: GridKeyState, action: FactoredAction,
                 config: GridKeyConfig) -> tuple[GridKeyState, float, bool]:
    """Apply sub-actions in the fixed order turn, forward, pick, open.

    Pick takes effect only when facing the key with the matching color
    choice; open only with a held key, facing the closed door, matching
    color.  Every step costs -0.1; the episode ends on the goal cell or at
    the horizon.
    """
    if state.t >= config.horizon:
        raise EpisodeOver(f"episode ended at t={state.t}")
    config.space().validate_action(action)
    turn, forward, pick, open_ = action.values

    direction = state.direction
    if turn == TURN_LEFT:
        direction = (direction - 1) % 4
    elif turn == TURN_RIGHT:
        direction = (direction + 1) % 4

    agent = state.agent
    key_pos = state.key_pos
    held = state.held
    door_open = state.door_open
    dr, dc = DIR_DELTAS[direction]
    if forward == FWD_MOVE:
        target = (agent[0] + dr, agent[1] + dc)
        blocked = (target in state.walls
                   or (target == state.door_pos and not door_open)
                   or (key_pos is not None and target == key_pos))
        if not blocked:
            agent = target
    facing = (agent[0] + dr, agent[1] + dc)

    if pick > 0 and not held and key_pos is not None \
            and facing == key_pos and pick - 1 == state.color:
        key_pos = None
        held = True

    if open_ > 0 and held and not door_open \
            and facing == state.door_pos and open_ - 1 == state.color:
        door_open = True

    nxt = GridKeyState(
        agent=agent, direction=direction, key_pos=key_pos, held=held,
        door_pos=state.door_pos, door_open=door_open, goal_pos=state.goal_pos,
        walls=state.walls, color=state.color, t=state.t + 1)
    done = agent == state.goal_pos or nxt.t >= config.horizon
    return nxt, -0.1, done


def gridkey_observation(state: GridKeyState, config: GridKeyConfig) -> np.ndarray:
    """Flattened one-hot planes: agent, orientation, key and door per color,
    door-open, walls, goal.  Entries in [0, 1]."""
    g = config.grid_size
    k = config.num_colors
    planes = np.zeros((4 + 2 * k, g, g), dtype=np.float32)
    planes[0][state.agent] = 1.0
    if state.key_pos is not None:
        planes[1 + state.color][state.key_pos] = 1.0
    planes[1 + k + state.color][state.door_pos] = 1.0
    if state.door_open:
        planes[1 + 2 * k][state.door_pos] = 1.0
    for cell in state.walls:
        planes[2 + 2 * k][cell] = 1.0
    planes[3 + 2 * k][state.goal_pos] = 1.0
    orient = np.zeros(4, dtype=np.float32)
    orient[state.direction] = 1.0
    return np.concatenate([planes.reshape(-1), orient])


def gridkey_shortest_solution(state: GridKeyState, config: GridKeyConfig) -> int | None:
    """Minimal number of steps to the goal, by BFS over (position,
    orientation, held, door-open) with optimal sub-action choices.

    Returns None when the goal is unreachable (the layout generator never
    produces such a state).
    """
    color = state.color
    # Meaningful sub-action choices; everything else duplicates one of these.
    pick_choices = (0, color + 1)
    open_choices = (0, color + 1)

    start = replace(state, t=0)
    seen = {_bfs_key(start)}
    frontier = deque([(start, 0)])
    while frontier:
        node, depth = frontier.popleft()
        for turn in (TURN_NOOP, TURN_LEFT, TURN_RIGHT):
            for forward in (FWD_NOOP, FWD_MOVE):
                for pick in pick_choices:
                    for open_ in open_choices:
                        action = FactoredAction((turn, forward, pick, open_))
                        nxt, _, done = gridkey_step(node, action, config)
                        if nxt.agent == nxt.goal_pos:
                            return depth + 1
                        key = _bfs_key(nxt)
                        if key not in seen:
                            seen.add(key)
                            frontier.append((replace(nxt, t=0), depth + 1))
    return None


def _bfs_key(state: GridKeyState) -> tuple:
    return (state.agent, state.direction, state.held, state.door_open, state.key_pos)


class GridKeyEnv:
    """Stateful wrapper with per-episode random layouts."""

    def __init__(self, config: GridKeyConfig, seed: int = 0):
        self.config = config
        self.space = config.space()
        self.observation_width = config.observation_width
        self.env_id = f"gridkey-k{config.num_colors}"
        self.horizon = config.horizon
        self._rng = np.random.default_rng(seed)
        self.state = gridkey_reset(self._rng, config)

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        self.state = gridkey_reset(rng if rng is not None else self._rng, self.config)
        return gridkey_observation(self.state, self.config)

    def step(self, action: FactoredAction) -> tuple[np.ndarray, float, bool]:
        self.state, reward, done = gridkey_step(self.state, action, self.config)
        return gridkey_observation(self.state, self.config), reward, done

    def ground_truth_mask(self) -> None:
        return None


# ---------------------------------------------------------------------------
# Factory
# ---------------------------------------------------------------------------

ENV_IDS = ("cmab", "gridkey-k2", "gridkey-k3", "gridkey-k4")


def make_env(env_id: str, seed: int = 0):
    if env_id == "cmab":
        return CmabEnv()
    if env_id.startswith("gridkey-k"):
        k = int(env_id.removeprefix("gridkey-k"))
        if f"gridkey-k{k}" in ENV_IDS:
            return GridKeyEnv(GridKeyConfig(num_colors=k), seed=seed)
    raise ValueError(f"unknown environment id {env_id!r}; known: {', '.join(ENV_IDS)}")
