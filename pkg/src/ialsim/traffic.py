"""Cell-based traffic grid with one learning traffic-light controller.

A square grid of intersections joined by single-lane road segments of
``cells_per_lane`` cells. Cars advance one cell per step when the next cell
is free; the car at a stop line crosses when its approach has green, turns
left/straight/right with fixed probabilities, and joins the next segment
through an unbounded transit buffer (or leaves the network at the boundary).
Boundary lanes receive fresh cars with a fixed inflow probability. One
intersection is controlled by the agent; the rest switch to the approach
axis with the longer queue, subject to a minimum phase duration.

The agent's local region is the controlled intersection plus its four
incoming lanes. Cars enter the region only at the four lane entry cells,
which makes the four binary "a car enters lane d this step" variables the
complete influence interface: given them, the region evolves as a pure
function of its own state and the action. Crossing cars leave the region
immediately (the transit buffers beyond the stop line are part of the
external system and never block a crossing).

The d-set row is the occupancy of the four incoming lanes. The light state
is deliberately excluded: under a fixed data-collection policy the local
light correlates with returning traffic waves, and a predictor fed the
light would learn that policy-bound shortcut.

Per-step turn and inflow randomness is counter-based (pure hash of seed,
lane/intersection id, step), so local replays reproduce the global
simulator's draws exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Bits, GlobalSimulator, SimDescriptor, hash_uniform

N_ACTIONS = 2  # 0: north-south green, 1: east-west green
N_SIDES = 4    # 0=N, 1=E, 2=S, 3=W
_TURN_ID_BASE = 1_000_000
_SPAWN_ID_BASE = 2_000_000


@dataclass(frozen=True)
class TrafficConfig:
    grid_side: int = 5
    cells_per_lane: int = 9
    inflow_prob: float = 0.1
    episode_len: int = 200
    controlled: tuple[int, int] = (2, 2)
    min_phase_controlled: int = 1
    min_phase_actuated: int = 5
    turn_probs: tuple[float, float, float] = (0.25, 0.5, 0.25)  # left/straight/right

    def __post_init__(self):
        if not (0 <= self.controlled[0] < self.grid_side
                and 0 <= self.controlled[1] < self.grid_side):
            raise ValueError("controlled intersection outside the grid")
        if abs(sum(self.turn_probs) - 1.0) > 1e-9:
            raise ValueError("turn probabilities must sum to 1")

    @property
    def env_id(self) -> str:
        return "traffic"


def descriptor_for(config: TrafficConfig) -> SimDescriptor:
    lanes = N_SIDES * config.cells_per_lane
    return SimDescriptor(
        env_id=config.env_id,
        obs_width=lanes + 2,
        action_count=N_ACTIONS,
        local_width=lanes + 2,
        dset_width=lanes,
        influence_classes=(2,) * N_SIDES,
    )


def _axis(side: int) -> int:
    """0 for the north-south axis, 1 for east-west."""
    return 0 if side in (0, 2) else 1


_SIDE_DELTA = {0: (-1, 0), 1: (0, 1), 2: (1, 0), 3: (0, -1)}


class _Lane:
    """One incoming lane: cells[-1] is the stop line, cells[0] the entry.

    ``buffer`` holds cars in transit from the upstream intersection;
    boundary lanes have no buffer and draw fresh cars instead.
    """

    __slots__ = ("cells", "buffer", "boundary", "spawn_id")

    def __init__(self, length: int, boundary: bool, spawn_id: int):
        self.cells = [False] * length
        self.buffer = 0
        self.boundary = boundary
        self.spawn_id = spawn_id

    def queue(self) -> int:
        return sum(self.cells)


def _advance_lane(cells: list[bool], stop_line_open: bool) -> tuple[int, bool]:
    """Move every car one cell forward where possible; returns
    (cars moved, car crossed). ``stop_line_open`` lets the stop-line car
    leave the lane."""
    moved = 0
    crossed = False
    last = len(cells) - 1
    if cells[last] and stop_line_open:
        cells[last] = False
        crossed = True
        moved += 1
    for i in range(last - 1, -1, -1):
        if cells[i] and not cells[i + 1]:
            cells[i] = False
            cells[i + 1] = True
            moved += 1
    return moved, crossed


class TrafficGlobalSim(GlobalSimulator):
    """Whole-grid simulator."""

    def __init__(self, config: TrafficConfig):
        self.config = config
        self.descriptor = descriptor_for(config)
        n = config.grid_side
        self.nodes = [(i, j) for i in range(n) for j in range(n)]
        self._node_index = {xy: k for k, xy in enumerate(self.nodes)}
        self._seed: int | None = None
        self._t = 0
        self._done = True
        self.lanes: dict[tuple[int, int, int], _Lane] = {}
        self.lights: dict[tuple[int, int], list[int]] = {}
        self.spawned = 0
        self.exited = 0

    # -- lifecycle -----------------------------------------------------------

    def reset(self, seed: int) -> Bits:
        self._seed = int(seed)
        self._t = 0
        self._done = False
        self.spawned = 0
        self.exited = 0
        cfg = self.config
        n = cfg.grid_side
        self.lanes = {}
        spawn_counter = 0
        for (i, j) in self.nodes:
            for side in range(N_SIDES):
                di, dj = _SIDE_DELTA[side]
                boundary = not (0 <= i + di < n and 0 <= j + dj < n)
                self.lanes[(i, j, side)] = _Lane(
                    cfg.cells_per_lane, boundary,
                    _SPAWN_ID_BASE + spawn_counter if boundary else -1)
                if boundary:
                    spawn_counter += 1
        self.lights = {xy: [0, 10**9] for xy in self.nodes}  # phase, age
        return self._observation()

    def step(self, action: int):
        if self._done:
            raise RuntimeError("step after episode end")
        if action not in (0, 1):
            raise ValueError(f"invalid action {action}")
        cfg = self.config
        t = self._t
        ctrl = cfg.controlled

        turn_draws = self._turn_draws(t)
        spawn_draws = self._spawn_draws(t)
        entering = {lane_key: self._car_available(lane_key, spawn_draws)
                    for lane_key in self.lanes}

        # 1. lights
        for xy in self.nodes:
            phase, age = self.lights[xy]
            if xy == ctrl:
                if action != phase and age >= cfg.min_phase_controlled:
                    self.lights[xy] = [action, 1]
                else:
                    self.lights[xy][1] = age + 1
            else:
                q_ns = self.lanes[(xy[0], xy[1], 0)].queue() \
                    + self.lanes[(xy[0], xy[1], 2)].queue()
                q_ew = self.lanes[(xy[0], xy[1], 1)].queue() \
                    + self.lanes[(xy[0], xy[1], 3)].queue()
                queues = (q_ns, q_ew)
                other = 1 - phase
                if queues[other] > queues[phase] and age >= cfg.min_phase_actuated:
                    self.lights[xy] = [other, 1]
                else:
                    self.lights[xy][1] = age + 1

        # 2 + 3. crossings and lane advance, with local reward bookkeeping
        ctrl_start = sum(self.lanes[(ctrl[0], ctrl[1], s)].queue()
                         for s in range(N_SIDES))
        ctrl_moved = 0
        arrivals: dict[tuple[int, int, int], int] = {}
        for (i, j) in self.nodes:
            phase = self.lights[(i, j)][0]
            for side in range(N_SIDES):
                lane = self.lanes[(i, j, side)]
                green = _axis(side) == (0 if phase == 0 else 1)
                moved, crossed = _advance_lane(lane.cells, green)
                if (i, j) == ctrl:
                    ctrl_moved += moved
                if crossed:
                    self._route_crossing(i, j, side, turn_draws, arrivals)

        # 4. entries: buffered cars first, boundary spawns otherwise; the
        # availability flags were computed from the pre-step state
        for lane_key, lane in self.lanes.items():
            if entering[lane_key] and not lane.cells[0]:
                lane.cells[0] = True
                if lane.boundary:
                    self.spawned += 1
                else:
                    lane.buffer -= 1
        # cars that crossed into a buffer this step become candidates next step
        for lane_key, count in arrivals.items():
            self.lanes[lane_key].buffer += count

        reward = 1.0 if ctrl_start == 0 else ctrl_moved / ctrl_start
        self._t += 1
        self._done = self._t >= cfg.episode_len
        return self._observation(), reward, self._done

    # -- internals -----------------------------------------------------------

    def _turn_draws(self, t: int) -> np.ndarray:
        ids = np.arange(len(self.nodes) * N_SIDES) + _TURN_ID_BASE
        return hash_uniform(self._seed, ids, t)

    def _spawn_draws(self, t: int) -> np.ndarray:
        n_spawn = sum(1 for lane in self.lanes.values() if lane.boundary)
        ids = np.arange(n_spawn) + _SPAWN_ID_BASE
        return hash_uniform(self._seed, ids, t)

    def _car_available(self, lane_key, spawn_draws) -> bool:
        lane = self.lanes[lane_key]
        if lane.boundary:
            return bool(spawn_draws[lane.spawn_id - _SPAWN_ID_BASE]
                        < self.config.inflow_prob)
        return lane.buffer > 0

    def _route_crossing(self, i: int, j: int, side: int, turn_draws,
                        arrivals: dict) -> None:
        cfg = self.config
        draw = turn_draws[(self._node_index[(i, j)] * N_SIDES) + side]
        left, straight, _ = cfg.turn_probs
        if draw < left:
            exit_side = (side + 1) % N_SIDES
        elif draw < left + straight:
            exit_side = (side + 2) % N_SIDES
        else:
            exit_side = (side + 3) % N_SIDES
        di, dj = _SIDE_DELTA[exit_side]
        ni, nj = i + di, j + dj
        if not (0 <= ni < cfg.grid_side and 0 <= nj < cfg.grid_side):
            self.exited += 1
            return
        # the car arrives at the neighbor's lane on the opposite side
        arrivals_key = (ni, nj, (exit_side + 2) % N_SIDES)
        arrivals[arrivals_key] = arrivals.get(arrivals_key, 0) + 1

    def _ctrl_lanes(self):
        i, j = self.config.controlled
        return [self.lanes[(i, j, s)] for s in range(N_SIDES)]

    def _observation(self) -> Bits:
        cfg = self.config
        occ = np.zeros(N_SIDES * cfg.cells_per_lane + 2, dtype=np.uint8)
        for s, lane in enumerate(self._ctrl_lanes()):
            base = s * cfg.cells_per_lane
            for c, filled in enumerate(lane.cells):
                if filled:
                    occ[base + c] = 1
        occ[N_SIDES * cfg.cells_per_lane + self.lights[cfg.controlled][0]] = 1
        return occ

    def car_count(self) -> int:
        return sum(lane.queue() + lane.buffer for lane in self.lanes.values())

    # -- hidden-state accessors ------------------------------------------------

    def current_local_state(self) -> Bits:
        return self._observation()

    def current_influence(self) -> tuple[int, ...]:
        """Per incoming lane of the controlled intersection: 1 when a car is
        available to enter the lane during this step (buffered upstream or a
        fresh boundary arrival), else 0."""
        i, j = self.config.controlled
        spawn_draws = self._spawn_draws(self._t)
        return tuple(int(self._car_available((i, j, s), spawn_draws))
                     for s in range(N_SIDES))

    def current_dset_row(self) -> Bits:
        return dset_row(self._observation(), self.config)


class TrafficLocalSim:
    """Controlled intersection plus its four incoming lanes; entries are
    injected influence values, crossings leave the region."""

    def __init__(self, config: TrafficConfig):
        self.config = config
        self.descriptor = descriptor_for(config)
        self._seed: int | None = None
        self._t = 0
        self._done = True
        self.lanes: list[list[bool]] = []
        self.phase = 0
        self.phase_age = 0

    def reset(self, seed: int) -> Bits:
        self._seed = int(seed)
        self._t = 0
        self._done = False
        self.lanes = [[False] * self.config.cells_per_lane for _ in range(N_SIDES)]
        self.phase = 0
        self.phase_age = 10**9
        return self._observation()

    def step_with_influence(self, action: int, influence: tuple[int, ...]):
        if self._done:
            raise RuntimeError("step after episode end")
        if influence is None or len(influence) != N_SIDES:
            raise ValueError("local traffic step needs one entry flag per lane")
        if action not in (0, 1):
            raise ValueError(f"invalid action {action}")
        cfg = self.config

        if action != self.phase and self.phase_age >= cfg.min_phase_controlled:
            self.phase = action
            self.phase_age = 1
        else:
            self.phase_age += 1

        start = sum(sum(lane) for lane in self.lanes)
        moved = 0
        for side in range(N_SIDES):
            green = _axis(side) == (0 if self.phase == 0 else 1)
            m, _ = _advance_lane(self.lanes[side], green)
            moved += m
        for side in range(N_SIDES):
            if influence[side] and not self.lanes[side][0]:
                self.lanes[side][0] = True  # dropped when the entry is blocked

        reward = 1.0 if start == 0 else moved / start
        self._t += 1
        self._done = self._t >= cfg.episode_len
        return self._observation(), reward, self._done

    def _observation(self) -> Bits:
        cfg = self.config
        occ = np.zeros(N_SIDES * cfg.cells_per_lane + 2, dtype=np.uint8)
        for s, lane in enumerate(self.lanes):
            base = s * cfg.cells_per_lane
            for c, filled in enumerate(lane):
                if filled:
                    occ[base + c] = 1
        occ[N_SIDES * cfg.cells_per_lane + self.phase] = 1
        return occ

    def current_dset_row(self) -> Bits:
        return dset_row(self._observation(), self.config)


def dset_row(local_state: Bits, config: TrafficConfig) -> Bits:
    """Occupancy of the four incoming lanes; the light bits are dropped."""
    return np.array(local_state[:N_SIDES * config.cells_per_lane], dtype=np.uint8)


class ConfoundedDsetView(GlobalSimulator):
    """Wrapper that appends the local light state to every d-set row.

    Exists for the spurious-correlation probe: a predictor fed this view can
    latch onto light/influence correlations that hold only under the data
    collection policy.
    """

    def __init__(self, inner: TrafficGlobalSim):
        self.inner = inner
        base = inner.descriptor
        self.descriptor = SimDescriptor(
            env_id=base.env_id + "-confounded",
            obs_width=base.obs_width,
            action_count=base.action_count,
            local_width=base.local_width,
            dset_width=base.dset_width + 2,
            influence_classes=base.influence_classes,
        )

    def reset(self, seed: int) -> Bits:
        return self.inner.reset(seed)

    def step(self, action: int):
        return self.inner.step(action)

    def current_local_state(self) -> Bits:
        return self.inner.current_local_state()

    def current_influence(self) -> tuple[int, ...]:
        return self.inner.current_influence()

    def current_dset_row(self) -> Bits:
        obs = self.inner.current_local_state()
        lights = obs[-2:]
        return np.concatenate([self.inner.current_dset_row(), lights])
