"""Grid warehouse with one learning robot among scripted pickers.

A square arrangement of overlapping regions, one robot per region. Items
appear on the shelf cells that line each region's edges; every edge is
shared with the adjacent region, so neighbor robots take items the
controlled robot also wants. The controlled robot sees only its own region:
a one-hot of its position plus one activity bit per shelf cell.

Geometry (defaults): 6x6 regions of 5x5 cells overlapping at stride 4, a
25x25 global grid. Each region has 12 shelf cells, 3 per edge (corners
excluded). Scripted robots walk one step per tick toward the oldest active
item in their region, horizontal before vertical, age ties broken by lowest
shelf-cell index.

Step order (identical in the global and the local simulator):

1. the controlled robot moves per its action; moves that leave the region
   are no-ops
2. scripted robots move (global simulator only)
3. robots standing on an active item collect it; the controlled robot earns
   the item reward, simultaneous grabs credit the controlled robot; in the
   local simulator the injected influence values remove items from shared
   cells instead
4. fixed-lifetime mode: item ages advance, items reaching the lifetime
   bound expire
5. items spawn on shelf cells that were empty at the start of the step,
   independently per cell; in fixed-lifetime mode at most one spawn per
   edge per step so that edge items always carry distinct ages
6. the episode ends once the step counter hits the episode length

Influence sources are the four neighbor robots, one categorical head per
shared edge: which of the 3 shared cells the neighbor occupies during this
transition, or "elsewhere". In fixed-lifetime mode the scripted robots stay
parked and the heads instead flag the shared cell whose item expires this
step, so that all item removals still flow through the influence channel.

Per-cell randomness is counter-based (a pure hash of seed, cell id, step),
so a local simulator replayed with the global simulator's seed reproduces
identical spawns on its shelf cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Bits, GlobalSimulator, SimDescriptor, hash_uniform

ACTIONS = ("up", "down", "left", "right", "stay")
N_ACTIONS = 5
ELSEWHERE = 3  # influence class for "neighbor not on a shared cell"
CELLS_PER_EDGE = 3
EDGES_PER_REGION = 4


@dataclass(frozen=True)
class WarehouseConfig:
    regions_per_side: int = 6
    region_size: int = 5
    spawn_prob: float = 0.02
    episode_len: int = 100
    item_lifetime: int | None = None   # None: unbounded; L: fixed lifetime
    reward_per_item: float = 1.0
    controlled_region: tuple[int, int] = (2, 2)

    def __post_init__(self):
        if self.region_size != 5:
            raise ValueError("only 5x5 regions are supported")
        if not (0 <= self.controlled_region[0] < self.regions_per_side
                and 0 <= self.controlled_region[1] < self.regions_per_side):
            raise ValueError("controlled region outside the grid")
        if self.item_lifetime is not None and self.item_lifetime < 1:
            raise ValueError("item lifetime must be positive")

    @property
    def stride(self) -> int:
        return self.region_size - 1

    @property
    def grid_size(self) -> int:
        return self.stride * self.regions_per_side + 1

    @property
    def env_id(self) -> str:
        if self.item_lifetime is None:
            return "warehouse"
        return f"warehouse-fixed{self.item_lifetime}"


def descriptor_for(config: WarehouseConfig) -> SimDescriptor:
    size = config.region_size
    return SimDescriptor(
        env_id=config.env_id,
        obs_width=size * size + 4 * CELLS_PER_EDGE,
        action_count=N_ACTIONS,
        local_width=size * size + 4 * CELLS_PER_EDGE,
        dset_width=2 * 4 * CELLS_PER_EDGE,
        influence_classes=(4,) * EDGES_PER_REGION,
    )


class Geometry:
    """Shelf-cell indexing shared by the global and local simulators."""

    def __init__(self, config: WarehouseConfig):
        self.config = config
        g = config.grid_size
        self.cell_ids: dict[tuple[int, int], int] = {}
        self.cell_coords: list[tuple[int, int]] = []
        for r in range(g):
            for c in range(g):
                on_row_line = r % config.stride == 0
                on_col_line = c % config.stride == 0
                if on_row_line != on_col_line:  # edges only, corners excluded
                    self.cell_ids[(r, c)] = len(self.cell_coords)
                    self.cell_coords.append((r, c))
        self.n_cells = len(self.cell_coords)
        # edge key per cell: one shelf edge = the 3 cells between two corners
        self.edge_of_cell = []
        for (r, c) in self.cell_coords:
            if r % config.stride == 0:   # horizontal edge
                self.edge_of_cell.append(("h", r, c // config.stride))
            else:                        # vertical edge
                self.edge_of_cell.append(("v", c, r // config.stride))
        edge_cells: dict[tuple, list[int]] = {}
        for cid, key in enumerate(self.edge_of_cell):
            edge_cells.setdefault(key, []).append(cid)
        self.edge_cells = {k: sorted(v) for k, v in edge_cells.items()}

    def region_origin(self, region: tuple[int, int]) -> tuple[int, int]:
        return (region[0] * self.config.stride, region[1] * self.config.stride)

    def region_home(self, region: tuple[int, int]) -> tuple[int, int]:
        r0, c0 = self.region_origin(region)
        half = self.config.region_size // 2
        return (r0 + half, c0 + half)

    def region_cells(self, region: tuple[int, int]) -> list[int]:
        """The region's 12 shelf cells in local order: top, right, bottom,
        left edges, 3 cells each, ascending row/col."""
        r0, c0 = self.region_origin(region)
        s = self.config.stride
        coords = []
        coords += [(r0, c0 + i) for i in range(1, 4)]          # top
        coords += [(r0 + i, c0 + s) for i in range(1, 4)]      # right
        coords += [(r0 + s, c0 + i) for i in range(1, 4)]      # bottom
        coords += [(r0 + i, c0) for i in range(1, 4)]          # left
        return [self.cell_ids[xy] for xy in coords]

    def region_neighbors(self, region: tuple[int, int]) -> list[tuple[int, int] | None]:
        """Sharing neighbor per edge (top, right, bottom, left); None at the
        warehouse boundary."""
        i, j = region
        n = self.config.regions_per_side
        cand = [(i - 1, j), (i, j + 1), (i + 1, j), (i, j - 1)]
        return [rc if 0 <= rc[0] < n and 0 <= rc[1] < n else None for rc in cand]


def _move(pos: tuple[int, int], action: int) -> tuple[int, int]:
    r, c = pos
    if action == 0:
        return (r - 1, c)
    if action == 1:
        return (r + 1, c)
    if action == 2:
        return (r, c - 1)
    if action == 3:
        return (r, c + 1)
    return pos


def _step_toward(pos: tuple[int, int], target: tuple[int, int]) -> tuple[int, int]:
    # one Manhattan step, horizontal before vertical
    r, c = pos
    tr, tc = target
    if c != tc:
        return (r, c + (1 if tc > c else -1))
    if r != tr:
        return (r + (1 if tr > r else -1), c)
    return pos


class _RegionState:
    """Mutable per-episode item bookkeeping for one set of shelf cells."""

    def __init__(self, n_cells: int):
        self.active = [False] * n_cells
        self.age = [0] * n_cells


class WarehouseGlobalSim(GlobalSimulator):
    """Full-warehouse simulator; every robot and every shelf cell."""

    def __init__(self, config: WarehouseConfig):
        self.config = config
        self.geo = Geometry(config)
        self.descriptor = descriptor_for(config)
        n = config.regions_per_side
        self.regions = [(i, j) for i in range(n) for j in range(n)]
        self.region_cells = {rc: self.geo.region_cells(rc) for rc in self.regions}
        self.controlled = config.controlled_region
        self.neighbors = self.geo.region_neighbors(self.controlled)
        self.controlled_cells = self.region_cells[self.controlled]
        self._controlled_cell_set = frozenset(self.controlled_cells)
        # removal log for lifetime histograms: (lifetime, cause) for the
        # controlled region's cells; cause is "collected" or "removed";
        # lifetime counts the states in which the item was visible
        self.removals: list[tuple[int, str]] = []
        self._seed: int | None = None
        self._t = 0
        self._done = True
        self._all_cell_ids = np.arange(self.geo.n_cells)
        self.items = _RegionState(0)
        self.robot_pos: dict[tuple[int, int], tuple[int, int]] = {}

    # -- lifecycle -----------------------------------------------------------

    def reset(self, seed: int) -> Bits:
        self._seed = int(seed)
        self._t = 0
        self._done = False
        self.items = _RegionState(self.geo.n_cells)
        self.robot_pos = {rc: self.geo.region_home(rc) for rc in self.regions}
        self.removals = []
        return self._observation()

    def step(self, action: int):
        if self._done:
            raise RuntimeError("step after episode end")
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"invalid action {action}")
        cfg = self.config
        active_at_start = list(self.items.active)

        # 1. controlled robot
        new_pos = dict(self.robot_pos)
        moved = _move(self.robot_pos[self.controlled], action)
        if self._inside_region(moved, self.controlled):
            new_pos[self.controlled] = moved

        # 2. scripted robots
        if cfg.item_lifetime is None:
            for rc in self.regions:
                if rc == self.controlled:
                    continue
                new_pos[rc] = self._scripted_next(rc)
        self.robot_pos = new_pos

        # 3. collections; controlled robot first so simultaneous grabs on a
        # shared cell are credited to it
        reward = 0.0
        cid = self.geo.cell_ids.get(self.robot_pos[self.controlled])
        if cid is not None and self.items.active[cid]:
            self._remove(cid, self.items.age[cid] + 1, "collected")
            reward += cfg.reward_per_item
        if cfg.item_lifetime is None:
            for rc in self.regions:
                if rc == self.controlled:
                    continue
                cid = self.geo.cell_ids.get(self.robot_pos[rc])
                if cid is not None and self.items.active[cid]:
                    self._remove(cid, self.items.age[cid] + 1, "removed")

        # 4. ageing and fixed-lifetime expiry
        lifetime = cfg.item_lifetime
        for cid in range(self.geo.n_cells):
            if self.items.active[cid] and active_at_start[cid]:
                self.items.age[cid] += 1
                if lifetime is not None and self.items.age[cid] >= lifetime:
                    self._remove(cid, self.items.age[cid], "removed")

        # 5. spawns on cells that were empty when the step began
        self._spawn(active_at_start)

        self._t += 1
        self._done = self._t >= cfg.episode_len
        return self._observation(), reward, self._done

    # -- internals -----------------------------------------------------------

    def _inside_region(self, pos: tuple[int, int], region: tuple[int, int]) -> bool:
        r0, c0 = self.geo.region_origin(region)
        s = self.config.stride
        return r0 <= pos[0] <= r0 + s and c0 <= pos[1] <= c0 + s

    def _oldest_item(self, region: tuple[int, int]) -> int | None:
        """Shelf cell id of the oldest active item in the region; age ties
        break toward the lowest local cell index."""
        best_cid = None
        best_age = -1
        for cid in self.region_cells[region]:
            if self.items.active[cid] and self.items.age[cid] > best_age:
                best_age = self.items.age[cid]
                best_cid = cid
        return best_cid

    def _scripted_next(self, region: tuple[int, int]) -> tuple[int, int]:
        target = self._oldest_item(region)
        if target is None:
            return self.robot_pos[region]
        return _step_toward(self.robot_pos[region], self.geo.cell_coords[target])

    def _remove(self, cid: int, lifetime: int, cause: str) -> None:
        self.items.active[cid] = False
        self.items.age[cid] = 0
        if cid in self._controlled_cell_set:
            self.removals.append((lifetime, cause))

    def _spawn(self, active_at_start: list[bool]) -> None:
        cfg = self.config
        draws = hash_uniform(self._seed, self._all_cell_ids, self._t)
        spawned_edges: set = set()
        for cid in np.nonzero(draws < cfg.spawn_prob)[0]:
            cid = int(cid)
            if active_at_start[cid]:
                continue
            if cfg.item_lifetime is not None:
                edge = self.geo.edge_of_cell[cid]
                if edge in spawned_edges:
                    continue
                spawned_edges.add(edge)
            self.items.active[cid] = True
            self.items.age[cid] = 0

    def _observation(self) -> Bits:
        size = self.config.region_size
        obs = np.zeros(size * size + 4 * CELLS_PER_EDGE, dtype=np.uint8)
        r0, c0 = self.geo.region_origin(self.controlled)
        r, c = self.robot_pos[self.controlled]
        obs[(r - r0) * size + (c - c0)] = 1
        for i, cid in enumerate(self.controlled_cells):
            if self.items.active[cid]:
                obs[size * size + i] = 1
        return obs

    # -- hidden-state accessors ------------------------------------------------

    def current_local_state(self) -> Bits:
        return self._observation()

    def current_influence(self) -> tuple[int, ...]:
        """Per edge: the shared cell the sharing neighbor occupies during the
        upcoming transition (0..2), or 3 for elsewhere. In fixed-lifetime
        mode: the shared cell whose item expires during this step."""
        heads = []
        lifetime = self.config.item_lifetime
        for e in range(EDGES_PER_REGION):
            edge_cells = self.controlled_cells[e * CELLS_PER_EDGE:(e + 1) * CELLS_PER_EDGE]
            cls = ELSEWHERE
            if lifetime is not None:
                for j, cid in enumerate(edge_cells):
                    if self.items.active[cid] and self.items.age[cid] == lifetime - 1:
                        cls = j
                        break
            else:
                neighbor = self.neighbors[e]
                if neighbor is not None:
                    pos = self._scripted_next(neighbor)
                    for j, cid in enumerate(edge_cells):
                        if self.geo.cell_coords[cid] == pos:
                            cls = j
                            break
            heads.append(cls)
        return tuple(heads)

    def current_dset_row(self) -> Bits:
        return dset_row(self._observation(), self.config)


class WarehouseLocalSim:
    """Single-region simulator; neighbor effects arrive as injected
    influence values."""

    def __init__(self, config: WarehouseConfig):
        self.config = config
        self.geo = Geometry(config)
        self.descriptor = descriptor_for(config)
        self.controlled = config.controlled_region
        self.cells = self.geo.region_cells(self.controlled)
        self._cells_arr = np.asarray(self.cells)
        self._local_of_cell = {cid: i for i, cid in enumerate(self.cells)}
        self.removals: list[tuple[int, str]] = []
        self._seed: int | None = None
        self._t = 0
        self._done = True
        self.items = _RegionState(len(self.cells))
        self.robot: tuple[int, int] = self.geo.region_home(self.controlled)

    def reset(self, seed: int) -> Bits:
        self._seed = int(seed)
        self._t = 0
        self._done = False
        self.items = _RegionState(len(self.cells))
        self.robot = self.geo.region_home(self.controlled)
        self.removals = []
        return self._observation()

    def step_with_influence(self, action: int, influence: tuple[int, ...]):
        if self._done:
            raise RuntimeError("step after episode end")
        if influence is None or len(influence) != EDGES_PER_REGION:
            raise ValueError("local warehouse step needs one influence class per edge")
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"invalid action {action}")
        cfg = self.config
        active_at_start = list(self.items.active)

        moved = _move(self.robot, action)
        r0, c0 = self.geo.region_origin(self.controlled)
        s = cfg.stride
        if r0 <= moved[0] <= r0 + s and c0 <= moved[1] <= c0 + s:
            self.robot = moved

        reward = 0.0
        robot_cell = self._local_cell(self.robot)
        if robot_cell is not None and self.items.active[robot_cell]:
            self._remove(robot_cell, self.items.age[robot_cell] + 1, "collected")
            reward += cfg.reward_per_item
        for e, cls in enumerate(influence):
            if 0 <= cls < CELLS_PER_EDGE:
                local = e * CELLS_PER_EDGE + cls
                if self.items.active[local]:
                    self._remove(local, self.items.age[local] + 1, "removed")

        lifetime = cfg.item_lifetime
        for local in range(len(self.cells)):
            if self.items.active[local] and active_at_start[local]:
                self.items.age[local] += 1
                if lifetime is not None and self.items.age[local] >= lifetime:
                    self._remove(local, self.items.age[local], "removed")

        self._spawn(active_at_start)
        self._t += 1
        self._done = self._t >= cfg.episode_len
        return self._observation(), reward, self._done

    def _local_cell(self, pos: tuple[int, int]) -> int | None:
        cid = self.geo.cell_ids.get(pos)
        if cid is None:
            return None
        return self._local_of_cell.get(cid)

    def _remove(self, local: int, lifetime: int, cause: str) -> None:
        self.items.active[local] = False
        self.items.age[local] = 0
        self.removals.append((lifetime, cause))

    def _spawn(self, active_at_start: list[bool]) -> None:
        cfg = self.config
        draws = hash_uniform(self._seed, self._cells_arr, self._t)
        spawned_edges: set = set()
        for local in np.nonzero(draws < cfg.spawn_prob)[0]:
            local = int(local)
            if active_at_start[local]:
                continue
            if cfg.item_lifetime is not None:
                edge = self.geo.edge_of_cell[self.cells[local]]
                if edge in spawned_edges:
                    continue
                spawned_edges.add(edge)
            self.items.active[local] = True
            self.items.age[local] = 0

    def _observation(self) -> Bits:
        size = self.config.region_size
        obs = np.zeros(size * size + 4 * CELLS_PER_EDGE, dtype=np.uint8)
        r0, c0 = self.geo.region_origin(self.controlled)
        obs[(self.robot[0] - r0) * size + (self.robot[1] - c0)] = 1
        for local in range(len(self.cells)):
            if self.items.active[local]:
                obs[size * size + local] = 1
        return obs

    def current_dset_row(self) -> Bits:
        # built straight from state: the observation detour costs as much
        # as the rest of a local step
        n_items = 4 * CELLS_PER_EDGE
        row = np.zeros(2 * n_items, dtype=np.uint8)
        for local in range(n_items):
            if self.items.active[local]:
                row[local] = 1
        r0, c0 = self.geo.region_origin(self.controlled)
        row[n_items:] = _at_item_bits(self.robot[0] - r0, self.robot[1] - c0,
                                      self.config.region_size)
        return row


def dset_row(local_state: Bits, config: WarehouseConfig) -> Bits:
    """D-separating-set projection of one local state: the 12 item bits plus
    12 bits marking whether the robot currently stands on each shelf cell.

    The at-cell bits let a predictor tell an item the controlled robot took
    from one a neighbor removed; the robot's full position history stays out
    of the projection because it is irrelevant for the influence sources and
    would invite policy-dependent shortcuts.
    """
    size = config.region_size
    n_items = 4 * CELLS_PER_EDGE
    row = np.zeros(2 * n_items, dtype=np.uint8)
    row[:n_items] = local_state[size * size:size * size + n_items]
    pos_index = int(np.argmax(local_state[:size * size]))
    r, c = divmod(pos_index, size)
    at_bits = _at_item_bits(r, c, size)
    row[n_items:] = at_bits
    return row


def _at_item_bits(r: int, c: int, size: int) -> np.ndarray:
    """Robot-at-shelf-cell flags in local cell order (top, right, bottom,
    left), from region-local coordinates."""
    bits = np.zeros(4 * CELLS_PER_EDGE, dtype=np.uint8)
    s = size - 1
    if r == 0 and 1 <= c <= 3:
        bits[c - 1] = 1           # top edge
    if c == s and 1 <= r <= 3:
        bits[3 + r - 1] = 1       # right edge
    if r == s and 1 <= c <= 3:
        bits[6 + c - 1] = 1       # bottom edge
    if c == 0 and 1 <= r <= 3:
        bits[9 + r - 1] = 1       # left edge
    return bits
