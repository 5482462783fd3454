"""Gridworld environments: the 8x8 portal maze and a 1-D test chain.

The maze is a delayed-reward environment: every step costs a small
penalty and the only positive reward sits on the exit cell. Rooms are
sealed by walls and connected only through portals, which teleport the
agent between paired cells the moment it lands on one.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field

import numpy as np

# action ids; the maze uses all four, the chain uses left/right only
UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
ACTION_NAMES = ("up", "down", "left", "right")
_DELTAS = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}
# wall bitmask, one bit per side of a cell
WALL_N, WALL_E, WALL_S, WALL_W = 1, 2, 4, 8
_WALL_BIT = {UP: WALL_N, DOWN: WALL_S, LEFT: WALL_W, RIGHT: WALL_E}


class LayoutError(ValueError):
    """Malformed or inconsistent maze layout."""


@dataclass(frozen=True)
class EnvState:
    cell: tuple[int, int]
    steps_taken: int = 0


@dataclass(frozen=True)
class Transition:
    state: EnvState
    action: int
    reward: float
    next_state: EnvState
    done: bool


@dataclass
class Trajectory:
    """One rollout: transitions plus the arrays learning code consumes.

    ``obs`` holds the encoded state per step, ``probs``/``log_probs`` the
    behavior policy's probability of the action actually taken.
    ``terminal`` is True when the episode ended at the goal rather than
    the step cap.
    """

    transitions: list[Transition]
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    probs: np.ndarray
    log_probs: np.ndarray
    terminal: bool
    final_obs: np.ndarray | None = None

    def __post_init__(self):
        if len(self.transitions) < 1:
            raise ValueError("trajectory must contain at least one transition")
        for a, b in zip(self.transitions, self.transitions[1:]):
            if a.next_state != b.state:
                raise ValueError("transitions do not chain")

    def __len__(self):
        return len(self.transitions)


@dataclass
class MazeLayout:
    width: int
    height: int
    walls: np.ndarray  # uint8 [height x width], N/E/S/W bitmask
    portals: dict[tuple[int, int], tuple[int, int]]  # involution over endpoint cells
    start: tuple[int, int]
    exit: tuple[int, int]
    step_reward: float = -0.01
    exit_reward: float = 1.0
    max_steps: int = 200
    portal_pairs: list[tuple[tuple[int, int], tuple[int, int]]] = field(default_factory=list)

    def wall_blocks(self, cell: tuple[int, int], action: int) -> bool:
        x, y = cell
        return bool(self.walls[y, x] & _WALL_BIT[action])

    def cells(self):
        return [(x, y) for y in range(self.height) for x in range(self.width)]


def _landing_cell(layout: MazeLayout, cell: tuple[int, int], action: int) -> tuple[int, int]:
    """Where a move from ``cell`` ends up: wall check, then portal hop."""
    if layout.wall_blocks(cell, action):
        nxt = cell
    else:
        dx, dy = _DELTAS[action]
        nxt = (cell[0] + dx, cell[1] + dy)
    # portal fires on landing; arriving through a portal does not chain
    if nxt != cell and nxt in layout.portals:
        nxt = layout.portals[nxt]
    return nxt


def maze_step(layout: MazeLayout, state: EnvState, action: int) -> Transition:
    if state.cell == layout.exit or state.steps_taken >= layout.max_steps:
        raise RuntimeError("maze_step: episode already finished")
    if action not in _DELTAS:
        raise ValueError(f"invalid action {action}")
    nxt = _landing_cell(layout, state.cell, action)
    steps = state.steps_taken + 1
    at_exit = nxt == layout.exit
    reward = layout.exit_reward if at_exit else layout.step_reward
    done = at_exit or steps >= layout.max_steps
    return Transition(state, action, reward, EnvState(nxt, steps), done)


def maze_shortest_path(layout: MazeLayout, start=None):
    """BFS over the true transition semantics.

    Returns (actions, cells, portal_jumps) for a shortest route to the
    exit, or None when unreachable. A step counts as a portal jump when
    the pre-teleport landing cell is a portal endpoint.
    """
    start = layout.start if start is None else start
    if start == layout.exit:
        return [], [start], 0
    prev: dict[tuple[int, int], tuple[tuple[int, int], int, bool]] = {}
    seen = {start}
    queue = collections.deque([start])
    while queue:
        cell = queue.popleft()
        for action in (UP, DOWN, LEFT, RIGHT):
            if layout.wall_blocks(cell, action):
                continue
            dx, dy = _DELTAS[action]
            raw = (cell[0] + dx, cell[1] + dy)
            jumped = raw in layout.portals
            landed = layout.portals[raw] if jumped else raw
            if landed in seen:
                continue
            seen.add(landed)
            prev[landed] = (cell, action, jumped)
            if landed == layout.exit:
                actions, cells, jumps = [], [landed], 0
                cur = landed
                while cur != start:
                    parent, act, jump = prev[cur]
                    actions.append(act)
                    cells.append(parent)
                    jumps += int(jump)
                    cur = parent
                return list(reversed(actions)), list(reversed(cells)), jumps
            queue.append(landed)
    return None


def maze_rooms(layout: MazeLayout) -> list[set[tuple[int, int]]]:
    """Connected components under wall-only movement (portals ignored)."""
    remaining = set(layout.cells())
    rooms = []
    while remaining:
        seed = next(iter(remaining))
        comp = {seed}
        queue = collections.deque([seed])
        while queue:
            cell = queue.popleft()
            for action in (UP, DOWN, LEFT, RIGHT):
                if layout.wall_blocks(cell, action):
                    continue
                dx, dy = _DELTAS[action]
                nxt = (cell[0] + dx, cell[1] + dy)
                if nxt in remaining and nxt not in comp:
                    comp.add(nxt)
                    queue.append(nxt)
        rooms.append(comp)
        remaining -= comp
    return rooms


def _validate_layout(layout: MazeLayout):
    w, h = layout.width, layout.height
    for x, y in layout.cells():
        mask = int(layout.walls[y, x])
        if mask < 0 or mask > 15:
            raise LayoutError(f"cell {x} {y}: wall mask {mask} out of range")
    # border fully walled
    for x in range(w):
        if not layout.walls[0, x] & WALL_N:
            raise LayoutError(f"cell {x} 0: missing north border wall")
        if not layout.walls[h - 1, x] & WALL_S:
            raise LayoutError(f"cell {x} {h - 1}: missing south border wall")
    for y in range(h):
        if not layout.walls[y, 0] & WALL_W:
            raise LayoutError(f"cell 0 {y}: missing west border wall")
        if not layout.walls[y, w - 1] & WALL_E:
            raise LayoutError(f"cell {w - 1} {y}: missing east border wall")
    # symmetry: a wall seen from one side must be seen from the other
    for y in range(h):
        for x in range(w):
            if x + 1 < w:
                east = bool(layout.walls[y, x] & WALL_E)
                west = bool(layout.walls[y, x + 1] & WALL_W)
                if east != west:
                    raise LayoutError(f"asymmetric wall between ({x},{y}) and ({x + 1},{y})")
            if y + 1 < h:
                south = bool(layout.walls[y, x] & WALL_S)
                north = bool(layout.walls[y + 1, x] & WALL_N)
                if south != north:
                    raise LayoutError(f"asymmetric wall between ({x},{y}) and ({x},{y + 1})")
    seen: set[tuple[int, int]] = set()
    for a, b in layout.portal_pairs:
        for cell in (a, b):
            if not (0 <= cell[0] < w and 0 <= cell[1] < h):
                raise LayoutError(f"portal cell {cell} out of bounds")
            if cell in (layout.start, layout.exit):
                raise LayoutError(f"portal cell {cell} overlaps start or exit")
            if cell in seen:
                raise LayoutError(f"cell {cell} appears in two portal pairs")
            seen.add(cell)
        if a == b:
            raise LayoutError(f"portal pair {a} maps a cell to itself")
    for cell in (layout.start, layout.exit):
        if not (0 <= cell[0] < w and 0 <= cell[1] < h):
            raise LayoutError(f"start/exit cell {cell} out of bounds")
    if maze_shortest_path(layout) is None:
        raise LayoutError("exit is unreachable from start")


def maze_load(text: str) -> MazeLayout:
    """Parse and validate the layout text format.

    Format: `maze <width> <height>` header, then any order of
    `<x> <y> <wallmask>` cell lines (missing cells default to mask 0),
    `portal x1 y1 x2 y2`, `start x y`, `exit x y`, and optional
    `step_reward v`, `exit_reward v`, `max_steps n` directives.
    `#` starts a comment.
    """
    width = height = None
    walls = None
    cell_lines: dict[tuple[int, int], int] = {}
    portals: list[tuple[tuple[int, int], tuple[int, int]]] = []
    start = exit_cell = None
    step_reward, exit_reward, max_steps = -0.01, 1.0, 200

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "maze":
                width, height = int(parts[1]), int(parts[2])
                if width < 1 or height < 1:
                    raise LayoutError(f"line {lineno}: maze dimensions must be positive")
                walls = np.zeros((height, width), dtype=np.uint8)
            elif parts[0] == "portal":
                a = (int(parts[1]), int(parts[2]))
                b = (int(parts[3]), int(parts[4]))
                portals.append((a, b))
            elif parts[0] == "start":
                start = (int(parts[1]), int(parts[2]))
            elif parts[0] == "exit":
                exit_cell = (int(parts[1]), int(parts[2]))
            elif parts[0] == "step_reward":
                step_reward = float(parts[1])
            elif parts[0] == "exit_reward":
                exit_reward = float(parts[1])
            elif parts[0] == "max_steps":
                max_steps = int(parts[1])
            else:
                x, y, mask = int(parts[0]), int(parts[1]), int(parts[2])
                if (x, y) in cell_lines:
                    raise LayoutError(f"line {lineno}: duplicate cell {x} {y}")
                cell_lines[(x, y)] = mask
        except (IndexError, ValueError) as err:
            if isinstance(err, LayoutError):
                raise
            raise LayoutError(f"line {lineno}: cannot parse {raw!r}") from None

    if width is None or walls is None:
        raise LayoutError("missing `maze <width> <height>` header")
    if start is None or exit_cell is None:
        raise LayoutError("layout must declare start and exit")
    for (x, y), mask in cell_lines.items():
        if not (0 <= x < width and 0 <= y < height):
            raise LayoutError(f"cell {x} {y} outside {width}x{height} grid")
        if not 0 <= mask <= 15:
            raise LayoutError(f"cell {x} {y}: wall mask {mask} out of range")
        walls[y, x] = mask

    portal_map: dict[tuple[int, int], tuple[int, int]] = {}
    for a, b in portals:
        portal_map[a] = b
        portal_map[b] = a

    layout = MazeLayout(
        width=width,
        height=height,
        walls=walls,
        portals=portal_map,
        start=start,
        exit=exit_cell,
        step_reward=step_reward,
        exit_reward=exit_reward,
        max_steps=max_steps,
        portal_pairs=portals,
    )
    _validate_layout(layout)
    return layout


def load_default_maze() -> MazeLayout:
    from importlib import resources

    text = resources.files("metareturn").joinpath("layouts/default_maze.txt").read_text()
    return maze_load(text)


def render_maze(layout: MazeLayout, values: dict[tuple[int, int], float] | None = None) -> str:
    """ASCII sketch of the layout, for demos and debugging."""
    lines = []
    for y in range(layout.height):
        top = ""
        mid = ""
        for x in range(layout.width):
            top += "+" + ("---" if layout.walls[y, x] & WALL_N else "   ")
            mid += "|" if layout.walls[y, x] & WALL_W else " "
            cell = (x, y)
            if cell == layout.start:
                label = " S "
            elif cell == layout.exit:
                label = " E "
            elif cell in layout.portals:
                idx = next(i for i, (a, b) in enumerate(layout.portal_pairs) if cell in (a, b))
                label = f"p{idx} "
            elif values is not None:
                label = f"{values.get(cell, 0.0):+.1f}"[:3]
            else:
                label = "   "
            mid += label
        lines.append(top + "+")
        lines.append(mid + ("|" if layout.walls[y, layout.width - 1] & WALL_E else " "))
    bottom = ""
    for x in range(layout.width):
        bottom += "+" + ("---" if layout.walls[layout.height - 1, x] & WALL_S else "   ")
    lines.append(bottom + "+")
    return "\n".join(lines)


class MazeEnv:
    """Stateful wrapper over the functional maze dynamics."""

    def __init__(self, layout: MazeLayout):
        self.layout = layout
        self.n_actions = 4
        self.obs_dim = 2
        self.max_steps = layout.max_steps
        self.state = EnvState(layout.start, 0)

    def reset(self, cell: tuple[int, int] | None = None) -> EnvState:
        self.state = EnvState(self.layout.start if cell is None else cell, 0)
        return self.state

    def step(self, action: int) -> Transition:
        tr = maze_step(self.layout, self.state, action)
        self.state = tr.next_state
        return tr

    def encode(self, state: EnvState) -> np.ndarray:
        x, y = state.cell
        return np.array([x / (self.layout.width - 1), y / (self.layout.height - 1)])

    def reached_goal(self, state: EnvState) -> bool:
        return state.cell == self.layout.exit


def chain_step(n: int, state: EnvState, action: int, max_steps: int) -> Transition:
    """Deterministic 1-D walk on cells 0..n; +1 lands only on cell n."""
    x = state.cell[0]
    if x == n or state.steps_taken >= max_steps:
        raise RuntimeError("chain_step: episode already finished")
    if action not in (0, 1):
        raise ValueError(f"invalid chain action {action}")
    nx = max(0, x - 1) if action == 0 else min(n, x + 1)
    steps = state.steps_taken + 1
    reward = 1.0 if nx == n else 0.0
    done = nx == n or steps >= max_steps
    return Transition(state, action, reward, EnvState((nx, 0), steps), done)


class ChainEnv:
    """Unit-test environment: reach the right end of a short chain."""

    def __init__(self, n: int, max_steps: int | None = None):
        self.n = n
        self.n_actions = 2
        self.obs_dim = 1
        self.max_steps = max_steps if max_steps is not None else 4 * n
        self.state = EnvState((0, 0), 0)

    def reset(self, cell: tuple[int, int] | None = None) -> EnvState:
        self.state = EnvState((0, 0) if cell is None else cell, 0)
        return self.state

    def step(self, action: int) -> Transition:
        tr = chain_step(self.n, self.state, action, self.max_steps)
        self.state = tr.next_state
        return tr

    def encode(self, state: EnvState) -> np.ndarray:
        return np.array([state.cell[0] / self.n])

    def reached_goal(self, state: EnvState) -> bool:
        return state.cell[0] == self.n


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF sampling; deterministic given the generator state."""
    u = rng.random()
    return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(probs) - 1))


def rollout(env, policy_fn, rng: np.random.Generator, start_cell=None) -> Trajectory:
    """Run one episode under ``policy_fn`` (obs -> action probabilities).

    Raises if the policy emits NaN or unnormalized probabilities. The
    trajectory records behavior probabilities for later importance
    ratios.
    """
    state = env.reset(start_cell)
    transitions: list[Transition] = []
    obs_rows, actions, rewards, probs_taken = [], [], [], []
    while True:
        obs = env.encode(state)
        probs = np.asarray(policy_fn(obs), dtype=np.float64)
        if probs.shape != (env.n_actions,) or not np.all(np.isfinite(probs)):
            raise ValueError(f"policy emitted invalid probabilities {probs!r}")
        if np.any(probs < 0.0) or abs(float(np.sum(probs)) - 1.0) > 1e-6:
            raise ValueError(f"policy probabilities not normalized: {probs!r}")
        action = sample_action(probs, rng)
        tr = env.step(action)
        transitions.append(tr)
        obs_rows.append(obs)
        actions.append(action)
        rewards.append(tr.reward)
        probs_taken.append(probs[action])
        state = tr.next_state
        if tr.done:
            break
    probs_arr = np.array(probs_taken)
    return Trajectory(
        transitions=transitions,
        obs=np.array(obs_rows),
        actions=np.array(actions, dtype=np.int64),
        rewards=np.array(rewards),
        probs=probs_arr,
        log_probs=np.log(probs_arr),
        terminal=env.reached_goal(state),
        final_obs=env.encode(state),
    )
