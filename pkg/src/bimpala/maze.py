"""15x15 grid mazes, 3-channel observations, stepping, and a BFS action oracle.

Coordinates are ``(row, col)`` with the origin at the top-left grid cell.
Passage lattice cells have odd coordinates; walls are ``True`` in ``walls``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .linalg import make_rng

GRID = 15
OBS_SIZE = 16
UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
ACTIONS = (UP, DOWN, LEFT, RIGHT)
ACTION_NAMES = ("up", "down", "left", "right")
DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1))
DEFAULT_CHEESE = (13, 13)
START = (1, 1)


@dataclass(frozen=True)
class Maze:
    walls: np.ndarray  # bool [15, 15]
    mouse: tuple[int, int]
    cheese: tuple[int, int]
    seed: int = 0

    def is_open(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        return 0 <= r < GRID and 0 <= c < GRID and not self.walls[r, c]

    def with_mouse(self, cell: tuple[int, int]) -> "Maze":
        return replace(self, mouse=tuple(cell))

    def open_cells(self) -> list[tuple[int, int]]:
        return [(int(r), int(c)) for r, c in zip(*np.nonzero(~self.walls))]

    def __eq__(self, other):
        if not isinstance(other, Maze):
            return NotImplemented
        return (
            np.array_equal(self.walls, other.walls)
            and self.mouse == other.mouse
            and self.cheese == other.cheese
            and self.seed == other.seed
        )

    __hash__ = None


def _carve(rng: np.random.Generator) -> np.ndarray:
    """Randomized iterative DFS over the odd lattice."""
    # plain lists: numpy scalar indexing dominates this loop otherwise
    walls = [[True] * GRID for _ in range(GRID)]
    r0, c0 = START
    walls[r0][c0] = False
    stack = [START]
    while stack:
        r, c = stack[-1]
        nbrs = []
        for dr, dc in DELTAS:
            nr, nc = r + 2 * dr, c + 2 * dc
            if 0 < nr < GRID - 1 and 0 < nc < GRID - 1 and walls[nr][nc]:
                nbrs.append((nr, nc))
        if not nbrs:
            stack.pop()
            continue
        nr, nc = nbrs[int(rng.integers(len(nbrs)))]
        walls[(r + nr) // 2][(c + nc) // 2] = False
        walls[nr][nc] = False
        stack.append((nr, nc))
    return np.array(walls, dtype=bool)


def lattice_cells() -> list[tuple[int, int]]:
    return [(r, c) for r in range(1, GRID, 2) for c in range(1, GRID, 2)]


def _check_lattice(cell) -> tuple[int, int]:
    r, c = int(cell[0]), int(cell[1])
    if not (0 < r < GRID - 1 and 0 < c < GRID - 1) or r % 2 == 0 or c % 2 == 0:
        raise ValueError(f"cheese cell {cell} is not a passage cell (both coordinates must be odd, 1..13)")
    return r, c


def generate_maze(seed: int, cheese: str | tuple[int, int] = "random") -> Maze:
    """Perfect maze for ``seed``; mouse at (1, 1).

    ``cheese`` is ``"random"`` (uniform over lattice cells other than the
    start) or a fixed odd-coordinate cell.
    """
    rng = make_rng(seed)
    walls = _carve(rng)
    if isinstance(cheese, str):
        if cheese != "random":
            raise ValueError(f"unknown cheese mode {cheese!r}")
        cells = [cell for cell in lattice_cells() if cell != START]
        cheese_cell = cells[int(rng.integers(len(cells)))]
    else:
        cheese_cell = _check_lattice(cheese)
        if cheese_cell == START:
            raise ValueError("cheese cannot share the mouse start cell")
    return Maze(walls=walls, mouse=START, cheese=cheese_cell, seed=int(seed))


def render_observation(maze: Maze, with_cheese: bool = True) -> np.ndarray:
    """[3, 16, 16] float tensor: walls, mouse one-hot, cheese one-hot.

    The grid sits at (0, 0); row 15 and column 15 are padding rendered as wall.
    """
    obs = np.zeros((3, OBS_SIZE, OBS_SIZE))
    obs[0] = 1.0
    obs[0, :GRID, :GRID] = maze.walls
    obs[1][maze.mouse] = 1.0
    if with_cheese:
        obs[2][maze.cheese] = 1.0
    return obs


def distances_to(maze: Maze, target: tuple[int, int]) -> np.ndarray:
    """BFS step distance from every open cell to ``target``; -1 where unreachable."""
    walls = maze.walls.tolist()
    dist = [[-1] * GRID for _ in range(GRID)]
    tr, tc = target
    dist[tr][tc] = 0
    queue = deque([(tr, tc)])
    while queue:
        r, c = queue.popleft()
        d = dist[r][c] + 1
        for dr, dc in DELTAS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < GRID and 0 <= nc < GRID and not walls[nr][nc] and dist[nr][nc] < 0:
                dist[nr][nc] = d
                queue.append((nr, nc))
    return np.array(dist, dtype=np.int64)


def action_from_distances(dist: np.ndarray, pos: tuple[int, int]) -> int:
    d = dist[pos]
    if d < 0:
        raise ValueError(f"cheese unreachable from {pos}")
    if d == 0:
        raise ValueError("mouse already on the cheese")
    r, c = pos
    for a, (dr, dc) in zip(ACTIONS, DELTAS):
        nr, nc = r + dr, c + dc
        if 0 <= nr < GRID and 0 <= nc < GRID and dist[nr, nc] == d - 1:
            return a
    raise AssertionError("BFS distances are inconsistent")


def bfs_optimal_action(maze: Maze) -> int:
    """First move of a shortest mouse->cheese path (ties: up < down < left < right)."""
    return action_from_distances(distances_to(maze, maze.cheese), maze.mouse)


def move(maze: Maze, pos: tuple[int, int], action: int) -> tuple[int, int]:
    dr, dc = DELTAS[action]
    nxt = (pos[0] + dr, pos[1] + dc)
    return nxt if maze.is_open(nxt) else pos


@dataclass(frozen=True)
class EpisodeState:
    maze: Maze
    steps_taken: int = 0
    done: bool = False
    return_so_far: float = 0.0
    step_cap: int = 100

    @property
    def success(self) -> bool:
        return self.done and self.return_so_far > 0


def reset(maze: Maze, step_cap: int = 100) -> EpisodeState:
    return EpisodeState(maze=maze, step_cap=step_cap)


def step(state: EpisodeState, action: int) -> tuple[EpisodeState, float]:
    """Advance one step. Returns ``(next_state, reward)``."""
    if state.done:
        raise RuntimeError("episode already finished")
    if action not in ACTIONS:
        raise ValueError(f"invalid action {action}")
    pos = move(state.maze, state.maze.mouse, action)
    steps = state.steps_taken + 1
    reward = 1.0 if pos == state.maze.cheese else 0.0
    done = reward > 0 or steps >= state.step_cap
    nxt = EpisodeState(
        maze=state.maze.with_mouse(pos),
        steps_taken=steps,
        done=done,
        return_so_far=state.return_so_far + reward,
        step_cap=state.step_cap,
    )
    return nxt, reward


def to_fixture(maze: Maze) -> str:
    """One-line text form: ``seed wallhex mr,mc cr,cc`` (walls row-major, bit i = cell i)."""
    bits = 0
    for i, w in enumerate(maze.walls.ravel()):
        if w:
            bits |= 1 << i
    return f"{maze.seed} {bits:x} {maze.mouse[0]},{maze.mouse[1]} {maze.cheese[0]},{maze.cheese[1]}"


def from_fixture(line: str) -> Maze:
    seed, hexbits, mouse, cheese = line.split()
    bits = int(hexbits, 16)
    walls = np.array([(bits >> i) & 1 for i in range(GRID * GRID)], dtype=bool).reshape(GRID, GRID)
    mr, mc = (int(v) for v in mouse.split(","))
    cr, cc = (int(v) for v in cheese.split(","))
    return Maze(walls=walls, mouse=(mr, mc), cheese=(cr, cc), seed=int(seed))


def optimal_path(maze: Maze, dist: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Cells visited by the oracle from the mouse up to (not including) the cheese."""
    dist = distances_to(maze, maze.cheese) if dist is None else dist
    pos = maze.mouse
    path = []
    while pos != maze.cheese:
        path.append(pos)
        pos = move(maze, pos, action_from_distances(dist, pos))
    return path


def sample_training_states(seed: int, n_states: int, rng: np.random.Generator, path_fraction: float = 0.0):
    """Oracle-labelled states from one random-cheese maze.

    A ``path_fraction`` share of the mouse positions is drawn from the oracle
    trajectory starting at (1, 1); the rest uniformly from all open cells.
    Returns ``(observations [n,3,16,16], oracle actions [n])``.
    """
    maze = generate_maze(seed)
    dist = distances_to(maze, maze.cheese)
    cells = [cell for cell in maze.open_cells() if cell != maze.cheese]
    path = optimal_path(maze, dist)
    n_path = int(round(path_fraction * n_states))
    picks = [path[int(j)] for j in rng.integers(len(path), size=n_path)]
    picks += [cells[int(j)] for j in rng.integers(len(cells), size=n_states - n_path)]
    obs = np.empty((n_states, 3, OBS_SIZE, OBS_SIZE))
    acts = np.empty(n_states, dtype=np.int64)
    for i, pos in enumerate(picks):
        obs[i] = render_observation(maze.with_mouse(pos))
        acts[i] = action_from_distances(dist, pos)
    return obs, acts
