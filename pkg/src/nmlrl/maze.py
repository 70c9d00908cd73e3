"""2D point-mass mazes on [-4, 4]^2 with zero-thickness axis-aligned walls."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from . import kernels

BOUND = kernels.BOUND
STEP_SCALE = 0.2
HORIZON = 100
SUCCESS_THRESHOLD = 0.5
NODE_OFFSET = 1e-4
ON_WALL_TOL = 1e-9

MAZE_KINDS = ("zigzag", "spiral", "double_sided")

# eight compass directions, components in [-1, 1]
ACTIONS = np.array(
    [[1, 0], [1, 1], [0, 1], [-1, 1], [-1, 0], [-1, -1], [0, -1], [1, -1]], dtype=np.float64
)


@dataclass(frozen=True)
class Region:
    center: tuple[float, float]
    radius: float

    def contains(self, s) -> bool:
        return float(np.hypot(s[0] - self.center[0], s[1] - self.center[1])) <= self.radius


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    done: bool


class MazeWorld:
    """Immutable maze description plus precomputed geodesic machinery.

    Maze distance is the exact shortest free-space path length, computed on a
    visibility graph whose nodes sit just off every wall endpoint.  A lattice
    of ``cell_grid`` x ``cell_grid`` cells is used for counts, tabular values
    and reachability checks.
    """

    def __init__(self, name, walls, start, goal: Region, hidden=(), cell_grid=40,
                 version=1):
        self.name = name
        self.walls = np.array(walls, dtype=np.float64).reshape(-1, 4)
        self.walls.setflags(write=False)
        for w in self.walls:
            if w[0] != w[2] and w[1] != w[3]:
                raise ValueError(f"wall {w.tolist()} is not axis-aligned")
        self.start = np.array(start, dtype=np.float64)
        self.goal = goal
        self.hidden = tuple(hidden)
        self.cell_grid = int(cell_grid)
        self.version = version
        self._build_graph()
        self._goal_field = self._field_to(np.array(goal.center, dtype=np.float64))
        self._check()

    # -- construction helpers

    def _build_graph(self):
        nodes = []
        for x0, y0, x1, y1 in self.walls:
            for ex, ey in ((x0, y0), (x1, y1)):
                for dx in (-NODE_OFFSET, NODE_OFFSET):
                    for dy in (-NODE_OFFSET, NODE_OFFSET):
                        nodes.append((ex + dx, ey + dy))
        nodes = np.unique(np.array(nodes).reshape(-1, 2), axis=0)
        inside = np.all(np.abs(nodes) < BOUND, axis=1)
        clear = _dist_to_walls(nodes, self.walls) > NODE_OFFSET / 2
        self.nodes = nodes[inside & clear]
        n = len(self.nodes)
        if n == 0:
            self.node_dist = np.zeros((0, 0))
            return
        vis = ~kernels.segments_blocked(self.nodes, self.nodes, self.walls)
        np.fill_diagonal(vis, False)
        diff = self.nodes[:, None, :] - self.nodes[None, :, :]
        w = np.hypot(diff[..., 0], diff[..., 1])
        i, j = np.nonzero(vis)
        graph = coo_matrix((w[i, j], (i, j)), shape=(n, n)).tocsr()
        self.node_dist = shortest_path(graph, method="D", directed=False)

    def _field_to(self, g):
        """Geodesic distance from every graph node to point ``g``."""
        if len(self.nodes) == 0:
            return np.zeros(0)
        vis = ~kernels.segments_blocked(self.nodes, g[None, :], self.walls)[:, 0]
        direct = np.where(vis, np.hypot(*(self.nodes - g).T), np.inf)
        via = self.node_dist[:, vis] + direct[vis][None, :]
        best = via.min(axis=1) if via.shape[1] else np.full(len(self.nodes), np.inf)
        return np.minimum(direct, best)

    def _check(self):
        for label, p in (("start", self.start), ("goal", np.array(self.goal.center))):
            self.validate_point(p, label)
        if _dist_to_walls(np.array([self.goal.center]), self.walls)[0] < self.goal.radius:
            raise ValueError("goal region intersects a wall")
        if not np.isfinite(self.distance_to_goal(self.start[None, :])[0]):
            raise ValueError("goal is unreachable from start")
        comp = self.reachable_cells(80)
        if not comp[cell_index(self.goal.center, 80)]:
            raise ValueError("goal cell is not lattice-reachable from start")

    # -- queries

    def validate_point(self, p, label="point"):
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (2,) or not np.all(np.isfinite(p)):
            raise ValueError(f"{label} must be a finite 2D point, got {p!r}")
        if np.any(np.abs(p) > BOUND):
            raise ValueError(f"{label} {p.tolist()} is outside [-4, 4]^2")
        if len(self.walls) and _dist_to_walls(p[None, :], self.walls)[0] < ON_WALL_TOL:
            raise ValueError(f"{label} {p.tolist()} lies inside a wall")
        return p

    def distance_field(self, points, g):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g = np.asarray(g, dtype=np.float64)
        field_ = self._field_to(g)
        return self._distances(points, g, field_)

    def distance_to_goal(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return self._distances(points, np.array(self.goal.center, dtype=np.float64),
                               self._goal_field)

    def _distances(self, points, g, field_):
        eu = np.hypot(points[:, 0] - g[0], points[:, 1] - g[1])
        los = ~kernels.segments_blocked(points, g[None, :], self.walls)[:, 0]
        out = np.where(los, eu, np.inf)
        if len(self.nodes):
            vis = ~kernels.segments_blocked(points, self.nodes, self.walls)
            d = np.hypot(points[:, None, 0] - self.nodes[None, :, 0],
                         points[:, None, 1] - self.nodes[None, :, 1])
            via = np.where(vis, d + field_[None, :], np.inf).min(axis=1)
            out = np.minimum(out, via)
        return out

    def reachable_cells(self, n_side):
        """Boolean mask of lattice cells connected to the start cell."""
        n = int(n_side)
        size = 2 * BOUND / n
        c = -BOUND + size * (np.arange(n) + 0.5)
        cx, cy = np.meshgrid(c, c)
        idx = np.arange(n * n).reshape(n, n)
        rows, cols = [], []
        # horizontal neighbours
        a = np.stack([cx[:, :-1].ravel(), cy[:, :-1].ravel()], 1)
        b = np.stack([cx[:, 1:].ravel(), cy[:, 1:].ravel()], 1)
        ok = ~_pairwise_blocked(a, b, self.walls)
        rows.append(idx[:, :-1].ravel()[ok])
        cols.append(idx[:, 1:].ravel()[ok])
        a = np.stack([cx[:-1, :].ravel(), cy[:-1, :].ravel()], 1)
        b = np.stack([cx[1:, :].ravel(), cy[1:, :].ravel()], 1)
        ok = ~_pairwise_blocked(a, b, self.walls)
        rows.append(idx[:-1, :].ravel()[ok])
        cols.append(idx[1:, :].ravel()[ok])
        r = np.concatenate(rows)
        cc = np.concatenate(cols)
        g = coo_matrix((np.ones(len(r)), (r, cc)), shape=(n * n, n * n))
        _, labels = connected_components(g, directed=False)
        return labels == labels[cell_index(self.start, n)]

    def cell_centers(self, n_side=None):
        n = self.cell_grid if n_side is None else int(n_side)
        size = 2 * BOUND / n
        c = -BOUND + size * (np.arange(n) + 0.5)
        cx, cy = np.meshgrid(c, c)
        return np.stack([cx.ravel(), cy.ravel()], axis=1)

    def __repr__(self):
        return f"MazeWorld({self.name!r}, walls={len(self.walls)}, cell_grid={self.cell_grid})"


def _dist_to_walls(points, walls):
    """Euclidean distance from each point to the nearest wall segment."""
    if len(walls) == 0:
        return np.full(len(points), np.inf)
    p = points[:, None, :]
    a = walls[None, :, 0:2]
    b = walls[None, :, 2:4]
    ab = b - a
    denom = np.maximum((ab**2).sum(-1), 1e-300)
    t = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.sqrt(((p - proj) ** 2).sum(-1)).min(axis=1)


def _pairwise_blocked(a, b, walls):
    """Row-wise blocked test for axis-aligned lattice moves a[i] -> b[i]."""
    out = np.zeros(len(a), dtype=bool)
    for x0, y0, x1, y1 in walls:
        if x0 == x1:  # vertical wall blocks horizontal moves
            lo, hi = min(y0, y1), max(y0, y1)
            cross = (np.minimum(a[:, 0], b[:, 0]) <= x0) & (x0 <= np.maximum(a[:, 0], b[:, 0]))
            out |= cross & (a[:, 1] >= lo) & (a[:, 1] <= hi) & (a[:, 1] == b[:, 1])
        if y0 == y1:
            lo, hi = min(x0, x1), max(x0, x1)
            cross = (np.minimum(a[:, 1], b[:, 1]) <= y0) & (y0 <= np.maximum(a[:, 1], b[:, 1]))
            out |= cross & (a[:, 0] >= lo) & (a[:, 0] <= hi) & (a[:, 0] == b[:, 0])
    return out


def cell_index(s, n_side):
    s = np.asarray(s, dtype=np.float64)
    size = 2 * BOUND / n_side
    ij = np.clip(np.floor((s + BOUND) / size).astype(np.int64), 0, n_side - 1)
    return ij[..., 1] * n_side + ij[..., 0]


# ---------------------------------------------------------------- layout I/O


def parse_layout(text, name="maze", cell_grid=40) -> MazeWorld:
    walls, start, goal, hidden, version = [], None, None, [], 1
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        try:
            nums = [float(v) for v in vals]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad number in {raw!r}") from exc
        if key == "version":
            version = int(nums[0])
        elif key == "bounds":
            if nums != [-BOUND, -BOUND, BOUND, BOUND]:
                raise ValueError(f"line {lineno}: only bounds -4 -4 4 4 are supported")
        elif key == "wall" and len(nums) == 4:
            walls.append(nums)
        elif key == "start" and len(nums) == 2:
            start = nums
        elif key == "goal" and len(nums) == 3:
            goal = Region((nums[0], nums[1]), nums[2])
        elif key == "hidden" and len(nums) == 3:
            hidden.append(Region((nums[0], nums[1]), nums[2]))
        else:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}")
    if start is None or goal is None:
        raise ValueError("layout needs both a start and a goal line")
    return MazeWorld(name, walls, start, goal, hidden, cell_grid=cell_grid, version=version)


def format_layout(world: MazeWorld) -> str:
    lines = [f"version {world.version}", "bounds -4 -4 4 4"]
    def fmt(*vals):
        return " ".join(repr(float(v)) for v in vals)

    lines += ["wall " + fmt(*w) for w in world.walls]
    lines.append("start " + fmt(*world.start))
    g = world.goal
    lines.append("goal " + fmt(g.center[0], g.center[1], g.radius))
    lines += ["hidden " + fmt(h.center[0], h.center[1], h.radius) for h in world.hidden]
    return "\n".join(lines) + "\n"


def load_layout(path, cell_grid=40) -> MazeWorld:
    with open(path) as fh:
        return parse_layout(fh.read(), name=str(path), cell_grid=cell_grid)


def make_maze(kind: str, seed: int = 0, cell_grid: int = 40) -> MazeWorld:
    """Build one of the shipped layouts.  Layouts are fixed; ``seed`` is unused."""
    if kind not in MAZE_KINDS:
        raise ValueError(f"unknown maze kind {kind!r}; expected one of {MAZE_KINDS}")
    text = resources.files("nmlrl").joinpath("data", "mazes", f"{kind}.maze").read_text()
    return parse_layout(text, name=kind, cell_grid=cell_grid)


# ------------------------------------------------------------------ dynamics


def step(world: MazeWorld, state, action, dt: float = 1.0) -> Transition:
    state = np.asarray(state, dtype=np.float64)
    action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    nx, ny = kernels.step_point(world.walls, state[0], state[1], action[0], action[1],
                                STEP_SCALE * dt)
    return Transition(state.copy(), action, np.array([nx, ny]), False)


def maze_distance(world: MazeWorld, s, g) -> float:
    s = world.validate_point(s, "s")
    g = world.validate_point(g, "g")
    if np.array_equal(s, g):
        return 0.0
    return float(world.distance_field(s[None, :], g)[0])


def is_success(world: MazeWorld, s, threshold: float = SUCCESS_THRESHOLD) -> bool:
    s = np.asarray(s, dtype=np.float64)
    return bool(world.distance_to_goal(s[None, :])[0] <= threshold)


def in_hidden_region(world: MazeWorld, points) -> np.ndarray:
    points = np.atleast_2d(points)
    hit = np.zeros(len(points), dtype=bool)
    for h in world.hidden:
        hit |= np.hypot(points[:, 0] - h.center[0], points[:, 1] - h.center[1]) <= h.radius
    return hit


def sample_goal_examples(world: MazeWorld, count: int = 150, seed: int = 0) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    r = world.goal.radius * np.sqrt(rng.random(count))
    theta = 2 * np.pi * rng.random(count)
    c = np.array(world.goal.center)
    return c + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


# ------------------------------------------------------------------ encodings


@dataclass(frozen=True)
class StateEncoding:
    mode: str = "continuous_xy"
    n_side: int = 16
    permutation: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in ("continuous_xy", "shuffled_discrete"):
            raise ValueError(f"unknown encoding mode {self.mode!r}")
        if self.mode == "shuffled_discrete":
            perm = np.asarray(self.permutation)
            if perm.shape != (self.n_side**2,) or not np.array_equal(np.sort(perm), np.arange(self.n_side**2)):
                raise ValueError("shuffled encoding needs a permutation of all cells")


def make_encoding(mode: str = "continuous_xy", n_side: int = 16, seed: int = 0) -> StateEncoding:
    if mode == "continuous_xy":
        return StateEncoding(mode, n_side)
    perm = np.random.default_rng(seed).permutation(n_side * n_side)
    return StateEncoding(mode, n_side, perm)


def encode_state(world: MazeWorld, enc: StateEncoding, s) -> np.ndarray:
    """Encode one state (2,) or a batch (B, 2)."""
    s = np.asarray(s, dtype=np.float64)
    if enc.mode == "continuous_xy":
        return s.copy()
    n = enc.n_side
    cell = enc.permutation[cell_index(s, n)]
    size = 2 * BOUND / n
    out = np.stack([-BOUND + size * (cell % n + 0.5), -BOUND + size * (cell // n + 0.5)], axis=-1)
    return out


# --------------------------------------------------------------------- counts


@dataclass
class TabularCounts:
    """Visit counts N and goal-example counts G per cell of an n x n grid."""

    n_side: int
    N: np.ndarray = None
    G: np.ndarray = None

    def __post_init__(self):
        size = self.n_side * self.n_side
        self.N = np.zeros(size, dtype=np.int64) if self.N is None else np.asarray(self.N, dtype=np.int64)
        self.G = np.zeros(size, dtype=np.int64) if self.G is None else np.asarray(self.G, dtype=np.int64)

    def get(self, state_id) -> tuple[int, int]:
        if 0 <= state_id < len(self.N):
            return int(self.N[state_id]), int(self.G[state_id])
        return 0, 0

    def copy(self) -> "TabularCounts":
        return TabularCounts(self.n_side, self.N.copy(), self.G.copy())


def update_counts(counts: TabularCounts, world: MazeWorld, visited_states, goal_examples=None) -> TabularCounts:
    out = counts.copy()
    visited = np.asarray(visited_states, dtype=np.float64).reshape(-1, 2)
    if len(visited):
        out.N += np.bincount(cell_index(visited, out.n_side), minlength=len(out.N))
    if goal_examples is not None:
        ge = np.asarray(goal_examples, dtype=np.float64).reshape(-1, 2)
        out.G = np.bincount(cell_index(ge, out.n_side), minlength=len(out.G)).astype(np.int64)
    return out


def free_cells(world: MazeWorld, n_side=None) -> np.ndarray:
    return world.reachable_cells(world.cell_grid if n_side is None else n_side)


def export_visitations(counts: TabularCounts, path) -> None:
    n = counts.n_side
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_x", "cell_y", "visits"])
        for cid in range(n * n):
            w.writerow([cid % n, cid // n, int(counts.N[cid])])
