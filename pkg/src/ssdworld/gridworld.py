"""Walled grid world with an agent and a goal.

Token mode turns a trajectory into one long symbol stream: each frame is
its l_g * l_g cells row-major followed by the action taken from it. Pixel
mode renders frames as small RGB images and adds reward/termination for the
full world-model + policy pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

WALL, FLOOR, AGENT, GOAL = 0, 1, 2, 3
CELL_SYMBOLS = ("W", "F", "A", "G")
ACTION_NAMES = ("N", "E", "S", "W")
ACTION_SYMBOLS = tuple("a" + a for a in ACTION_NAMES)   # distinct from the wall symbol
VOCAB = CELL_SYMBOLS + ACTION_SYMBOLS
ACTION_OFFSET = len(CELL_SYMBOLS)
MOVES = {0: (-1, 0), 1: (0, 1), 2: (1, 0), 3: (0, -1)}   # N, E, S, W as (row, col)

COLORS = {
    WALL: (0, 0, 0),
    FLOOR: (128, 128, 128),
    AGENT: (255, 0, 0),
    GOAL: (255, 255, 0),
}


@dataclass(frozen=True)
class GridState:
    size: int
    agent: tuple[int, int]
    goal: tuple[int, int]

    def interior(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(1, self.size - 1) for j in range(1, self.size - 1)]

    def frame(self) -> np.ndarray:
        f = np.full((self.size, self.size), WALL, dtype=np.int64)
        f[1:-1, 1:-1] = FLOOR
        f[self.goal] = GOAL
        f[self.agent] = AGENT
        return f


def frame_length(size: int) -> int:
    return size * size + 1


def random_state(size: int, rng: np.random.Generator) -> GridState:
    if size < 4:
        raise ValueError(f"grid size {size} leaves no room for distinct agent and goal cells")
    cells = [(i, j) for i in range(1, size - 1) for j in range(1, size - 1)]
    a, g = rng.choice(len(cells), size=2, replace=False)
    return GridState(size, cells[a], cells[g])


def step(state: GridState, action: int, rng: np.random.Generator) -> tuple[GridState, bool]:
    """Move one cell unless a wall blocks; reaching the goal re-randomises both positions."""
    dr, dc = MOVES[int(action)]
    r, c = state.agent[0] + dr, state.agent[1] + dc
    if not (1 <= r <= state.size - 2 and 1 <= c <= state.size - 2):
        r, c = state.agent
    if (r, c) == state.goal:
        return random_state(state.size, rng), True
    return GridState(state.size, (r, c), state.goal), False


def random_trajectory(size: int, frames: int, rng: np.random.Generator):
    """Random-action rollout: (frames (n, size, size), actions (n,))."""
    state = random_state(size, rng)
    out = np.empty((frames, size, size), dtype=np.int64)
    actions = rng.integers(0, 4, size=frames)
    for k in range(frames):
        out[k] = state.frame()
        state, _ = step(state, actions[k], rng)
    return out, actions


def tokenize(frames: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """(n, l_g, l_g) frames + (n,) actions -> (n * (l_g^2 + 1),) token ids."""
    n = len(frames)
    body = frames.reshape(n, -1)
    return np.concatenate([body, (np.asarray(actions) + ACTION_OFFSET)[:, None]], axis=1).reshape(-1)


def detokenize(tokens: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    lf = frame_length(size)
    if len(tokens) % lf:
        raise ValueError(f"token stream length {len(tokens)} is not a multiple of {lf}")
    rows = np.asarray(tokens).reshape(-1, lf)
    return rows[:, :-1].reshape(-1, size, size), rows[:, -1] - ACTION_OFFSET


def batch_tokens(size: int, frames: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([tokenize(*random_trajectory(size, frames, rng)) for _ in range(batch)])


def dump_trajectory(path, frames: np.ndarray, actions: np.ndarray) -> None:
    """One line per frame: cell symbols space-separated, then the action symbol."""
    lines = [" ".join([VOCAB[c] for c in f.reshape(-1)] + [ACTION_SYMBOLS[a]])
             for f, a in zip(frames, actions)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path) -> tuple[np.ndarray, np.ndarray]:
    index = {s: i for i, s in enumerate(VOCAB)}
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    size = int(round((len(rows[0]) - 1) ** 0.5))
    frames = np.array([[index[s] for s in r[:-1]] for r in rows]).reshape(-1, size, size)
    actions = np.array([index[r[-1]] - ACTION_OFFSET for r in rows])
    return frames, actions


# --------------------------------------------------------------------------
# error metric
# --------------------------------------------------------------------------

@dataclass
class GridErrors:
    geometric: float   # % of checked cells in violation
    logic: float       # % of frames that fail
    combined: float


def _border_mask(size: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
    return m


def frame_violations(frame: np.ndarray) -> tuple[int, bool]:
    """(geometric violation count, interior configuration valid?) for one predicted frame.

    Boundary cells that are not walls count one each. In the interior every
    non-{F, A, G} symbol counts one, plus |#A - 1| and |#G - 1|. The total is
    capped at the number of cells so the rate stays within [0, 100] %.
    """
    size = frame.shape[0]
    border = _border_mask(size)
    geo = int((frame[border] != WALL).sum())
    inner = frame[~border]
    n_agent = int((inner == AGENT).sum())
    n_goal = int((inner == GOAL).sum())
    bad_symbols = int((~np.isin(inner, (FLOOR, AGENT, GOAL))).sum())
    geo += bad_symbols + abs(n_agent - 1) + abs(n_goal - 1)
    valid = bad_symbols == 0 and n_agent == 1 and n_goal == 1
    return min(geo, size * size), valid


def grid_errors(predicted: np.ndarray, truth: np.ndarray) -> GridErrors:
    """E_g, E_l and their mean, in percent, for aligned (n, l_g, l_g) frame stacks.

    E_g is normalised per cell per frame, E_l per frame. A frame fails the
    logic check when its configuration is invalid or its agent is not where
    the ground-truth next frame has it.
    """
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"grid_errors: predicted {predicted.shape} vs truth {truth.shape}")
    n, size = predicted.shape[0], predicted.shape[1]
    if n == 0:
        return GridErrors(0.0, 0.0, 0.0)
    geo_total, logic_fail = 0, 0
    for p, t in zip(predicted, truth):
        geo, valid = frame_violations(p)
        geo_total += geo
        agent_ok = valid and np.array_equal(p == AGENT, t == AGENT)
        logic_fail += not agent_ok
    e_g = 100.0 * geo_total / (n * size * size)
    e_l = 100.0 * logic_fail / n
    return GridErrors(e_g, e_l, 0.5 * (e_g + e_l))


# --------------------------------------------------------------------------
# pixel mode
# --------------------------------------------------------------------------

def render_pixels(state: GridState) -> np.ndarray:
    frame = state.frame()
    img = np.zeros((state.size, state.size, 3), dtype=np.uint8)
    for cls, rgb in COLORS.items():
        img[frame == cls] = rgb
    return img


class PixelGridEnv:
    """Episodic pixel grid world: +1 and termination on reaching the goal.

    Episodes are truncated after ``max_steps`` moves (``info['truncated']``).
    """

    n_actions = 4

    def __init__(self, size: int = 5, max_steps: int = 4, seed: int | None = None):
        self.size = size
        self.max_steps = max_steps
        self.rng = np.random.default_rng(seed)
        self.state: GridState | None = None
        self.t = 0

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.size, self.size, 3)

    def reset(self) -> np.ndarray:
        self.state = random_state(self.size, self.rng)
        self.t = 0
        return render_pixels(self.state)

    def step(self, action: int):
        self.state, reached = step(self.state, action, self.rng)
        self.t += 1
        reward = 1.0 if reached else 0.0
        truncated = not reached and self.t >= self.max_steps
        return render_pixels(self.state), reward, reached, {"truncated": truncated}
