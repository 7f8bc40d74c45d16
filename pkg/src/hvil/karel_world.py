"""The Karel grid world: walls, markers, and an oriented agent.

Interior extents are at most 16x16 and exclude the outer walls, which exist
implicitly: moving off the grid crashes just like moving into a wall. Cells
hold up to 10 markers; picking from an empty cell or putting onto a full one
crashes. Worlds serialize to a text format that round-trips bit-exactly.
"""
from __future__ import annotations

import numpy as np

from .envs import EnvCrash, EnvSpec

MOVE, TURN_LEFT, TURN_RIGHT, PICK_MARKER, PUT_MARKER = range(5)

KAREL_ACTION_NAMES = ("move", "turnLeft", "turnRight", "pickMarker", "putMarker")

KAREL_SPEC = EnvSpec(
    name="karel",
    obs_width=4,
    n_actions=5,
    action_names=KAREL_ACTION_NAMES,
)

NORTH, EAST, SOUTH, WEST = range(4)
DIR_LETTERS = "NESW"
DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))

MAX_MARKERS = 10


class GridFormatError(ValueError):
    pass


class KarelWorld:
    def __init__(self, walls: np.ndarray, markers: np.ndarray, agent_r: int, agent_c: int, agent_dir: int):
        self.walls = np.asarray(walls, dtype=bool)
        self.markers = np.asarray(markers, dtype=np.int64)
        if self.walls.shape != self.markers.shape:
            raise GridFormatError("walls/markers shape mismatch")
        m, n = self.walls.shape
        if not (1 <= m <= 16 and 1 <= n <= 16):
            raise GridFormatError(f"grid extents ({m}, {n}) out of range")
        if self.markers.min() < 0 or self.markers.max() > MAX_MARKERS:
            raise GridFormatError("marker counts out of range")
        if (self.markers[self.walls] > 0).any():
            raise GridFormatError("markers on wall cells")
        if not (0 <= agent_r < m and 0 <= agent_c < n):
            raise GridFormatError("agent out of bounds")
        if self.walls[agent_r, agent_c]:
            raise GridFormatError("agent on a wall")
        self.agent_r = agent_r
        self.agent_c = agent_c
        self.agent_dir = agent_dir

    @property
    def shape(self):
        return self.walls.shape

    def copy(self) -> "KarelWorld":
        return KarelWorld(
            self.walls.copy(), self.markers.copy(), self.agent_r, self.agent_c, self.agent_dir
        )

    def _clear(self, direction: int) -> bool:
        dr, dc = DELTAS[direction]
        r, c = self.agent_r + dr, self.agent_c + dc
        m, n = self.walls.shape
        return 0 <= r < m and 0 <= c < n and not self.walls[r, c]

    def front_is_clear(self) -> bool:
        return self._clear(self.agent_dir)

    def left_is_clear(self) -> bool:
        return self._clear((self.agent_dir - 1) % 4)

    def right_is_clear(self) -> bool:
        return self._clear((self.agent_dir + 1) % 4)

    def markers_present(self) -> bool:
        return self.markers[self.agent_r, self.agent_c] > 0

    def observe(self) -> np.ndarray:
        return np.array(
            [
                float(self.left_is_clear()),
                float(self.right_is_clear()),
                float(self.front_is_clear()),
                float(self.markers_present()),
            ]
        )

    def step(self, action: int):
        if action == MOVE:
            if not self.front_is_clear():
                raise EnvCrash("moved into a wall")
            dr, dc = DELTAS[self.agent_dir]
            self.agent_r += dr
            self.agent_c += dc
        elif action == TURN_LEFT:
            self.agent_dir = (self.agent_dir - 1) % 4
        elif action == TURN_RIGHT:
            self.agent_dir = (self.agent_dir + 1) % 4
        elif action == PICK_MARKER:
            if self.markers[self.agent_r, self.agent_c] == 0:
                raise EnvCrash("picked from an empty cell")
            self.markers[self.agent_r, self.agent_c] -= 1
        elif action == PUT_MARKER:
            if self.markers[self.agent_r, self.agent_c] >= MAX_MARKERS:
                raise EnvCrash("put onto a full cell")
            self.markers[self.agent_r, self.agent_c] += 1
        else:
            raise ValueError(f"unknown action {action}")

    # -- text format: "m n", m rows of glyphs, "agent r c DIR" ---------------

    def to_text(self) -> str:
        m, n = self.walls.shape
        lines = [f"{m} {n}"]
        for r in range(m):
            row = []
            for c in range(n):
                if self.walls[r, c]:
                    row.append("#")
                elif self.markers[r, c] == 0:
                    row.append(".")
                elif self.markers[r, c] == MAX_MARKERS:
                    row.append("X")
                else:
                    row.append(str(self.markers[r, c]))
            lines.append("".join(row))
        lines.append(f"agent {self.agent_r} {self.agent_c} {DIR_LETTERS[self.agent_dir]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "KarelWorld":
        lines = text.splitlines()
        if len(lines) < 3:
            raise GridFormatError("grid text too short")
        try:
            m, n = (int(v) for v in lines[0].split())
        except ValueError:
            raise GridFormatError(f"bad size line {lines[0]!r}") from None
        if len(lines) < m + 2:
            raise GridFormatError("missing grid rows")
        walls = np.zeros((m, n), dtype=bool)
        markers = np.zeros((m, n), dtype=np.int64)
        for r in range(m):
            row = lines[1 + r]
            if len(row) != n:
                raise GridFormatError(f"row {r} has length {len(row)}, expected {n}")
            for c, glyph in enumerate(row):
                if glyph == "#":
                    walls[r, c] = True
                elif glyph == ".":
                    pass
                elif glyph == "X":
                    markers[r, c] = MAX_MARKERS
                elif glyph.isdigit() and glyph != "0":
                    markers[r, c] = int(glyph)
                else:
                    raise GridFormatError(f"bad glyph {glyph!r} at ({r}, {c})")
        parts = lines[1 + m].split()
        if len(parts) != 4 or parts[0] != "agent":
            raise GridFormatError(f"bad agent line {lines[1 + m]!r}")
        ar, ac = int(parts[1]), int(parts[2])
        if parts[3] not in DIR_LETTERS:
            raise GridFormatError(f"bad direction {parts[3]!r}")
        return cls(walls, markers, ar, ac, DIR_LETTERS.index(parts[3]))


class KarelEnv:
    """Environment wrapper over a world, for policy rollouts."""

    spec = KAREL_SPEC

    def __init__(self, world: KarelWorld):
        self.world = world.copy()

    def reset(self) -> np.ndarray:
        return self.world.observe()

    def step(self, action: int) -> np.ndarray:
        self.world.step(action)
        return self.world.observe()

    def to_init_string(self) -> str:
        return self.world.to_text()

    @classmethod
    def from_init_string(cls, s: str, seed: int = 0) -> "KarelEnv":
        return cls(KarelWorld.from_text(s))
