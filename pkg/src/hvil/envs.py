"""Environments and the teachers that demonstrate them.

Environments are small value-like state machines: reset() returns the first
observation, step(action) mutates state and returns the next observation
(raising EnvCrash where the domain defines crashes). Each environment
serializes its initial state to a string so stored traces can be replayed
against a fresh instance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trace import TERMINATE, Trace


class EnvCrash(Exception):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_width: int
    n_actions: int
    action_names: tuple


# ---------------------------------------------------------------------------
# bubble sort machine: two pointers over a small integer memory

P1_LEFT, P1_RIGHT, P2_LEFT, P2_RIGHT, SWAP = range(5)

BUBBLE_VALUES = 10  # memory cells hold integers in [0, BUBBLE_VALUES)

BUBBLE_SPEC = EnvSpec(
    name="bubble",
    obs_width=2 * BUBBLE_VALUES + 4,
    n_actions=5,
    action_names=("p1_left", "p1_right", "p2_left", "p2_right", "swap"),
)


class BubbleEnv:
    """Memory array with two pointers; moves clamp at the edges."""

    spec = BUBBLE_SPEC

    def __init__(self, memory: list[int]):
        if not 1 <= len(memory) <= 10:
            raise ValueError("memory length must be in [1, 10]")
        if any(not 0 <= v < BUBBLE_VALUES for v in memory):
            raise ValueError(f"memory values must be in [0, {BUBBLE_VALUES})")
        self.memory = list(memory)
        self.ptr1 = 0
        self.ptr2 = 0

    def observe(self) -> np.ndarray:
        obs = np.zeros(BUBBLE_SPEC.obs_width)
        obs[self.memory[self.ptr1]] = 1.0
        obs[BUBBLE_VALUES + self.memory[self.ptr2]] = 1.0
        last = len(self.memory) - 1
        obs[2 * BUBBLE_VALUES + 0] = float(self.ptr1 == 0)
        obs[2 * BUBBLE_VALUES + 1] = float(self.ptr1 == last)
        obs[2 * BUBBLE_VALUES + 2] = float(self.ptr2 == 0)
        obs[2 * BUBBLE_VALUES + 3] = float(self.ptr2 == last)
        return obs

    def reset(self) -> np.ndarray:
        return self.observe()

    def apply(self, action: int):
        """State change only (no observation built); replay checks use this."""
        last = len(self.memory) - 1
        if action == P1_LEFT:
            self.ptr1 = max(0, self.ptr1 - 1)
        elif action == P1_RIGHT:
            self.ptr1 = min(last, self.ptr1 + 1)
        elif action == P2_LEFT:
            self.ptr2 = max(0, self.ptr2 - 1)
        elif action == P2_RIGHT:
            self.ptr2 = min(last, self.ptr2 + 1)
        elif action == SWAP:
            m = self.memory
            m[self.ptr1], m[self.ptr2] = m[self.ptr2], m[self.ptr1]
        else:
            raise ValueError(f"unknown action {action}")

    def step(self, action: int) -> np.ndarray:
        self.apply(action)
        return self.observe()

    def to_init_string(self) -> str:
        return ",".join(str(v) for v in self.memory)

    @classmethod
    def from_init_string(cls, s: str, seed: int = 0) -> "BubbleEnv":
        return cls([int(v) for v in s.split(",")])


def bubble_teacher(memory: list[int]) -> Trace:
    """Canonical bubble-sort demonstration.

    The second pointer walks left to right with the first trailing one
    behind, swapping out-of-order pairs; after a pass with swaps both
    pointers walk back to the start position; a clean pass ends the episode.
    A single initial separation step is always emitted so even length-1
    memories yield a legal trace.
    """
    env = BubbleEnv(list(memory))
    observations = [env.reset()]
    actions: list[int] = []

    def emit(a: int):
        actions.append(a)
        observations.append(env.step(a))

    emit(P2_RIGHT)
    n = len(env.memory)
    if n > 1:
        while True:
            swapped = False
            while True:
                if env.memory[env.ptr1] > env.memory[env.ptr2]:
                    emit(SWAP)
                    swapped = True
                if env.ptr2 == n - 1:
                    break
                emit(P1_RIGHT)
                emit(P2_RIGHT)
            if not swapped:
                break
            while env.ptr1 > 0:
                emit(P1_LEFT)
            while env.ptr2 > 1:
                emit(P2_LEFT)
    actions.append(TERMINATE)
    return Trace(observations, actions).validate()


# ---------------------------------------------------------------------------
# acausal parity domain: a noisy first observation, a clean second one

ACAUSAL_WIDTH = 16
ACAUSAL_NOISE_SIGMA = 0.5

ACAUSAL_SPEC = EnvSpec(
    name="acausal",
    obs_width=ACAUSAL_WIDTH,
    n_actions=2,
    action_names=("even", "odd"),
)


class AcausalEnv:
    """Hidden digit; o_0 is a noisy feature vector, o_1 its exact one-hot.

    The second observation can never influence the first action at execution
    time, but it cleanly identifies the digit for anything that looks at the
    whole trace.
    """

    spec = ACAUSAL_SPEC

    def __init__(self, digit: int, seed: int = 0):
        if not 0 <= digit <= 9:
            raise ValueError("digit must be in 0..9")
        self.digit = digit
        self.seed = seed
        rng = np.random.default_rng(seed)
        o0 = np.zeros(ACAUSAL_WIDTH)
        o0[digit] = 1.0
        self._o0 = o0 + rng.normal(0.0, ACAUSAL_NOISE_SIGMA, ACAUSAL_WIDTH)
        o1 = np.zeros(ACAUSAL_WIDTH)
        o1[digit] = 1.0
        self._o1 = o1
        self.phase = 0

    def reset(self) -> np.ndarray:
        self.phase = 0
        return self._o0.copy()

    def step(self, action: int) -> np.ndarray:
        self.phase = min(self.phase + 1, 1)
        return self._o1.copy()

    def to_init_string(self) -> str:
        return str(self.digit)

    @classmethod
    def from_init_string(cls, s: str, seed: int = 0) -> "AcausalEnv":
        return cls(int(s), seed)


def acausal_teacher(digit: int, noise_p: float, rng: np.random.Generator, seed: int) -> Trace:
    """Demonstrates the digit's parity with probability noise_p, then terminates."""
    if not 0.5 <= noise_p <= 1.0:
        raise ValueError("noise_p must be in [0.5, 1]")
    env = AcausalEnv(digit, seed)
    o0 = env.reset()
    parity = digit % 2
    a0 = parity if rng.random() < noise_p else 1 - parity
    o1 = env.step(a0)
    return Trace([o0, o1], [a0, TERMINATE]).validate()


# ---------------------------------------------------------------------------
# registry

def get_env_spec(name: str) -> EnvSpec:
    from .karel_world import KAREL_SPEC

    specs = {"bubble": BUBBLE_SPEC, "acausal": ACAUSAL_SPEC, "karel": KAREL_SPEC}
    if name not in specs:
        raise ValueError(f"unknown environment {name!r}")
    return specs[name]


def make_env(name: str, init: str, seed: int = 0):
    if name == "bubble":
        return BubbleEnv.from_init_string(init, seed)
    if name == "acausal":
        return AcausalEnv.from_init_string(init, seed)
    if name == "karel":
        from .karel_world import KarelEnv

        return KarelEnv.from_init_string(init, seed)
    raise ValueError(f"unknown environment {name!r}")
