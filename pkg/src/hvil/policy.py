"""The generative hierarchical policy and its call-stack execution semantics.

Each procedure is a small MLP head over (one-hot step counter, observation)
emitting a distribution over: the sub-procedures it may call, every control
action, and the termination marker. Execution walks a call-stack: calling
pushes a frame, terminating pops one, and the episode ends when the root
pops, which emits the termination action.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .callgraph import CallGraph, CallGraphError
from .nets import Distribution, StoreView, SupportLayout, full_distribution, init_mlp, mlp_forward
from .tensor import Tensor, no_grad
from .trace import TERMINATE, Trace

END = ("end", -1)
EPISODE_END = "episode_end"

TAU_MAX_DEFAULT = 20


def call_label(h: int) -> tuple:
    return ("call", h)


def act_label(a: int) -> tuple:
    return ("act", a)


def support_layout(graph: CallGraph, h: int, n_actions: int) -> SupportLayout:
    labels = [("call", c) for c in graph.children[h]]
    labels += [("act", a) for a in range(n_actions)]
    labels.append(END)
    return SupportLayout(labels)


def php_step(stack: list[tuple[int, int]], u: tuple, graph: CallGraph):
    """One stack-machine step; returns (new stack, emitted).

    emitted is None (internal call/return), an int control action, or
    EPISODE_END when the root pops and the episode terminates.
    """
    if not stack:
        raise ValueError("php_step on an empty stack")
    h, tau = stack[-1]
    kind, value = u
    if kind == "end":
        new_stack = stack[:-1]
        if not new_stack:
            return new_stack, EPISODE_END
        return new_stack, None
    if kind == "act":
        return stack[:-1] + [(h, tau + 1)], value
    if kind == "call":
        if value not in graph.children[h]:
            raise CallGraphError(
                f"procedure {graph.names[h]!r} may not call {graph.names[value]!r}"
            )
        return stack[:-1] + [(h, tau + 1), (value, 0)], None
    raise ValueError(f"bad step choice {u!r}")


def replay_choices(graph: CallGraph, choices: list[tuple]) -> list[int]:
    """Run the stack machine over a full choice sequence; emitted actions.

    The returned list includes the final TERMINATE emitted by the root pop.
    Raises if the sequence leaves the stack non-empty or steps past the end.
    """
    stack = [(graph.ROOT, 0)]
    actions = []
    ended = False
    for u in choices:
        if ended:
            raise ValueError("choices continue past episode end")
        stack, emitted = php_step(stack, u, graph)
        if emitted == EPISODE_END:
            actions.append(TERMINATE)
            ended = True
        elif emitted is not None:
            actions.append(emitted)
    if not ended:
        raise ValueError("choice sequence ends mid-episode")
    return actions


@dataclass
class LatentStep:
    t: int
    h: int
    tau: int
    u: tuple
    log_q: Tensor | None
    kl: Tensor | None
    entropy: Tensor | None = None
    log_p: Tensor | None = None


@dataclass
class LatentPath:
    steps: list[LatentStep]

    def choices(self) -> list[tuple]:
        return [s.u for s in self.steps]

    def groups(self) -> dict[int, list[int]]:
        """Step indices per time step (the I_t grouping)."""
        out: dict[int, list[int]] = {}
        for i, s in enumerate(self.steps):
            out.setdefault(s.t, []).append(i)
        return out

    def kl_total(self) -> float:
        return float(sum(s.kl.item() for s in self.steps))


class PhpPolicy:
    """Per-procedure generative heads p(u | h, tau, o) with full support."""

    def __init__(
        self,
        view: StoreView,
        graph: CallGraph,
        obs_width: int,
        n_actions: int,
        tau_max: int = TAU_MAX_DEFAULT,
    ):
        self.view = view
        self.graph = graph
        self.obs_width = obs_width
        self.n_actions = n_actions
        self.tau_max = tau_max
        self.layouts = [support_layout(graph, h, n_actions) for h in range(graph.n_procedures)]
        self._tau_eye = np.eye(tau_max + 1)

    @classmethod
    def build(
        cls,
        view: StoreView,
        rng: np.random.Generator,
        graph: CallGraph,
        obs_width: int,
        n_actions: int,
        hidden: int,
        tau_max: int = TAU_MAX_DEFAULT,
    ) -> "PhpPolicy":
        policy = cls(view, graph, obs_width, n_actions, tau_max)
        n_in = (tau_max + 1) + obs_width
        for h in range(graph.n_procedures):
            init_mlp(view.view(f"h{h}"), rng, [n_in, hidden, len(policy.layouts[h])])
        return policy

    def head_input(self, tau: int, obs: np.ndarray) -> Tensor:
        tau_onehot = self._tau_eye[min(tau, self.tau_max)]
        return Tensor(np.concatenate([tau_onehot, obs]))

    def step_logits(self, h: int, tau: int, obs: np.ndarray) -> Tensor:
        return mlp_forward(self.view.view(f"h{h}"), self.head_input(tau, obs))

    def step_dist(self, h: int, tau: int, obs: np.ndarray) -> Distribution:
        return full_distribution(self.step_logits(h, tau, obs), self.layouts[h])


def trace_log_prob(policy: PhpPolicy, trace: Trace, path: LatentPath) -> Tensor:
    """log p(z, x) up to the environment constant: sum of step log-probs.

    The path must replay to the trace's exact action sequence.
    """
    if replay_choices(policy.graph, path.choices()) != trace.actions:
        raise ValueError("latent path does not replay to the trace")
    total = None
    for s in path.steps:
        term = policy.step_dist(s.h, s.tau, trace.observations[s.t]).log_prob(s.u)
        total = term if total is None else total + term
    return total


@dataclass
class RolloutResult:
    status: str  # ok | degenerate | diverged | crash
    actions: list[int]
    trace: Trace | None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def rollout(
    policy: PhpPolicy,
    env,
    mode: str = "argmax",
    step_cap: int = 400,
    rng: np.random.Generator | None = None,
) -> RolloutResult:
    """Free-running execution of the policy against an environment.

    Runs until the root pops (episode end), the PHP step budget is exhausted
    (diverged), or the environment crashes. A rollout that terminates without
    taking any action violates the trace contract and is flagged degenerate.
    """
    from .envs import EnvCrash

    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    with no_grad():
        obs = env.reset()
        observations = [obs]
        actions: list[int] = []
        stack = [(policy.graph.ROOT, 0)]
        for _ in range(step_cap):
            h, tau = stack[-1]
            dist = policy.step_dist(h, tau, obs)
            u = dist.sample(rng) if mode == "sample" else dist.argmax()
            stack, emitted = php_step(stack, u, policy.graph)
            if emitted == EPISODE_END:
                actions.append(TERMINATE)
                if len(actions) < 2:
                    return RolloutResult("degenerate", actions, None)
                trace = Trace(observations, actions).validate()
                return RolloutResult("ok", actions, trace)
            if emitted is not None:
                actions.append(emitted)
                try:
                    obs = env.step(emitted)
                except EnvCrash:
                    return RolloutResult("crash", actions, None)
                observations.append(obs)
        return RolloutResult("diverged", actions, None)
