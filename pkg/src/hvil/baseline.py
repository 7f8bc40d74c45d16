"""Flat recurrent baseline policy: MLP -> stacked LSTM -> MLP -> softmax.

Trained by exact cross-entropy on the demonstrated actions (its memory
update is deterministic, so no latent inference is needed). The action space
includes the termination marker so the baseline can end episodes itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import (
    Distribution,
    StoreView,
    SupportLayout,
    full_distribution,
    init_lstm,
    init_mlp,
    lstm_cell,
    mlp_forward,
)
from .tensor import Tensor, no_grad
from .trace import TERMINATE, Trace
from .policy import END, RolloutResult, act_label


class BaselineRnn:
    """Stacked 64-ish-unit LSTM policy over single observations."""

    def __init__(self, view: StoreView, obs_width: int, n_actions: int, n_layers: int, width: int):
        self.view = view
        self.obs_width = obs_width
        self.n_actions = n_actions
        self.n_layers = n_layers
        self.width = width
        self.layout = SupportLayout([act_label(a) for a in range(n_actions)] + [END])

    @classmethod
    def build(
        cls,
        view: StoreView,
        rng: np.random.Generator,
        obs_width: int,
        n_actions: int,
        n_layers: int = 2,
        width: int = 64,
    ) -> "BaselineRnn":
        model = cls(view, obs_width, n_actions, n_layers, width)
        init_mlp(view.view("in"), rng, [obs_width, width, width])
        for i in range(n_layers):
            init_lstm(view.view(f"lstm{i}"), rng, width, width)
        init_mlp(view.view("out"), rng, [width, width, len(model.layout)])
        return model

    def initial_state(self) -> list[tuple[Tensor, Tensor]]:
        zero = lambda: Tensor(np.zeros(self.width))
        return [(zero(), zero()) for _ in range(self.n_layers)]

    def step(self, state, obs: np.ndarray) -> tuple[Distribution, list]:
        x = mlp_forward(self.view.view("in"), Tensor(np.asarray(obs)))
        new_state = []
        for i, (h, c) in enumerate(state):
            h, c = lstm_cell(self.view.view(f"lstm{i}"), x, h, c)
            new_state.append((h, c))
            x = h
        logits = mlp_forward(self.view.view("out"), x)
        return full_distribution(logits, self.layout), new_state

    def label_for(self, action: int) -> tuple:
        return END if action == TERMINATE else act_label(action)

    def nll_loss(self, trace: Trace) -> Tensor:
        """Negative log-likelihood of the demonstrated actions, termination included."""
        state = self.initial_state()
        total = None
        for obs, action in zip(trace.observations, trace.actions):
            dist, state = self.step(state, obs)
            term = dist.log_prob(self.label_for(action))
            total = term if total is None else total + term
        return -total

    def rollout(self, env, mode: str = "argmax", step_cap: int = 400, rng=None) -> RolloutResult:
        from .envs import EnvCrash

        with no_grad():
            obs = env.reset()
            observations = [obs]
            actions: list[int] = []
            state = self.initial_state()
            for _ in range(step_cap):
                dist, state = self.step(state, obs)
                u = dist.sample(rng) if mode == "sample" else dist.argmax()
                if u == END:
                    actions.append(TERMINATE)
                    if len(actions) < 2:
                        return RolloutResult("degenerate", actions, None)
                    trace = Trace(observations, actions).validate()
                    return RolloutResult("ok", actions, trace)
                actions.append(u[1])
                try:
                    obs = env.step(u[1])
                except EnvCrash:
                    return RolloutResult("crash", actions, None)
                observations.append(obs)
            return RolloutResult("diverged", actions, None)
