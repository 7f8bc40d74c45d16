"""Approximate posterior over latent call/termination paths.

A bidirectional LSTM reads the whole trace (observations concatenated with
one-hot actions) into per-time-step context vectors. Per-procedure inference
heads mirror the generative heads but read the context instead of the
observation, and their logits are masked so that only choices consistent
with the demonstrated actions keep support.
"""
from __future__ import annotations

import numpy as np

from .callgraph import CallGraph
from .nets import (
    Distribution,
    StoreView,
    analytic_kl,
    bilstm_forward,
    init_bilstm,
    init_mlp,
    masked_distribution,
    mlp_forward,
)
from .policy import (
    END,
    EPISODE_END,
    LatentPath,
    LatentStep,
    PhpPolicy,
    TAU_MAX_DEFAULT,
    php_step,
    support_layout,
)
from .tensor import Tensor, concat
from .trace import Trace


class TraceInconsistencyError(RuntimeError):
    """The masked sampler ran out of admissible choices (malformed graph/trace)."""


def action_reachability(graph: CallGraph, n_actions: int) -> list[set[int]]:
    """Which control actions each procedure can eventually emit.

    Every procedure's support currently contains every action, so this is the
    full set everywhere; the closure over calls keeps the masking correct if
    supports ever become restricted.
    """
    reach = [set(range(n_actions)) for _ in range(graph.n_procedures)]
    changed = True
    while changed:
        changed = False
        for h in range(graph.n_procedures):
            for c in graph.children[h]:
                if not reach[c] <= reach[h]:
                    reach[h] |= reach[c]
                    changed = True
    return reach


def consistency_mask(layout, stack_depth: int, pending, reach) -> np.ndarray:
    """Admissible choices for the top frame given what the trace requires next.

    pending is the next demonstrated action id, or EPISODE_END once all real
    actions are consumed. Rules: the pending action itself is allowed; a call
    is allowed when the callee can reach the pending action; termination is
    allowed off the root (the caller still owes the action), and on the root
    only when the trace is at its end - at which point it is the only choice,
    forcing the termination cascade.
    """
    mask = np.zeros(len(layout), dtype=bool)
    if pending == EPISODE_END:
        mask[layout.index[END]] = True
        return mask
    for i, (kind, value) in enumerate(layout.labels):
        if kind == "act":
            mask[i] = value == pending
        elif kind == "call":
            mask[i] = pending in reach[value]
        else:
            mask[i] = stack_depth > 1
    if not mask.any():
        raise TraceInconsistencyError(f"no admissible choice for pending {pending!r}")
    return mask


class PhpPosterior:
    """Inference heads q(u | h, tau, b_t) sharing one bidirectional encoder."""

    def __init__(
        self,
        view: StoreView,
        graph: CallGraph,
        obs_width: int,
        n_actions: int,
        ctx_hidden: int = 32,
        tau_max: int = TAU_MAX_DEFAULT,
    ):
        self.view = view
        self.graph = graph
        self.obs_width = obs_width
        self.n_actions = n_actions
        self.ctx_hidden = ctx_hidden
        self.tau_max = tau_max
        self.layouts = [support_layout(graph, h, n_actions) for h in range(graph.n_procedures)]
        self.reach = action_reachability(graph, n_actions)
        self._tau_eye = np.eye(tau_max + 1)
        self._act_eye = np.eye(n_actions + 1)  # termination uses the last slot
        self._mask_cache: dict = {}

    @classmethod
    def build(
        cls,
        view: StoreView,
        rng: np.random.Generator,
        graph: CallGraph,
        obs_width: int,
        n_actions: int,
        hidden: int,
        ctx_hidden: int = 32,
        tau_max: int = TAU_MAX_DEFAULT,
    ) -> "PhpPosterior":
        post = cls(view, graph, obs_width, n_actions, ctx_hidden, tau_max)
        init_bilstm(view.view("rnn"), rng, obs_width + n_actions + 1, ctx_hidden)
        n_in = (tau_max + 1) + 2 * ctx_hidden
        for h in range(graph.n_procedures):
            init_mlp(view.view(f"h{h}"), rng, [n_in, hidden, len(post.layouts[h])])
        return post

    def context(self, trace: Trace) -> list[Tensor]:
        """Posterior context b_t for every time step, conditioned on the whole trace."""
        inputs = []
        for obs, action in zip(trace.observations, trace.actions):
            aid = self.n_actions if action == -1 else action
            inputs.append(Tensor(np.concatenate([obs, self._act_eye[aid]])))
        return bilstm_forward(self.view.view("rnn"), inputs, self.ctx_hidden)

    def step_dist(self, h: int, tau: int, b_t: Tensor, mask: np.ndarray) -> Distribution:
        tau_onehot = Tensor(self._tau_eye[min(tau, self.tau_max)])
        logits = mlp_forward(self.view.view(f"h{h}"), concat([tau_onehot, b_t]))
        return masked_distribution(logits, mask, self.layouts[h])

    def mask_for(self, h: int, stack_depth: int, pending) -> np.ndarray:
        key = (h, stack_depth > 1, pending)
        cached = self._mask_cache.get(key)
        if cached is None:
            cached = consistency_mask(self.layouts[h], stack_depth, pending, self.reach)
            self._mask_cache[key] = cached
        return cached


def sample_latent(
    policy: PhpPolicy,
    posterior: PhpPosterior,
    trace: Trace,
    rng: np.random.Generator | None,
    forced: list[tuple] | None = None,
    want_entropy: bool = False,
    want_log_p: bool = False,
    contexts: list[Tensor] | None = None,
) -> LatentPath:
    """Walk the stack machine sampling each step choice from the masked posterior.

    Records, per step, the sampled choice with its log q, the analytic KL
    against the matching generative distribution, and optionally the masked
    entropy of q and log p of the choice. Passing `forced` replays a known
    choice sequence instead of sampling (same graph, no randomness), which is
    what teacher-forced gradient checks and common-random-number comparisons
    use.
    """
    graph = policy.graph
    if contexts is None:
        contexts = posterior.context(trace)
    horizon = trace.horizon
    stack = [(graph.ROOT, 0)]
    steps: list[LatentStep] = []
    t = 0
    since_action = 0
    # Call-then-terminate churn within one time step is legal and geometrically
    # rare under any q with full masked support; only a genuine hang trips this.
    budget = 1000
    while True:
        pending = EPISODE_END if t >= horizon else trace.actions[t]
        h, tau = stack[-1]
        mask = posterior.mask_for(h, len(stack), pending)
        q = posterior.step_dist(h, tau, contexts[t], mask)
        p = policy.step_dist(h, tau, trace.observations[t])
        if forced is not None:
            u = forced[len(steps)]
            if not mask[q.layout.index[u]]:
                raise TraceInconsistencyError(f"forced choice {u!r} is masked out")
        else:
            u = q.sample(rng)
        steps.append(
            LatentStep(
                t=t,
                h=h,
                tau=tau,
                u=u,
                log_q=q.log_prob(u),
                kl=analytic_kl(q, p),
                entropy=q.entropy() if want_entropy else None,
                log_p=p.log_prob(u) if want_log_p else None,
            )
        )
        stack, emitted = php_step(stack, u, graph)
        if emitted == EPISODE_END:
            break
        if emitted is not None:
            if emitted != trace.actions[t]:
                raise TraceInconsistencyError("mask admitted a wrong action")
            t += 1
            since_action = 0
        else:
            since_action += 1
            if since_action > budget:
                raise TraceInconsistencyError("step budget exceeded within one time step")
    return LatentPath(steps)
