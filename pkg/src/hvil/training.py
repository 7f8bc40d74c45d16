"""Variational training of hierarchical policies from demonstration traces.

One gradient step: sample a batch of traces, sample a latent call path per
trace from the masked posterior, and minimize the per-step analytic KL sum
plus a score-function term carrying credit to earlier sampled choices
(Rao-Blackwellized: each KL term multiplies only the log-probabilities of the
choices it actually depends on). An entropy bonus on the inference heads,
decayed on a schedule, discourages early collapse onto a flat hierarchy.

Also houses the exact enumeration oracles (log-likelihood and ELBO over all
consistent latent paths) and the estimator variance report used to verify
the surrogate's statistical properties.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .callgraph import CallGraph
from .nets import ParameterStore, adam_step, analytic_kl
from .policy import EPISODE_END, LatentPath, PhpPolicy, php_step
from .posterior import PhpPosterior, consistency_mask, sample_latent
from .tensor import Tensor, backward, mean_of, no_grad
from .trace import Trace

# re-exported for callers that work with distributions directly
__all__ = [
    "TrainConfig",
    "TrainMetrics",
    "HvilModel",
    "build_hvil_model",
    "analytic_kl",
    "entropy_weight_at",
    "hvil_surrogate",
    "train",
    "train_baseline",
    "exact_log_likelihood",
    "exact_elbo",
    "elbo_sample_mean",
    "estimator_variance_report",
]


class TrainingDiverged(RuntimeError):
    pass


class EnumerationBudgetError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 20000
    batch_size: int = 10
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    weight_decay: float = 1e-3
    entropy_weight_initial: float = 1.0
    entropy_decay_factor: float = 0.7
    entropy_decay_interval: int = 5000
    tau_max: int = 20
    step_cap_factor: int = 8
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.entropy_decay_factor <= 1.0:
            raise ValueError("entropy_decay_factor must be in (0, 1]")


METRICS_HEADER = ("step", "elbo", "kl_mean", "entropy_w", "grad_norm", "seconds")


@dataclass
class TrainMetrics:
    rows: list[tuple] = field(default_factory=list)

    def append(self, step, elbo, kl_mean, entropy_w, grad_norm, seconds):
        self.rows.append((step, elbo, kl_mean, entropy_w, grad_norm, seconds))

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRICS_HEADER)
            w.writerows(self.rows)

    def column(self, name: str) -> list:
        i = METRICS_HEADER.index(name)
        return [r[i] for r in self.rows]


def entropy_weight_at(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.entropy_weight_initial * cfg.entropy_decay_factor ** (
        step // cfg.entropy_decay_interval
    )


@dataclass
class HvilModel:
    graph: CallGraph
    policy: PhpPolicy
    posterior: PhpPosterior
    store: ParameterStore


def build_hvil_model(
    graph: CallGraph,
    obs_width: int,
    n_actions: int,
    hidden: int,
    seed: int = 0,
    ctx_hidden: int = 32,
    tau_max: int = 20,
) -> HvilModel:
    store = ParameterStore()
    rng = np.random.default_rng(seed)
    policy = PhpPolicy.build(
        store.view("gen"), rng, graph, obs_width, n_actions, hidden, tau_max
    )
    posterior = PhpPosterior.build(
        store.view("inf"), rng, graph, obs_width, n_actions, hidden, ctx_hidden, tau_max
    )
    return HvilModel(graph, policy, posterior, store)


def hvil_surrogate(
    model: HvilModel,
    trace: Trace,
    entropy_weight: float,
    rng: np.random.Generator | None,
    forced: list[tuple] | None = None,
) -> tuple[Tensor, LatentPath, dict]:
    """Single-trace surrogate loss whose gradient is the Rao-Blackwellized estimator.

    loss = sum_i [ D_i + detach(D_i) * sum_{j<i} log q(u_j) ]
           - entropy_weight * sum_i H(q_i)

    Minimizing it ascends the ELBO -sum_i E[D_i]; the detached KL value times
    the running score gives exactly D_i * grad log q(u_{<i}) on backward.
    """
    path = sample_latent(
        model.policy,
        model.posterior,
        trace,
        rng,
        forced=forced,
        want_entropy=entropy_weight != 0.0,
    )
    loss = None
    score_acc = None  # sum of log q(u_j) for j < current step
    entropy_total = None
    kl_sum = 0.0
    entropy_sum = 0.0
    for s in path.steps:
        term = s.kl if score_acc is None else s.kl + s.kl.detach() * score_acc
        loss = term if loss is None else loss + term
        score_acc = s.log_q if score_acc is None else score_acc + s.log_q
        kl_sum += s.kl.item()
        if s.entropy is not None:
            entropy_total = s.entropy if entropy_total is None else entropy_total + s.entropy
            entropy_sum += s.entropy.item()
    if entropy_total is not None:
        loss = loss + entropy_total * (-entropy_weight)
    stats = {"n_steps": len(path.steps), "kl_sum": kl_sum, "entropy_sum": entropy_sum}
    return loss, path, stats


def train(
    model: HvilModel,
    traces: list[Trace],
    cfg: TrainConfig,
    metrics_path=None,
    progress=None,
) -> TrainMetrics:
    """HVIL optimization: joint Adam updates of generative and inference parameters.

    Batches are drawn with replacement; everything is deterministic given
    cfg.seed (wall-clock column aside).
    """
    if not traces:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    metrics = TrainMetrics()
    stream = open(metrics_path, "w", newline="") if metrics_path else None
    writer = None
    if stream:
        writer = csv.writer(stream)
        writer.writerow(METRICS_HEADER)
    t0 = time.perf_counter()
    try:
        for step in range(cfg.total_steps):
            w = entropy_weight_at(step, cfg)
            idx = rng.integers(0, len(traces), size=cfg.batch_size)
            losses = []
            elbos = []
            kl_total = 0.0
            steps_total = 0
            for i in idx:
                loss_i, _, stats = hvil_surrogate(model, traces[i], w, rng)
                losses.append(loss_i)
                elbos.append(-stats["kl_sum"])
                kl_total += stats["kl_sum"]
                steps_total += stats["n_steps"]
            loss = mean_of(losses)
            if not np.isfinite(loss.values):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            backward(loss)
            grad_norm = model.store.grad_norm()
            adam_step(
                model.store,
                cfg.learning_rate,
                cfg.betas,
                cfg.epsilon,
                cfg.weight_decay,
            )
            if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
                row = (
                    step,
                    float(np.mean(elbos)),
                    kl_total / max(steps_total, 1),
                    w,
                    grad_norm,
                    time.perf_counter() - t0,
                )
                metrics.rows.append(row)
                if writer:
                    writer.writerow(row)
            if progress and step % 1000 == 0:
                progress(step, metrics)
    finally:
        if stream:
            stream.close()
    return metrics


def train_baseline(
    baseline,
    traces: list[Trace],
    cfg: TrainConfig,
    metrics_path=None,
    progress=None,
) -> TrainMetrics:
    """Cross-entropy training of the flat recurrent baseline (same metrics shape)."""
    if not traces:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    metrics = TrainMetrics()
    stream = open(metrics_path, "w", newline="") if metrics_path else None
    writer = None
    if stream:
        writer = csv.writer(stream)
        writer.writerow(METRICS_HEADER)
    t0 = time.perf_counter()
    try:
        for step in range(cfg.total_steps):
            idx = rng.integers(0, len(traces), size=cfg.batch_size)
            losses = [baseline.nll_loss(traces[i]) for i in idx]
            loss = mean_of(losses)
            if not np.isfinite(loss.values):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            backward(loss)
            grad_norm = baseline.view.store.grad_norm()
            adam_step(
                baseline.view.store,
                cfg.learning_rate,
                cfg.betas,
                cfg.epsilon,
                cfg.weight_decay,
            )
            if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
                row = (
                    step,
                    -loss.item(),
                    0.0,
                    0.0,
                    grad_norm,
                    time.perf_counter() - t0,
                )
                metrics.rows.append(row)
                if writer:
                    writer.writerow(row)
            if progress and step % 1000 == 0:
                progress(step, metrics)
    finally:
        if stream:
            stream.close()
    return metrics


# ---------------------------------------------------------------------------
# exact enumeration oracles (tiny instances only)


def _enumerate_paths(
    policy: PhpPolicy,
    trace: Trace,
    logps_at,
    budget: int,
    min_logp: float,
) -> list[tuple[list[tuple], float]]:
    """Depth-first enumeration of consistent latent paths with mass pruning.

    The path space is countably infinite (a procedure may call a child that
    immediately returns, any number of times), but such churn decays
    geometrically in probability, so prefixes below min_logp are dropped.
    logps_at(h, tau, t, mask) supplies the per-choice log-probabilities that
    define the mass being pruned. Returns (choices, log-prob) pairs.
    """
    from .posterior import action_reachability

    graph = policy.graph
    reach = action_reachability(graph, policy.n_actions)
    horizon = trace.horizon
    results: list[tuple[list[tuple], float]] = []
    visited = 0
    work = [(0, ((graph.ROOT, 0),), (), 0.0)]
    while work:
        t, stack, prefix, logp = work.pop()
        pending = EPISODE_END if t >= horizon else trace.actions[t]
        h, tau = stack[-1]
        layout = policy.layouts[h]
        mask = consistency_mask(layout, len(stack), pending, reach)
        lps = logps_at(h, tau, t, mask)
        for i in np.flatnonzero(mask):
            visited += 1
            if visited > budget:
                raise EnumerationBudgetError(f"more than {budget} enumeration steps")
            lp2 = logp + float(lps[i])
            if lp2 < min_logp:
                continue
            u = layout.labels[i]
            new_stack, emitted = php_step(list(stack), u, graph)
            prefix2 = prefix + (u,)
            if emitted == EPISODE_END:
                results.append((list(prefix2), lp2))
            elif emitted is not None:
                work.append((t + 1, tuple(new_stack), prefix2, lp2))
            else:
                work.append((t, tuple(new_stack), prefix2, lp2))
    return results


def consistent_paths(
    policy: PhpPolicy, trace: Trace, budget: int = 200_000, min_logp: float = -80.0
) -> list[list[tuple]]:
    """Latent choice sequences replaying to the trace, heaviest mass retained."""

    def logps_at(h, tau, t, mask):
        with no_grad():
            dist = policy.step_dist(h, tau, trace.observations[t])
        return dist.log_probs.values

    return [choices for choices, _ in _enumerate_paths(policy, trace, logps_at, budget, min_logp)]


def exact_log_likelihood(
    policy: PhpPolicy, trace: Trace, budget: int = 200_000, min_logp: float = -80.0
) -> float:
    """log sum_z p(z, x) over consistent latent paths (environment constant aside).

    Paths below the prune floor contribute less than exp(min_logp) each and
    vanish at double precision; tiny instances only.
    """

    def logps_at(h, tau, t, mask):
        with no_grad():
            dist = policy.step_dist(h, tau, trace.observations[t])
        return dist.log_probs.values

    paths = _enumerate_paths(policy, trace, logps_at, budget, min_logp)
    if not paths:
        raise EnumerationBudgetError("no path survived the prune floor")
    logps = np.array([lp for _, lp in paths])
    m = logps.max()
    return float(m + np.log(np.exp(logps - m).sum()))


def exact_elbo(
    model: HvilModel, trace: Trace, budget: int = 200_000, min_logq: float = -60.0
) -> Tensor:
    """The ELBO as an exact differentiable expression, summed over latent paths.

    sum_z q(z|x) (log p(z,x) - log q(z|x)), with q built step by step through
    the same masks the sampler uses; paths carrying q-mass below the prune
    floor are dropped. Enumeration only; tiny instances.
    """
    from .tensor import exp as texp

    with no_grad():
        frozen_contexts = model.posterior.context(trace)

    def logps_at(h, tau, t, mask):
        with no_grad():
            dist = model.posterior.step_dist(h, tau, frozen_contexts[t], mask)
        return dist.log_probs.values

    paths = [
        choices
        for choices, _ in _enumerate_paths(model.policy, trace, logps_at, budget, min_logq)
    ]
    contexts = model.posterior.context(trace)
    total = None
    for choices in paths:
        path = sample_latent(
            model.policy,
            model.posterior,
            trace,
            rng=None,
            forced=choices,
            want_log_p=True,
            contexts=contexts,
        )
        log_q = None
        log_p = None
        for s in path.steps:
            log_q = s.log_q if log_q is None else log_q + s.log_q
            log_p = s.log_p if log_p is None else log_p + s.log_p
        term = texp(log_q) * (log_p - log_q)
        total = term if total is None else total + term
    return total


def elbo_sample_mean(
    model: HvilModel, trace: Trace, n_samples: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Monte Carlo ELBO estimate: mean and standard error of the sampled score."""
    values = np.empty(n_samples)
    with no_grad():
        contexts = model.posterior.context(trace)
        for k in range(n_samples):
            path = sample_latent(
                model.policy,
                model.posterior,
                trace,
                rng,
                want_log_p=True,
                contexts=contexts,
            )
            values[k] = sum(s.log_p.item() - s.log_q.item() for s in path.steps)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(n_samples))


def _flat_grads(store: ParameterStore) -> np.ndarray:
    chunks = []
    for name in store.names():
        p = store.params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        chunks.append(np.ravel(g))
    return np.concatenate(chunks) if chunks else np.zeros(0)


def surrogate_gradient(
    model: HvilModel,
    trace: Trace,
    rng: np.random.Generator | None,
    forced: list[tuple] | None = None,
    entropy_weight: float = 0.0,
) -> np.ndarray:
    """One sampled Rao-Blackwellized estimate of the ELBO gradient (flat vector)."""
    loss, _, _ = hvil_surrogate(model, trace, entropy_weight, rng, forced=forced)
    backward(loss)
    g = -_flat_grads(model.store)  # loss descends, ELBO ascends
    model.store.zero_grads()
    return g


def naive_score_gradient(
    model: HvilModel, trace: Trace, forced: list[tuple]
) -> np.ndarray:
    """One naive full-score estimate of the ELBO gradient on a given path.

    Uses the sampled log-ratio f = log p(z,x) - log q(z|x) and the full-path
    score: grad f + f * grad log q(z|x).
    """
    path = sample_latent(
        model.policy, model.posterior, trace, rng=None, forced=forced, want_log_p=True
    )
    log_q = None
    log_p = None
    for s in path.steps:
        log_q = s.log_q if log_q is None else log_q + s.log_q
        log_p = s.log_p if log_p is None else log_p + s.log_p
    f = log_p - log_q
    objective = f + f.detach() * log_q
    backward(objective)
    g = _flat_grads(model.store)
    model.store.zero_grads()
    return g


@dataclass
class VarianceReport:
    n_samples: int
    rb_variance_mean: float
    naive_variance_mean: float
    rb_grad_mean: np.ndarray
    naive_grad_mean: np.ndarray

    @property
    def reduced(self) -> bool:
        return self.rb_variance_mean <= self.naive_variance_mean


def estimator_variance_report(
    model: HvilModel, trace: Trace, n_samples: int, rng: np.random.Generator
) -> VarianceReport:
    """Empirical per-coordinate variance of the two gradient estimators.

    Common random numbers: each sampled path is scored by both estimators.
    """
    rb = []
    naive = []
    for _ in range(n_samples):
        path = sample_latent(model.policy, model.posterior, trace, rng)
        choices = path.choices()
        model.store.zero_grads()
        rb.append(surrogate_gradient(model, trace, rng=None, forced=choices))
        naive.append(naive_score_gradient(model, trace, forced=choices))
    rb = np.stack(rb)
    naive = np.stack(naive)
    return VarianceReport(
        n_samples=n_samples,
        rb_variance_mean=float(rb.var(axis=0, ddof=1).mean()),
        naive_variance_mean=float(naive.var(axis=0, ddof=1).mean()),
        rb_grad_mean=rb.mean(axis=0),
        naive_grad_mean=naive.mean(axis=0),
    )
