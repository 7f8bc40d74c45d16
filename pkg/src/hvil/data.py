"""Demonstration dataset generation, persistence, and experiment splits.

Datasets are JSON-lines files, one trace per line, with the termination
action encoded as -1. Karel demonstrations come from rejection sampling of
5-grid batches that must jointly execute crash-free and cover every
statement and branch of the program.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .envs import bubble_teacher, acausal_teacher, BUBBLE_VALUES
from .karel_lang import (
    BudgetExceededError,
    Program,
    coverage_accept,
    empty_coverage,
    interpret,
)
from .karel_world import KarelWorld
from .trace import Trace, TraceError, TraceMeta
from .envs import EnvCrash


class DatasetError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class Dataset:
    env: str
    traces: list[Trace] = field(default_factory=list)
    meta: list[TraceMeta] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.traces)

    def subsample(self, n: int, rng: np.random.Generator) -> "Dataset":
        if n > len(self.traces):
            raise DatasetError(f"cannot subsample {n} from {len(self.traces)} traces")
        idx = rng.choice(len(self.traces), size=n, replace=False)
        return Dataset(
            self.env,
            [self.traces[i] for i in idx],
            [self.meta[i] for i in idx],
            dict(self.config),
        )

    def take(self, indices) -> "Dataset":
        return Dataset(
            self.env,
            [self.traces[i] for i in indices],
            [self.meta[i] for i in indices],
            dict(self.config),
        )


def save_dataset(dataset: Dataset, path):
    with open(path, "w") as f:
        for trace, meta in zip(dataset.traces, dataset.meta):
            record = {
                "env": dataset.env,
                "obs": [[float(v) for v in o] for o in trace.observations],
                "acts": trace.actions,
                "meta": {"init": meta.init, "seed": meta.seed, "length": meta.length},
            }
            f.write(json.dumps(record, separators=(",", ":")))
            f.write("\n")


def load_dataset(path) -> Dataset:
    dataset = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                trace = Trace(record["obs"], record["acts"]).validate()
                meta = TraceMeta(
                    init=record["meta"]["init"],
                    seed=int(record["meta"]["seed"]),
                    length=int(record["meta"]["length"]),
                )
                env = record["env"]
            except (KeyError, ValueError, TraceError) as e:
                raise DatasetError(f"{path}, line {lineno}: {e}") from None
            if dataset is None:
                dataset = Dataset(env)
            elif dataset.env != env:
                raise DatasetError(f"{path}, line {lineno}: env {env!r} != {dataset.env!r}")
            dataset.traces.append(trace)
            dataset.meta.append(meta)
    if dataset is None:
        raise DatasetError(f"{path}: empty dataset")
    return dataset


# ---------------------------------------------------------------------------
# grid sampling (Karel)


@dataclass
class GridSamplerConfig:
    min_size: int = 2
    max_size: int = 16
    wall_p_mean: float = 0.1
    wall_p_std: float = 0.05
    marker_p_mean: float = 0.2
    marker_p_std: float = 0.1
    marker_geometric_p: float = 0.5

    def __post_init__(self):
        if not 2 <= self.min_size <= self.max_size <= 16:
            raise ValueError("grid sizes must satisfy 2 <= min <= max <= 16")
        if not 0.0 < self.marker_geometric_p <= 1.0:
            raise ValueError("geometric parameter must be in (0, 1]")

    def as_dict(self) -> dict:
        return {
            "min_size": self.min_size,
            "max_size": self.max_size,
            "wall_p_mean": self.wall_p_mean,
            "wall_p_std": self.wall_p_std,
            "marker_p_mean": self.marker_p_mean,
            "marker_p_std": self.marker_p_std,
            "marker_geometric_p": self.marker_geometric_p,
        }


def sample_grid(cfg: GridSamplerConfig, rng: np.random.Generator) -> KarelWorld:
    """One random world: size, per-grid Bernoulli parameters, cells, agent.

    Walls and markers are mutually exclusive per cell; marker counts follow a
    geometric law clamped to the 10-marker cap. Grids with no free cell are
    resampled a bounded number of times.
    """
    for _ in range(100):
        m = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        n = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        wall_p = float(np.clip(rng.normal(cfg.wall_p_mean, cfg.wall_p_std), 0.0, 1.0))
        marker_p = float(np.clip(rng.normal(cfg.marker_p_mean, cfg.marker_p_std), 0.0, 1.0))
        walls = rng.random((m, n)) < wall_p
        has_marker = (rng.random((m, n)) < marker_p) & ~walls
        counts = np.minimum(rng.geometric(cfg.marker_geometric_p, size=(m, n)), 10)
        markers = np.where(has_marker, counts, 0)
        free = ~walls
        if not free.any():
            continue
        flat = np.flatnonzero(free)
        cell = int(flat[rng.integers(len(flat))])
        direction = int(rng.integers(4))
        return KarelWorld(walls, markers, cell // n, cell % n, direction)
    raise GenerationError("could not sample a grid with a free cell; lower wall_p_mean")


def generate_karel_dataset(
    program: Program,
    n_demos: int,
    cfg: GridSamplerConfig,
    seed: int,
    step_budget: int = 10_000,
    max_batches: int = 200_000,
) -> Dataset:
    """Rejection-sample 5-grid batches until n_demos demonstrations accumulate.

    A batch is accepted only if all five executions finish without crashing
    or blowing the step budget AND their joint coverage exercises every
    statement and both arms of every branch. Per-batch RNG streams come from
    (seed, batch index), so output is reproducible and independent of how
    batches might be distributed over workers.
    """
    dataset = Dataset("karel", config={"seed": seed, "sampler": cfg.as_dict()})
    accepted = 0
    for batch_idx in range(max_batches):
        if len(dataset.traces) >= n_demos:
            break
        rng = np.random.default_rng([seed, batch_idx])
        grids = [sample_grid(cfg, rng) for _ in range(5)]
        results = []
        try:
            for grid in grids:
                results.append((grid, *interpret(program, grid, step_budget)))
        except (EnvCrash, BudgetExceededError):
            continue
        joint = empty_coverage(program)
        for _, _, report in results:
            joint.update(report)
        if not coverage_accept(joint, program):
            continue
        accepted += 1
        for grid, trace, _ in results:
            dataset.traces.append(trace)
            dataset.meta.append(
                TraceMeta(init=grid.to_text(), seed=batch_idx, length=trace.horizon)
            )
        if batch_idx >= 2000 and accepted == 0:
            break
    if len(dataset.traces) < n_demos:
        rate = accepted / max(batch_idx + 1, 1)
        raise GenerationError(
            f"karel acceptance rate too low ({rate:.2%} over {batch_idx + 1} batches); "
            "adjust the grid sampler configuration"
        )
    dataset.traces = dataset.traces[:n_demos]
    dataset.meta = dataset.meta[:n_demos]
    return dataset


def generate_bubble_dataset(
    n_demos: int,
    seed: int,
    length_range: tuple[int, int] = (2, 10),
    values: int = BUBBLE_VALUES,
) -> Dataset:
    lo, hi = length_range
    if not 1 <= lo <= hi <= 10:
        raise ValueError("length range must be within [1, 10]")
    rng = np.random.default_rng(seed)
    dataset = Dataset(
        "bubble", config={"seed": seed, "length_range": [lo, hi], "values": values}
    )
    for _ in range(n_demos):
        length = int(rng.integers(lo, hi + 1))
        memory = [int(v) for v in rng.integers(0, values, size=length)]
        trace = bubble_teacher(memory)
        dataset.traces.append(trace)
        dataset.meta.append(
            TraceMeta(init=",".join(map(str, memory)), seed=seed, length=trace.horizon)
        )
    return dataset


def generate_acausal_dataset(n_demos: int, noise_p: float, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    dataset = Dataset("acausal", config={"seed": seed, "noise_p": noise_p})
    for _ in range(n_demos):
        digit = int(rng.integers(10))
        env_seed = int(rng.integers(2**31))
        trace = acausal_teacher(digit, noise_p, rng, env_seed)
        dataset.traces.append(trace)
        dataset.meta.append(TraceMeta(init=str(digit), seed=env_seed, length=trace.horizon))
    return dataset


def length_percentile_split(
    dataset: Dataset,
    percentile: int,
    train_n: int,
    test_n: int,
    rng: np.random.Generator,
) -> tuple[Dataset, Dataset]:
    """Split so every test trace is strictly longer than every training trace.

    The threshold is the given percentile of the set of *unique* trace
    lengths; training traces are strictly below it, test traces at or above.
    """
    lengths = [t.horizon for t in dataset.traces]
    uniques = sorted(set(lengths))
    idx = int(len(uniques) * percentile / 100)
    if idx >= len(uniques):
        idx = len(uniques) - 1
    threshold = uniques[idx]
    train_pool = [i for i, L in enumerate(lengths) if L < threshold]
    test_pool = [i for i, L in enumerate(lengths) if L >= threshold]
    if len(train_pool) < train_n:
        raise DatasetError(
            f"only {len(train_pool)} traces shorter than {threshold} (need {train_n})"
        )
    if len(test_pool) < test_n:
        raise DatasetError(
            f"only {len(test_pool)} traces at length >= {threshold} (need {test_n})"
        )
    train_idx = rng.choice(train_pool, size=train_n, replace=False)
    test_idx = rng.choice(test_pool, size=test_n, replace=False)
    return dataset.take(sorted(train_idx)), dataset.take(sorted(test_idx))


# ---------------------------------------------------------------------------
# IDX image/label container (optional ingestion path)


class IdxFormatError(ValueError):
    pass


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def load_idx(path) -> tuple[int, int, int, bytes]:
    """Parse an IDX file bit-exactly: (count, rows, cols, payload bytes).

    Label files (magic 0x801) report rows = cols = 1.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise IdxFormatError("file too short for a magic number")
    magic = int.from_bytes(data[:4], "big")
    if magic == IDX_IMAGES_MAGIC:
        if len(data) < 16:
            raise IdxFormatError("truncated image header")
        count = int.from_bytes(data[4:8], "big")
        rows = int.from_bytes(data[8:12], "big")
        cols = int.from_bytes(data[12:16], "big")
        payload = data[16:]
    elif magic == IDX_LABELS_MAGIC:
        if len(data) < 8:
            raise IdxFormatError("truncated label header")
        count = int.from_bytes(data[4:8], "big")
        rows = cols = 1
        payload = data[8:]
    else:
        raise IdxFormatError(f"bad magic 0x{magic:08x}")
    if len(payload) != count * rows * cols:
        raise IdxFormatError(
            f"payload has {len(payload)} bytes, expected {count * rows * cols}"
        )
    return count, rows, cols, payload
