"""Parameter storage, neural building blocks, Adam, and checkpoints.

All networks are built from the same few pieces: fan-in uniform linear layers,
single-hidden-layer MLP heads, and (bi)directional LSTM encoders with gates
ordered (input, forget, cell, output) and a +1 forget-gate bias.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    affine,
    concat,
    entropy_from_logps,
    kl_from_logps,
    masked_log_softmax,
    mul,
    relu,
    sigmoid,
    slice_,
    tanh,
)

CHECKPOINT_MAGIC = b"PHPV1"


class OptimizerError(RuntimeError):
    """Non-finite gradient; names the offending parameter path."""


class CheckpointError(ValueError):
    pass


class ParameterStore:
    """Named map from parameter path to trainable Tensor, plus Adam state.

    Paths are slash-separated (e.g. "gen/h3/mlp/w1"). Insertion order is
    deterministic (builders create parameters in a fixed order) and is the
    serialization order, which makes save -> load -> save byte-identical.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_t: int = 0

    def create(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.adam_m[name] = np.zeros_like(t.values)
        self.adam_v[name] = np.zeros_like(t.values)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def view(self, prefix: str) -> "StoreView":
        return StoreView(self, prefix)

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        return float(np.sqrt(total))

    # -- checkpoint format: flat binary records ------------------------------
    # magic "PHPV1", then per-parameter records (u32 name length, name bytes,
    # u32 rank, u64 extents, float64 little-endian payload), then Adam moments
    # under "<name>/m" and "<name>/v", then the step counter as "adam/step".

    def save(self, path):
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            for name, t in self.params.items():
                _write_record(f, name, t.values)
            for name in self.params:
                _write_record(f, name + "/m", self.adam_m[name])
                _write_record(f, name + "/v", self.adam_v[name])
            _write_record(f, "adam/step", np.float64(self.adam_t))

    @classmethod
    def load(cls, path) -> "ParameterStore":
        store = cls()
        moments: dict[str, np.ndarray] = {}
        with open(path, "rb") as f:
            magic = f.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"bad checkpoint magic {magic!r}")
            while True:
                rec = _read_record(f)
                if rec is None:
                    break
                name, values = rec
                if name == "adam/step":
                    store.adam_t = int(values)
                elif name.endswith("/m") or name.endswith("/v"):
                    moments[name] = values
                else:
                    store.create(name, values)
        for name in store.params:
            if name + "/m" in moments:
                store.adam_m[name] = moments[name + "/m"]
            if name + "/v" in moments:
                store.adam_v[name] = moments[name + "/v"]
        return store


def _write_record(f, name: str, values: np.ndarray):
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    arr = np.asarray(values, dtype=np.float64)
    f.write(struct.pack("<I", arr.ndim))
    for ext in arr.shape:
        f.write(struct.pack("<Q", ext))
    f.write(arr.astype("<f8").tobytes())


def _read_record(f):
    head = f.read(4)
    if not head:
        return None
    (nlen,) = struct.unpack("<I", head)
    name = f.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = f.read(count * 8)
    if len(payload) != count * 8:
        raise CheckpointError(f"truncated payload for {name!r}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return name, values


class StoreView:
    """A named slice of a ParameterStore; resolves relative parameter paths."""

    def __init__(self, store: ParameterStore, prefix: str):
        self.store = store
        self.prefix = prefix.rstrip("/")

    def full(self, name: str) -> str:
        return f"{self.prefix}/{name}" if self.prefix else name

    def create(self, name: str, values: np.ndarray) -> Tensor:
        return self.store.create(self.full(name), values)

    def __getitem__(self, name: str) -> Tensor:
        return self.store.params[self.full(name)]

    def __contains__(self, name: str) -> bool:
        return self.full(name) in self.store.params

    def view(self, prefix: str) -> "StoreView":
        return StoreView(self.store, self.full(prefix))


def adam_step(
    store: ParameterStore,
    learning_rate: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    epsilon: float = 1e-8,
    weight_decay: float = 0.0,
):
    """One Adam step with decoupled weight decay; zeroes gradients afterwards.

    Parameters without a populated gradient are treated as having zero
    gradient (their moments still decay), so procedures untouched by a batch
    stay consistent with the step counter.
    """
    b1, b2 = betas
    store.adam_t += 1
    t = store.adam_t
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.values)
        elif not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient in {name!r}")
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay:
            p.values -= learning_rate * weight_decay * p.values
        p.values -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + epsilon)
        p.grad = None


# ---------------------------------------------------------------------------
# layer initialization


def _fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape)


def init_linear(view: StoreView, rng: np.random.Generator, n_in: int, n_out: int, name: str = ""):
    pre = f"{name}/" if name else ""
    view.create(pre + "w", _fan_in_uniform(rng, (n_out, n_in), n_in))
    view.create(pre + "b", _fan_in_uniform(rng, (n_out,), n_in))


def linear_forward(view: StoreView, x: Tensor, name: str = "") -> Tensor:
    pre = f"{name}/" if name else ""
    return affine(view[pre + "w"], x, view[pre + "b"])


def init_mlp(view: StoreView, rng: np.random.Generator, sizes: list[int]):
    """Fully-connected net with ReLU between layers; sizes = [in, hidden..., out]."""
    for i in range(len(sizes) - 1):
        init_linear(view, rng, sizes[i], sizes[i + 1], name=f"l{i}")


def mlp_forward(view: StoreView, x: Tensor) -> Tensor:
    h = x
    i = 0
    while f"l{i}/w" in view:
        if i > 0:
            h = relu(h)
        h = linear_forward(view, h, name=f"l{i}")
        i += 1
    if i == 0:
        raise ValueError(f"no linear layers under {view.prefix!r}")
    return h


def init_lstm(view: StoreView, rng: np.random.Generator, n_in: int, n_hidden: int):
    """Single LSTM cell; fused weight (4H, in+H), gates (input, forget, cell, output)."""
    fan_in = n_in + n_hidden
    view.create("w", _fan_in_uniform(rng, (4 * n_hidden, fan_in), fan_in))
    b = _fan_in_uniform(rng, (4 * n_hidden,), fan_in)
    b[n_hidden : 2 * n_hidden] += 1.0  # forget-gate bias
    view.create("b", b)


def lstm_cell(view: StoreView, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    nh = h.values.shape[0]
    z = affine(view["w"], concat([x, h]), view["b"])
    i = sigmoid(slice_(z, 0, nh))
    f = sigmoid(slice_(z, nh, 2 * nh))
    g = tanh(slice_(z, 2 * nh, 3 * nh))
    o = sigmoid(slice_(z, 3 * nh, 4 * nh))
    c_new = mul(f, c) + mul(i, g)
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_forward(view: StoreView, sequence: list[Tensor], n_hidden: int) -> list[Tensor]:
    """Run a unidirectional LSTM; returns the hidden state at every position."""
    h = Tensor(np.zeros(n_hidden))
    c = Tensor(np.zeros(n_hidden))
    outputs = []
    for x in sequence:
        h, c = lstm_cell(view, x, h, c)
        outputs.append(h)
    return outputs


def init_bilstm(view: StoreView, rng: np.random.Generator, n_in: int, n_hidden: int):
    init_lstm(view.view("fwd"), rng, n_in, n_hidden)
    init_lstm(view.view("bwd"), rng, n_in, n_hidden)


def bilstm_forward(view: StoreView, sequence: list[Tensor], n_hidden: int) -> list[Tensor]:
    """Per-position contexts: forward state at t concatenated with backward state at t."""
    if not sequence:
        raise ValueError("bilstm_forward needs a nonempty sequence")
    fwd = lstm_forward(view.view("fwd"), sequence, n_hidden)
    bwd = lstm_forward(view.view("bwd"), sequence[::-1], n_hidden)[::-1]
    return [concat([f, b]) for f, b in zip(fwd, bwd)]


# ---------------------------------------------------------------------------
# distributions over finite supports


class SupportLayout:
    """Fixed ordered support of a categorical head; shared across steps."""

    __slots__ = ("labels", "index")

    def __init__(self, labels):
        self.labels = tuple(labels)
        self.index = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def full_mask(self) -> np.ndarray:
        return np.ones(len(self.labels), dtype=bool)


@dataclass
class Distribution:
    """Log-probabilities over a finite, labelled support (masked entries -inf)."""

    log_probs: Tensor
    layout: SupportLayout
    mask: np.ndarray

    def probs(self) -> np.ndarray:
        p = np.zeros(len(self.layout))
        p[self.mask] = np.exp(self.log_probs.values[self.mask])
        return p

    def log_prob(self, label) -> Tensor:
        from .tensor import pick

        return pick(self.log_probs, self.layout.index[label])

    def sample(self, rng: np.random.Generator):
        idx = np.flatnonzero(self.mask)
        p = np.exp(self.log_probs.values[idx])
        p /= p.sum()
        r = rng.random()
        return self.layout.labels[idx[np.searchsorted(np.cumsum(p), r)]]

    def argmax(self):
        return self.layout.labels[int(np.argmax(self.log_probs.values))]

    def entropy(self) -> Tensor:
        return entropy_from_logps(self.log_probs, self.mask)


def masked_distribution(logits: Tensor, mask: np.ndarray, layout: SupportLayout) -> Distribution:
    return Distribution(masked_log_softmax(logits, mask), layout, np.asarray(mask, dtype=bool))


def full_distribution(logits: Tensor, layout: SupportLayout) -> Distribution:
    mask = layout.full_mask()
    return Distribution(masked_log_softmax(logits, mask), layout, mask)


def analytic_kl(q: Distribution, p: Distribution) -> Tensor:
    """Exhaustive sum q(u)(log q(u) - log p(u)) over q's support; differentiable in both."""
    if q.layout.labels != p.layout.labels:
        raise ValueError("KL between distributions with different supports")
    return kl_from_logps(q.log_probs, p.log_probs, q.mask)
