"""Reverse-mode automatic differentiation over small dense float64 tensors.

Everything is rank <= 2 and float64: the models here are tiny, and double
precision keeps gradient checks against finite differences tight. Graph
recording can be switched off with `no_grad()` for rollouts and evaluation,
which skips all bookkeeping.
"""
from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (rollouts, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim > 2:
            raise ValueError(f"rank {self.values.ndim} tensor not supported (max 2)")
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        """Same values, cut from the gradient graph."""
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"


def _result(values: np.ndarray, parents: tuple, bwd) -> Tensor:
    """Wrap an op result, recording the graph edge only when it matters."""
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _acc(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64)
        else:
            t.grad += g


def backward(root: Tensor):
    """Accumulate d(root)/d(p) into .grad of every reachable requires_grad tensor.

    The root must be a scalar. Repeated calls keep accumulating; callers zero
    gradients explicitly (the optimizer does this after each step).
    """
    if root.values.shape != ():
        raise ValueError(f"backward needs a scalar root, got shape {root.values.shape}")
    if not root.requires_grad:
        return
    # Iterative topological order (graphs can be tens of thousands of nodes deep).
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    _acc(root, np.ones((), dtype=np.float64))
    for node in reversed(topo):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)


def detach(t: Tensor) -> Tensor:
    return t.detach()


def constant(values) -> Tensor:
    return Tensor(values)


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.float64(value), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise / scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g, a=a, b=b):
        _acc(a, g)
        _acc(b, g)

    return _result(a.values + b.values, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g, a=a, b=b):
        _acc(a, g)
        _acc(b, -g)

    return _result(a.values - b.values, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g, a=a, b=b):
        _acc(a, g * b.values)
        _acc(b, g * a.values)

    return _result(a.values * b.values, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g, a=a, c=c):
        _acc(a, g * c)

    return _result(a.values * c, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_values = np.exp(a.values)

    def bwd(g, a=a, out_values=out_values):
        _acc(a, g * out_values)

    return _result(out_values, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g, a=a):
        _acc(a, g / a.values)

    return _result(np.log(a.values), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_values = np.tanh(a.values)

    def bwd(g, a=a, out_values=out_values):
        _acc(a, g * (1.0 - out_values * out_values))

    return _result(out_values, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # 0.5*(tanh(x/2)+1) is numerically stable on both tails
    out_values = 0.5 * (np.tanh(0.5 * a.values) + 1.0)

    def bwd(g, a=a, out_values=out_values):
        _acc(a, g * out_values * (1.0 - out_values))

    return _result(out_values, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    keep = a.values > 0.0

    def bwd(g, a=a, keep=keep):
        _acc(a, g * keep)

    return _result(np.where(keep, a.values, 0.0), (a,), bwd)


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""

    def bwd(g, a=a):
        _acc(a, np.full_like(a.values, float(g)))

    return _result(a.values.sum(), (a,), bwd)


def mean_of(parts: list[Tensor]) -> Tensor:
    """Arithmetic mean of scalar tensors (batch loss assembly)."""
    acc = parts[0]
    for p in parts[1:]:
        acc = add(acc, p)
    return scale(acc, 1.0 / len(parts))


# ---------------------------------------------------------------------------
# shape ops (rank-1 plumbing)


def concat(parts: list[Tensor]) -> Tensor:
    values = np.concatenate([p.values for p in parts])
    sizes = [p.values.shape[0] for p in parts]

    def bwd(g, parts=parts, sizes=sizes):
        off = 0
        for p, n in zip(parts, sizes):
            _acc(p, g[off : off + n])
            off += n

    return _result(values, tuple(parts), bwd)


def slice_(a: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g, a=a, start=start, stop=stop):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            full[start:stop] = g
            _acc(a, full)

    return _result(a.values[start:stop].copy(), (a,), bwd)


def pick(a: Tensor, index: int) -> Tensor:
    """One entry of a rank-1 tensor, as a scalar."""

    def bwd(g, a=a, index=index):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            full[index] = g
            _acc(a, full)

    return _result(a.values[index].copy(), (a,), bwd)


def affine(w: Tensor, x: Tensor, b: Tensor) -> Tensor:
    """w @ x + b for rank-2 w, rank-1 x and b. The workhorse of every net here."""
    values = w.values @ x.values + b.values

    def bwd(g, w=w, x=x, b=b):
        if w.requires_grad:
            _acc(w, np.outer(g, x.values))
        if x.requires_grad:
            _acc(x, w.values.T @ g)
        _acc(b, g)

    return _result(values, (w, x, b), bwd)


# ---------------------------------------------------------------------------
# distribution ops (log-space, with support masking)


class InconsistentMaskError(ValueError):
    """No admissible entry remains after masking."""


def masked_log_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Log-softmax normalized over the unmasked entries only.

    Masked entries come out exactly -inf and receive zero gradient; they are
    excluded from the normalizer, so no NaN can leak out of them.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.values.shape:
        raise ValueError(f"mask shape {mask.shape} != logits shape {logits.values.shape}")
    if not mask.any():
        raise InconsistentMaskError("all entries masked")
    ml = logits.values[mask]
    m = ml.max()
    lse = m + np.log(np.exp(ml - m).sum())
    values = np.full_like(logits.values, -np.inf)
    values[mask] = ml - lse

    def bwd(g, logits=logits, mask=mask, values=values):
        if logits.requires_grad:
            gu = g[mask]
            p = np.exp(values[mask])
            full = np.zeros_like(logits.values)
            full[mask] = gu - p * gu.sum()
            _acc(logits, full)

    return _result(values, (logits,), bwd)


def kl_from_logps(q_logp: Tensor, p_logp: Tensor, mask: np.ndarray) -> Tensor:
    """sum_u q(u) * (log q(u) - log p(u)) over the unmasked support.

    q_logp may be -inf at masked entries (they contribute nothing and get no
    gradient); p_logp must be finite on the unmasked support.
    """
    mask = np.asarray(mask, dtype=bool)
    ql = q_logp.values[mask]
    pl = p_logp.values[mask]
    if not np.isfinite(pl).all():
        raise ValueError("q has support where p has none: infinite KL")
    q = np.exp(ql)
    value = np.float64((q * (ql - pl)).sum())

    def bwd(g, q_logp=q_logp, p_logp=p_logp, mask=mask, q=q, ql=ql, pl=pl):
        g = float(g)
        if q_logp.requires_grad:
            full = np.zeros_like(q_logp.values)
            full[mask] = g * (q * (ql - pl) + q)
            _acc(q_logp, full)
        if p_logp.requires_grad:
            full = np.zeros_like(p_logp.values)
            full[mask] = -g * q
            _acc(p_logp, full)

    return _result(value, (q_logp, p_logp), bwd)


def entropy_from_logps(q_logp: Tensor, mask: np.ndarray) -> Tensor:
    """-sum_u q(u) log q(u) over the unmasked support."""
    mask = np.asarray(mask, dtype=bool)
    ql = q_logp.values[mask]
    q = np.exp(ql)
    value = np.float64(-(q * ql).sum())

    def bwd(g, q_logp=q_logp, mask=mask, q=q, ql=ql):
        g = float(g)
        if q_logp.requires_grad:
            full = np.zeros_like(q_logp.values)
            full[mask] = -g * (q * ql + q)
            _acc(q_logp, full)

    return _result(value, (q_logp,), bwd)
