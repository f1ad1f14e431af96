"""Dense float tensors and a reverse-mode gradient tape.

Every differentiable operation here does three things: compute the forward
value with numpy, check the result is finite (training mode), and, when a
tape is active, record a closure mapping the output adjoint to the input
adjoints.  Adjoints are hand-derived per operation; there is no expression
compiler.  Tensors are treated as immutable once constructed, so values can
be shared freely between graph nodes.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

Array = np.ndarray

_FINITE_CHECKS = True
_TAPE_STACK: list["Tape"] = []
_EINSUM_PATHS: dict = {}


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the hard NaN/Inf check run after every op; returns the old value."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


@contextlib.contextmanager
def finite_checks(enabled: bool):
    previous = set_finite_checks(enabled)
    try:
        yield
    finally:
        set_finite_checks(previous)


class Tensor:
    """A dense row-major float array plus autograd metadata.

    Non-float input data is promoted to float64.  `requires_grad` marks
    parameters (leaves); ops propagate the flag to their outputs so the tape
    only records nodes that can reach a parameter.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"


class Tape:
    """Execution-ordered op records; reverse replay produces adjoints.

    Execution order is a topological order of the graph, so one reverse pass
    visits every node exactly once.  A tape belongs to a single training step
    on a single thread.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self._nodes.append((out, tuple(inputs), vjp))

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> dict[Tensor, Array]:
        """Adjoints of a scalar `loss` for every tensor in `params`.

        Parameters that never influenced the loss map to exact zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        adjoint: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._nodes):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            for t, gt in zip(inputs, vjp(g)):
                if gt is None or not t.requires_grad:
                    continue
                prev = adjoint.get(id(t))
                adjoint[id(t)] = gt if prev is None else prev + gt
        return {p: adjoint.get(id(p), np.zeros_like(p.data)) for p in params}


def _check_finite(arr: Array, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def _emit(op: str, out_data: Array, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    _check_finite(out_data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _TAPE_STACK:
        _TAPE_STACK[-1].record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# einsum and friends
# ---------------------------------------------------------------------------

def cached_einsum(subscripts: str, *arrays: Array) -> Array:
    """np.einsum with the contraction path memoized per (subscripts, shapes).

    The path search gets an explicit intermediate-size budget: the default
    budget (the largest input) forbids the cheap contraction orders for the
    trilinear forms at benchmark sizes and silently falls into catastrophic
    paths.
    """
    key = (subscripts, tuple(a.shape for a in arrays))
    path = _EINSUM_PATHS.get(key)
    if path is None:
        budget = max(64_000_000, 4 * max(a.size for a in arrays))
        path = np.einsum_path(subscripts, *arrays, optimize=("optimal", budget))[0]
        _EINSUM_PATHS[key] = path
    return np.einsum(subscripts, *arrays, optimize=path)


def _parse_subscripts(subscripts: str, n_operands: int) -> tuple[list[str], str]:
    if "..." in subscripts:
        raise ShapeError("einsum requires explicit subscripts without ellipsis")
    if "->" not in subscripts:
        raise ShapeError("einsum requires an explicit output subscript")
    lhs, out = subscripts.split("->")
    subs = lhs.split(",")
    if len(subs) != n_operands:
        raise ShapeError(f"einsum got {n_operands} operands for {len(subs)} subscripts")
    for s in subs:
        if len(set(s)) != len(s):
            raise ShapeError(f"repeated index within one operand ({s!r}) is not supported")
    return subs, out


def _einsum_adjoint(subs: list[str], out_sub: str, arrays: list[Array], i: int, g: Array) -> Array:
    target = subs[i]
    others = [(s, a) for j, (s, a) in enumerate(zip(subs, arrays)) if j != i]
    avail = set(out_sub)
    for s, _ in others:
        avail.update(s)
    kept = "".join(ch for ch in target if ch in avail)
    spec = ",".join([out_sub] + [s for s, _ in others]) + "->" + kept
    grad = cached_einsum(spec, g, *[a for _, a in others])
    if kept != target:
        # axes summed only inside this operand: the adjoint broadcasts along them
        expand = tuple(slice(None) if ch in kept else None for ch in target)
        grad = np.broadcast_to(grad[expand], arrays[i].shape)
    return grad


def einsum(subscripts: str, *tensors: Tensor) -> Tensor:
    subs, out_sub = _parse_subscripts(subscripts, len(tensors))
    arrays = [t.data for t in tensors]
    try:
        out = cached_einsum(subscripts, *arrays)
    except ValueError as exc:
        raise ShapeError(f"einsum({subscripts!r}): {exc}") from exc

    def vjp(g: Array):
        return [
            _einsum_adjoint(subs, out_sub, arrays, i, g) if t.requires_grad else None
            for i, t in enumerate(tensors)
        ]

    return _emit(f"einsum({subscripts})", out, tensors, vjp)


_MODE_SUBS = {1: "abc,a->bc", 2: "abc,b->ac", 3: "abc,c->ab"}


def mode_n_mul(t: Tensor, v: Tensor, mode: int) -> Tensor:
    """Contract a rank-3 tensor with a vector along `mode` (1-based).

    The result drops the contracted axis, leaving a rank-2 tensor.
    """
    if t.ndim != 3:
        raise ShapeError(f"mode_n_mul needs a rank-3 tensor, got rank {t.ndim}")
    if mode not in (1, 2, 3):
        raise ShapeError(f"mode must be 1, 2, or 3, got {mode}")
    if v.ndim != 1:
        raise ShapeError(f"mode_n_mul needs a vector, got rank {v.ndim}")
    if t.shape[mode - 1] != v.shape[0]:
        raise ShapeError(
            f"axis {mode} has extent {t.shape[mode - 1]} but the vector has length {v.shape[0]}"
        )
    return einsum(_MODE_SUBS[mode], t, v)


# ---------------------------------------------------------------------------
# elementwise ops (numpy broadcasting allowed; adjoints sum over broadcast axes)
# ---------------------------------------------------------------------------

def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(ax for ax, s in enumerate(shape) if s == 1 and g.shape[ax] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", out, (a, b), vjp)


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", t.data * c, (t,), lambda g: (g * c,))


def neg(t: Tensor) -> Tensor:
    return scale(t, -1.0)


def relu(t: Tensor) -> Tensor:
    out = np.maximum(t.data, 0.0)
    mask = t.data > 0
    return _emit("relu", out, (t,), lambda g: (g * mask,))


def tanh(t: Tensor) -> Tensor:
    out = np.tanh(t.data)
    return _emit("tanh", out, (t,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_values(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(t: Tensor) -> Tensor:
    out = _sigmoid_values(t.data)
    return _emit("sigmoid", out, (t,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    out = t.data.reshape(tuple(shape))
    return _emit("reshape", out, (t,), lambda g: (g.reshape(t.shape),))


def broadcast_to(t: Tensor, shape: Sequence[int]) -> Tensor:
    out = np.broadcast_to(t.data, tuple(shape))
    return _emit("broadcast_to", out, (t,), lambda g: (_unbroadcast(g, t.shape),))


def append_ones(t: Tensor) -> Tensor:
    """[x; 1] along the last axis; keeps the bilinear part of a trilinear form."""
    pad = np.ones(t.shape[:-1] + (1,), dtype=t.data.dtype)
    out = np.concatenate([t.data, pad], axis=-1)
    return _emit("append_ones", out, (t,), lambda g: (g[..., :-1],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    sizes = [a.shape[axis] for a in arrays]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit("concat", out, tuple(tensors), vjp)


def gather_rows(t: Tensor, idx) -> Tensor:
    """Select rows along axis 0; the adjoint scatter-adds (repeats accumulate)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = t.data[idx]

    def vjp(g):
        z = np.zeros_like(t.data)
        np.add.at(z, idx, g)
        return (z,)

    return _emit("gather_rows", out, (t,), vjp)


def sum_all(t: Tensor) -> Tensor:
    out = np.asarray(t.data.sum())
    return _emit("sum_all", out, (t,), lambda g: (np.broadcast_to(g, t.shape),))


def mean_all(t: Tensor) -> Tensor:
    return scale(sum_all(t), 1.0 / t.size)


def dropout(t: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate == 0:
        return t
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(t.shape) >= rate).astype(t.data.dtype)
    factor = 1.0 / (1.0 - rate)
    out = t.data * keep * factor
    return _emit("dropout", out, (t,), lambda g: (g * keep * factor,))


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax (max subtraction) along `axis`."""
    x = t.data
    if x.size == 0:
        raise ShapeError("softmax requires a non-empty input")
    mx = x.max(axis=axis, keepdims=True)
    e = np.exp(x - mx)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _emit("softmax", out, (t,), vjp)


def masked_softmax(t: Tensor, mask: Array, axis: int) -> Tensor:
    """Softmax over positions where `mask` is true; fully-masked slices yield zeros."""
    if mask.shape != t.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match input shape {t.shape}")
    z = np.where(mask, t.data, -np.inf)
    mx = z.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(z - mx), 0.0)
    tot = e.sum(axis=axis, keepdims=True)
    out = e / np.where(tot == 0.0, 1.0, tot)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _emit("masked_softmax", out, (t,), vjp)


def _logsumexp(x: Array, axis: int = -1) -> Array:
    mx = x.max(axis=axis, keepdims=True)
    return np.squeeze(mx, axis=axis) + np.log(np.exp(x - mx).sum(axis=axis))


def cross_entropy(logits: Tensor, gold: int) -> Tensor:
    """Negative log softmax probability of `gold` for one logit vector."""
    x = logits.data
    if x.ndim != 1:
        raise ShapeError(f"cross_entropy expects a vector of logits, got rank {x.ndim}")
    n = x.shape[0]
    gold = int(gold)
    if not 0 <= gold < n:
        raise IndexError(f"gold label {gold} outside [0, {n})")
    out = np.asarray(_logsumexp(x) - x[gold])

    def vjp(g):
        p = np.exp(x - _logsumexp(x))
        p[gold] -= 1.0
        return (g * p,)

    return _emit("cross_entropy", out, (logits,), vjp)


def cross_entropy_rows(logits: Tensor, golds, reduction: str = "mean") -> Tensor:
    """Mean (or sum) cross-entropy over rows of a (n, labels) logit matrix."""
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy_rows expects (n, labels) logits, got rank {x.ndim}")
    golds = np.asarray(golds, dtype=np.int64)
    n, r = x.shape
    if golds.shape != (n,):
        raise ShapeError(f"expected {n} gold labels, got shape {golds.shape}")
    if golds.min() < 0 or golds.max() >= r:
        raise IndexError(f"gold labels must lie in [0, {r})")
    lse = _logsumexp(x, axis=1)
    losses = lse - x[np.arange(n), golds]
    if reduction == "mean":
        out, factor = np.asarray(losses.mean()), 1.0 / n
    elif reduction == "sum":
        out, factor = np.asarray(losses.sum()), 1.0
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")

    def vjp(g):
        p = np.exp(x - lse[:, None])
        p[np.arange(n), golds] -= 1.0
        return (g * factor * p,)

    return _emit("cross_entropy_rows", out, (logits,), vjp)


# ---------------------------------------------------------------------------
# MLPs
# ---------------------------------------------------------------------------

_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


@dataclass
class MlpParams:
    """Feed-forward parameters; zero layers encodes the identity map.

    The activation runs between layers, never after the last one, unless
    `final_activation` is set (used by the nonlinearity controls in tests).
    """

    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)
    activation: str = "relu"
    final_activation: bool = False

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ConfigError("MLP needs one bias per weight matrix")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        for k in range(len(self.weights) - 1):
            d_out = self.weights[k].shape[1]
            d_in = self.weights[k + 1].shape[0]
            if d_out != d_in:
                raise ShapeError(f"layer {k} outputs {d_out} features, layer {k + 1} expects {d_in}")

    @property
    def depth(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]


def init_mlp(
    dims: Sequence[int],
    rng: np.random.Generator,
    activation: str = "relu",
    name: str = "mlp",
    weight_std: float | None = None,
    final_activation: bool = False,
) -> MlpParams:
    """Allocate an MLP mapping dims[0] -> dims[-1]; `dims` of length 1 is the identity."""
    weights, biases = [], []
    for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        std = weight_std if weight_std is not None else math.sqrt(2.0 / (d_in + d_out))
        weights.append(Tensor(rng.normal(0.0, std, (d_in, d_out)), requires_grad=True, name=f"{name}.w{k}"))
        biases.append(Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.b{k}"))
    return MlpParams(weights, biases, activation, final_activation)


def mlp_apply(p: MlpParams, x: Tensor) -> Tensor:
    """Apply the MLP along the last axis of `x`; 0 layers returns `x` unchanged."""
    if p.depth == 0:
        return x
    act = _ACTIVATIONS[p.activation]
    lead = x.shape[:-1]
    h = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        if h.shape[-1] != w.shape[0]:
            raise ShapeError(
                f"MLP layer {k} expects {w.shape[0]} input features, got {h.shape[-1]}"
            )
        h = add(einsum("nd,de->ne", h, w), b)
        if k < p.depth - 1 or p.final_activation:
            h = act(h)
    if x.ndim != 2:
        h = reshape(h, lead + (h.shape[-1],))
    return h


# ---------------------------------------------------------------------------
# finite-difference validation
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_coords_per_param: int = 8,
) -> float:
    """Compare tape adjoints of `f()` against central differences.

    Returns the max over sampled coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|).  `f` must be a pure
    function of `params`; coordinates are perturbed in place and restored.
    """
    with Tape() as tape:
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("non-finite objective in grad_check")
    grads = tape.gradients(loss, params)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = grads[p].reshape(-1)
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for ix in coords:
            keep = flat[ix]
            flat[ix] = keep + eps
            up = f().item()
            flat[ix] = keep - eps
            down = f().item()
            flat[ix] = keep
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[ix] - numeric) / max(1.0, abs(analytic[ix]), abs(numeric))
            worst = max(worst, err)
    return worst
