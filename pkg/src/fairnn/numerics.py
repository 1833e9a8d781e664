"""Dense float64 arithmetic with a small reverse-mode tape, Adam, and a
finite-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Anything that
needs gradients goes through a :class:`Tape`, which records each operation
together with its vector-Jacobian product. One call to :func:`backward`
consumes the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

SIGMOID_CLAMP = 30.0
LOG_FLOOR = 1e-12


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class TapeStateError(RuntimeError):
    """A tape was used after its backward pass."""


class NumericError(FloatingPointError):
    """A computation produced a non-finite or undefined value."""


def as_matrix(x, name: str = "input") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# Tape and variables
# ---------------------------------------------------------------------------


class Var:
    """A value recorded on a tape.

    Supports ``+ - * / @``, unary minus and ``**`` with a constant exponent.
    """

    __slots__ = ("tape", "value", "index", "__weakref__")
    # make ndarray <op> Var dispatch to Var's reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", value: np.ndarray, index: int):
        self.tape = tape
        self.value = value
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


@dataclass
class _Node:
    parents: tuple
    vjp: Callable | None


class Tape:
    """Records operations for one reverse pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self.consumed = False

    def __len__(self):
        return len(self._nodes)

    def _check(self):
        if self.consumed:
            raise TapeStateError("tape already consumed by a backward pass")

    def leaf(self, value) -> Var:
        """Register a differentiable input."""
        self._check()
        v = np.array(value, dtype=np.float64)
        return self._push(v, (), None)

    def record(self, value: np.ndarray, parents: Sequence[Var], vjp: Callable) -> Var:
        """Register the result of a primitive.

        ``vjp(g)`` receives the upstream gradient (shape of ``value``) and
        returns one gradient per parent, or ``None`` for no contribution.
        """
        self._check()
        for p in parents:
            if p.tape is not self:
                raise TapeStateError("operands recorded on different tapes")
        value = np.asarray(value, dtype=np.float64)
        return self._push(value, tuple(p.index for p in parents), vjp)

    def _push(self, value, parents, vjp) -> Var:
        self._nodes.append(_Node(parents, vjp))
        return Var(self, value, len(self._nodes) - 1)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def backward(objective: Var, wrt: Iterable[Var] | None = None) -> dict[int, np.ndarray]:
    """Reverse pass from a scalar ``objective``.

    Returns a mapping from variable index to gradient. If ``wrt`` is given,
    every requested variable is present (zeros if it did not influence the
    objective). The tape cannot be used again afterwards.
    """
    tape = objective.tape
    tape._check()
    if objective.value.size != 1:
        raise DimensionError(f"objective must be scalar, got shape {objective.value.shape}")
    if not np.isfinite(objective.value).all():
        raise NumericError(f"non-finite objective {objective.value!r}")
    grads: dict[int, np.ndarray] = {objective.index: np.ones_like(objective.value)}
    for i in range(objective.index, -1, -1):
        g = grads.get(i)
        node = tape._nodes[i]
        if g is None or node.vjp is None:
            continue
        contributions = node.vjp(g)
        for pi, pg in zip(node.parents, contributions):
            if pg is None:
                continue
            if pi in grads:
                grads[pi] = grads[pi] + pg
            else:
                grads[pi] = pg
    tape.consumed = True
    tape._nodes = []
    if wrt is None:
        return grads
    out = {}
    for v in wrt:
        g = grads.get(v.index)
        out[v.index] = np.zeros_like(v.value) if g is None else g
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _lift(tape: Tape, x):
    if isinstance(x, Var):
        return x, True
    return np.asarray(x, dtype=np.float64), False


def _binary(a, b, fwd, da, db):
    tape = _tape_of(a, b)
    av, ag = _lift(tape, a)
    bv, bg = _lift(tape, b)
    x = av.value if ag else av
    y = bv.value if bg else bv
    out = fwd(x, y)
    parents = [p for p, is_var in ((av, ag), (bv, bg)) if is_var]

    def vjp(g):
        res = []
        if ag:
            res.append(_unbroadcast(da(g, x, y, out), x.shape))
        if bg:
            res.append(_unbroadcast(db(g, x, y, out), y.shape))
        return res

    return tape.record(out, parents, vjp)


def add(a, b) -> Var:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Var:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Var:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Var:
    return _binary(
        a, b, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y)
    )


def power(a: Var, p: float) -> Var:
    x = a.value
    return a.tape.record(x**p, [a], lambda g: [g * p * x ** (p - 1)])


def square(a: Var) -> Var:
    x = a.value
    return a.tape.record(x * x, [a], lambda g: [2.0 * g * x])


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    x, y = value_of(a), value_of(b)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise DimensionError(f"cannot multiply {x.shape} by {y.shape}")
    parents, which = [], []
    if isinstance(a, Var):
        parents.append(a)
        which.append(0)
    if isinstance(b, Var):
        parents.append(b)
        which.append(1)

    def vjp(g):
        return [g @ y.T if w == 0 else x.T @ g for w in which]

    return tape.record(x @ y, parents, vjp)


def affine_forward(x, weight, bias) -> Var:
    """``x @ weight + bias`` with bias broadcast over rows."""
    xv, wv, bv = value_of(x), value_of(weight), value_of(bias)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise DimensionError(f"input {xv.shape} incompatible with weight {wv.shape}")
    if bv.shape not in ((wv.shape[1],), (1, wv.shape[1])):
        raise DimensionError(f"bias {bv.shape} incompatible with weight {wv.shape}")
    return add(matmul(x, weight), bias)


def relu(a: Var) -> Var:
    x = a.value
    mask = x > 0
    return a.tape.record(np.where(mask, x, 0.0), [a], lambda g: [g * mask])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    xc = np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-xc))


def sigmoid(a: Var) -> Var:
    x = a.value
    y = _sigmoid(x)
    inside = np.abs(x) <= SIGMOID_CLAMP
    return a.tape.record(y, [a], lambda g: [g * y * (1.0 - y) * inside])


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a: Var) -> Var:
    y = _softmax_rows(a.value)

    def vjp(g):
        return [y * (g - (g * y).sum(axis=1, keepdims=True))]

    return a.tape.record(y, [a], vjp)


def log(a: Var, floor: float = LOG_FLOOR) -> Var:
    """Natural log with the argument floored at ``floor``."""
    x = a.value
    if np.any(np.isnan(x)):
        raise NumericError("log of NaN")
    xf = np.maximum(x, floor)
    active = x > floor
    return a.tape.record(np.log(xf), [a], lambda g: [g * active / xf])


def absolute(a: Var) -> Var:
    x = a.value
    return a.tape.record(np.abs(x), [a], lambda g: [g * np.sign(x)])


def total(a: Var) -> Var:
    x = a.value
    return a.tape.record(np.array(x.sum()), [a], lambda g: [np.full_like(x, g)])


def mean(a: Var) -> Var:
    x = a.value
    n = x.size
    return a.tape.record(np.array(x.mean()), [a], lambda g: [np.full_like(x, g / n)])


def row_sum(a: Var) -> Var:
    x = a.value
    return a.tape.record(x.sum(axis=1), [a], lambda g: [np.repeat(g[:, None], x.shape[1], axis=1)])


def getitem(a: Var, key) -> Var:
    x = a.value
    out = x[key]

    def vjp(g):
        full = np.zeros_like(x)
        np.add.at(full, key, g)
        return [full]

    return a.tape.record(out, [a], vjp)


def take_rows(a: Var, idx) -> Var:
    """Select rows by boolean mask or by distinct integer indices."""
    idx = np.asarray(idx)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    x = a.value

    def vjp(g):
        full = np.zeros_like(x)
        full[idx] = g
        return [full]

    return a.tape.record(x[idx], [a], vjp)


def columns(a: Var, start: int, stop: int) -> Var:
    x = a.value
    out = x[:, start:stop]

    def vjp(g):
        full = np.zeros_like(x)
        full[:, start:stop] = g
        return [full]

    return a.tape.record(out, [a], vjp)


def concat_columns(parts: Sequence[Var]) -> Var:
    tape = _tape_of(*parts)
    widths = [p.value.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)
    out = np.concatenate([p.value for p in parts], axis=1)

    def vjp(g):
        return [g[:, edges[i] : edges[i + 1]] for i in range(len(parts))]

    return tape.record(out, list(parts), vjp)


def const_matrix(tape: Tape, value) -> Var:
    """A non-differentiable value on ``tape`` (gradient is discarded)."""
    return tape.record(np.asarray(value, dtype=np.float64), [], lambda g: [])


# ---------------------------------------------------------------------------
# Plain (non-tape) activations
# ---------------------------------------------------------------------------


def relu_np(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid_np(x):
    return _sigmoid(np.asarray(x, dtype=np.float64))


def softmax_rows_np(x):
    return _softmax_rows(as_matrix(x))


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class AdamState:
    m: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    v: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    step: int = 0


@dataclass
class ParamStore:
    """Named groups of dense layers plus Adam moments.

    ``groups`` maps a block name (``"encoder"``, ``"decoder"``,
    ``"classifier"``) to its ordered layers. Flattened order is the insertion
    order of groups, then layer order.
    """

    groups: dict[str, list[Layer]]
    adam: AdamState = field(default_factory=AdamState)

    def layers(self) -> list[Layer]:
        return [layer for group in self.groups.values() for layer in group]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers():
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "ParamStore":
        groups = {
            k: [Layer(l.weight.copy(), l.bias.copy()) for l in v] for k, v in self.groups.items()
        }
        adam = AdamState(
            m=[(a.copy(), b.copy()) for a, b in self.adam.m],
            v=[(a.copy(), b.copy()) for a, b in self.adam.v],
            step=self.adam.step,
        )
        return ParamStore(groups, adam)

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays())


def glorot_layer(fan_in: int, fan_out: int, rng: np.random.Generator) -> Layer:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Layer(rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out))


def init_stack(widths: Sequence[int], rng: np.random.Generator) -> list[Layer]:
    return [glorot_layer(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]


def adam_step(
    params: ParamStore,
    gradients: Sequence[np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One in-place Adam update; ``gradients`` follows ``params.arrays()`` order."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    arrays = params.arrays()
    if len(gradients) != len(arrays):
        raise DimensionError(f"expected {len(arrays)} gradients, got {len(gradients)}")
    for a, g in zip(arrays, gradients):
        if a.shape != np.shape(g):
            raise DimensionError(f"gradient {np.shape(g)} does not match parameter {a.shape}")
    state = params.adam
    if not state.m:
        state.m = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers()]
        state.v = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers()]
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    flat_m = [x for pair in state.m for x in pair]
    flat_v = [x for pair in state.v for x in pair]
    for p, g, m, v in zip(arrays, gradients, flat_m, flat_v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    f: Callable[[list[np.ndarray]], float], params: Sequence[np.ndarray], h: float = 1e-5
) -> list[np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. every entry of ``params``.

    ``f`` is called with the list of (perturbed) arrays; the arrays passed
    in are restored before returning.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    out = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params))
            flat[i] = orig - h
            fm = float(f(params))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"objective not finite at coordinate {i}")
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
