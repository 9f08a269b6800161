"""Reverse-mode differentiation over numpy values, plus Adam updates.

The engine is a Wengert-list tape over a small primitive set: elementwise
arithmetic, reductions, matrix products, gathers/scatters, and two fused
primitives registered by the field and rendering modules (feature-grid
interpolation and alpha compositing). Every op wrapper is dual mode: called
on plain ndarrays it just computes numpy values, called on `Var` operands it
also records the node, so forward-only code paths share the exact same
implementation as differentiated ones.

Gradients accumulate in reverse topological (= reverse recording) order,
which makes serial backward passes bitwise deterministic. Batch shards are
merged by `merge_gradients` in caller-supplied order.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import NonFiniteGradient, NonScalarOutput, UnregisteredPrimitive

Array = np.ndarray


# --------------------------------------------------------------- parameters


class ParamStore:
    """Named flat parameter blocks with a category label per block.

    Categories drive per-category learning rates: "grid", "decoder",
    "sharpness", "pose".
    """

    def __init__(self) -> None:
        self._blocks: dict[str, Array] = {}
        self._categories: dict[str, str] = {}

    def add(self, name: str, value: Array, category: str) -> None:
        if name in self._blocks:
            raise ValueError(f"duplicate parameter block {name!r}")
        arr = np.asarray(value, dtype=np.float64).copy()
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"block {name!r} has non-finite entries")
        self._blocks[name] = arr
        self._categories[name] = category

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def __getitem__(self, name: str) -> Array:
        return self._blocks[name]

    def set(self, name: str, value: Array) -> None:
        old = self._blocks[name]
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != old.shape:
            raise ValueError(f"block {name!r} shape is immutable")
        self._blocks[name] = arr.copy()

    def category(self, name: str) -> str:
        return self._categories[name]

    def names(self) -> list[str]:
        return list(self._blocks)

    def items(self):
        return self._blocks.items()

    def total_size(self) -> int:
        return sum(b.size for b in self._blocks.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, block in self._blocks.items():
            out.add(name, block, self._categories[name])
        return out


# --------------------------------------------------------------------- tape


_BACKWARD: dict[str, Callable] = {}


def register_primitive(name: str, backward: Callable) -> None:
    """Register the adjoint rule for a primitive op name.

    `backward(ctx, grad_out)` must return one gradient per recorded input
    (None allowed for inputs that are not differentiated).
    """
    _BACKWARD[name] = backward


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "id", "value")

    # keep numpy from absorbing us in mixed expressions like `ndarray + Var`
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", var_id: int, value: Array) -> None:
        self.tape = tape
        self.id = var_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar; every operator defers to the module-level op wrappers
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return vsum(self, axis=axis)

    def mean(self, axis=None):
        return vmean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


@dataclass
class _Node:
    op: str
    out_id: int
    input_ids: tuple
    ctx: dict


class Tape:
    """Append-only record of primitive applications (the adjoint graph)."""

    def __init__(self) -> None:
        self.records: list[_Node] = []
        self._next_id = 0
        self._param_leaves: dict[str, Var] = {}
        self._store: ParamStore | None = None

    def _new_var(self, value: Array) -> Var:
        var = Var(self, self._next_id, np.asarray(value, dtype=np.float64))
        self._next_id += 1
        return var

    def leaf(self, value: Array) -> Var:
        """An input leaf that can receive a gradient (no creating node)."""
        return self._new_var(value)

    def param(self, store: ParamStore, name: str) -> Var:
        """Leaf bound to a parameter block; one Var per block per tape."""
        if self._store is not None and self._store is not store:
            raise ValueError("a tape binds at most one ParamStore")
        self._store = store
        if name not in self._param_leaves:
            self._param_leaves[name] = self.leaf(store[name])
        return self._param_leaves[name]

    def record(self, op: str, inputs: tuple, value: Array, ctx: dict) -> Var:
        if op not in _BACKWARD:
            raise UnregisteredPrimitive(f"no adjoint registered for op {op!r}")
        out = self._new_var(value)
        ids = tuple(v.id if isinstance(v, Var) else None for v in inputs)
        self.records.append(_Node(op, out.id, ids, ctx))
        return out

    @property
    def node_count(self) -> int:
        return len(self.records)


def backward(tape: Tape, output: Var) -> dict[str, Array]:
    """Reverse accumulation from a scalar output.

    Returns one gradient array per parameter block of the bound store;
    blocks that do not touch the output receive exact zeros.
    """
    if output.value.size != 1:
        raise NonScalarOutput(f"output has {output.value.size} elements")
    adjoint: dict[int, Array] = {output.id: np.ones_like(output.value)}
    for node in reversed(tape.records):
        g = adjoint.pop(node.out_id, None)
        if g is None:
            continue
        grads = _BACKWARD[node.op](node.ctx, g)
        for var_id, grad in zip(node.input_ids, grads):
            if var_id is None or grad is None:
                continue
            if not np.all(np.isfinite(grad)):
                raise NonFiniteGradient(f"non-finite adjoint from op {node.op!r}")
            if var_id in adjoint:
                adjoint[var_id] = adjoint[var_id] + grad
            else:
                adjoint[var_id] = np.asarray(grad, dtype=np.float64)

    result: dict[str, Array] = {}
    if tape._store is not None:
        for name, block in tape._store.items():
            leaf = tape._param_leaves.get(name)
            if leaf is not None and leaf.id in adjoint:
                result[name] = np.asarray(adjoint[leaf.id]).reshape(block.shape)
            else:
                result[name] = np.zeros_like(block)
    return result


def merge_gradients(maps: list[dict[str, Array]]) -> dict[str, Array]:
    """Sum gradient maps in list order (the commutative shard merge)."""
    if not maps:
        return {}
    out = {name: grad.copy() for name, grad in maps[0].items()}
    for extra in maps[1:]:
        for name, grad in extra.items():
            if name in out:
                out[name] += grad
            else:
                out[name] = grad.copy()
    return out


# ------------------------------------------------------------- op plumbing


def value_of(x) -> Array:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _elementwise(op, xs, fwd, ctx_extra=None):
    tape = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    out = fwd(*vals)
    if tape is None:
        return out
    ctx = {"vals": vals, "out": out}
    if ctx_extra:
        ctx.update(ctx_extra)
    return tape.record(op, tuple(xs), out, ctx)


# ------------------------------------------------------- primitive wrappers


def add(a, b):
    return _elementwise("add", (a, b), np.add)


def sub(a, b):
    return _elementwise("sub", (a, b), np.subtract)


def mul(a, b):
    return _elementwise("mul", (a, b), np.multiply)


def div(a, b):
    return _elementwise("div", (a, b), np.divide)


def neg(a):
    return _elementwise("neg", (a,), np.negative)


def pow_const(a, p):
    return _elementwise("pow", (a,), lambda x: np.power(x, p), {"p": p})


def exp(a):
    return _elementwise("exp", (a,), np.exp)


def log(a):
    return _elementwise("log", (a,), np.log)


def sqrt(a):
    return _elementwise("sqrt", (a,), np.sqrt)


def absolute(a):
    return _elementwise("abs", (a,), np.abs)


def sin(a):
    return _elementwise("sin", (a,), np.sin)


def cos(a):
    return _elementwise("cos", (a,), np.cos)


def maximum(a, b):
    return _elementwise("maximum", (a, b), np.maximum)


def minimum(a, b):
    return _elementwise("minimum", (a, b), np.minimum)


def clamp(a, lo, hi):
    return _elementwise("clamp", (a,), lambda x: np.clip(x, lo, hi), {"lo": lo, "hi": hi})


def sigmoid(a):
    return _elementwise("sigmoid", (a,), expit)


def _softplus_fwd(x: Array, beta: float) -> Array:
    bx = beta * x
    small = np.log1p(np.exp(np.minimum(bx, 30.0))) / beta
    return np.where(bx > 30.0, x, small)


def softplus(a, beta: float = 1.0):
    return _elementwise("softplus", (a,), lambda x: _softplus_fwd(x, beta), {"beta": beta})


def where(cond: Array, a, b):
    cond = np.asarray(cond, dtype=bool)
    return _elementwise("where", (a, b), lambda x, y: np.where(cond, x, y), {"cond": cond})


def vsum(a, axis=None):
    tape = _tape_of(a)
    val = value_of(a)
    out = val.sum(axis=axis)
    if tape is None:
        return out
    return tape.record("sum", (a,), out, {"shape": val.shape, "axis": axis})


def vmean(a, axis=None):
    tape = _tape_of(a)
    val = value_of(a)
    out = val.mean(axis=axis)
    if tape is None:
        return out
    return tape.record("mean", (a,), out, {"shape": val.shape, "axis": axis})


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if tape is None:
        return out
    return tape.record("matmul", (a, b), out, {"a": av, "b": bv})


def bmm(a, b):
    """Batched matrix product over matching leading dims."""
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.matmul(av, bv)
    if tape is None:
        return out
    return tape.record("bmm", (a, b), out, {"a": av, "b": bv})


def bvm(x, m):
    """Batched row-vector times matrix: (P,k) x (P,k,l) -> (P,l)."""
    tape = _tape_of(x, m)
    xv, mv = value_of(x), value_of(m)
    out = np.einsum("pk,pkl->pl", xv, mv)
    if tape is None:
        return out
    return tape.record("bvm", (x, m), out, {"x": xv, "m": mv})


def bmv(m, x):
    """Batched matrix times column vector: (P,k,l) x (P,l) -> (P,k)."""
    tape = _tape_of(m, x)
    mv, xv = value_of(m), value_of(x)
    out = np.einsum("pkl,pl->pk", mv, xv)
    if tape is None:
        return out
    return tape.record("bmv", (m, x), out, {"m": mv, "x": xv})


def gather(a, idx):
    """Rows of `a` at integer indices `idx` (first axis)."""
    idx = np.asarray(idx)
    tape = _tape_of(a)
    av = value_of(a)
    out = av[idx]
    if tape is None:
        return out
    return tape.record("gather", (a,), out, {"idx": idx, "n": av.shape[0], "shape": av.shape})


def scatter_unique(a, idx, size: int):
    """Place rows of `a` at unique indices into a zero array of `size` rows."""
    idx = np.asarray(idx)
    tape = _tape_of(a)
    av = value_of(a)
    out = np.zeros((size,) + av.shape[1:])
    out[idx] = av
    if tape is None:
        return out
    return tape.record("scatter_unique", (a,), out, {"idx": idx})


def segment_sum(a, seg: Array, num_segments: int):
    """Sum rows of `a` grouped by segment id."""
    seg = np.asarray(seg)
    tape = _tape_of(a)
    av = value_of(a)
    out = _segment_sum_fwd(av, seg, num_segments)
    if tape is None:
        return out
    return tape.record("segment_sum", (a,), out, {"seg": seg})


def _segment_sum_fwd(av: Array, seg: Array, num: int) -> Array:
    if av.ndim == 1:
        return np.bincount(seg, weights=av, minlength=num)
    cols = [np.bincount(seg, weights=av[:, c], minlength=num) for c in range(av.shape[1])]
    return np.stack(cols, axis=-1)


def getitem(a, key):
    tape = _tape_of(a)
    av = value_of(a)
    out = av[key]
    if tape is None:
        return out
    return tape.record("getitem", (a,), out, {"key": key, "shape": av.shape})


def reshape(a, shape):
    tape = _tape_of(a)
    av = value_of(a)
    out = av.reshape(shape)
    if tape is None:
        return out
    return tape.record("reshape", (a,), out, {"shape": av.shape})


def concat(parts: list, axis: int = 0):
    tape = _tape_of(*parts)
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    return tape.record("concat", tuple(parts), out, {"sizes": sizes, "axis": axis})


def stack_last(parts: list):
    tape = _tape_of(*parts)
    vals = [value_of(p) for p in parts]
    out = np.stack(vals, axis=-1)
    if tape is None:
        return out
    return tape.record("stack_last", tuple(parts), out, {"count": len(vals)})


# -------------------------------------------------------------- adjoint set


def _bw_add(ctx, g):
    a, b = ctx["vals"]
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_sub(ctx, g):
    a, b = ctx["vals"]
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _bw_mul(ctx, g):
    a, b = ctx["vals"]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bw_div(ctx, g):
    a, b = ctx["vals"]
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _bw_neg(ctx, g):
    return (-g,)


def _bw_pow(ctx, g):
    (a,) = ctx["vals"]
    p = ctx["p"]
    return (g * p * np.power(a, p - 1),)


def _bw_exp(ctx, g):
    return (g * ctx["out"],)


def _bw_log(ctx, g):
    (a,) = ctx["vals"]
    return (g / a,)


def _bw_sqrt(ctx, g):
    return (g * 0.5 / ctx["out"],)


def _bw_abs(ctx, g):
    (a,) = ctx["vals"]
    return (g * np.sign(a),)


def _bw_sin(ctx, g):
    (a,) = ctx["vals"]
    return (g * np.cos(a),)


def _bw_cos(ctx, g):
    (a,) = ctx["vals"]
    return (-g * np.sin(a),)


def _bw_maximum(ctx, g):
    a, b = ctx["vals"]
    take_a = a >= b
    return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)


def _bw_minimum(ctx, g):
    a, b = ctx["vals"]
    take_a = a <= b
    return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)


def _bw_clamp(ctx, g):
    (a,) = ctx["vals"]
    inside = (a > ctx["lo"]) & (a < ctx["hi"])
    return (g * inside,)


def _bw_sigmoid(ctx, g):
    s = ctx["out"]
    return (g * s * (1.0 - s),)


def _bw_softplus(ctx, g):
    (a,) = ctx["vals"]
    return (g * expit(ctx["beta"] * a),)


def _bw_where(ctx, g):
    a, b = ctx["vals"]
    cond = ctx["cond"]
    return _unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)


def _bw_sum(ctx, g):
    shape, axis = ctx["shape"], ctx["axis"]
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    g_exp = np.expand_dims(g, axis)
    return (np.broadcast_to(g_exp, shape).copy(),)


def _bw_mean(ctx, g):
    shape, axis = ctx["shape"], ctx["axis"]
    if axis is None:
        n = int(np.prod(shape))
        return (np.broadcast_to(g / n, shape).copy(),)
    n = shape[axis]
    g_exp = np.expand_dims(g / n, axis)
    return (np.broadcast_to(g_exp, shape).copy(),)


def _bw_matmul(ctx, g):
    a, b = ctx["a"], ctx["b"]
    return g @ b.T, a.T @ g


def _bw_bmm(ctx, g):
    a, b = ctx["a"], ctx["b"]
    da = np.matmul(g, np.swapaxes(b, -1, -2))
    db = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)


def _bw_bvm(ctx, g):
    x, m = ctx["x"], ctx["m"]
    dx = np.einsum("pl,pkl->pk", g, m)
    dm = np.einsum("pk,pl->pkl", x, g)
    return dx, dm


def _bw_bmv(ctx, g):
    m, x = ctx["m"], ctx["x"]
    dm = np.einsum("pk,pl->pkl", g, x)
    dx = np.einsum("pkl,pk->pl", m, g)
    return dm, dx


def _scatter_rows(g: Array, idx: Array, n: int) -> Array:
    flat_idx = idx.ravel()
    if g.ndim == idx.ndim:
        return np.bincount(flat_idx, weights=g.ravel(), minlength=n)
    trailing = g.reshape(flat_idx.size, -1)
    if trailing.shape[1] <= 16:
        cols = [np.bincount(flat_idx, weights=trailing[:, c], minlength=n) for c in range(trailing.shape[1])]
        return np.stack(cols, axis=-1)
    out = np.zeros((n, trailing.shape[1]))
    np.add.at(out, flat_idx, trailing)
    return out


def _bw_gather(ctx, g):
    idx, n, shape = ctx["idx"], ctx["n"], ctx["shape"]
    return (_scatter_rows(g, idx, n).reshape(shape),)


def _bw_scatter_unique(ctx, g):
    return (g[ctx["idx"]],)


def _bw_segment_sum(ctx, g):
    return (g[ctx["seg"]],)


def _bw_getitem(ctx, g):
    out = np.zeros(ctx["shape"])
    np.add.at(out, ctx["key"], g)
    return (out,)


def _bw_reshape(ctx, g):
    return (g.reshape(ctx["shape"]),)


def _bw_concat(ctx, g):
    sizes, axis = ctx["sizes"], ctx["axis"]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _bw_stack_last(ctx, g):
    return tuple(g[..., i] for i in range(ctx["count"]))


for _name, _fn in [
    ("add", _bw_add),
    ("sub", _bw_sub),
    ("mul", _bw_mul),
    ("div", _bw_div),
    ("neg", _bw_neg),
    ("pow", _bw_pow),
    ("exp", _bw_exp),
    ("log", _bw_log),
    ("sqrt", _bw_sqrt),
    ("abs", _bw_abs),
    ("sin", _bw_sin),
    ("cos", _bw_cos),
    ("maximum", _bw_maximum),
    ("minimum", _bw_minimum),
    ("clamp", _bw_clamp),
    ("sigmoid", _bw_sigmoid),
    ("softplus", _bw_softplus),
    ("where", _bw_where),
    ("sum", _bw_sum),
    ("mean", _bw_mean),
    ("matmul", _bw_matmul),
    ("bmm", _bw_bmm),
    ("bvm", _bw_bvm),
    ("bmv", _bw_bmv),
    ("gather", _bw_gather),
    ("scatter_unique", _bw_scatter_unique),
    ("segment_sum", _bw_segment_sum),
    ("getitem", _bw_getitem),
    ("reshape", _bw_reshape),
    ("concat", _bw_concat),
    ("stack_last", _bw_stack_last),
]:
    register_primitive(_name, _fn)


# --------------------------------------------------------------------- adam


@dataclass
class AdamState:
    """Bias-corrected Adam moments mirroring a ParamStore."""

    m: dict[str, Array]
    v: dict[str, Array]
    t: int
    learning_rates: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_store(cls, store: ParamStore, learning_rates: dict[str, float], **kw) -> "AdamState":
        m = {name: np.zeros_like(block) for name, block in store.items()}
        v = {name: np.zeros_like(block) for name, block in store.items()}
        return cls(m=m, v=v, t=0, learning_rates=dict(learning_rates), **kw)


def adam_step(params: ParamStore, grads: dict[str, Array], state: AdamState) -> tuple[ParamStore, AdamState]:
    """One in-place Adam update; learning rate resolved per block category."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient for {name!r} is non-finite")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for name, g in grads.items():
        lr = state.learning_rates[params.category(name)]
        if lr == 0.0:
            continue
        g = g.reshape(params[name].shape)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        block = params[name]
        block -= step
        if not np.all(np.isfinite(block)):
            raise NonFiniteGradient(f"update made block {name!r} non-finite")
    return params, state


# --------------------------------------------------------- gradient checks


def check_gradients(
    loss_fn: Callable[[ParamStore], Var],
    params: ParamStore,
    h: float = 1e-4,
    sample_count: int = 50,
    seed: int = 0,
    blocks: list[str] | None = None,
    coords: list[tuple[str, int]] | None = None,
) -> float:
    """Max relative error of reverse-mode vs central finite differences.

    `loss_fn` must return a scalar Var and be deterministic given the store
    contents. Coordinates are sampled uniformly over the selected blocks
    unless explicit (block, flat index) pairs are given.
    """
    out = loss_fn(params)
    if not isinstance(out, Var):
        raise TypeError("loss_fn must return a tape Var")
    grads = backward(out.tape, out)

    if coords is None:
        names = blocks if blocks is not None else params.names()
        sizes = np.array([params[n].size for n in names])
        total = int(sizes.sum())
        rng = np.random.default_rng(seed)
        flat = rng.integers(0, total, size=sample_count)
        bounds = np.cumsum(sizes)
        coords = []
        for f in flat:
            b = int(np.searchsorted(bounds, f, side="right"))
            offset = f - (0 if b == 0 else bounds[b - 1])
            coords.append((names[b], int(offset)))

    max_rel = 0.0
    for name, flat_idx in coords:
        block = params[name]
        original = block.flat[flat_idx]
        block.flat[flat_idx] = original + h
        hi = float(value_of(loss_fn(params)))
        block.flat[flat_idx] = original - h
        lo = float(value_of(loss_fn(params)))
        block.flat[flat_idx] = original
        g_fd = (hi - lo) / (2.0 * h)
        g_ad = float(grads[name].flat[flat_idx])
        rel = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
        max_rel = max(max_rel, rel)
    return max_rel
