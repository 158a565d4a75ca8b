"""Computation graphs with first- and second-order reverse-mode differentiation.

A Graph is an append-only list of nodes in topological order: leaves are
constants, named inputs (rebound on every evaluation), and parameter slots
(bound from one flat 64-bit vector). Graphs are built once and evaluated many
times against fresh parameter vectors and input bindings, which keeps the
meta-training hot loop cheap.

Second-order support comes from taping the backward pass: ``Graph.grad``
appends the adjoint computation as ordinary graph nodes, so the gradient is
itself differentiable and gradients-of-gradients (Hessian-vector terms
included) fall out of a second reverse sweep. Only the pieces a one-step
adapted policy objective needs are implemented; there is no general
broadcasting and no third-order support.

Subgradient conventions at kinks (deterministic by design): ``relu`` and
``clip`` pass zero gradient exactly at their boundaries, ``maximum`` routes
ties to its first argument, ``rowmax`` to the first maximal column. Boundary
hits can be collected per evaluation via ``boundary_flags``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np


class DiffcoreError(ValueError):
    """Base class for graph construction and evaluation errors."""


class ShapeMismatchError(DiffcoreError):
    pass


class NonScalarOutputError(DiffcoreError):
    pass


class InputBindingError(DiffcoreError):
    pass


# ---------------------------------------------------------------------------
# Parameter vectors


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector with a named layout and an adaptation mask.

    ``layout`` is an ordered tuple of (name, shape); the segment order defines
    the flat offsets. ``mask`` marks coordinates eligible for inner-loop
    adaptation (True = adapts). Instances are immutable; updates produce new
    vectors via :meth:`with_values`.
    """

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        mask = np.asarray(self.mask, dtype=bool).ravel()
        total = sum(int(np.prod(shape, dtype=int)) for _, shape in self.layout)
        if values.size != total:
            raise ShapeMismatchError(
                f"layout holds {total} entries, values hold {values.size}"
            )
        if mask.size != values.size:
            raise ShapeMismatchError(
                f"mask length {mask.size} != vector length {values.size}"
            )
        values = values.copy()
        values.flags.writeable = False
        mask = mask.copy()
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def packed(
        cls,
        named_arrays: Sequence[tuple[str, np.ndarray]],
        mask: np.ndarray | None = None,
    ) -> "ParamVector":
        layout = tuple((name, np.asarray(a).shape) for name, a in named_arrays)
        values = np.concatenate(
            [np.asarray(a, dtype=np.float64).ravel() for _, a in named_arrays]
        ) if named_arrays else np.zeros(0)
        if mask is None:
            mask = np.ones(values.size, dtype=bool)
        return cls(values=values, layout=layout, mask=mask)

    @property
    def size(self) -> int:
        return self.values.size

    def slot(self, name: str) -> slice:
        offset = 0
        for n, shape in self.layout:
            width = int(np.prod(shape, dtype=int))
            if n == name:
                return slice(offset, offset + width)
            offset += width
        raise KeyError(name)

    def view(self, name: str) -> np.ndarray:
        for n, shape in self.layout:
            if n == name:
                return self.values[self.slot(name)].reshape(shape)
        raise KeyError(name)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return replace(self, values=np.asarray(values, dtype=np.float64))

    def with_mask(self, mask: np.ndarray) -> "ParamVector":
        return replace(self, mask=np.asarray(mask, dtype=bool))


# ---------------------------------------------------------------------------
# Shape bookkeeping (first dimension may be None for row-dynamic inputs)


def _is_scalar(shape) -> bool:
    return shape == ()


def _binary_shape(op: str, sa, sb):
    if sa == sb:
        return sa
    if _is_scalar(sa):
        return sb
    if _is_scalar(sb):
        return sa
    # rows of a 2-d array against a matching 1-d vector
    if len(sa) == 2 and sb == (sa[1],):
        return sa
    if len(sb) == 2 and sa == (sb[1],):
        return sb
    raise ShapeMismatchError(f"{op}: incompatible shapes {sa} and {sb}")


def _matmul_shape(sa, sb):
    if len(sa) == 2 and len(sb) == 2:
        if sa[1] != sb[0]:
            raise ShapeMismatchError(f"matmul: {sa} @ {sb}")
        return (sa[0], sb[1])
    if len(sa) == 2 and len(sb) == 1:
        if sa[1] != sb[0]:
            raise ShapeMismatchError(f"matmul: {sa} @ {sb}")
        return (sa[0],)
    if len(sa) == 1 and len(sb) == 2:
        if sa[0] != sb[0]:
            raise ShapeMismatchError(f"matmul: {sa} @ {sb}")
        return (sb[1],)
    if len(sa) == 1 and len(sb) == 1:
        if sa[0] != sb[0]:
            raise ShapeMismatchError(f"matmul: {sa} @ {sb}")
        return ()
    raise ShapeMismatchError(f"matmul: unsupported ranks {sa} @ {sb}")


# ---------------------------------------------------------------------------
# Graph


class Graph:
    """Append-only computation DAG over float64 arrays.

    Node handles are plain ints; every node's parents precede it, so a single
    forward sweep in index order evaluates any subset of nodes. Construction
    (including gradient taping) is guarded by a lock; evaluation only reads
    and allocates a per-call cache, so concurrent evaluations are safe.
    """

    def __init__(self):
        self._ops: list[str] = []
        self._args: list[tuple[int, ...]] = []
        self._aux: list = []
        self._shapes: list[tuple] = []
        self._param_slots: list[tuple[str, tuple[int, ...], int]] = []
        self._param_handles: list[int] = []
        self._input_names: dict[str, int] = {}
        self._param_size = 0
        self.output: int | None = None
        self._lock = threading.Lock()
        self._plan_cache: dict[tuple[int, ...], list] = {}
        self._flat_grad_handles: list[int] | None = None

    # -- construction -------------------------------------------------------

    def _node(self, op: str, args: tuple[int, ...], aux, shape) -> int:
        self._ops.append(op)
        self._args.append(args)
        self._aux.append(aux)
        self._shapes.append(shape)
        return len(self._ops) - 1

    def shape(self, h: int) -> tuple:
        return self._shapes[h]

    @property
    def n_nodes(self) -> int:
        return len(self._ops)

    @property
    def param_size(self) -> int:
        return self._param_size

    @property
    def param_handles(self) -> tuple[int, ...]:
        return tuple(self._param_handles)

    def const(self, value) -> int:
        arr = np.asarray(value, dtype=np.float64)
        return self._node("const", (), arr, arr.shape)

    def param(self, name: str, shape: Sequence[int]) -> int:
        shape = tuple(int(s) for s in shape)
        width = int(np.prod(shape, dtype=int))
        offset = self._param_size
        self._param_size += width
        self._param_slots.append((name, shape, offset))
        h = self._node("param", (), (offset, shape, width), shape)
        self._param_handles.append(h)
        return h

    def params_like(self, layout) -> dict[str, int]:
        """Register one parameter leaf per layout entry, in layout order."""
        return {name: self.param(name, shape) for name, shape in layout}

    def input(self, name: str, shape) -> int:
        if name in self._input_names:
            raise InputBindingError(f"duplicate input leaf {name!r}")
        shape = tuple(shape)
        h = self._node("input", (), (name, shape), shape)
        self._input_names[name] = h
        return h

    def set_output(self, h: int) -> int:
        if self._shapes[h] != ():
            raise NonScalarOutputError(
                f"designated output must be scalar, got shape {self._shapes[h]}"
            )
        self.output = h
        return h

    # -- ops ----------------------------------------------------------------

    def _binary(self, op: str, a: int, b: int) -> int:
        shape = _binary_shape(op, self._shapes[a], self._shapes[b])
        return self._node(op, (a, b), None, shape)

    def add(self, a, b):
        return self._binary("add", a, b)

    def sub(self, a, b):
        return self._binary("sub", a, b)

    def mul(self, a, b):
        return self._binary("mul", a, b)

    def div(self, a, b):
        return self._binary("div", a, b)

    def maximum(self, a, b):
        return self._binary("maximum", a, b)

    def neg(self, a):
        return self._node("neg", (a,), None, self._shapes[a])

    def matmul(self, a, b):
        shape = _matmul_shape(self._shapes[a], self._shapes[b])
        return self._node("matmul", (a, b), None, shape)

    def transpose(self, a):
        sa = self._shapes[a]
        if len(sa) != 2:
            raise ShapeMismatchError(f"transpose expects a matrix, got {sa}")
        return self._node("transpose", (a,), None, (sa[1], sa[0]))

    def outer(self, a, b):
        sa, sb = self._shapes[a], self._shapes[b]
        if len(sa) != 1 or len(sb) != 1:
            raise ShapeMismatchError(f"outer expects vectors, got {sa}, {sb}")
        return self._node("outer", (a, b), None, (sa[0], sb[0]))

    def pow_const(self, a, exponent: float):
        return self._node("pow_const", (a,), float(exponent), self._shapes[a])

    def tanh(self, a):
        return self._node("tanh", (a,), None, self._shapes[a])

    def exp(self, a):
        return self._node("exp", (a,), None, self._shapes[a])

    def log(self, a):
        return self._node("log", (a,), None, self._shapes[a])

    def relu(self, a):
        return self._node("relu", (a,), None, self._shapes[a])

    def clip(self, a, lo: float, hi: float):
        return self._node("clip", (a,), (float(lo), float(hi)), self._shapes[a])

    def sum(self, a):
        return self._node("sum", (a,), None, ())

    def mean(self, a):
        return self._node("mean", (a,), None, ())

    def sum_axis0(self, a):
        sa = self._shapes[a]
        if len(sa) != 2:
            raise ShapeMismatchError(f"sum_axis0 expects a matrix, got {sa}")
        return self._node("sum_axis0", (a,), None, (sa[1],))

    def sum_axis1(self, a):
        sa = self._shapes[a]
        if len(sa) != 2:
            raise ShapeMismatchError(f"sum_axis1 expects a matrix, got {sa}")
        return self._node("sum_axis1", (a,), None, (sa[0],))

    def rowmax(self, a):
        sa = self._shapes[a]
        if len(sa) != 2:
            raise ShapeMismatchError(f"rowmax expects a matrix, got {sa}")
        return self._node("rowmax", (a,), None, (sa[0],))

    def broadcast_rows(self, v, ref):
        """Tile a vector (m,) across the rows of ref's leading dimension."""
        sv, sr = self._shapes[v], self._shapes[ref]
        if len(sv) != 1 or len(sr) < 1:
            raise ShapeMismatchError(f"broadcast_rows: {sv} over {sr}")
        return self._node("broadcast_rows", (v, ref), None, (sr[0], sv[0]))

    def broadcast_cols(self, v, ref):
        """Tile a vector (n,) across the columns of a (n, m) ref."""
        sv, sr = self._shapes[v], self._shapes[ref]
        if len(sv) != 1 or len(sr) != 2:
            raise ShapeMismatchError(f"broadcast_cols: {sv} over {sr}")
        return self._node("broadcast_cols", (v, ref), None, (sr[0], sr[1]))

    def concat_cols(self, a, b):
        sa, sb = self._shapes[a], self._shapes[b]
        if len(sa) != 2 or len(sb) != 2 or sa[0] != sb[0]:
            raise ShapeMismatchError(f"concat_cols: {sa} ++ {sb}")
        return self._node("concat_cols", (a, b), None, (sa[0], sa[1] + sb[1]))

    def slice_cols(self, a, j0: int, j1: int):
        sa = self._shapes[a]
        if len(sa) != 2 or not (0 <= j0 <= j1 <= sa[1]):
            raise ShapeMismatchError(f"slice_cols: [{j0}:{j1}] of {sa}")
        return self._node("slice_cols", (a,), (j0, j1), (sa[0], j1 - j0))

    def pad_cols(self, a, j0: int, total: int):
        sa = self._shapes[a]
        if len(sa) != 2 or j0 + sa[1] > total:
            raise ShapeMismatchError(f"pad_cols: {sa} at {j0} into {total}")
        return self._node("pad_cols", (a,), (j0, total), (sa[0], total))

    def reshape(self, a, shape):
        """Static reshape; both shapes must be fully known."""
        sa = self._shapes[a]
        shape = tuple(int(s) for s in shape)
        if any(s is None for s in sa):
            raise ShapeMismatchError("cannot reshape a row-dynamic node")
        if int(np.prod(sa, dtype=int)) != int(np.prod(shape, dtype=int)):
            raise ShapeMismatchError(f"reshape: {sa} -> {shape}")
        return self._node("reshape", (a,), shape, shape)

    def gather_pairs(self, a, rows, cols):
        """Pick a[rows[i], cols[i]] for constant index arrays."""
        sa = self._shapes[a]
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        if len(sa) != 2 or rows.shape != cols.shape or rows.ndim != 1:
            raise ShapeMismatchError("gather_pairs: bad table or index shape")
        return self._node("gather_pairs", (a,), (rows, cols), (rows.size,))

    def scatter_pairs(self, g, rows, cols, shape):
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        shape = tuple(int(s) for s in shape)
        return self._node("scatter_pairs", (g,), (rows, cols, shape), shape)

    # zero-derivative helper nodes (piecewise-constant in their inputs)

    def step_mask(self, a):
        return self._node("step", (a,), None, self._shapes[a])

    def inside_mask(self, a, lo: float, hi: float):
        return self._node("inside", (a,), (float(lo), float(hi)), self._shapes[a])

    def geq_mask(self, a, b):
        shape = _binary_shape("geq_mask", self._shapes[a], self._shapes[b])
        return self._node("geqmask", (a, b), None, shape)

    def rowargmax_mask(self, a):
        return self._node("rowargmax_mask", (a,), None, self._shapes[a])

    def ones_like(self, a):
        return self._node("ones_like", (a,), None, self._shapes[a])

    def inv_size(self, a):
        return self._node("inv_size", (a,), None, ())

    # -- taped backward pass --------------------------------------------------

    def _ancestors(self, h: int) -> list[int]:
        seen = {h}
        stack = [h]
        while stack:
            node = stack.pop()
            for p in self._args[node]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return sorted(seen)

    def _reduce_to(self, g: int, target_shape) -> int:
        """Collapse an adjoint back onto a broadcast operand's shape."""
        gs = self._shapes[g]
        if gs == target_shape:
            return g
        if target_shape == ():
            return self.sum(g)
        if len(gs) == 2 and target_shape == (gs[1],):
            return self.sum_axis0(g)
        raise ShapeMismatchError(f"cannot reduce {gs} to {target_shape}")

    def grad(self, out: int, wrt: Sequence[int]) -> list[int]:
        """Append the adjoint computation of a scalar node; return handles.

        The returned nodes evaluate to d(out)/d(node) for each requested
        node. Because adjoints are built from the same op set, they can be
        differentiated again for second-order terms.
        """
        if self._shapes[out] != ():
            raise NonScalarOutputError(
                f"grad target must be scalar, got shape {self._shapes[out]}"
            )
        with self._lock:
            order = self._ancestors(out)
            adjoint: dict[int, int] = {out: self.const(1.0)}
            for h in reversed(order):
                gh = adjoint.get(h)
                if gh is None:
                    continue
                builder = _VJP.get(self._ops[h])
                if builder is None:
                    continue
                for parent, contribution in builder(self, h, gh):
                    if parent in adjoint:
                        adjoint[parent] = self.add(adjoint[parent], contribution)
                    else:
                        adjoint[parent] = contribution
            result = []
            for w in wrt:
                gh = adjoint.get(w)
                if gh is None:
                    shape = self._shapes[w]
                    if any(s is None for s in shape):
                        raise ShapeMismatchError(
                            "zero adjoint for a row-dynamic node is ambiguous"
                        )
                    gh = self.const(np.zeros(shape))
                result.append(gh)
            self._plan_cache.clear()
            return result

    def _ensure_flat_grad(self) -> list[int]:
        with self._lock:
            handles = self._flat_grad_handles
        if handles is not None:
            return handles
        if self.output is None:
            raise NonScalarOutputError("graph has no designated output")
        handles = self.grad(self.output, self._param_handles)
        with self._lock:
            self._flat_grad_handles = handles
        return handles

    # -- evaluation ---------------------------------------------------------

    def _plan(self, outputs: tuple[int, ...]) -> list:
        """Compiled evaluation schedule for the ancestors of ``outputs``.

        Entries are (handle, kind, payload): kind 0 = const (payload is the
        value), 1 = param (offset, shape), 2 = input (name, shape), 3 = op
        (eval fn, args, aux, boundary-check fn or None).
        """
        cached = self._plan_cache.get(outputs)
        if cached is not None:
            return cached
        seen: set[int] = set()
        stack = list(outputs)
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            stack.extend(self._args[node])
        plan = []
        for h in sorted(seen):
            op = self._ops[h]
            aux = self._aux[h]
            if op == "const":
                plan.append((h, 0, aux))
            elif op == "param":
                plan.append((h, 1, aux))
            elif op == "input":
                plan.append((h, 2, aux))
            else:
                plan.append(
                    (h, 3, (_EVAL[op], self._args[h], aux, _BOUNDARY_CHECKS.get(op), op))
                )
        self._plan_cache[outputs] = plan
        return plan

    def eval(
        self,
        params: ParamVector | np.ndarray | None = None,
        inputs: dict[str, np.ndarray] | None = None,
        outputs: int | Sequence[int] | None = None,
        boundary_flags: list | None = None,
    ):
        """Forward-evaluate the requested handles.

        ``params`` binds parameter leaves from one flat vector; ``inputs``
        binds input leaves by name (all declared inputs reachable from the
        requested outputs must be supplied). Allocates a per-call cache, so
        repeated and concurrent calls are independent; identical bindings
        give bit-identical results.
        """
        single = outputs is None or isinstance(outputs, (int, np.integer))
        if outputs is None:
            if self.output is None:
                raise NonScalarOutputError("graph has no designated output")
            outs = (self.output,)
        elif single:
            outs = (int(outputs),)
        else:
            outs = tuple(int(o) for o in outputs)

        flat = None
        if params is not None:
            flat = params.values if isinstance(params, ParamVector) else params
            flat = np.asarray(flat, dtype=np.float64).ravel()
            if flat.size != self._param_size:
                raise ShapeMismatchError(
                    f"graph expects {self._param_size} parameters, got {flat.size}"
                )
        elif self._param_size:
            raise InputBindingError("graph has parameter leaves but params is None")

        bound = inputs or {}
        plan = self._plan(outs)
        vals: list = [None] * len(self._ops)
        check_boundaries = boundary_flags is not None
        for h, kind, payload in plan:
            if kind == 3:
                fn, args, aux, boundary_fn, op = payload
                vals[h] = fn(vals, args, aux)
                if check_boundaries and boundary_fn is not None:
                    if boundary_fn(vals, args, aux):
                        boundary_flags.append((h, op))
            elif kind == 0:
                vals[h] = payload
            elif kind == 1:
                offset, shape, width = payload
                vals[h] = flat[offset : offset + width].reshape(shape)
            else:
                name, shape = payload
                if name not in bound:
                    raise InputBindingError(f"missing input binding {name!r}")
                arr = np.asarray(bound[name], dtype=np.float64)
                if len(arr.shape) != len(shape) or any(
                    s is not None and s != a for s, a in zip(shape, arr.shape)
                ):
                    raise InputBindingError(
                        f"input {name!r} expects shape {shape}, got {arr.shape}"
                    )
                vals[h] = arr
        if single:
            return vals[outs[0]]
        return [vals[o] for o in outs]


# ---------------------------------------------------------------------------
# Per-op forward evaluation


def _ev_add(v, a, aux):
    return v[a[0]] + v[a[1]]


def _ev_sub(v, a, aux):
    return v[a[0]] - v[a[1]]


def _ev_mul(v, a, aux):
    return v[a[0]] * v[a[1]]


def _ev_div(v, a, aux):
    return v[a[0]] / v[a[1]]


def _ev_maximum(v, a, aux):
    return np.maximum(v[a[0]], v[a[1]])


_EVAL: dict[str, Callable] = {
    "add": _ev_add,
    "sub": _ev_sub,
    "mul": _ev_mul,
    "div": _ev_div,
    "maximum": _ev_maximum,
    "neg": lambda v, a, x: -v[a[0]],
    "matmul": lambda v, a, x: v[a[0]] @ v[a[1]],
    "transpose": lambda v, a, x: v[a[0]].T,
    "outer": lambda v, a, x: np.outer(v[a[0]], v[a[1]]),
    "pow_const": lambda v, a, x: v[a[0]] ** x,
    "tanh": lambda v, a, x: np.tanh(v[a[0]]),
    "exp": lambda v, a, x: np.exp(v[a[0]]),
    "log": lambda v, a, x: np.log(v[a[0]]),
    "relu": lambda v, a, x: np.maximum(v[a[0]], 0.0),
    "clip": lambda v, a, x: np.clip(v[a[0]], x[0], x[1]),
    "sum": lambda v, a, x: np.sum(v[a[0]]),
    "mean": lambda v, a, x: np.mean(v[a[0]]),
    "sum_axis0": lambda v, a, x: np.sum(v[a[0]], axis=0),
    "sum_axis1": lambda v, a, x: np.sum(v[a[0]], axis=1),
    "rowmax": lambda v, a, x: np.max(v[a[0]], axis=1),
    "broadcast_rows": lambda v, a, x: np.broadcast_to(
        v[a[0]], (v[a[1]].shape[0], v[a[0]].shape[0])
    ),
    "broadcast_cols": lambda v, a, x: np.broadcast_to(
        v[a[0]][:, None], (v[a[0]].shape[0], v[a[1]].shape[1])
    ),
    "concat_cols": lambda v, a, x: np.concatenate((v[a[0]], v[a[1]]), axis=1),
    "slice_cols": lambda v, a, x: v[a[0]][:, x[0] : x[1]],
    "pad_cols": lambda v, a, x: _pad_cols(v[a[0]], x[0], x[1]),
    "reshape": lambda v, a, x: np.reshape(v[a[0]], x),
    "gather_pairs": lambda v, a, x: v[a[0]][x[0], x[1]],
    "scatter_pairs": lambda v, a, x: _scatter_pairs(v[a[0]], x),
    "step": lambda v, a, x: (v[a[0]] > 0.0).astype(np.float64),
    "inside": lambda v, a, x: (
        (v[a[0]] > x[0]) & (v[a[0]] < x[1])
    ).astype(np.float64),
    "geqmask": lambda v, a, x: (v[a[0]] >= v[a[1]]).astype(np.float64),
    "rowargmax_mask": lambda v, a, x: _rowargmax_mask(v[a[0]]),
    "ones_like": lambda v, a, x: np.ones_like(v[a[0]]),
    "inv_size": lambda v, a, x: np.float64(1.0 / v[a[0]].size),
}


def _pad_cols(arr, j0, total):
    out = np.zeros((arr.shape[0], total))
    out[:, j0 : j0 + arr.shape[1]] = arr
    return out


def _scatter_pairs(g, aux):
    rows, cols, shape = aux
    out = np.zeros(shape)
    np.add.at(out, (rows, cols), g)
    return out


def _rowargmax_mask(arr):
    mask = np.zeros_like(arr)
    mask[np.arange(arr.shape[0]), np.argmax(arr, axis=1)] = 1.0
    return mask


_BOUNDARY_CHECKS: dict[str, Callable] = {
    "relu": lambda v, a, x: bool(np.any(v[a[0]] == 0.0)),
    "clip": lambda v, a, x: bool(np.any((v[a[0]] == x[0]) | (v[a[0]] == x[1]))),
    "maximum": lambda v, a, x: bool(np.any(v[a[0]] == v[a[1]])),
    "rowmax": lambda v, a, x: bool(
        np.any(np.sum(v[a[0]] == np.max(v[a[0]], axis=1, keepdims=True), axis=1) > 1)
    ),
}


# ---------------------------------------------------------------------------
# Per-op adjoint builders. Each returns (parent, contribution-handle) pairs,
# expressed through graph ops so the backward pass is itself differentiable.


def _vjp_add(g: Graph, h, gh):
    a, b = g._args[h]
    return [
        (a, g._reduce_to(gh, g._shapes[a])),
        (b, g._reduce_to(gh, g._shapes[b])),
    ]


def _vjp_sub(g: Graph, h, gh):
    a, b = g._args[h]
    return [
        (a, g._reduce_to(gh, g._shapes[a])),
        (b, g._reduce_to(g.neg(gh), g._shapes[b])),
    ]


def _vjp_mul(g: Graph, h, gh):
    a, b = g._args[h]
    return [
        (a, g._reduce_to(g.mul(gh, b), g._shapes[a])),
        (b, g._reduce_to(g.mul(gh, a), g._shapes[b])),
    ]


def _vjp_div(g: Graph, h, gh):
    a, b = g._args[h]
    da = g.div(gh, b)
    db = g.neg(g.mul(gh, g.div(a, g.mul(b, b))))
    return [
        (a, g._reduce_to(da, g._shapes[a])),
        (b, g._reduce_to(db, g._shapes[b])),
    ]


def _vjp_maximum(g: Graph, h, gh):
    a, b = g._args[h]
    mask = g.geq_mask(a, b)
    da = g.mul(gh, mask)
    db = g.mul(gh, g.sub(g.const(1.0), mask))
    return [
        (a, g._reduce_to(da, g._shapes[a])),
        (b, g._reduce_to(db, g._shapes[b])),
    ]


def _vjp_matmul(g: Graph, h, gh):
    a, b = g._args[h]
    sa, sb = g._shapes[a], g._shapes[b]
    if len(sa) == 2 and len(sb) == 2:
        return [
            (a, g.matmul(gh, g.transpose(b))),
            (b, g.matmul(g.transpose(a), gh)),
        ]
    if len(sa) == 2 and len(sb) == 1:
        return [(a, g.outer(gh, b)), (b, g.matmul(g.transpose(a), gh))]
    if len(sa) == 1 and len(sb) == 2:
        return [(a, g.matmul(b, gh)), (b, g.outer(a, gh))]
    return [(a, g.mul(gh, b)), (b, g.mul(gh, a))]


def _vjp_pow_const(g: Graph, h, gh):
    (a,) = g._args[h]
    p = g._aux[h]
    return [(a, g.mul(g.mul(gh, g.const(p)), g.pow_const(a, p - 1.0)))]


def _vjp_tanh(g: Graph, h, gh):
    (a,) = g._args[h]
    return [(a, g.mul(gh, g.sub(g.const(1.0), g.mul(h, h))))]


def _vjp_exp(g: Graph, h, gh):
    (a,) = g._args[h]
    return [(a, g.mul(gh, h))]


def _vjp_log(g: Graph, h, gh):
    (a,) = g._args[h]
    return [(a, g.div(gh, a))]


def _vjp_relu(g: Graph, h, gh):
    (a,) = g._args[h]
    return [(a, g.mul(gh, g.step_mask(a)))]


def _vjp_clip(g: Graph, h, gh):
    (a,) = g._args[h]
    lo, hi = g._aux[h]
    return [(a, g.mul(gh, g.inside_mask(a, lo, hi)))]


def _vjp_sum(g: Graph, h, gh):
    (a,) = g._args[h]
    return [(a, g.mul(gh, g.ones_like(a)))]


def _vjp_mean(g: Graph, h, gh):
    (a,) = g._args[h]
    return [(a, g.mul(g.mul(gh, g.inv_size(a)), g.ones_like(a)))]


def _vjp_sum_axis0(g: Graph, h, gh):
    (a,) = g._args[h]
    return [(a, g.broadcast_rows(gh, a))]


def _vjp_sum_axis1(g: Graph, h, gh):
    (a,) = g._args[h]
    return [(a, g.broadcast_cols(gh, a))]


def _vjp_rowmax(g: Graph, h, gh):
    (a,) = g._args[h]
    return [(a, g.mul(g.broadcast_cols(gh, a), g.rowargmax_mask(a)))]


def _vjp_broadcast_rows(g: Graph, h, gh):
    v, _ref = g._args[h]
    return [(v, g.sum_axis0(gh))]


def _vjp_broadcast_cols(g: Graph, h, gh):
    v, _ref = g._args[h]
    return [(v, g.sum_axis1(gh))]


def _vjp_concat_cols(g: Graph, h, gh):
    a, b = g._args[h]
    wa = g._shapes[a][1]
    wb = g._shapes[b][1]
    return [
        (a, g.slice_cols(gh, 0, wa)),
        (b, g.slice_cols(gh, wa, wa + wb)),
    ]


def _vjp_slice_cols(g: Graph, h, gh):
    (a,) = g._args[h]
    j0, _j1 = g._aux[h]
    return [(a, g.pad_cols(gh, j0, g._shapes[a][1]))]


def _vjp_pad_cols(g: Graph, h, gh):
    (a,) = g._args[h]
    j0, _total = g._aux[h]
    return [(a, g.slice_cols(gh, j0, j0 + g._shapes[a][1]))]


def _vjp_reshape(g: Graph, h, gh):
    (a,) = g._args[h]
    return [(a, g.reshape(gh, g._shapes[a]))]


def _vjp_gather_pairs(g: Graph, h, gh):
    (a,) = g._args[h]
    rows, cols = g._aux[h]
    return [(a, g.scatter_pairs(gh, rows, cols, g._shapes[a]))]


def _vjp_scatter_pairs(g: Graph, h, gh):
    (a,) = g._args[h]
    rows, cols, _shape = g._aux[h]
    return [(a, g.gather_pairs(gh, rows, cols))]


def _vjp_neg(g: Graph, h, gh):
    (a,) = g._args[h]
    return [(a, g.neg(gh))]


def _vjp_transpose(g: Graph, h, gh):
    (a,) = g._args[h]
    return [(a, g.transpose(gh))]


def _vjp_outer(g: Graph, h, gh):
    a, b = g._args[h]
    return [(a, g.matmul(gh, b)), (b, g.matmul(g.transpose(gh), a))]


_VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "maximum": _vjp_maximum,
    "neg": _vjp_neg,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "outer": _vjp_outer,
    "pow_const": _vjp_pow_const,
    "tanh": _vjp_tanh,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "relu": _vjp_relu,
    "clip": _vjp_clip,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "sum_axis0": _vjp_sum_axis0,
    "sum_axis1": _vjp_sum_axis1,
    "rowmax": _vjp_rowmax,
    "broadcast_rows": _vjp_broadcast_rows,
    "broadcast_cols": _vjp_broadcast_cols,
    "concat_cols": _vjp_concat_cols,
    "slice_cols": _vjp_slice_cols,
    "pad_cols": _vjp_pad_cols,
    "reshape": _vjp_reshape,
    "gather_pairs": _vjp_gather_pairs,
    "scatter_pairs": _vjp_scatter_pairs,
    # step/inside/geqmask/rowargmax_mask/ones_like/inv_size are
    # piecewise-constant: their parents receive no adjoint.
}


# ---------------------------------------------------------------------------
# Module-level API


def evaluate(
    graph: Graph,
    params: ParamVector | np.ndarray | None = None,
    inputs: dict[str, np.ndarray] | None = None,
    boundary_flags: list | None = None,
):
    """Forward value of the graph's designated output."""
    return graph.eval(params=params, inputs=inputs, boundary_flags=boundary_flags)


def _assemble_flat(graph: Graph, pieces: Sequence[np.ndarray]) -> np.ndarray:
    if not pieces:
        return np.zeros(0)
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in pieces])


def gradient(
    graph: Graph,
    params: ParamVector | np.ndarray,
    inputs: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """d(output)/d(params) as a flat vector aligned with the parameter layout.

    Masked coordinates are reported like any other; callers apply masks.
    """
    handles = graph._ensure_flat_grad()
    pieces = graph.eval(params=params, inputs=inputs, outputs=handles)
    return _assemble_flat(graph, pieces)


def grad_of_grad(
    graph: Graph,
    params: ParamVector | np.ndarray,
    outer: Callable[[Graph, list[int]], int],
    inputs: dict[str, np.ndarray] | None = None,
    boundary_flags: list | None = None,
) -> np.ndarray:
    """Differentiate a continuation of the taped gradient.

    ``outer`` receives the graph plus the inner gradient's node handles and
    must return a scalar handle built from them; the result is d(outer)/d(params)
    including the second-order terms that flow through the inner gradient.
    Kinked nodes (clip, relu, max) contribute their subgradient and can be
    observed via ``boundary_flags``.
    """
    if graph.output is None:
        raise NonScalarOutputError("graph has no designated output")
    inner = graph.grad(graph.output, graph.param_handles)
    final = outer(graph, inner)
    if graph.shape(final) != ():
        raise NonScalarOutputError("outer continuation must produce a scalar")
    handles = graph.grad(final, graph.param_handles)
    pieces = graph.eval(
        params=params, inputs=inputs, outputs=handles, boundary_flags=boundary_flags
    )
    return _assemble_flat(graph, pieces)
