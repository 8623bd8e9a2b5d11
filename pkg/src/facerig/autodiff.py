"""Reverse-mode automatic differentiation on flat float64 numpy arrays.

A ``Tape`` records every primitive operation as it executes (define-by-run);
``Tape.backward`` replays the records in reverse to accumulate vector-Jacobian
products into the registered leaf parameters.  The op set is intentionally
small: affine layers, ELU, smooth clamping, elementwise arithmetic,
reductions, matmul, concat/stack/reshape and indexed gather.  Everything is
float64 and single-threaded, so identical inputs give bit-identical tapes,
losses and gradients.

``adadelta_step`` and ``grad_check`` live here too since they operate
directly on tapes and parameter lists.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ShapeMismatch",
    "NonFiniteValue",
    "add", "sub", "mul", "div", "scale", "hadamard", "neg",
    "exp", "log", "log1p", "tanh", "sqrt", "sin", "cos",
    "elu", "softclip", "affine", "matmul", "matvec",
    "concat", "stack", "reshape", "swapaxes", "getitem",
    "tsum", "sum_of_squares",
    "AdaDeltaState", "adadelta_step",
    "GradCheckReport", "GradCheckError", "grad_check",
]


class ShapeMismatch(ValueError):
    """Raised when an op receives incompatibly shaped inputs."""


class NonFiniteValue(FloatingPointError):
    """Raised when a leaf, gradient or probed loss is not finite."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        raise TypeError("expected a plain array, got a Tensor")
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """One node on a tape: a float64 value plus the vjp of the op that made it.

    Leaves are created with :meth:`Tape.leaf`; everything else comes from the
    op functions in this module.  ``parents`` always reference strictly
    earlier nodes, so the record list is acyclic by construction.
    """

    __slots__ = ("tape", "value", "op", "parents", "vjp", "tid", "name")

    def __init__(self, tape, value, op, parents, vjp, name=""):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.tid = tape._register(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape}, tid={self.tid})"

    # arithmetic sugar; non-Tensor operands are treated as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Append-only record of primitive ops, replayed in reverse by backward().

    Parameters registered through :meth:`leaf` receive gradients; gradients of
    unused leaves are zero.  One tape per training step; construction and
    backward are single-threaded.
    """

    def __init__(self, grad_enabled: bool = True):
        self.grad_enabled = grad_enabled
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def _register(self, node: Tensor) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value, name: str = "") -> Tensor:
        value = np.ascontiguousarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteValue(f"leaf {name!r} contains non-finite entries")
        t = Tensor(self, value, "leaf", (), None, name=name)
        self.leaves.append(t)
        return t

    def constant(self, value, name: str = "") -> Tensor:
        """A node that participates in the graph but receives no gradient."""
        value = np.ascontiguousarray(value, dtype=np.float64)
        return Tensor(self, value, "const", (), None, name=name)

    def backward(self, output: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(output)/d(leaf) for every registered leaf.

        ``output`` must be a scalar node on this tape.  Returns a dict keyed
        by leaf Tensor; leaves the output does not depend on map to zeros.
        """
        if output.tape is not self:
            raise ValueError("output node belongs to a different tape")
        if output.value.ndim != 0 and output.value.size != 1:
            raise ShapeMismatch(
                f"backward seed must be scalar, got shape {output.value.shape}"
            )
        grads: dict[int, np.ndarray] = {
            output.tid: np.ones_like(output.value)
        }
        for node in reversed(self.nodes[: output.tid + 1]):
            if node.vjp is None:
                continue  # leaves/constants keep their accumulated grad
            g = grads.pop(node.tid, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                acc = grads.get(parent.tid)
                grads[parent.tid] = pg if acc is None else acc + pg
        out: dict[Tensor, np.ndarray] = {}
        for leaf in self.leaves:
            g = grads.get(leaf.tid)
            out[leaf] = np.zeros_like(leaf.value) if g is None else g
        return out


def _node(op: str, inputs: Sequence, value: np.ndarray, vjp_factory) -> Tensor:
    """Create a node from the op name, its Tensor inputs and a vjp factory.

    ``inputs`` holds only the Tensor arguments; constants are baked into the
    closures.  When the tape has gradients disabled the vjp factory is never
    called, which keeps no-grad rendering cheap.
    """
    tape = inputs[0].tape
    for t in inputs[1:]:
        if t.tape is not tape:
            raise ValueError(f"op {op!r}: inputs from different tapes")
    vjp = vjp_factory() if tape.grad_enabled else None
    return Tensor(tape, value, op, tuple(inputs), vjp)


def primitive(op: str, inputs: Sequence[Tensor], value, vjp: Callable) -> Tensor:
    """Register a custom primitive with a hand-written vjp.

    ``vjp(g)`` must return one gradient array (or None) per entry of
    ``inputs``.  Used for fused ops such as the splat rasterizer.
    """
    value = np.asarray(value, dtype=np.float64)
    return _node(op, inputs, value, lambda: vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(op: str, a, b, fwd, vjp_factory) -> Tensor:
    ts = [x for x in (a, b) if isinstance(x, Tensor)]
    av = a.value if isinstance(a, Tensor) else _as_array(a)
    bv = b.value if isinstance(b, Tensor) else _as_array(b)
    try:
        value = fwd(av, bv)
    except ValueError as err:
        raise ShapeMismatch(f"{op}: shapes {av.shape} and {bv.shape}: {err}") from None
    want = tuple(x for x in (a, b) if isinstance(x, Tensor))

    def factory():
        raw = vjp_factory(av, bv)

        def vjp(g):
            ga, gb = raw(g)
            outs = []
            if isinstance(a, Tensor):
                outs.append(_unbroadcast(ga, av.shape) if ga is not None else None)
            if isinstance(b, Tensor):
                outs.append(_unbroadcast(gb, bv.shape) if gb is not None else None)
            return outs

        return vjp

    return _node(op, want or ts, value, factory)


def add(a, b):
    return _binary("add", a, b, np.add, lambda av, bv: lambda g: (g, g))


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda av, bv: lambda g: (g, -g))


def mul(a, b):
    return _binary("mul", a, b, np.multiply,
                   lambda av, bv: lambda g: (g * bv, g * av))


def div(a, b):
    return _binary("div", a, b, np.divide,
                   lambda av, bv: lambda g: (g / bv, -g * av / (bv * bv)))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    return mul(x, float(c))


# elementwise product; alias kept because both names are used in call sites
hadamard = mul


def neg(x: Tensor) -> Tensor:
    return _node("neg", (x,), -x.value, lambda: lambda g: (-g,))


def pow_const(x: Tensor, p) -> Tensor:
    p = float(p)
    xv = x.value
    return _node("pow", (x,), xv ** p,
                 lambda: lambda g: (g * p * xv ** (p - 1.0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.value)
    return _node("exp", (x,), out, lambda: lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xv = x.value
    return _node("log", (x,), np.log(xv), lambda: lambda g: (g / xv,))


def log1p(x: Tensor) -> Tensor:
    xv = x.value
    return _node("log1p", (x,), np.log1p(xv),
                 lambda: lambda g: (g / (1.0 + xv),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.value)
    return _node("tanh", (x,), out,
                 lambda: lambda g: (g * (1.0 - out * out),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.value)
    return _node("sqrt", (x,), out,
                 lambda: lambda g: (g * 0.5 / out,))


def sin(x: Tensor) -> Tensor:
    xv = x.value
    return _node("sin", (x,), np.sin(xv),
                 lambda: lambda g: (g * np.cos(xv),))


def cos(x: Tensor) -> Tensor:
    xv = x.value
    return _node("cos", (x,), np.cos(xv),
                 lambda: lambda g: (-g * np.sin(xv),))


def elu(x: Tensor) -> Tensor:
    """Exponential linear unit with alpha = 1."""
    xv = x.value
    out = np.where(xv > 0.0, xv, np.expm1(xv))

    def factory():
        slope = np.where(xv > 0.0, 1.0, out + 1.0)  # exp(x) on the left branch
        return lambda g: (g * slope,)

    return _node("elu", (x,), out, factory)


def _softclip_fwd(x: np.ndarray, lo: float, hi: float, margin: float):
    """Identity on [lo+m, hi-m]; C2 exponential shoulders saturating at lo/hi.

    The shoulder hi - m*exp(-t - t^2/2) matches value, slope and curvature at
    the joint, never exceeds hi, and keeps gradients nonzero everywhere.
    """
    m = margin
    t_hi = (x - (hi - m)) / m
    t_lo = ((lo + m) - x) / m
    out = np.array(x, dtype=np.float64, copy=True)
    dout = np.ones_like(out)
    up = t_hi > 0.0
    if np.any(up):
        t = t_hi[up]
        e = np.exp(-t - 0.5 * t * t)
        out[up] = hi - m * e
        dout[up] = (1.0 + t) * e
    dn = t_lo > 0.0
    if np.any(dn):
        t = t_lo[dn]
        e = np.exp(-t - 0.5 * t * t)
        out[dn] = lo + m * e
        dout[dn] = (1.0 + t) * e
    return out, dout


def softclip(x: Tensor, lo: float = 0.0, hi: float = 1.0,
             margin: float = 0.1) -> Tensor:
    """Smooth clamp into (lo, hi): exact identity away from the bounds."""
    out, dout = _softclip_fwd(x.value, lo, hi, margin)
    return _node("softclip", (x,), out, lambda: lambda g: (g * dout,))


def softclip_np(x: np.ndarray, lo: float = 0.0, hi: float = 1.0,
                margin: float = 0.1) -> np.ndarray:
    """Plain-array version of :func:`softclip` for frozen, non-trained paths."""
    return _softclip_fwd(np.asarray(x, dtype=np.float64), lo, hi, margin)[0]


def affine(W, x, b) -> Tensor:
    """x @ W.T + b for x of shape (..., n_in), W (n_out, n_in), b (n_out,)."""
    Wv = W.value if isinstance(W, Tensor) else _as_array(W)
    xv = x.value if isinstance(x, Tensor) else _as_array(x)
    bv = b.value if isinstance(b, Tensor) else _as_array(b)
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[1] or bv.shape != (Wv.shape[0],):
        raise ShapeMismatch(
            f"affine: W {Wv.shape}, x {xv.shape}, b {bv.shape} are incompatible"
        )
    value = xv @ Wv.T + bv
    inputs = tuple(t for t in (W, x, b) if isinstance(t, Tensor))

    def factory():
        def vjp(g):
            outs = []
            if isinstance(W, Tensor):
                gf = g.reshape(-1, Wv.shape[0])
                xf = xv.reshape(-1, Wv.shape[1])
                outs.append(gf.T @ xf)
            if isinstance(x, Tensor):
                outs.append(g @ Wv)
            if isinstance(b, Tensor):
                outs.append(g.reshape(-1, Wv.shape[0]).sum(axis=0))
            return outs

        return vjp

    return _node("affine", inputs, value, factory)


def matmul(a, b) -> Tensor:
    """np.matmul with gradients; supports (..,m,k)@(..,k,n) and (m,k)@(k,)."""
    av = a.value if isinstance(a, Tensor) else _as_array(a)
    bv = b.value if isinstance(b, Tensor) else _as_array(b)
    try:
        value = np.matmul(av, bv)
    except ValueError as err:
        raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}: {err}") from None
    inputs = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def factory():
        def vjp(g):
            gm = g
            a2, b2 = av, bv
            if bv.ndim == 1:  # promote vector operand to a column
                b2 = bv[:, None]
                gm = g[..., None]
            if av.ndim == 1:
                a2 = av[None, :]
                gm = gm[..., None, :]
            ga = gm @ np.swapaxes(b2, -1, -2)
            gb = np.swapaxes(a2, -1, -2) @ gm
            outs = []
            if isinstance(a, Tensor):
                outs.append(_unbroadcast(ga.reshape(ga.shape), av.shape)
                            if ga.shape != av.shape else ga)
            if isinstance(b, Tensor):
                gb = _unbroadcast(gb, b2.shape)
                outs.append(gb[..., 0] if bv.ndim == 1 else gb)
            return outs

        return vjp

    return _node("matmul", inputs, value, factory)


def matvec(M, v) -> Tensor:
    """Matrix-vector product M @ v."""
    return matmul(M, v)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    values = [x.value for x in xs]
    value = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def factory():
        return lambda g: tuple(np.array_split(g, splits, axis=axis))

    return _node("concat", tuple(xs), value, factory)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    value = np.stack([x.value for x in xs], axis=axis)

    def factory():
        def vjp(g):
            gm = np.moveaxis(g, axis, 0)
            return tuple(gm[i] for i in range(len(xs)))

        return vjp

    return _node("stack", tuple(xs), value, factory)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.value.shape
    return _node("reshape", (x,), x.value.reshape(shape),
                 lambda: lambda g: (g.reshape(orig),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    value = np.swapaxes(x.value, a, b).copy()
    return _node("swapaxes", (x,), value,
                 lambda: lambda g: (np.swapaxes(g, a, b),))


def getitem(x: Tensor, key) -> Tensor:
    """Basic/fancy indexing; the vjp scatters back with duplicate handling."""
    value = x.value[key]
    shape = x.value.shape
    has_int_array = any(
        isinstance(k, np.ndarray) and k.dtype.kind in "iu"
        for k in (key if isinstance(key, tuple) else (key,))
    )

    def factory():
        def vjp(g):
            buf = np.zeros(shape, dtype=np.float64)
            if has_int_array:
                np.add.at(buf, key, g)
            else:
                buf[key] += g
            return (buf,)

        return vjp

    return _node("getitem", (x,), np.array(value, copy=True), factory)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    value = x.value.sum(axis=axis, keepdims=keepdims)
    shape = x.value.shape

    def factory():
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).copy(),)

        return vjp

    return _node("sum", (x,), value, factory)


def sum_of_squares(x: Tensor) -> Tensor:
    """Scalar sum of squared entries."""
    xv = x.value
    value = np.array(np.dot(xv.ravel(), xv.ravel()))
    return _node("sum_of_squares", (x,), value,
                 lambda: lambda g: (2.0 * g * xv,))


def mean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.value.size)


# ---------------------------------------------------------------------------
# AdaDelta


@dataclass
class AdaDeltaState:
    """Accumulator state for AdaDelta (decayed E[g^2] and E[dx^2] per param).

    ``lr`` scales the adaptive update; the accumulators themselves follow the
    original recurrences, so the update direction is learning-rate free.
    """

    lr: float = 0.01
    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: list = field(default_factory=list)
    sq_delta: list = field(default_factory=list)

    def _ensure(self, params):
        if not self.sq_grad:
            self.sq_grad = [np.zeros_like(p) for p in params]
            self.sq_delta = [np.zeros_like(p) for p in params]
        if len(self.sq_grad) != len(params):
            raise ShapeMismatch("adadelta state does not match parameter list")


def adadelta_step(state: AdaDeltaState, params: list[np.ndarray],
                  grads: list[np.ndarray]) -> list[np.ndarray]:
    """One in-place AdaDelta update; validates everything before mutating."""
    state._ensure(params)
    if len(grads) != len(params):
        raise ShapeMismatch(
            f"adadelta_step: {len(params)} params but {len(grads)} grads"
        )
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeMismatch(
                f"adadelta_step: param {i} shape {p.shape} != grad {g.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteValue(f"adadelta_step: non-finite gradient for param {i}")
    rho, eps, lr = state.rho, state.eps, state.lr
    for p, g, eg, ed in zip(params, grads, state.sq_grad, state.sq_delta):
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        p -= lr * delta
        ed *= rho
        ed += (1.0 - rho) * delta * delta
    return params


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


class GradCheckError(RuntimeError):
    """Raised when a finite-difference probe produced a non-finite loss."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: int
    worst_coord: int
    worst_ad: float
    worst_fd: float
    num_checked: int
    failures: list = field(default_factory=list)  # (param, coord, rel_err)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(loss_fn, params: list[np.ndarray], step: float = 1e-5,
               tol: float = 1e-4, rng: np.random.Generator | None = None,
               num_probes: int = 120, floor: float | None = None,
               grads_override: list[np.ndarray] | None = None) -> GradCheckReport:
    """Compare backward() against central finite differences.

    ``loss_fn(leaves)`` receives one leaf Tensor per entry of ``params`` (all
    on a fresh tape) and returns a scalar Tensor.  Probes ``num_probes``
    random coordinates (all of them when the parameter count is smaller) and
    reports the worst relative error and its location.

    The relative-error denominator is floored at 1e-6 times the largest
    analytic gradient entry, so coordinates whose true gradient sits at the
    finite-difference noise level do not register as failures.
    ``grads_override`` substitutes the analytic gradients, which lets tests
    verify that a corrupted gradient is flagged at the right coordinate.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    params = [np.asarray(p, dtype=np.float64) for p in params]

    tape = Tape()
    leaves = [tape.leaf(p, name=f"p{i}") for i, p in enumerate(params)]
    loss = loss_fn(leaves)
    grads = tape.backward(loss)
    ad = [grads[leaf] for leaf in leaves]
    if grads_override is not None:
        ad = grads_override
    if floor is None:
        gmax = max((float(np.max(np.abs(g))) for g in ad if g.size), default=0.0)
        floor = 1e-6 * max(1.0, gmax)

    def eval_at(probe_params, which, coord, direction):
        t = Tape(grad_enabled=False)
        ls = [t.leaf(p) for p in probe_params]
        val = float(loss_fn(ls).value)
        if not np.isfinite(val):
            raise GradCheckError(
                f"non-finite loss at probe param={which} coord={coord} "
                f"direction={direction:+d}"
            )
        return val

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    total = len(coords)
    if total > num_probes:
        picked = rng.choice(total, size=num_probes, replace=False)
        coords = [coords[int(k)] for k in sorted(picked)]

    report = GradCheckReport(0.0, -1, -1, 0.0, 0.0, len(coords))
    for (pi, ci) in coords:
        bumped = [p.copy() for p in params]
        flat = bumped[pi].reshape(-1)
        orig = flat[ci]
        flat[ci] = orig + step
        lo_hi = eval_at(bumped, pi, ci, +1)
        flat[ci] = orig - step
        lo_lo = eval_at(bumped, pi, ci, -1)
        fd = (lo_hi - lo_lo) / (2.0 * step)
        a = float(ad[pi].reshape(-1)[ci])
        err = _rel_err(a, fd, floor)
        if err > report.max_rel_error:
            report.max_rel_error = err
            report.worst_param, report.worst_coord = pi, ci
            report.worst_ad, report.worst_fd = a, fd
        if err >= tol:
            report.failures.append((pi, ci, err))
    return report
