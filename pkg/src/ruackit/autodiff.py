"""A small reverse-mode differentiation tape over float64 grids.

Operations are recorded as they run (define-by-run).  A recorded tape can be
replayed with new values bound to its named leaves (:func:`forward_eval`),
which is what finite-difference checks and re-evaluation rely on.

The primitive set is fixed; everything the models need is composed from it::

    tape = Tape()
    x = tape.param("x", 3.0)
    y = x * x + x
    tape.output("y", y)
    backward(tape, {"y": 1.0})["x"]   # -> 7.0
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.special import expit

from . import grid as G


class TapeError(RuntimeError):
    """Raised for malformed graphs, with the offending node id."""

    def __init__(self, message: str, node_id: int | None = None, op: str | None = None):
        self.node_id = node_id
        self.op = op
        where = f"node {node_id} ({op}): " if node_id is not None else ""
        super().__init__(where + message)


class ShapeError(TapeError):
    pass


class NonFiniteError(TapeError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    value: Any = None
    saved: Any = None


LEAF_OPS = ("input", "param", "const")


# --------------------------------------------------------------------------
# primitive definitions: forward(values, attrs) -> (out, saved)
#                        backward(g, values, out, saved, attrs) -> input grads


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape(v):
    return np.shape(v)


_PRIMS: dict[str, tuple[Callable, Callable]] = {}


def _prim(name):
    def register(pair):
        _PRIMS[name] = pair
        return pair
    return register


_prim("add")((
    lambda v, a: (v[0] + v[1], None),
    lambda g, v, o, s, a: (_unbroadcast(g, _shape(v[0])), _unbroadcast(g, _shape(v[1]))),
))
_prim("sub")((
    lambda v, a: (v[0] - v[1], None),
    lambda g, v, o, s, a: (_unbroadcast(g, _shape(v[0])), _unbroadcast(-g, _shape(v[1]))),
))
_prim("mul")((
    lambda v, a: (v[0] * v[1], None),
    lambda g, v, o, s, a: (_unbroadcast(g * v[1], _shape(v[0])),
                           _unbroadcast(g * v[0], _shape(v[1]))),
))
_prim("div")((
    lambda v, a: (v[0] / v[1], None),
    lambda g, v, o, s, a: (_unbroadcast(g / v[1], _shape(v[0])),
                           _unbroadcast(-g * o / v[1], _shape(v[1]))),
))
_prim("neg")((lambda v, a: (-v[0], None), lambda g, v, o, s, a: (-g,)))
_prim("exp")((lambda v, a: (np.exp(v[0]), None), lambda g, v, o, s, a: (g * o,)))
_prim("log")((lambda v, a: (np.log(v[0]), None), lambda g, v, o, s, a: (g / v[0],)))
_prim("pow")((
    lambda v, a: (np.power(v[0], a["exponent"]), None),
    lambda g, v, o, s, a: (g * a["exponent"] * np.power(v[0], a["exponent"] - 1),),
))
_prim("sigmoid")((lambda v, a: (expit(v[0]), None), lambda g, v, o, s, a: (g * o * (1 - o),)))
_prim("tanh")((lambda v, a: (np.tanh(v[0]), None), lambda g, v, o, s, a: (g * (1 - o * o),)))
_prim("softplus")((
    lambda v, a: (np.logaddexp(0.0, v[0]), None),
    lambda g, v, o, s, a: (g * expit(v[0]),),
))
# hard ReLU forward, identity backward
_prim("ste_relu")((lambda v, a: (np.maximum(v[0], 0.0), None), lambda g, v, o, s, a: (g,)))
_prim("lgamma")((lambda v, a: (G.lgamma(v[0]), None), lambda g, v, o, s, a: (g * G.digamma(v[0]),)))


def _sum_fwd(v, a):
    return np.sum(v[0], axis=a.get("axis"), keepdims=a.get("keepdims", False)), None


def _sum_bwd(g, v, o, s, a):
    shape = _shape(v[0])
    axis = a.get("axis")
    if axis is not None and not a.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def _mean_fwd(v, a):
    return np.mean(v[0], axis=a.get("axis"), keepdims=a.get("keepdims", False)), None


def _mean_bwd(g, v, o, s, a):
    shape = _shape(v[0])
    axis = a.get("axis")
    n = np.size(v[0]) / max(np.size(o), 1)
    if axis is not None and not a.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape) / n,)


_prim("sum")((_sum_fwd, _sum_bwd))
_prim("mean")((_mean_fwd, _mean_bwd))


def _masked_mean_fwd(v, a):
    x, m = v
    axis = a.get("axis")
    den = np.sum(m * np.ones_like(x), axis=axis) + a["eps"]
    num = np.sum(x * m, axis=axis)
    return num / den, (num, den)


def _masked_mean_bwd(g, v, o, s, a):
    x, m = v
    num, den = s
    axis = a.get("axis")
    if axis is not None:
        g = np.expand_dims(g, axis)
        o_b = np.expand_dims(o, axis)
        den_b = np.expand_dims(den, axis)
    else:
        o_b, den_b = o, den
    gx = g * m / den_b
    gm = g * (x - o_b) / den_b
    return _unbroadcast(gx * np.ones_like(x * m), _shape(x)), _unbroadcast(gm * np.ones_like(x * m), _shape(m))


_prim("masked_mean")((_masked_mean_fwd, _masked_mean_bwd))


def _matmul_fwd(v, a):
    if np.ndim(v[0]) != 2 or np.ndim(v[1]) != 2:
        raise ValueError("matmul expects two 2-D grids")
    return v[0] @ v[1], None


_prim("matmul")((_matmul_fwd, lambda g, v, o, s, a: (g @ v[1].T, v[0].T @ g)))


def _conv_fwd(v, a):
    return G.conv3x3_forward(v[0], v[1])


def _conv_bwd(g, v, o, s, a):
    return G.conv3x3_backward(g, v[0].shape, v[1], s)


_prim("conv3x3")((_conv_fwd, _conv_bwd))


def _gs_fwd(v, a):
    return G.grid_sample_forward(v[0], v[1], a["border"])


def _gs_bwd(g, v, o, s, a):
    return G.grid_sample_backward(g, v[0].shape, s, a["border"])


_prim("grid_sample")((_gs_fwd, _gs_bwd))


def _weibull_fwd(v, a):
    lam, kap, u = v
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("uniform draws must lie in (0, 1)")
    e = -np.log1p(-u)
    w = lam * np.power(e, 1.0 / kap)
    return w, np.log(e)


def _weibull_bwd(g, v, o, s, a):
    lam, kap, _ = v
    glam = g * o / lam
    gkap = -g * o * s / (kap * kap)
    return _unbroadcast(glam, _shape(lam)), _unbroadcast(gkap, _shape(kap)), None


_prim("weibull")((_weibull_fwd, _weibull_bwd))
_prim("stop_gradient")((lambda v, a: (v[0], None), lambda g, v, o, s, a: (None,)))
_prim("grl")((lambda v, a: (v[0], None), lambda g, v, o, s, a: (-a["scale"] * g,)))

# structural helpers: no arithmetic, only layout
_prim("reshape")((
    lambda v, a: (np.reshape(v[0], a["shape"]), None),
    lambda g, v, o, s, a: (np.reshape(g, _shape(v[0])),),
))


def _concat_bwd(g, v, o, s, a):
    sizes = [np.shape(x)[a["axis"]] for x in v]
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=a["axis"]))


_prim("concat")((lambda v, a: (np.concatenate(v, axis=a["axis"]), None), _concat_bwd))


def _index_bwd(g, v, o, s, a):
    out = np.zeros(_shape(v[0]))
    np.add.at(out, a["key"], g)
    return (out,)


_prim("index")((lambda v, a: (np.asarray(v[0])[a["key"]], None), _index_bwd))
_prim("clip")((
    lambda v, a: (np.clip(v[0], a["lo"], a["hi"]), None),
    lambda g, v, o, s, a: (g * ((v[0] >= a["lo"]) & (v[0] <= a["hi"])),),
))

PRIMITIVES = tuple(_PRIMS)


# --------------------------------------------------------------------------
# tape and variable handles


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        node = self.tape.nodes[self.id]
        return f"Var(id={self.id}, op={node.op}, shape={self.shape})"

    def _lift(self, other):
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, o):
        return self.tape.apply("add", self, self._lift(o))

    def __radd__(self, o):
        return self.tape.apply("add", self._lift(o), self)

    def __sub__(self, o):
        return self.tape.apply("sub", self, self._lift(o))

    def __rsub__(self, o):
        return self.tape.apply("sub", self._lift(o), self)

    def __mul__(self, o):
        return self.tape.apply("mul", self, self._lift(o))

    def __rmul__(self, o):
        return self.tape.apply("mul", self._lift(o), self)

    def __truediv__(self, o):
        return self.tape.apply("div", self, self._lift(o))

    def __rtruediv__(self, o):
        return self.tape.apply("div", self._lift(o), self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __pow__(self, exponent):
        return self.tape.apply("pow", self, exponent=float(exponent))

    def __matmul__(self, o):
        return self.tape.apply("matmul", self, self._lift(o))

    def __getitem__(self, key):
        return self.tape.apply("index", self, key=key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.apply("reshape", self, shape=tuple(shape))

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.tape.apply("mean", self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of primitive operations.

    Parameters
    ----------
    eager : bool
        When true (default) each operation is evaluated as it is recorded.
        A lazy tape only records; values appear after :func:`forward_eval`.
    check_finite : bool
        Raise :class:`NonFiniteError` as soon as any node produces NaN/Inf.
    """

    def __init__(self, eager: bool = True, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.eager = eager
        self.check_finite = check_finite
        self.outputs: dict[str, int] = {}
        self._leaves: dict[str, int] = {}
        self.evaluated = eager

    def __len__(self):
        return len(self.nodes)

    # leaves -------------------------------------------------------------
    def _leaf(self, kind, name, value):
        if name is not None and name in self._leaves:
            raise TapeError(f"duplicate leaf name {name!r}")
        node = Node(kind, name=name, value=None if value is None else G.as_grid(value))
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        if name is not None:
            self._leaves[name] = nid
        return Var(self, nid)

    def input(self, name: str, value=None) -> Var:
        return self._leaf("input", name, value)

    def param(self, name: str, value=None) -> Var:
        return self._leaf("param", name, value)

    def const(self, value) -> Var:
        return self._leaf("const", None, value)

    def output(self, name: str, var: Var) -> Var:
        self.outputs[name] = var.id
        return var

    @property
    def param_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "param"]

    def var(self, name: str) -> Var:
        return Var(self, self._leaves[name])

    # recording ----------------------------------------------------------
    def apply(self, op: str, *args: Var, **attrs) -> Var:
        if op not in _PRIMS:
            raise TapeError(f"unknown primitive {op!r}")
        for a in args:
            if not isinstance(a, Var) or a.tape is not self:
                raise TapeError(f"{op}: operand does not belong to this tape")
        node = Node(op, tuple(a.id for a in args), attrs)
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        if self.eager:
            self._run(nid)
        return Var(self, nid)

    def _run(self, nid: int):
        node = self.nodes[nid]
        vals = [self.nodes[i].value for i in node.inputs]
        if any(v is None for v in vals):
            raise TapeError("input value not bound", nid, node.op)
        fwd, _ = _PRIMS[node.op]
        try:
            out, saved = fwd(vals, node.attrs)
        except ValueError as exc:
            raise ShapeError(str(exc), nid, node.op) from exc
        out = np.asarray(out, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite value produced", nid, node.op)
        node.value = out
        node.saved = saved

    def clear_values(self):
        """Drop every computed value; leaves keep their bound values."""
        for node in self.nodes:
            if node.op not in LEAF_OPS:
                node.value = None
                node.saved = None
        self.evaluated = False

    # convenience wrappers for the primitive set --------------------------
    def exp(self, x):
        return self.apply("exp", x)

    def log(self, x):
        return self.apply("log", x)

    def sigmoid(self, x):
        return self.apply("sigmoid", x)

    def tanh(self, x):
        return self.apply("tanh", x)

    def softplus(self, x):
        return self.apply("softplus", x)

    def ste_relu(self, x):
        return self.apply("ste_relu", x)

    def lgamma(self, x):
        return self.apply("lgamma", x)

    def masked_mean(self, x, mask, axis=None, eps=1e-8):
        return self.apply("masked_mean", x, mask, axis=axis, eps=eps)

    def conv3x3(self, x, weight, bias=None):
        out = self.apply("conv3x3", x, weight)
        if bias is not None:
            out = out + bias.reshape(-1, 1, 1)
        return out

    def grid_sample(self, image, offsets, border="clamp"):
        return self.apply("grid_sample", image, offsets, border=border)

    def weibull(self, lam, kap, u):
        return self.apply("weibull", lam, kap, u)

    def stop_gradient(self, x):
        return self.apply("stop_gradient", x)

    def grl(self, x, scale=1.0):
        return self.apply("grl", x, scale=float(scale))

    def concat(self, xs, axis=0):
        return self.apply("concat", *xs, axis=axis)

    def clip(self, x, lo, hi):
        return self.apply("clip", x, lo=lo, hi=hi)


# --------------------------------------------------------------------------
# module-level operations


def forward_eval(tape: Tape, inputs: dict | None = None) -> dict[str, np.ndarray]:
    """Replay ``tape`` with ``inputs`` bound to named leaves.

    Unbound leaves keep their current values.  Returns every declared output.
    """
    inputs = inputs or {}
    for name in inputs:
        if name not in tape._leaves:
            raise TapeError(f"no leaf named {name!r}")
    for nid, node in enumerate(tape.nodes):
        if node.op in LEAF_OPS:
            if node.name in inputs:
                new = G.as_grid(inputs[node.name])
                if node.value is not None and new.shape != node.value.shape:
                    raise ShapeError(f"binding for {node.name!r} has shape {new.shape}, "
                                     f"expected {node.value.shape}", nid, node.op)
                node.value = new
            elif node.value is None:
                raise TapeError(f"leaf {node.name!r} is unbound", nid, node.op)
        else:
            tape._run(nid)
    tape.evaluated = True
    return {name: tape.nodes[i].value for name, i in tape.outputs.items()}


def backward(tape: Tape, seed_grads: dict, wrt: str = "params") -> dict[str, np.ndarray]:
    """Reverse pass from ``seed_grads`` (output name or :class:`Var` -> gradient).

    Returns gradients keyed by leaf name: parameters only by default,
    parameters and inputs with ``wrt="leaves"``.  Leaves the seeds do not
    reach get zero gradients.
    """
    if not tape.evaluated:
        raise TapeError("backward called before forward evaluation")
    grads: list = [None] * len(tape.nodes)
    for key, g in seed_grads.items():
        nid = key.id if isinstance(key, Var) else tape.outputs[key]
        shape = np.shape(tape.nodes[nid].value)
        g = np.broadcast_to(np.asarray(g, dtype=np.float64), shape)
        grads[nid] = g if grads[nid] is None else grads[nid] + g
    for nid in range(len(tape.nodes) - 1, -1, -1):
        g = grads[nid]
        node = tape.nodes[nid]
        if g is None or node.op in LEAF_OPS:
            continue
        _, bwd = _PRIMS[node.op]
        vals = [tape.nodes[i].value for i in node.inputs]
        in_grads = bwd(g, vals, node.value, node.saved, node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi
    kinds = ("param",) if wrt == "params" else ("param", "input")
    out = {}
    for nid, node in enumerate(tape.nodes):
        if node.op in kinds and node.name is not None:
            g = grads[nid]
            out[node.name] = np.zeros_like(node.value) if g is None else np.array(g, dtype=np.float64)
    return out


def grad_check(tape: Tape, point: dict | None = None, eps: float = 1e-5,
               max_elements: int = 24, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The checked scalar is ``sum_k <output_k, r_k>`` with fixed random weights
    ``r_k`` so that non-scalar outputs are covered.  At most ``max_elements``
    entries per parameter are probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    outs = forward_eval(tape, point)
    weights = {k: rng.uniform(0.5, 1.5, size=np.shape(v)) for k, v in outs.items()}
    analytic = backward(tape, weights)
    worst = 0.0
    for name, grad in analytic.items():
        base = tape.var(name).value.copy()
        flat_idx = np.arange(base.size)
        if base.size > max_elements:
            flat_idx = rng.choice(base.size, size=max_elements, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, base.shape)
            plus = base.copy()
            plus[idx] += eps
            minus = base.copy()
            minus[idx] -= eps
            f_plus = _objective_at(tape, name, plus, weights)
            f_minus = _objective_at(tape, name, minus, weights)
            fd = (f_plus - f_minus) / (2 * eps)
            err = abs(grad[idx] - fd) / (abs(fd) + 1e-8)
            worst = max(worst, err)
        forward_eval(tape, {name: base})
    return worst


def _objective_at(tape, name, value, weights):
    outs = forward_eval(tape, {name: value})
    return sum(float(np.sum(outs[k] * weights[k])) for k in outs)
