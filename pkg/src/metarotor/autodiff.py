"""Reverse-mode automatic differentiation on a flat tape of array operations.

The tape records dense vector/matrix primitives rather than scalar graphs, so a
full closed-loop rollout stays within ~1e5 nodes.  A node's backward rule is a
single vjp function written in terms of the primitives themselves; run on plain
arrays it performs the ordinary numeric backward pass, run on `Var` operands it
records the adjoint computation onto the same tape.  The latter is what `grad`
uses to expose gradients (e.g. of a scalar certificate with respect to a state)
as differentiable quantities inside a larger taped computation.

Primitives applied to plain numbers/arrays compute plain results with the exact
same NumPy calls, so an untaped evaluation of any program written against this
module reproduces its taped value bit for bit.
"""

import numpy as np


class DimensionError(ValueError):
    """Operand shapes incompatible for the named operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class Tape:
    """Ordered record of primitive operations; backward visits it in reverse."""

    __slots__ = ("nodes", "inputs", "output")

    def __init__(self):
        self.nodes = []
        self.inputs = []
        self.output = None

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value):
        """Register a value as a tape variable with no parents."""
        var = Var(value, self, len(self.nodes))
        self.nodes.append(None)
        return var

    def input(self, value):
        """Register a leaf marked as an input (receives gradients by default)."""
        var = self.leaf(value)
        self.inputs.append(var)
        return var


class Var:
    """Handle to one tape node; `v` is the plain value (float or ndarray)."""

    __slots__ = ("v", "tape", "i")

    # defer mixed ndarray-Var arithmetic to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, v, tape, i):
        self.v = v
        self.tape = tape
        self.i = i

    @property
    def shape(self):
        return np.shape(self.v)

    @property
    def ndim(self):
        return np.ndim(self.v)

    def __repr__(self):
        return f"Var(i={self.i}, v={self.v!r})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def value_of(x):
    """Plain value of a Var or passthrough for plain operands."""
    return x.v if type(x) is Var else x


def _rec(tape, v, vjp, parents, aux=()):
    var = Var(v, tape, len(tape.nodes))
    tape.nodes.append((vjp, parents, aux))
    return var


def _rec_self(tape, v, vjp, parents, extra=()):
    # like _rec, but the output variable itself is the first aux entry
    var = Var(v, tape, len(tape.nodes))
    tape.nodes.append((vjp, parents, (var,) + extra))
    return var


def _reduce_to(g, shape):
    """Sum a broadcast gradient back down to the parent's shape."""
    gshape = np.shape(value_of(g))
    if gshape == shape:
        return g
    if shape == ():
        return reduce_sum(g)
    if len(gshape) == 2 and len(shape) == 1 and gshape[1:] == tuple(shape):
        return sum_axis0(g)
    raise DimensionError(f"cannot reduce gradient of shape {gshape} to {shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _vjp_add2(g, sa, sb):
    return _reduce_to(g, sa), _reduce_to(g, sb)


def _vjp_add1(g, s):
    return (_reduce_to(g, s),)


def add(a, b):
    ta, tb = type(a) is Var, type(b) is Var
    if not (ta or tb):
        return a + b
    if ta and tb:
        return _rec(a.tape, a.v + b.v, _vjp_add2, (a, b), (a.shape, b.shape))
    if ta:
        return _rec(a.tape, a.v + b, _vjp_add1, (a,), (a.shape,))
    return _rec(b.tape, a + b.v, _vjp_add1, (b,), (b.shape,))


def _vjp_sub2(g, sa, sb):
    return _reduce_to(g, sa), _reduce_to(neg(g), sb)


def _vjp_sub_a(g, s):
    return (_reduce_to(g, s),)


def _vjp_sub_b(g, s):
    return (_reduce_to(neg(g), s),)


def sub(a, b):
    ta, tb = type(a) is Var, type(b) is Var
    if not (ta or tb):
        return a - b
    if ta and tb:
        return _rec(a.tape, a.v - b.v, _vjp_sub2, (a, b), (a.shape, b.shape))
    if ta:
        return _rec(a.tape, a.v - b, _vjp_sub_a, (a,), (a.shape,))
    return _rec(b.tape, a - b.v, _vjp_sub_b, (b,), (b.shape,))


def _vjp_mul2(g, a, b):
    return (_reduce_to(mul(g, b), np.shape(value_of(a))),
            _reduce_to(mul(g, a), np.shape(value_of(b))))


def _vjp_mul1(g, c, s):
    return (_reduce_to(mul(g, c), s),)


def mul(a, b):
    ta, tb = type(a) is Var, type(b) is Var
    if not (ta or tb):
        return a * b
    if ta and tb:
        return _rec(a.tape, a.v * b.v, _vjp_mul2, (a, b), (a, b))
    if ta:
        return _rec(a.tape, a.v * b, _vjp_mul1, (a,), (b, a.shape))
    return _rec(b.tape, a * b.v, _vjp_mul1, (b,), (a, b.shape))


def _vjp_div2(g, out, a, b):
    ga = _reduce_to(div(g, b), np.shape(value_of(a)))
    gb = _reduce_to(neg(div(mul(g, out), b)), np.shape(value_of(b)))
    return ga, gb


def _vjp_div_a(g, b, s):
    return (_reduce_to(div(g, b), s),)


def _vjp_div_b(g, out, b, s):
    return (_reduce_to(neg(div(mul(g, out), b)), s),)


def div(a, b):
    ta, tb = type(a) is Var, type(b) is Var
    if not (ta or tb):
        return a / b
    if ta and tb:
        return _rec_self(a.tape, a.v / b.v, _vjp_div2, (a, b), (a, b))
    if ta:
        return _rec(a.tape, a.v / b, _vjp_div_a, (a,), (b, a.shape))
    return _rec_self(b.tape, a / b.v, _vjp_div_b, (b,), (b, b.shape))


def _vjp_neg(g):
    return (neg(g),)


def neg(x):
    if type(x) is Var:
        return _rec(x.tape, -x.v, _vjp_neg, (x,))
    return -x


def _vjp_square(g, x):
    return (mul(g, mul(2.0, x)),)


def square(x):
    if type(x) is Var:
        return _rec(x.tape, x.v * x.v, _vjp_square, (x,), (x,))
    return x * x


def _vjp_reciprocal(g, out):
    return (neg(mul(g, square(out))),)


def reciprocal(x):
    if type(x) is Var:
        return _rec_self(x.tape, 1.0 / x.v, _vjp_reciprocal, (x,))
    return 1.0 / x


# ---------------------------------------------------------------------------
# transcendental functions


def _vjp_tanh(g, out):
    return (mul(g, sub(1.0, square(out))),)


def tanh(x):
    if type(x) is Var:
        return _rec_self(x.tape, np.tanh(x.v), _vjp_tanh, (x,))
    return np.tanh(x)


def _vjp_exp(g, out):
    return (mul(g, out),)


def exp(x):
    if type(x) is Var:
        return _rec_self(x.tape, np.exp(x.v), _vjp_exp, (x,))
    return np.exp(x)


def _vjp_log(g, x):
    return (div(g, x),)


def log(x):
    if type(x) is Var:
        return _rec(x.tape, np.log(x.v), _vjp_log, (x,), (x,))
    return np.log(x)


def _vjp_sqrt(g, out):
    return (div(g, mul(2.0, out)),)


def sqrt(x):
    if type(x) is Var:
        return _rec_self(x.tape, np.sqrt(x.v), _vjp_sqrt, (x,))
    return np.sqrt(x)


def _vjp_sin(g, x):
    return (mul(g, cos(x)),)


def sin(x):
    if type(x) is Var:
        return _rec(x.tape, np.sin(x.v), _vjp_sin, (x,), (x,))
    return np.sin(x)


def _vjp_cos(g, x):
    return (neg(mul(g, sin(x))),)


def cos(x):
    if type(x) is Var:
        return _rec(x.tape, np.cos(x.v), _vjp_cos, (x,), (x,))
    return np.cos(x)


def _vjp_sinh(g, x):
    return (mul(g, cosh(x)),)


def sinh(x):
    if type(x) is Var:
        return _rec(x.tape, np.sinh(x.v), _vjp_sinh, (x,), (x,))
    return np.sinh(x)


def _vjp_cosh(g, x):
    return (mul(g, sinh(x)),)


def cosh(x):
    if type(x) is Var:
        return _rec(x.tape, np.cosh(x.v), _vjp_cosh, (x,), (x,))
    return np.cosh(x)


def _vjp_atan2(g, a, b):
    d = add(square(a), square(b))
    return div(mul(g, b), d), neg(div(mul(g, a), d))


def atan2(a, b):
    ta, tb = type(a) is Var, type(b) is Var
    if not (ta or tb):
        return np.arctan2(a, b)
    tape = a.tape if ta else b.tape
    out_v = np.arctan2(value_of(a), value_of(b))
    return _rec(tape, out_v, _vjp_atan2,
                (a if ta else None, b if tb else None), (a, b))


def _vjp_absval(g, s):
    return (mul(g, s),)


def absval(x):
    """|x| with subgradient sign(x), zero at the origin."""
    if type(x) is Var:
        s = np.sign(x.v)
        return _rec(x.tape, np.abs(x.v), _vjp_absval, (x,), (s,))
    return np.abs(x)


def smooth_abs(x, eps):
    """Smoothed |x| = sqrt(x^2 + eps^2) - eps; gradient magnitude stays < 1."""
    return sub(sqrt(add(square(x), eps * eps)), eps)


# ---------------------------------------------------------------------------
# linear algebra


def _transpose_any(x):
    return transpose(x) if type(x) is Var else np.transpose(x)


def _vjp_matmul2(g, a, b):
    bn = np.ndim(value_of(b))
    if bn == 1:
        return outer(g, b), matmul(_transpose_any(a), g)
    return matmul(g, _transpose_any(b)), matmul(_transpose_any(a), g)


def _vjp_matmul_a(g, b):
    if np.ndim(value_of(b)) == 1:
        return (outer(g, b),)
    return (matmul(g, _transpose_any(b)),)


def _vjp_matmul_b(g, a):
    return (matmul(_transpose_any(a), g),)


def matmul(a, b):
    ta, tb = type(a) is Var, type(b) is Var
    if not (ta or tb):
        return a @ b
    av, bv = value_of(a), value_of(b)
    try:
        out_v = av @ bv
    except ValueError as err:
        raise DimensionError(
            f"matmul: incompatible shapes {np.shape(av)} @ {np.shape(bv)}") from err
    tape = a.tape if ta else b.tape
    if ta and tb:
        return _rec(tape, out_v, _vjp_matmul2, (a, b), (a, b))
    if ta:
        return _rec(tape, out_v, _vjp_matmul_a, (a,), (b,))
    return _rec(tape, out_v, _vjp_matmul_b, (b,), (a,))


def _vjp_dot2(g, a, b):
    return mul(g, b), mul(g, a)


def _vjp_dot1(g, c):
    return (mul(g, c),)


def dot(a, b):
    ta, tb = type(a) is Var, type(b) is Var
    if not (ta or tb):
        return float(np.dot(a, b))
    out_v = float(np.dot(value_of(a), value_of(b)))
    if ta and tb:
        return _rec(a.tape, out_v, _vjp_dot2, (a, b), (a, b))
    if ta:
        return _rec(a.tape, out_v, _vjp_dot1, (a,), (b,))
    return _rec(b.tape, out_v, _vjp_dot1, (b,), (a,))


def _vjp_outer2(g, a, b):
    return matmul(g, b), matmul(_transpose_any(g), a)


def _vjp_outer_a(g, b):
    return (matmul(g, b),)


def _vjp_outer_b(g, a):
    return (matmul(_transpose_any(g), a),)


def outer(a, b):
    ta, tb = type(a) is Var, type(b) is Var
    if not (ta or tb):
        return np.outer(a, b)
    out_v = np.outer(value_of(a), value_of(b))
    tape = a.tape if ta else b.tape
    if ta and tb:
        return _rec(tape, out_v, _vjp_outer2, (a, b), (a, b))
    if ta:
        return _rec(tape, out_v, _vjp_outer_a, (a,), (b,))
    return _rec(tape, out_v, _vjp_outer_b, (b,), (a,))


def _vjp_transpose(g):
    return (_transpose_any(g),)


def transpose(x):
    if type(x) is Var:
        return _rec(x.tape, np.transpose(x.v), _vjp_transpose, (x,))
    return np.transpose(x)


def _affine_val(x, w, b):
    # vector mode: w @ x + b ; batch mode (x is (B, n)): x @ w.T + b
    if np.ndim(x) == 1:
        return w @ x + b
    return x @ np.transpose(w) + b


def _vjp_affine_xwb(g, x, w):
    if np.ndim(value_of(x)) == 1:
        return matmul(_transpose_any(w), g), outer(g, x), g
    return matmul(g, w), matmul(_transpose_any(g), x), sum_axis0(g)


def _vjp_affine_x(g, x, w):
    if np.ndim(value_of(x)) == 1:
        return (matmul(_transpose_any(w), g),)
    return (matmul(g, w),)


def _vjp_affine_wb(g, x):
    if np.ndim(value_of(x)) == 1:
        return outer(g, x), g
    return matmul(_transpose_any(g), x), sum_axis0(g)


def affine(x, w, b):
    """w @ x + b for a vector x, or x @ w.T + b for a batch of row vectors."""
    tx, tw = type(x) is Var, type(w) is Var
    if not (tx or tw):
        return _affine_val(x, w, b)
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    try:
        out_v = _affine_val(xv, wv, bv)
    except ValueError as err:
        raise DimensionError(
            f"affine: incompatible shapes {np.shape(xv)}, {np.shape(wv)}") from err
    bvar = b if type(b) is Var else None
    if tx and tw:
        return _rec(x.tape, out_v, _vjp_affine_xwb, (x, w, bvar), (x, w))
    if tx:
        return _rec(x.tape, out_v, _vjp_affine_x, (x,), (x, w))
    return _rec(w.tape, out_v, _vjp_affine_wb, (w, bvar), (x,))


def _vjp_solve(g, x, a):
    gb = solve(_transpose_any(a), g)
    if np.ndim(value_of(x)) == 1:
        ga = neg(outer(gb, x))
    else:
        ga = neg(matmul(gb, _transpose_any(x)))
    return ga, gb


def _vjp_solve_a(g, x, a):
    return (_vjp_solve(g, x, a)[0],)


def _vjp_solve_b(g, a):
    return (solve(_transpose_any(a), g),)


def solve(a, b):
    """x solving a @ x = b for square a."""
    ta, tb = type(a) is Var, type(b) is Var
    if not (ta or tb):
        return np.linalg.solve(a, b)
    av, bv = value_of(a), value_of(b)
    out_v = np.linalg.solve(av, bv)
    tape = a.tape if ta else b.tape
    if ta and tb:
        return _rec_self(tape, out_v, _vjp_solve, (a, b), (a,))
    if ta:
        return _rec_self(tape, out_v, _vjp_solve_a, (a,), (a,))
    return _rec(tape, out_v, _vjp_solve_b, (b,), (a,))


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def _vjp_getitem(g, idx, shape):
    return (scatter(g, idx, shape),)


def getitem(x, idx):
    if type(x) is Var:
        return _rec(x.tape, x.v[idx], _vjp_getitem, (x,), (idx, x.shape))
    return x[idx]


def _scatter_val(g, idx, shape):
    out = np.zeros(shape)
    out[idx] = g
    return out


def _vjp_scatter(g, idx):
    return (getitem(g, idx),)


def scatter(g, idx, shape):
    """Zeros of the given shape with `g` placed at `idx` (adjoint of getitem)."""
    if type(g) is Var:
        return _rec(g.tape, _scatter_val(g.v, idx, shape), _vjp_scatter, (g,), (idx,))
    return _scatter_val(g, idx, shape)


def _vjp_concat(g, axis, offsets, sizes):
    slicer = [slice(None), slice(None)]
    grads = []
    for off, size in zip(offsets, sizes):
        slicer[axis] = slice(off, off + size)
        grads.append(getitem(g, tuple(slicer) if axis else slicer[0]))
    return tuple(grads)


def concat(parts, axis=0):
    tape = None
    for p in parts:
        if type(p) is Var:
            tape = p.tape
            break
    values = [value_of(p) for p in parts]
    out_v = np.concatenate(values, axis=axis)
    if tape is None:
        return out_v
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes[:-1]).tolist()
    parents = tuple(p if type(p) is Var else None for p in parts)
    return _rec(tape, out_v, _vjp_concat, parents, (axis, offsets, sizes))


def _vjp_stack(g, n):
    return tuple(getitem(g, k) for k in range(n))


def stack(parts):
    """Stack scalars into a 1-D vector."""
    tape = None
    for p in parts:
        if type(p) is Var:
            tape = p.tape
            break
    out_v = np.array([value_of(p) for p in parts])
    if tape is None:
        return out_v
    parents = tuple(p if type(p) is Var else None for p in parts)
    return _rec(tape, out_v, _vjp_stack, parents, (len(parts),))


def _vjp_reshape(g, shape):
    return (reshape(g, shape),)


def reshape(x, shape):
    if type(x) is Var:
        return _rec(x.tape, np.reshape(x.v, shape), _vjp_reshape, (x,), (x.shape,))
    return np.reshape(x, shape)


_ONES_CACHE = {}


def _ones(shape):
    arr = _ONES_CACHE.get(shape)
    if arr is None:
        arr = np.ones(shape)
        arr.flags.writeable = False
        _ONES_CACHE[shape] = arr
    return arr


def _vjp_reduce_sum(g, shape):
    if shape == ():
        return (g,)
    return (mul(g, _ones(shape)),)


def reduce_sum(x):
    if type(x) is Var:
        return _rec(x.tape, float(np.sum(x.v)), _vjp_reduce_sum, (x,), (x.shape,))
    return float(np.sum(x))


def _vjp_sum_axis0(g, nrows):
    return (broadcast0(g, nrows),)


def sum_axis0(x):
    if type(x) is Var:
        return _rec(x.tape, np.sum(x.v, axis=0), _vjp_sum_axis0, (x,), (x.shape[0],))
    return np.sum(x, axis=0)


def _vjp_broadcast0(g):
    return (sum_axis0(g),)


def broadcast0(x, nrows):
    """Repeat a row vector into `nrows` rows (adjoint of sum_axis0)."""
    if type(x) is Var:
        out_v = np.broadcast_to(x.v, (nrows,) + np.shape(x.v))
        return _rec(x.tape, out_v, _vjp_broadcast0, (x,))
    return np.broadcast_to(x, (nrows,) + np.shape(x))


# ---------------------------------------------------------------------------
# special-purpose primitives


def _lower_tri_val(theta, n):
    ell = np.zeros((n, n))
    ell[np.diag_indices(n)] = np.exp(theta[:n])
    if n > 1:
        ell[np.tril_indices(n, k=-1)] = theta[n:]
    return ell


def _vjp_lower_tri_exp(g, ell, n):
    if type(g) is Var:
        raise NotImplementedError("lower_tri_exp has no in-graph adjoint")
    gtheta = np.empty(n * (n + 1) // 2)
    gtheta[:n] = np.diag(g) * np.diag(ell)
    if n > 1:
        gtheta[n:] = g[np.tril_indices(n, k=-1)]
    return (gtheta,)


def lower_tri_exp(theta, n):
    """Lower-triangular matrix with exp(theta) diagonal and theta strict-lower
    entries in row-major order."""
    if type(theta) is Var:
        ell_v = _lower_tri_val(theta.v, n)
        return _rec_self(theta.tape, ell_v, _vjp_lower_tri_exp, (theta,), (n,))
    return _lower_tri_val(theta, n)


def _vjp_batch_apply(g, stack_const):
    if type(g) is Var:
        raise NotImplementedError("batch_apply has no in-graph adjoint")
    return (np.einsum("kij,ki->kj", stack_const, g),)


def batch_apply(stack_const, v):
    """Row-wise matrix application: out[k] = stack_const[k] @ v[k]."""
    if type(v) is Var:
        out_v = np.einsum("kij,kj->ki", stack_const, v.v)
        return _rec(v.tape, out_v, _vjp_batch_apply, (v,), (stack_const,))
    return np.einsum("kij,kj->ki", stack_const, v)


# ---------------------------------------------------------------------------
# forward / backward drivers


def forward(program, inputs):
    """Evaluate `program` on fresh tape inputs; returns (outputs, tape).

    `program` is any callable composed of this module's primitives.  The
    returned outputs carry plain values; the tape stores the recorded graph
    with its output set to the program result.
    """
    tape = Tape()
    leaves = [tape.input(np.asarray(x, dtype=float) if np.ndim(x) else float(x))
              for x in inputs]
    out = program(*leaves)
    tape.output = out
    outs = out if isinstance(out, (tuple, list)) else (out,)
    return [value_of(o) for o in outs], tape


def _unwrap_aux(aux):
    return tuple(a.v if type(a) is Var else a for a in aux)


def backward(tape, seed=1.0, output=None, wrt=None):
    """Numeric reverse pass; returns gradients for `wrt` (default: tape inputs)."""
    out = output if output is not None else tape.output
    if type(out) is not Var:
        raise ValueError("tape output is not a recorded variable")
    if np.shape(seed) != np.shape(out.v):
        raise DimensionError(
            f"seed shape {np.shape(seed)} does not match output shape {np.shape(out.v)}")
    targets = tape.inputs if wrt is None else wrt
    adjoint = [None] * (out.i + 1)
    adjoint[out.i] = seed
    nodes = tape.nodes
    for i in range(out.i, -1, -1):
        g = adjoint[i]
        if g is None:
            continue
        node = nodes[i]
        if node is None:
            continue
        vjp, parents, aux = node
        grads = vjp(g, *_unwrap_aux(aux))
        for p, pg in zip(parents, grads):
            if p is None or pg is None:
                continue
            j = p.i
            prev = adjoint[j]
            adjoint[j] = pg if prev is None else prev + pg
    results = []
    for var in targets:
        g = adjoint[var.i] if var.i <= out.i else None
        results.append(np.zeros_like(var.v) if g is None else g)
    return results


def grad(out, wrt):
    """In-graph gradients of a scalar `out` with respect to `wrt` variables.

    The adjoint computation is recorded onto the same tape, so the returned
    quantities remain differentiable.  Propagation stops at each `wrt`
    variable (gradients are partials holding those variables' parents fixed).
    """
    tape = out.tape
    wrt_idx = {w.i for w in wrt}
    lo = min(wrt_idx)
    adjoint = {out.i: 1.0}
    held = {}
    nodes = tape.nodes
    for i in range(out.i, lo - 1, -1):
        g = adjoint.pop(i, None)
        if g is None:
            continue
        if i in wrt_idx:
            held[i] = g
            continue
        node = nodes[i]
        if node is None:
            continue
        vjp, parents, aux = node
        grads = vjp(g, *aux)
        for p, pg in zip(parents, grads):
            if p is None or pg is None:
                continue
            j = p.i
            prev = adjoint.get(j)
            adjoint[j] = pg if prev is None else add(prev, pg)
    return [held.get(w.i, np.zeros_like(w.v)) for w in wrt]


def grad_check(fn, point, epsilon=1e-5):
    """Max over coordinates of |AD - central FD| / max(1, |AD|) for scalar fn."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    point = np.asarray(point, dtype=float)
    tape = Tape()
    x = tape.input(point.copy())
    out = fn(x)
    if type(out) is not Var:
        raise NumericError("function does not depend on its input")
    ad = np.asarray(backward(tape, output=out, wrt=[x])[0], dtype=float)
    fd = np.empty_like(point)
    for k in range(point.size):
        shift = np.zeros_like(point)
        shift.flat[k] = epsilon
        hi = fn(point + shift)
        lo = fn(point - shift)
        fd.flat[k] = (value_of(hi) - value_of(lo)) / (2.0 * epsilon)
    if not (np.all(np.isfinite(ad)) and np.all(np.isfinite(fd))):
        raise NumericError("non-finite values in gradient check")
    return float(np.max(np.abs(ad - fd) / np.maximum(1.0, np.abs(ad))))
