"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the enhancement models need are provided. Tensors are
2-D (channels x frames) or 1-D (samples); broadcasting is limited to exact
shape matches and scalars.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """An operation argument is out of its valid range."""


class ContractError(RuntimeError):
    """A calling contract was violated (e.g. backward on a non-scalar)."""


class Tensor:
    """A numpy array that records how it was produced.

    ``grad`` is filled in by :func:`backward` for leaves with
    ``requires_grad``. Interior nodes keep a closure mapping the output
    gradient to one gradient per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op}: non-finite values in output")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap a forward result as a graph node.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Public hook for fused operations defined outside this module."""
    return _node(np.asarray(data), parents, backward, op)


def linear_op(x: Tensor, forward: Callable, adjoint: Callable, op: str = "linear") -> Tensor:
    """Apply a linear map given as a forward function and its adjoint."""
    return _node(forward(x.data), (x,), lambda g: (adjoint(g),), op)


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b, op: str):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError(f"{op}: at least one operand must be a Tensor")
    dtype = a.dtype if isinstance(a, Tensor) else b.dtype
    a = as_tensor(a, dtype=dtype)
    b = as_tensor(b, dtype=dtype)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor, open_interval: bool = False) -> Tensor:
    """Logistic function.

    With ``open_interval`` the result is kept strictly inside (0, 1): values
    that round to 0 or 1 in the working dtype are moved to the smallest
    normal number or to the largest number below one. Used for masks and
    gates, whose range is part of their contract.
    """
    s = _sigmoid(x.data)
    if open_interval:
        fi = np.finfo(s.dtype)
        s = np.clip(s, fi.tiny, 1.0 - fi.epsneg).astype(s.dtype, copy=False)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def convex_mix(gate: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """``gate * a + (1 - gate) * b`` for a gate in [0, 1], kept inside [min(a, b), max(a, b)].

    The clamp only removes rounding overshoot, so the backward rule is the
    one of the plain formula. A gate of exactly 1 or 0 returns ``a`` or
    ``b`` bit for bit.
    """
    if not (gate.shape == a.shape == b.shape):
        raise DimensionError(f"convex_mix: shapes {gate.shape}, {a.shape}, {b.shape} differ")
    g, ad, bd = gate.data, a.data, b.data
    out = g * ad + (1.0 - g) * bd
    out = np.clip(out, np.minimum(ad, bd), np.maximum(ad, bd)).astype(a.dtype, copy=False)
    return _node(out, (gate, a, b), lambda G: (G * (ad - bd), G * g, G * (1.0 - g)), "convex_mix")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def prelu(x: Tensor, alpha: Tensor) -> Tensor:
    """PReLU with one slope per channel (row) of a C x T input.

    A scalar-sized ``alpha`` applies the same slope everywhere.
    """
    xd = x.data
    if alpha.data.size == 1:
        a = alpha.data.reshape(())
    elif x.ndim == 2 and alpha.shape == (x.shape[0],):
        a = alpha.data[:, None]
    else:
        raise DimensionError(f"prelu: alpha shape {alpha.shape} does not fit input {x.shape}")
    neg = xd < 0
    out = np.where(neg, a * xd, xd).astype(x.dtype)

    def backward(g):
        gx = np.where(neg, a * g, g)
        ga = None
        if alpha.requires_grad:
            contrib = np.where(neg, g * xd, 0)
            ga = contrib.sum(axis=1) if alpha.data.size > 1 else np.asarray(contrib.sum()).reshape(alpha.shape)
        return gx, ga

    return _node(out, (x, alpha), backward, "prelu")


def elementwise(kind: str, *args, alpha: Optional[Tensor] = None) -> Tensor:
    """Dispatch by name; mirrors the individual functions."""
    table = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "relu": relu, "tanh": tanh}
    if kind == "prelu":
        return prelu(args[0], alpha if alpha is not None else args[1])
    if kind not in table:
        raise ParameterError(f"unknown elementwise op {kind!r}")
    return table[kind](*args)


# ---------------------------------------------------------------------------
# structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _node(
        ad @ bd,
        (a, b),
        lambda g: (
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        ),
        "matmul",
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ParameterError("concat: empty input list")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    nd = len(ref)
    if not -nd <= axis < nd:
        raise ParameterError(f"concat: axis {axis} out of range for rank {nd}")
    axis %= nd
    for t in tensors[1:]:
        if len(t.shape) != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != axis):
            raise DimensionError(
                f"concat: ragged shapes {[t.shape for t in tensors]} along axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * nd
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def reduce(kind: str, x: Tensor, axis: Optional[int] = None) -> Tensor:
    if kind not in ("sum", "mean"):
        raise ParameterError(f"reduce: unknown kind {kind!r}")
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ParameterError(f"reduce: axis {axis} out of range for rank {x.ndim}")
    n = x.data.size if axis is None else x.shape[axis]
    out = x.data.sum(axis=axis)
    if kind == "mean":
        out = out / n
    scale = 1.0 if kind == "sum" else 1.0 / n

    def backward(g):
        g = np.asarray(g) * scale
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _node(np.asarray(out, dtype=x.dtype), (x,), backward, kind)


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    return reduce("sum", x, axis)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    return reduce("mean", x, axis)


def crop(x: Tensor, length: int) -> Tensor:
    """Keep the first ``length`` entries along the last axis."""
    full = x.shape[-1]
    if length > full:
        raise DimensionError(f"crop: cannot keep {length} of {full} samples")

    def backward(g):
        out = np.zeros_like(x.data)
        out[..., :length] = g
        return (out,)

    return _node(x.data[..., :length], (x,), backward, "crop")


# ---------------------------------------------------------------------------
# convolutions


def conv1d_out_len(T: int, P: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (T + 2 * padding - dilation * (P - 1) - 1) // stride + 1


def _tap_view(xp: np.ndarray, p: int, dilation: int, stride: int, t_out: int) -> np.ndarray:
    start = p * dilation
    return xp[..., start : start + stride * (t_out - 1) + 1 : stride]


def conv1d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation of a C_in x T signal with C_out x (C_in/groups) x P kernels."""
    if stride <= 0 or dilation <= 0 or groups <= 0 or padding < 0:
        raise ParameterError(
            f"conv1d: invalid stride={stride} dilation={dilation} groups={groups} padding={padding}"
        )
    if x.ndim != 2 or w.ndim != 3:
        raise DimensionError(f"conv1d: expected x C_in x T and 3-D w, got {x.shape}, {w.shape}")
    c_in, T = x.shape
    c_out, c_per, P = w.shape
    if c_in % groups or c_out % groups or c_per != c_in // groups:
        raise ParameterError(
            f"conv1d: channels in={c_in} out={c_out} kernel={w.shape} incompatible with groups={groups}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv1d: bias shape {bias.shape} != ({c_out},)")
    if T + 2 * padding < dilation * (P - 1) + 1:
        raise DimensionError(f"conv1d: input length {T} too short for kernel {P} dilation {dilation}")
    t_out = conv1d_out_len(T, P, stride, padding, dilation)
    xd, wd = x.data, w.data
    xp = np.pad(xd, ((0, 0), (padding, padding))) if padding else xd
    pointwise = P == 1 and stride == 1 and groups == 1
    depthwise = groups == c_in and c_out == c_in

    if pointwise:
        w2 = wd[:, :, 0]
        out = w2 @ xp
    elif depthwise:
        out = np.zeros((c_out, t_out), dtype=xd.dtype)
        for p in range(P):
            out += wd[:, 0, p : p + 1] * _tap_view(xp, p, dilation, stride, t_out)
    elif groups == 1:
        cols = np.stack([_tap_view(xp, p, dilation, stride, t_out) for p in range(P)], axis=1)
        out = wd.reshape(c_out, c_in * P) @ cols.reshape(c_in * P, t_out)
    else:
        cols = np.stack([_tap_view(xp, p, dilation, stride, t_out) for p in range(P)], axis=1)
        cols = cols.reshape(groups, c_per, P, t_out)
        wg = wd.reshape(groups, c_out // groups, c_per, P)
        out = np.einsum("gokp,gkpt->got", wg, cols).reshape(c_out, t_out)
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=1)
        if pointwise:
            if w.requires_grad:
                gw = (g @ xp.T)[:, :, None]
            if x.requires_grad:
                gxp = w2.T @ g
        elif depthwise:
            if w.requires_grad:
                gw = np.empty_like(wd)
                for p in range(P):
                    gw[:, 0, p] = np.einsum("ct,ct->c", g, _tap_view(xp, p, dilation, stride, t_out))
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for p in range(P):
                    _tap_view(gxp, p, dilation, stride, t_out)[...] += wd[:, 0, p : p + 1] * g
        else:
            if groups == 1:
                if w.requires_grad:
                    gw = (g @ cols.reshape(c_in * P, t_out).T).reshape(wd.shape)
                gcols = (wd.reshape(c_out, c_in * P).T @ g).reshape(c_in, P, t_out)
            else:
                gg = g.reshape(groups, c_out // groups, t_out)
                if w.requires_grad:
                    gw = np.einsum("got,gkpt->gokp", gg, cols).reshape(wd.shape)
                gcols = np.einsum("gokp,got->gkpt", wg, gg).reshape(c_in, P, t_out)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for p in range(P):
                    _tap_view(gxp, p, dilation, stride, t_out)[...] += gcols[:, p, :]
        if x.requires_grad:
            gx = gxp[:, padding : padding + T] if padding else gxp
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out.astype(xd.dtype, copy=False), parents, lambda g: backward(g)[: len(parents)], "conv1d")


def conv1d_transpose(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution: C_in x K frames to C_out x ((K-1)*stride + P) samples.

    This is the adjoint of :func:`conv1d` with the same kernel and stride
    (kernel laid out C_in x C_out x P).
    """
    if stride <= 0:
        raise ParameterError(f"conv1d_transpose: invalid stride={stride}")
    if x.ndim != 2 or w.ndim != 3 or w.shape[0] != x.shape[0]:
        raise DimensionError(f"conv1d_transpose: incompatible shapes {x.shape} and {w.shape}")
    c_in, K = x.shape
    _, c_out, P = w.shape
    T = (K - 1) * stride + P
    xd, wd = x.data, w.data
    wflat = wd.reshape(c_in, c_out * P)
    frames = (wflat.T @ xd).reshape(c_out, P, K)
    out = np.zeros((c_out, T), dtype=xd.dtype)
    for p in range(P):
        out[:, p : p + stride * (K - 1) + 1 : stride] += frames[:, p, :]

    def backward(g):
        gframes = np.stack([g[:, p : p + stride * (K - 1) + 1 : stride] for p in range(P)], axis=1)
        gframes = gframes.reshape(c_out * P, K)
        gx = wflat @ gframes if x.requires_grad else None
        gw = (xd @ gframes.T).reshape(wd.shape) if w.requires_grad else None
        return gx, gw

    return _node(out, (x, w), backward, "conv1d_transpose")


# ---------------------------------------------------------------------------
# normalization


def global_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize over all C*T entries, then scale and shift per channel."""
    if eps <= 0:
        raise ParameterError(f"global_layer_norm: eps must be positive, got {eps}")
    if x.ndim != 2 or gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise DimensionError(
            f"global_layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    xd = x.data
    n = xd.size
    mu = xd.mean()
    xc = xd - mu
    var = np.mean(xc * xc)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[:, None]
    out = gd * xhat + beta.data[:, None]

    def backward(g):
        gg = gb = None
        if gamma.requires_grad:
            gg = np.einsum("ct,ct->c", g, xhat)
        if beta.requires_grad:
            gb = g.sum(axis=1)
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.sum() / n - xhat * (np.sum(gh * xhat) / n))
        return gx, gg, gb

    return _node(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "gln")


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = (), retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``params`` that the loss does not reach get a zero
    gradient. Interior nodes are released afterwards unless
    ``retain_graph`` is set.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    params = list(params)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        if not retain_graph:
            node._parents = ()
            node._backward = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    exclude: Optional[Sequence[Optional[np.ndarray]]] = None,
    max_coords: Optional[int] = None,
    seed: int = 0,
    stencil: int = 2,
    twin: Optional[tuple] = None,
) -> float:
    """Worst coordinate-wise relative error between autodiff and central differences.

    ``exclude`` optionally gives, per input, a boolean mask of coordinates
    to skip (nondifferentiable points). ``max_coords`` caps how many
    coordinates per input are probed; a seeded random subset is used.
    ``stencil`` selects the 2-point or 4-point central difference.

    ``twin`` is an optional ``(f_hi, inputs_hi)`` pair computing the same
    function at higher precision; differences are then taken on the twin
    while the autodiff gradient still comes from ``f`` and ``inputs``.
    """
    if stencil not in (2, 4):
        raise ParameterError(f"grad_check: stencil must be 2 or 4, got {stencil}")
    if not 1e-6 <= eps <= 1e-2:
        raise ParameterError(f"grad_check: eps must lie in [1e-6, 1e-2], got {eps}")
    inputs = list(inputs)
    for t in inputs:
        if not np.isfinite(t.data).all():
            raise ParameterError("grad_check: non-finite input")
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
    backward(out, inputs)
    analytic = [t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)

    fd_f, fd_inputs = twin if twin is not None else (f, inputs)
    if len(fd_inputs) != len(inputs) or any(a.shape != b.shape for a, b in zip(inputs, fd_inputs)):
        raise DimensionError("grad_check: twin inputs must mirror the checked inputs")

    def evaluate() -> float:
        return float(fd_f(*fd_inputs).data)

    worst = 0.0
    for i, t in enumerate(fd_inputs):
        flat = t.data.reshape(-1)
        skip = None if exclude is None or exclude[i] is None else np.asarray(exclude[i]).reshape(-1)
        coords = np.arange(flat.size)
        if skip is not None:
            coords = coords[~skip]
        if max_coords is not None and coords.size > max_coords:
            coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
        ga = analytic[i].reshape(-1)
        for j in coords:
            orig = flat[j]

            def at(step):
                flat[j] = orig + step
                # step actually taken after rounding to the tensor's dtype
                taken = float(flat[j]) - float(orig)
                return evaluate(), taken

            (fp, hp), (fm, hm) = at(eps), at(-eps)
            if stencil == 2:
                gfd = (fp - fm) / (hp - hm)
            else:
                (fp2, hp2), (fm2, hm2) = at(2 * eps), at(-2 * eps)
                gfd = (8.0 * (fp - fm) - (fp2 - fm2)) / (6.0 * ((hp - hm) + (hp2 - hm2) / 2.0) / 2.0)
            flat[j] = orig
            gad = float(ga[j])
            err = abs(gad - gfd) / max(abs(gad), abs(gfd), 1e-8)
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
