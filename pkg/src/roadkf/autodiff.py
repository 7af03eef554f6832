"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the active ``Tape`` when at least one
input is tracked.  Outside a tape every op simply computes values, which
is how inference runs.

    with Tape() as tape:
        loss = ops.sum(ops.silu(x @ w))
    grads = tape.backward(loss)      # {tensor: ndarray}
"""

import threading

import numpy as np
from scipy import sparse

from roadkf import _kernels

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    @property
    def T(self):
        return transpose(self)


def parameter(value, name=None):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class ShapeError(ValueError):
    pass


class Tape:
    """Operation records in creation order, which is a topological order."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out, inputs, vjp):
        self.records.append((out, inputs, vjp))

    def backward(self, loss, wrt=None):
        """Gradients of a scalar ``loss`` for every tracked leaf tensor.

        Returns ``{tensor: gradient}``; with ``wrt`` given, only those tensors
        (missing ones get zeros).
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.value)}
        produced = set()
        for out, inputs, vjp in reversed(self.records):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        leaves = {}
        for _, inputs, _ in self.records:
            for t in inputs:
                if isinstance(t, Tensor) and t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        if wrt is not None:
            return {t: grads.get(id(t), np.zeros_like(t.value)) for t in wrt}
        return {t: grads[k] for k, t in leaves.items() if k in grads}


def _make(value, inputs, vjp):
    tape = active_tape()
    tracked = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=tracked)
    if tracked:
        tape.record(out, inputs, vjp)
    return out


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise -------------------------------------------------------------


def add(a, b):
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "add")
    return _make(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "sub")
    return _make(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "mul")
    return _make(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b):
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "div")
    out = av / bv
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a):
    return _make(-_val(a), (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(_val(a))
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    av = _val(a)
    return _make(np.log(av), (a,), lambda g: (g / av,))


def tanh(a):
    out = np.tanh(_val(a))
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    out = _sigmoid(_val(a))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    av = _val(a)
    s = _sigmoid(av)
    out = av * s
    return _make(out, (a,), lambda g: (g * (s * (1.0 + av * (1.0 - s))),))


def square(a):
    av = _val(a)
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def clip(a, lo, hi):
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    av = _val(a)
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# reductions and shape ----------------------------------------------------


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = _val(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make(np.sum(av, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, av.shape).copy(),)

    return _make(np.mean(av, axis=axis, keepdims=keepdims), (a,), vjp)


def reshape(a, shape):
    av = _val(a)
    return _make(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None):
    av = _val(a)
    if axes is None:
        axes = tuple(range(av.ndim - 2)) + (av.ndim - 1, av.ndim - 2) if av.ndim >= 2 else (0,)
    inv = np.argsort(axes)
    return _make(np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=-1):
    vals = [_val(t) for t in tensors]
    ref = vals[0].ndim
    ax = axis % ref
    for v in vals[1:]:
        if v.ndim != ref or any(v.shape[i] != vals[0].shape[i] for i in range(ref) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in vals]}")
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate(vals, axis=ax), tuple(tensors), vjp)


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(a, idx):
    av = _val(a)
    basic = _is_basic(idx)

    def vjp(g):
        full = np.zeros_like(av)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(av[idx], (a,), vjp)


def take_rows(a, index):
    """Gather rows ``a[index]``; repeated rows accumulate in the backward pass."""
    av = _val(a)
    index = np.asarray(index, dtype=np.int64)
    n = av.shape[0]

    def vjp(g):
        sel = sparse.csr_matrix(
            (np.ones(index.size), (index, np.arange(index.size))), shape=(n, index.size)
        )
        return (np.asarray(sel @ g.reshape(index.size, -1)).reshape((n,) + av.shape[1:]),)

    return _make(av[index], (a,), vjp)


def scatter_padded(values, slots, size, fill=-np.inf):
    """Place a 1-D tensor into a length-``size`` vector at ``slots``; others get ``fill``."""
    vv = _val(values)
    slots = np.asarray(slots, dtype=np.int64)
    out = np.full(size, fill, dtype=np.float64)
    out[slots] = vv
    return _make(out, (values,), lambda g: (g[slots],))


# linear algebra ----------------------------------------------------------


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim < 1 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if av.ndim == 1:
            gb = np.outer(av, g) if g.ndim == 1 else None
            return _unbroadcast(ga, av.shape), gb
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), vjp)


def spmm(mat, x, mat_t=None):
    """Constant sparse (or dense) matrix times a tracked dense tensor.

    ``mat_t`` optionally supplies the transpose in a fast layout (for a
    symmetric matrix, ``mat`` itself).
    """
    xv = _val(x)
    if mat.shape[1] != xv.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {mat.shape} and {xv.shape}")

    def vjp(g):
        mt = mat_t
        if mt is None:
            mt = mat.T.tocsr() if sparse.issparse(mat) else mat.T
        return (np.asarray(mt @ g),)

    return _make(np.asarray(mat @ xv), (x,), vjp)


def solve2x2(s, rhs):
    """Batched solve of 2x2 systems: s (..., 2, 2), rhs (..., 2) or (..., 2, k)."""
    sv, bv = _val(s), _val(rhs)
    if sv.shape[-2:] != (2, 2):
        raise ShapeError(f"solve2x2: matrix shape {sv.shape} is not (..., 2, 2)")
    vec = bv.ndim == sv.ndim - 1
    b2 = bv[..., None] if vec else bv
    if b2.shape[-2] != 2 or b2.shape[:-2] != sv.shape[:-2]:
        raise ShapeError(f"solve2x2: incompatible shapes {sv.shape} and {bv.shape}")
    a, b, c, d = sv[..., 0, 0], sv[..., 0, 1], sv[..., 1, 0], sv[..., 1, 1]
    det = a * d - b * c
    inv = np.stack([np.stack([d, -b], -1), np.stack([-c, a], -1)], -2) / det[..., None, None]
    x = inv @ b2

    def vjp(g):
        g2 = g[..., None] if vec else g
        gb = np.swapaxes(inv, -1, -2) @ g2
        gs = -gb @ np.swapaxes(x, -1, -2)
        return gs, (gb[..., 0] if vec else gb)

    return _make(x[..., 0] if vec else x, (s, rhs), vjp)


# neural network pieces ---------------------------------------------------


def softmax(a, axis=-1):
    av = _val(a)
    m = np.max(av, axis=axis, keepdims=True)
    e = np.exp(av - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp)


def cross_entropy(probs, target):
    """Per-row -log(probs[row, target[row]])."""
    pv = _val(probs)
    target = np.asarray(target, dtype=np.int64)
    if pv.ndim != 2 or target.shape != (pv.shape[0],):
        raise ShapeError(f"cross_entropy: probs {pv.shape} vs targets {target.shape}")
    rows = np.arange(pv.shape[0])
    picked = np.maximum(pv[rows, target], 1e-300)

    def vjp(g):
        full = np.zeros_like(pv)
        full[rows, target] = -g / picked
        return (full,)

    return _make(-np.log(picked), (probs,), vjp)


def squared_error(pred, target):
    d = _val(pred) - _val(target)
    pv, tv = _val(pred), _val(target)
    return _make(
        d * d,
        (pred, target),
        lambda g: (_unbroadcast(2.0 * g * d, pv.shape), _unbroadcast(-2.0 * g * d, tv.shape)),
    )


def batch_norm(x, gamma, beta, training, running_mean=None, running_var=None, eps=1e-5):
    """Normalize over axis 0.

    Returns ``(out, batch_mean, batch_var)``; in eval mode the running
    statistics are used and the returned statistics are those.
    """
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    if xv.shape[-1] != gv.shape[-1]:
        raise ShapeError(f"batch_norm: input {xv.shape} vs scale {gv.shape}")
    if training:
        mu = xv.mean(axis=0)
        var = xv.var(axis=0)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv_std
    out = xhat * gv + bv
    n = xv.shape[0]

    def vjp(g):
        dgamma = np.sum(g * xhat, axis=0)
        dbeta = np.sum(g, axis=0)
        if training:
            dx = (gv * inv_std / n) * (n * g - dbeta - xhat * dgamma)
        else:
            dx = g * (gv * inv_std)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), vjp), mu, var


def linear_bn_silu(x, w, gamma, beta, training, running_mean=None, running_var=None, eps=1e-5):
    """Fused ``silu(batch_norm(x @ w))``, the standard hidden layer.

    Same result as composing ``matmul``, ``batch_norm`` and ``silu`` but with
    a single tape record and fewer temporaries.  Returns ``(out, mean, var)``.
    """
    xv, wv, gv, bv = _val(x), _val(w), _val(gamma), _val(beta)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"linear_bn_silu: incompatible shapes {xv.shape} and {wv.shape}")
    if gv.shape != (wv.shape[1],):
        raise ShapeError(f"linear_bn_silu: output width {wv.shape[1]} vs scale {gv.shape}")
    z = xv @ wv
    if training:
        mu, var = _kernels.batch_moments(z)
    else:
        mu, var = np.asarray(running_mean, dtype=np.float64), np.asarray(running_var, dtype=np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    out, xhat, sig = _kernels.bn_silu_forward(z, mu, inv_std, gv, bv)

    def vjp(g):
        dz, dgamma, dbeta = _kernels.bn_silu_backward(
            np.ascontiguousarray(g), xhat, sig, gv, bv, inv_std, bool(training)
        )
        dx = dz @ wv.T if need_dx else None
        return dx, xv.T @ dz, dgamma, dbeta

    need_dx = isinstance(x, Tensor) and x.requires_grad
    return _make(out, (x, w, gamma, beta), vjp), mu, var


def lstm(x, w_ih, w_hh, bias, h0=None, c0=None):
    """Whole-sequence LSTM with gates ordered (input, forget, cell, output).

    x: (T, B, I); weights (I, 4H), (H, 4H); bias (4H,).  Initial states are
    constants.  Returns ``(hs, h_T, c_T)`` where ``hs`` is a tracked (T, B, H)
    tensor and the final states are plain arrays.
    """
    xv, wi, wh, bv = _val(x), _val(w_ih), _val(w_hh), _val(bias)
    if xv.ndim != 3 or wi.shape[0] != xv.shape[2] or wi.shape[1] != wh.shape[1]:
        raise ShapeError(f"lstm: input {xv.shape}, w_ih {wi.shape}, w_hh {wh.shape}")
    t_len, bsz, _ = xv.shape
    hid = wh.shape[0]
    h = np.zeros((bsz, hid)) if h0 is None else np.asarray(h0, dtype=np.float64)
    c = np.zeros((bsz, hid)) if c0 is None else np.asarray(c0, dtype=np.float64)
    zx = (xv.reshape(t_len * bsz, -1) @ wi).reshape(t_len, bsz, 4 * hid) + bv
    gates = np.empty((t_len, bsz, 4 * hid))
    cs = np.empty((t_len, bsz, hid))
    tcs = np.empty((t_len, bsz, hid))
    hs = np.empty((t_len, bsz, hid))
    h_prev = np.empty((t_len, bsz, hid))
    c_prev = np.empty((t_len, bsz, hid))
    for t in range(t_len):
        h_prev[t] = h
        c_prev[t] = c
        z = zx[t] + h @ wh
        gt = gates[t]
        gt[:, : 2 * hid] = _sigmoid(z[:, : 2 * hid])
        gt[:, 2 * hid : 3 * hid] = np.tanh(z[:, 2 * hid : 3 * hid])
        gt[:, 3 * hid :] = _sigmoid(z[:, 3 * hid :])
        c = gt[:, hid : 2 * hid] * c + gt[:, :hid] * gt[:, 2 * hid : 3 * hid]
        tc = np.tanh(c)
        h = gt[:, 3 * hid :] * tc
        cs[t], tcs[t], hs[t] = c, tc, h

    def vjp(g):
        dz = np.empty_like(gates)
        dh_next = np.zeros((bsz, hid))
        dc_next = np.zeros((bsz, hid))
        for t in range(t_len - 1, -1, -1):
            gt = gates[t]
            i, f = gt[:, :hid], gt[:, hid : 2 * hid]
            gg, o = gt[:, 2 * hid : 3 * hid], gt[:, 3 * hid :]
            dh = g[t] + dh_next
            dc = dh * o * (1.0 - tcs[t] * tcs[t]) + dc_next
            d = dz[t]
            d[:, :hid] = dc * gg * i * (1.0 - i)
            d[:, hid : 2 * hid] = dc * c_prev[t] * f * (1.0 - f)
            d[:, 2 * hid : 3 * hid] = dc * i * (1.0 - gg * gg)
            d[:, 3 * hid :] = dh * tcs[t] * o * (1.0 - o)
            dc_next = dc * f
            dh_next = d @ wh.T
        flat = dz.reshape(t_len * bsz, 4 * hid)
        dx = (flat @ wi.T).reshape(xv.shape)
        dwi = xv.reshape(t_len * bsz, -1).T @ flat
        dwh = h_prev.reshape(t_len * bsz, hid).T @ flat
        return dx, dwi, dwh, flat.sum(axis=0)

    out = _make(hs, (x, w_ih, w_hh, bias), vjp)
    return out, h.copy(), c.copy()


def lstm_cell(x, h, c, w_ih, w_hh, bias):
    """Single LSTM step built from primitive ops (reference for ``lstm``)."""
    hid = _val(w_hh).shape[0]
    z = add(add(matmul(x, w_ih), matmul(h, w_hh)), bias)
    i = sigmoid(z[:, :hid])
    f = sigmoid(z[:, hid : 2 * hid])
    g = tanh(z[:, 2 * hid : 3 * hid])
    o = sigmoid(z[:, 3 * hid :])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


# optimization ------------------------------------------------------------


def adam_step(
    params,
    grads,
    state,
    lr=1e-3,
    weight_decay=1e-3,
    beta1=0.9,
    beta2=0.999,
    eps=1e-8,
    decoupled=True,
):
    """One Adam update over ``{name: Tensor}`` in place.

    ``state`` holds ``step`` and per-name first/second moments; it is
    updated in place and returned.  Weight decay is decoupled from the
    gradient unless ``decoupled`` is false.
    """
    step = state.get("step", 0) + 1
    state["step"] = step
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.value.shape:
            raise ShapeError(f"adam: gradient {g.shape} vs parameter {name} {p.value.shape}")
        if not decoupled and weight_decay:
            g = g + weight_decay * p.value
        m = m_all.get(name)
        v = v_all.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_all[name], v_all[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if decoupled and weight_decay:
            p.value = p.value - lr * weight_decay * p.value
        p.value = p.value - lr * update
    return state


def numeric_gradient(f, tensor, eps=1e-5):
    """Central finite differences of scalar ``f()`` with respect to ``tensor``."""
    grad = np.zeros_like(tensor.value)
    flat = tensor.value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f())
        flat[i] = old - eps
        fm = float(f())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise |a - n| / max(|a|, |n|, floor), reduced with max."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
