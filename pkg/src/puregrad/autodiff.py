"""Dense float64 tensors and a reverse-mode differentiation tape.

The tape records primitive operations (op id, parent references, a closure
computing vector-Jacobian products) in an append-only list. Values are always
computed by the same raw numpy expressions whether or not recording is
enabled, so a recorded evaluation is bitwise identical to an unrecorded one —
the property behind the replay-integrity checks in the checkpointed backward
pass.

Reductions (sum/mean) accumulate strictly left to right (via cumulative sums),
making backward passes bitwise repeatable. matmul and the convolution einsum
delegate to numpy, which is deterministic for a fixed build.

Supported dtypes: float64 only. Broadcasting is limited to scalar-vs-array in
the elementwise binaries; anything richer must be spelled out with gather.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DomainError(ValueError):
    """An input left a primitive's mathematical domain."""


class GraphError(RuntimeError):
    """Structural misuse of the tape (dangling refs, mixed tapes)."""


def _seqsum(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    # strict left-to-right accumulation; np.cumsum is sequential by definition
    if axis is None:
        flat = a.ravel()
        if flat.size == 0:
            return np.float64(0.0)
        return np.cumsum(flat)[-1]
    return np.cumsum(a, axis=axis)[..., -1]


class Tensor:
    """Immutable n-dimensional array of 64-bit floats (row-major)."""

    __slots__ = ("array",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor elements must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # fast path for values produced by primitives; skips the finite check
        out = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(out, "array", arr)
        return out

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    def item(self) -> float:
        return float(self.array)

    def tolist(self):
        return self.array.tolist()

    def __repr__(self) -> str:
        return f"Tensor({self.array!r})"


def tensor(values) -> Tensor:
    return Tensor(values)


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=np.float64))


class _Node:
    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Var:
    """A tensor value recorded on a tape; produced only while recording."""

    __slots__ = ("value", "tape", "idx")

    def __init__(self, value: np.ndarray, tape: "Tape", idx: int):
        self.value = value
        self.tape = tape
        self.idx = idx

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def to_tensor(self) -> Tensor:
        return Tensor._wrap(self.value)


class Tape:
    """Append-only record of primitive applications.

    With recording off, `input` hands back the plain Tensor and no node is
    ever appended, so code written against this module runs identically in
    record and no-record modes.
    """

    __slots__ = ("nodes", "recording")

    def __init__(self, recording: bool = True):
        self.nodes: list[_Node] = []
        self.recording = recording

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def input(self, t: Tensor):
        """Register a differentiable leaf; identity when recording is off."""
        if not self.recording:
            return t
        self.nodes.append(_Node("input", (), None))
        return Var(t.array, self, len(self.nodes) - 1)

    def _record(self, op: str, value: np.ndarray, parents: tuple, vjp) -> Var:
        if not self.recording:
            raise GraphError(f"{op}: tape received a Var while recording is off")
        self.nodes.append(_Node(op, parents, vjp))
        return Var(value, self, len(self.nodes) - 1)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x.array


def as_tensor(x) -> Tensor:
    return x.to_tensor() if isinstance(x, Var) else x


def _operands(op: str, *args):
    """Raw arrays plus the single recording tape (or None) behind args."""
    tape = None
    vals = []
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise GraphError(f"{op}: operands recorded on different tapes")
            vals.append(a.value)
        elif isinstance(a, Tensor):
            vals.append(a.array)
        else:
            raise TypeError(f"{op}: expected Tensor or Var, got {type(a).__name__}")
    return vals, tape


def _emit(op, tape, value, args, vjps):
    """Wrap a computed value; record a node holding VJPs for the Var args."""
    if tape is None:
        return Tensor._wrap(value)
    parents = tuple(a.idx for a in args if isinstance(a, Var))
    live = [isinstance(a, Var) for a in args]

    def vjp(ct):
        return tuple(fn(ct) for fn, keep in zip(vjps, live) if keep)

    return tape._record(op, value, parents, vjp)


def _reduce_like(g: np.ndarray, shape: tuple) -> np.ndarray:
    # collapse a cotangent onto a scalar operand of an elementwise binary
    if shape == ():
        return np.asarray(_seqsum(g))
    return g


def _binary_shapes(op: str, av: np.ndarray, bv: np.ndarray):
    if av.shape != bv.shape and av.shape != () and bv.shape != ():
        raise ValueError(f"{op}: shape mismatch {av.shape} vs {bv.shape}")


def add(a, b):
    (av, bv), tape = _operands("add", a, b)
    _binary_shapes("add", av, bv)
    out = av + bv
    return _emit("add", tape, out, (a, b),
                 (lambda ct: _reduce_like(ct, av.shape),
                  lambda ct: _reduce_like(ct, bv.shape)))


def sub(a, b):
    (av, bv), tape = _operands("sub", a, b)
    _binary_shapes("sub", av, bv)
    out = av - bv
    return _emit("sub", tape, out, (a, b),
                 (lambda ct: _reduce_like(ct, av.shape),
                  lambda ct: _reduce_like(-ct, bv.shape)))


def mul(a, b):
    (av, bv), tape = _operands("mul", a, b)
    _binary_shapes("mul", av, bv)
    out = av * bv
    return _emit("mul", tape, out, (a, b),
                 (lambda ct: _reduce_like(ct * bv, av.shape),
                  lambda ct: _reduce_like(ct * av, bv.shape)))


def div(a, b):
    (av, bv), tape = _operands("div", a, b)
    _binary_shapes("div", av, bv)
    if np.any(bv == 0.0):
        raise DomainError("div: zero denominator")
    out = av / bv
    return _emit("div", tape, out, (a, b),
                 (lambda ct: _reduce_like(ct / bv, av.shape),
                  lambda ct: _reduce_like(-ct * av / (bv * bv), bv.shape)))


def scale(a, c: float):
    """Multiply by a Python scalar constant."""
    (av,), tape = _operands("scale", a)
    c = float(c)
    out = av * c
    return _emit("scale", tape, out, (a,), (lambda ct: ct * c,))


def shift(a, c: float):
    """Add a Python scalar constant."""
    (av,), tape = _operands("shift", a)
    out = av + float(c)
    return _emit("shift", tape, out, (a,), (lambda ct: ct,))


def exp(a):
    (av,), tape = _operands("exp", a)
    out = np.exp(av)
    return _emit("exp", tape, out, (a,), (lambda ct: ct * out,))


def log(a):
    (av,), tape = _operands("log", a)
    if np.any(av <= 0.0):
        raise DomainError("log: non-positive input")
    out = np.log(av)
    return _emit("log", tape, out, (a,), (lambda ct: ct / av,))


def tanh(a):
    (av,), tape = _operands("tanh", a)
    out = np.tanh(av)
    return _emit("tanh", tape, out, (a,), (lambda ct: ct * (1.0 - out * out),))


def arctanh(a):
    (av,), tape = _operands("arctanh", a)
    if np.any(np.abs(av) >= 1.0):
        raise DomainError("arctanh: input outside (-1, 1)")
    out = np.arctanh(av)
    return _emit("arctanh", tape, out, (a,), (lambda ct: ct / (1.0 - av * av),))


def square(a):
    (av,), tape = _operands("square", a)
    out = av * av
    return _emit("square", tape, out, (a,), (lambda ct: ct * (2.0 * av),))


def sqrt(a):
    (av,), tape = _operands("sqrt", a)
    if np.any(av < 0.0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(av)
    return _emit("sqrt", tape, out, (a,), (lambda ct: ct * (0.5 / out),))


def _expand_last(ct: np.ndarray, n: int) -> np.ndarray:
    return np.repeat(np.asarray(ct)[..., np.newaxis], n, axis=-1)


def vsum(a, axis: int | None = None):
    """Sum over all elements (axis=None) or the trailing axis (axis=-1)."""
    (av,), tape = _operands("sum", a)
    if axis is None:
        out = np.asarray(_seqsum(av))
        vjp = lambda ct: np.broadcast_to(ct, av.shape).copy()
    elif axis == -1:
        out = _seqsum(av, axis=-1)
        vjp = lambda ct: _expand_last(ct, av.shape[-1])
    else:
        raise ValueError("sum: axis must be None or -1")
    return _emit("sum", tape, out, (a,), (vjp,))


def vmean(a, axis: int | None = None):
    (av,), tape = _operands("mean", a)
    if axis is None:
        n = av.size
        out = np.asarray(_seqsum(av) / n)
        vjp = lambda ct: np.broadcast_to(ct / n, av.shape).copy()
    elif axis == -1:
        n = av.shape[-1]
        out = _seqsum(av, axis=-1) / n
        vjp = lambda ct: _expand_last(ct / n, n)
    else:
        raise ValueError("mean: axis must be None or -1")
    return _emit("mean", tape, out, (a,), (vjp,))


def vmax(a, axis: int | None = None):
    """Max reduction; the subgradient routes to the first maximal element."""
    (av,), tape = _operands("max", a)
    if axis is None:
        out = np.asarray(np.max(av))
        pos = int(np.argmax(av.ravel()))

        def vjp(ct):
            g = np.zeros(av.size, dtype=np.float64)
            g[pos] = np.asarray(ct)
            return g.reshape(av.shape)
    elif axis == -1:
        out = np.max(av, axis=-1)
        pos = np.argmax(av, axis=-1)

        def vjp(ct):
            g = np.zeros_like(av)
            np.put_along_axis(g, pos[..., np.newaxis],
                              np.asarray(ct)[..., np.newaxis], axis=-1)
            return g
    else:
        raise ValueError("max: axis must be None or -1")
    return _emit("max", tape, out, (a,), (vjp,))


def matmul(a, b):
    """2-D matrix product; 1-D operands follow numpy's vector conventions."""
    (av, bv), tape = _operands("matmul", a, b)
    if av.ndim > 2 or bv.ndim > 2 or av.ndim == 0 or bv.ndim == 0:
        raise ValueError(f"matmul: unsupported ranks {av.ndim} and {bv.ndim}")
    a2 = av[np.newaxis, :] if av.ndim == 1 else av
    b2 = bv[:, np.newaxis] if bv.ndim == 1 else bv
    if a2.shape[1] != b2.shape[0]:
        raise ValueError(f"matmul: inner dims {av.shape} vs {bv.shape}")
    out2 = a2 @ b2
    out = out2
    if av.ndim == 1:
        out = out[0]
    if bv.ndim == 1:
        out = out[..., 0]

    def lift(ct):
        c = np.asarray(ct)
        if av.ndim == 1:
            c = c[np.newaxis, ...]
        if bv.ndim == 1:
            c = c[..., np.newaxis]
        return c

    def vjp_a(ct):
        g = lift(ct) @ b2.T
        return g[0] if av.ndim == 1 else g

    def vjp_b(ct):
        g = a2.T @ lift(ct)
        return g[:, 0] if bv.ndim == 1 else g

    return _emit("matmul", tape, out, (a, b), (vjp_a, vjp_b))


def _windows(img: np.ndarray, kh: int, kw: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(img, (kh, kw))


def conv2d(img, kernel):
    """Valid 2-D cross-correlation of one image with one kernel."""
    (iv, kv), tape = _operands("conv2d", img, kernel)
    if iv.ndim != 2 or kv.ndim != 2:
        raise ValueError("conv2d: image and kernel must be 2-D")
    kh, kw = kv.shape
    if kh > iv.shape[0] or kw > iv.shape[1]:
        raise ValueError("conv2d: kernel larger than image")
    win = _windows(iv, kh, kw)
    out = np.einsum("ijmn,mn->ij", win, kv)

    def vjp_img(ct):
        c = np.asarray(ct)
        padded = np.pad(c, ((kh - 1, kh - 1), (kw - 1, kw - 1)))
        return np.einsum("ijmn,mn->ij", _windows(padded, kh, kw), kv[::-1, ::-1])

    def vjp_kernel(ct):
        return np.einsum("ijmn,ij->mn", win, np.asarray(ct))

    return _emit("conv2d", tape, out, (img, kernel), (vjp_img, vjp_kernel))


def softmax(a):
    """Softmax over the trailing axis, computed with a max shift."""
    (av,), tape = _operands("softmax", a)
    shifted = av - np.max(av, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(ct):
        c = np.asarray(ct)
        inner = np.sum(c * out, axis=-1, keepdims=True)
        return (c - inner) * out

    return _emit("softmax", tape, out, (a,), (vjp,))


def gather(a, idx):
    """Pick elements of the row-major flattening; output takes idx's shape."""
    (av,), tape = _operands("gather", a)
    indices = np.asarray(idx, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= av.size):
        raise IndexError("gather: index out of range")
    out = av.ravel()[indices]

    def vjp(ct):
        g = np.zeros(av.size, dtype=np.float64)
        np.add.at(g, indices.ravel(), np.asarray(ct).ravel())
        return g.reshape(av.shape)

    return _emit("gather", tape, out, (a,), (vjp,))


def concat(parts: Sequence):
    """Concatenate along the leading axis."""
    vals, tape = _operands("concat", *parts)
    out = np.concatenate([np.atleast_1d(v) for v in vals], axis=0)
    sizes = [np.atleast_1d(v).shape[0] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i, shape):
        def vjp(ct):
            piece = np.asarray(ct)[offsets[i]:offsets[i + 1]]
            return piece.reshape(shape)
        return vjp

    vjps = tuple(make_vjp(i, v.shape) for i, v in enumerate(vals))
    return _emit("concat", tape, out, tuple(parts), vjps)


def tape_backward(out: Var, seed: Tensor, wrt: Sequence[Var]) -> list[Tensor]:
    """Cotangents of `out` w.r.t. each Var in `wrt` (zeros if disconnected).

    Pure read of the tape: buffers are fresh per call and contributions fold
    in descending node order, so repeated calls are bitwise identical.
    """
    if not isinstance(out, Var):
        raise GraphError("tape_backward: output is not on a tape")
    tape = out.tape
    for w in wrt:
        if not isinstance(w, Var) or w.tape is not tape:
            raise GraphError("tape_backward: wrt entry not on the output's tape")
    seed_arr = np.asarray(value_of(seed), dtype=np.float64)
    if seed_arr.shape != out.value.shape:
        raise ValueError(
            f"tape_backward: seed shape {seed_arr.shape} != output shape {out.value.shape}")

    buffers: dict[int, np.ndarray] = {out.idx: seed_arr}
    nodes = tape.nodes
    for idx in range(out.idx, -1, -1):
        ct = buffers.get(idx)
        if ct is None:
            continue
        node = nodes[idx]
        if not node.parents:
            continue
        for parent, g in zip(node.parents, node.vjp(ct)):
            if parent >= idx:
                raise GraphError(f"tape_backward: node {idx} references later node {parent}")
            if parent in buffers:
                buffers[parent] = buffers[parent] + g
            else:
                buffers[parent] = np.asarray(g, dtype=np.float64)

    results = []
    for w in wrt:
        g = buffers.get(w.idx)
        if g is None:
            g = np.zeros_like(w.value)
        results.append(Tensor._wrap(np.asarray(g, dtype=np.float64).reshape(w.value.shape)))
    return results


def grad(f: Callable, x: Tensor) -> Tensor:
    """Gradient of a scalar-valued taped expression at x."""
    tape = Tape()
    xv = tape.input(x)
    out = f(xv)
    if not isinstance(out, Var):
        return zeros(x.shape)
    if out.value.shape != ():
        raise ValueError("grad: expression is not scalar-valued")
    (g,) = tape_backward(out, Tensor._wrap(np.asarray(1.0)), [xv])
    return g


def finite_diff_check(f: Callable, x: Tensor, h: float = 1e-5) -> float:
    """Max per-coordinate relative error of the tape gradient vs central
    differences: max_i |g_tape_i - g_fd_i| / max(|g_tape_i|, 1e-12)."""
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    g_tape = grad(f, x).array

    base = x.array
    g_fd = np.zeros_like(base)
    flat = g_fd.ravel()
    for i in range(base.size):
        bump = np.zeros_like(base)
        bump.ravel()[i] = h
        hi = value_of(f(Tensor._wrap(base + bump)))
        lo = value_of(f(Tensor._wrap(base - bump)))
        flat[i] = (float(hi) - float(lo)) / (2.0 * h)

    if not (np.all(np.isfinite(g_tape)) and np.all(np.isfinite(g_fd))):
        raise ValueError("finite_diff_check: non-finite gradient encountered")
    denom = np.maximum(np.abs(g_tape), 1e-12)
    return float(np.max(np.abs(g_tape - g_fd) / denom)) if base.size else 0.0
