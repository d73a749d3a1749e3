"""Dense float64 arrays with reverse-mode automatic differentiation.

Every primitive the model and loss suite need is implemented here as a
forward kernel plus its adjoint, recorded on a define-by-run tape.  A
central-difference oracle (`finite_difference_check`) provides an
independent check of every adjoint.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "concat",
    "matmul",
    "conv2d",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "maximum",
    "amax",
    "softmax",
    "avg_pool2d",
    "upsample_nearest2d",
    "dropout",
    "smooth_l1",
    "layer_norm",
    "group_norm",
    "evaluate",
    "gradients",
    "finite_difference_check",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the reverse-mode tape.

    `data` is always a float64 ndarray; `grad` is populated by `backward`.
    Tensors are immutable after construction as far as the tape is
    concerned: kernels never write into `data` of an existing node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._prev = _prev
        self._backward = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _prev)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------

    def backward(self, cotangent=None):
        """Accumulate gradients of `self` into every reachable leaf."""
        if cotangent is None:
            if self.data.size != 1:
                raise ValueError("backward() without cotangent requires a scalar output")
            cotangent = np.ones_like(self.data)
        else:
            cotangent = np.asarray(cotangent, dtype=np.float64)
            if cotangent.shape != self.data.shape:
                raise ValueError(
                    f"cotangent shape {cotangent.shape} != output shape {self.data.shape}"
                )

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))

        self.grad = cotangent.copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = grad.astype(np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def zero_grad(self):
        self.grad = None

    # -- elementwise arithmetic -------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data + other.data, _prev=(self, other))

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data - other.data, _prev=(self, other))

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g, other.data.shape))

        out._backward = back
        return out

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data * other.data, _prev=(self, other))

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data / other.data, _prev=(self, other))

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(
                    _unbroadcast(-g * self.data / (other.data**2), other.data.shape)
                )

        out._backward = back
        return out

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __neg__(self):
        return self * -1.0

    def __pow__(self, exponent):
        """Power with a constant exponent."""
        if isinstance(exponent, Tensor):
            raise TypeError("exponent must be a constant")
        e = float(exponent)
        out = Tensor(self.data**e, _prev=(self,))

        def back(g):
            if self.requires_grad:
                self._accum(g * e * self.data ** (e - 1.0))

        out._backward = back
        return out

    # -- shape manipulation ------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _prev=(self,))

        def back(g):
            if self.requires_grad:
                self._accum(g.reshape(self.data.shape))

        out._backward = back
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = Tensor(self.data.transpose(axes), _prev=(self,))
        inv = np.argsort(axes)

        def back(g):
            if self.requires_grad:
                self._accum(g.transpose(inv))

        out._backward = back
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], _prev=(self,))

        def back(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, key, g)
                self._accum(full)

        out._backward = back
        return out

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _prev=(self,))

        def back(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.data.shape).copy())

        out._backward = back
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)


# -- primitive functions ---------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along `axis` (channel concatenation and friends)."""
    tensors = [Tensor._lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _prev=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    out._backward = back
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix multiply; supports stacked (batched) operands via np.matmul."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    out = Tensor(np.matmul(a.data, b.data), _prev=(a, b))

    def back(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(_unbroadcast(gb, b.data.shape))

    out._backward = back
    return out


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """2-D convolution, stride 1, zero-filled same padding, odd kernels.

    x: (N, C, H, W); w: (O, C, kh, kw); output (N, O, H, W).
    """
    x, w = Tensor._lift(x), Tensor._lift(w)
    n, c, h, wd = x.data.shape
    o, c2, kh, kw = w.data.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d requires odd kernel sizes for same padding")
    ph = (kh - 1) * dilation // 2
    pw = (kw - 1) * dilation // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out_data = np.zeros((n, o, h, wd))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i * dilation : i * dilation + h, j * dilation : j * dilation + wd]
            out_data += np.einsum("nchw,oc->nohw", patch, w.data[:, :, i, j], optimize=True)
    out = Tensor(out_data, _prev=(x, w))

    def back(g):
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[
                        :, :, i * dilation : i * dilation + h, j * dilation : j * dilation + wd
                    ]
                    gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch, optimize=True)
            w._accum(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :, :, i * dilation : i * dilation + h, j * dilation : j * dilation + wd
                    ] += np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
            x._accum(gxp[:, :, ph : ph + h, pw : pw + wd])

    out._backward = back
    if bias is not None:
        out = out + bias.reshape(1, o, 1, 1)
    return out


def relu(x: Tensor) -> Tensor:
    x = Tensor._lift(x)
    out = Tensor(np.maximum(x.data, 0.0), _prev=(x,))

    def back(g):
        if x.requires_grad:
            x._accum(g * (x.data > 0.0))

    out._backward = back
    return out


def tanh(x: Tensor) -> Tensor:
    x = Tensor._lift(x)
    t = np.tanh(x.data)
    out = Tensor(t, _prev=(x,))

    def back(g):
        if x.requires_grad:
            x._accum(g * (1.0 - t**2))

    out._backward = back
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    inner = tanh((x + x**3 * 0.044715) * _GELU_C)
    return x * (inner + 1.0) * 0.5


def sigmoid(x: Tensor) -> Tensor:
    x = Tensor._lift(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s, _prev=(x,))

    def back(g):
        if x.requires_grad:
            x._accum(g * s * (1.0 - s))

    out._backward = back
    return out


def exp(x: Tensor) -> Tensor:
    x = Tensor._lift(x)
    e = np.exp(x.data)
    out = Tensor(e, _prev=(x,))

    def back(g):
        if x.requires_grad:
            x._accum(g * e)

    out._backward = back
    return out


def log(x: Tensor) -> Tensor:
    x = Tensor._lift(x)
    out = Tensor(np.log(x.data), _prev=(x,))

    def back(g):
        if x.requires_grad:
            x._accum(g / x.data)

    out._backward = back
    return out


def sqrt(x: Tensor) -> Tensor:
    x = Tensor._lift(x)
    s = np.sqrt(x.data)
    out = Tensor(s, _prev=(x,))

    def back(g):
        if x.requires_grad:
            x._accum(g * 0.5 / s)

    out._backward = back
    return out


def absolute(x: Tensor) -> Tensor:
    x = Tensor._lift(x)
    out = Tensor(np.abs(x.data), _prev=(x,))

    def back(g):
        if x.requires_grad:
            x._accum(g * np.sign(x.data))

    out._backward = back
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise maximum of two arrays; ties split the gradient evenly."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    out = Tensor(np.maximum(a.data, b.data), _prev=(a, b))

    def back(g):
        tie = a.data == b.data
        if a.requires_grad:
            wa = np.where(tie, 0.5, (a.data > b.data).astype(np.float64))
            a._accum(_unbroadcast(g * wa, a.data.shape))
        if b.requires_grad:
            wb = np.where(tie, 0.5, (b.data > a.data).astype(np.float64))
            b._accum(_unbroadcast(g * wb, b.data.shape))

    out._backward = back
    return out


def amax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; gradient is routed to the maxima (split across ties)."""
    x = Tensor._lift(x)
    m = x.data.max(axis=axis, keepdims=True)
    out_data = m if keepdims else np.squeeze(m, axis=axis) if axis is not None else m.reshape(())
    out = Tensor(out_data, _prev=(x,))

    def back(g):
        if not x.requires_grad:
            return
        mask = (x.data == m).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)
        gg = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        x._accum(mask * gg)

    out._backward = back
    return out


def amin(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return -amax(-x, axis=axis, keepdims=keepdims)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax over `axis`."""
    shifted = x - amax(x, axis=axis, keepdims=True)
    e = exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k-by-k average pooling on (N, C, H, W)."""
    x = Tensor._lift(x)
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial dims ({h},{w}) not divisible by {k}")
    out_data = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    out = Tensor(out_data, _prev=(x,))

    def back(g):
        if x.requires_grad:
            gg = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
            x._accum(gg)

    out._backward = back
    return out


def upsample_nearest2d(x: Tensor, k: int) -> Tensor:
    """Nearest-neighbour upsampling by factor k on (N, C, H, W)."""
    x = Tensor._lift(x)
    out = Tensor(np.repeat(np.repeat(x.data, k, axis=2), k, axis=3), _prev=(x,))
    n, c, h, w = x.data.shape

    def back(g):
        if x.requires_grad:
            x._accum(g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)))

    out._backward = back
    return out


def dropout(x: Tensor, rate: float, seed: int, train: bool = True) -> Tensor:
    """Seeded inverted dropout; identity in inference mode."""
    if not train or rate <= 0.0:
        return Tensor._lift(x)
    x = Tensor._lift(x)
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask, _prev=(x,))

    def back(g):
        if x.requires_grad:
            x._accum(g * mask)

    out._backward = back
    return out


def smooth_l1(a: Tensor, b: Tensor) -> Tensor:
    """SmoothL1(a, b): 0.5 (a-b)^2 where |a-b| < 1, |a-b| - 0.5 elsewhere."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    d = a - b
    near = Tensor((np.abs(d.data) < 1.0).astype(np.float64))
    return near * (d**2 * 0.5) + (1.0 - near) * (absolute(d) - 0.5)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               axis: int = -1, eps: float = 1e-9) -> Tensor:
    """Normalize over `axis` to zero mean, unit variance, then affine."""
    mu = x.mean(axis=axis, keepdims=True)
    centered = x - mu
    var = (centered**2).mean(axis=axis, keepdims=True)
    out = centered / sqrt(var + eps)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None,
               beta: Tensor | None = None, eps: float = 1e-9) -> Tensor:
    """Group normalization on (N, C, H, W); affine params per channel."""
    n, c, h, w = x.data.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.reshape(n, groups, c // groups, h, w)
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    centered = xg - mu
    var = (centered**2).mean(axis=(2, 3, 4), keepdims=True)
    out = (centered / sqrt(var + eps)).reshape(n, c, h, w)
    if gamma is not None:
        out = out * gamma.reshape(1, c, 1, 1)
    if beta is not None:
        out = out + beta.reshape(1, c, 1, 1)
    return out


# -- graph-level helpers ---------------------------------------------------


def evaluate(fn, bindings: dict) -> list:
    """Run `fn` on leaf tensors built from `bindings`; return forward ndarrays.

    `fn` maps a dict of leaf Tensors to a Tensor or a sequence of Tensors.
    Deterministic for fixed bindings (any dropout inside `fn` must carry its
    own fixed seed).
    """
    leaves = {k: Tensor(v) for k, v in bindings.items()}
    out = fn(leaves)
    outs = out if isinstance(out, (list, tuple)) else [out]
    return [o.data.copy() for o in outs]


def gradients(fn, bindings: dict, cotangent=None) -> dict:
    """Reverse-mode gradients of `fn`'s (single) output w.r.t. every leaf."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in bindings.items()}
    out = fn(leaves)
    if isinstance(out, (list, tuple)):
        raise ValueError("gradients expects a single-output graph")
    out.backward(cotangent)
    return {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in leaves.items()
    }


def finite_difference_check(fn, bindings: dict, step: float = 1e-5,
                            leaves=None) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    The graph output must be scalar.  Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8) per element; the max over all checked
    leaf elements is returned.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = gradients(fn, bindings)
    names = list(bindings) if leaves is None else list(leaves)

    def value(b):
        out = fn({k: Tensor(v) for k, v in b.items()})
        if out.data.size != 1:
            raise ValueError("finite_difference_check requires a scalar output")
        return float(out.data)

    worst = 0.0
    for name in names:
        base = np.asarray(bindings[name], dtype=np.float64)
        flat = base.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            pert = {k: (v if k != name else base) for k, v in bindings.items()}
            flat[i] = orig + step
            fp = value(pert)
            flat[i] = orig - step
            fm = value(pert)
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * step)
        ana = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        err = float(np.max(np.abs(ana - num) / denom)) if flat.size else 0.0
        worst = max(worst, err)
    return worst
