"""Dense tensors with reverse-mode gradients for the layers used by the SR networks.

Only the handful of ops the FSRCNN / SRGAN / segmenter graphs need are
provided. Every op returns a fresh :class:`Tensor` whose ``_backward``
closure maps the output gradient to one gradient per parent. Calling
:meth:`Tensor.backward` on a scalar walks the graph once in reverse
topological order and *adds* into ``grad`` of every leaf that requires it;
``adam_step`` is what clears those gradients again.

Storage is float32 by default. Everything is dtype-generic, so feeding
float64 tensors runs the whole graph in double precision (the gradient
checker relies on that). Scalar losses are reduced and returned in float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ParameterError, ShapeError

DEFAULT_DTYPE = np.float32
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no backward closures inside the block (inference only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, factor: float) -> Tensor:
        return scale(self, factor)

    __rmul__ = __mul__

    def sum(self) -> Tensor:
        return total(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = node.grad + g.astype(node.data.dtype, copy=False)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Parameter(Tensor):
    """A trainable tensor with its gradient and Adam moment buffers."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        super().__init__(arr, requires_grad=True)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, step={self.step_count})"


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ParameterError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")


def adam_step(param: Parameter, config: AdamConfig) -> Parameter:
    """Apply one bias-corrected Adam update in place, then clear the gradient."""
    dt = param.data.dtype
    g = param.grad.astype(np.float64)
    t = param.step_count + 1
    m = config.beta1 * param.adam_m.astype(np.float64) + (1.0 - config.beta1) * g
    v = config.beta2 * param.adam_v.astype(np.float64) + (1.0 - config.beta2) * (g * g)
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    update = config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    # rebind rather than mutate: graphs built before the step keep their inputs
    param.data = (param.data.astype(np.float64) - update).astype(dt)
    param.adam_m = m.astype(dt)
    param.adam_v = v.astype(dt)
    param.grad = np.zeros_like(param.data)
    param.step_count = t
    return param


# ---------------------------------------------------------------------------
# convolution machinery


def _im2col(x: np.ndarray, k: int, stride: int, padding: int,
            out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """(N, C, H, W) -> strided view (C, k, k, N, Ho, Wo).

    Channel-major layout keeps the output-position axes innermost, so the
    copy into a GEMM operand walks memory along image rows.
    """
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    if out_hw is not None:
        win = win[:, :, :out_hw[0], :out_hw[1]]
    return win.transpose(1, 4, 5, 0, 2, 3)


def _col2im(cols: np.ndarray, out_hw: tuple[int, int], k: int, stride: int,
            padding: int) -> np.ndarray:
    """Scatter-add (C, k, k, N, Ho, Wo) patches into an (N, C, H, W) image."""
    c, _, _, n, ho, wo = cols.shape
    h, w = out_hw
    hp = max(h + 2 * padding, stride * (ho - 1) + k)
    wp = max(w + 2 * padding, stride * (wo - 1) + k)
    canvas = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            canvas[:, :, i:i + stride * (ho - 1) + 1:stride,
                   j:j + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    return np.ascontiguousarray(
        canvas[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3))


def _channel_rows(a: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W)."""
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def _from_channel_rows(m: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """(C, N*H*W) -> contiguous (N, C, H, W)."""
    return np.ascontiguousarray(m.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def _check_4d(name: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an (N, Cin, H, W) batch with a (Cout, Cin, k, k) kernel."""
    _check_4d("input", x)
    _check_4d("weight", weight)
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: stride={stride}, padding={padding}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {x.shape}")
    dt = np.result_type(x.data, weight.data)
    xd, wd = x.data.astype(dt, copy=False), weight.data.astype(dt, copy=False)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    wmat = wd.reshape(cout, -1)

    cols = _im2col(xd, k, stride, padding).reshape(cin * k * k, n * ho * wo)
    out = wmat @ cols
    out += bias.data.astype(dt, copy=False)[:, None]
    out = _from_channel_rows(out, n, ho, wo)

    def backward(g):
        g2 = _channel_rows(g)
        gx = gw = gb = None
        if _needs_grad(x):
            dcols = (wmat.T @ g2).reshape(cin, k, k, n, ho, wo)
            gx = _col2im(dcols, (h, w), k, stride, padding)
        if _needs_grad(weight):
            # im2col is recomputed instead of kept alive across the forward pass
            c = _im2col(xd, k, stride, padding).reshape(cin * k * k, n * ho * wo)
            gw = (g2 @ c.T).reshape(weight.shape)
        if _needs_grad(bias):
            gb = g2.sum(axis=1, dtype=np.float64).astype(dt)
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward)


def deconv_output_size(size: int, k: int, stride: int, padding: int, output_padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k + output_padding


def deconv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0,
             output_padding: int = 0) -> Tensor:
    """Transposed convolution: every input element stamps a weighted (Cout, k, k) kernel.

    ``weight`` is laid out (Cin, Cout, k, k). This is exactly the adjoint of
    :func:`conv2d` with the same kernel/stride/padding, plus ``output_padding``
    extra rows and columns at the bottom/right.
    """
    _check_4d("input", x)
    _check_4d("weight", weight)
    if not 0 <= output_padding < stride:
        raise ParameterError(
            f"deconv2d: output_padding must satisfy 0 <= output_padding < stride, "
            f"got output_padding={output_padding}, stride={stride}")
    if padding < 0:
        raise ParameterError(f"deconv2d: padding={padding}")
    n, cin, h, w = x.shape
    wcin, cout, k, k2 = weight.shape
    if wcin != cin or k != k2:
        raise ShapeError(f"deconv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"deconv2d: bias {bias.shape} does not match weight {weight.shape}")
    ho = deconv_output_size(h, k, stride, padding, output_padding)
    wo = deconv_output_size(w, k, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"deconv2d: empty output for input {x.shape}")
    dt = np.result_type(x.data, weight.data)
    xd, wd = x.data.astype(dt, copy=False), weight.data.astype(dt, copy=False)
    wmat = wd.reshape(cin, cout * k * k)

    xrows = _channel_rows(xd)
    stamps = (wmat.T @ xrows).reshape(cout, k, k, n, h, w)
    out = _col2im(stamps, (ho, wo), k, stride, padding)
    out += bias.data.astype(dt, copy=False)[None, :, None, None]

    def backward(g):
        gcols = _im2col(g, k, stride, padding, (h, w)).reshape(cout * k * k, n * h * w)
        gx = gw = gb = None
        if _needs_grad(x):
            gx = _from_channel_rows(wmat @ gcols, n, h, w)
        if _needs_grad(weight):
            gw = (xrows @ gcols.T).reshape(weight.shape)
        if _needs_grad(bias):
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# pointwise / dense ops


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Per-channel PReLU; channels live on axis 1."""
    if x.data.ndim < 2 or slope.data.ndim != 1 or slope.shape[0] != x.shape[1]:
        raise ShapeError(f"prelu: slope {slope.shape} does not match channels of input {x.shape}")
    dt = np.result_type(x.data, slope.data)
    xd = x.data.astype(dt, copy=False)
    bshape = (1, -1) + (1,) * (xd.ndim - 2)
    a = slope.data.astype(dt, copy=False).reshape(bshape)
    neg = xd < 0
    out = np.where(neg, a * xd, xd)

    def backward(g):
        gx = np.where(neg, a * g, g) if _needs_grad(x) else None
        ga = None
        if _needs_grad(slope):
            axes = (0,) + tuple(range(2, xd.ndim))
            ga = np.where(neg, g * xd, 0).sum(axis=axes, dtype=np.float64).astype(dt)
        return gx, ga

    return _result(out, (x, slope), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of an (N, F) batch through an (F, O) weight."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    dt = np.result_type(x.data, weight.data)
    xd, wd = x.data.astype(dt, copy=False), weight.data.astype(dt, copy=False)
    out = xd @ wd + bias.data.astype(dt, copy=False)

    def backward(g):
        return (
            g @ wd.T if _needs_grad(x) else None,
            xd.T @ g if _needs_grad(weight) else None,
            g.sum(axis=0, dtype=np.float64).astype(dt) if _needs_grad(bias) else None,
        )

    return _result(out, (x, weight, bias), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def backward(g):
        return g, g

    return _result(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    out = a.data * a.data.dtype.type(factor)

    def backward(g):
        return (g * factor,)

    return _result(out, (a,), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g):
        return (g.reshape(shape),)

    return _result(out, (x,), backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements, accumulated and returned in float64."""
    out = np.asarray(x.data.sum(dtype=np.float64))
    dt = x.data.dtype

    def backward(g):
        return (np.full(x.shape, g, dtype=dt),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def mse_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean of squared elementwise differences (float64 scalar)."""
    if prediction.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {prediction.shape} vs target {target.shape}")
    diff = prediction.data.astype(np.float64) - target.data.astype(np.float64)
    count = diff.size
    out = np.asarray(np.mean(diff * diff))

    def backward(g):
        grad = (2.0 / count) * g * diff
        return grad.astype(prediction.dtype), (-grad).astype(target.dtype)

    return _result(out, (prediction, target), backward)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logits(logit: Tensor, label) -> Tensor:
    """Stable binary cross-entropy on logits, averaged over all elements.

    ``label`` is a scalar in {0, 1} or an array broadcastable to the logits
    (per-pixel targets for the segmenter).
    """
    z = logit.data.astype(np.float64)
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), z.shape)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    count = z.size
    out = np.asarray(per.mean())

    def backward(g):
        return (((sigmoid(z) - y) * (g / count)).astype(logit.dtype),)

    return _result(out, (logit,), backward)


# ---------------------------------------------------------------------------
# gradient oracle


@dataclass(frozen=True)
class FiniteDiffResult:
    max_error: float
    checked: int
    skipped: int


def finite_diff_check(forward: Callable[[Tensor], Tensor], point: Tensor | np.ndarray,
                      eps: float | None = None, sample: int | None = None,
                      seed: int = 0) -> float:
    """Max relative error between backprop and central differences of ``forward`` at ``point``.

    ``eps`` defaults to 1e-3 for float32 points and 1e-6 for float64. The
    divisor is the realised step ``x_plus - x_minus`` in the point's dtype,
    not ``2 * eps``. ``sample`` limits the check to that many randomly
    chosen elements.
    """
    return finite_diff_detail(forward, point, eps, sample, seed).max_error


def finite_diff_detail(forward: Callable[[Tensor], Tensor], point: Tensor | np.ndarray,
                       eps: float | None = None, sample: int | None = None, seed: int = 0,
                       kink_tol: float | None = None) -> FiniteDiffResult:
    """:func:`finite_diff_check` with bookkeeping and optional kink detection.

    With ``kink_tol`` set, an element whose forward and backward one-sided
    slopes differ by more than ``kink_tol`` (relative) straddles a
    non-differentiable point such as a PReLU hinge; it is skipped and
    counted rather than scored. On smooth stretches the one-sided slopes
    agree whatever backprop says, so skipping cannot hide a wrong gradient.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point)
    if base.dtype not in (np.float32, np.float64):
        base = base.astype(DEFAULT_DTYPE)
    if eps is None:
        eps = 1e-3 if base.dtype == np.float32 else 1e-6
    if not eps > 0:
        raise ParameterError(f"eps must be > 0, got {eps}")

    probe = Tensor(base.copy(), requires_grad=True)
    out = forward(probe)
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ContractError(f"forward must return a scalar Tensor, got {shape}")
    f_mid = out.item()
    out.backward()
    analytic = probe.grad.astype(np.float64).ravel()

    idx = np.arange(base.size)
    if sample is not None and sample < base.size:
        idx = np.sort(np.random.default_rng(seed).choice(base.size, sample, replace=False))

    flat = base.ravel()
    worst, skipped = 0.0, 0
    for i in idx:
        plus, minus = flat.copy(), flat.copy()
        plus[i] = flat[i] + flat.dtype.type(eps)
        minus[i] = flat[i] - flat.dtype.type(eps)
        f_plus = forward(Tensor(plus.reshape(base.shape))).item()
        f_minus = forward(Tensor(minus.reshape(base.shape))).item()
        if kink_tol is not None:
            right = (f_plus - f_mid) / (float(plus[i]) - float(flat[i]))
            left = (f_mid - f_minus) / (float(flat[i]) - float(minus[i]))
            if abs(right - left) > kink_tol * max(abs(right), abs(left), 1e-8):
                skipped += 1
                continue
        numeric = (f_plus - f_minus) / (float(plus[i]) - float(minus[i]))
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return FiniteDiffResult(worst, len(idx) - skipped, skipped)
