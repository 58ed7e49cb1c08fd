"""
Dense tensors with tape-based reverse-mode automatic differentiation.

Operations executed while a `Tape` is active (``with Tape() as tape:``) are
recorded when at least one input requires a gradient. `backward(loss, tape)`
replays the recorded operations once, in reverse order, and accumulates
gradients into the leaf tensors. Outside a tape nothing is recorded, which is
how inference runs.

Also hosts the Adam optimizer, the finite-difference gradient checker, and the
seeded random stream used everywhere else in the package.
"""
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, GradCheckError, NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


class Tensor:
    """
    A dense n-dimensional array with an optional gradient buffer.

    `data` is never replaced by operations; only leaf parameters are updated in
    place by the optimizer and only `grad` is accumulated by `backward`.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[np.dtype] = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float32
        self.data = np.array(data, dtype=dtype, copy=True, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._record: Optional["_Record"] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(array)
        out.requires_grad = requires_grad
        out.grad = None
        out._record = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are wrapped with the tensor's own dtype
    def _lift(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other, dtype=self.dtype)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass(eq=False)
class _Record:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


class Tape:
    """Ordered record of executed operations; one backward pass per recording."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        for record in self.records:
            record.output._record = None
        self.records.clear()
        self.consumed = False

    def holds(self, tensor: Tensor) -> bool:
        return any(record.output is tensor for record in self.records)


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(name: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward_fn) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=requires_grad)
    tape = current_tape()
    if requires_grad and tape is not None:
        record = _Record(name=name, inputs=inputs, output=result, backward_fn=backward_fn)
        tape.records.append(record)
        result._record = record
    return result


def _unbroadcast(grad: np.ndarray, to_shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so `grad` matches `to_shape`."""
    if grad.shape == to_shape:
        return grad
    while grad.ndim > len(to_shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(to_shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


# --- elementwise ---

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit("scale", (a,), a.data * a.data.dtype.type(factor), lambda g: (g * factor,))


def square(a: Tensor) -> Tensor:
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at 0
    return _emit("abs", (a,), np.abs(a.data), lambda g: (np.sign(a.data) * g,))


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    return _emit("relu", (a,), np.maximum(a.data, 0), lambda g: (g * (a.data > 0),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


# --- reductions ---

def tensor_sum(a: Tensor) -> Tensor:
    return _emit("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype),
                 lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _emit("mean", (a,), np.asarray(a.data.mean(), dtype=a.dtype),
                 lambda g: (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True),))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).astype(x.dtype, copy=True),)

    return _emit("global_avg_pool", (x,), out, backward_fn)


# --- linear layers ---

def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense expects [B,Din] and [Dout,Din], got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input has {x.shape[1]} features but weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match Dout={weight.shape[0]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads + ((g.sum(axis=0),) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _emit("dense", inputs, out, backward_fn)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0:
        raise ConfigurationError(f"kernel {kernel} larger than padded input {size + 2 * pad}")
    if span % stride:
        raise ConfigurationError(
            f"input {size} with pad {pad} and kernel {kernel} is not divisible by stride {stride}"
        )
    return span // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size - 1) * stride - 2 * pad + kernel
    if out <= 0:
        raise ConfigurationError(f"deconv of size {size} (k={kernel}, s={stride}, p={pad}) is empty")
    return out


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [B, C, H', W', kh, kw] view, no copy
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _check_conv_args(x: Tensor, weight: Tensor, bias: Optional[Tensor], in_axis: int, out_axis: int, op: str):
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"{op} expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels but weight expects {weight.shape[in_axis]}")
    if bias is not None and bias.shape != (weight.shape[out_axis],):
        raise ShapeError(f"{op}: bias shape {bias.shape} does not match {weight.shape[out_axis]} output channels")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation; weight is [Cout, Cin, kh, kw]."""
    _check_conv_args(x, weight, bias, in_axis=1, out_axis=0, op="conv2d")
    B, C, H, W = x.shape
    Cout, _, kh, kw = weight.shape
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)

    xp = _pad(x.data, pad)
    cols = _windows(xp, kh, kw, stride)
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward_fn(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # [B, Ho, Wo, Cin, kh, kw]
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        grads = (gx, gw)
        return grads + ((g.sum(axis=(0, 2, 3)),) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _emit("conv2d", inputs, out, backward_fn)


def deconv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed convolution; weight is [Cin, Cout, kh, kw] (the conv2d weight it is the adjoint of)."""
    _check_conv_args(x, weight, bias, in_axis=0, out_axis=1, op="deconv2d")
    B, C, H, W = x.shape
    _, Cout, kh, kw = weight.shape
    Ho = deconv_output_size(H, kh, stride, pad)
    Wo = deconv_output_size(W, kw, stride, pad)
    Hf, Wf = (H - 1) * stride + kh, (W - 1) * stride + kw

    contrib = np.tensordot(x.data, weight.data, axes=([1], [0]))  # [B, H, W, Cout, kh, kw]
    full = np.zeros((B, Cout, Hf, Wf), dtype=np.result_type(x.data, weight.data))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * H:stride, j:j + stride * W:stride] += \
                contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, pad:pad + Ho, pad:pad + Wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward_fn(g):
        cols = _windows(_pad(g, pad), kh, kw, stride)  # [B, Cout, H, W, kh, kw]
        gx = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, cols, axes=([0, 2, 3], [0, 2, 3]))
        grads = (gx, gw)
        return grads + ((g.sum(axis=(0, 2, 3)),) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _emit("deconv2d", inputs, out, backward_fn)


# --- backward ---

def backward(loss: Tensor, tape: Tape, inputs: Iterable[Tensor] = ()) -> None:
    """
    Populate `.grad` of every requires_grad leaf upstream of `loss`.

    Leaves seen on the tape (and any extra `inputs`) start from zero, so a
    leaf that does not influence the loss ends with an all-zero gradient.
    """
    if tape.consumed:
        raise TapeError("backward already ran on this tape; call tape.reset() before reusing it")
    if loss.data.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.holds(loss):
        raise TapeError("loss was not produced by an operation recorded on this tape (detached)")

    for t in inputs:
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)
    for record in tape.records:
        for t in record.inputs:
            if t.requires_grad and t.is_leaf and t.grad is None:
                t.grad = np.zeros_like(t.data)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for record in reversed(tape.records):
        g_out = pending.pop(id(record.output), None)
        if g_out is None:
            continue
        for t, g in zip(record.inputs, record.backward_fn(g_out)):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise ShapeError(f"{record.name}: gradient shape {g.shape} != input shape {t.shape}")
            if t.is_leaf:
                t.grad += g
            else:
                key = id(t)
                pending[key] = pending[key] + g if key in pending else g
    tape.consumed = True


# --- gradient checking ---

def grad_check_params(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """
    Max relative error between analytic and central-difference gradients of the
    scalar `f()` with respect to every element of every tensor in `params`.
    """
    if not 1e-7 <= eps <= 1e-5:
        raise ConfigurationError(f"eps must lie in [1e-7, 1e-5], got {eps}")
    for p in params:
        if p.dtype != np.float64:
            raise ConfigurationError(f"grad_check needs float64 tensors, got {p.dtype}")
        p.requires_grad = True
        p.grad = None

    with Tape() as tape:
        loss = f()
    backward(loss, tape, inputs=params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + eps
            plus = f().item()
            flat[k] = original - eps
            minus = f().item()
            flat[k] = original
            numeric = (plus - minus) / (2.0 * eps)
            if not (np.isfinite(numeric) and np.isfinite(a_flat[k])):
                raise GradCheckError(
                    f"non-finite gradient at element {k} of tensor {p.shape}: analytic={a_flat[k]}, numeric={numeric}"
                )
            err = abs(a_flat[k] - numeric) / max(1e-8, abs(a_flat[k]) + abs(numeric))
            worst = max(worst, err)
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    return grad_check_params(lambda: f(x), [x], eps)


# --- optimizer ---

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    names: Optional[Sequence[str]] = None,
) -> None:
    """Bias-corrected Adam update applied in place to `params`."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        label = names[i] if names else f"#{i}"
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: parameter {label} has shape {p.shape}, gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"non-finite gradient for parameter {label} at step {state.step + 1} "
                f"(nan={int(np.isnan(g).sum())}, inf={int(np.isinf(g).sum())})"
            )

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)


class Adam:
    def __init__(self, named_params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.names = list(named_params)
        self.params = list(named_params.values())
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state, self.names)


# --- randomness ---

class SeededRng:
    """
    PCG64 stream derived from a 64-bit seed and optional integer sub-stream keys.

    `spawn(*keys)` gives an independent, reproducible child stream, e.g. one per
    epoch or per sample, so results do not depend on consumption order elsewhere.
    """

    _MASK = (1 << 64) - 1

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed) & self._MASK
        self.keys = tuple(int(k) & self._MASK for k in keys)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys])))

    def spawn(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, *self.keys, *keys)

    def random(self) -> float:
        return float(self._gen.random())

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: Optional[int] = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def he_normal(shape: Sequence[int], fan_in: int, rng: SeededRng, dtype=np.float32) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=tuple(shape)), requires_grad=True, dtype=dtype)


def zeros(shape: Sequence[int], dtype=np.float32, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad, dtype=dtype)
