"""
Dense-array compute core for the neural rankers
Reverse-mode differentiation on a tape, central-difference gradient checking,
Adam, and the JSON parameter checkpoint format
"""
import json
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import softmax as _softmax

import config
from atomic_io import atomic_write_text
from errors import ContractError, NumericError, ParseError

CHECKPOINT_FORMAT_VERSION = 1

ArrayLike = Union[np.ndarray, float, Sequence[float]]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A value recorded on a tape. Parameters and constants are leaves."""

    __slots__ = ("data", "tape", "name", "requires_grad")

    def __init__(self, data: np.ndarray, tape: "Tape", name: Optional[str] = None,
                 requires_grad: bool = False):
        self.data = data
        self.tape = tape
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item: tensor of shape {self.data.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.data.shape}>"


@dataclass
class _Record:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class Tape:
    """Ordered record of primitive ops; backward walks it in reverse"""

    def __init__(self):
        self.records: List[_Record] = []
        self.parameters: Dict[str, Tensor] = {}

    def parameter(self, name: str, value: ArrayLike) -> Tensor:
        if name in self.parameters:
            raise ContractError(f"parameter {name!r} registered twice on the same tape")
        tensor = Tensor(np.asarray(value, dtype=np.float64), self, name=name, requires_grad=True)
        self.parameters[name] = tensor
        return tensor

    def constant(self, value: ArrayLike) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self)

    def record(self, op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: Backward) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise NumericError(f"{op}: non-finite output for input shapes {[t.shape for t in inputs]}")
        requires_grad = any(t.requires_grad for t in inputs)
        output = Tensor(data, self, requires_grad=requires_grad)
        if requires_grad:
            self.records.append(_Record(op, tuple(inputs), output, backward))
        return output

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        """Exact reverse-mode gradients of a scalar loss for every registered parameter"""
        if not self.records:
            raise ContractError("backward: nothing recorded, run a forward pass first")
        if loss.tape is not self:
            raise ContractError("backward: loss was recorded on another tape")
        if loss.data.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")

        start = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=np.float64).reshape(loss.shape)
        grads: Dict[int, np.ndarray] = {id(loss): start}
        for record in reversed(self.records):
            upstream = grads.get(id(record.output))
            if upstream is None:
                continue
            for tensor, grad in zip(record.inputs, record.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        return {
            name: grads.get(id(tensor), np.zeros_like(tensor.data))
            for name, tensor in self.parameters.items()
        }


def _tape_of(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for tensor in tensors[1:]:
        if tensor.tape is not tape:
            raise ContractError("operands were recorded on different tapes")
    return tape


# Forward primitives

def affine(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ W + b for 1-D or 2-D x and W"""
    tape = _tape_of(x, W, *([b] if b is not None else []))
    xd, Wd = x.data, W.data
    if xd.ndim not in (1, 2) or Wd.ndim not in (1, 2) or xd.shape[-1] != Wd.shape[0]:
        raise ContractError(f"affine: x {xd.shape} incompatible with W {Wd.shape}")
    inner = Wd.shape[0]
    x2 = xd.reshape(-1, inner)
    W2 = Wd.reshape(inner, -1)
    out2 = x2 @ W2
    if b is not None:
        if b.data.size != W2.shape[1]:
            raise ContractError(f"affine: bias {b.shape} incompatible with W {Wd.shape}")
        out2 = out2 + b.data.reshape(-1)
    out = out2.reshape(xd.shape[:-1] + Wd.shape[1:])

    def backward(g):
        g2 = g.reshape(out2.shape)
        grads = [(g2 @ W2.T).reshape(xd.shape), (x2.T @ g2).reshape(Wd.shape)]
        if b is not None:
            grads.append(g2.sum(axis=0).reshape(b.data.shape))
        return grads

    inputs = (x, W) if b is None else (x, W, b)
    return tape.record("affine", inputs, out, backward)


def conv1d(x: Tensor, filters: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Valid 1-D convolution over the token axis: x (n, D), filters (F, width, D) -> (n - width + 1, F)"""
    tape = _tape_of(x, filters, *([bias] if bias is not None else []))
    xd, fd = x.data, filters.data
    if xd.ndim != 2 or fd.ndim != 3 or fd.shape[2] != xd.shape[1]:
        raise ContractError(f"conv1d: x {xd.shape} incompatible with filters {fd.shape}")
    width = fd.shape[1]
    if xd.shape[0] < width:
        raise ContractError(f"conv1d: sequence length {xd.shape[0]} shorter than width {width}")
    windows = sliding_window_view(xd, width, axis=0)  # (T, D, width)
    out = np.einsum("tdk,fkd->tf", windows, fd)
    if bias is not None:
        if bias.shape != (fd.shape[0],):
            raise ContractError(f"conv1d: bias {bias.shape} for {fd.shape[0]} filters")
        out = out + bias.data
    steps = out.shape[0]

    def backward(g):
        gx = np.zeros_like(xd)
        for k in range(width):
            gx[k:k + steps] += g @ fd[:, k, :]
        grads = [gx, np.einsum("tf,tdk->fkd", g, windows)]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, filters) if bias is None else (x, filters, bias)
    return tape.record("conv1d", inputs, out, backward)


def conv2d(x: Tensor, filters: Tensor, bias: Optional[Tensor] = None, pad: int = 0) -> Tensor:
    """2-D convolution: x (C, H, W), filters (O, C, kh, kw) -> (O, H', W'); valid unless pad > 0"""
    tape = _tape_of(x, filters, *([bias] if bias is not None else []))
    xd, fd = x.data, filters.data
    if xd.ndim != 3 or fd.ndim != 4 or fd.shape[1] != xd.shape[0]:
        raise ContractError(f"conv2d: x {xd.shape} incompatible with filters {fd.shape}")
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad))) if pad else xd
    kh, kw = fd.shape[2], fd.shape[3]
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ContractError(f"conv2d: input {xp.shape} smaller than kernel {kh}x{kw}")
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (C, Ho, Wo, kh, kw)
    out = np.tensordot(fd, windows, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        if bias.shape != (fd.shape[0],):
            raise ContractError(f"conv2d: bias {bias.shape} for {fd.shape[0]} output channels")
        out = out + bias.data[:, None, None]
    Ho, Wo = out.shape[1], out.shape[2]

    def backward(g):
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + Ho, j:j + Wo] += np.tensordot(fd[:, :, i, j], g, axes=([0], [0]))
        gx = gxp[:, pad:pad + xd.shape[1], pad:pad + xd.shape[2]] if pad else gxp
        grads = [gx, np.tensordot(g, windows, axes=([1, 2], [1, 2]))]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    inputs = (x, filters) if bias is None else (x, filters, bias)
    return tape.record("conv2d", inputs, out, backward)


def _as_channels(data: np.ndarray, op: str) -> np.ndarray:
    if data.ndim == 2:
        return data[None]
    if data.ndim == 3:
        return data
    raise ContractError(f"{op}: expected (H, W) or (C, H, W), got {data.shape}")


def maxpool2d(x: Tensor, window: Tuple[int, int] = (2, 2)) -> Tensor:
    """Non-overlapping max pooling with stride = window; trailing rows/cols are dropped"""
    tape = _tape_of(x)
    x3 = _as_channels(x.data, "maxpool2d")
    ph, pw = window
    C, H, W = x3.shape
    Ho, Wo = H // ph, W // pw
    if Ho == 0 or Wo == 0:
        raise ContractError(f"maxpool2d: input {x.shape} smaller than window {ph}x{pw}")
    blocks = x3[:, :Ho * ph, :Wo * pw].reshape(C, Ho, ph, Wo, pw).transpose(0, 1, 3, 2, 4).reshape(C, Ho, Wo, ph * pw)
    argmax = blocks.argmax(axis=-1)[..., None]
    out3 = np.take_along_axis(blocks, argmax, axis=-1)[..., 0]
    out = out3 if x.data.ndim == 3 else out3[0]

    def backward(g):
        g3 = g if g.ndim == 3 else g[None]
        gblocks = np.zeros_like(blocks)
        np.put_along_axis(gblocks, argmax, g3[..., None], axis=-1)
        gx3 = np.zeros_like(x3)
        unblocked = gblocks.reshape(C, Ho, Wo, ph, pw).transpose(0, 1, 3, 2, 4)
        gx3[:, :Ho * ph, :Wo * pw] = unblocked.reshape(C, Ho * ph, Wo * pw)
        return [gx3.reshape(x.data.shape)]

    return tape.record("maxpool2d", (x,), out, backward)


def _adaptive_bins(size: int, bins: int) -> List[Tuple[int, int]]:
    return [((i * size) // bins, -((-(i + 1) * size) // bins)) for i in range(bins)]


def adaptive_maxpool2d(x: Tensor, output_size: Tuple[int, int]) -> Tensor:
    """Max over a fixed grid of bins, start = floor(i*in/out), end = ceil((i+1)*in/out)"""
    tape = _tape_of(x)
    x3 = _as_channels(x.data, "adaptive_maxpool2d")
    C, H, W = x3.shape
    oh, ow = output_size
    if H < 1 or W < 1:
        raise ContractError(f"adaptive_maxpool2d: empty input {x.shape}")
    row_bins, col_bins = _adaptive_bins(H, oh), _adaptive_bins(W, ow)
    out3 = np.empty((C, oh, ow))
    picks = []
    channels = np.arange(C)
    for i, (h0, h1) in enumerate(row_bins):
        for j, (w0, w1) in enumerate(col_bins):
            region = x3[:, h0:h1, w0:w1].reshape(C, -1)
            arg = region.argmax(axis=1)
            out3[:, i, j] = region[channels, arg]
            dh, dw = np.divmod(arg, w1 - w0)
            picks.append((i, j, h0 + dh, w0 + dw))
    out = out3 if x.data.ndim == 3 else out3[0]

    def backward(g):
        g3 = g if g.ndim == 3 else g[None]
        gx3 = np.zeros_like(x3)
        for i, j, rows, cols in picks:
            # bins may overlap, so accumulate
            np.add.at(gx3, (channels, rows, cols), g3[:, i, j])
        return [gx3.reshape(x.data.shape)]

    return tape.record("adaptive_maxpool2d", (x,), out, backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _tape_of(x).record("relu", (x,), np.maximum(xd, 0.0), lambda g: [g * (xd > 0.0)])


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _tape_of(x).record("tanh", (x,), y, lambda g: [g * (1.0 - y * y)])


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _tape_of(x).record("exp", (x,), y, lambda g: [g * y])


def log(x: Tensor, clamp: float = config.LOG_CLAMP) -> Tensor:
    """Natural log with inputs clamped below; clamped entries pass no gradient"""
    xd = x.data
    active = xd > clamp
    y = np.log(np.maximum(xd, clamp))

    def backward(g):
        return [np.where(active, g / np.where(active, xd, 1.0), 0.0)]

    return _tape_of(x).record("log", (x,), y, backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-shifted)"""
    y = _softmax(x.data, axis=-1)

    def backward(g):
        return [y * (g - np.sum(g * y, axis=-1, keepdims=True))]

    return _tape_of(x).record("softmax", (x,), y, backward)


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    xd = x.data
    out = np.asarray(xd.sum(axis=axis))

    def backward(g):
        if axis is None:
            return [np.full(xd.shape, float(g))]
        return [np.broadcast_to(np.expand_dims(g, axis), xd.shape).copy()]

    return _tape_of(x).record("reduce_sum", (x,), out, backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ContractError(f"add: shapes {x.shape} and {y.shape} differ")
    return _tape_of(x, y).record("add", (x, y), x.data + y.data, lambda g: [g, g])


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors"""
    if x.shape != y.shape:
        raise ContractError(f"mul: shapes {x.shape} and {y.shape} differ")
    xd, yd = x.data, y.data
    return _tape_of(x, y).record("mul", (x, y), xd * yd, lambda g: [g * yd, g * xd])


def scale(x: Tensor, factor: float) -> Tensor:
    return _tape_of(x).record("scale", (x,), x.data * factor, lambda g: [g * factor])


def stack(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ContractError("stack: no tensors")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ContractError(f"stack: mixed shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors])
    return _tape_of(*tensors).record("stack", tuple(tensors), out, lambda g: [g[i] for i in range(len(tensors))])


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the first axis"""
    if not tensors:
        raise ContractError("concat: no tensors")
    out = np.concatenate([np.atleast_1d(t.data) for t in tensors])
    offsets = np.cumsum([0] + [np.atleast_1d(t.data).shape[0] for t in tensors])

    def backward(g):
        return [g[offsets[i]:offsets[i + 1]].reshape(t.shape) for i, t in enumerate(tensors)]

    return _tape_of(*tensors).record("concat", tuple(tensors), out, backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    if int(np.prod(shape)) != x.data.size:
        raise ContractError(f"reshape: cannot view {original} as {shape}")
    return _tape_of(x).record("reshape", (x,), x.data.reshape(shape), lambda g: [g.reshape(original)])


def pad2d(x: Tensor, shape: Tuple[int, int]) -> Tensor:
    """Place a 2-D tensor on a zero canvas of the given shape (cropping what overflows)"""
    if x.data.ndim != 2:
        raise ContractError(f"pad2d: expected a matrix, got {x.shape}")
    rows, cols = min(x.shape[0], shape[0]), min(x.shape[1], shape[1])
    out = np.zeros(shape)
    out[:rows, :cols] = x.data[:rows, :cols]

    def backward(g):
        gx = np.zeros(x.shape)
        gx[:rows, :cols] = g[:rows, :cols]
        return [gx]

    return _tape_of(x).record("pad2d", (x,), out, backward)


def _unit_rows(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-normalized copy and the inverse norms (0 for zero rows)"""
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    inverse = np.where(norms > 0.0, 1.0 / np.where(norms > 0.0, norms, 1.0), 0.0)
    return a * inverse, inverse


def cosine_matrix(q: Tensor, d: Tensor) -> Tensor:
    """M[i][j] = cosine(q_i, d_j); zero-norm rows give 0 similarities"""
    if q.data.ndim != 2 or d.data.ndim != 2 or q.shape[1] != d.shape[1]:
        raise ContractError(f"cosine_matrix: shapes {q.shape} and {d.shape} are incompatible")
    u, q_inverse = _unit_rows(q.data)
    v, d_inverse = _unit_rows(d.data)
    out = u @ v.T

    def backward(g):
        gu, gv = g @ v, g.T @ u
        gq = (gu - u * np.sum(gu * u, axis=1, keepdims=True)) * q_inverse
        gd = (gv - v * np.sum(gv * v, axis=1, keepdims=True)) * d_inverse
        return [gq, gd]

    return _tape_of(q, d).record("cosine_matrix", (q, d), out, backward)


def rbf_kernels(M: Tensor, mus: Sequence[float], sigmas: Sequence[float]) -> Tensor:
    """Gaussian kernel responses exp(-(M - mu_k)^2 / (2 sigma_k^2)), shape (K, n, m)"""
    if M.data.ndim != 2:
        raise ContractError(f"rbf_kernels: expected a matrix, got {M.shape}")
    mu = np.asarray(mus, dtype=np.float64)[:, None, None]
    sigma_sq = np.asarray(sigmas, dtype=np.float64)[:, None, None] ** 2
    diff = M.data[None] - mu
    out = np.exp(-(diff * diff) / (2.0 * sigma_sq))

    def backward(g):
        return [np.sum(g * out * (-diff / sigma_sq), axis=0)]

    return _tape_of(M).record("rbf_kernels", (M,), out, backward)


# Gradient checking

def evaluate(loss_fn: Callable[[Tape, Dict[str, Tensor]], Tensor], params: Dict[str, np.ndarray]) -> float:
    tape = Tape()
    tensors = {name: tape.parameter(name, value) for name, value in params.items()}
    return loss_fn(tape, tensors).item()


def value_and_grad(loss_fn: Callable[[Tape, Dict[str, Tensor]], Tensor],
                   params: Dict[str, np.ndarray]) -> Tuple[float, Dict[str, np.ndarray]]:
    tape = Tape()
    tensors = {name: tape.parameter(name, value) for name, value in params.items()}
    loss = loss_fn(tape, tensors)
    return loss.item(), tape.backward(loss)


def grad_check(loss_fn: Callable[[Tape, Dict[str, Tensor]], Tensor], params: Dict[str, np.ndarray],
               h: float = 1e-4, max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per coordinate is |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).
    With max_coords set, only a seeded random subset of coordinates is checked.
    """
    if not h > 0:
        raise ContractError(f"grad_check: step must be > 0, got {h}")
    params = {name: np.asarray(value, dtype=np.float64) for name, value in params.items()}
    _, analytic = value_and_grad(loss_fn, params)

    coords = [(name, idx) for name in sorted(params) for idx in np.ndindex(params[name].shape)]
    if max_coords is not None and len(coords) > max_coords:
        picked = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    worst = 0.0
    for name, idx in coords:
        perturbed = dict(params)
        shifted = params[name].copy()
        shifted[idx] += h
        perturbed[name] = shifted
        f_plus = evaluate(loss_fn, perturbed)
        shifted = params[name].copy()
        shifted[idx] -= h
        perturbed[name] = shifted
        f_minus = evaluate(loss_fn, perturbed)

        g_fd = (f_plus - f_minus) / (2.0 * h)
        g_an = float(analytic[name][idx])
        error = abs(g_an - g_fd) / max(1e-8, abs(g_an) + abs(g_fd))
        worst = max(worst, error)
    return worst


# Adam

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    eps: float = config.ADAM_EPS

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray], **hyperparameters) -> "AdamState":
        return cls(
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
            **hyperparameters,
        )


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameters and a new state"""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape or state.m[name].shape != theta.shape:
            raise ContractError(f"adam_step: {name} has shape {theta.shape}, gradient {g.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


# Parameter checkpoints

def save_parameters(path: str, params: Dict[str, np.ndarray], metadata: Optional[dict] = None):
    """JSON checkpoint; floats use the shortest round-trip repr so loading is bit-exact"""
    payload = dict(metadata or {})
    payload["format_version"] = CHECKPOINT_FORMAT_VERSION
    payload["params"] = {
        name: {"shape": list(value.shape), "values": np.asarray(value, dtype=np.float64).reshape(-1).tolist()}
        for name, value in params.items()
    }
    try:
        text = json.dumps(payload, sort_keys=True, allow_nan=False, indent=1)
    except ValueError:
        raise NumericError(f"save_parameters: non-finite values cannot be checkpointed to {path}")
    atomic_write_text(path, text + "\n")


def load_parameters(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid checkpoint JSON: {e.msg}", path, e.lineno)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint format {payload.get('format_version')!r}", path)
    params = {}
    for name, entry in payload.pop("params").items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ParseError(f"parameter {name!r}: {values.size} values for shape {shape}", path)
        params[name] = values.reshape(shape)
    return params, payload
