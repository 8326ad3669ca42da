"""Minimal tensor algebra with reverse-mode differentiation.

Tensors wrap float32 numpy arrays. Ops record themselves on the active
:class:`Tape` (entered with ``with tape:``) when at least one input depends on
a watched parameter; outside a tape every op is a plain array computation.
Reductions (matmul, convolution, normalization statistics) accumulate in
float64 and cast the result back to the compute dtype.
"""

from __future__ import annotations

import contextlib
import contextvars
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft

GROUP_NORM_EPS = 1e-5
CHECKPOINT_VERSION = 1


class NumericsError(ArithmeticError):
    """Raised on non-finite values or misuse of the tape."""


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be read or does not match the model."""


_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar("stage_world_dtype", default=np.float32)
_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("stage_world_tape", default=None)


def compute_dtype() -> type:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype: type) -> Iterator[None]:
    """Switch the compute dtype, e.g. to float64 for finite-difference checks."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


def make_rng(seed: int, *names: object) -> np.random.Generator:
    """Named, seedable generator: the same (seed, names) always yields the same stream."""
    entropy = [int(seed) & 0xFFFFFFFF]
    entropy.extend(zlib.crc32(str(name).encode("utf-8")) for name in names)
    return np.random.default_rng(entropy)


class Tensor:
    __slots__ = ("data", "name")

    def __init__(self, data: object, name: Optional[str] = None) -> None:
        array = np.asarray(data, dtype=compute_dtype())
        if not np.all(np.isfinite(array)):
            label = name or "tensor"
            raise NumericsError(f"{label} contains non-finite values")
        self.data = array
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


class ParamStore:
    """Ordered registry of named parameters."""

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"Duplicate parameter name: {name}")
        tensor = Tensor(value, name=name)
        self._params[name] = tensor
        return tensor

    def assign(self, name: str, value: np.ndarray) -> None:
        current = self._params[name]
        if tuple(np.shape(value)) != current.shape:
            raise ShapeError(f"{name}: expected shape {current.shape}, got {np.shape(value)}")
        current.data = np.asarray(value, dtype=current.data.dtype)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._params.items()

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self._params.items()}

    def count(self) -> int:
        return sum(tensor.size for tensor in self._params.values())


@dataclass
class TapeEntry:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records ops in execution order; single writer per training step."""

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []
        self.parameters: Dict[str, Tensor] = {}
        self._live: set[int] = set()
        self._outputs: set[int] = set()
        self._token: Optional[contextvars.Token] = None

    def watch(self, store: ParamStore, names: Optional[Iterable[str]] = None) -> None:
        selected = store.names() if names is None else list(names)
        for name in selected:
            tensor = store[name]
            if id(tensor) in self._live:
                raise NumericsError(f"Parameter registered twice: {name}")
            self.parameters[name] = tensor
            self._live.add(id(tensor))

    def is_live(self, tensor: Tensor) -> bool:
        return id(tensor) in self._live

    def record(
        self,
        op: str,
        output: Tensor,
        inputs: Tuple[Tensor, ...],
        backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ) -> None:
        if not any(id(tensor) in self._live for tensor in inputs):
            return
        self.entries.append(TapeEntry(op=op, output=output, inputs=inputs, backward=backward))
        self._live.add(id(output))
        self._outputs.add(id(output))

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise NumericsError("Tape is already active")
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._token is not None:
            _TAPE.reset(self._token)
            self._token = None

    def recorded(self, tensor: Tensor) -> bool:
        return id(tensor) in self._outputs

    def op_names(self) -> List[str]:
        return [entry.op for entry in self.entries]


def backward(tape: Tape, loss: Tensor) -> Dict[str, np.ndarray]:
    """Reverse-mode pass; returns a gradient for every watched parameter."""
    if loss.size != 1:
        raise NumericsError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.recorded(loss):
        raise NumericsError("loss is not recorded on this tape")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data, dtype=np.float64)}
    for entry in reversed(tape.entries):
        upstream = grads.pop(id(entry.output), None)
        if upstream is None:
            continue
        input_grads = entry.backward(upstream)
        for tensor, grad in zip(entry.inputs, input_grads):
            if grad is None or not tape.is_live(tensor):
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = np.asarray(grad, dtype=np.float64)
    result: Dict[str, np.ndarray] = {}
    for name, tensor in tape.parameters.items():
        grad = grads.get(id(tensor))
        if grad is None:
            result[name] = np.zeros_like(tensor.data)
            continue
        if not np.all(np.isfinite(grad)):
            raise NumericsError(f"non-finite gradient for {name}")
        result[name] = grad.astype(tensor.data.dtype)
    return result


def _emit(
    op: str,
    value: np.ndarray,
    inputs: Tuple[Tensor, ...],
    grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    try:
        out = Tensor(value)
    except NumericsError as exc:
        raise NumericsError(f"{op} produced non-finite values") from exc
    tape = _TAPE.get()
    if tape is not None:
        tape.record(op, out, inputs, grad_fn)
    return out


def _f64(array: np.ndarray) -> np.ndarray:
    return array.astype(np.float64, copy=False)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit("scale", a.data * factor, (a,), lambda g: (g * factor,))


def sum_all(a: Tensor) -> Tensor:
    total = np.sum(_f64(a.data))
    return _emit("sum_all", np.asarray(total), (a,), lambda g: (np.full(a.shape, float(g), dtype=np.float64),))


def mean_all(a: Tensor) -> Tensor:
    count = a.size
    total = np.sum(_f64(a.data)) / count
    return _emit(
        "mean_all",
        np.asarray(total),
        (a,),
        lambda g: (np.full(a.shape, float(g) / count, dtype=np.float64),),
    )


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (np.reshape(g, original),))


def transpose(a: Tensor) -> Tensor:
    if len(a.shape) != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _emit("transpose", a.data.T, (a,), lambda g: (np.transpose(g),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    sizes = [tensor.shape[axis] for tensor in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g: np.ndarray) -> Sequence[np.ndarray]:
        return np.split(g, splits, axis=axis)

    return _emit("concat", np.concatenate([tensor.data for tensor in tensors], axis=axis), tuple(tensors), grad_fn)


def silu(a: Tensor) -> Tensor:
    x = _f64(a.data)
    sig = 1.0 / (1.0 + np.exp(-x))
    return _emit("silu", x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator], train_mode: bool) -> Tensor:
    if not train_mode or p <= 0.0:
        return a
    if rng is None:
        raise NumericsError("dropout in train mode needs an explicit rng")
    keep = (rng.random(a.shape) >= p).astype(np.float64) / (1.0 - p)
    return _emit("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    a64, b64 = _f64(a.data), _f64(b.data)
    return _emit("matmul", a64 @ b64, (a, b), lambda g: (g @ b64.T, a64.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[n,k] @ weight[k,m] + bias[m]."""
    if len(x.shape) != 2 or len(weight.shape) != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    x64, w64 = _f64(x.data), _f64(weight.data)
    value = x64 @ w64
    if bias is None:
        return _emit("linear", value, (x, weight), lambda g: (g @ w64.T, x64.T @ g))
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape}")
    value = value + _f64(bias.data)
    return _emit("linear", value, (x, weight, bias), lambda g: (g @ w64.T, x64.T @ g, g.sum(axis=0)))


def add_channel(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel vector to x[c, ...]."""
    if bias.shape != (x.shape[0],):
        raise ShapeError(f"add_channel: bias {bias.shape} vs channels {x.shape[0]}")
    expand = (slice(None),) + (None,) * (len(x.shape) - 1)
    axes = tuple(range(1, len(x.shape)))
    return _emit("add_channel", x.data + bias.data[expand], (x, bias), lambda g: (g, g.sum(axis=axes)))


def channel_affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[c, ...] * weight[c] + bias[c]."""
    channels = x.shape[0]
    if weight.shape != (channels,) or bias.shape != (channels,):
        raise ShapeError(f"channel_affine: expected ({channels},) affine, got {weight.shape}, {bias.shape}")
    expand = (slice(None),) + (None,) * (len(x.shape) - 1)
    axes = tuple(range(1, len(x.shape)))
    x64, w64 = _f64(x.data), _f64(weight.data)
    value = x64 * w64[expand] + _f64(bias.data)[expand]
    return _emit(
        "channel_affine",
        value,
        (x, weight, bias),
        lambda g: (g * w64[expand], (g * x64).sum(axis=axes), g.sum(axis=axes)),
    )


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """3x3 convolution (cross-correlation), stride 1, zero padding 1."""
    if len(x.shape) != 3 or len(kernel.shape) != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: expected x[c,h,w] and k[o,c,3,3], got {x.shape} and {kernel.shape}")
    c_in, height, width = x.shape
    c_out = kernel.shape[0]
    if kernel.shape[1] != c_in:
        raise ShapeError(f"conv2d: kernel expects {kernel.shape[1]} channels, input has {c_in}")
    padded = np.pad(_f64(x.data), ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * 9, height * width)
    kmat = _f64(kernel.data).reshape(c_out, c_in * 9)
    value = (kmat @ cols).reshape(c_out, height, width)

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        g2d = g.reshape(c_out, height * width)
        grad_kernel = (g2d @ cols.T).reshape(kernel.shape)
        grad_cols = (kmat.T @ g2d).reshape(c_in, 3, 3, height, width)
        grad_padded = np.zeros((c_in, height + 2, width + 2), dtype=np.float64)
        for ki in range(3):
            for kj in range(3):
                grad_padded[:, ki : ki + height, kj : kj + width] += grad_cols[:, ki, kj]
        return grad_padded[:, 1:-1, 1:-1], grad_kernel

    return _emit("conv2d", value, (x, kernel), grad_fn)


def group_norm(
    x: Tensor,
    groups: int,
    eps: float = GROUP_NORM_EPS,
    weight: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Standardize each channel group of x[c, ...]; apply the affine when given."""
    channels = x.shape[0]
    if groups <= 0 or channels % groups != 0:
        raise ShapeError(f"group_norm: {channels} channels not divisible into {groups} groups")
    grouped = _f64(x.data).reshape(groups, -1)
    mean = grouped.mean(axis=1, keepdims=True)
    var = grouped.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = (grouped - mean) * inv

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        gy = g.reshape(groups, -1)
        gx = inv * (gy - gy.mean(axis=1, keepdims=True) - normed * (gy * normed).mean(axis=1, keepdims=True))
        return (gx.reshape(x.shape),)

    out = _emit("group_norm", normed.reshape(x.shape), (x,), grad_fn)
    if weight is None and bias is None:
        return out
    if weight is None or bias is None:
        raise ShapeError("group_norm: affine needs both weight and bias")
    return channel_affine(out, weight, bias)


def softmax_rows(x: Tensor) -> Tensor:
    if len(x.shape) != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {x.shape}")
    shifted = _f64(x.data) - _f64(x.data).max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    return _emit("softmax_rows", probs, (x,), lambda g: (probs * (g - (g * probs).sum(axis=1, keepdims=True)),))


def cross_attention(
    q: Tensor,
    kv: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    return_weights: bool = False,
) -> Tensor | Tuple[Tensor, Tensor]:
    """Single-head attention: softmax(q Wq (kv Wk)^T / sqrt(d)) (kv Wv)."""
    if len(q.shape) != 2 or len(kv.shape) != 2 or q.shape[1] != kv.shape[1]:
        raise ShapeError(f"cross_attention: feature dims differ, {q.shape} vs {kv.shape}")
    dim = q.shape[1]
    for weight in (wq, wk, wv):
        if weight.shape != (dim, dim):
            raise ShapeError(f"cross_attention: projection must be ({dim}, {dim}), got {weight.shape}")
    queries = matmul(q, wq)
    keys = matmul(kv, wk)
    values = matmul(kv, wv)
    scores = scale(matmul(queries, transpose(keys)), 1.0 / float(np.sqrt(dim)))
    weights = softmax_rows(scores)
    out = matmul(weights, values)
    if return_weights:
        return out, weights
    return out


# resampling


def avg_pool(x: Tensor, factor: int = 2) -> Tensor:
    channels, height, width = x.shape
    if height % factor or width % factor:
        raise ShapeError(f"avg_pool: {height}x{width} not divisible by {factor}")
    blocks = _f64(x.data).reshape(channels, height // factor, factor, width // factor, factor)
    value = blocks.mean(axis=(2, 4))
    area = float(factor * factor)

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.repeat(np.repeat(g, factor, axis=1), factor, axis=2) / area,)

    return _emit("avg_pool", value, (x,), grad_fn)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    channels, height, width = x.shape
    value = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape(channels, height, factor, width, factor).sum(axis=(2, 4)),)

    return _emit("upsample_nearest", value, (x,), grad_fn)


# frequency domain


def dct2(x: Tensor) -> Tensor:
    """Orthonormal type-II 2-D DCT of x[h, w]."""
    if len(x.shape) != 2:
        raise ShapeError(f"dct2 expects a 2-D tensor, got {x.shape}")
    value = sp_fft.dctn(_f64(x.data), type=2, norm="ortho")
    return _emit("dct2", value, (x,), lambda g: (sp_fft.idctn(g, type=2, norm="ortho"),))


def idct2(x: Tensor) -> Tensor:
    if len(x.shape) != 2:
        raise ShapeError(f"idct2 expects a 2-D tensor, got {x.shape}")
    value = sp_fft.idctn(_f64(x.data), type=2, norm="ortho")
    return _emit("idct2", value, (x,), lambda g: (sp_fft.dctn(g, type=2, norm="ortho"),))


# losses


def weighted_mse(prediction: Tensor, target: np.ndarray, weight: np.ndarray) -> Tensor:
    """mean(weight * (target - prediction)^2); weight[h, w] broadcast over channels."""
    if prediction.shape != tuple(np.shape(target)):
        raise ShapeError(f"weighted_mse: prediction {prediction.shape} vs target {np.shape(target)}")
    if tuple(np.shape(weight)) != prediction.shape[-2:]:
        raise ShapeError(f"weighted_mse: weight {np.shape(weight)} vs spatial {prediction.shape[-2:]}")
    residual = _f64(np.asarray(target)) - _f64(prediction.data)
    w64 = _f64(np.asarray(weight))
    count = residual.size
    value = np.sum(w64 * residual * residual) / count
    return _emit(
        "weighted_mse",
        np.asarray(value),
        (prediction,),
        lambda g: (-2.0 * float(g) * w64 * residual / count,),
    )


# optimizer


@dataclass
class AdamState:
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update of every parameter named in ``grads``."""
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, grad in grads.items():
        tensor = params[name]
        if tuple(np.shape(grad)) != tensor.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {np.shape(grad)}, expected {tensor.shape}")
        g = _f64(np.asarray(grad))
        m = state.m.get(name, np.zeros(tensor.shape, dtype=np.float64))
        v = state.v.get(name, np.zeros(tensor.shape, dtype=np.float64))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        params.assign(name, _f64(tensor.data) - update)
    return state


# checkpoints


def save_checkpoint(path: Path | str, params: ParamStore, meta: Optional[Mapping[str, object]] = None) -> Tuple[Path, Path]:
    """Write ``<path>.bin`` (flat little-endian float32) and ``<path>.json`` manifest."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    bin_path = base.with_suffix(".bin")
    manifest_path = base.with_suffix(".json")
    entries = []
    offset = 0
    chunks = []
    for name, tensor in params.items():
        flat = np.ascontiguousarray(tensor.data, dtype="<f4").reshape(-1)
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        offset += flat.size
        chunks.append(flat)
    payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    bin_path.write_bytes(payload.tobytes())
    manifest = {
        "version": CHECKPOINT_VERSION,
        "total": offset,
        "params": entries,
        "meta": dict(meta or {}),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return bin_path, manifest_path


def load_checkpoint(path: Path | str) -> Tuple[ParamStore, Dict[str, object]]:
    base = Path(path)
    bin_path = base.with_suffix(".bin")
    manifest_path = base.with_suffix(".json")
    for required in (bin_path, manifest_path):
        if not required.exists():
            raise CheckpointError(f"Checkpoint file not found: {required}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"Corrupt checkpoint manifest {manifest_path}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version in {manifest_path}: {manifest.get('version')}")
    flat = np.fromfile(bin_path, dtype="<f4")
    if flat.size != manifest.get("total"):
        raise CheckpointError(f"Corrupt checkpoint {bin_path}: {flat.size} values, manifest says {manifest.get('total')}")
    store = ParamStore()
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        store.add(entry["name"], flat[start : start + count].reshape(shape).astype(np.float32))
    return store, dict(manifest.get("meta", {}))


# finite differences


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: ParamStore,
    names: Optional[Sequence[str]] = None,
    h: float = 1e-3,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, float]:
    """Relative error between tape gradients and central differences, per parameter.

    The error is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` measured
    in the 2-norm over the probed elements. ``max_elements`` probes a random
    subset of each parameter's entries.
    """
    selected = params.names() if names is None else list(names)
    tape = Tape()
    tape.watch(params, selected)
    with tape:
        loss = loss_fn()
    analytic = backward(tape, loss)
    errors: Dict[str, float] = {}
    for name in selected:
        tensor = params[name]
        flat = tensor.data.reshape(-1)
        if not np.shares_memory(flat, tensor.data):
            raise NumericsError(f"{name} is not contiguous; cannot perturb in place")
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            picker = rng if rng is not None else make_rng(0, "gradcheck", name)
            indices = np.sort(picker.choice(flat.size, size=max_elements, replace=False))
        numeric = np.zeros(indices.size, dtype=np.float64)
        for slot, index in enumerate(indices):
            original = float(flat[index])
            flat[index] = original + h
            upper = loss_fn().item()
            flat[index] = original - h
            lower = loss_fn().item()
            flat[index] = original
            numeric[slot] = (upper - lower) / (2.0 * h)
        exact = analytic[name].reshape(-1)[indices].astype(np.float64)
        denom = max(float(np.linalg.norm(exact)), float(np.linalg.norm(numeric)), 1e-8)
        errors[name] = float(np.linalg.norm(exact - numeric)) / denom
    return errors
