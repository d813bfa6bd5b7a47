# perspectiva/autograd.py
"""
Diferenciación automática en modo reverso sobre arreglos numpy, lo justo para la
red: convolución 2-D, capas densas, LSTM, cabezas duelo, entropía cruzada,
Adam, recorte de gradiente y checkpoints binarios.

Convención de datos: lotes NHWC para mapas, (N, D) para vectores.
"""

from __future__ import annotations

import json
import logging
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errores import CheckpointError, ShapeMismatchError

log = logging.getLogger(__name__)

# ============================================================================
# PRECISIÓN
# ============================================================================
_DTYPE: type = np.float32
_GRAD_ENABLED = True


def default_dtype() -> type:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Cambia la precisión global dentro del bloque (float64 para chequeos)."""
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


# ============================================================================
# TENSOR
# ============================================================================
def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), dtype=None):
        arr = np.asarray(data)
        target = np.dtype(dtype).type if dtype is not None else _DTYPE
        if arr.dtype != target:
            arr = arr.astype(target)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Optional[Callable[[], None]] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            return
        # orden topológico iterativo: los grafos BPTT superan el límite de recursión
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # ---------------------------------------------------------------- aritmética
    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = _result(self.data + other.data, (self, other))

        def _backward():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad, other.shape))

        return _attach(out, _backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = _result(self.data * other.data, (self, other))

        def _backward():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad * self.data, other.shape))

        return _attach(out, _backward)

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeMismatchError(f"matmul {self.shape} @ {other.shape}")
        out = _result(self.data @ other.data, (self, other))

        def _backward():
            if self.requires_grad:
                self._accum(out.grad @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ out.grad)

        return _attach(out, _backward)

    # ---------------------------------------------------------------- forma
    def reshape(self, *shape) -> "Tensor":
        original = self.shape
        out = _result(self.data.reshape(*shape), (self,))

        def _backward():
            self._accum(out.grad.reshape(original))

        return _attach(out, _backward)

    def __getitem__(self, index) -> "Tensor":
        out = _result(self.data[index], (self,))

        def _backward():
            full = np.zeros_like(self.data)
            full[index] = out.grad
            self._accum(full)

        return _attach(out, _backward)

    # ---------------------------------------------------------------- reducciones
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _result(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def _backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape))

        return _attach(out, _backward)

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.data.size)

    def max(self, axis: int = 1, keepdims: bool = True) -> "Tensor":
        """Máximo por eje; el gradiente va al primer índice máximo."""
        idx = np.argmax(self.data, axis=axis)
        values = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis)
        out = _result(values if keepdims else values.squeeze(axis), (self,))

        def _backward():
            g = out.grad if keepdims else np.expand_dims(out.grad, axis)
            full = np.zeros_like(self.data)
            np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
            self._accum(full)

        return _attach(out, _backward)

    def take_rows(self, indices: np.ndarray) -> "Tensor":
        """out[i] = self[i, indices[i]] para un tensor (N, K)."""
        indices = np.asarray(indices, dtype=np.int64)
        rows = np.arange(self.shape[0])
        out = _result(self.data[rows, indices], (self,))

        def _backward():
            full = np.zeros_like(self.data)
            full[rows, indices] = out.grad
            self._accum(full)

        return _attach(out, _backward)

    # ---------------------------------------------------------------- activaciones
    def relu(self) -> "Tensor":
        out = _result(np.maximum(self.data, 0), (self,))

        def _backward():
            self._accum(out.grad * (self.data > 0))

        return _attach(out, _backward)

    def sigmoid(self) -> "Tensor":
        s = expit(self.data).astype(self.data.dtype)
        out = _result(s, (self,))

        def _backward():
            self._accum(out.grad * s * (1 - s))

        return _attach(out, _backward)

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        out = _result(t, (self,))

        def _backward():
            self._accum(out.grad * (1 - t * t))

        return _attach(out, _backward)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents)
    return Tensor(data)


def _attach(out: Tensor, backward: Callable[[], None]) -> Tensor:
    if out.requires_grad:
        out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward():
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accum(np.take(out.grad, np.arange(lo, hi), axis=axis))

    return _attach(out, _backward)


# ============================================================================
# CAPAS
# ============================================================================
ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": Tensor.relu,
    "tanh": Tensor.tanh,
    "sigmoid": Tensor.sigmoid,
    "linear": lambda t: t,
}


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "valid") -> Tensor:
    """x (N,H,W,C), kernel (kh,kw,C,F), bias (F,), paso 1; im2col con ventanas deslizantes."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeMismatchError(f"conv2d espera NHWC y (kh,kw,C,F): {x.shape}, {kernel.shape}")
    n, h, w, c = x.shape
    kh, kw, kc, f = kernel.shape
    if kc != c or bias.shape != (f,):
        raise ShapeMismatchError(f"conv2d canales {c} vs kernel {kernel.shape}, bias {bias.shape}")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"Padding desconocido: {padding}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeMismatchError(f"conv2d: entrada {h}×{w} menor que el kernel {kh}×{kw}")

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x.data
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (N,Ho,Wo,C,kh,kw)
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    kmat = kernel.data.reshape(kh * kw * c, f)
    out = _result((cols @ kmat + bias.data).reshape(n, ho, wo, f), (x, kernel, bias))

    def _backward():
        g = out.grad.reshape(n * ho * wo, f)
        if kernel.requires_grad:
            kernel._accum((cols.T @ g).reshape(kernel.shape))
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))
        if x.requires_grad:
            dcols = (g @ kmat.T).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
            x._accum(dxp[:, ph:ph + h, pw:pw + w, :])

    return _attach(out, _backward)


def conv_output_shape(h: int, w: int, kernel: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return h, w
    return h - kernel + 1, w - kernel + 1


def dense(x: Tensor, weights: Tensor, bias: Tensor, activation: str = "linear") -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeMismatchError(f"dense: {x.shape} @ {weights.shape} + {bias.shape}")
    return ACTIVATIONS[activation](x @ weights + bias)


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, batch: int, units: int) -> "LstmState":
        return cls(Tensor(np.zeros((batch, units))), Tensor(np.zeros((batch, units))))


def lstm_step(x: Tensor, state: LstmState, w_x: Tensor, w_h: Tensor, b: Tensor) -> tuple[Tensor, LstmState]:
    """Compuertas en orden (entrada, olvido, candidata, salida)."""
    units = state.hidden.shape[1]
    if x.shape[1] != w_x.shape[0] or w_h.shape != (units, 4 * units) or w_x.shape[1] != 4 * units:
        raise ShapeMismatchError(f"lstm_step: x {x.shape}, w_x {w_x.shape}, w_h {w_h.shape}")
    z = x @ w_x + state.hidden @ w_h + b
    i = z[:, :units].sigmoid()
    f = z[:, units:2 * units].sigmoid()
    g = z[:, 2 * units:3 * units].tanh()
    o = z[:, 3 * units:].sigmoid()
    cell = f * state.cell + i * g
    hidden = o * cell.tanh()
    return hidden, LstmState(hidden, cell)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Media de −log softmax(logits)[label]; log-sum-exp estabilizado."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ShapeMismatchError(f"Se requieren >= 2 clases: {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    n = logits.shape[0]
    rows = np.arange(n)
    out = _result(np.asarray(-log_probs[rows, labels].mean()), (logits,))

    def _backward():
        g = np.exp(log_probs)
        g[rows, labels] -= 1.0
        logits._accum(g * (out.grad / n))

    return _attach(out, _backward)


# ============================================================================
# PARÁMETROS
# ============================================================================
class ParamSet:
    """Colección nombrada de tensores; el orden de inserción es el orden canónico."""

    def __init__(self, tensors: Optional[dict[str, Tensor]] = None):
        self._tensors: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t.data)

    def add(self, name: str, values: np.ndarray) -> Tensor:
        values = np.array(values, copy=True)
        dtype = values.dtype if np.issubdtype(values.dtype, np.floating) else None
        t = Tensor(values, requires_grad=True, dtype=dtype)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def shapes(self) -> dict[str, tuple]:
        return {k: t.shape for k, t in self._tensors.items()}

    def count(self) -> int:
        return int(sum(t.data.size for t in self._tensors.values()))

    def copy(self) -> "ParamSet":
        return ParamSet(self._tensors)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self._tensors.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}


def fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(_DTYPE)


# ============================================================================
# OPTIMIZACIÓN
# ============================================================================
class Adam:
    """Adam con corrección de sesgo; momentos indexados por nombre de parámetro."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: dict[str, np.ndarray]) -> ParamSet:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in params.names():
            p = params[name]
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatchError(f"Gradiente {name}: {g.shape} vs {p.shape}")
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m.astype(p.data.dtype), v.astype(p.data.dtype)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)
        return params


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], optimizer: Adam) -> ParamSet:
    return optimizer.step(params, grads)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], threshold: float = 2.0, mode: str = "norm") -> dict[str, np.ndarray]:
    """mode="norm": escala global si ‖g‖₂ > umbral; mode="value": recorta elemento a elemento."""
    if mode == "value":
        return {k: np.clip(g, -threshold, threshold) for k, g in grads.items()}
    if mode != "norm":
        raise ValueError(f"Modo de recorte desconocido: {mode}")
    norm = global_norm(grads)
    if norm <= threshold or norm == 0.0:
        return dict(grads)
    scale = threshold / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


# ============================================================================
# CHECKPOINTS
# ============================================================================
MAGIC = b"PTCK"
CHECKPOINT_VERSION = 1
_GROUPS = ("params", "target", "adam_m", "adam_v")


def rng_state(gen: np.random.Generator) -> dict:
    return _jsonable(gen.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    state = _from_jsonable(state)
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": [int(v) for v in obj.ravel()], "dtype": str(obj.dtype), "shape": list(obj.shape)}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"]).reshape(obj["shape"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


@dataclass
class Checkpoint:
    params: ParamSet
    target: Optional[ParamSet] = None
    optimizer: Optional[Adam] = None
    arch: Optional[dict] = None
    rng_states: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    params: ParamSet,
    *,
    arch: Optional[dict] = None,
    target: Optional[ParamSet] = None,
    optimizer: Optional[Adam] = None,
    rng_states: Optional[dict] = None,
    counters: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> bytes:
    groups: dict[str, dict[str, np.ndarray]] = {"params": params.arrays()}
    if target is not None:
        groups["target"] = target.arrays()
    if optimizer is not None:
        groups["adam_m"] = {k: optimizer.m[k] for k in params.names() if k in optimizer.m}
        groups["adam_v"] = {k: optimizer.v[k] for k in params.names() if k in optimizer.v}

    entries, payload, offset = {}, [], 0
    for group, arrays in groups.items():
        entries[group] = []
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
            entries[group].append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>=|"),
                                   "offset": offset, "nbytes": len(raw)})
            payload.append(raw)
            offset += len(raw)

    header = {
        "version": CHECKPOINT_VERSION,
        "arch": arch,
        "groups": entries,
        "adam": None if optimizer is None else {
            "t": optimizer.t, "lr": optimizer.lr, "beta1": optimizer.beta1,
            "beta2": optimizer.beta2, "eps": optimizer.eps},
        "rng_states": rng_states or {},
        "counters": counters or {},
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)) + head + b"".join(payload)


def load_checkpoint(data: bytes, expected_shapes: Optional[dict[str, tuple]] = None) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError("Archivo de checkpoint inválido (magic)")
    version, head_len = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Versión de checkpoint {version} no soportada (se espera {CHECKPOINT_VERSION})")
    header = json.loads(data[16:16 + head_len].decode("utf-8"))
    body = memoryview(data)[16 + head_len:]

    groups: dict[str, dict[str, np.ndarray]] = {}
    for group, entries in header["groups"].items():
        if group not in _GROUPS:
            raise CheckpointError(f"Grupo de checkpoint desconocido: {group}")
        groups[group] = {}
        for e in entries:
            raw = body[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
            groups[group][e["name"]] = arr.astype(np.dtype(e["dtype"])).copy()

    if expected_shapes is not None:
        got = {k: tuple(v.shape) for k, v in groups["params"].items()}
        want = {k: tuple(v) for k, v in expected_shapes.items()}
        if got != want:
            diff = sorted(set(got.items()) ^ set(want.items()))
            raise ShapeMismatchError(f"Checkpoint incompatible con la arquitectura: {diff[:6]}")

    def _paramset(arrays: dict[str, np.ndarray]) -> ParamSet:
        ps = ParamSet()
        for name, arr in arrays.items():
            ps.add(name, arr)
        return ps

    optimizer = None
    if header.get("adam"):
        a = header["adam"]
        optimizer = Adam(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
        optimizer.t = a["t"]
        optimizer.m = dict(groups.get("adam_m", {}))
        optimizer.v = dict(groups.get("adam_v", {}))

    return Checkpoint(
        params=_paramset(groups["params"]),
        target=_paramset(groups["target"]) if "target" in groups else None,
        optimizer=optimizer,
        arch=header.get("arch"),
        rng_states=header.get("rng_states", {}),
        counters=header.get("counters", {}),
        extra=header.get("extra", {}),
    )
