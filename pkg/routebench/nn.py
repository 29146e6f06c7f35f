"""
Minimal differentiable-computation core on numpy: a Tensor recording the operations that produced it,
reverse-mode gradients by topological sort, dense and 2-D convolution layers described by a NetworkSpec,
an Adam optimizer over a named ParameterSet, and JSON checkpoints.

Every Tensor keeps a `_backward` closure which pushes its gradient into its parents; calling
`backward()` on a scalar result walks the recorded graph in reverse topological order.
"""

import hashlib
import json
import math
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from logger.logger import logger

CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.2

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """
    Inside this block no graph is recorded (inference with frozen parameters). Thread-local.
    """
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # Sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Tensor:
    """
    An n-dimensional float64 array plus the bookkeeping needed for reverse-mode differentiation
    """
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=float)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = ""

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op='{self._op}', requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=float), self.shape)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    @staticmethod
    def _result(data, parents: Sequence["Tensor"], backward: Callable[[np.ndarray], None], op: str) -> "Tensor":
        out = Tensor(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    def backward(self, grad=None) -> None:
        """
        Reverse-mode sweep from this tensor. `grad` defaults to ones (scalar losses).
        """
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require gradients")
        topo: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
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
                if id(parent) not in visited:
                    stack.append((parent, False))
        seed = np.ones_like(self.data) if grad is None else np.broadcast_to(np.asarray(grad, float), self.shape)
        self.grad = np.array(seed, dtype=float)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    ############################################################################################
    #                                                                                          #
    #                                   ELEMENTWISE OPERATIONS                                 #
    #                                                                                          #
    ############################################################################################

    def __add__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g)
            other._accumulate(g)
        return Tensor._result(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accumulate(-g)
        return Tensor._result(-self.data, (self,), backward, "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)
        return Tensor._result(self.data * other.data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g / other.data)
            other._accumulate(-g * self.data / other.data ** 2)
        return Tensor._result(self.data / other.data, (self, other), backward, "div")

    def __pow__(self, exponent: float):
        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))
        return Tensor._result(self.data ** exponent, (self,), backward, "pow")

    def square(self):
        def backward(g):
            self._accumulate(2.0 * g * self.data)
        return Tensor._result(self.data ** 2, (self,), backward, "square")

    def exp(self):
        value = np.exp(self.data)

        def backward(g):
            self._accumulate(g * value)
        return Tensor._result(value, (self,), backward, "exp")

    def tanh(self):
        value = np.tanh(self.data)

        def backward(g):
            self._accumulate(g * (1.0 - value ** 2))
        return Tensor._result(value, (self,), backward, "tanh")

    def sigmoid(self):
        value = _sigmoid(self.data)

        def backward(g):
            self._accumulate(g * value * (1.0 - value))
        return Tensor._result(value, (self,), backward, "sigmoid")

    def leaky_relu(self, slope: float = LEAKY_SLOPE):
        positive = self.data > 0

        def backward(g):
            self._accumulate(np.where(positive, g, slope * g))
        return Tensor._result(np.where(positive, self.data, slope * self.data), (self,), backward, "leaky_relu")

    def log_sigmoid(self):
        """
        log(sigmoid(x)) computed directly: -(max(-x, 0) + log1p(exp(-|x|)))
        """
        x = self.data
        value = -(np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x))))

        def backward(g):
            self._accumulate(g * _sigmoid(-x))
        return Tensor._result(value, (self,), backward, "log_sigmoid")

    ############################################################################################
    #                                                                                          #
    #                                 SHAPE AND REDUCTION OPERATIONS                           #
    #                                                                                          #
    ############################################################################################

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            self._accumulate(np.matmul(g, np.swapaxes(b, -1, -2)))
            other._accumulate(np.matmul(np.swapaxes(a, -1, -2), g))
        return Tensor._result(np.matmul(a, b), (self, other), backward, "matmul")

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape))
        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        original = self.shape

        def backward(g):
            self._accumulate(g.reshape(original))
        return Tensor._result(self.data.reshape(*shape), (self,), backward, "reshape")

    def swapaxes(self, a: int, b: int):
        def backward(g):
            self._accumulate(np.swapaxes(g, a, b))
        return Tensor._result(np.swapaxes(self.data, a, b), (self,), backward, "swapaxes")

    def __getitem__(self, index):
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            self._accumulate(full)
        return Tensor._result(self.data[index], (self,), backward, "getitem")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)
    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if axis < 0:
        axis += tensors[0].ndim + 1
    expanded = [t.reshape(*(t.shape[:axis] + (1,) + t.shape[axis:])) for t in tensors]
    return concat(expanded, axis=axis)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation through im2col.

    :param x:       (B, C, H, W)
    :param weight:  (O, C, k, k)
    :param bias:    (O,)
    :return:        (B, O, Ho, Wo) with Ho = (H + 2*padding - k) // stride + 1
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    B, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if Cw != C or k != k2:
        raise ValueError(f"conv2d weight {weight.shape} does not match input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows[:, :, :Ho, :Wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = weight.data.reshape(O, C * k * k)
    out = (cols @ wmat.T + bias.data).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        gt = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        weight._accumulate((gt.T @ cols).reshape(weight.shape))
        bias._accumulate(gt.sum(axis=0))
        if x.requires_grad:
            dcols = (gt @ wmat).reshape(B, Ho, Wo, C, k, k)
            dxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    dxp[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride] += \
                        dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, padding:padding + H, padding:padding + W])
    return Tensor._result(out, (x, weight, bias), backward, "conv2d")


############################################################################################
#                                                                                          #
#                                        PARAMETERS                                        #
#                                                                                          #
############################################################################################

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class ParameterSet:
    """
    Named parameter tensors with persistent identity across steps, plus per-parameter Adam state.
    `version` increases with every optimizer step; tapes recorded at an older version are stale.
    """

    def __init__(self):
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self.state: Dict[str, AdamState] = {}
        self.version = 0

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"Parameter `{name}` already exists")
        tensor = Tensor(np.array(value, dtype=float), requires_grad=True, name=name)
        self.tensors[name] = tensor
        return tensor

    def names(self, prefixes: Optional[Iterable[str]] = None) -> List[str]:
        if prefixes is None:
            return list(self.tensors)
        prefixes = tuple(p + "." for p in prefixes)
        return [n for n in self.tensors if n.startswith(prefixes)]

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.grad = None

    def gradients(self, names: Iterable[str]) -> Dict[str, np.ndarray]:
        """
        Current gradients of the given parameters (zeros for parameters the last sweep did not reach)
        """
        out = {}
        for name in names:
            tensor = self.tensors[name]
            out[name] = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad.copy()
        return out

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def optimizer_snapshot(self) -> Dict[str, AdamState]:
        return {name: AdamState(s.m.copy(), s.v.copy(), s.t) for name, s in self.state.items()}

    def restore(self, values: Dict[str, np.ndarray], state: Optional[Dict[str, AdamState]] = None) -> None:
        """
        Put back parameter values (and optionally Adam state) taken with snapshot() / optimizer_snapshot()
        """
        for name, value in values.items():
            if name not in self.tensors:
                raise ValueError(f"Unknown parameter `{name}`")
            self.tensors[name].data = np.array(value, dtype=float)
        if state is not None:
            self.state = {name: AdamState(s.m.copy(), s.v.copy(), s.t) for name, s in state.items()}
        self.version += 1

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))


def adam_step(params: ParameterSet, gradients: Dict[str, np.ndarray], lr: float = 2e-4,
              beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> ParameterSet:
    """
    One Adam update (first/second moments with bias correction) of the parameters named in `gradients`.
    Parameters not named are left untouched.

    :return:    The same ParameterSet, updated in place
    """
    checked = {}
    for name, grad in gradients.items():
        if name not in params:
            raise ValueError(f"Unknown parameter `{name}`")
        grad = np.asarray(grad, dtype=float)
        if grad.shape != params[name].shape:
            raise ValueError(f"Gradient of `{name}` has shape {grad.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"Non-finite gradient for parameter `{name}`")
        checked[name] = grad
    # all gradients validated before any parameter moves
    for name, grad in checked.items():
        tensor = params[name]
        state = params.state.get(name)
        if state is None:
            state = params.state[name] = AdamState(np.zeros_like(tensor.data), np.zeros_like(tensor.data))
        state.t += 1
        state.m = beta1 * state.m + (1.0 - beta1) * grad
        state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
        m_hat = state.m / (1.0 - beta1 ** state.t)
        v_hat = state.v / (1.0 - beta2 ** state.t)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    params.version += 1
    return params


############################################################################################
#                                                                                          #
#                                   NETWORK SPECIFICATIONS                                 #
#                                                                                          #
############################################################################################

@dataclass(frozen=True)
class Dense:
    width: int
    activation: str = "linear"


@dataclass(frozen=True)
class Conv:
    channels: int
    kernel: int = 3
    stride: int = 2
    activation: str = "leaky_relu"

    @property
    def padding(self) -> int:
        return self.kernel // 2


@dataclass(frozen=True)
class NetworkSpec:
    """
    input_shape: (features,) for MLPs or (channels, H, W) for convolutional stacks.
    Dense layers after Conv layers see the flattened feature map.
    """
    input_shape: Tuple[int, ...]
    layers: Tuple[Union[Dense, Conv], ...]

    def __post_init__(self):
        shape = tuple(self.input_shape)
        for layer in self.layers:
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ValueError(f"Conv layer needs a (C, H, W) input, got {shape}")
                shape = (layer.channels,
                         (shape[1] + 2 * layer.padding - layer.kernel) // layer.stride + 1,
                         (shape[2] + 2 * layer.padding - layer.kernel) // layer.stride + 1)
                if min(shape[1:]) < 1:
                    raise ValueError(f"Conv stack shrinks the input {self.input_shape} below one pixel")
            elif isinstance(layer, Dense):
                shape = (layer.width,)
            else:
                raise ValueError(f"Unknown layer {layer}")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"Unknown activation `{layer.activation}`")

    @property
    def output_shape(self) -> Tuple[int, ...]:
        shape = tuple(self.input_shape)
        for layer in self.layers:
            if isinstance(layer, Conv):
                shape = (layer.channels,
                         (shape[1] + 2 * layer.padding - layer.kernel) // layer.stride + 1,
                         (shape[2] + 2 * layer.padding - layer.kernel) // layer.stride + 1)
            else:
                shape = (layer.width,)
        return shape


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "linear": lambda t: t,
    "tanh": Tensor.tanh,
    "sigmoid": Tensor.sigmoid,
    "leaky_relu": Tensor.leaky_relu,
}


def mlp_spec(input_dim: int, output_dim: int, hidden: Sequence[int] = (64, 64),
             activation: str = "leaky_relu", output_activation: str = "linear") -> NetworkSpec:
    layers = [Dense(w, activation) for w in hidden] + [Dense(output_dim, output_activation)]
    return NetworkSpec((input_dim,), tuple(layers))


def init_network(spec: NetworkSpec, params: ParameterSet, prefix: str, rng: np.random.Generator) -> None:
    """
    Add the weights of every layer of `spec` to `params` as `prefix.<i>.weight` / `prefix.<i>.bias`.
    Glorot-uniform weights, zero biases.
    """
    shape = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            fan_in = shape[0] * layer.kernel ** 2
            fan_out = layer.channels * layer.kernel ** 2
            w_shape = (layer.channels, shape[0], layer.kernel, layer.kernel)
            shape = (layer.channels,
                     (shape[1] + 2 * layer.padding - layer.kernel) // layer.stride + 1,
                     (shape[2] + 2 * layer.padding - layer.kernel) // layer.stride + 1)
            out_dim = layer.channels
        else:
            fan_in = int(np.prod(shape))
            fan_out = layer.width
            w_shape = (fan_in, layer.width)
            shape = (layer.width,)
            out_dim = layer.width
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params.add(f"{prefix}.{i}.weight", rng.uniform(-limit, limit, size=w_shape))
        params.add(f"{prefix}.{i}.bias", np.zeros(out_dim))


def apply_network(spec: NetworkSpec, params: ParameterSet, prefix: str, x) -> Tensor:
    """
    Run a batch through the network. x has shape (B, *spec.input_shape).
    """
    x = as_tensor(x)
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ValueError(f"Network `{prefix}` expects inputs of shape (B, {spec.input_shape}), got {x.shape}")
    for i, layer in enumerate(spec.layers):
        weight, bias = params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"]
        if isinstance(layer, Conv):
            x = conv2d(x, weight, bias, stride=layer.stride, padding=layer.padding)
        else:
            if x.ndim > 2:
                x = x.reshape(x.shape[0], -1)
            x = x @ weight + bias
        x = ACTIVATIONS[layer.activation](x)
    return x


############################################################################################
#                                                                                          #
#                                  FORWARD / BACKWARD API                                  #
#                                                                                          #
############################################################################################

@dataclass
class Tape:
    output: Tensor
    inputs: List[Tensor]
    params: ParameterSet
    prefix: str
    version: int
    used: bool = False


def forward(spec: NetworkSpec, params: ParameterSet, inputs, prefix: str = "net") -> Tuple[Tensor, Tape]:
    """
    Run the network and keep what backward() needs.

    :return:    (output tensor, tape)
    """
    x = Tensor(np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs, dtype=float), requires_grad=True)
    out = apply_network(spec, params, prefix, x)
    return out, Tape(out, [x], params, prefix, params.version)


def backward(tape: Tape, output_grad) -> Dict[str, np.ndarray]:
    """
    Exact reverse-mode gradients of <output, output_grad> for every parameter of the taped network
    (keys are parameter names) and for the input (key `input`).
    """
    if tape.version != tape.params.version:
        raise RuntimeError(f"Stale tape: recorded at parameter version {tape.version}, "
                           f"parameters are now at version {tape.params.version}")
    tape.params.zero_grad()
    for t in tape.inputs:
        t.grad = None
    tape.output.backward(output_grad)
    tape.used = True
    grads = tape.params.gradients(tape.params.names([tape.prefix]))
    grads["input"] = np.zeros(tape.inputs[0].shape) if tape.inputs[0].grad is None else tape.inputs[0].grad
    return grads


def gradient_check(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                   max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """
    Compare analytic gradients of the scalar `loss_fn()` against central finite differences.

    :param loss_fn:     Rebuilds the loss from the current tensor values
    :param tensors:     Leaf tensors (requires_grad=True) to check
    :param h:           Finite-difference step
    :param max_entries: If given, check only this many randomly chosen entries per tensor
    :return:            Maximum relative error |a - n| / max(|a| + |n|, 1e-8)
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for t, grad in zip(tensors, analytic):
        indices = list(np.ndindex(*t.shape))
        if max_entries is not None and len(indices) > max_entries:
            picks = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[i] for i in picks]
        for idx in indices:
            original = t.data[idx]
            t.data[idx] = original + h
            with no_grad():
                plus = loss_fn().item()
            t.data[idx] = original - h
            with no_grad():
                minus = loss_fn().item()
            t.data[idx] = original
            numeric = (plus - minus) / (2.0 * h)
            err = abs(grad[idx] - numeric) / max(abs(grad[idx]) + abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


############################################################################################
#                                                                                          #
#                                        CHECKPOINTS                                       #
#                                                                                          #
############################################################################################

def parameters_hash(params: ParameterSet) -> str:
    """
    SHA-256 over parameter names, shapes and float64 bytes, in name order
    """
    digest = hashlib.sha256()
    for name in sorted(params.tensors):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        digest.update(name.encode())
        digest.update(str(data.shape).encode())
        digest.update(data.tobytes())
    return digest.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def save_checkpoint(path: str, params: ParameterSet, config: dict, extra: Optional[dict] = None) -> str:
    """
    Write parameters, Adam state and config to a JSON container.

    :return:    The parameters hash stored in the file
    """
    record = {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "parameters_hash": parameters_hash(params),
        "optimizer_version": params.version,
        "parameters": OrderedDict(
            (name, {"shape": list(t.shape), "data": t.data.ravel().tolist()}) for name, t in params.tensors.items()),
        "optimizer": OrderedDict(
            (name, {"t": s.t, "m": s.m.ravel().tolist(), "v": s.v.ravel().tolist()})
            for name, s in sorted(params.state.items())),
        "extra": extra or {},
    }
    with open(path, "w") as f:
        json.dump(record, f)
    logger.debug(f"Checkpoint written to {path} ({params.count()} weights)")
    return record["parameters_hash"]


def load_checkpoint(path: str) -> Tuple[ParameterSet, dict, dict]:
    """
    :return:    (parameters with optimizer state, config, remaining metadata)
    """
    with open(path) as f:
        record = json.load(f)
    if "version" not in record:
        raise ValueError(f"Checkpoint {path} has no version field")
    if record["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {record['version']} in {path}")
    params = ParameterSet()
    for name, item in record["parameters"].items():
        params.add(name, np.asarray(item["data"], dtype=float).reshape(item["shape"]))
    for name, item in record["optimizer"].items():
        shape = params[name].shape
        params.state[name] = AdamState(np.asarray(item["m"], float).reshape(shape),
                                       np.asarray(item["v"], float).reshape(shape), int(item["t"]))
    params.version = int(record.get("optimizer_version", 0))
    meta = {k: v for k, v in record.items() if k not in ("parameters", "optimizer", "config")}
    return params, record["config"], meta
