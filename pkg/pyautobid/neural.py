"""
Minimal reverse-mode autodiff over numpy arrays.

A Tensor remembers the tensors it was computed from and a closure that maps
its output gradient to gradients of those parents. Calling backward() on a
scalar loss walks the recorded graph in reverse topological order.

On top of the Tensor sit the few layers the decision model and the critics
need: linear layers, MLPs, layer normalization, multi-head causal attention,
a pre-norm transformer stack, AdamW and the expectile loss.
"""

from __future__ import annotations

import json
import logging
import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np

from .const import CKPT_FORMAT
from .exceptions import ArtifactMismatchError, MissingArtifactError, NumericError

_LOGGER = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
INIT_STD = 0.02

_GRAD_STATE = threading.local()

Operand = Union["Tensor", float, int, np.ndarray]
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def is_grad_enabled() -> bool:
    """Return whether new operations are recorded for backward()."""
    return bool(getattr(_GRAD_STATE, "enabled", True))


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An array with an optional gradient and the graph that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        _parents: tuple[Tensor, ...] = (),
        _op: str = "",
    ) -> None:
        array = np.asarray(data)
        if array.dtype.kind != "f":
            array = array.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(array)):
            raise NumericError(f"non-finite values produced by {_op or 'input'}")
        self.data: np.ndarray = array
        self.grad: np.ndarray | None = None
        track = is_grad_enabled() and any(p.requires_grad for p in _parents)
        self.requires_grad = requires_grad or track
        self._parents = _parents if track else ()
        self._backward: BackwardFn | None = None
        self._op = _op

    def __repr__(self) -> str:
        """Return representation of Tensor object."""
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    @property
    def shape(self) -> tuple[int, ...]:
        """Return the shape of the underlying array."""
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        """Return the number of dimensions."""
        return int(self.data.ndim)

    def numpy(self) -> np.ndarray:
        """Return the underlying array."""
        return self.data

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        """Forget the accumulated gradient."""
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = parent_grad.astype(parent.data.dtype, copy=False)
                parent.grad = parent_grad if parent.grad is None else parent.grad + parent_grad
            if node._parents:
                # interior nodes only hold gradients while the walk needs them
                node.grad = None

    # arithmetic

    def __add__(self, other: Operand) -> Tensor:
        other_t = _as_tensor(other, self.data.dtype)
        a_shape, b_shape = self.shape, other_t.shape
        return _make(
            self.data + other_t.data,
            (self, other_t),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    def __radd__(self, other: Operand) -> Tensor:
        return self + other

    def __neg__(self) -> Tensor:
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other: Operand) -> Tensor:
        return self + (-_as_tensor(other, self.data.dtype))

    def __rsub__(self, other: Operand) -> Tensor:
        return _as_tensor(other, self.data.dtype) + (-self)

    def __mul__(self, other: Operand) -> Tensor:
        other_t = _as_tensor(other, self.data.dtype)
        a, b = self.data, other_t.data
        return _make(
            a * b,
            (self, other_t),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    def __rmul__(self, other: Operand) -> Tensor:
        return self * other

    def __truediv__(self, other: Operand) -> Tensor:
        if isinstance(other, Tensor):
            return self * other.pow(-1.0)
        return self * (1.0 / np.asarray(other, dtype=self.data.dtype))

    def __matmul__(self, other: Tensor) -> Tensor:
        a, b = self.data, other.data

        def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            grad_a = g @ np.swapaxes(b, -1, -2)
            grad_b = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

        return _make(a @ b, (self, other), _backward, "matmul")

    def pow(self, exponent: float) -> Tensor:
        """Raise every element to a constant power."""
        a = self.data
        return _make(
            a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),), "pow"
        )

    def relu(self) -> Tensor:
        """Rectified linear unit."""
        positive = self.data > 0
        return _make(self.data * positive, (self,), lambda g: (g * positive,), "relu")

    def abs(self) -> Tensor:
        """Elementwise absolute value; the subgradient at 0 is 0."""
        sign = np.sign(self.data)
        return _make(np.abs(self.data), (self,), lambda g: (g * sign,), "abs")

    def sqrt(self) -> Tensor:
        """Elementwise square root."""
        out = np.sqrt(self.data)
        return _make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    # reductions and shape

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        """Sum over the given axes."""
        shape = self.shape

        def _backward(g: np.ndarray) -> tuple[np.ndarray]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), _backward, "sum")

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        """Average over the given axes."""
        count = self.data.size // max(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)).size, 1)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> Tensor:
        """Return the same data with a new shape."""
        original = self.shape
        return _make(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), "reshape"
        )

    def transpose(self, *axes: int) -> Tensor:
        """Permute the axes."""
        inverse = tuple(np.argsort(axes))
        return _make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose"
        )

    def __getitem__(self, index: Any) -> Tensor:
        shape, dtype = self.shape, self.data.dtype

        def _backward(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return _make(self.data[index], (self,), _backward, "getitem")


def _raise_item(tensor: Tensor) -> float:
    raise ValueError(f"item() needs a single-element tensor, got shape {tensor.shape}")


def _as_tensor(value: Operand, dtype: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(
    data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str
) -> Tensor:
    out = Tensor(data, _parents=parents, _op=op)
    if out._parents:
        out._backward = backward
    return out


def parameter(data: np.ndarray) -> Tensor:
    """Wrap an array as a trainable leaf."""
    return Tensor(data, requires_grad=True)


# functional ops


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g: np.ndarray) -> list[np.ndarray]:
        return list(np.split(g, splits, axis=axis))

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _backward, "concat"
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack tensors along a new axis."""
    count = len(tensors)

    def _backward(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(count)]

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), _backward, "stack")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of weight by integer ids."""
    ids = np.asarray(ids, dtype=np.int64)
    dtype = weight.data.dtype

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(weight.shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(weight.data[ids], (weight,), _backward, "embedding")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along axis; positions where mask is False get weight 0."""
    logits = x.data if mask is None else np.where(mask, x.data, -np.inf)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), _backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift."""
    width = x.shape[-1]
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gamma.data + beta.data

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_hat = g * gamma.data
        grad_x = (inv_std / width) * (
            width * g_hat
            - g_hat.sum(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        return (
            grad_x,
            _unbroadcast(g * x_hat, gamma.shape),
            _unbroadcast(g, beta.shape),
        )

    return _make(out, (x, gamma, beta), _backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * keep


def causal_mask(length: int) -> np.ndarray:
    """Return a (length, length) mask allowing each position to see itself and the past."""
    return np.tril(np.ones((length, length), dtype=bool))


def attention_mask(valid: np.ndarray, causal: bool = True) -> np.ndarray:
    """
    Build a (batch, 1, T, T) boolean mask from a (batch, T) validity mask.

    Invalid (padding) keys are hidden; every position may always attend to
    itself so no softmax row is empty.
    """
    valid = np.asarray(valid, dtype=bool)
    length = valid.shape[-1]
    allowed = np.broadcast_to(valid[:, None, None, :], (valid.shape[0], 1, length, length))
    if causal:
        allowed = allowed & causal_mask(length)
    return allowed | np.eye(length, dtype=bool)


def attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None, causal: bool = False
) -> Tensor:
    """
    Scaled dot-product attention softmax(q k^T / sqrt(d_k)) v.

    q, k, v have shape (..., T, d_k); mask broadcasts against (..., T, T) with
    True meaning visible. causal=True additionally hides future positions.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q={q.shape} k={k.shape} v={v.shape}")
    if causal:
        future = causal_mask(q.shape[-2])
        mask = future if mask is None else (mask & future)
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = (q @ k.transpose(*axes)) * (1.0 / np.sqrt(q.shape[-1]))
    return softmax(scores, axis=-1, mask=mask) @ v


def expectile_weights(u: np.ndarray, tau: float) -> np.ndarray:
    """Return |tau - 1(u < 0)| elementwise."""
    return np.where(u < 0, 1.0 - tau, tau).astype(u.dtype)


def expectile_kinks(u: np.ndarray) -> np.ndarray:
    """Return where the expectile weight switches (u == 0); the subgradient there is 0."""
    return np.asarray(u) == 0


def expectile_loss(u: Tensor, tau: float) -> Tensor:
    """Mean over elements of |tau - 1(u < 0)| * u^2."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"expectile tau must lie in (0, 1), got {tau}")
    weights = Tensor(expectile_weights(u.data, tau))
    return (weights * u * u).mean()


# modules


@dataclass(frozen=True)
class TransformerConfig:
    """Shape of a causal transformer stack."""

    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 192
    dropout_rate: float = 0.0
    causal: bool = True

    def __post_init__(self) -> None:
        if self.d_model <= 0 or self.n_heads <= 0 or self.n_layers <= 0:
            raise ValueError(f"transformer dimensions must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


def truncated_normal(
    rng: np.random.Generator, shape: tuple[int, ...], std: float = INIT_STD
) -> np.ndarray:
    """Draw N(0, std^2) values, redrawing anything beyond two standard deviations."""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2 * std
    while outside.any():
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2 * std
    return values.astype(DEFAULT_DTYPE)


class Module:
    """Base class: parameters are discovered from Tensor, Module and list attributes."""

    training = True

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        """Return every trainable tensor keyed by its dotted attribute path."""
        params: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                params[path] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{path}."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{path}.{i}."))
        return params

    def submodules(self) -> Iterator[Module]:
        """Yield self and every nested module."""
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.submodules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.submodules()

    def train(self, mode: bool = True) -> Module:
        """Switch dropout on (True) or off (False) throughout the module tree."""
        for module in self.submodules():
            module.training = mode
        return self

    def eval(self) -> Module:
        """Switch to inference mode."""
        return self.train(False)

    def zero_grad(self) -> None:
        """Forget the accumulated gradients of every parameter."""
        for param in self.named_parameters().values():
            param.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        """Return copies of every parameter array."""
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into the parameters, checking names and shapes."""
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ArtifactMismatchError(
                f"parameter names differ: missing={missing} unexpected={unexpected}"
            )
        for name, param in params.items():
            if tuple(state[name].shape) != param.shape:
                raise ArtifactMismatchError(
                    f"shape of {name} is {state[name].shape}, expected {param.shape}"
                )
            param.data = state[name].astype(param.data.dtype).copy()

    def astype(self, dtype: Any) -> Module:
        """Convert every parameter to dtype in place."""
        for param in self.named_parameters().values():
            param.data = param.data.astype(dtype)
        return self


class Linear(Module):
    """y = x W + b."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator) -> None:
        self.weight = parameter(truncated_normal(rng, (in_features, out_features)))
        self.bias = parameter(np.zeros(out_features, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


def mlp_forward(layers: Sequence[Linear], x: Tensor) -> Tensor:
    """Apply linear layers with ReLU between them (none after the last)."""
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = x.relu()
    return x


class MLP(Module):
    """A stack of linear layers; widths lists the output size of each layer."""

    def __init__(self, in_features: int, widths: Sequence[int], rng: np.random.Generator) -> None:
        if not widths:
            raise ValueError("an MLP needs at least one layer")
        sizes = [in_features, *widths]
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x: Tensor) -> Tensor:
        return mlp_forward(self.layers, x)


class LayerNorm(Module):
    """Layer normalization over the last axis."""

    def __init__(self, width: int, eps: float = 1e-5) -> None:
        self.gamma = parameter(np.ones(width, dtype=DEFAULT_DTYPE))
        self.beta = parameter(np.zeros(width, dtype=DEFAULT_DTYPE))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Multi-head self-attention with an output projection."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator) -> None:
        self.n_heads = n_heads
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        batch, length, width = x.shape
        return x.reshape(batch, length, self.n_heads, width // self.n_heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        batch, length, width = x.shape
        heads = attention(
            self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x)), mask
        )
        merged = heads.transpose(0, 2, 1, 3).reshape(batch, length, width)
        return self.out(merged)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, config: TransformerConfig, rng: np.random.Generator) -> None:
        self.ln_attn = LayerNorm(config.d_model)
        self.attn = MultiHeadAttention(config.d_model, config.n_heads, rng)
        self.ln_mlp = LayerNorm(config.d_model)
        self.mlp = MLP(config.d_model, [4 * config.d_model, config.d_model], rng)
        self.dropout_rate = config.dropout_rate
        self._rng = rng

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + dropout(self.attn(self.ln_attn(x), mask), self.dropout_rate, self._rng, self.training)
        return x + dropout(self.mlp(self.ln_mlp(x)), self.dropout_rate, self._rng, self.training)


class Transformer(Module):
    """A stack of transformer blocks followed by a final layer norm."""

    def __init__(self, config: TransformerConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.blocks = [TransformerBlock(config, rng) for _ in range(config.n_layers)]
        self.ln_final = LayerNorm(config.d_model)

    def forward(self, x: Tensor, valid: np.ndarray | None = None) -> Tensor:
        """Run x of shape (batch, T, d_model); valid marks real (non-padding) positions."""
        batch, length, _ = x.shape
        if length > self.config.max_seq_len:
            raise ValueError(f"sequence of {length} exceeds max_seq_len {self.config.max_seq_len}")
        if valid is None:
            valid = np.ones((batch, length), dtype=bool)
        mask = attention_mask(valid, self.config.causal)
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_final(x)


# optimization


@dataclass
class AdamWState:
    """First and second moment estimates plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.0,
    eps: float = 1e-8,
    betas: tuple[float, float] = (0.9, 0.999),
) -> None:
    """Apply one AdamW update in place, with weight decay decoupled from the moments."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    beta1, beta2 = betas
    state.t += 1
    correction1 = 1.0 - beta1**state.t
    correction2 = 1.0 - beta2**state.t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        elif grad.shape != param.data.shape:
            raise ValueError(f"gradient of {name} has shape {grad.shape}, expected {param.shape}")
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        if weight_decay:
            param.data *= 1.0 - lr * weight_decay
        param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm; return the norm before clipping."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for param in params.values():
            if param.grad is not None:
                param.grad = param.grad * scale
    return total


class AdamW:
    """AdamW over a fixed set of named parameters."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        weight_decay: float = 0.01,
        eps: float = 1e-8,
        betas: tuple[float, float] = (0.9, 0.999),
        max_grad_norm: float | None = None,
    ) -> None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.eps = eps
        self.betas = betas
        self.max_grad_norm = max_grad_norm
        self.state = AdamWState()

    def zero_grad(self) -> None:
        """Forget the gradients of every managed parameter."""
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        """Update the parameters from their accumulated gradients."""
        if self.max_grad_norm:
            clip_grad_norm(self.params, self.max_grad_norm)
        adamw_step(
            self.params,
            {name: p.grad for name, p in self.params.items()},
            self.state,
            self.lr,
            self.weight_decay,
            self.eps,
            self.betas,
        )


# verification


@dataclass(frozen=True)
class GradCheckResult:
    """Outcome of comparing reverse-mode gradients with finite differences."""

    max_rel_error: float
    checked: int
    skipped: int


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    skip: Sequence[np.ndarray | None] | None = None,
    floor: float = 1e-4,
) -> GradCheckResult:
    """
    Compare backward() with central finite differences.

    f must rebuild its graph from params on every call and return a scalar.
    Parameters are promoted to float64 first. skip optionally holds, per
    parameter, a boolean mask of elements to leave out (non-differentiable
    points); they are counted in the result instead.
    """
    for param in params:
        param.data = param.data.astype(np.float64)
        param.requires_grad = True
        param.zero_grad()
    loss = f()
    loss.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    worst, checked, skipped = 0.0, 0, 0
    with no_grad():
        for i, param in enumerate(params):
            mask = skip[i] if skip is not None else None
            for index in np.ndindex(param.shape):
                if mask is not None and bool(np.asarray(mask)[index]):
                    skipped += 1
                    continue
                original = param.data[index]
                param.data[index] = original + eps
                upper = f().item()
                param.data[index] = original - eps
                lower = f().item()
                param.data[index] = original
                numeric = (upper - lower) / (2 * eps)
                exact = float(analytic[i][index])
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                worst = max(worst, error)
                checked += 1
    _LOGGER.debug("grad_check: max relative error %s over %s elements", worst, checked)
    return GradCheckResult(worst, checked, skipped)


# checkpoints


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    meta: dict[str, Any],
    optimizer: AdamWState | None = None,
) -> None:
    """Write a ckpt-v1 archive: JSON header plus one array per parameter."""
    header = {
        "format": CKPT_FORMAT,
        "shapes": {name: list(array.shape) for name, array in params.items()},
        "meta": meta,
        "optimizer_t": optimizer.t if optimizer else None,
    }
    arrays: dict[str, np.ndarray] = {"__header__": np.array(json.dumps(header, sort_keys=True))}
    arrays.update({f"param/{name}": array for name, array in params.items()})
    if optimizer:
        arrays.update({f"opt_m/{name}": array for name, array in optimizer.m.items()})
        arrays.update({f"opt_v/{name}": array for name, array in optimizer.v.items()})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        np.savez(handle, **arrays)  # type: ignore[arg-type]
    _LOGGER.info("Saved checkpoint %s (%s tensors)", path, len(params))


def load_checkpoint(
    path: str | Path,
) -> tuple[dict[str, np.ndarray], dict[str, Any], AdamWState | None]:
    """Read a ckpt-v1 archive written by save_checkpoint()."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if "__header__" not in archive.files:
            raise ArtifactMismatchError(f"{path} is not a {CKPT_FORMAT} checkpoint")
        header = json.loads(str(archive["__header__"]))
        if header.get("format") != CKPT_FORMAT:
            raise ArtifactMismatchError(
                f"{path} has format {header.get('format')}, expected {CKPT_FORMAT}"
            )
        params = {name: archive[f"param/{name}"] for name in header["shapes"]}
        for name, shape in header["shapes"].items():
            if list(params[name].shape) != shape:
                raise ArtifactMismatchError(f"{path}: {name} does not match its header shape")
        optimizer = None
        if header.get("optimizer_t") is not None:
            optimizer = AdamWState(
                m={n: archive[f"opt_m/{n}"] for n in header["shapes"] if f"opt_m/{n}" in archive.files},
                v={n: archive[f"opt_v/{n}"] for n in header["shapes"] if f"opt_v/{n}" in archive.files},
                t=int(header["optimizer_t"]),
            )
    return params, header["meta"], optimizer
