"""Dense float64 array ops with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` objects in float64. Every differentiable
op comes as a ``forward`` function and a matching ``*_backward`` function
that takes the upstream gradient plus the forward inputs (or outputs) and
returns the input gradient, accumulating into any trainable
:class:`Parameter` it touched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, GradCheckError

DTYPE = np.float64


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


@dataclass(eq=False)
class Parameter:
    """A named learnable array with its gradient accumulator."""

    value: np.ndarray
    name: str = "param"
    trainable: bool = True
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def accumulate(self, g):
        if self.trainable:
            self.grad += g


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def linear(x: np.ndarray, weight: Parameter, bias: Parameter) -> np.ndarray:
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise DimensionError(
            f"linear: input shape {x.shape} does not match weight shape {weight.shape}")
    if bias.shape != (cout,):
        raise DimensionError(
            f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
    return x @ weight.value + bias.value


def linear_backward(dy: np.ndarray, x: np.ndarray, weight: Parameter, bias: Parameter) -> np.ndarray:
    cin, cout = weight.shape
    x2 = x.reshape(-1, cin)
    dy2 = dy.reshape(-1, cout)
    weight.accumulate(x2.T @ dy2)
    bias.accumulate(dy2.sum(axis=0))
    return dy @ weight.value.T


class Linear:
    """Weight/bias pair; thin holder so layers can share the functional ops."""

    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator | None = None,
                 weight=None, bias=None):
        if weight is None:
            weight = glorot(rng, cin, cout) if rng is not None else np.zeros((cin, cout))
        if bias is None:
            bias = np.zeros(cout)
        self.weight = Parameter(weight, f"{name}.weight")
        self.bias = Parameter(bias, f"{name}.bias")

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x):
        return linear(x, self.weight, self.bias)

    def backward(self, dy, x):
        return linear_backward(dy, x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# conv2d, 3x3 kernel, stride 2, zero padding 1, channel preserving
# ---------------------------------------------------------------------------

def _conv_out_hw(h: int, w: int) -> tuple[int, int]:
    return (h + 1) // 2, (w + 1) // 2


def _pad1(x):
    h, w, c = x.shape
    xp = np.zeros((h + 2, w + 2, c))
    xp[1:-1, 1:-1] = x
    return xp


def conv2d_stride2(x: np.ndarray, kernel: Parameter, bias: Parameter) -> np.ndarray:
    if x.ndim != 3:
        raise DimensionError(f"conv2d_stride2: expected HxWxC input, got shape {x.shape}")
    h, w, c = x.shape
    if kernel.shape != (3, 3, c, c) or bias.shape != (c,):
        raise DimensionError(
            f"conv2d_stride2: input shape {x.shape} incompatible with kernel {kernel.shape}")
    if h < 3 or w < 3:
        raise DimensionError(f"conv2d_stride2: input {h}x{w} smaller than the 3x3 kernel")
    ho, wo = _conv_out_hw(h, w)
    xp = _pad1(x)
    out = np.broadcast_to(bias.value, (ho, wo, c)).copy()
    k = kernel.value
    for ky in range(3):
        for kx in range(3):
            patch = xp[ky:ky + 2 * ho - 1:2, kx:kx + 2 * wo - 1:2, :]
            out += patch @ k[ky, kx]
    return out


def conv2d_stride2_backward(dy: np.ndarray, x: np.ndarray, kernel: Parameter, bias: Parameter) -> np.ndarray:
    h, w, c = x.shape
    ho, wo = dy.shape[:2]
    xp = _pad1(x)
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernel.value)
    k = kernel.value
    dy2 = dy.reshape(-1, c)
    for ky in range(3):
        for kx in range(3):
            sl = (slice(ky, ky + 2 * ho - 1, 2), slice(kx, kx + 2 * wo - 1, 2))
            dk[ky, kx] = xp[sl].reshape(-1, c).T @ dy2
            dxp[sl] += dy @ k[ky, kx].T
    kernel.accumulate(dk)
    bias.accumulate(dy2.sum(axis=0))
    return dxp[1:-1, 1:-1, :]


# ---------------------------------------------------------------------------
# pointwise nonlinearities and softmax
# ---------------------------------------------------------------------------

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp: np.ndarray, p: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy: np.ndarray, s: np.ndarray) -> np.ndarray:
    return dy * s * (1.0 - s)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


# ---------------------------------------------------------------------------
# multi-head self-attention with output projection and residual
# ---------------------------------------------------------------------------

class SelfAttention:
    def __init__(self, name: str, channels: int, heads: int, rng: np.random.Generator | None = None):
        if heads < 1 or channels % heads:
            raise ConfigurationError(f"channels={channels} not divisible by heads={heads}")
        self.channels = channels
        self.heads = heads
        self.q = Linear(f"{name}.q", channels, channels, rng)
        self.k = Linear(f"{name}.k", channels, channels, rng)
        self.v = Linear(f"{name}.v", channels, channels, rng)
        self.out = Linear(f"{name}.out", channels, channels, rng)

    def parameters(self):
        return self.q.parameters() + self.k.parameters() + self.v.parameters() + self.out.parameters()

    def forward(self, x: np.ndarray):
        n, c = x.shape
        if c != self.channels:
            raise DimensionError(f"self_attention: input {x.shape}, expected trailing dim {self.channels}")
        h, d = self.heads, c // self.heads
        q = self.q(x).reshape(n, h, d).transpose(1, 0, 2)
        k = self.k(x).reshape(n, h, d).transpose(1, 0, 2)
        v = self.v(x).reshape(n, h, d).transpose(1, 0, 2)
        attn = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(d))
        ctx = (attn @ v).transpose(1, 0, 2).reshape(n, c)
        y = x + self.out(ctx)
        return y, (x, q, k, v, attn, ctx)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x, q, k, v, attn, ctx = cache
        n, c = x.shape
        h, d = self.heads, c // self.heads
        dctx = self.out.backward(dy, ctx).reshape(n, h, d).transpose(1, 0, 2)
        dattn = dctx @ v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ dctx
        dscores = softmax_backward(dattn, attn) / np.sqrt(d)
        dq = dscores @ k
        dk = dscores.transpose(0, 2, 1) @ q

        def merge(t):
            return t.transpose(1, 0, 2).reshape(n, c)

        dx = dy.copy()
        dx += self.q.backward(merge(dq), x)
        dx += self.k.backward(merge(dk), x)
        dx += self.v.backward(merge(dv), x)
        return dx


def self_attention(queries: np.ndarray, heads: int, layer: SelfAttention | None = None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Functional entry point; builds a fresh layer when none is supplied."""
    if layer is None:
        layer = SelfAttention("self_attn", queries.shape[-1], heads, rng or np.random.default_rng(0))
    elif layer.heads != heads:
        raise ConfigurationError(f"layer has {layer.heads} heads, {heads} requested")
    return layer(queries)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(op_under_test: Callable[..., tuple[float, Sequence[np.ndarray]]],
               inputs: Sequence[np.ndarray], epsilon: float = 1e-5,
               loss_only: Callable[..., float] | None = None) -> float:
    """Compare analytic gradients against central differences.

    ``op_under_test(*inputs)`` must return ``(loss, grads)`` with one gradient
    array per input. Inputs are perturbed in place and restored, so closures
    that read parameter arrays directly also work. ``loss_only``, when given,
    evaluates the probes without a backward pass. Returns the maximum of
    ``|analytic - numeric| / max(1, |analytic|)`` over all entries.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if loss_only is None:
        def loss_only(*args):
            return op_under_test(*args)[0]
    loss, grads = op_under_test(*inputs)
    grads = [np.array(g, dtype=DTYPE, copy=True) for g in grads]
    if len(grads) != len(inputs):
        raise GradCheckError(f"expected {len(inputs)} gradients, got {len(grads)}")
    worst = 0.0
    for which, (x, g) in enumerate(zip(inputs, grads)):
        if g.shape != x.shape:
            raise GradCheckError(f"input {which}: gradient shape {g.shape} != input shape {x.shape}")
        flat = x.reshape(-1)
        if not np.shares_memory(flat, x):
            raise GradCheckError(f"input {which} is not contiguous; cannot probe in place")
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            lp = float(loss_only(*inputs))
            flat[idx] = orig - epsilon
            lm = float(loss_only(*inputs))
            flat[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise GradCheckError(
                    f"non-finite loss while probing input {which} entry "
                    f"{tuple(int(i) for i in np.unravel_index(idx, x.shape))}")
            numeric = (lp - lm) / (2 * epsilon)
            err = abs(gflat[idx] - numeric) / max(1.0, abs(gflat[idx]))
            worst = max(worst, err)
    return worst


def check_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name} contains non-finite values")
    return x
