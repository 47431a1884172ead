"""Per-layer math on top of the raw kernels: ReLU, recurrent convolution,
cross-channel response normalization, dropout, and softmax cross-entropy.

Forward functions that need state for the backward pass return an explicit
cache; the paired backward consumes it. Everything is a pure function of its
arguments (dropout draws from the generator it is handed).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ConfigError, DataError, IrcnnError
from .ops import ConvSpec, conv2d, conv2d_grad, ensure_finite, require_nchw


@dataclass(frozen=True)
class LrnAttrs:
    """Constants of the cross-channel response normalization."""

    depth_radius: int = 2
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 2.0

    def __post_init__(self):
        if self.k <= 0:
            raise ConfigError(f"lrn: k must be > 0, got {self.k}")
        if self.beta < 0:
            raise ConfigError(f"lrn: beta must be >= 0, got {self.beta}")
        if self.depth_radius < 0:
            raise ConfigError(f"lrn: depth_radius must be >= 0, got {self.depth_radius}")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(pre: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (pre > 0)


# ---------------------------------------------------------------------------
# recurrent convolution layer
# ---------------------------------------------------------------------------

def rcl_forward(x: np.ndarray, w_f: np.ndarray, w_r: np.ndarray, b: np.ndarray,
                t_steps: int, spec: ConvSpec) -> tuple[np.ndarray, dict[str, Any]]:
    """Unrolled recurrent convolution.

    The feedforward response conv(x, w_f) + b feeds every step; step 0 applies
    ReLU to it directly, and each later step adds conv(previous output, w_r)
    before the ReLU. Returns the step-T output and the cache for backward.
    """
    require_nchw(x, "rcl input")
    if spec.stride != (1, 1) or spec.padding != "same":
        raise ConfigError(f"rcl requires stride 1 and same padding (feature dims must "
                          f"not change), got stride={spec.stride} padding={spec.padding!r}")
    if t_steps < 0:
        raise ConfigError(f"rcl: time steps must be >= 0, got {t_steps}")
    co = spec.out_channels
    rec_spec = ConvSpec(kernel=spec.kernel, stride=(1, 1), padding="same", out_channels=co)
    if w_r.shape != (co, co, *spec.kernel):
        raise ConfigError(f"rcl: recurrent kernel shape {w_r.shape} != "
                          f"{(co, co, *spec.kernel)}")

    a_f = conv2d(x, w_f, b, spec)
    pre = [a_f]
    post = [relu(a_f)]
    for _ in range(t_steps):
        y_t = a_f + conv2d(post[-1], w_r, None, rec_spec)
        pre.append(y_t)
        post.append(relu(y_t))
    cache = {"x": x, "w_f": w_f, "w_r": w_r, "spec": spec, "rec_spec": rec_spec,
             "t_steps": t_steps, "pre": pre, "post": post}
    return post[-1], cache


def rcl_backward(cache: dict[str, Any], grad_out: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Backprop through the unroll: returns (grad_x, grad_w_f, grad_w_r, grad_b).

    The shared feedforward response collects one ReLU-masked contribution per
    step (T+1 of them); the recurrent kernel collects T.
    """
    if not isinstance(cache, dict) or "pre" not in cache:
        raise IrcnnError("rcl_backward: not a cache produced by rcl_forward")
    pre, post = cache["pre"], cache["post"]
    if grad_out.shape != post[-1].shape:
        raise IrcnnError(f"rcl_backward: grad_out shape {grad_out.shape} does not match "
                         f"cached output {post[-1].shape}; stale cache?")
    w_f, w_r = cache["w_f"], cache["w_r"]
    rec_spec = cache["rec_spec"]

    grad_a = np.zeros_like(pre[0])
    grad_w_r = np.zeros_like(w_r)
    g_z = grad_out
    for t in range(cache["t_steps"], 0, -1):
        g_y = relu_grad(pre[t], g_z)
        grad_a += g_y
        g_prev, g_wr, _ = conv2d_grad(post[t - 1], w_r, rec_spec, g_y)
        grad_w_r += g_wr
        g_z = g_prev
    grad_a += relu_grad(pre[0], g_z)
    grad_x, grad_w_f, grad_b = conv2d_grad(cache["x"], w_f, cache["spec"], grad_a)
    return grad_x, grad_w_f, grad_w_r, grad_b


# ---------------------------------------------------------------------------
# cross-channel response normalization
# ---------------------------------------------------------------------------

def _channel_window_sum(x: np.ndarray, radius: int) -> np.ndarray:
    """Sum of x over a channel window of width 2*radius+1, clipped at the edges."""
    c = x.shape[1]
    cs = np.concatenate([np.zeros_like(x[:, :1]), np.cumsum(x, axis=1)], axis=1)
    hi = np.minimum(np.arange(c) + radius + 1, c)
    lo = np.maximum(np.arange(c) - radius, 0)
    return cs[:, hi] - cs[:, lo]


def lrn(x: np.ndarray, attrs: LrnAttrs = LrnAttrs()) -> np.ndarray:
    """y = x / (k + alpha * windowed sum of squares across channels)^beta."""
    require_nchw(x, "lrn input")
    s = attrs.k + attrs.alpha * _channel_window_sum(x * x, attrs.depth_radius)
    return ensure_finite(x * np.power(s, -attrs.beta), "lrn")


def lrn_grad(x: np.ndarray, attrs: LrnAttrs, grad_out: np.ndarray) -> np.ndarray:
    # y_c = x_c * s_c^-beta with s_c = k + a * sum_{|c'-c|<=r} x_c'^2, so
    # dL/dx_c = g_c s_c^-beta - 2ab x_c * sum_{|c'-c|<=r} g_c' x_c' s_c'^(-beta-1)
    # (window membership is symmetric, so the second sum reuses the same window).
    s = attrs.k + attrs.alpha * _channel_window_sum(x * x, attrs.depth_radius)
    s_b = np.power(s, -attrs.beta)
    inner = _channel_window_sum(grad_out * x * s_b / s, attrs.depth_radius)
    g = grad_out * s_b - 2.0 * attrs.alpha * attrs.beta * x * inner
    return ensure_finite(g, "lrn_grad")


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout(x: np.ndarray, rate: float, mode: str,
            rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns (output, mask); mask is None when inactive.

    Train mode scales survivors by 1/(1-rate) so expectations match inference;
    infer mode is the identity. The mask is a pure function of the generator
    state handed in.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, None
    if rng is None:
        raise ConfigError("dropout in train mode needs a seeded generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype)
    return x * mask / (1.0 - rate), mask


def dropout_grad(mask: np.ndarray | None, rate: float, grad_out: np.ndarray) -> np.ndarray:
    if mask is None:
        return grad_out
    return grad_out * mask / (1.0 - rate)


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

def softmax_xent(logits: np.ndarray, labels: np.ndarray
                 ) -> tuple[float, np.ndarray, np.ndarray]:
    """Stable softmax + mean negative log-likelihood.

    logits: (n, K, 1, 1); labels: (n,) int class indices.
    Returns (loss, probs (n, K), grad_logits (n, K, 1, 1)).
    """
    require_nchw(logits, "softmax logits")
    n, k = logits.shape[:2]
    if logits.shape[2:] != (1, 1):
        raise ConfigError(f"softmax expects (n, K, 1, 1) logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0, {k}): min={labels.min()} max={labels.max()}")

    z = logits.reshape(n, k)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    loss = float(-np.log(probs[np.arange(n), labels]).mean())
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    grad = ((probs - onehot) / n).reshape(logits.shape)
    ensure_finite(np.asarray(loss), "softmax_xent loss")
    return loss, probs, grad
