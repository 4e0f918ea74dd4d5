"""Minimal differentiable layer set on numpy (B, C, H, W) arrays.

All gradients are computed analytically; ``gradient_check`` verifies any of
them against central finite differences in double precision. Training runs in
float32, checks in float64 — functions follow the dtype of their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySupervisionError, NonFiniteGradientError, ShapeMismatchError

UNLABELED, NEGATIVE, POSITIVE = 0, 1, 2


def check_tensor4(x: np.ndarray, name: str = "input") -> np.ndarray:
    """Validate a (batch, channels, height, width) array."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"{name}: expected 4 dims (B,C,H,W), got {x.ndim}")
    for axis, n in zip("BCHW", x.shape):
        if n < 1:
            raise ShapeMismatchError(f"{name}: dimension {axis} must be >= 1, got {n}")
    return x


# ---------------------------------------------------------------------------
# convolution (stride 1, odd kernel, zero-filled same padding)

def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """(C, Hp, Wp) padded image -> (H*W, C*k*k) patch matrix, row-major windows."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # windows: (C, H, W, k, k) -> (H, W, C, k, k) -> (H*W, C*k*k)
    c, h, w = windows.shape[:3]
    return windows.transpose(1, 2, 0, 3, 4).reshape(h * w, c * k * k)


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 convolution (cross-correlation, as in every DL stack).

    x: (B, Cin, H, W); weights: (Cout, Cin, k, k) with k odd; bias: (Cout,).
    Output spatial dims equal input spatial dims.
    """
    check_tensor4(x, "conv input")
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ShapeMismatchError(f"conv weights: expected (Cout,Cin,k,k), got {weights.shape}")
    cout, cin, k, _ = weights.shape
    if k % 2 != 1:
        raise ShapeMismatchError(f"conv kernel size must be odd, got k={k}")
    if x.shape[1] != cin:
        raise ShapeMismatchError(
            f"conv input channels C={x.shape[1]} do not match weight Cin={cin}")
    if bias.shape != (cout,):
        raise ShapeMismatchError(f"conv bias: expected ({cout},), got {bias.shape}")

    b, _, h, w = x.shape
    pad = k // 2
    wmat = weights.reshape(cout, cin * k * k).T  # (Cin*k*k, Cout)
    out = np.empty((b, cout, h, w), dtype=x.dtype)
    for i in range(b):  # per-sample im2col keeps peak memory flat
        xp = np.pad(x[i], ((0, 0), (pad, pad), (pad, pad)))
        cols = _im2col(xp, k)
        y = cols @ wmat + bias
        out[i] = y.reshape(h, w, cout).transpose(2, 0, 1)
    return out


def conv2d_backward(x: np.ndarray, weights: np.ndarray, d_out: np.ndarray):
    """Gradients of conv2d_forward. Returns (d_input, d_weights, d_bias)."""
    cout, cin, k, _ = weights.shape
    b, _, h, w = x.shape
    if d_out.shape != (b, cout, h, w):
        raise ShapeMismatchError(
            f"conv d_output: expected {(b, cout, h, w)}, got {d_out.shape}")
    pad = k // 2
    d_w = np.zeros((cout, cin * k * k), dtype=x.dtype)
    for i in range(b):
        xp = np.pad(x[i], ((0, 0), (pad, pad), (pad, pad)))
        cols = _im2col(xp, k)  # (H*W, Cin*k*k)
        g = d_out[i].reshape(cout, h * w)  # (Cout, H*W)
        d_w += g @ cols
    d_weights = d_w.reshape(cout, cin, k, k)
    d_bias = d_out.sum(axis=(0, 2, 3))
    # d_input = same conv of d_out with 180deg-rotated, channel-swapped weights
    w_rot = weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (Cin, Cout, k, k)
    d_input = conv2d_forward(d_out, np.ascontiguousarray(w_rot),
                             np.zeros(cin, dtype=x.dtype))
    return d_input, d_weights, d_bias


# ---------------------------------------------------------------------------
# 2x2 max pooling / nearest-neighbor upsampling

def maxpool2_forward(x: np.ndarray):
    """2x2 stride-2 max pool. Returns (pooled, argmax) where argmax in 0..3
    indexes the window position row-major; ties go to the first occurrence."""
    check_tensor4(x, "maxpool input")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool needs even spatial dims, got H={h}, W={w}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first occurrence on ties (row-major window order)
    pooled = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def maxpool2_backward(idx: np.ndarray, x_shape, d_out: np.ndarray) -> np.ndarray:
    """Route each gradient entry to its window's argmax position."""
    b, c, h, w = x_shape
    if d_out.shape != (b, c, h // 2, w // 2):
        raise ShapeMismatchError(
            f"maxpool d_output: expected {(b, c, h // 2, w // 2)}, got {d_out.shape}")
    win = np.zeros((b, c, h // 2, w // 2, 4), dtype=d_out.dtype)
    np.put_along_axis(win, idx[..., None], d_out[..., None], axis=-1)
    return win.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    """Replicate each pixel into a 2x2 block."""
    check_tensor4(x, "upsample input")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(d_out: np.ndarray) -> np.ndarray:
    """Sum the four cotangents of each replicated block."""
    b, c, h, w = d_out.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"upsample d_output dims must be even, got H={h}, W={w}")
    return d_out.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return d_out * (x > 0)


# ---------------------------------------------------------------------------
# losses

def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis, numerically stable."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def weighted_masked_ce(logits: np.ndarray, labels: np.ndarray, weight_map: np.ndarray):
    """Per-pixel weighted cross entropy over 2 classes, masked to labeled pixels.

    logits: (B, 2, H, W); labels: (B, H, W) in {0 unlabeled, 1 negative,
    2 positive}; weight_map: (B, H, W) with weights for labeled pixels
    (values at unlabeled pixels are ignored).

    Returns (loss, d_logits). Loss is the weight-normalized mean of
    -log softmax_prob[true class] over labeled pixels, so rescaling the whole
    weight map changes nothing. With no labeled pixel anywhere the loss is
    None (empty supervision) and the gradient is all zeros.
    """
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeMismatchError(f"ce logits: expected (B,2,H,W), got {logits.shape}")
    spatial = (logits.shape[0],) + logits.shape[2:]
    if labels.shape != spatial:
        raise ShapeMismatchError(f"ce labels: expected {spatial}, got {labels.shape}")
    if weight_map.shape != spatial:
        raise ShapeMismatchError(f"ce weight_map: expected {spatial}, got {weight_map.shape}")

    mask = labels != UNLABELED
    if not mask.any():
        return None, np.zeros_like(logits)

    w = np.where(mask, weight_map, 0).astype(logits.dtype)
    wsum = w.sum()
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    cls = np.where(mask, labels.astype(np.int64) - 1, 0)  # 0=negative, 1=positive
    picked = np.take_along_axis(logp, cls[:, None], axis=1)[:, 0]
    loss = float(-(w * picked).sum() / wsum)

    p = np.exp(logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, cls[:, None], 1.0, axis=1)
    d_logits = (p - onehot) * (w / wsum)[:, None]
    return loss, d_logits.astype(logits.dtype)


def mse_reconstruction(output: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient w.r.t. the output."""
    if output.shape != target.shape:
        raise ShapeMismatchError(
            f"mse: output shape {output.shape} != target shape {target.shape}")
    diff = output - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    d_output = (2.0 / diff.size) * diff
    return loss, d_output.astype(output.dtype)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    """Bias-corrected Adam with per-array moment buffers."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step_count: int = 0


def adam_init(params: list[np.ndarray], learning_rate: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon,
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        step_count=0,
    )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One Adam update. Returns (new_params, new_state); inputs are not mutated."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeMismatchError("adam: params/grads/state length mismatch")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeMismatchError(
                f"adam: param {i} shape {p.shape} != grad shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {i}")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(
        learning_rate=state.learning_rate, beta1=b1, beta2=b2, epsilon=state.epsilon,
        first_moment=new_m, second_moment=new_v, step_count=t,
    )
    return new_params, new_state


# ---------------------------------------------------------------------------
# finite-difference verification

def gradient_check(loss_and_grads, params: list[np.ndarray], step: float = 1e-3,
                   loss_fn=None) -> float:
    """Max relative error between analytic and central-FD gradients.

    ``loss_and_grads(params)`` must return (scalar loss, gradient list shaped
    like ``params``). ``loss_fn``, if given, computes just the loss and is used
    for the FD probes (saves the backward pass). Everything runs in float64;
    relative error is |analytic - fd| / max(|analytic|, |fd|, 1e-8), maximized
    over all entries.
    """
    if loss_fn is None:
        loss_fn = lambda ps: loss_and_grads(ps)[0]
    params = [p.astype(np.float64) for p in params]
    _, analytic = loss_and_grads(params)
    worst = 0.0
    for i, p in enumerate(params):
        flat = p.reshape(-1)
        a_flat = np.asarray(analytic[i], dtype=np.float64).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lo_hi = loss_fn(params)
            flat[j] = orig - step
            lo_lo = loss_fn(params)
            flat[j] = orig
            fd = (lo_hi - lo_lo) / (2 * step)
            denom = max(abs(a_flat[j]), abs(fd), 1e-8)
            worst = max(worst, abs(a_flat[j] - fd) / denom)
    return worst
