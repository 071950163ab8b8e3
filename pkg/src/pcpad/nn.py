"""Layers with hand-written reverse-mode gradients.

Every layer caches what it needs during ``forward`` and returns the input
gradient from ``backward``; parameter gradients land in ``layer.grads``
under the same names as ``layer.params``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .padding import ConvGeometry, PadMode, check_reflect, out_dims, pad, pad_adjoint
from .pconv import ConvWeights, RatioCache, RatioMap, conv2d_forward, default_cache, im2col


def conv2d_backward(x: np.ndarray, w: ConvWeights, geom: ConvGeometry,
                    mode: "PadMode | str", grad_out: np.ndarray, *,
                    mask: Optional[np.ndarray] = None,
                    ratio: Optional[RatioMap] = None,
                    cache: Optional[RatioCache] = None):
    """Gradients of :func:`pconv.conv2d_forward` w.r.t. input, weight and bias.

    The partial-mode ratio is constant in ``x`` and ``W``, so its backward is
    the zero-padding backward with ``grad_out`` pre-scaled by ``r``. The bias
    gradient sums the unscaled ``grad_out`` over valid positions only.
    """
    mode = PadMode.parse(mode)
    N, C, H, W = x.shape
    H_out, W_out = out_dims(geom, H, W)
    weight = w.weight.astype(x.dtype, copy=False)
    C_out = weight.shape[0]
    g = grad_out
    if mode is PadMode.PARTIAL:
        if ratio is None:
            ratio = (cache or default_cache()).get(geom, H, W, mask)
        g = ratio.apply(grad_out)
        grad_b = (grad_out * ratio.valid).sum(axis=(0, 2, 3))
        if mask is not None and not np.all(mask == 1):
            x = x * mask.astype(x.dtype)
        fill_mode = PadMode.ZERO
    else:
        if mode is PadMode.REFLECT:
            check_reflect(geom, H, W)
        grad_b = grad_out.sum(axis=(0, 2, 3))
        fill_mode = mode
    xp = pad(x, geom, fill_mode)
    cols = im2col(xp, geom, H_out, W_out)
    g_mat = g.transpose(0, 2, 3, 1).reshape(-1, C_out)
    grad_w = (g_mat.T @ cols).reshape(weight.shape)

    # col2im: scatter each kernel tap back onto the padded grid
    dcols = (g_mat @ weight.reshape(C_out, -1)).reshape(N, H_out, W_out, C, geom.k_h, geom.k_w)
    dxp = np.zeros_like(xp)
    for i in range(geom.k_h):
        r0 = i * geom.d_h
        rows = slice(r0, r0 + geom.s_h * (H_out - 1) + 1, geom.s_h)
        for j in range(geom.k_w):
            c0 = j * geom.d_w
            cols_ = slice(c0, c0 + geom.s_w * (W_out - 1) + 1, geom.s_w)
            dxp[:, :, rows, cols_] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = pad_adjoint(dxp, geom, fill_mode, H, W)
    if mode is PadMode.PARTIAL and mask is not None and not np.all(mask == 1):
        grad_x = grad_x * mask.astype(grad_x.dtype)
    if w.bias is None:
        grad_b = None
    return grad_x, grad_w, grad_b


class Layer:
    params: dict
    grads: dict

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, weight: np.ndarray, bias: Optional[np.ndarray], geom: ConvGeometry,
                 mode: "PadMode | str" = PadMode.ZERO, cache: Optional[RatioCache] = None):
        self.params = {"weight": weight}
        if bias is not None:
            self.params["bias"] = bias
        self.grads = {}
        self.geom = geom
        self.mode = PadMode.parse(mode)
        self.cache = cache
        self._x = None

    @property
    def weights(self) -> ConvWeights:
        return ConvWeights(self.params["weight"], self.params.get("bias"))

    def forward(self, x):
        self._x = x
        out, _ = conv2d_forward(x, self.weights, self.geom, self.mode, cache=self.cache)
        return out

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(self._x, self.weights, self.geom, self.mode, grad,
                                     cache=self.cache)
        self.grads = {"weight": gw}
        if gb is not None:
            self.grads["bias"] = gb
        return gx


class Dense(Layer):
    def __init__(self, weight: np.ndarray, bias: Optional[np.ndarray]):
        # weight: out_features x in_features
        self.params = {"weight": weight}
        if bias is not None:
            self.params["bias"] = bias
        self.grads = {}
        self._x = None

    def forward(self, x):
        if x.ndim != 2:
            raise ValueError(f"dense expects N x features, got shape {x.shape}")
        self._x = x
        out = x @ self.params["weight"].astype(x.dtype, copy=False).T
        if "bias" in self.params:
            out = out + self.params["bias"].astype(x.dtype, copy=False)
        return out

    def backward(self, grad):
        w = self.params["weight"].astype(grad.dtype, copy=False)
        self.grads = {"weight": grad.T @ self._x}
        if "bias" in self.params:
            self.grads["bias"] = grad.sum(axis=0)
        return grad @ w


class ReLU(Layer):
    def __init__(self):
        self.params, self.grads = {}, {}
        self._on = None

    def forward(self, x):
        self._on = x > 0
        return np.where(self._on, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad):
        return np.where(self._on, grad, np.zeros((), dtype=grad.dtype))


class AvgPool2d(Layer):
    """Mean over non-padded ``k_h x k_w`` windows (geometry padding must be 0)."""

    def __init__(self, geom: ConvGeometry):
        if geom.p_h or geom.p_w or geom.d_h != 1 or geom.d_w != 1:
            raise ValueError("avgpool supports neither padding nor dilation")
        self.geom = geom
        self.params, self.grads = {}, {}
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        H_out, W_out = out_dims(self.geom, *x.shape[2:])
        g = self.geom
        acc = np.zeros(x.shape[:2] + (H_out, W_out), dtype=x.dtype)
        for i in range(g.k_h):
            for j in range(g.k_w):
                acc += x[:, :, i:i + g.s_h * (H_out - 1) + 1:g.s_h, j:j + g.s_w * (W_out - 1) + 1:g.s_w]
        return acc / x.dtype.type(g.window_size)

    def backward(self, grad):
        g = self.geom
        H_out, W_out = grad.shape[2:]
        out = np.zeros(self._shape, dtype=grad.dtype)
        share = grad / grad.dtype.type(g.window_size)
        for i in range(g.k_h):
            for j in range(g.k_w):
                out[:, :, i:i + g.s_h * (H_out - 1) + 1:g.s_h, j:j + g.s_w * (W_out - 1) + 1:g.s_w] += share
        return out


class Flatten(Layer):
    def __init__(self):
        self.params, self.grads = {}, {}
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. ``logits``.

    ``logits`` is ``N x K`` or ``N x K x H x W`` (per-pixel, labels ``N x H x W``).
    """
    if logits.ndim == 4:
        N, K, H, W = logits.shape
        flat = logits.transpose(0, 2, 3, 1).reshape(-1, K)
        loss, g = softmax_cross_entropy(flat, labels.reshape(-1))
        return loss, g.reshape(N, H, W, K).transpose(0, 3, 1, 2)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    idx = np.arange(n)
    loss = -logp[idx, labels].mean()
    g = np.exp(logp)
    g[idx, labels] -= 1
    return float(loss), g / n


@dataclass
class Sequential:
    layers: list = field(default_factory=list)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad
