"""Small convolutional image encoder and the two feature-fusion operators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .imagecore import Image
from .nncore import LinearParams, gelu, gelu_backward, linear_backward, linear_forward, uniform_init

CONV_CHANNELS = (3, 16, 32, 64)


@dataclass
class ConvLayer:
    weight: np.ndarray  # (out, 3, 3, in)
    bias: np.ndarray  # (out,)


@dataclass
class ConvEncoderParams:
    """Three 3x3 stride-2 conv blocks with GELU, global average pool, linear head."""

    convs: list
    head: LinearParams
    input_size: int

    @property
    def feature_dim(self) -> int:
        return self.head.out_dim

    @classmethod
    def init(cls, rng, feature_dim=128, input_size=64, channels=CONV_CHANNELS):
        convs = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            fan_in = 9 * cin
            convs.append(ConvLayer(uniform_init(rng, (cout, 3, 3, cin), fan_in),
                                   uniform_init(rng, (cout,), fan_in)))
        return cls(convs, LinearParams.init(rng, channels[-1], feature_dim), input_size)

    def named_params(self, prefix=""):
        out = {}
        for k, layer in enumerate(self.convs):
            out[f"{prefix}conv{k}.weight"] = layer.weight
            out[f"{prefix}conv{k}.bias"] = layer.bias
        out[f"{prefix}head.weight"] = self.head.weight
        out[f"{prefix}head.bias"] = self.head.bias
        return out


def _im2col(x: np.ndarray):
    """(N, H, W, C) -> patches (N, Ho, Wo, 9*C) for a 3x3/stride-2/pad-1 conv."""
    n, h, w, c = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, ho, wo, 9, c))
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy * 3 + dx, :] = padded[:, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2, :]
    return cols.reshape(n, ho, wo, 9 * c)


def _col2im(dcols: np.ndarray, shape):
    n, h, w, c = shape
    ho, wo = dcols.shape[1:3]
    dcols = dcols.reshape(n, ho, wo, 9, c)
    dpad = np.zeros((n, h + 2, w + 2, c))
    for dy in range(3):
        for dx in range(3):
            dpad[:, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2, :] += dcols[:, :, :, dy * 3 + dx, :]
    return dpad[:, 1:h + 1, 1:w + 1, :]


def encoder_forward(p: ConvEncoderParams, x: np.ndarray):
    """Batched forward on ``(N, size, size, 3)`` input; returns ``(features, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    expected = (p.input_size, p.input_size, CONV_CHANNELS[0])
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"encoder expects (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    cache = []
    a = x
    for layer in p.convs:
        cols = _im2col(a)
        wmat = layer.weight.reshape(layer.weight.shape[0], -1)
        z = cols @ wmat.T + layer.bias
        cache.append((a.shape, cols, z))
        a = gelu(z)
    pooled = a.mean(axis=(1, 2))
    feat = linear_forward(p.head, pooled)
    return feat, (cache, a.shape, pooled)


def encoder_backward(p: ConvEncoderParams, cache, dfeat: np.ndarray, prefix=""):
    """Parameter gradients (named like ``named_params``) for a batched forward."""
    layers, last_shape, pooled = cache
    grads = {}
    dpooled, grads[f"{prefix}head.weight"], grads[f"{prefix}head.bias"] = linear_backward(p.head, pooled, dfeat)
    n, ho, wo, c = last_shape
    da = np.broadcast_to(dpooled[:, None, None, :] / (ho * wo), last_shape)
    for k in range(len(p.convs) - 1, -1, -1):
        layer = p.convs[k]
        in_shape, cols, z = layers[k]
        dz = gelu_backward(z, da)
        cout = layer.weight.shape[0]
        dz2 = dz.reshape(-1, cout)
        grads[f"{prefix}conv{k}.weight"] = (dz2.T @ cols.reshape(dz2.shape[0], -1)).reshape(layer.weight.shape)
        grads[f"{prefix}conv{k}.bias"] = dz2.sum(axis=0)
        if k > 0:
            da = _col2im(dz @ layer.weight.reshape(cout, -1), in_shape)
    return grads


def image_to_input(img: Image) -> np.ndarray:
    if img.channels != 3:
        raise ShapeError(f"encoder input must have 3 channels, got {img.channels}")
    return img.data


def conv_encode(p: ConvEncoderParams, img: Image) -> np.ndarray:
    """Feature vector of one image already resized to the encoder input size."""
    feat, _ = encoder_forward(p, image_to_input(img)[None])
    return feat[0]


def positionwise_concat(P, Q) -> np.ndarray:
    """Interleave along the last axis: ``[p0, q0, p1, q1, ...]``."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ShapeError(f"position-wise concat needs equal shapes, got {P.shape} and {Q.shape}")
    return np.stack([P, Q], axis=-1).reshape(*P.shape[:-1], 2 * P.shape[-1])


def split_positionwise(R):
    """Inverse of ``positionwise_concat`` (also routes gradients back)."""
    R = np.asarray(R)
    return R[..., 0::2], R[..., 1::2]


def concat(P, Q) -> np.ndarray:
    """Append ``Q`` after ``P`` along the last axis."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    return np.concatenate([P, Q], axis=-1)


def project_l1(p: LinearParams, fused) -> np.ndarray:
    return linear_forward(p, fused)
