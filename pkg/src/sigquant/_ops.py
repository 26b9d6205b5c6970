"""Array kernels shared by the training engine and the inference path."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_hw(h, w, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def im2col(x, k, stride=1, pad=0):
    """(N, C, H, W) -> (N*Ho*Wo, C*k*k) patch matrix, row-major over (n, i, j)."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k), (ho, wo)


def col2im(dcols, x_shape, k, stride=1, pad=0):
    n, c, h, w = x_shape
    ho, wo = conv_output_hw(h, w, k, stride, pad)
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[..., i, j]
    return dx[:, :, pad:pad + h, pad:pad + w]


def conv2d(x, weight2d, k, stride, pad):
    """Convolution as a patch-matrix product; ``weight2d`` is (out, C*k*k)."""
    cols, (ho, wo) = im2col(x, k, stride, pad)
    out = cols @ weight2d.T
    return out.reshape(x.shape[0], ho, wo, -1).transpose(0, 3, 1, 2), cols


def maxpool_forward(x, s):
    n, c, h, w = x.shape
    ho, wo = h // s, w // s
    win = (x[:, :, :ho * s, :wo * s]
           .reshape(n, c, ho, s, wo, s)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, ho, wo, s * s))
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dy, idx, x_shape, s):
    n, c, h, w = x_shape
    ho, wo = h // s, w // s
    d = np.zeros((n, c, ho, wo, s * s), dtype=dy.dtype)
    np.put_along_axis(d, idx[..., None], dy[..., None], axis=-1)
    d = d.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, :ho * s, :wo * s] = d
    return dx


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
