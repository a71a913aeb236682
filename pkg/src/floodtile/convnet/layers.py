"""Forward/backward kernels for the layers a U-Net needs.

The kernels work on channel-major ``C x N x H x W`` arrays: every image row
stays contiguous, so the 3x3 patch gather is cheap and each convolution is a
single large matrix product. The public functions at the bottom of the module
(``conv2d``, ``batchnorm``, ...) take the usual ``N x C x H x W`` layout and
transpose around the kernels.

Every kernel keeps the dtype of its input, so the same code runs in float32
for training and in float64 for finite-difference checks.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


# --- 3x3 convolution, stride 1, zero padding 1 -------------------------------

def im2col3(x: np.ndarray) -> np.ndarray:
    c, n, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((9, c, n, h, w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[dy * 3 + dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(9 * c, n * h * w)


def col2im3(gcols: np.ndarray, shape) -> np.ndarray:
    c, n, h, w = shape
    g = gcols.reshape(9, c, n, h, w)
    gxp = np.zeros((c, n, h + 2, w + 2), dtype=gcols.dtype)
    for dy in range(3):
        for dx in range(3):
            gxp[:, :, dy:dy + h, dx:dx + w] += g[dy * 3 + dx]
    return gxp[:, :, 1:-1, 1:-1]


def kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """``(out_c, in_c, 3, 3)`` kernel as an ``(out_c, 9 * in_c)`` matrix matching :func:`im2col3`."""
    out_c, in_c = kernel.shape[:2]
    return kernel.transpose(0, 2, 3, 1).reshape(out_c, 9 * in_c)


def conv3x3_forward(x, kernel, bias):
    """Channel-major 3x3 convolution. Returns ``(out, cols)``."""
    c, n, h, w = x.shape
    out_c = kernel.shape[0]
    if kernel.shape[1:] != (c, 3, 3):
        raise ShapeError(f"channel mismatch: input has {c} channels, kernel is {kernel.shape}")
    cols = im2col3(x)
    out = kernel_matrix(kernel) @ cols
    out += bias[:, None]
    return out.reshape(out_c, n, h, w), cols


def conv3x3_backward(grad_out, x_shape, kernel, cols):
    c, n, h, w = x_shape
    out_c = kernel.shape[0]
    if grad_out.shape != (out_c, n, h, w):
        raise ShapeError(f"shape mismatch: grad {grad_out.shape} vs expected {(out_c, n, h, w)}")
    g = grad_out.reshape(out_c, -1)
    grad_bias = g.sum(axis=1)
    grad_kernel = (g @ cols.T).reshape(out_c, 3, 3, c).transpose(0, 3, 1, 2)
    grad_input = col2im3(kernel_matrix(kernel).T @ g, x_shape)
    return grad_input, np.ascontiguousarray(grad_kernel), grad_bias


# --- 1x1 convolution (output head) ---------------------------------------------

def conv1x1_forward(x, kernel, bias):
    c, n, h, w = x.shape
    out_c = kernel.shape[0]
    if kernel.shape[1] != c:
        raise ShapeError(f"channel mismatch: input has {c} channels, kernel is {kernel.shape}")
    out = kernel.reshape(out_c, c) @ x.reshape(c, -1)
    out += bias[:, None]
    return out.reshape(out_c, n, h, w)


def conv1x1_backward(grad_out, x, kernel):
    c = x.shape[0]
    out_c = kernel.shape[0]
    g = grad_out.reshape(out_c, -1)
    xf = x.reshape(c, -1)
    grad_kernel = (g @ xf.T).reshape(kernel.shape)
    grad_input = (kernel.reshape(out_c, c).T @ g).reshape(x.shape)
    return grad_input, grad_kernel, g.sum(axis=1)


# --- batch normalization -------------------------------------------------------

def bn_forward(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Channel-major batch normalization. Returns ``(out, cache)``.

    Training mode normalizes with the batch statistics and updates the
    running buffers in place; the running variance uses the unbiased estimate.
    """
    c = x.shape[0]
    if gamma.shape != (c,):
        raise ShapeError(f"channel mismatch: input has {c} channels, gamma {gamma.shape}")
    flat = x.reshape(c, -1)
    if training:
        mean = flat.mean(axis=1)
        var = flat.var(axis=1)
        m = flat.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (flat - mean.astype(x.dtype)[:, None]) * inv_std[:, None]
    out = xhat * gamma[:, None] + beta[:, None]
    return out.reshape(x.shape), (xhat, inv_std, gamma, training)


def bn_backward(grad_out, cache):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, training = cache
    c = xhat.shape[0]
    g = grad_out.reshape(c, -1)
    grad_beta = g.sum(axis=1)
    grad_gamma = np.einsum("ij,ij->i", g, xhat)
    scale = (gamma * inv_std)[:, None]
    if not training:
        return (g * scale).reshape(grad_out.shape), grad_gamma, grad_beta
    m = xhat.shape[1]
    # d/dx of gamma * xhat under batch statistics
    grad_input = (scale / m) * (m * g - grad_beta[:, None] - xhat * grad_gamma[:, None])
    return grad_input.reshape(grad_out.shape), grad_gamma, grad_beta


# --- pooling -------------------------------------------------------------------

def maxpool2_forward(x):
    """2x2 max pooling with stride 2. Ties route to the first cell in row order."""
    c, n, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(c, n, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(c, n, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool2_backward_cm(grad_out, arg):
    c, n, h2, w2 = grad_out.shape
    blocks = np.zeros((c, n, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, arg[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    return blocks.reshape(c, n, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(c, n, 2 * h2, 2 * w2)


# --- 2x2 stride-2 transposed convolution ---------------------------------------

def upconv_forward(x, kernel, bias):
    """Up-convolution with an ``(in_c, out_c, 2, 2)`` kernel; doubles H and W."""
    c, n, h, w = x.shape
    if kernel.shape[0] != c or kernel.shape[2:] != (2, 2):
        raise ShapeError(f"shape mismatch: input has {c} channels, kernel is {kernel.shape}")
    out_c = kernel.shape[1]
    kmat = kernel.transpose(1, 2, 3, 0).reshape(out_c * 4, c)
    y = (kmat @ x.reshape(c, -1)).reshape(out_c, 2, 2, n, h, w)
    y = y.transpose(0, 3, 4, 1, 5, 2).reshape(out_c, n, 2 * h, 2 * w)
    y += bias[:, None, None, None]
    return y


def upconv_backward(grad_out, x, kernel):
    c, n, h, w = x.shape
    out_c = kernel.shape[1]
    if grad_out.shape != (out_c, n, 2 * h, 2 * w):
        raise ShapeError(f"shape mismatch: grad {grad_out.shape}")
    g = grad_out.reshape(out_c, n, h, 2, w, 2).transpose(0, 3, 5, 1, 2, 4).reshape(out_c * 4, -1)
    kmat = kernel.transpose(1, 2, 3, 0).reshape(out_c * 4, c)
    grad_input = (kmat.T @ g).reshape(x.shape)
    grad_kernel = (g @ x.reshape(c, -1).T).reshape(out_c, 2, 2, c).transpose(3, 0, 1, 2)
    return grad_input, np.ascontiguousarray(grad_kernel), grad_out.reshape(out_c, -1).sum(axis=1)


# --- NCHW entry points ---------------------------------------------------------

def swap_nc(x):
    """NCHW <-> CNHW (the transpose is its own inverse)."""
    return np.ascontiguousarray(np.asarray(x).transpose(1, 0, 2, 3))


def _check4(x, name="input"):
    if np.ndim(x) != 4:
        raise ShapeError(f"{name} must be N x C x H x W, got shape {np.shape(x)}")


def conv2d(x, kernel, bias):
    """Resolution-preserving 3x3 convolution with zero padding of one cell.

    Parameters
    ----------
    x : ndarray, shape (N, C, H, W)
    kernel : ndarray, shape (out_c, C, 3, 3)
    bias : ndarray, shape (out_c,)
    """
    _check4(x)
    return swap_nc(conv3x3_forward(swap_nc(x), kernel, bias)[0])


def conv2d_backward(grad_out, x, kernel):
    """Gradients of :func:`conv2d` given the forward input.

    Returns ``(grad_input, grad_kernel, grad_bias)``.
    """
    _check4(x)
    _check4(grad_out, "grad_out")
    xl = swap_nc(x)
    gi, gk, gb = conv3x3_backward(swap_nc(grad_out), xl.shape, kernel, im2col3(xl))
    return swap_nc(gi), gk, gb


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    _check4(x)
    out, _ = bn_forward(swap_nc(x), gamma, beta, running_mean, running_var, training, momentum, eps)
    return swap_nc(out)


def batchnorm_backward(grad_out, x, gamma, running_mean, running_var, training, eps=1e-5):
    """Gradient of :func:`batchnorm` recomputed from its input (running buffers are not touched)."""
    rm, rv = running_mean.copy(), running_var.copy()
    _, cache = bn_forward(swap_nc(x), gamma, np.zeros_like(gamma), rm, rv, training, 0.0, eps)
    gi, gg, gb = bn_backward(swap_nc(grad_out), cache)
    return swap_nc(gi), gg, gb


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def maxpool2(x):
    """2x2/stride-2 max pooling on NCHW input. Returns ``(out, argmax)``."""
    _check4(x)
    out, arg = maxpool2_forward(swap_nc(x))
    return swap_nc(out), arg


def maxpool2_backward(grad_out, argmax):
    return swap_nc(maxpool2_backward_cm(swap_nc(grad_out), argmax))


def transposed_conv2(x, kernel, bias):
    """2x2 stride-2 up-convolution; output H and W are exactly doubled."""
    _check4(x)
    return swap_nc(upconv_forward(swap_nc(x), kernel, bias))


def transposed_conv2_backward(grad_out, x, kernel):
    gi, gk, gb = upconv_backward(swap_nc(grad_out), swap_nc(x), kernel)
    return swap_nc(gi), gk, gb


def concat_skip(decoder_feat, encoder_feat, axis=1):
    """Concatenate a skip connection along the channel axis.

    Encoder channels come first, decoder (upsampled) channels second.
    """
    spatial = [i for i in range(decoder_feat.ndim) if i != axis % decoder_feat.ndim]
    if any(decoder_feat.shape[i] != encoder_feat.shape[i] for i in spatial):
        raise ShapeError(f"spatial mismatch: {decoder_feat.shape} vs {encoder_feat.shape}")
    return np.concatenate([encoder_feat, decoder_feat], axis=axis)


def concat_skip_backward(grad_out, encoder_channels, axis=1):
    """Split a concatenation gradient into ``(grad_decoder, grad_encoder)``."""
    enc, dec = np.split(grad_out, [encoder_channels], axis=axis)
    return dec, enc
