"""Configurable-depth U-Net with an explicit forward/backward pass."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import layers as L

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    width: int = 16
    in_channels: int = 3
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    def stage_channels(self, k: int) -> int:
        return self.width * 2 ** k

    def check_patch(self, size: int) -> None:
        div = 2 ** self.depth
        if size % div:
            raise ValueError(f"patch side {size} is not divisible by 2^depth = {div}")


class UNet:
    """Encoder/decoder network holding its parameters and caches.

    Parameter names follow ``<block>.<layer>.<kind>``:

    * ``enc{k}`` for k in ``0..depth-1``, ``bottleneck``, ``dec{k}`` for the
      decoder stage that restores resolution k, and ``head``.
    * double-conv blocks own ``conv1``/``bn1``/``conv2``/``bn2``; decoder
      stages also own ``up`` (the 2x2 transposed convolution).

    Batch-norm running statistics live in :attr:`buffers`, not in
    :attr:`params`, and are excluded from :func:`count_parameters`.
    """

    def __init__(self, config: UNetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.training = True
        self._cache = None
        self._init_params(np.random.default_rng(seed))

    # -- construction ---------------------------------------------------------

    def _add_conv(self, name, out_c, in_c, k, rng):
        bound = 1.0 / np.sqrt(in_c * k * k)
        self.params[f"{name}.weight"] = rng.uniform(-bound, bound, (out_c, in_c, k, k)).astype(self.dtype)
        self.params[f"{name}.bias"] = np.zeros(out_c, dtype=self.dtype)

    def _add_bn(self, name, c):
        self.params[f"{name}.gamma"] = np.ones(c, dtype=self.dtype)
        self.params[f"{name}.beta"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=self.dtype)

    def _add_double(self, block, in_c, out_c, rng):
        self._add_conv(f"{block}.conv1", out_c, in_c, 3, rng)
        self._add_bn(f"{block}.bn1", out_c)
        self._add_conv(f"{block}.conv2", out_c, out_c, 3, rng)
        self._add_bn(f"{block}.bn2", out_c)

    def _init_params(self, rng):
        cfg = self.config
        c_in = cfg.in_channels
        for k in range(cfg.depth):
            self._add_double(f"enc{k}", c_in, cfg.stage_channels(k), rng)
            c_in = cfg.stage_channels(k)
        self._add_double("bottleneck", c_in, cfg.stage_channels(cfg.depth), rng)
        for k in reversed(range(cfg.depth)):
            hi, lo = cfg.stage_channels(k + 1), cfg.stage_channels(k)
            bound = 1.0 / np.sqrt(hi * 4)
            self.params[f"dec{k}.up.weight"] = rng.uniform(-bound, bound, (hi, lo, 2, 2)).astype(self.dtype)
            self.params[f"dec{k}.up.bias"] = np.zeros(lo, dtype=self.dtype)
            self._add_double(f"dec{k}", 2 * lo, lo, rng)
        self._add_conv("head", cfg.out_channels, cfg.stage_channels(0), 1, rng)

    # -- mode / dtype ----------------------------------------------------------

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def astype(self, dtype) -> "UNet":
        """Copy of the model with every array cast to ``dtype``."""
        other = UNet.__new__(UNet)
        other.config = self.config
        other.dtype = np.dtype(dtype)
        other.params = OrderedDict((k, v.astype(dtype)) for k, v in self.params.items())
        other.buffers = OrderedDict((k, v.astype(dtype)) for k, v in self.buffers.items())
        other.grads = OrderedDict()
        other.training = self.training
        other._cache = None
        return other

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Copies of all parameters and buffers, keyed by name."""
        out = OrderedDict((k, v.copy()) for k, v in self.params.items())
        out.update((k, v.copy()) for k, v in self.buffers.items())
        return out

    def load_state(self, state) -> None:
        for k in self.params:
            self.params[k][...] = state[k]
        for k in self.buffers:
            self.buffers[k][...] = state[k]

    # -- forward -----------------------------------------------------------------

    def _conv_bn_relu(self, x, name, bn, caches):
        p, b = self.params, self.buffers
        z, cols = L.conv3x3_forward(x, p[f"{name}.weight"], p[f"{name}.bias"])
        y, bn_cache = L.bn_forward(
            z, p[f"{bn}.gamma"], p[f"{bn}.beta"], b[f"{bn}.running_mean"], b[f"{bn}.running_var"],
            self.training, BN_MOMENTUM, BN_EPS,
        )
        out = np.maximum(y, 0)
        if caches is not None:
            caches.append((name, bn, x.shape, cols, bn_cache, out))
        return out

    def _double(self, x, block, caches):
        x = self._conv_bn_relu(x, f"{block}.conv1", f"{block}.bn1", caches)
        return self._conv_bn_relu(x, f"{block}.conv2", f"{block}.bn2", caches)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Map an ``N x in_channels x P x P`` batch to ``N x out_channels x P x P``.

        Training-mode calls keep the activations needed by :meth:`backward`;
        evaluation-mode calls touch no model state.
        """
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise L.ShapeError(f"expected N x {cfg.in_channels} x H x W input, got {x.shape}")
        cfg.check_patch(x.shape[2])
        cfg.check_patch(x.shape[3])
        h = L.swap_nc(x.astype(self.dtype, copy=False))
        keep = self.training
        cache = {"blocks": {}, "pool": [], "up": []} if keep else None

        def blk(name):
            if not keep:
                return None
            cache["blocks"][name] = []
            return cache["blocks"][name]

        skips = []
        for k in range(cfg.depth):
            h = self._double(h, f"enc{k}", blk(f"enc{k}"))
            skips.append(h)
            h, arg = L.maxpool2_forward(h)
            if keep:
                cache["pool"].append(arg)
        h = self._double(h, "bottleneck", blk("bottleneck"))
        for k in reversed(range(cfg.depth)):
            up = L.upconv_forward(h, self.params[f"dec{k}.up.weight"], self.params[f"dec{k}.up.bias"])
            if keep:
                cache["up"].append(h)
            h = L.concat_skip(up, skips[k], axis=0)
            h = self._double(h, f"dec{k}", blk(f"dec{k}"))
        out = L.conv1x1_forward(h, self.params["head.weight"], self.params["head.bias"])
        if keep:
            cache["head_in"] = h
            self._cache = cache
        return L.swap_nc(out)

    __call__ = forward

    # -- backward ----------------------------------------------------------------

    def _double_backward(self, g, block, grads):
        for name, bn, x_shape, cols, bn_cache, out in reversed(self._cache["blocks"][block]):
            g = g * (out > 0)
            g, grads[f"{bn}.gamma"], grads[f"{bn}.beta"] = L.bn_backward(g, bn_cache)
            g, grads[f"{name}.weight"], grads[f"{name}.bias"] = L.conv3x3_backward(
                g, x_shape, self.params[f"{name}.weight"], cols
            )
        return g

    def backward(self, grad_out: np.ndarray) -> "OrderedDict[str, np.ndarray]":
        """Back-propagate ``dLoss/dOutput`` (NCHW); fills and returns :attr:`grads`."""
        if self._cache is None:
            raise RuntimeError("backward called without a training-mode forward pass")
        cfg = self.config
        cache = self._cache
        grads = {}
        g = L.swap_nc(np.asarray(grad_out, dtype=self.dtype))
        g, grads["head.weight"], grads["head.bias"] = L.conv1x1_backward(
            g, cache["head_in"], self.params["head.weight"]
        )
        skip_grads = [None] * cfg.depth
        ups = list(cache["up"])
        for k in range(cfg.depth):
            g = self._double_backward(g, f"dec{k}", grads)
            g_up, skip_grads[k] = L.concat_skip_backward(g, cfg.stage_channels(k), axis=0)
            h = ups.pop()
            g, grads[f"dec{k}.up.weight"], grads[f"dec{k}.up.bias"] = L.upconv_backward(
                g_up, h, self.params[f"dec{k}.up.weight"]
            )
        g = self._double_backward(g, "bottleneck", grads)
        for k in reversed(range(cfg.depth)):
            g = L.maxpool2_backward_cm(g, cache["pool"][k]) + skip_grads[k]
            g = self._double_backward(g, f"enc{k}", grads)
        self.grads = OrderedDict((name, grads[name].astype(self.dtype, copy=False)) for name in self.params)
        self._cache = None
        return self.grads


def build_unet(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNet:
    return UNet(config, seed=seed, dtype=dtype)


def count_parameters(model_or_config) -> int:
    """Trainable parameter count: conv weights and biases plus batch-norm gamma/beta.

    Running statistics are not counted. This convention reproduces the
    published totals (e.g. 1,944,049 for depth 4, width 16).
    """
    if isinstance(model_or_config, UNetConfig):
        cfg = model_or_config
        total = 0

        def double(a, b):
            return (a * 9 + 1 + 2) * b + (b * 9 + 1 + 2) * b

        c = cfg.in_channels
        for k in range(cfg.depth):
            total += double(c, cfg.stage_channels(k))
            c = cfg.stage_channels(k)
        total += double(c, cfg.stage_channels(cfg.depth))
        for k in range(cfg.depth):
            hi, lo = cfg.stage_channels(k + 1), cfg.stage_channels(k)
            total += hi * lo * 4 + lo + double(2 * lo, lo)
        total += cfg.stage_channels(0) * cfg.out_channels + cfg.out_channels
        return total
    return int(sum(v.size for v in model_or_config.params.values()))
