"""Neural-network layers on top of the autodiff Tensor.

Layers hold their parameters as Tensors and are callable as
``layer(x, mode="train", rng=rng)``. Shapes are NCHW for spatial layers.
"""

from __future__ import annotations

import numpy as np

from .tensor import GraphError, Tensor

TRAIN = "train"
EVAL = "eval"


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise GraphError(
            f"convolution over size {size} with kernel {kernel}, stride {stride}, "
            f"padding {padding} yields non-positive output {out}"
        )
    return out


def tconv_out_size(size: int, kernel: int, stride: int, padding: int, output_padding: int) -> int:
    out = (size - 1) * stride - 2 * padding + kernel + output_padding
    if out <= 0:
        raise GraphError("transposed convolution yields non-positive output")
    return out


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base class: parameter/buffer bookkeeping shared by all layers."""

    def __init__(self, name: str):
        self.name = name

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def __call__(self, x: Tensor, mode: str = EVAL, rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, name: str = "dense"):
        super().__init__(name)
        if in_features <= 0 or out_features <= 0:
            raise GraphError(f"{name}: feature sizes must be positive")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            _fan_in_uniform(rng, (in_features, out_features), in_features),
            requires_grad=True, name=f"{name}.weight",
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def __call__(self, x, mode=EVAL, rng=None):
        if x.shape[-1] != self.in_features:
            raise GraphError(
                f"{self.name}: expected input with {self.in_features} features, "
                f"got shape {x.shape}"
            )
        return x @ self.weight + self.bias


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int,
                 padding: int, rng: np.random.Generator, name: str = "conv",
                 bias: bool = True):
        super().__init__(name)
        if min(in_channels, out_channels, kernel, stride) <= 0 or padding < 0:
            raise GraphError(f"{name}: invalid geometry")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(
            _fan_in_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in),
            requires_grad=True, name=f"{name}.weight",
        )
        # a following batchnorm cancels any bias exactly, so such convs go bias-free
        self.bias = (Tensor(np.zeros(out_channels), requires_grad=True, name=f"{name}.bias")
                     if bias else None)

    def parameters(self):
        out = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            out[f"{self.name}.bias"] = self.bias
        return out

    def __call__(self, x, mode=EVAL, rng=None):
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise GraphError(
                f"{self.name}: expected (B,{self.in_channels},H,W), got shape {x.shape}"
            )
        return x.conv2d(self.weight, self.bias, self.stride, self.padding)


class TransposedConv2d(Layer):
    """Transposed convolution built from dilation + padding + flipped conv."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int,
                 padding: int, output_padding: int, rng: np.random.Generator,
                 name: str = "tconv", bias: bool = True):
        super().__init__(name)
        if min(in_channels, out_channels, kernel, stride) <= 0 or padding < 0 or output_padding < 0:
            raise GraphError(f"{name}: invalid geometry")
        if output_padding >= stride:
            raise GraphError(f"{name}: output_padding must be < stride")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(
            _fan_in_uniform(rng, (in_channels, out_channels, kernel, kernel), fan_in),
            requires_grad=True, name=f"{name}.weight",
        )
        self.bias = (Tensor(np.zeros(out_channels), requires_grad=True, name=f"{name}.bias")
                     if bias else None)

    def parameters(self):
        out = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            out[f"{self.name}.bias"] = self.bias
        return out

    def __call__(self, x, mode=EVAL, rng=None):
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise GraphError(
                f"{self.name}: expected (B,{self.in_channels},H,W), got shape {x.shape}"
            )
        pad = self.kernel - 1 - self.padding
        if pad < 0:
            raise GraphError(f"{self.name}: padding exceeds kernel-1")
        y = x.dilate2d(self.stride)
        y = y.pad2d(pad, pad + self.output_padding, pad, pad + self.output_padding)
        # (IC,OC,kh,kw) -> flipped (OC,IC,kh,kw) turns transposed conv into a plain conv
        w = self.weight.flip((2, 3)).transpose(1, 0, 2, 3)
        return y.conv2d(w, self.bias, 1, 0)


class BatchNorm(Layer):
    """Batch normalization over features (2D input) or channels (4D input)."""

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5,
                 name: str = "bn"):
        super().__init__(name)
        if num_features <= 0:
            raise GraphError(f"{name}: num_features must be positive")
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(num_features), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def parameters(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def buffers(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def __call__(self, x, mode=EVAL, rng=None):
        spatial = x.data.ndim == 4
        if spatial:
            if x.shape[1] != self.num_features:
                raise GraphError(f"{self.name}: expected {self.num_features} channels, got {x.shape}")
            axes = (0, 2, 3)
            pshape = (1, self.num_features, 1, 1)
        else:
            if x.shape[-1] != self.num_features:
                raise GraphError(f"{self.name}: expected {self.num_features} features, got {x.shape}")
            axes = (0,)
            pshape = (1, self.num_features)

        if mode == TRAIN:
            mu = x.mean(axis=axes, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=axes, keepdims=True)
            n = x.data.size // self.num_features
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mu.data.reshape(self.num_features)
            unbiased = var.data.reshape(self.num_features) * (n / max(n - 1, 1))
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * unbiased
            xhat = centered / (var + self.eps).sqrt()
        else:
            mu = Tensor(self.running_mean.reshape(pshape))
            var = Tensor(self.running_var.reshape(pshape))
            xhat = (x - mu) / (var + self.eps).sqrt()
        return xhat * self.gamma.reshape(pshape) + self.beta.reshape(pshape)


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        super().__init__(name)

    def __call__(self, x, mode=EVAL, rng=None):
        return x.relu()


class Sigmoid(Layer):
    def __init__(self, name: str = "sigmoid"):
        super().__init__(name)

    def __call__(self, x, mode=EVAL, rng=None):
        return x.sigmoid()


class Dropout(Layer):
    """Inverted dropout: scales kept units by 1/keep so eval is the identity."""

    def __init__(self, rate: float, name: str = "dropout"):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise GraphError(f"{name}: rate must be in [0,1), got {rate}")
        self.rate = rate

    def __call__(self, x, mode=EVAL, rng=None):
        if mode != TRAIN or self.rate == 0.0:
            return x
        if rng is None:
            raise GraphError(f"{self.name}: train mode needs an rng")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep) / keep
        return x * Tensor(mask)


class MaxPool2d(Layer):
    def __init__(self, window: int, name: str = "maxpool"):
        super().__init__(name)
        if window <= 0:
            raise GraphError(f"{name}: window must be positive")
        self.window = window

    def __call__(self, x, mode=EVAL, rng=None):
        return x.maxpool2d(self.window)


class Sequential(Layer):
    def __init__(self, layers: list[Layer], name: str = "seq"):
        super().__init__(name)
        self.layers = list(layers)

    def parameters(self):
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out

    def buffers(self):
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def __call__(self, x, mode=EVAL, rng=None):
        for layer in self.layers:
            x = layer(x, mode=mode, rng=rng)
        return x
