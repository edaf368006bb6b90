"""Layer definitions, initialization, and the patch feature extractor.

The public layer interface works on NCHW activations (batch, channel,
height, width) with OIHW convolution weights. `forward_stack` is the fast
path used during training: it keeps activations NHWC internally and swaps
ReLU past max-pooling (max commutes with any nondecreasing map, so
`relu(pool(x))` is bit-identical to `pool(relu(x))` while touching a quarter
of the elements).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

ACTIVATIONS = ("relu", "tanh", "sigmoid")

LAYER_KINDS = ("conv2d", "maxpool2d", "fully_connected", "activation")


@dataclass
class LayerParams:
    """One layer of the network: its kind, parameters and hyperparameters.

    `activation`, when set on a conv2d or fully_connected layer, is applied
    after the affine map (mirroring rows like "conv(5,1,0)-36 + ReLU").
    """

    kind: str
    name: str
    weight: Tensor | None = None
    bias: Tensor | None = None
    kernel_size: int | None = None
    stride: int | None = None
    padding: int | None = None
    activation: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation is not None and self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r} in layer {self.name}")
        if self.kind == "conv2d":
            if self.weight is None or self.weight.data.ndim != 4:
                raise ConfigError(f"conv2d layer {self.name} needs a 4-D OIHW weight")
            if self.bias is not None and self.bias.data.shape != (self.weight.data.shape[0],):
                raise ConfigError(f"conv2d layer {self.name} bias must be (out_channels,)")
        elif self.kind == "fully_connected":
            if self.weight is None or self.weight.data.ndim != 2:
                raise ConfigError(f"fully_connected layer {self.name} needs a 2-D (out,in) weight")
            if self.bias is not None and self.bias.data.shape != (self.weight.data.shape[0],):
                raise ConfigError(f"fully_connected layer {self.name} bias must be (out_features,)")
        elif self.kind == "maxpool2d":
            if self.kernel_size is None:
                raise ConfigError(f"maxpool2d layer {self.name} needs a kernel size")
        elif self.kind == "activation":
            if self.activation is None:
                raise ConfigError(f"activation layer {self.name} needs an activation name")

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.weight is not None:
            out.append((f"{self.name}.weight", self.weight))
        if self.bias is not None:
            out.append((f"{self.name}.bias", self.bias))
        return out


def apply_activation(x: Tensor, name: str) -> Tensor:
    if name == "relu":
        return T.relu(x)
    if name == "tanh":
        return T.tanh(x)
    if name == "sigmoid":
        return T.sigmoid(x)
    raise ContractError(f"unknown activation {name!r}")


def forward_layer(x: Tensor, params: LayerParams) -> Tensor:
    """Apply one layer to an NCHW (conv/pool) or 2-D (fc) activation."""
    if params.kind == "conv2d":
        if x.data.ndim != 4:
            raise DimensionError(
                f"layer {params.name}: conv2d expects 4-D NCHW input, got {x.data.shape}")
        if x.data.shape[1] != params.weight.data.shape[1]:
            raise DimensionError(
                f"layer {params.name}: input shape {x.data.shape} does not match "
                f"weight shape {params.weight.data.shape}")
        y = T.conv2d_nhwc(T.permute(x, (0, 2, 3, 1)), params.weight, params.bias,
                          stride=params.stride or 1, padding=params.padding or 0,
                          name=params.name)
        y = T.permute(y, (0, 3, 1, 2))
        return apply_activation(y, params.activation) if params.activation else y
    if params.kind == "maxpool2d":
        if x.data.ndim != 4:
            raise DimensionError(
                f"layer {params.name}: maxpool2d expects 4-D NCHW input, got {x.data.shape}")
        y = T.maxpool2d_nhwc(T.permute(x, (0, 2, 3, 1)), kernel=params.kernel_size,
                             stride=params.stride, name=params.name)
        return T.permute(y, (0, 3, 1, 2))
    if params.kind == "fully_connected":
        if x.data.ndim != 2:
            raise DimensionError(
                f"layer {params.name}: fully_connected expects 2-D input, got {x.data.shape}")
        if x.data.shape[1] != params.weight.data.shape[1]:
            raise DimensionError(
                f"layer {params.name}: input shape {x.data.shape} does not match "
                f"weight shape {params.weight.data.shape}")
        y = T.matmul(x, T.transpose(params.weight))
        if params.bias is not None:
            y = T.add(y, params.bias)
        return apply_activation(y, params.activation) if params.activation else y
    # kind == "activation"
    return apply_activation(x, params.activation)


def forward_stack(x_nhwc: Tensor, layers: list[LayerParams]) -> Tensor:
    """Run a conv stack on NHWC input without per-layer layout conversions.

    Produces bit-identical results to chaining `forward_layer` (only ReLU is
    reordered past pooling, which is exact).
    """
    x = x_nhwc
    pending_relu = False
    for i, layer in enumerate(layers):
        if layer.kind == "conv2d":
            x = T.conv2d_nhwc(x, layer.weight, layer.bias,
                              stride=layer.stride or 1, padding=layer.padding or 0,
                              name=layer.name)
            nxt = layers[i + 1] if i + 1 < len(layers) else None
            if layer.activation == "relu" and nxt is not None and nxt.kind == "maxpool2d":
                pending_relu = True
            elif layer.activation:
                x = apply_activation(x, layer.activation)
        elif layer.kind == "maxpool2d":
            x = T.maxpool2d_nhwc(x, kernel=layer.kernel_size, stride=layer.stride,
                                 name=layer.name)
            if pending_relu:
                x = T.relu(x)
                pending_relu = False
        elif layer.kind == "fully_connected":
            if x.data.ndim == 4:
                x = T.flatten_nchw(x)
            x = forward_layer(x, layer)
        else:
            x = apply_activation(x, layer.activation)
    return x


# -- initialization ------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def conv_layer(rng: np.random.Generator, name: str, in_channels: int, out_channels: int,
               kernel_size: int, stride: int = 1, padding: int = 0,
               activation: str | None = None, dtype=np.float32) -> LayerParams:
    fan_in = in_channels * kernel_size * kernel_size
    fan_out = out_channels * kernel_size * kernel_size
    w = glorot_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                       fan_in, fan_out, dtype)
    b = np.zeros(out_channels, dtype=dtype)
    return LayerParams("conv2d", name, Tensor(w, requires_grad=True),
                       Tensor(b, requires_grad=True), kernel_size=kernel_size,
                       stride=stride, padding=padding, activation=activation)


def fc_layer(rng: np.random.Generator, name: str, in_features: int, out_features: int,
             activation: str | None = None, dtype=np.float32) -> LayerParams:
    w = glorot_uniform(rng, (out_features, in_features), in_features, out_features, dtype)
    b = np.zeros(out_features, dtype=dtype)
    return LayerParams("fully_connected", name, Tensor(w, requires_grad=True),
                       Tensor(b, requires_grad=True), activation=activation)


def pool_layer(name: str, kernel_size: int = 2, stride: int | None = None) -> LayerParams:
    return LayerParams("maxpool2d", name, kernel_size=kernel_size,
                       stride=stride if stride is not None else kernel_size)


def conv_output_hw(hw: int, kernel: int, stride: int, padding: int) -> int:
    return (hw + 2 * padding - kernel) // stride + 1


def build_extractor(rng: np.random.Generator, patch_hw: int = 60,
                    channels: tuple[int, int, int] = (36, 36, 48),
                    feature_dim: int = 512, kernel_size: int = 5,
                    dtype=np.float32) -> list[LayerParams]:
    """Three conv(k,1,0)+ReLU / maxpool(2,2) blocks followed by fc+ReLU.

    With 60x60 patches the spatial trace is 60 -> 56 -> 28 -> 24 -> 12 -> 8
    -> 4, so the flattened input to the fully connected layer is
    48*4*4 = 768 values (channel-major order).
    """
    layers: list[LayerParams] = []
    hw = patch_hw
    in_ch = 1
    for i, out_ch in enumerate(channels, start=1):
        hw = conv_output_hw(hw, kernel_size, 1, 0)
        if hw < 1:
            raise ConfigError(f"patch size {patch_hw} too small for conv block {i}")
        layers.append(conv_layer(rng, f"conv{i}", in_ch, out_ch, kernel_size,
                                 activation="relu", dtype=dtype))
        layers.append(pool_layer(f"pool{i}", 2, 2))
        hw //= 2
        if hw < 1:
            raise ConfigError(f"patch size {patch_hw} too small for pool block {i}")
        in_ch = out_ch
    flat = in_ch * hw * hw
    layers.append(fc_layer(rng, "fc1", flat, feature_dim, activation="relu", dtype=dtype))
    return layers


def build_toy_extractor(rng: np.random.Generator, patch_hw: int = 12,
                        feature_dim: int = 8, dtype=np.float64) -> list[LayerParams]:
    """Miniature extractor for fast end-to-end gradient checks."""
    hw = conv_output_hw(patch_hw, 3, 1, 0) // 2
    return [
        conv_layer(rng, "conv1", 1, 4, 3, activation="relu", dtype=dtype),
        pool_layer("pool1", 2, 2),
        fc_layer(rng, "fc1", 4 * hw * hw, feature_dim, activation="relu", dtype=dtype),
    ]


# -- patch normalization --------------------------------------------------


def minmax_normalize(patch):
    """Affine-map a patch onto [0, 1]; a constant patch maps to all zeros.

    Accepts a numpy array or a Tensor and returns the same kind. The output
    is detached: normalization happens before any differentiable computation.
    """
    arr = patch.data if isinstance(patch, Tensor) else np.asarray(patch)
    if arr.size == 0:
        raise ContractError("cannot normalize an empty patch")
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        out = np.zeros_like(arr)
    else:
        out = (arr - lo) / (hi - lo)
    return Tensor(out) if isinstance(patch, Tensor) else out
