"""
Toy convolutional backbone plus the four detection heads (PIP, PIP+NRM,
MAP heatmaps, COORD regression) and the two score-only auxiliary heads used
by curriculum self-training.

A `NetworkGraph` is a trunk of layers producing the "feature" tap and a set
of named branches, each reading one existing tap and producing a new one.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import landmark_codec as codec
from .exceptions import ConfigurationError, ShapeError
from .schemas import BackboneConfig, HeadConfig, HeadKind
from .tensor_engine import (
    SeededRng,
    Tensor,
    add,
    conv2d,
    conv_output_size,
    deconv2d,
    deconv_output_size,
    dense,
    global_avg_pool,
    he_normal,
    mul,
    relu,
    zeros,
)

logger = logging.getLogger(__name__)

COORD_HIDDEN = 64

# tap names
FEATURE = "feature"
SCORE = "score"
OFFSET = "offset"
NEIGHBOR = "neighbor"
HEATMAP = "heatmap"
COORDS = "coords"
AUX_FEATURE_MID = "aux_feature_mid"
AUX_SCORE_MID = "aux_score_mid"
AUX_FEATURE_COARSE = "aux_feature_coarse"
AUX_SCORE_COARSE = "aux_score_coarse"


# --- layers ---

class Layer:
    kind = "layer"

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def parameters(self) -> dict[str, Tensor]:
        return {}


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, pad: int, rng: SeededRng, dtype=np.float32):
        self.in_ch, self.out_ch, self.kernel, self.stride, self.pad = in_ch, out_ch, kernel, stride, pad
        self.weight = he_normal((out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, rng, dtype)
        self.bias = zeros((out_ch,), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} channels, got {c}")
        return (self.out_ch,
                conv_output_size(h, self.kernel, self.stride, self.pad),
                conv_output_size(w, self.kernel, self.stride, self.pad))

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class Deconv2d(Layer):
    kind = "deconv"

    def __init__(self, in_ch: int, out_ch: int, rng: SeededRng, kernel: int = 4, stride: int = 2, pad: int = 1,
                 dtype=np.float32):
        self.in_ch, self.out_ch, self.kernel, self.stride, self.pad = in_ch, out_ch, kernel, stride, pad
        fan_in = max(1, in_ch * kernel * kernel // (stride * stride))
        self.weight = he_normal((in_ch, out_ch, kernel, kernel), fan_in, rng, dtype)
        self.bias = zeros((out_ch,), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return deconv2d(x, self.weight, self.bias, self.stride, self.pad)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_ch:
            raise ShapeError(f"deconv expects {self.in_ch} channels, got {c}")
        return (self.out_ch,
                deconv_output_size(h, self.kernel, self.stride, self.pad),
                deconv_output_size(w, self.kernel, self.stride, self.pad))

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class Dense(Layer):
    kind = "dense"

    def __init__(self, d_in: int, d_out: int, rng: SeededRng, dtype=np.float32):
        self.d_in, self.d_out = d_in, d_out
        self.weight = he_normal((d_out, d_in), d_in, rng, dtype)
        self.bias = zeros((d_out,), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)

    def output_shape(self, in_shape):
        if in_shape != (self.d_in,):
            raise ShapeError(f"dense expects ({self.d_in},), got {in_shape}")
        return (self.d_out,)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: Tensor) -> Tensor:
        return relu(x)


class GlobalAvgPool(Layer):
    kind = "pool"

    def forward(self, x: Tensor) -> Tensor:
        return global_avg_pool(x)

    def output_shape(self, in_shape):
        return (in_shape[0],)


class ChannelAffine(Layer):
    """Per-channel scale and shift; no running statistics."""
    kind = "affine"

    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True, dtype=dtype)
        self.beta = zeros((1, channels, 1, 1), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return add(mul(x, self.gamma), self.beta)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}


# --- graph ---

@dataclass
class Branch:
    source: str
    layers: list[tuple[str, Layer]]
    stride: Optional[int] = None


@dataclass
class NetworkGraph:
    backbone_cfg: BackboneConfig
    dtype: type = np.float32
    trunk: list[tuple[str, Layer]] = field(default_factory=list)
    branches: dict[str, Branch] = field(default_factory=dict)
    tap_shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    tap_strides: dict[str, int] = field(default_factory=dict)
    head_kind: Optional[HeadKind] = None
    head_cfg: Optional[HeadConfig] = None
    neighbor_table: Optional[codec.NeighborTable] = None
    map_stride: Optional[int] = None
    with_aux: bool = False

    @property
    def input_shape(self) -> tuple[int, int, int]:
        cfg = self.backbone_cfg
        return (cfg.in_channels, cfg.input_size, cfg.input_size)

    @property
    def stride(self) -> int:
        return self.tap_strides[FEATURE]

    def named_layers(self) -> Iterator[tuple[str, str, Layer]]:
        """(group, name, layer) in execution order; group is "backbone" or the branch's tap."""
        for name, layer in self.trunk:
            yield "backbone", name, layer
        for tap, branch in self.branches.items():
            for name, layer in branch.layers:
                yield tap, name, layer

    def layer_shapes(self) -> Iterator[tuple[str, str, Layer, tuple[int, ...], tuple[int, ...]]]:
        """Per-sample input/output shape of every layer, derived without running the network."""
        shapes = {}
        shape = self.input_shape
        for name, layer in self.trunk:
            out = layer.output_shape(shape)
            yield "backbone", name, layer, shape, out
            shape = out
        shapes[FEATURE] = shape
        for tap, branch in self.branches.items():
            shape = shapes[branch.source]
            for name, layer in branch.layers:
                out = layer.output_shape(shape)
                yield tap, name, layer, shape, out
                shape = out
            shapes[tap] = shape

    def named_parameters(self) -> dict[str, Tensor]:
        params = {}
        for _, name, layer in self.named_layers():
            for pname, p in layer.parameters().items():
                params[f"{name}.{pname}"] = p
        return params

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.named_parameters().values()))

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def _declare(self, tap: str, branch: Branch) -> None:
        shape = self.tap_shapes[branch.source]
        for _, layer in branch.layers:
            shape = layer.output_shape(shape)
        self.branches[tap] = branch
        self.tap_shapes[tap] = shape
        if branch.stride is not None:
            self.tap_strides[tap] = branch.stride

    def forward(self, batch: Tensor) -> dict[str, Tensor]:
        if batch.data.ndim != 4 or tuple(batch.shape[1:]) != self.input_shape:
            raise ShapeError(f"network expects [B, {', '.join(map(str, self.input_shape))}], got {batch.shape}")
        x = batch
        for _, layer in self.trunk:
            x = layer.forward(x)
        taps = {FEATURE: x}
        for tap, branch in self.branches.items():
            y = taps[branch.source]
            for _, layer in branch.layers:
                y = layer.forward(y)
            taps[tap] = y
        return taps


def forward(net: NetworkGraph, batch: Tensor) -> dict[str, Tensor]:
    return net.forward(batch)


# --- construction ---

def _block(name: str, layer: Layer, cfg: BackboneConfig, channels: int, dtype) -> list[tuple[str, Layer]]:
    block = [(name, layer)]
    if cfg.affine_norm:
        block.append((f"{name}.affine", ChannelAffine(channels, dtype)))
    block.append((f"{name}.relu", ReLU()))
    return block


def build_backbone(cfg: BackboneConfig, rng: SeededRng, dtype=np.float32) -> NetworkGraph:
    net = NetworkGraph(backbone_cfg=cfg.model_copy(update={"extend_layers": 0, "reduce_layers": 0}), dtype=dtype)
    in_ch = cfg.in_channels
    for i, width in enumerate(cfg.widths):
        net.trunk += _block(f"stage{i}.down", Conv2d(in_ch, width, 4, 2, 1, rng, dtype), cfg, width, dtype)
        net.trunk += _block(f"stage{i}.conv", Conv2d(width, width, 3, 1, 1, rng, dtype), cfg, width, dtype)
        in_ch = width
    size = cfg.input_size // 2 ** len(cfg.widths)
    net.tap_shapes[FEATURE] = (in_ch, size, size)
    net.tap_strides[FEATURE] = 2 ** len(cfg.widths)
    for _ in range(cfg.extend_layers):
        extend_stride(net, rng)
    for _ in range(cfg.reduce_layers):
        reduce_stride(net, rng)
    return net


def _modify_stride(net: NetworkGraph, layer_fn, name: str, factor: float) -> NetworkGraph:
    if net.branches:
        raise ConfigurationError("stride modifiers must be added before any head is attached")
    c, h, w = net.tap_shapes[FEATURE]
    width = net.backbone_cfg.modifier_width
    layer = layer_fn(c, width)
    out = layer.output_shape((c, h, w))
    net.trunk += _block(name, layer, net.backbone_cfg, width, net.dtype)
    net.tap_shapes[FEATURE] = out
    net.tap_strides[FEATURE] = int(net.tap_strides[FEATURE] * factor)
    return net


def extend_stride(net: NetworkGraph, rng: SeededRng) -> NetworkGraph:
    """Append a stride-2 conv block: feature map halves, stride doubles."""
    _, h, w = net.tap_shapes[FEATURE]
    if h % 2 or w % 2 or h < 2:
        raise ConfigurationError(f"cannot halve a {h}x{w} feature map")
    n = net.backbone_cfg.extend_layers
    _modify_stride(net, lambda c, width: Conv2d(c, width, 4, 2, 1, rng, net.dtype), f"extend{n}", 2)
    net.backbone_cfg = net.backbone_cfg.model_copy(update={"extend_layers": n + 1})
    return net


def reduce_stride(net: NetworkGraph, rng: SeededRng) -> NetworkGraph:
    """Append a 4x4 stride-2 deconv block: feature map doubles, stride halves."""
    if net.tap_strides[FEATURE] < 2:
        raise ConfigurationError("stride is already 1")
    n = net.backbone_cfg.reduce_layers
    _modify_stride(net, lambda c, width: Deconv2d(c, width, rng, dtype=net.dtype), f"reduce{n}", 0.5)
    net.backbone_cfg = net.backbone_cfg.model_copy(update={"reduce_layers": n + 1})
    return net


def attach_head(
    net: NetworkGraph,
    kind: HeadKind,
    head_cfg: HeadConfig,
    rng: SeededRng,
    table: Optional[codec.NeighborTable] = None,
    map_stride: Optional[int] = None,
) -> NetworkGraph:
    if net.head_kind is not None:
        raise ConfigurationError(f"a {net.head_kind.value} head is already attached")
    size = net.backbone_cfg.input_size
    if (head_cfg.input_height, head_cfg.input_width) != (size, size):
        raise ConfigurationError(
            f"head input {head_cfg.input_height}x{head_cfg.input_width} does not match backbone input {size}"
        )
    c = net.tap_shapes[FEATURE][0]
    N = head_cfg.num_landmarks
    dtype = net.dtype

    if kind in (HeadKind.PIP, HeadKind.PIP_NRM):
        if head_cfg.stride != net.stride:
            raise ConfigurationError(f"PIP head stride {head_cfg.stride} != backbone stride {net.stride}")
        net._declare(SCORE, Branch(FEATURE, [("head.score", Conv2d(c, N, 1, 1, 0, rng, dtype))], net.stride))
        net._declare(OFFSET, Branch(FEATURE, [("head.offset", Conv2d(c, 2 * N, 1, 1, 0, rng, dtype))], net.stride))
        if kind == HeadKind.PIP_NRM:
            C = head_cfg.num_neighbors
            if C < 1 or table is None or table.indices.shape != (N, C):
                raise ConfigurationError(f"PIP_NRM needs C >= 1 and a ({N}, {C}) neighbor table")
            net._declare(NEIGHBOR, Branch(
                FEATURE, [("head.neighbor", Conv2d(c, 2 * C * N, 1, 1, 0, rng, dtype))], net.stride))
            net.neighbor_table = table

    elif kind == HeadKind.MAP:
        map_stride = map_stride or head_cfg.stride
        ratio = net.stride / map_stride
        if ratio < 1 or not float(math.log2(ratio)).is_integer():
            raise ConfigurationError(f"MAP stride {map_stride} is not a power-of-two fraction of {net.stride}")
        layers: list[tuple[str, Layer]] = []
        width = c
        for i in range(int(math.log2(ratio))):
            out_width = net.backbone_cfg.modifier_width
            layers += [(f"map.deconv{i}", Deconv2d(width, out_width, rng, dtype=dtype)), (f"map.deconv{i}.relu", ReLU())]
            width = out_width
        layers.append(("map.out", Conv2d(width, N, 1, 1, 0, rng, dtype)))
        net._declare(HEATMAP, Branch(FEATURE, layers, map_stride))
        net.map_stride = map_stride

    elif kind == HeadKind.COORD:
        layers = [
            ("coord.pool", GlobalAvgPool()),
            ("coord.fc0", Dense(c, COORD_HIDDEN, rng, dtype)), ("coord.fc0.relu", ReLU()),
            ("coord.fc1", Dense(COORD_HIDDEN, COORD_HIDDEN, rng, dtype)), ("coord.fc1.relu", ReLU()),
            ("coord.fc2", Dense(COORD_HIDDEN, 2 * N, rng, dtype)),
        ]
        net._declare(COORDS, Branch(FEATURE, layers))
    else:
        raise ConfigurationError(f"unknown head kind {kind}")

    net.head_kind = kind
    net.head_cfg = head_cfg
    logger.debug(f"Attached {kind.value} head: taps {list(net.branches)}; {net.num_parameters()} parameters")
    return net


def attach_aux_heads(net: NetworkGraph, head_cfg: HeadConfig, rng: SeededRng) -> NetworkGraph:
    """Score-only taps at 2x and 4x the PIP stride, each behind a stride-2 conv block."""
    _, h, w = net.tap_shapes[FEATURE]
    if h < 4 or w < 4:
        raise ConfigurationError(f"auxiliary heads need a feature map of at least 4x4, got {h}x{w}")
    if net.with_aux:
        raise ConfigurationError("auxiliary heads are already attached")
    c = net.tap_shapes[FEATURE][0]
    width = net.backbone_cfg.modifier_width
    N = head_cfg.num_landmarks
    dtype = net.dtype
    net._declare(AUX_FEATURE_MID, Branch(FEATURE, [
        ("aux.mid.conv", Conv2d(c, width, 4, 2, 1, rng, dtype)), ("aux.mid.relu", ReLU())], net.stride * 2))
    net._declare(AUX_SCORE_MID, Branch(
        AUX_FEATURE_MID, [("aux.mid.score", Conv2d(width, N, 1, 1, 0, rng, dtype))], net.stride * 2))
    net._declare(AUX_FEATURE_COARSE, Branch(AUX_FEATURE_MID, [
        ("aux.coarse.conv", Conv2d(width, width, 4, 2, 1, rng, dtype)), ("aux.coarse.relu", ReLU())], net.stride * 4))
    net._declare(AUX_SCORE_COARSE, Branch(
        AUX_FEATURE_COARSE, [("aux.coarse.score", Conv2d(width, N, 1, 1, 0, rng, dtype))], net.stride * 4))
    net.with_aux = True
    return net


def build_model(
    backbone_cfg: BackboneConfig,
    kind: HeadKind,
    head_cfg: HeadConfig,
    seed: int,
    table: Optional[codec.NeighborTable] = None,
    map_stride: Optional[int] = None,
    with_aux: bool = False,
    dtype=np.float32,
) -> NetworkGraph:
    rng = SeededRng(seed, 0x6E6574)
    net = build_backbone(backbone_cfg, rng, dtype)
    attach_head(net, kind, head_cfg, rng, table=table, map_stride=map_stride)
    if with_aux:
        attach_aux_heads(net, head_cfg, rng)
    return net


# --- inference ---

def decode_outputs(net: NetworkGraph, outputs: dict[str, np.ndarray], index: int) -> codec.LandmarkSet:
    cfg = net.head_cfg
    kind = net.head_kind
    if kind == HeadKind.PIP:
        return codec.decode_pip(outputs[SCORE][index], outputs[OFFSET][index], cfg)
    if kind == HeadKind.PIP_NRM:
        return codec.decode_pip_nrm(outputs[SCORE][index], outputs[OFFSET][index], outputs[NEIGHBOR][index],
                                    net.neighbor_table, cfg)
    if kind == HeadKind.MAP:
        return codec.decode_quarter(outputs[HEATMAP][index], net.map_stride)
    if kind == HeadKind.COORD:
        return codec.coords_to_landmarks(outputs[COORDS][index], cfg.input_width, cfg.input_height)
    raise ConfigurationError("no head attached")


def infer(net: NetworkGraph, images: np.ndarray, chunk: int = 32) -> dict[str, np.ndarray]:
    """Forward without recording gradients; returns every tap as an array."""
    collected: dict[str, list[np.ndarray]] = {}
    for start in range(0, len(images), chunk):
        taps = net.forward(Tensor(images[start:start + chunk], dtype=net.dtype))
        for name, t in taps.items():
            collected.setdefault(name, []).append(t.data)
    return {name: np.concatenate(parts) for name, parts in collected.items()}


def predict(net: NetworkGraph, images: np.ndarray, chunk: int = 32) -> list[codec.LandmarkSet]:
    if net.head_kind is None:
        raise ConfigurationError("predict needs a network with a head attached")
    if len(images) == 0:
        return []
    outputs = infer(net, images, chunk)
    return [decode_outputs(net, outputs, b) for b in range(len(images))]
