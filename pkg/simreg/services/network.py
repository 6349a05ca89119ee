"""
Displacement-field estimation network

Encoder-decoder over the 2-channel concatenation (moving, fixed):

    enc1..enc4    3x3x3 conv, stride 2, channels 16, 32, 32, 32
    bottleneck    two 3x3x3 convs, 32 channels
    dec1..dec4    trilinear x2 upsampling, skip concatenation, 3x3x3 conv,
                  channels 32, 32, 32, 16
    penultimate   3x3x3 conv, 16 channels (feature map F_N)
    field head    3x3x3 conv, 3 channels, zero-initialized, no activation

Every conv except the field head is followed by LeakyReLU(0.2).
The optional residual segmentation head convolves [F_N, warped one-hot
labels] to C channels followed by a softmax over classes.
"""
import logging
import math
from collections import OrderedDict
from typing import Dict, List, Optional, Tuple

import numpy as np

from simreg.models.volumes import DisplacementField, ProbabilityMap, Volume, check_same_dims
from simreg.services.autodiff import (
    Tensor, as_tensor, concat, conv3d, crop, leaky_relu, softmax, upsample2x,
)

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
DOWNSAMPLE_FACTOR = 16
FEATURE_CHANNELS = 16

# (name, in_channels, out_channels); decoder inputs include the skip channels
LAYER_PLAN: List[Tuple[str, int, int]] = [
    ("enc1", 2, 16),
    ("enc2", 16, 32),
    ("enc3", 32, 32),
    ("enc4", 32, 32),
    ("bottleneck1", 32, 32),
    ("bottleneck2", 32, 32),
    ("dec1", 32 + 32, 32),
    ("dec2", 32 + 32, 32),
    ("dec3", 32 + 16, 32),
    ("dec4", 32 + 2, 16),
    ("penultimate", 16, FEATURE_CHANNELS),
    ("field_head", FEATURE_CHANNELS, 3),
]
SEG_HEAD = "seg_head"


class NetworkParameters:
    """
    Ordered, named learnable tensors.

    Names follow "<layer>.weight" / "<layer>.bias"; iteration order is the
    layer order above followed by the segmentation head when present. That
    order is also the checkpoint payload order.
    """

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = OrderedDict(tensors)
        self._check_shapes()

    def _check_shapes(self) -> None:
        for name, cin, cout in LAYER_PLAN:
            weight = self.tensors.get(f"{name}.weight")
            bias = self.tensors.get(f"{name}.bias")
            if weight is None or bias is None:
                raise ValueError(f"missing parameters for layer {name}")
            if weight.shape != (cout, cin, 3, 3, 3) or bias.shape != (cout,):
                raise ValueError(f"layer {name}: unexpected shapes {weight.shape}, {bias.shape}")
        if self.has_seg_head:
            weight = self.tensors[f"{SEG_HEAD}.weight"]
            c = weight.shape[0]
            if weight.shape != (c, FEATURE_CHANNELS + c, 3, 3, 3):
                raise ValueError(f"segmentation head: unexpected kernel shape {weight.shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def has_seg_head(self) -> bool:
        return f"{SEG_HEAD}.weight" in self.tensors

    @property
    def num_classes(self) -> Optional[int]:
        if not self.has_seg_head:
            return None
        return int(self.tensors[f"{SEG_HEAD}.weight"].shape[0])

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        """Gradient per name; zeros for tensors the last backward did not reach"""
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self.tensors.items()
        }

    def as_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data) for name, t in self.tensors.items())

    def copy(self) -> "NetworkParameters":
        return NetworkParameters.from_arrays(self.as_arrays())

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "NetworkParameters":
        return cls(OrderedDict(
            (name, Tensor(np.array(a, dtype=np.float64, copy=True), requires_grad=True))
            for name, a in arrays.items()
        ))

    def equals(self, other: "NetworkParameters") -> bool:
        """Bitwise equality of names, shapes and values"""
        if list(self.tensors) != list(other.tensors):
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self.tensors)


def _he_uniform(rng: np.random.Generator, cout: int, cin: int) -> np.ndarray:
    fan_in = cin * 27
    bound = math.sqrt(6.0 / ((1.0 + LEAKY_SLOPE ** 2) * fan_in))
    return rng.uniform(-bound, bound, size=(cout, cin, 3, 3, 3))


def init_network(seed: int = 0, num_classes: Optional[int] = None) -> NetworkParameters:
    """
    Fresh parameters: fan-in scaled uniform kernels drawn from the seed,
    zero biases, zero field head. num_classes adds the segmentation head.
    """
    rng = np.random.default_rng(seed)
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, cin, cout in LAYER_PLAN:
        if name == "field_head":
            arrays[f"{name}.weight"] = np.zeros((cout, cin, 3, 3, 3))
        else:
            arrays[f"{name}.weight"] = _he_uniform(rng, cout, cin)
        arrays[f"{name}.bias"] = np.zeros(cout)
    if num_classes is not None:
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        arrays[f"{SEG_HEAD}.weight"] = _he_uniform(rng, num_classes, FEATURE_CHANNELS + num_classes)
        arrays[f"{SEG_HEAD}.bias"] = np.zeros(num_classes)
    return NetworkParameters.from_arrays(arrays)


# ============= FORWARD PASS =============

def padded_dims(dims) -> Tuple[int, int, int]:
    return tuple(int(math.ceil(d / DOWNSAMPLE_FACTOR) * DOWNSAMPLE_FACTOR) for d in dims)


def _pad_edge(data: np.ndarray, target) -> np.ndarray:
    widths = [(0, t - d) for d, t in zip(data.shape, target)]
    return np.pad(data, widths, mode="edge")


def _conv(params: NetworkParameters, name: str, x: Tensor, stride: int = 1, activate: bool = True) -> Tensor:
    out = conv3d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride)
    return leaky_relu(out, LEAKY_SLOPE) if activate else out


def forward_tensors(params: NetworkParameters, moving: np.ndarray, fixed: np.ndarray,
                    pad: bool = False) -> Tuple[Tensor, Tensor]:
    """
    Graph-building forward pass on raw arrays.

    Returns:
        (field, feat): field Tensor (3, D0, D1, D2) and the 16-channel
        penultimate activation, both at the input resolution
    """
    dims = tuple(moving.shape)
    check_same_dims(dims, fixed.shape)
    target = padded_dims(dims)
    if target != dims:
        if not pad:
            raise ValueError(f"dims not divisible by {DOWNSAMPLE_FACTOR}: {dims}")
        moving = _pad_edge(moving, target)
        fixed = _pad_edge(fixed, target)

    x = Tensor(np.stack([moving, fixed]))
    e1 = _conv(params, "enc1", x, stride=2)
    e2 = _conv(params, "enc2", e1, stride=2)
    e3 = _conv(params, "enc3", e2, stride=2)
    e4 = _conv(params, "enc4", e3, stride=2)
    b = _conv(params, "bottleneck1", e4)
    b = _conv(params, "bottleneck2", b)

    d = _conv(params, "dec1", concat([upsample2x(b), e3]))
    d = _conv(params, "dec2", concat([upsample2x(d), e2]))
    d = _conv(params, "dec3", concat([upsample2x(d), e1]))
    d = _conv(params, "dec4", concat([upsample2x(d), x]))
    feat = _conv(params, "penultimate", d)
    field = _conv(params, "field_head", feat, activate=False)

    if target != dims:
        field = crop(field, dims)
        feat = crop(feat, dims)
    return field, feat


def forward_network(params: NetworkParameters, m: Volume, i: Volume,
                    pad: bool = False) -> Tuple[DisplacementField, Tensor]:
    """
    Estimate the field registering m to i.

    Args:
        params: network parameters
        m: moving image
        i: fixed image
        pad: edge-replicate inputs up to a multiple of 16 instead of raising

    Returns:
        (field, feat) with feat detached from the graph

    Raises:
        ValueError: dims mismatch or dims not divisible by 16 without pad
    """
    check_same_dims(m.dims, i.dims)
    field, feat = forward_tensors(params, m.data, i.data, pad=pad)
    return DisplacementField(field.data), feat.detach()


# ============= RESIDUAL SEGMENTATION HEAD =============

def seg_head_tensor(params: NetworkParameters, feat: Tensor, s0) -> Tensor:
    """softmax(conv([feat, s0])) over the class axis; differentiable in all inputs"""
    if not params.has_seg_head:
        raise ValueError("segmentation head parameters absent")
    feat, s0 = as_tensor(feat), as_tensor(s0)
    check_same_dims(feat.shape[1:], s0.shape[1:])
    if s0.shape[0] != params.num_classes:
        raise ValueError(f"expected {params.num_classes} classes, got {s0.shape[0]}")
    logits = _conv(params, SEG_HEAD, concat([feat, s0]), activate=False)
    return softmax(logits, axis=0)


def residual_seg_head(params: NetworkParameters, feat: Tensor, s0: ProbabilityMap) -> ProbabilityMap:
    """Refined class probabilities S_feat from features and the warped label map"""
    values = s0.values if isinstance(s0, ProbabilityMap) else s0
    return ProbabilityMap(seg_head_tensor(params, feat, values).data)
