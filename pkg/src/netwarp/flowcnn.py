"""Learned flow transformation: a 4-layer conv block with a skip connection.

Input is an 11-channel stack of [flow(2), frame_t(3), frame_prev(3),
frame_t - frame_prev(3)]. Three 3x3 conv layers (16, 32, 2 output channels)
interleaved with ReLU produce a 2-channel correction, which is concatenated
with the original flow (4 channels) and passed through a final 3x3 conv to
give the transformed 2-channel flow. All convs use padding 1, stride 1, so
resolution is preserved. One shared instance serves every insertion point.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, concat_channels, conv2d, relu, sub
from .warp import check_flow

# (out_ch, in_ch) per layer; weights + biases total 6892 parameters
_LAYER_PLAN = (("conv1", 16, 11), ("conv2", 32, 16), ("conv3", 2, 32), ("conv4", 2, 4))

PARAM_COUNT = sum(o * i * 9 + o for _, o, i in _LAYER_PLAN)


def init_flowcnn_params(params, rng, std=0.01, dtype=np.float32):
    """Register flowcnn.* weights (Gaussian, small std) and zero biases."""
    for name, out_ch, in_ch in _LAYER_PLAN:
        w = rng.normal(0.0, std, size=(out_ch, in_ch, 3, 3)).astype(dtype)
        b = np.zeros((1, out_ch, 1, 1), dtype=dtype)
        params.add(f"flowcnn.{name}.w", Tensor(w))
        params.add(f"flowcnn.{name}.b", Tensor(b))
    assert params.count("flowcnn.") == PARAM_COUNT
    return params


def build_flowcnn_input(flow, frame_t, frame_prev, tape=None):
    """Stack flow, both frames and their difference into an 11-channel tensor.

    Frames are expected normalized to [0, 1] so all channels live at a
    comparable scale.
    """
    check_flow(flow)
    for name, f in (("frame_t", frame_t), ("frame_prev", frame_prev)):
        if f.shape[1] != 3:
            raise DimensionError(f"{name} must have 3 channels, got {f.shape}")
        if f.shape[0] != flow.shape[0] or f.shape[2:] != flow.shape[2:]:
            raise DimensionError(f"{name} {f.shape} vs flow {flow.shape}")
    diff = sub(frame_t, frame_prev, tape)
    return concat_channels([flow, frame_t, frame_prev, diff], tape)


def flowcnn_forward(input11, flow, params, tape=None):
    """Transformed flow from the 11-channel input and the original flow."""
    if input11.shape[1] != 11:
        raise DimensionError(f"flowcnn input must have 11 channels, got {input11.shape}")
    check_flow(flow)

    def layer(x, name):
        return conv2d(x, params[f"flowcnn.{name}.w"], params[f"flowcnn.{name}.b"],
                      padding=1, stride=1, tape=tape)

    h = relu(layer(input11, "conv1"), tape)
    h = relu(layer(h, "conv2"), tape)
    h = layer(h, "conv3")  # signed correction: no ReLU before the skip concat
    h = concat_channels([h, flow], tape)
    return layer(h, "conv4")


def transform_flow(flow, frame_t, frame_prev, params, tape=None):
    """Convenience: build the 11-channel input and run the transformation."""
    x = build_flowcnn_input(flow, frame_t, frame_prev, tape)
    return flowcnn_forward(x, flow, params, tape)
