"""The full warp module: transform flow, warp previous-frame activations,
combine with present-frame activations, inserted at named layers of a base
network. Covers two-frame training forwards and online video inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .flowcnn import transform_flow
from .tensor import Tensor, add, scale_per_channel
from .warp import WarpConfig, subsample_flow, warp


@dataclass
class NetWarpSpec:
    insertion_layers: list = field(default_factory=list)
    warp_cfg: WarpConfig = field(default_factory=WarpConfig)
    use_flowcnn: bool = True
    # at inference, cache the combined representation of the previous frame
    # (recurrent chain) rather than its plain single-image activations
    recurrent_inference: bool = True


def init_combine_weights(params, net, insertion_layers, dtype=np.float32):
    """Register netwarp.<layer>.{w1,w2} pairs: w1 = ones, w2 = zeros.

    The all-ones/all-zeros init makes the augmented network exactly equal
    to the single-image network at construction.
    """
    for layer in insertion_layers:
        c = net.layer_channels(layer)
        params.add(f"netwarp.{layer}.w1", Tensor(np.ones((1, c, 1, 1), dtype=dtype)))
        params.add(f"netwarp.{layer}.w2", Tensor(np.zeros((1, c, 1, 1), dtype=dtype)))
    return params


def netwarp_apply(z_t, z_prev, flow, w1, w2, cfg, tape=None):
    """w1 (.) z_t + w2 (.) warp(z_prev, flow); flow at z's resolution."""
    if z_t.shape != z_prev.shape:
        raise DimensionError(f"current {z_t.shape} vs previous {z_prev.shape} activations")
    warped = warp(z_prev, flow, cfg, tape)
    return add(scale_per_channel(z_t, w1, tape),
               scale_per_channel(warped, w2, tape), tape)


def _transformed_flow(flow, frame_t, frame_prev, spec, params, tape):
    if spec.use_flowcnn:
        return transform_flow(flow, frame_t, frame_prev, params, tape)
    return flow


def _insertion_flow(tflow, net, layer, spec, tape):
    return subsample_flow(tflow, net.layer_strides[layer], tape)


def two_frame_forward(net, params, frame_prev, frame_t, flow, spec, tape=None):
    """Two-frame training graph: logits for frame t.

    The base net runs on both frames with shared weights, so a loss at
    frame t back-propagates into base layers through both paths. Previous
    frame activations are the plain single-image ones (two-frame
    approximation; no unrolling further back).
    """
    if frame_prev.shape != frame_t.shape:
        raise DimensionError(f"frame shapes differ: {frame_prev.shape} vs {frame_t.shape}")
    if not spec.insertion_layers:
        return net.forward(frame_t, params, tape=tape)

    tflow = _transformed_flow(flow, frame_t, frame_prev, spec, params, tape)
    prev_tap = {}
    net.forward(frame_prev, params, tape=tape, tap=prev_tap)

    inject = {}
    for layer in spec.insertion_layers:
        def combine(z, layer=layer):
            sub = _insertion_flow(tflow, net, layer, spec, tape)
            return netwarp_apply(z, prev_tap[layer], sub,
                                 params[f"netwarp.{layer}.w1"],
                                 params[f"netwarp.{layer}.w2"],
                                 spec.warp_cfg, tape)
        inject[layer] = combine
    return net.forward(frame_t, params, tape=tape, inject=inject)


def video_inference(net, params, frames, flows, spec):
    """Online per-frame predictions (argmax label maps) for a sequence.

    flows[i] is the reverse flow from frames[i] to frames[i-1]; flows[0]
    must be None. Frame 0 uses the pure single-image path. Output for
    frame i depends only on frames <= i.
    """
    if len(flows) != len(frames):
        raise ValidationError(f"{len(frames)} frames but {len(flows)} flows")
    if frames and flows[0] is not None:
        raise ValidationError("flows[0] must be None (first frame has no flow)")

    preds = []
    cache = {}
    for i, frame in enumerate(frames):
        if i == 0 or not spec.insertion_layers:
            tap = {}
            logits = net.forward(frame, params, tap=tap)
            new_cache = {layer: tap[layer] for layer in spec.insertion_layers}
        else:
            tflow = _transformed_flow(flows[i], frame, frames[i - 1], spec, params, None)
            new_cache = {}
            inject = {}
            for layer in spec.insertion_layers:
                def combine(z, layer=layer):
                    sub = _insertion_flow(tflow, net, layer, spec, None)
                    out = netwarp_apply(z, cache[layer], sub,
                                        params[f"netwarp.{layer}.w1"],
                                        params[f"netwarp.{layer}.w2"],
                                        spec.warp_cfg, None)
                    new_cache[layer] = out if spec.recurrent_inference else z
                    return out
                inject[layer] = combine
            logits = net.forward(frame, params, inject=inject)
        cache = new_cache
        preds.append(np.argmax(logits.data, axis=1)[0])
    return preds
