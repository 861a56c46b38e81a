"""Small single-image segmentation network with named, tappable layers.

Default plan: 3 blocks of (3x3 conv + ReLU) with channels 3->16->32->64 and
stride-2 max pooling after blocks 1 and 2, a 1x1 conv head to num_classes,
and a bilinear upsample of the logits back to input resolution. Named
layers: conv1, conv2, conv3, head (head = the upsampled logits, so
forward_to("head") equals the full forward).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, ValidationError
from .tensor import Tensor, conv2d, maxpool2, relu


@dataclass
class SegNetConfig:
    num_classes: int
    in_channels: int = 3
    channels: tuple = (16, 32, 64)

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.channels:
            raise ValidationError("channel plan must be non-empty")


def upsample_bilinear(x, out_h, out_w, tape=None):
    """Align-corners-false bilinear resize, differentiable w.r.t. x.

    Source coordinate: src = (dst + 0.5) * (in/out) - 0.5, clamped to the
    grid; then the same 4-corner expression as the warp op. Matches the
    naive per-pixel oracle bitwise.
    """
    B, C, H, W = x.shape
    if out_h < H or out_w < W:
        raise DimensionError(f"upsample target ({out_h},{out_w}) smaller than input {x.shape}")
    dt = x.dtype
    sy = H / out_h
    sx = W / out_w
    yq = np.minimum(np.maximum((np.arange(out_h, dtype=dt) + 0.5) * sy - 0.5, 0), H - 1)
    xq = np.minimum(np.maximum((np.arange(out_w, dtype=dt) + 0.5) * sx - 0.5, 0), W - 1)
    y1 = np.floor(yq)
    x1 = np.floor(xq)
    wy2 = yq - y1
    wy1 = 1 - wy2
    wx2 = xq - x1
    wx1 = 1 - wx2
    iy1 = y1.astype(np.intp)
    ix1 = x1.astype(np.intp)
    iy2 = np.minimum(iy1 + 1, H - 1)
    ix2 = np.minimum(ix1 + 1, W - 1)

    d = x.data
    z11 = d[:, :, iy1[:, None], ix1[None, :]]
    z21 = d[:, :, iy1[:, None], ix2[None, :]]
    z12 = d[:, :, iy2[:, None], ix1[None, :]]
    z22 = d[:, :, iy2[:, None], ix2[None, :]]
    wx1b = wx1[None, None, None, :]
    wx2b = wx2[None, None, None, :]
    wy1b = wy1[None, None, :, None]
    wy2b = wy2[None, None, :, None]
    out = Tensor(((z11 * wx1b) * wy1b + (z21 * wx2b) * wy1b)
                 + ((z12 * wx1b) * wy2b + (z22 * wx2b) * wy2b))

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g = out.grad
            dx = np.zeros_like(d)
            for iy, ix, wy, wx in ((iy1, ix1, wy1, wx1), (iy1, ix2, wy1, wx2),
                                   (iy2, ix1, wy2, wx1), (iy2, ix2, wy2, wx2)):
                contrib = g * (wy[:, None] * wx[None, :])
                lin = (iy[:, None] * W + ix[None, :]).ravel()
                flat = contrib.reshape(B * C, out_h * out_w)
                acc = np.zeros((B * C, H * W), dtype=d.dtype)
                for i in range(B * C):
                    acc[i] = np.bincount(lin, weights=flat[i], minlength=H * W)
                dx += acc.reshape(B, C, H, W)
            x.accum_grad(dx)

        tape.record("upsample_bilinear", backward)
    return out


class SegNet:
    """Host network exposing named activations for warp-module insertion."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.block_names = [f"conv{i + 1}" for i in range(len(cfg.channels))]
        self.layer_names = self.block_names + ["head"]
        # spatial stride of each named activation relative to the input
        self.layer_strides = {
            name: 2 ** i for i, name in enumerate(self.block_names)
        }
        self.layer_strides["head"] = 1  # logits are upsampled to input size

    def layer_channels(self, name):
        if name == "head":
            return self.cfg.num_classes
        return self.cfg.channels[self.block_names.index(name)]

    def init_params(self, params, rng, dtype=np.float32):
        """Register segnet.* parameters (He-style init, zero biases)."""
        in_ch = self.cfg.in_channels
        for name, out_ch in zip(self.block_names, self.cfg.channels):
            std = np.sqrt(2.0 / (in_ch * 9))
            params.add(f"segnet.{name}.w",
                       Tensor(rng.normal(0, std, (out_ch, in_ch, 3, 3)).astype(dtype)))
            params.add(f"segnet.{name}.b",
                       Tensor(np.zeros((1, out_ch, 1, 1), dtype=dtype)))
            in_ch = out_ch
        std = np.sqrt(2.0 / in_ch)
        params.add("segnet.head.w",
                   Tensor(rng.normal(0, std, (self.cfg.num_classes, in_ch, 1, 1)).astype(dtype)))
        params.add("segnet.head.b",
                   Tensor(np.zeros((1, self.cfg.num_classes, 1, 1), dtype=dtype)))
        return params

    def forward(self, x, params, tape=None, tap=None, inject=None):
        """Full forward to upsampled logits.

        tap: optional dict collecting activations at named layers.
        inject: optional dict name -> fn(Tensor) -> Tensor applied to the
        activation at that layer before the network continues (the warp
        module insertion hook).
        """
        inject = inject or {}
        for name in inject:
            if name not in self.layer_names:
                raise ConfigError(f"unknown insertion layer {name!r}; have {self.layer_names}")
        B, C, H, W = x.shape
        h = x
        for i, name in enumerate(self.block_names):
            h = relu(conv2d(h, params[f"segnet.{name}.w"], params[f"segnet.{name}.b"],
                            padding=1, stride=1, tape=tape), tape)
            if name in inject:
                h = inject[name](h)
            if tap is not None:
                tap[name] = h
            if i < len(self.block_names) - 1:
                h = maxpool2(h, tape)
        h = conv2d(h, params["segnet.head.w"], params["segnet.head.b"],
                   padding=0, stride=1, tape=tape)
        h = upsample_bilinear(h, H, W, tape)
        if "head" in inject:
            h = inject["head"](h)
        if tap is not None:
            tap["head"] = h
        return h

    def forward_to(self, x, params, layer, tape=None):
        """Activations at a named layer (for 'head' this is the full forward)."""
        if layer not in self.layer_names:
            raise ConfigError(f"unknown layer {layer!r}; have {self.layer_names}")
        tap = {}
        self.forward(x, params, tape=tape, tap=tap)
        return tap[layer]
