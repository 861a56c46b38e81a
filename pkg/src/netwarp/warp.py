"""Differentiable bilinear warping of feature maps by a reverse flow field.

Flow convention: channel 0 is the horizontal displacement u, channel 1 the
vertical displacement v, both in pixels; position (x, y) in the current
frame samples the previous frame at (x + u, y + v). A small epsilon is
added to both displacement components so sample points never sit exactly on
grid lines (integer flows would otherwise make the warp non-differentiable).
Sample points outside the domain are back-projected to the nearest border;
clamped coordinates contribute zero flow gradient.

The canonical per-sample arithmetic (shared with the brute-force oracle in
the test suite, kept in this exact order so results compare bitwise):

    xq = min(max(x + u + eps, 0), W-1);  yq likewise
    x1 = floor(xq); wx2 = xq - x1; wx1 = 1 - wx2   (same for y)
    ix1 = int(x1); ix2 = min(ix1 + 1, W-1)         (corner indices clamped)
    out = ((z11*wx1)*wy1 + (z21*wx2)*wy1) + ((z12*wx1)*wy2 + (z22*wx2)*wy2)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor import Tensor


@dataclass
class WarpConfig:
    epsilon: float = 1e-4
    flow_stride: int = 1
    # border handling is fixed: nearest-border back-projection

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.flow_stride < 1:
            raise ValidationError(f"flow_stride must be >= 1, got {self.flow_stride}")


def check_flow(flow):
    if flow.shape[1] != 2:
        raise DimensionError(f"flow field must have exactly 2 channels, got {flow.shape}")


def _check_pair(features, flow):
    check_flow(flow)
    if features.shape[0] != flow.shape[0] or features.shape[2:] != flow.shape[2:]:
        raise DimensionError(f"features {features.shape} vs flow {flow.shape}")


def _sample_geometry(fdata, flowdata, eps):
    """Clamped sample coordinates, corner indices and bilinear weights."""
    B, C, H, W = fdata.shape
    dt = fdata.dtype
    u = flowdata[:, 0].astype(dt, copy=False)
    v = flowdata[:, 1].astype(dt, copy=False)
    xs = np.arange(W, dtype=dt)[None, None, :]
    ys = np.arange(H, dtype=dt)[None, :, None]
    xq_raw = xs + u + eps
    yq_raw = ys + v + eps
    xq = np.minimum(np.maximum(xq_raw, 0), W - 1)
    yq = np.minimum(np.maximum(yq_raw, 0), H - 1)
    x1 = np.floor(xq)
    y1 = np.floor(yq)
    wx2 = xq - x1
    wx1 = 1 - wx2
    wy2 = yq - y1
    wy1 = 1 - wy2
    ix1 = x1.astype(np.intp)
    iy1 = y1.astype(np.intp)
    ix2 = np.minimum(ix1 + 1, W - 1)
    iy2 = np.minimum(iy1 + 1, H - 1)
    clamped_x = (xq_raw < 0) | (xq_raw > W - 1)
    clamped_y = (yq_raw < 0) | (yq_raw > H - 1)
    return (ix1, ix2, iy1, iy2), (wx1, wx2, wy1, wy2), (clamped_x, clamped_y)


def _gather(fdata, iy, ix):
    # fdata (B,C,H,W), indices (B,H,W) -> (B,C,H,W)
    b = np.arange(fdata.shape[0])[:, None, None]
    return fdata[b, :, iy, ix].transpose(0, 3, 1, 2)


def warp_forward(fdata, flowdata, eps):
    """Forward bilinear warp on raw arrays; see module docstring for math."""
    (ix1, ix2, iy1, iy2), (wx1, wx2, wy1, wy2), _ = _sample_geometry(fdata, flowdata, eps)
    z11 = _gather(fdata, iy1, ix1)
    z21 = _gather(fdata, iy1, ix2)
    z12 = _gather(fdata, iy2, ix1)
    z22 = _gather(fdata, iy2, ix2)
    wx1 = wx1[:, None]
    wx2 = wx2[:, None]
    wy1 = wy1[:, None]
    wy2 = wy2[:, None]
    return ((z11 * wx1) * wy1 + (z21 * wx2) * wy1) + ((z12 * wx1) * wy2 + (z22 * wx2) * wy2)


def warp_backward(up, fdata, flowdata, eps):
    """Gradients of the warp w.r.t. features and flow.

    Feature gradient scatters upstream through the four corner weights.
    Flow gradient is the analytic derivative w.r.t. the sample point,
    summed over channels; clamped coordinates get zero.
    """
    B, C, H, W = fdata.shape
    (ix1, ix2, iy1, iy2), (wx1, wx2, wy1, wy2), (cx, cy) = _sample_geometry(
        fdata, flowdata, eps
    )
    lin11 = iy1 * W + ix1
    lin21 = iy1 * W + ix2
    lin12 = iy2 * W + ix1
    lin22 = iy2 * W + ix2

    dfeat = np.zeros_like(fdata)
    df2 = dfeat.reshape(B, C * H * W)
    coff = (np.arange(C) * (H * W))[None, :, None, None]
    for lin, wx, wy in ((lin11, wx1, wy1), (lin21, wx2, wy1),
                        (lin12, wx1, wy2), (lin22, wx2, wy2)):
        contrib = up * (wx * wy)[:, None]
        idx = lin[:, None] + coff  # (B,C,H,W)
        for b in range(B):
            df2[b] += np.bincount(
                idx[b].ravel(), weights=contrib[b].ravel(), minlength=C * H * W
            ).astype(fdata.dtype, copy=False)

    z11 = _gather(fdata, iy1, ix1)
    z21 = _gather(fdata, iy1, ix2)
    z12 = _gather(fdata, iy2, ix1)
    z22 = _gather(fdata, iy2, ix2)
    gx = (z21 - z11) * wy1[:, None] + (z22 - z12) * wy2[:, None]
    gy = (z12 - z11) * wx1[:, None] + (z22 - z21) * wx2[:, None]
    du = (up * gx).sum(axis=1)
    dv = (up * gy).sum(axis=1)
    du[cx] = 0
    dv[cy] = 0
    dflow = np.stack([du, dv], axis=1).astype(flowdata.dtype, copy=False)
    return dfeat, dflow


def warp(features, flow, cfg, tape=None):
    """Tape-recorded warp of a feature Tensor by a 2-channel flow Tensor."""
    _check_pair(features, flow)
    eps = cfg.epsilon
    out = Tensor(warp_forward(features.data, flow.data, eps))
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            dfeat, dflow = warp_backward(out.grad, features.data, flow.data, eps)
            features.accum_grad(dfeat)
            flow.accum_grad(dflow)

        tape.record("warp", backward)
    return out


def subsample_flow(flow, stride, tape=None):
    """Strided flow subsampling with displacement rescaling.

    out(x, y) = flow(stride*x, stride*y) / stride; dims become
    ceil(H/stride) x ceil(W/stride). Displacements are divided by the
    stride so they stay valid on the coarser pixel grid.
    """
    check_flow(flow)
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if stride == 1:
        out = Tensor(flow.data.copy())
        if tape is not None:
            def backward_id():
                if out.grad is not None:
                    flow.accum_grad(out.grad)

            tape.record("subsample_flow", backward_id)
        return out

    out = Tensor(flow.data[:, :, ::stride, ::stride] / stride)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            d = np.zeros_like(flow.data)
            d[:, :, ::stride, ::stride] = out.grad / stride
            flow.accum_grad(d)

        tape.record("subsample_flow", backward)
    return out
