"""Reverse-flow providers: .flo file I/O and a block-matching estimator.

All flows follow the reverse convention: position (x, y) in frame t maps to
(x + u, y + v) in frame t-1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DimensionError, FormatError, ValidationError
from .tensor import Tensor
from .warp import check_flow

_FLO_MAGIC = 202021.25


@dataclass
class BlockMatchParams:
    patch: int = 8
    search_radius: int = 8
    subpixel: bool = True


def write_flo(path, flow):
    """Middlebury .flo: magic float, i32 width, i32 height, (u,v) f32 pairs."""
    check_flow(flow)
    _, _, h, w = flow.shape
    data = np.ascontiguousarray(
        flow.data[0].transpose(1, 2, 0), dtype="<f4"
    )  # (H,W,2) row-major
    with open(path, "wb") as f:
        f.write(struct.pack("<f", _FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(data.tobytes())


def read_flo(path):
    with open(path, "rb") as f:
        hdr = f.read(12)
        if len(hdr) != 12:
            raise FormatError(f"{path}: truncated .flo header")
        magic, w, h = struct.unpack("<fii", hdr)
        if magic != np.float32(_FLO_MAGIC):
            raise FormatError(f"{path}: bad .flo magic {magic!r}")
        if w <= 0 or h <= 0:
            raise FormatError(f"{path}: bad .flo dims {w}x{h}")
        raw = f.read(8 * w * h)
        if len(raw) != 8 * w * h:
            raise FormatError(f"{path}: .flo payload does not match {w}x{h} header")
        data = np.frombuffer(raw, dtype="<f4").reshape(h, w, 2)
    return Tensor(data.transpose(2, 0, 1)[None].copy())


def _to_gray(frame):
    arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise DimensionError(f"expected (1,C,H,W) frame, got {arr.shape}")
    return arr[0].mean(axis=0)


def block_match_flow(frame_t, frame_prev, params=None):
    """Dense SSD block matching with parabolic subpixel refinement.

    For each pixel the displacement minimizing the patch SSD between the
    current frame and the shifted previous frame is selected; SSD ties break
    deterministically toward the smallest displacement by (|u|+|v|, u, v).
    """
    params = params or BlockMatchParams()
    cur = _to_gray(frame_t)
    prev = _to_gray(frame_prev)
    if cur.shape != prev.shape:
        raise DimensionError(f"frame shapes differ: {cur.shape} vs {prev.shape}")
    H, W = cur.shape
    p, r = params.patch, params.search_radius
    if H < p or W < p:
        raise ValidationError(f"frames {H}x{W} smaller than patch {p}")

    disps = sorted(
        ((du, dv) for dv in range(-r, r + 1) for du in range(-r, r + 1)),
        key=lambda d: (abs(d[0]) + abs(d[1]), d[0], d[1]),
    )
    idx_of = {d: i for i, d in enumerate(disps)}
    prevpad = np.pad(prev, r, mode="edge")
    costs = np.empty((len(disps), H, W), dtype=np.float64)
    for i, (du, dv) in enumerate(disps):
        shifted = prevpad[r + dv:r + dv + H, r + du:r + du + W]
        diff = (cur - shifted) ** 2
        costs[i] = uniform_filter(diff, size=p, mode="nearest")

    best = costs.argmin(axis=0)  # first minimum: sorted order = tie-break rule
    darr = np.array(disps)
    u = darr[best, 0].astype(np.float32)
    v = darr[best, 1].astype(np.float32)

    if params.subpixel:
        u += _parabolic_offset(costs, best, darr, idx_of, axis=0)
        v += _parabolic_offset(costs, best, darr, idx_of, axis=1)

    return Tensor(np.stack([u, v])[None])


def _parabolic_offset(costs, best, darr, idx_of, axis):
    """Subpixel offset along one displacement axis from a 3-point parabola."""
    r = int(darr.max())
    du = darr[best, 0]
    dv = darr[best, 1]
    d0 = darr[best, axis]
    interior = np.abs(d0) < r

    lut_m = np.zeros(len(darr), dtype=np.intp)
    lut_p = np.zeros(len(darr), dtype=np.intp)
    valid = np.zeros(len(darr), dtype=bool)
    for i, (a, b) in enumerate(darr):
        step = (1, 0) if axis == 0 else (0, 1)
        if abs((a, b)[axis]) < r:
            lut_m[i] = idx_of[(a - step[0], b - step[1])]
            lut_p[i] = idx_of[(a + step[0], b + step[1])]
            valid[i] = True

    take = lambda k: np.take_along_axis(costs, k[None], axis=0)[0]
    c0 = take(best)
    cm = take(lut_m[best])
    cp = take(lut_p[best])
    denom = cm - 2 * c0 + cp
    # an exact zero-cost match is already the true optimum (SSD >= 0);
    # the parabola vertex would otherwise drift toward the cheaper neighbor
    ok = interior & valid[best] & (denom > 1e-12) & (c0 > 0)
    off = np.zeros_like(c0)
    np.divide(cm - cp, 2 * denom, out=off, where=ok)
    return np.clip(off, -0.5, 0.5).astype(np.float32)
