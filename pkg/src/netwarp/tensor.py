"""Dense 4-D tensor core with tape-based reverse-mode differentiation.

All tensors are (batch, channel, height, width), row-major within a channel.
Training code runs in float32; gradient checking runs the same code paths in
float64. Ops are plain functions: pass a Tape to record backward rules,
pass tape=None for forward-only evaluation.
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, FormatError, ValidationError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """4-D array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise DimensionError(f"tensor must be 4-D (B,C,H,W), got shape {arr.shape}")
        if arr.dtype.type not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accum_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("tensor contains NaN or Inf")

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype))

    def copy(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered record of ops; backward replays them in exact reverse order.

    The final scalar op (a loss) seeds itself with 1. For a graph ending in
    a Tensor, set out.grad before calling backward().
    """

    def __init__(self):
        self._ops = []

    def record(self, name, backward_fn):
        self._ops.append((name, backward_fn))

    def backward(self):
        for _, fn in reversed(self._ops):
            fn()

    def __len__(self):
        return len(self._ops)


def _require_same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {a.shape} vs {b.shape}")


def _channel_vector(w, channels, what):
    """Accept a (1,C,1,1) Tensor as a per-channel vector; validate length."""
    if w.shape != (1, channels, 1, 1):
        raise DimensionError(
            f"{what}: expected per-channel vector shape (1,{channels},1,1), got {w.shape}"
        )


# ---------------------------------------------------------------------------
# ops


def conv2d(x, w, b, padding=0, stride=1, tape=None):
    """2-D convolution (cross-correlation), zero padding, square kernel.

    x: (B,Cin,H,W), w: (Cout,Cin,k,k), b: (1,Cout,1,1).
    Output spatial dims: floor((H + 2*padding - k)/stride) + 1.
    """
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"kernel must be square, got {w.shape}")
    if Ci != C:
        raise DimensionError(f"conv2d: input channels {x.shape} vs weights {w.shape}")
    _channel_vector(b, O, "conv2d bias")
    k, s, p = kh, stride, padding
    OH = (H + 2 * p - k) // s + 1
    OW = (W + 2 * p - k) // s + 1
    if OH < 1 or OW < 1:
        raise DimensionError(f"conv2d: kernel {w.shape} too large for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    sb, sc, sh, sw = xp.strides
    cols = as_strided(
        xp,
        shape=(B, C, k, k, OH, OW),
        strides=(sb, sc, sh, sw, sh * s, sw * s),
        writeable=False,
    )
    out_data = np.tensordot(w.data, cols, axes=([1, 2, 3], [1, 2, 3]))  # (O,B,OH,OW)
    out_data = np.ascontiguousarray(out_data.transpose(1, 0, 2, 3)) + b.data
    out = Tensor(out_data)

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g = out.grad
            b.accum_grad(g.sum(axis=(0, 2, 3)).reshape(1, O, 1, 1))
            dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # (O,C,k,k)
            w.accum_grad(dw)
            # scatter back through the im2col view
            dcols = np.tensordot(g, w.data, axes=([1], [0]))  # (B,OH,OW,C,k,k)
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki:ki + s * OH:s, kj:kj + s * OW:s] += (
                        dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                    )
            if p:
                dxp = dxp[:, :, p:H + p, p:W + p]
            x.accum_grad(dxp)

        tape.record("conv2d", backward)
    return out


def relu(x, tape=None):
    """Elementwise max(0, x); subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        mask = x.data > 0

        def backward():
            if out.grad is None:
                return
            x.accum_grad(out.grad * mask)

        tape.record("relu", backward)
    return out


def concat_channels(parts, tape=None):
    """Concatenate along the channel axis, order preserved."""
    if not parts:
        raise ValidationError("concat_channels: empty part list")
    first = parts[0]
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise DimensionError(f"concat_channels: {first.shape} vs {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    if tape is not None:
        offsets = np.cumsum([0] + [p.shape[1] for p in parts])

        def backward():
            if out.grad is None:
                return
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                p.accum_grad(out.grad[:, lo:hi])

        tape.record("concat_channels", backward)
    return out


def scale_per_channel(x, w, tape=None):
    """out[b,c,h,w] = w[c] * x[b,c,h,w]; w is a (1,C,1,1) vector tensor."""
    _channel_vector(w, x.shape[1], "scale_per_channel")
    out = Tensor(x.data * w.data)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            x.accum_grad(out.grad * w.data)
            w.accum_grad((out.grad * x.data).sum(axis=(0, 2, 3), keepdims=True))

        tape.record("scale_per_channel", backward)
    return out


def add(a, b, tape=None):
    _require_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            a.accum_grad(out.grad)
            b.accum_grad(out.grad)

        tape.record("add", backward)
    return out


def sub(a, b, tape=None):
    _require_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            a.accum_grad(out.grad)
            b.accum_grad(-out.grad)

        tape.record("sub", backward)
    return out


def maxpool2(x, tape=None):
    """2x2 stride-2 max pooling; spatial dims must be even."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {x.shape}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)  # first max wins: deterministic tie-break
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            dwin = np.zeros((B, C, H // 2, W // 2, 4), dtype=x.data.dtype)
            np.put_along_axis(dwin, idx[..., None], out.grad[..., None], axis=-1)
            dx = dwin.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            x.accum_grad(dx.reshape(B, C, H, W))

        tape.record("maxpool2", backward)
    return out


def softmax_xent_loss(logits, labels, ignore_label=255, tape=None):
    """Mean pixelwise cross-entropy over non-ignored pixels.

    labels: int array (B,H,W) with values in [0, C) or == ignore_label.
    Returns a python float; on tape.backward() the op seeds itself with 1.
    """
    B, C, H, W = logits.shape
    lab = np.asarray(labels)
    if lab.ndim == 2:
        lab = lab[None]
    if lab.shape != (B, H, W):
        raise DimensionError(f"labels {lab.shape} vs logits {logits.shape}")
    valid = lab != ignore_label
    if np.any((lab < 0) & valid) or np.any((lab >= C) & valid):
        raise ValidationError(f"label out of range [0,{C}) (ignore={ignore_label})")
    n = int(valid.sum())
    if n == 0:
        raise ValidationError("no non-ignored pixels in loss")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    lab_safe = np.where(valid, lab, 0)
    picked = np.take_along_axis(p, lab_safe[:, None], axis=1)[:, 0]
    loss = float(-(np.log(picked)[valid]).sum() / n)

    if tape is not None:
        def backward():
            d = p.copy()
            bi, hi, wi = np.nonzero(valid)
            d[bi, lab[valid], hi, wi] -= 1.0
            d *= valid[:, None] / n
            logits.accum_grad(d)

        tape.record("softmax_xent_loss", backward)
    return loss


# ---------------------------------------------------------------------------
# serialization: "NWT1" binary tensor format and named-entry archives

_MAGIC = b"NWT1"


def write_tensor(f, t):
    """NWT1: magic, four u32 LE dims (N,C,H,W), then f32 LE values."""
    f.write(_MAGIC)
    f.write(struct.pack("<4I", *t.shape))
    f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_tensor(f):
    magic = f.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {_MAGIC!r}")
    hdr = f.read(16)
    if len(hdr) != 16:
        raise FormatError("truncated tensor header")
    shape = struct.unpack("<4I", hdr)
    count = int(np.prod(shape))
    raw = f.read(count * 4)
    if len(raw) != count * 4:
        raise FormatError(f"truncated tensor payload: want {count} floats")
    return Tensor(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())


def save_tensor(path, t):
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor(f)


def save_archive(path, entries):
    """Named-entry archive: repeated [u32 name_len][utf-8 name][NWT1 blob]."""
    with open(path, "wb") as f:
        for name, t in entries.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            write_tensor(f, t)


def load_archive(path):
    entries = {}
    with open(path, "rb") as f:
        while True:
            hdr = f.read(4)
            if not hdr:
                break
            if len(hdr) != 4:
                raise FormatError("truncated archive entry header")
            (nlen,) = struct.unpack("<I", hdr)
            name = f.read(nlen).decode("utf-8")
            entries[name] = read_tensor(f)
    return entries
