"""Deterministic synthetic video generator: textured shapes bouncing over a
textured background, with per-frame class labels, instance ids, ground-truth
reverse flow and occlusion masks.

The generator's per-frame shape positions are the oracle for flow tests:
the reverse flow inside shape i at frame t is pos[t-1][i] - pos[t][i].
A pixel is marked occluded when its warp sample point leaves the canvas or
when any of its four interpolation corners in the previous frame carries a
label different from the pixel's current label; on all remaining pixels,
bilinearly warping the previous one-hot label map reproduces the current
labels exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import FormatError, ValidationError
from .tensor import Tensor, load_tensor, save_tensor
from .flow_source import read_flo, write_flo

_KINDS = ("rectangle", "disc", "thin_bar")

# distinct base colors per class id (background = 0)
_PALETTE = np.array([
    [0.35, 0.35, 0.35],
    [0.90, 0.25, 0.20],
    [0.20, 0.55, 0.95],
    [0.25, 0.85, 0.35],
    [0.95, 0.80, 0.20],
    [0.75, 0.30, 0.85],
    [0.20, 0.85, 0.80],
], dtype=np.float32)


@dataclass
class ShapeDef:
    kind: str
    class_id: int
    size: tuple          # rectangle/thin_bar: (w, h); disc: (r,)
    pos0: tuple          # float top-left of the bounding box
    velocity: tuple      # pixels/frame, float
    texture_seed: int

    def bbox(self):
        if self.kind == "disc":
            d = 2 * self.size[0] + 1
            return (d, d)
        return (self.size[0], self.size[1])


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    num_shapes: int = 2
    shape_kinds: tuple = _KINDS
    seq_len: int = 10
    seed: int = 0
    velocity_max: float = 2.0
    noise_std: float = 0.0
    label_every: int = 1
    shapes: list = None  # explicit ShapeDef list overrides randomization

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.num_shapes < self.num_classes - 1:
            raise ValidationError("need at least one shape per non-background class")
        if self.velocity_max > 8:
            raise ValidationError("velocities above the default search radius (8)")
        for k in self.shape_kinds:
            if k not in _KINDS:
                raise ValidationError(f"unknown shape kind {k!r}")
        if self.label_every < 1:
            raise ValidationError("label_every must be >= 1")


@dataclass
class SceneSequence:
    spec: SceneSpec
    frames: list         # Tensor (1,3,H,W), values in [0,1]
    labels: list         # int (H,W)
    instances: list      # int (H,W), 0 = background
    gt_flow: list        # Tensor (1,2,H,W); index 0 is None
    occlusion: list      # bool (H,W); index 0 is None
    positions: np.ndarray = None   # (T, num_shapes, 2) float, the transform record
    instance_classes: tuple = ()


def _random_shapes(spec, rng):
    shapes = []
    for i in range(spec.num_shapes):
        kind = spec.shape_kinds[i % len(spec.shape_kinds)]
        if i < spec.num_classes - 1:
            class_id = i + 1
        else:
            class_id = int(rng.integers(1, spec.num_classes))
        if kind == "rectangle":
            size = (int(rng.integers(9, 17)), int(rng.integers(9, 17)))
        elif kind == "disc":
            size = (int(rng.integers(5, 9)),)
        else:  # thin_bar: width in [1,3] px, exercises thin structures
            width = int(rng.integers(1, 4))
            length = int(rng.integers(16, min(29, spec.width - 2)))
            if rng.integers(2):
                size = (length, width)
            else:
                size = (width, length)
        bw, bh = ShapeDef(kind, class_id, size, (0, 0), (0, 0), 0).bbox()
        if bw >= spec.width or bh >= spec.height:
            raise ValidationError(f"shape bbox {bw}x{bh} larger than canvas")
        pos0 = (float(rng.uniform(0, spec.width - bw)),
                float(rng.uniform(0, spec.height - bh)))
        vel = (float(rng.uniform(-spec.velocity_max, spec.velocity_max)),
               float(rng.uniform(-spec.velocity_max, spec.velocity_max)))
        shapes.append(ShapeDef(kind, class_id, size, pos0, vel,
                               int(rng.integers(0, 2 ** 31))))
    return shapes


def _simulate_positions(spec, shapes):
    """Float positions per frame, bouncing off the canvas edges."""
    T = spec.seq_len
    pos = np.zeros((T, len(shapes), 2))
    vel = np.array([s.velocity for s in shapes], dtype=float)
    cur = np.array([s.pos0 for s in shapes], dtype=float)
    lims = np.array([[spec.width - s.bbox()[0], spec.height - s.bbox()[1]]
                     for s in shapes], dtype=float)
    pos[0] = cur
    for t in range(1, T):
        cur = cur + vel
        for i in range(len(shapes)):
            for a in range(2):
                if cur[i, a] < 0:
                    cur[i, a] = -cur[i, a]
                    vel[i, a] = -vel[i, a]
                elif cur[i, a] > lims[i, a]:
                    cur[i, a] = 2 * lims[i, a] - cur[i, a]
                    vel[i, a] = -vel[i, a]
        pos[t] = cur
    return pos


def _shape_mask(shape, px, py, H, W):
    ys, xs = np.mgrid[0:H, 0:W]
    if shape.kind == "disc":
        r = shape.size[0]
        cx, cy = px + r, py + r
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    w, h = shape.size
    return (xs >= px) & (xs < px + w) & (ys >= py) & (ys < py + h)


def _shape_texture(shape, rng_seed, margin=2):
    bw, bh = shape.bbox()
    rng = np.random.default_rng(rng_seed)
    tex = rng.random((bh + 2 * margin, bw + 2 * margin)).astype(np.float32)
    tex = uniform_filter(tex, size=3, mode="wrap")
    lo, hi = tex.min(), tex.max()
    return (tex - lo) / max(hi - lo, 1e-8)


def _render_frame(spec, shapes, textures, bg_tex, pos_t, rng):
    H, W = spec.height, spec.width
    palette = _PALETTE[np.arange(spec.num_classes) % len(_PALETTE)]
    img = palette[0][:, None, None] * (0.4 + 0.6 * bg_tex)[None]
    label = np.zeros((H, W), dtype=np.int32)
    inst = np.zeros((H, W), dtype=np.int32)
    ys, xs = np.mgrid[0:H, 0:W]
    for i, shape in enumerate(shapes):
        px, py = pos_t[i]
        mask = _shape_mask(shape, px, py, H, W)
        if not mask.any():
            continue
        tex = textures[i]
        lx = np.clip(xs - int(np.floor(px)) + 2, 0, tex.shape[1] - 1)
        ly = np.clip(ys - int(np.floor(py)) + 2, 0, tex.shape[0] - 1)
        shade = 0.4 + 0.6 * tex[ly, lx]
        color = palette[shape.class_id][:, None, None] * shade[None]
        img = np.where(mask[None], color, img)
        label[mask] = shape.class_id
        inst[mask] = i + 1
    if spec.noise_std > 0:
        img = img + rng.normal(0, spec.noise_std, img.shape).astype(np.float32)
    return np.clip(img, 0, 1).astype(np.float32), label, inst


def _reverse_flow(inst_t, pos_t, pos_prev):
    H, W = inst_t.shape
    flow = np.zeros((2, H, W), dtype=np.float32)
    for i in range(pos_t.shape[0]):
        mask = inst_t == i + 1
        if mask.any():
            d = pos_prev[i] - pos_t[i]
            flow[0][mask] = d[0]
            flow[1][mask] = d[1]
    return Tensor(flow[None])


def _occlusion_mask(label_t, label_prev, flow, eps=1e-4):
    """Occluded = sample point off-canvas, or any interpolation corner in the
    previous frame disagreeing with the pixel's current label."""
    H, W = label_t.shape
    u = flow.data[0, 0].astype(np.float64)
    v = flow.data[0, 1].astype(np.float64)
    xs = np.arange(W)[None, :]
    ys = np.arange(H)[:, None]
    xq_raw = xs + u + eps
    yq_raw = ys + v + eps
    off = (xq_raw < 0) | (xq_raw > W - 1) | (yq_raw < 0) | (yq_raw > H - 1)
    xq = np.clip(xq_raw, 0, W - 1)
    yq = np.clip(yq_raw, 0, H - 1)
    ix1 = np.floor(xq).astype(np.intp)
    iy1 = np.floor(yq).astype(np.intp)
    ix2 = np.minimum(ix1 + 1, W - 1)
    iy2 = np.minimum(iy1 + 1, H - 1)
    bad = off.copy()
    for iy, ix in ((iy1, ix1), (iy1, ix2), (iy2, ix1), (iy2, ix2)):
        bad |= label_prev[iy, ix] != label_t
    return bad


def generate(spec, max_retries=50):
    """Render a deterministic sequence; re-rolls shape placement (bounded)
    until every declared class appears in every frame."""
    rng = np.random.default_rng(spec.seed)
    for _ in range(max_retries):
        shapes = list(spec.shapes) if spec.shapes is not None else _random_shapes(spec, rng)
        for s in shapes:
            bw, bh = s.bbox()
            if bw >= spec.width or bh >= spec.height:
                raise ValidationError(f"shape bbox {bw}x{bh} larger than canvas")
        positions = _simulate_positions(spec, shapes)
        textures = [_shape_texture(s, s.texture_seed) for s in shapes]
        bg_rng = np.random.default_rng(spec.seed ^ 0x5EED)
        bg = uniform_filter(bg_rng.random((spec.height, spec.width)).astype(np.float32),
                            size=3, mode="wrap")

        frames, labels, insts = [], [], []
        ok = True
        for t in range(spec.seq_len):
            img, label, inst = _render_frame(spec, shapes, textures, bg, positions[t], rng)
            present = set(np.unique(label))
            if not set(range(1, spec.num_classes)) <= present:
                ok = False
                break
            frames.append(Tensor(img[None]))
            labels.append(label)
            insts.append(inst)
        if not ok:
            if spec.shapes is not None:
                raise ValidationError("explicit shapes leave a class unrepresented")
            continue

        flows = [None]
        occl = [None]
        for t in range(1, spec.seq_len):
            fl = _reverse_flow(insts[t], positions[t], positions[t - 1])
            flows.append(fl)
            occl.append(_occlusion_mask(labels[t], labels[t - 1], fl))
        return SceneSequence(
            spec=spec, frames=frames, labels=labels, instances=insts,
            gt_flow=flows, occlusion=occl, positions=positions,
            instance_classes=tuple(sorted({s.class_id for s in shapes})),
        )
    raise ValidationError(f"could not place shapes with full class coverage "
                          f"in {max_retries} attempts")


# ---------------------------------------------------------------------------
# on-disk layout: one directory per sequence


def write_pgm(path, arr):
    a = np.asarray(arr)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    if a.min() < 0 or a.max() > 255:
        raise ValidationError("PGM values must fit in 8 bits")
    a = a.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        f.write(a.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise FormatError(f"{path}: not a P5 PGM")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = map(int, line.split())
        maxval = int(f.readline())
        if maxval != 255:
            raise FormatError(f"{path}: expected 8-bit PGM")
        raw = f.read(w * h)
        if len(raw) != w * h:
            raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def save_sequence(seq_dir, seq):
    os.makedirs(seq_dir, exist_ok=True)
    spec = seq.spec
    lines = []
    for t in range(spec.seq_len):
        frame_f = f"frame_{t:04d}.nwt"
        label_f = f"label_{t:04d}.pgm"
        inst_f = f"inst_{t:04d}.pgm"
        save_tensor(os.path.join(seq_dir, frame_f), seq.frames[t])
        write_pgm(os.path.join(seq_dir, label_f), seq.labels[t])
        write_pgm(os.path.join(seq_dir, inst_f), seq.instances[t])
        if t > 0:
            flow_f = f"flow_{t:04d}.flo"
            occl_f = f"occl_{t:04d}.pgm"
            write_flo(os.path.join(seq_dir, flow_f), seq.gt_flow[t])
            write_pgm(os.path.join(seq_dir, occl_f), seq.occlusion[t])
        else:
            flow_f = occl_f = "-"
        has_label = 1 if t % spec.label_every == 0 else 0
        lines.append(f"{t} {frame_f} {label_f} {inst_f} {flow_f} {occl_f} {has_label}")
    # manifest written last as the atomicity marker
    with open(os.path.join(seq_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


@dataclass
class StoredSequence:
    frames: list
    labels: list
    instances: list
    gt_flow: list
    occlusion: list
    has_label: list


def load_sequence(seq_dir):
    manifest = os.path.join(seq_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise FormatError(f"{seq_dir}: missing manifest.txt")
    frames, labels, insts, flows, occl, has_label = [], [], [], [], [], []
    with open(manifest) as f:
        for line in f:
            t, frame_f, label_f, inst_f, flow_f, occl_f, hl = line.split()
            frames.append(load_tensor(os.path.join(seq_dir, frame_f)))
            labels.append(read_pgm(os.path.join(seq_dir, label_f)).astype(np.int32))
            insts.append(read_pgm(os.path.join(seq_dir, inst_f)).astype(np.int32))
            flows.append(None if flow_f == "-" else read_flo(os.path.join(seq_dir, flow_f)))
            occl.append(None if occl_f == "-" else read_pgm(os.path.join(seq_dir, occl_f)) > 0)
            has_label.append(hl == "1")
    return StoredSequence(frames, labels, insts, flows, occl, has_label)


def save_dataset(root, sequences, num_classes, instance_classes, label_every=1):
    os.makedirs(root, exist_ok=True)
    names = []
    for i, seq in enumerate(sequences):
        name = f"seq_{i:03d}"
        save_sequence(os.path.join(root, name), seq)
        names.append(name)
    lines = [f"num_classes {num_classes}",
             "instance_classes " + " ".join(str(c) for c in sorted(instance_classes)),
             f"label_every {label_every}"]
    lines += [f"sequence {n}" for n in names]
    with open(os.path.join(root, "dataset.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


@dataclass
class Dataset:
    root: str
    num_classes: int
    instance_classes: tuple
    label_every: int
    sequence_names: list
    _cache: dict = field(default_factory=dict)

    def sequence(self, name):
        if name not in self._cache:
            self._cache[name] = load_sequence(os.path.join(self.root, name))
        return self._cache[name]

    def sequences(self):
        return [self.sequence(n) for n in self.sequence_names]


def load_dataset(root):
    index = os.path.join(root, "dataset.txt")
    if not os.path.exists(index):
        raise FormatError(f"{root}: missing dataset.txt")
    num_classes = None
    instance_classes = ()
    label_every = 1
    names = []
    with open(index) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "num_classes":
                num_classes = int(parts[1])
            elif parts[0] == "instance_classes":
                instance_classes = tuple(int(c) for c in parts[1:])
            elif parts[0] == "label_every":
                label_every = int(parts[1])
            elif parts[0] == "sequence":
                names.append(parts[1])
            else:
                raise FormatError(f"{index}: unknown manifest key {parts[0]!r}")
    if num_classes is None or not names:
        raise FormatError(f"{index}: incomplete dataset manifest")
    return Dataset(root, num_classes, instance_classes, label_every, names)
