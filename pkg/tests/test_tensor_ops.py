"""Tensor core: op semantics, hand-counted oracles, FD gradient checks,
tape ordering and the NWT1 serialization round trip."""

import io

import numpy as np
import pytest

from netwarp.errors import DimensionError, FormatError, ValidationError
from netwarp.tensor import (Tape, Tensor, add, concat_channels, conv2d,
                            load_archive, maxpool2, read_tensor, relu,
                            save_archive, scale_per_channel, softmax_xent_loss,
                            sub, write_tensor)


def t64(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape).astype(np.float64))


def fd(f, arr, h=1e-5):
    flat = arr.ravel()
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def max_rel_err(a, f):
    a = np.asarray(a).ravel()
    f = np.asarray(f).ravel()
    return np.max(np.abs(a - f) / np.maximum(np.abs(a) + np.abs(f), 1e-8))


class TestTensor:
    def test_requires_4d(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((3, 3)))

    def test_check_finite(self):
        t = Tensor(np.zeros((1, 1, 2, 2)))
        t.check_finite()
        t.data[0, 0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            t.check_finite()

    def test_accum_grad_adds(self):
        t = Tensor(np.zeros((1, 1, 2, 2)))
        t.accum_grad(np.ones((1, 1, 2, 2)))
        t.accum_grad(np.ones((1, 1, 2, 2)))
        assert np.all(t.grad == 2)


class TestConv2d:
    def test_box_sum_counting(self):
        # all-ones 3x3 input, all-ones 3x3 kernel, padding 1:
        # center sees 9 taps, corners see 4
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        b = Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32))
        out = conv2d(x, w, b, padding=1, stride=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0

    def test_11ch_shape(self):
        rng = np.random.default_rng(0)
        x = t64(rng, (1, 11, 8, 8))
        w = t64(rng, (16, 11, 3, 3))
        b = t64(rng, (1, 16, 1, 1))
        assert conv2d(x, w, b, padding=1).shape == (1, 16, 8, 8)

    def test_stride_output_dims(self):
        rng = np.random.default_rng(1)
        x = t64(rng, (1, 2, 9, 9))
        w = t64(rng, (3, 2, 3, 3))
        b = t64(rng, (1, 3, 1, 1))
        assert conv2d(x, w, b, padding=1, stride=2).shape == (1, 3, 5, 5)

    def test_channel_mismatch(self):
        rng = np.random.default_rng(2)
        with pytest.raises(DimensionError) as e:
            conv2d(t64(rng, (1, 2, 5, 5)), t64(rng, (3, 4, 3, 3)),
                   t64(rng, (1, 3, 1, 1)))
        # both shapes must appear in the message
        assert "(1, 2, 5, 5)" in str(e.value) and "(3, 4, 3, 3)" in str(e.value)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(3)
        x = t64(rng, (1, 2, 5, 5))
        w = t64(rng, (3, 2, 3, 3))
        b = t64(rng, (1, 3, 1, 1))
        R = rng.standard_normal((1, 3, 5, 5))
        tape = Tape()
        out = conv2d(x, w, b, padding=1, tape=tape)
        out.grad = R.copy()
        tape.backward()
        f = lambda: float((conv2d(x, w, b, padding=1).data * R).sum())
        for t in (x, w, b):
            assert max_rel_err(t.grad, fd(f, t.data)) < 1e-4


class TestRelu:
    def test_definition(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3))
        assert np.array_equal(relu(x).data.ravel(), [0, 0, 2])

    def test_all_negative(self):
        x = Tensor(-np.ones((1, 2, 3, 3)))
        tape = Tape()
        out = relu(x, tape)
        assert np.all(out.data == 0)
        out.grad = np.ones_like(out.data)
        tape.backward()
        assert np.all(x.grad == 0)

    def test_gradient_away_from_zero(self):
        rng = np.random.default_rng(4)
        d = rng.uniform(-1, 1, (1, 2, 5, 5))
        d = np.where(np.abs(d) < 0.1, np.sign(d) * 0.1 + d, d)
        x = Tensor(d)
        R = rng.standard_normal(x.shape)
        tape = Tape()
        out = relu(x, tape)
        out.grad = R.copy()
        tape.backward()
        f = lambda: float((relu(x).data * R).sum())
        assert max_rel_err(x.grad, fd(f, x.data)) < 1e-4


class TestConcat:
    def test_shapes_and_order(self):
        rng = np.random.default_rng(5)
        a = t64(rng, (1, 2, 4, 4))
        b = t64(rng, (1, 2, 4, 4))
        out = concat_channels([a, b])
        assert out.shape == (1, 4, 4, 4)
        assert np.array_equal(out.data[:, :2], a.data)
        assert np.array_equal(out.data[:, 2:], b.data)

    def test_single_part_identity(self):
        rng = np.random.default_rng(6)
        a = t64(rng, (1, 3, 4, 4))
        assert np.array_equal(concat_channels([a]).data, a.data)

    def test_backward_is_slicing(self):
        rng = np.random.default_rng(7)
        a = t64(rng, (1, 2, 4, 4))
        b = t64(rng, (1, 3, 4, 4))
        tape = Tape()
        out = concat_channels([a, b], tape)
        g = rng.standard_normal(out.shape)
        out.grad = g.copy()
        tape.backward()
        assert np.array_equal(a.grad, g[:, :2])
        assert np.array_equal(b.grad, g[:, 2:])

    def test_spatial_mismatch(self):
        rng = np.random.default_rng(8)
        with pytest.raises(DimensionError):
            concat_channels([t64(rng, (1, 2, 4, 4)), t64(rng, (1, 2, 5, 4))])


class TestScalePerChannel:
    def test_ones_identity(self):
        rng = np.random.default_rng(9)
        x = t64(rng, (1, 3, 4, 4))
        w = Tensor(np.ones((1, 3, 1, 1)))
        assert np.array_equal(scale_per_channel(x, w).data, x.data)

    def test_zeros_and_product_rule(self):
        rng = np.random.default_rng(10)
        x = t64(rng, (1, 3, 4, 4))
        w = Tensor(np.zeros((1, 3, 1, 1)))
        tape = Tape()
        out = scale_per_channel(x, w, tape)
        assert np.all(out.data == 0)
        g = rng.standard_normal(out.shape)
        out.grad = g.copy()
        tape.backward()
        assert np.all(x.grad == 0)
        expect = (g * x.data).sum(axis=(0, 2, 3), keepdims=True)
        assert np.allclose(w.grad, expect)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(11)
        x = t64(rng, (1, 3, 5, 5))
        w = t64(rng, (1, 3, 1, 1))
        R = rng.standard_normal(x.shape)
        tape = Tape()
        out = scale_per_channel(x, w, tape)
        out.grad = R.copy()
        tape.backward()
        f = lambda: float((scale_per_channel(x, w).data * R).sum())
        for t in (x, w):
            assert max_rel_err(t.grad, fd(f, t.data)) < 1e-4

    def test_length_mismatch(self):
        rng = np.random.default_rng(12)
        with pytest.raises(DimensionError):
            scale_per_channel(t64(rng, (1, 3, 4, 4)), t64(rng, (1, 2, 1, 1)))


class TestAddSub:
    def test_add_zero_identity(self):
        rng = np.random.default_rng(13)
        a = t64(rng, (1, 2, 3, 3))
        z = Tensor(np.zeros(a.shape))
        assert np.array_equal(add(a, z).data, a.data)

    def test_commutes_bitwise(self):
        rng = np.random.default_rng(14)
        a = t64(rng, (1, 2, 3, 3))
        b = t64(rng, (1, 2, 3, 3))
        assert np.array_equal(add(a, b).data, add(b, a).data)

    def test_add_backward_copies_upstream(self):
        rng = np.random.default_rng(15)
        a = t64(rng, (1, 2, 3, 3))
        b = t64(rng, (1, 2, 3, 3))
        tape = Tape()
        out = add(a, b, tape)
        g = rng.standard_normal(out.shape)
        out.grad = g.copy()
        tape.backward()
        assert np.array_equal(a.grad, g) and np.array_equal(b.grad, g)

    def test_sub_backward(self):
        rng = np.random.default_rng(16)
        a = t64(rng, (1, 2, 3, 3))
        b = t64(rng, (1, 2, 3, 3))
        tape = Tape()
        out = sub(a, b, tape)
        g = rng.standard_normal(out.shape)
        out.grad = g.copy()
        tape.backward()
        assert np.array_equal(a.grad, g) and np.array_equal(b.grad, -g)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(17)
        with pytest.raises(DimensionError):
            add(t64(rng, (1, 2, 3, 3)), t64(rng, (1, 2, 3, 4)))


class TestMaxpool:
    def test_forward_and_backward(self):
        rng = np.random.default_rng(18)
        x = t64(rng, (1, 2, 6, 6))
        R = rng.standard_normal((1, 2, 3, 3))
        tape = Tape()
        out = maxpool2(x, tape)
        # brute-force per-window maximum
        for c in range(2):
            for i in range(3):
                for j in range(3):
                    win = x.data[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                    assert out.data[0, c, i, j] == win.max()
        out.grad = R.copy()
        tape.backward()
        f = lambda: float((maxpool2(x).data * R).sum())
        assert max_rel_err(x.grad, fd(f, x.data)) < 1e-4

    def test_odd_dims_rejected(self):
        with pytest.raises(DimensionError):
            maxpool2(Tensor(np.zeros((1, 1, 5, 6))))


class TestXent:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((1, 4, 3, 3)))
        labels = np.zeros((1, 3, 3), dtype=np.int64)
        assert softmax_xent_loss(logits, labels) == pytest.approx(np.log(4))

    def test_large_margin_correct(self):
        logits = Tensor(np.zeros((1, 3, 2, 2)))
        logits.data[0, 1] = 100.0
        labels = np.ones((1, 2, 2), dtype=np.int64)
        assert softmax_xent_loss(logits, labels) < 1e-6

    def test_fd_with_ignore(self):
        rng = np.random.default_rng(19)
        logits = t64(rng, (1, 4, 5, 5), -2, 2)
        labels = rng.integers(0, 4, (1, 5, 5))
        labels[0, 0, 0] = 255
        tape = Tape()
        softmax_xent_loss(logits, labels, tape=tape)
        tape.backward()
        f = lambda: softmax_xent_loss(logits, labels)
        assert max_rel_err(logits.grad, fd(f, logits.data)) < 1e-4
        # ignored pixel gets no gradient
        assert np.all(logits.grad[0, :, 0, 0] == 0)

    def test_label_out_of_range(self):
        logits = Tensor(np.zeros((1, 3, 2, 2)))
        labels = np.full((1, 2, 2), 7, dtype=np.int64)
        with pytest.raises(ValidationError):
            softmax_xent_loss(logits, labels)


class TestTape:
    def test_chain_matches_closed_form(self):
        # y = w (.) relu(a + b); hand chain rule on a 3-op graph
        rng = np.random.default_rng(20)
        a = t64(rng, (1, 2, 3, 3))
        b = t64(rng, (1, 2, 3, 3))
        w = t64(rng, (1, 2, 1, 1))
        R = rng.standard_normal(a.shape)
        tape = Tape()
        y = scale_per_channel(relu(add(a, b, tape), tape), w, tape)
        y.grad = R.copy()
        tape.backward()
        mask = (a.data + b.data) > 0
        expect = R * w.data * mask
        assert np.allclose(a.grad, expect)
        assert np.allclose(b.grad, expect)
        assert np.allclose(w.grad,
                           (R * np.maximum(a.data + b.data, 0)).sum(axis=(0, 2, 3),
                                                                    keepdims=True))

    def test_deterministic_forward(self):
        rng = np.random.default_rng(21)
        x = t64(rng, (2, 3, 8, 8))
        w = t64(rng, (4, 3, 3, 3))
        b = t64(rng, (1, 4, 1, 1))
        o1 = conv2d(x, w, b, padding=1).data
        o2 = conv2d(x, w, b, padding=1).data
        assert np.array_equal(o1, o2)


class TestSerialization:
    def test_tensor_round_trip(self):
        rng = np.random.default_rng(22)
        t = Tensor(rng.standard_normal((2, 3, 4, 5)).astype(np.float32))
        buf = io.BytesIO()
        write_tensor(buf, t)
        buf.seek(0)
        back = read_tensor(buf)
        assert back.shape == t.shape
        assert np.array_equal(back.data, t.data)

    def test_layout_bytes(self):
        t = Tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
        buf = io.BytesIO()
        write_tensor(buf, t)
        raw = buf.getvalue()
        assert raw[:4] == b"NWT1"
        assert np.array_equal(np.frombuffer(raw[4:20], dtype="<u4"), [1, 1, 2, 2])
        assert np.array_equal(np.frombuffer(raw[20:], dtype="<f4"), [0, 1, 2, 3])

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            read_tensor(io.BytesIO(b"XXXX" + b"\0" * 16))

    def test_truncated_payload(self):
        t = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        buf = io.BytesIO()
        write_tensor(buf, t)
        with pytest.raises(FormatError):
            read_tensor(io.BytesIO(buf.getvalue()[:-4]))

    def test_archive_round_trip(self, tmp_path):
        rng = np.random.default_rng(23)
        entries = {
            "flowcnn.conv1.w": Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32)),
            "netwarp.conv2.w1": Tensor(np.ones((1, 4, 1, 1), dtype=np.float32)),
        }
        path = tmp_path / "p.nwa"
        save_archive(path, entries)
        back = load_archive(path)
        assert list(back) == list(entries)
        for k in entries:
            assert np.array_equal(back[k].data, entries[k].data)
