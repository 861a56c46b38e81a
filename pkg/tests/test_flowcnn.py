"""Flow transformation block: layer plan, parameter count, input stacking
and differentiability through a training step."""

import numpy as np
import pytest

from netwarp.errors import DimensionError
from netwarp.flowcnn import (PARAM_COUNT, build_flowcnn_input, flowcnn_forward,
                             init_flowcnn_params, transform_flow)
from netwarp.optim import Adam, ParamSet
from netwarp.tensor import Tape, Tensor


def make_params(rng, dtype=np.float32):
    return init_flowcnn_params(ParamSet(), rng, dtype=dtype)


class TestParams:
    def test_param_count(self):
        # weights + biases of the four 3x3 layers (16/11, 32/16, 2/32, 2/4):
        # 16*11*9+16 + 32*16*9+32 + 2*32*9+2 + 2*4*9+2
        assert PARAM_COUNT == 1584 + 16 + 4608 + 32 + 576 + 2 + 72 + 2 == 6892
        params = make_params(np.random.default_rng(0))
        assert params.count("flowcnn.") == PARAM_COUNT

    def test_layer_shapes(self):
        params = make_params(np.random.default_rng(1))
        assert params["flowcnn.conv1.w"].shape == (16, 11, 3, 3)
        assert params["flowcnn.conv2.w"].shape == (32, 16, 3, 3)
        assert params["flowcnn.conv3.w"].shape == (2, 32, 3, 3)
        assert params["flowcnn.conv4.w"].shape == (2, 4, 3, 3)
        for i, c in zip(range(1, 5), (16, 32, 2, 2)):
            b = params[f"flowcnn.conv{i}.b"]
            assert b.shape == (1, c, 1, 1)
            assert np.all(b.data == 0)

    def test_init_statistics(self):
        params = make_params(np.random.default_rng(2))
        w = params["flowcnn.conv2.w"].data
        assert abs(w.std() - 0.01) < 0.002
        assert abs(w.mean()) < 0.002


class TestInput:
    def test_channel_layout(self):
        rng = np.random.default_rng(3)
        flow = Tensor(rng.uniform(-1, 1, (1, 2, 6, 6)).astype(np.float32))
        ft = Tensor(rng.random((1, 3, 6, 6)).astype(np.float32))
        fp = Tensor(rng.random((1, 3, 6, 6)).astype(np.float32))
        x = build_flowcnn_input(flow, ft, fp)
        assert x.shape == (1, 11, 6, 6)
        assert np.array_equal(x.data[:, 0:2], flow.data)
        assert np.array_equal(x.data[:, 2:5], ft.data)
        assert np.array_equal(x.data[:, 5:8], fp.data)
        assert np.array_equal(x.data[:, 8:11], ft.data - fp.data)

    def test_identical_frames_zero_diff(self):
        rng = np.random.default_rng(4)
        flow = Tensor(rng.uniform(-1, 1, (1, 2, 6, 6)).astype(np.float32))
        f = Tensor(rng.random((1, 3, 6, 6)).astype(np.float32))
        x = build_flowcnn_input(flow, f, f)
        assert np.all(x.data[:, 8:11] == 0)

    def test_rejects_bad_frames(self):
        flow = Tensor(np.zeros((1, 2, 6, 6)))
        with pytest.raises(DimensionError):
            build_flowcnn_input(flow, Tensor(np.zeros((1, 4, 6, 6))),
                                Tensor(np.zeros((1, 3, 6, 6))))
        with pytest.raises(DimensionError):
            build_flowcnn_input(flow, Tensor(np.zeros((1, 3, 5, 6))),
                                Tensor(np.zeros((1, 3, 5, 6))))


class TestForward:
    def test_zero_params_zero_output(self):
        rng = np.random.default_rng(5)
        params = make_params(rng)
        for name in params.names():
            params[name].data[:] = 0
        flow = Tensor(rng.uniform(-1, 1, (1, 2, 6, 6)).astype(np.float32))
        ft = Tensor(rng.random((1, 3, 6, 6)).astype(np.float32))
        fp = Tensor(rng.random((1, 3, 6, 6)).astype(np.float32))
        out = transform_flow(flow, ft, fp, params)
        assert np.all(out.data == 0)

    def test_resolution_preserved(self):
        rng = np.random.default_rng(6)
        params = make_params(rng)
        for H, W in ((6, 6), (10, 14), (9, 7)):
            flow = Tensor(rng.uniform(-1, 1, (1, 2, H, W)).astype(np.float32))
            ft = Tensor(rng.random((1, 3, H, W)).astype(np.float32))
            fp = Tensor(rng.random((1, 3, H, W)).astype(np.float32))
            assert transform_flow(flow, ft, fp, params).shape == (1, 2, H, W)

    def test_channel_mismatch(self):
        rng = np.random.default_rng(7)
        params = make_params(rng)
        with pytest.raises(DimensionError):
            flowcnn_forward(Tensor(np.zeros((1, 10, 6, 6))),
                            Tensor(np.zeros((1, 2, 6, 6))), params)

    def test_one_step_reaches_all_layers(self):
        # no dead parameters at init: after one Adam step on a toy objective
        # every layer's weights and biases have moved
        rng = np.random.default_rng(8)
        params = make_params(rng)
        before = params.state_copy()
        flow = Tensor(rng.uniform(-1, 1, (1, 2, 8, 8)).astype(np.float32))
        ft = Tensor(rng.random((1, 3, 8, 8)).astype(np.float32))
        fp = Tensor(rng.random((1, 3, 8, 8)).astype(np.float32))
        tape = Tape()
        out = transform_flow(flow, ft, fp, params, tape)
        out.grad = np.ones_like(out.data)
        params.zero_grad()
        tape.backward()
        Adam(params).step()
        for name in params.names():
            assert params[name].grad is not None, name
            assert not np.array_equal(params[name].data, before[name]), name
