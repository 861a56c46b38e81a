"""Assemble the base network, warp-module parameters and per-mode specs
from an experiment config."""

from __future__ import annotations

import numpy as np

from .assembly import NetWarpSpec, init_combine_weights
from .errors import ConfigError
from .flowcnn import init_flowcnn_params
from .optim import ParamSet
from .segnet import SegNet, SegNetConfig
from .warp import WarpConfig


def build_model(cfg, seed=None):
    """(net, params) with all parameter groups registered: segnet.*,
    flowcnn.*, and netwarp.<layer>.* for the configured insertion layers."""
    mc = cfg["model"]
    if mc["num_classes"] is None:
        raise ConfigError("model.num_classes is required")
    net = SegNet(SegNetConfig(num_classes=mc["num_classes"], channels=tuple(mc["channels"])))
    layers = cfg["netwarp"]["insertion_layers"]
    for layer in layers:
        if layer not in net.layer_names:
            raise ConfigError(f"insertion layer {layer!r} not in network layers "
                              f"{net.layer_names}")
    rng = np.random.default_rng(cfg["seed"] if seed is None else seed)
    params = ParamSet()
    net.init_params(params, rng)
    init_flowcnn_params(params, rng)
    init_combine_weights(params, net, layers)
    return net, params


def spec_for_mode(cfg, mode):
    """NetWarpSpec realizing one ablation row of the experiment."""
    nw = cfg["netwarp"]
    warp_cfg = WarpConfig(epsilon=nw["epsilon"])
    if mode == "baseline":
        return NetWarpSpec(insertion_layers=[], warp_cfg=warp_cfg)
    return NetWarpSpec(
        insertion_layers=list(nw["insertion_layers"]),
        warp_cfg=warp_cfg,
        use_flowcnn=(mode == "netwarp" and nw["use_flowcnn"]),
        recurrent_inference=nw["recurrent_inference"],
    )
