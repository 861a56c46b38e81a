"""Training and evaluation pipelines driven by an experiment config."""

from __future__ import annotations

import os

import numpy as np

from .assembly import two_frame_forward, video_inference
from .config import MODES
from .errors import ConfigError, ValidationError
from .flow_source import BlockMatchParams, block_match_flow
from .metrics import compute_class_avg_sizes, evaluate_frames
from .model import build_model, spec_for_mode
from .optim import Adam
from .synth import load_dataset
from .tensor import Tape, softmax_xent_loss


class FlowProvider:
    """Per-pair reverse flow with caching: stored ground truth or the
    block-matching estimate."""

    def __init__(self, flow_cfg):
        self.method = flow_cfg["method"]
        self.bm = BlockMatchParams(patch=flow_cfg["patch"],
                                   search_radius=flow_cfg["radius"],
                                   subpixel=flow_cfg["subpixel"])
        self._cache = {}

    def get(self, seq, seq_key, t):
        if t < 1:
            raise ValidationError("no flow for the first frame of a sequence")
        if self.method == "ground_truth":
            return seq.gt_flow[t]
        key = (seq_key, t)
        if key not in self._cache:
            self._cache[key] = block_match_flow(seq.frames[t], seq.frames[t - 1], self.bm)
        return self._cache[key]


def split_sequences(cfg, dataset):
    """(train_names, eval_names); default holds out the last sequence."""
    names = dataset.sequence_names
    train = cfg["dataset"]["train_sequences"]
    evals = cfg["dataset"]["eval_sequences"]
    if train is None and evals is None:
        if len(names) < 2:
            train, evals = names, names
        else:
            train, evals = names[:-1], names[-1:]
    else:
        train = train if train is not None else [n for n in names if n not in set(evals)]
        evals = evals if evals is not None else [n for n in names if n not in set(train)]
    for n in list(train) + list(evals):
        if n not in names:
            raise ConfigError(f"unknown sequence {n!r} in dataset {dataset.root}")
    return list(train), list(evals)


def open_dataset(cfg):
    path = cfg["dataset"]["path"]
    if not path:
        raise ConfigError("dataset.path is required")
    ds = load_dataset(path)
    if cfg["model"]["num_classes"] is not None and ds.num_classes != cfg["model"]["num_classes"]:
        raise ConfigError(f"model.num_classes={cfg['model']['num_classes']} but dataset "
                          f"declares {ds.num_classes}")
    return ds


def train(cfg, checkpoint_out=None, progress=None):
    """Run the two-frame training loop; returns (net, params, loss_history).

    Pairs (t-1, t) are sampled from frames t that carry labels. Mode
    'baseline' trains the single-image path on the same labeled frames.
    """
    tcfg = cfg["train"]
    mode = tcfg["mode"]
    dataset = open_dataset(cfg)
    train_names, _ = split_sequences(cfg, dataset)
    net, params = build_model(cfg)
    if tcfg["init_from"]:
        params.load(tcfg["init_from"])
    if tcfg["freeze_base"]:
        params.set_trainable("segnet.", False)
    spec = spec_for_mode(cfg, mode)
    # surface config errors (unknown layer names) before step 0
    for layer in spec.insertion_layers:
        if layer not in net.layer_names:
            raise ConfigError(f"unknown insertion layer {layer!r}")

    flows = FlowProvider(cfg["flow"])
    pairs = []
    for name in train_names:
        seq = dataset.sequence(name)
        for t in range(1, len(seq.frames)):
            if seq.has_label[t]:
                pairs.append((name, t))
    if not pairs and tcfg["steps"] > 0:
        raise ValidationError("no labeled (t-1, t) pairs available for training")

    rng = np.random.default_rng(cfg["seed"])
    opt = Adam(params, lr=tcfg["lr"], beta1=tcfg["beta1"], beta2=tcfg["beta2"],
               eps=tcfg["eps"])
    losses = []
    for step in range(tcfg["steps"]):
        name, t = pairs[rng.integers(len(pairs))]
        seq = dataset.sequence(name)
        tape = Tape()
        if spec.insertion_layers:
            flow = flows.get(seq, name, t)
            logits = two_frame_forward(net, params, seq.frames[t - 1], seq.frames[t],
                                       flow, spec, tape)
        else:
            logits = net.forward(seq.frames[t], params, tape=tape)
        loss = softmax_xent_loss(logits, seq.labels[t], tape=tape)
        params.zero_grad()
        tape.backward()
        opt.step()
        losses.append(loss)
        if progress and (step + 1) % progress == 0:
            avg = float(np.mean(losses[-progress:]))
            print(f"step {step + 1}/{tcfg['steps']}  loss {avg:.4f}")

    if checkpoint_out:
        os.makedirs(os.path.dirname(checkpoint_out) or ".", exist_ok=True)
        params.save(checkpoint_out)
    return net, params, losses


def evaluate(cfg, params=None, net=None, checkpoint=None, modes=None):
    """Video inference over the held-out split for each requested mode.

    Returns {mode: MetricsReport}. Every report row comes from the same
    checkpoint so the ablation differs only in the inference graph.
    """
    dataset = open_dataset(cfg)
    _, eval_names = split_sequences(cfg, dataset)
    if net is None or params is None:
        net, params = build_model(cfg)
        if checkpoint:
            params.load(checkpoint)
    if modes is None:
        modes = cfg["eval"]["modes"] or ["baseline", "netwarp-noflowcnn", "netwarp"]
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown eval mode {m!r}")

    flows = FlowProvider(cfg["flow"])
    band_px = cfg["eval"]["band_px"]
    reports = {}
    for mode in modes:
        spec = spec_for_mode(cfg, mode)
        preds, gts, insts = [], [], []
        for name in eval_names:
            seq = dataset.sequence(name)
            seq_flows = [None] + [flows.get(seq, name, t)
                                  for t in range(1, len(seq.frames))]
            labels = video_inference(net, params, seq.frames, seq_flows, spec)
            for t in range(len(seq.frames)):
                if seq.has_label[t]:
                    preds.append(labels[t])
                    gts.append(seq.labels[t])
                    insts.append(seq.instances[t])
        avg_sizes = compute_class_avg_sizes(gts, insts, dataset.instance_classes)
        reports[mode] = evaluate_frames(preds, gts, insts, dataset.num_classes,
                                        dataset.instance_classes, avg_sizes,
                                        band_px=band_px)
    return reports
