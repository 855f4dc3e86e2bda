"""Training loop, linear probing, and gradient-norm instrumentation.

SGD with momentum and decoupled-style weight decay folded into the gradient:

    g   <- g + wd * theta
    v   <- mu * v + g
    theta <- theta - lr * v

The learning rate decays linearly from initial to final over the run.  Every
step logs the L2 norm of each backbone's probe-stage parameter gradients,
which is the measurement the suppression comparison runs on.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import detector as det
from . import evaluate as ev
from . import router

log = logging.getLogger("fdlab.train")

__all__ = [
    "OptimizerConfig",
    "TrainingDivergedError",
    "GradientTrace",
    "TrainResult",
    "ProbeResult",
    "sgd_step",
    "schedule_lr",
    "train_model",
    "linear_probe",
    "gradient_ratio_report",
]


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message names the step and the term."""


@dataclass(frozen=True)
class OptimizerConfig:
    initial_lr: float = 1e-2
    final_lr: float = 1e-6
    momentum: float = 0.937
    weight_decay: float = 1e-5
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.final_lr <= self.initial_lr:
            raise ValueError("need 0 < final_lr <= initial_lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def schedule_lr(step: int, total_steps: int, config: OptimizerConfig) -> float:
    """Linear interpolation; step 0 gives initial_lr, the last step final_lr."""
    if total_steps <= 1:
        return config.initial_lr
    frac = step / (total_steps - 1)
    return config.initial_lr + (config.final_lr - config.initial_lr) * frac


def sgd_step(parameters, lr: float, config: OptimizerConfig):
    """Apply one momentum-SGD update in place; parameters without gradients
    are left untouched (their momentum does not decay either)."""
    for p in parameters:
        if p.grad is None:
            continue
        g = np.asarray(p.grad)
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        p.momentum *= config.momentum
        p.momentum += g
        p.data = p.data - lr * p.momentum


@dataclass
class GradientTrace:
    """Per-step probe-stage gradient norms, one series per branch."""

    steps: list
    branch1_norms: list
    branch2_norms: list

    @staticmethod
    def empty():
        return GradientTrace([], [], [])

    def record(self, step, norm1, norm2):
        self.steps.append(step)
        self.branch1_norms.append(norm1)
        self.branch2_norms.append(norm2)

    def mean_norms(self):
        return (float(np.mean(self.branch1_norms)),
                float(np.mean(self.branch2_norms)))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "branch1_norm", "branch2_norm"])
            for row in zip(self.steps, self.branch1_norms, self.branch2_norms):
                writer.writerow(row)

    @staticmethod
    def read_csv(path):
        trace = GradientTrace.empty()
        with open(path) as fh:
            for row in csv.DictReader(fh):
                trace.record(int(row["step"]), float(row["branch1_norm"]),
                             float(row["branch2_norm"]))
        return trace


@dataclass
class TrainResult:
    model: object
    trace: GradientTrace
    final_loss: float


@dataclass
class ProbeResult:
    branch_id: str
    ap50: float
    ap50_95: float


def _probe_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.asarray(p.grad) ** 2))
    return math.sqrt(total)


def _check_finite(value: float, step: int, term: str):
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss at step {step}: {term} = {value!r}")


def _batch_indices(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _stack_images(samples, which):
    if which == "m1":
        return np.stack([s.image_m1 for s in samples])[:, None, :, :]
    return np.stack([s.image_m2 for s in samples])[:, None, :, :]


def train_model(model, samples, opt: OptimizerConfig,
                weights: det.LossWeights = None, modality="m1"):
    """Train a dual-branch or unimodal model in place; returns TrainResult.

    Shuffling, batching, and every update are pure functions of
    (model seed, opt.seed, samples), so reruns replay bit-exactly.
    """
    if not samples:
        raise ValueError("training set is empty")
    weights = weights if weights is not None else det.LossWeights()
    dual = isinstance(model, det.DualBranchDetector)
    image_size = samples[0].image_m1.shape[0]
    order_rng = np.random.default_rng(opt.seed)
    steps_per_epoch = math.ceil(len(samples) / opt.batch_size)
    total_steps = opt.epochs * steps_per_epoch
    parameters = model.parameters()
    trace = GradientTrace.empty()
    final_loss = float("nan")

    per_sample_targets = [
        det.assign_targets(s.boxes, s.classes, image_size, model.config)
        for s in samples
    ]

    step = 0
    for epoch in range(opt.epochs):
        for batch_idx in _batch_indices(len(samples), opt.batch_size, order_rng):
            batch = [samples[i] for i in batch_idx]
            targets = det.batch_targets([per_sample_targets[i] for i in batch_idx])

            if dual:
                x1 = ad.Tensor(_stack_images(batch, "m1"))
                x2 = ad.Tensor(_stack_images(batch, "m2"))
                fus, a1, a2 = model.forward(x1, x2)
                loss_fus = det.detection_loss(fus, targets, weights)
                loss_a1 = det.detection_loss(a1, targets, weights)
                loss_a2 = det.detection_loss(a2, targets, weights)
                for term, name in ((loss_fus, "fusion loss"),
                                   (loss_a1, "aux1 loss"),
                                   (loss_a2, "aux2 loss")):
                    _check_finite(term.item(), step, name)
                loss = det.total_loss(loss_fus, loss_a1, loss_a2, weights)
            else:
                x = ad.Tensor(_stack_images(batch, modality))
                out = model.forward(x)
                loss = det.detection_loss(out, targets, weights)
                _check_finite(loss.item(), step, "detection loss")

            for p in parameters:
                p.zero_grad()
            ad.backward(loss)

            if dual:
                trace.record(step,
                             _probe_grad_norm(model.backbone1.probe_parameters()),
                             _probe_grad_norm(model.backbone2.probe_parameters()))
            else:
                norm = _probe_grad_norm(model.backbone.probe_parameters())
                trace.record(step, norm, norm)

            sgd_step(parameters, schedule_lr(step, total_steps, opt), opt)
            final_loss = loss.item()
            step += 1
        log.info("epoch %d/%d loss %.4f", epoch + 1, opt.epochs, final_loss)

    return TrainResult(model, trace, final_loss)


def linear_probe(model, branch_id: str, train_samples, test_samples,
                 opt: OptimizerConfig, weights: det.LossWeights = None,
                 head_seed: int = 0) -> ProbeResult:
    """Freeze one backbone, train a fresh head on its cached features,
    evaluate on the test split.

    branch_id: "m1" or "m2" (a unimodal model probes its own backbone with
    either id's images ignored appropriately)."""
    weights = weights if weights is not None else det.LossWeights()
    if isinstance(model, det.DualBranchDetector):
        backbone = model.backbone1 if branch_id == "m1" else model.backbone2
    else:
        backbone = model.backbone
    config = model.config
    image_size = train_samples[0].image_m1.shape[0]

    frozen_before = {p.name: p.data.copy() for p in backbone.parameters()}

    def cached_features(samples):
        feats = []
        with ad.no_grad():
            for start in range(0, len(samples), opt.batch_size):
                chunk = samples[start:start + opt.batch_size]
                x = ad.Tensor(_stack_images(chunk, branch_id))
                levels = backbone(x)
                for i in range(len(chunk)):
                    feats.append(tuple(lv.data[i:i + 1].copy() for lv in levels))
        return feats

    train_feats = cached_features(train_samples)
    test_feats = cached_features(test_samples)

    head = det.DetectionHead("probe_head", config, np.random.default_rng(head_seed))
    head_params = head.parameters()
    order_rng = np.random.default_rng(opt.seed)
    steps_per_epoch = math.ceil(len(train_samples) / opt.batch_size)
    total_steps = opt.epochs * steps_per_epoch
    per_sample_targets = [
        det.assign_targets(s.boxes, s.classes, image_size, config)
        for s in train_samples
    ]

    step = 0
    for _ in range(opt.epochs):
        for batch_idx in _batch_indices(len(train_samples), opt.batch_size,
                                        order_rng):
            pyramid = tuple(
                ad.Tensor(np.concatenate([train_feats[i][lv] for i in batch_idx]))
                for lv in range(len(train_feats[0]))
            )
            targets = det.batch_targets([per_sample_targets[i] for i in batch_idx])
            out = head(pyramid)
            loss = det.detection_loss(out, targets, weights)
            _check_finite(loss.item(), step, "probe loss")
            for p in head_params:
                p.zero_grad()
            ad.backward(loss)
            sgd_step(head_params, schedule_lr(step, total_steps, opt), opt)
            step += 1

    # frozen contract: the backbone must be bit-identical afterwards
    for p in backbone.parameters():
        if not np.array_equal(p.data, frozen_before[p.name]):
            raise AssertionError(f"frozen backbone parameter {p.name} changed")

    decoded = []
    with ad.no_grad():
        for i, feats in enumerate(test_feats):
            out = head(tuple(ad.Tensor(f) for f in feats))
            dets = ev.decode_output(
                [lv.data[0] for lv in out.class_logits],
                [lv.data[0] for lv in out.box_offsets],
                config.strides)
            decoded.append(ev.greedy_nms(dets)[:100])
    result = ev.evaluate_outputs(decoded, test_samples, config.class_count)
    return ProbeResult(branch_id, result.mean_ap50, result.mean_ap50_95)


def gradient_ratio_report(trace_a: GradientTrace, trace_b: GradientTrace):
    """Mean probe-norm ratios (a / b) per branch."""
    if len(trace_a.steps) != len(trace_b.steps):
        raise ValueError("traces cover different numbers of steps")
    a1, a2 = trace_a.mean_norms()
    b1, b2 = trace_b.mean_norms()
    return {"branch1": a1 / b1, "branch2": a2 / b2}
