"""Two-branch toy detector: per-modality backbones, additive feature fusion,
and anchor-free detection heads.

Architecture, kept deliberately small for CPU training:

    backbone   two stride-2 stem convs (net /4), then one stride-2 conv per
               stage; the three stage outputs form the feature pyramid at
               strides 8/16/32 with the configured channel widths
    fusion     per-level 1x1 projections, z = W1 f1 + W2 f2 + bias, linear
    head       two 3x3 SiLU convs, then 1x1 projections to class logits and
               4 box offsets; the fusion head and both auxiliary heads share
               this architecture

A ground-truth box is assigned to the single cell containing its center, at
the pyramid level matching its size band.  Classification is BCE over every
(cell, class) entry; box regression is mean L1 on positive cells only.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import router, tensorio

__all__ = [
    "DetectorConfig",
    "LossWeights",
    "HeadOutput",
    "ConvBlock",
    "Backbone",
    "FusionLayer",
    "DetectionHead",
    "DualBranchDetector",
    "UnimodalDetector",
    "LevelTargets",
    "assign_targets",
    "batch_targets",
    "detection_loss",
    "total_loss",
    "parameter_arrays",
    "load_parameter_arrays",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class DetectorConfig:
    """Shared shape configuration for all model variants."""

    input_channels: int = 1
    stage_widths: tuple = (8, 16, 32)
    class_count: int = 3
    # max long side (pixels) routed to each of the first two pyramid levels;
    # anything larger goes to the last
    size_bounds: tuple = (24.0, 48.0)

    def __post_init__(self):
        if len(self.stage_widths) < 3:
            raise ValueError("need at least 3 stages for a three-level pyramid")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")

    @property
    def strides(self) -> tuple:
        # stem is /4, each stage halves again
        return tuple(4 * 2 ** (i + 1) for i in range(len(self.stage_widths)))

    @property
    def probe_stage_index(self) -> int:
        return len(self.stage_widths) - 1

    @property
    def total_stride(self) -> int:
        return self.strides[-1]


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the composite objective."""

    lambda_cls: float = 1.0
    lambda_box: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_box", "alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lambda_cls == 0 and self.lambda_box == 0:
            raise ValueError("lambda_cls and lambda_box cannot both be 0")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ValueError("alpha, beta, gamma cannot all be 0")


@dataclass
class HeadOutput:
    """Per-level class logits (N, classes, H, W) and box offsets (N, 4, H, W)."""

    class_logits: tuple
    box_offsets: tuple


def _init_conv(rng, out_ch, in_ch, kernel):
    # fan-in counts input channels, not the receptive field: with no
    # normalization layers anywhere, the k*k taps act as the per-layer gain
    # that keeps activation scale roughly flat through the stack
    bound = 1.0 / np.sqrt(in_ch)
    weight = rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel, kernel))
    bias = rng.uniform(-bound, bound, size=(out_ch,))
    return weight, bias


class ConvBlock:
    """One convolution plus optional SiLU."""

    def __init__(self, name, in_ch, out_ch, kernel, stride, padding, rng,
                 activate=True):
        weight, bias = _init_conv(rng, out_ch, in_ch, kernel)
        self.weight = ad.Parameter(f"{name}.weight", weight)
        self.bias = ad.Parameter(f"{name}.bias", bias)
        self.stride = stride
        self.padding = padding
        self.activate = activate

    def __call__(self, x):
        y = ad.conv2d(x, self.weight.value, bias=self.bias.value,
                      stride=self.stride, padding=self.padding)
        return ad.silu(y) if self.activate else y

    def parameters(self):
        return [self.weight, self.bias]


class Backbone:
    """Stem plus stride-2 stages; stage outputs are the pyramid levels."""

    def __init__(self, name, config: DetectorConfig, rng):
        w0 = config.stage_widths[0]
        self.stem = [
            ConvBlock(f"{name}.stem0", config.input_channels, w0, 3, 2, 1, rng),
            ConvBlock(f"{name}.stem1", w0, w0, 3, 2, 1, rng),
        ]
        self.stages = []
        prev = w0
        for i, width in enumerate(config.stage_widths):
            self.stages.append(ConvBlock(f"{name}.stage{i}", prev, width, 3, 2, 1, rng))
            prev = width
        self.config = config

    def __call__(self, image):
        h, w = image.shape[2], image.shape[3]
        total = self.config.total_stride
        if h % total or w % total:
            raise ad.ContractViolationError(
                f"image dims {h}x{w} not divisible by total stride {total}"
            )
        x = image
        for block in self.stem:
            x = block(x)
        levels = []
        for block in self.stages:
            x = block(x)
            levels.append(x)
        return tuple(levels)

    def parameters(self):
        out = []
        for block in self.stem + self.stages:
            out.extend(block.parameters())
        return out

    def probe_parameters(self):
        """Parameters of the deepest stage; their gradients get logged."""
        return self.stages[-1].parameters()


class FusionLayer:
    """Per-level z = W1 f1 + W2 f2 + bias, all 1x1 and linear."""

    def __init__(self, name, config: DetectorConfig, rng):
        self.weights1, self.weights2, self.biases = [], [], []
        for i, width in enumerate(config.stage_widths):
            bound = 1.0 / np.sqrt(width)
            self.weights1.append(ad.Parameter(
                f"{name}.level{i}.m1.weight",
                rng.uniform(-bound, bound, size=(width, width, 1, 1))))
            self.weights2.append(ad.Parameter(
                f"{name}.level{i}.m2.weight",
                rng.uniform(-bound, bound, size=(width, width, 1, 1))))
            self.biases.append(ad.Parameter(
                f"{name}.level{i}.bias",
                rng.uniform(-bound, bound, size=(width,))))

    def __call__(self, f1, f2):
        if len(f1) != len(self.weights1) or len(f2) != len(self.weights2):
            raise ad.ShapeMismatchError(
                "fuse", f"got {len(f1)}/{len(f2)} levels, expected {len(self.weights1)}"
            )
        out = []
        for a, b, w1, w2, bias in zip(f1, f2, self.weights1, self.weights2,
                                      self.biases):
            z1 = ad.conv2d(a, w1.value, bias=bias.value, stride=1, padding=0)
            z2 = ad.conv2d(b, w2.value, stride=1, padding=0)
            out.append(ad.add(z1, z2))
        return tuple(out)

    def parameters(self):
        out = []
        for w1, w2, bias in zip(self.weights1, self.weights2, self.biases):
            out.extend([w1, w2, bias])
        return out


class DetectionHead:
    """Two 3x3 SiLU convs then linear 1x1 projections, per pyramid level."""

    def __init__(self, name, config: DetectorConfig, rng):
        self.levels = []
        for i, width in enumerate(config.stage_widths):
            prefix = f"{name}.level{i}"
            self.levels.append({
                "conv0": ConvBlock(f"{prefix}.conv0", width, width, 3, 1, 1, rng),
                "conv1": ConvBlock(f"{prefix}.conv1", width, width, 3, 1, 1, rng),
                "cls": ConvBlock(f"{prefix}.cls", width, config.class_count,
                                 1, 1, 0, rng, activate=False),
                "box": ConvBlock(f"{prefix}.box", width, 4, 1, 1, 0, rng,
                                 activate=False),
            })
        self.widths = tuple(config.stage_widths)

    def __call__(self, pyramid):
        if len(pyramid) != len(self.levels):
            raise ad.ShapeMismatchError(
                "head", f"got {len(pyramid)} levels, expected {len(self.levels)}"
            )
        logits, boxes = [], []
        for feat, layer in zip(pyramid, self.levels):
            h = layer["conv1"](layer["conv0"](feat))
            logits.append(layer["cls"](h))
            boxes.append(layer["box"](h))
        return HeadOutput(tuple(logits), tuple(boxes))

    def parameters(self):
        out = []
        for layer in self.levels:
            for key in ("conv0", "conv1", "cls", "box"):
                out.extend(layer[key].parameters())
        return out


class DualBranchDetector:
    """Both backbones, the router, the fusion layer, and three heads.

    Construction draws parameters from one seeded generator in a fixed
    order, so (config, seed) pins every initial weight.
    """

    def __init__(self, config: DetectorConfig, seed: int,
                 plan: router.RoutePlan = None):
        rng = np.random.default_rng(seed)
        self.config = config
        self.seed = seed
        self.plan = plan if plan is not None else router.RoutePlan.from_preset("rsc-md")
        self.backbone1 = Backbone("backbone1", config, rng)
        self.backbone2 = Backbone("backbone2", config, rng)
        self.fusion = FusionLayer("fusion", config, rng)
        self.fusion_head = DetectionHead("fusion_head", config, rng)
        self.aux_head1 = DetectionHead("aux_head1", config, rng)
        self.aux_head2 = DetectionHead("aux_head2", config, rng)

    def forward(self, image_m1, image_m2):
        """Returns (fusion_out, aux1_out, aux2_out) HeadOutputs."""
        f1 = self.backbone1(image_m1)
        f2 = self.backbone2(image_m2)
        aux1_view, aux2_view, (fus1, fus2) = router.route_forward(f1, f2, self.plan)
        fused = self.fusion(fus1, fus2)
        return (
            self.fusion_head(fused),
            self.aux_head1(aux1_view),
            self.aux_head2(aux2_view),
        )

    def parameters(self):
        out = []
        for part in (self.backbone1, self.backbone2, self.fusion,
                     self.fusion_head, self.aux_head1, self.aux_head2):
            out.extend(part.parameters())
        return out


class UnimodalDetector:
    """One backbone plus one head; the single-modality comparison model."""

    def __init__(self, config: DetectorConfig, seed: int):
        rng = np.random.default_rng(seed)
        self.config = config
        self.seed = seed
        self.backbone = Backbone("backbone", config, rng)
        self.head = DetectionHead("head", config, rng)

    def forward(self, image):
        return self.head(self.backbone(image))

    def parameters(self):
        return self.backbone.parameters() + self.head.parameters()


# ---------------------------------------------------------------------------
# target assignment and losses
# ---------------------------------------------------------------------------


@dataclass
class LevelTargets:
    """Dense per-level targets: labels (classes, H, W), offsets (4, H, W),
    and the positive-cell mask (H, W)."""

    class_target: np.ndarray
    box_target: np.ndarray
    positive: np.ndarray


def _level_for_box(w, h, size_bounds):
    long_side = max(w, h)
    for level, bound in enumerate(size_bounds):
        if long_side <= bound:
            return level
    return len(size_bounds)


def assign_targets(boxes, classes, image_size, config: DetectorConfig):
    """Center-cell assignment of boxes to pyramid levels; first box wins a cell."""
    strides = config.strides
    out = []
    for stride in strides:
        grid = image_size // stride
        out.append(LevelTargets(
            class_target=np.zeros((config.class_count, grid, grid)),
            box_target=np.zeros((4, grid, grid)),
            positive=np.zeros((grid, grid), dtype=bool),
        ))
    for (cx, cy, w, h), class_id in zip(boxes, classes):
        if not 0 <= class_id < config.class_count:
            raise ValueError(f"class id {class_id} out of range")
        level = _level_for_box(w, h, config.size_bounds)
        stride = strides[level]
        grid = image_size // stride
        col = min(int(cx / stride), grid - 1)
        row = min(int(cy / stride), grid - 1)
        tgt = out[level]
        if tgt.positive[row, col]:
            continue
        tgt.positive[row, col] = True
        tgt.class_target[class_id, row, col] = 1.0
        tgt.box_target[:, row, col] = (
            cx / stride - col, cy / stride - row, w / stride, h / stride)
    return out


def batch_targets(samples_targets):
    """Stack per-sample LevelTargets lists into per-level batch arrays."""
    n_levels = len(samples_targets[0])
    stacked = []
    for level in range(n_levels):
        stacked.append(LevelTargets(
            class_target=np.stack([s[level].class_target for s in samples_targets]),
            box_target=np.stack([s[level].box_target for s in samples_targets]),
            positive=np.stack([s[level].positive for s in samples_targets]),
        ))
    return stacked


def detection_loss(pred: HeadOutput, targets, weights: LossWeights):
    """lambda_cls * BCE over every (cell, class) entry, all levels pooled,
    plus lambda_box * mean L1 over positive-cell offsets."""
    cls_sum = None
    cls_count = 0
    box_sum = None
    box_count = 0
    for logits, offsets, tgt in zip(pred.class_logits, pred.box_offsets, targets):
        labels = ad.Tensor(tgt.class_target)
        # per-entry stable BCE, summed; normalized across levels below
        per_entry = ad.sub(ad.softplus(logits), ad.mul(logits, labels))
        level_sum = ad.reduce_sum(per_entry)
        cls_sum = level_sum if cls_sum is None else ad.add(cls_sum, level_sum)
        cls_count += logits.size

        n_pos = int(tgt.positive.sum())
        if n_pos:
            mask = np.repeat(tgt.positive[:, None, :, :], 4, axis=1).astype(float)
            diff = ad.absolute(ad.sub(offsets, ad.Tensor(tgt.box_target)))
            masked = ad.mul(diff, ad.Tensor(mask))
            level_box = ad.reduce_sum(masked)
            box_sum = level_box if box_sum is None else ad.add(box_sum, level_box)
            box_count += 4 * n_pos

    loss = ad.mul(cls_sum, weights.lambda_cls / cls_count)
    if box_sum is not None and weights.lambda_box > 0:
        loss = ad.add(loss, ad.mul(box_sum, weights.lambda_box / box_count))
    return loss


def total_loss(fusion_loss, aux1_loss, aux2_loss, weights: LossWeights):
    """alpha * fusion + beta * aux1 + gamma * aux2."""
    out = ad.mul(fusion_loss, weights.alpha)
    out = ad.add(out, ad.mul(aux1_loss, weights.beta))
    return ad.add(out, ad.mul(aux2_loss, weights.gamma))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def parameter_arrays(model) -> dict:
    """Name -> array snapshot of a model's parameters."""
    out = {}
    for p in model.parameters():
        if p.name in out:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        out[p.name] = p.data.copy()
    return out


def load_parameter_arrays(model, arrays: dict):
    """Install a snapshot; names and shapes must match exactly."""
    params = {p.name: p for p in model.parameters()}
    if set(params) != set(arrays):
        missing = set(params) ^ set(arrays)
        raise ValueError(f"parameter name mismatch: {sorted(missing)[:4]}")
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise ValueError(
                f"{name}: shape {arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].copy()


def save_checkpoint(directory, model, extra: dict = None):
    """Write params.tensors plus a manifest with config, seed, and variant."""
    os.makedirs(directory, exist_ok=True)
    tensorio.write_tensors(os.path.join(directory, "params.tensors"),
                           parameter_arrays(model))
    manifest = {
        "variant": type(model).__name__,
        "config": asdict(model.config),
        "seed": model.seed,
    }
    if isinstance(model, DualBranchDetector):
        manifest["route_plan"] = [list(r) for r in model.plan.pass_matrix]
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_checkpoint(directory):
    """Rebuild the saved model; returns (model, manifest)."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = manifest["config"]
    config = DetectorConfig(
        input_channels=cfg["input_channels"],
        stage_widths=tuple(cfg["stage_widths"]),
        class_count=cfg["class_count"],
        size_bounds=tuple(cfg["size_bounds"]),
    )
    if manifest["variant"] == "DualBranchDetector":
        plan = router.RoutePlan.from_config(manifest["route_plan"])
        model = DualBranchDetector(config, manifest["seed"], plan)
    elif manifest["variant"] == "UnimodalDetector":
        model = UnimodalDetector(config, manifest["seed"])
    else:
        raise ValueError(f"unknown checkpoint variant {manifest['variant']!r}")
    arrays = tensorio.read_tensors(os.path.join(directory, "params.tensors"))
    load_parameter_arrays(model, arrays)
    return model, manifest
