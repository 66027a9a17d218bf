"""MobileViTV2_050 and baseline-CNN builders, static analysis, batched inference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .blocks import BottleneckBlock, BottleneckBlockCfg, MobileViTV2Block, MobileViTV2BlockCfg
from .errors import ConfigError, ContractError, DimensionError
from .layers import BatchNorm2d, Conv2d, ConvBNAct, Dropout, Linear, Module, Sequential
from .tensor import OpCounter, Tensor, counting, make_rng, no_grad


@dataclass(frozen=True)
class StageSpec:
    out_ch: int
    stride: int
    bottlenecks: int = 1
    attn_dim: int | None = None
    depth: int = 0


@dataclass(frozen=True)
class StageSchedule:
    stem_ch: int
    stages: tuple[StageSpec, ...]
    expand_ratio: float = 2.0

    @property
    def channels(self) -> list[int]:
        return [self.stem_ch] + [s.out_ch for s in self.stages]


MOBILEVITV2_050 = StageSchedule(
    stem_ch=16,
    stages=(
        StageSpec(32, 1),
        StageSpec(64, 2, bottlenecks=2),
        StageSpec(128, 2, attn_dim=64, depth=2),
        StageSpec(192, 2, attn_dim=96, depth=4),
        StageSpec(256, 2, attn_dim=128, depth=3),
    ),
)

HEAD_DROPOUT = 0.1


class ModelGraph(Module):
    """A classifier: ``features`` produce a pooled vector, ``head`` maps it to logits."""

    input_size: int = 224
    num_classes: int

    def forward_features(self, x: Tensor, rng=None) -> Tensor:
        raise NotImplementedError

    def classify(self, features: Tensor, rng=None) -> Tensor:
        raise NotImplementedError

    def forward(self, x, rng=None, **_):
        return self.classify(self.forward_features(x, rng=rng), rng=rng)

    def backbone_parameters(self) -> list:
        return [p for name, p in self.named_parameters() if not name.startswith("head.")]

    def head_parameters(self) -> list:
        return [p for name, p in self.named_parameters() if name.startswith("head.")]

    def set_backbone_frozen(self, frozen: bool) -> None:
        """Freeze batch-norm statistics and parameters outside the head."""
        for name, mod in self.named_modules():
            if isinstance(mod, BatchNorm2d) and not name.startswith("head"):
                mod.frozen = frozen


class MobileViTV2(ModelGraph):
    def __init__(self, num_classes: int, schedule: StageSchedule = MOBILEVITV2_050, seed: int = 0):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        rng = make_rng(seed)
        self.num_classes = num_classes
        self.schedule = schedule
        self.stem = ConvBNAct(rng, 3, schedule.stem_ch, 3, stride=2)
        stages = []
        cin = schedule.stem_ch
        for spec in schedule.stages:
            blocks = []
            for i in range(spec.bottlenecks):
                cfg = BottleneckBlockCfg(cin, spec.out_ch, spec.stride if i == 0 else 1, schedule.expand_ratio)
                blocks.append(BottleneckBlock(cfg, rng))
                cin = spec.out_ch
            if spec.attn_dim is not None:
                blocks.append(MobileViTV2Block(MobileViTV2BlockCfg(spec.out_ch, spec.attn_dim, spec.depth), rng))
            stages.append(Sequential(*blocks))
        self.stages = Sequential(*stages)
        self.head_drop = Dropout(HEAD_DROPOUT)
        self.head = Linear(rng, cin, num_classes)

    def stage_outputs(self, x: Tensor, rng=None) -> list[Tensor]:
        """Activations after the stem and after each stage."""
        outs = [self.stem(x)]
        for stage in self.stages:
            outs.append(stage(outs[-1], rng=rng))
        return outs

    def forward_features(self, x, rng=None):
        _check_input(x, self.input_size)
        y = self.stages(self.stem(x), rng=rng)
        pooled = ops.adaptive_avg_pool2d(y)
        return ops.reshape(pooled, (pooled.shape[0], pooled.shape[1]))

    def classify(self, features, rng=None):
        return self.head(self.head_drop(features, rng=rng))


class BaselineCNN(ModelGraph):
    """Five conv+ReLU+maxpool stages, four batch norms, two dense layers, three dropouts."""

    input_size = 256
    widths = (32, 64, 128, 256, 256)
    hidden = 840

    def __init__(self, num_classes: int, seed: int = 0):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        rng = make_rng(seed)
        self.num_classes = num_classes
        cin = 3
        convs = []
        for i, width in enumerate(self.widths):
            convs.append(Conv2d(rng, cin, width, 3, bias=True))
            cin = width
        self.convs = Sequential(*convs)
        self.norms = Sequential(*[BatchNorm2d(w) for w in self.widths[:4]])
        self.conv_drop = Dropout(0.25)
        flat = cin * (self.input_size // 2 ** len(self.widths)) ** 2
        self.fc = Linear(rng, flat, self.hidden, std=float(np.sqrt(2.0 / flat)))
        self.fc_drop = Dropout(0.5)
        self.head_drop = Dropout(0.25)
        self.head = Linear(rng, self.hidden, num_classes, std=float(np.sqrt(1.0 / self.hidden)))

    def forward_features(self, x, rng=None):
        _check_input(x, self.input_size)
        for i, conv in enumerate(self.convs):
            x = ops.relu(conv(x))
            if i < len(self.norms):
                x = self.norms[i](x)
            x = ops.max_pool2d(x, 2)
        x = self.conv_drop(x, rng=rng)
        x = ops.reshape(x, (x.shape[0], -1))
        return self.fc_drop(ops.relu(self.fc(x)), rng=rng)

    def classify(self, features, rng=None):
        return self.head(self.head_drop(features, rng=rng))


def _check_input(x: Tensor, size: int) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"expected [B, 3, {size}, {size}] input, got {x.shape}")
    if x.shape[2:] != (size, size):
        raise DimensionError(f"input is {x.shape[2]}x{x.shape[3]}; resize images to {size}x{size} first")


def build_mobilevitv2_050(num_classes: int, seed: int = 0) -> MobileViTV2:
    return MobileViTV2(num_classes, MOBILEVITV2_050, seed).eval()


def build_baseline_cnn(num_classes: int, seed: int = 0) -> BaselineCNN:
    return BaselineCNN(num_classes, seed).eval()


def count_params(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def estimate_model_size_bytes(model: Module) -> int:
    return 4 * count_params(model)


def count_macs(model: ModelGraph, input_shape=(1, 3, 224, 224)) -> int:
    """Multiply-accumulates of one eval-mode forward pass (1 MAC reported as 1 FLOP)."""
    return count_ops(model, input_shape).macs


def count_ops(model: ModelGraph, input_shape=(1, 3, 224, 224)) -> OpCounter:
    was_training = model.training
    model.eval()
    try:
        with no_grad(), counting() as counter:
            model(Tensor(np.zeros(input_shape, np.float32)))
    finally:
        model.train(was_training)
    return counter


def predict(model: ModelGraph, batch: Tensor) -> Tensor:
    """Class probabilities for a preprocessed batch."""
    if model.training:
        raise ContractError("predict() needs the model in eval mode")
    with no_grad():
        return ops.softmax(model(batch), axis=-1)
