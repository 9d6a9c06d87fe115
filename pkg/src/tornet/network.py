"""TorNet assembly, ablation variants, shape trace and parameter accounting.

Layout of the default model (channel x frequency x time):

    stage1   conv3x3 -> BN -> ReLU -> maxpool 2x2      3x40x512 -> 32x20x256
    stage2   AB(32->64, (2,1)) -> AB(64->128, (2,1))   + shortcut, then freq IN
    stage3   AB(128->256) -> AB(256->512)               + shortcut, then freq IN
    head     [B, T, C*F] -> FC(2560->128) -> ReLU -> dropout -> mean over T -> FC(128->2)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import numerics as nx
from .blocks import ABBlock, ABBlockSpec, FreqInstanceNorm
from .errors import ConfigError
from .layers import BatchNorm2d, Conv2d, Linear, MaxPool2d, Module
from .numerics import RngStreams, Tensor

StageSpec = Tuple[Tuple[int, int, Tuple[int, int]], ...]


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    n_mels: int = 40
    n_frames: int = 512
    stem_channels: int = 32
    stem_pool: Tuple[int, int] = (2, 2)
    stage2: StageSpec = ((32, 64, (2, 1)), (64, 128, (2, 1)))
    stage3: StageSpec = ((128, 256, (1, 1)), (256, 512, (1, 1)))
    use_instance_norm: bool = True
    use_last_conv: bool = True
    n_normal: int = 1
    ssn_groups: int = 5
    block_dropout: float = 0.5
    head_hidden: int = 128
    head_dropout: float = 0.5
    n_classes: int = 2

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.in_channels < 1 or self.n_mels < 1 or self.n_frames < 1:
            raise ConfigError("input dimensions must be positive")
        if not self.stage2 or not self.stage3:
            raise ConfigError("stage2 and stage3 need at least one AB Block each")

    def to_dict(self) -> dict:
        return _listify(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("stage2", "stage3"):
            if key in kw:
                kw[key] = tuple((int(a), int(b), (int(s[0]), int(s[1]))) for a, b, s in kw[key])
        if "stem_pool" in kw:
            kw["stem_pool"] = tuple(kw["stem_pool"])
        return cls(**kw)

    def with_variant(self, name: str) -> "ModelConfig":
        return dataclasses.replace(self, **VARIANTS[name])


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


VARIANTS: Dict[str, dict] = {
    "default": {},
    "no-instancenorm": {"use_instance_norm": False},
    "no-last-conv": {"use_last_conv": False},
    "only-transition": {"n_normal": 0},
}

# lower half of the ablation table, keyed by variant name
ABLATION_LABELS = {
    "no-last-conv": "TorNet (AB Block without last conv)",
    "only-transition": "TorNet (only Transition Block)",
    "no-instancenorm": "TorNet without InstanceNorm",
    "default": "TorNet with InstanceNorm",
}


def ablation_configs(base: Optional[ModelConfig] = None) -> Dict[str, ModelConfig]:
    base = base or ModelConfig()
    return {name: base.with_variant(name) for name in ABLATION_LABELS}


@dataclass
class TraceRow:
    name: str
    operator: str
    stride: str
    shape: Tuple[int, ...]
    params: int = 0

    def line(self) -> str:
        shape = "x".join(str(s) for s in self.shape)
        return f"{self.name:<18s} {self.operator:<16s} {self.stride:<8s} {shape:<14s} {self.params:>10,d}"


def _stride_label(stride) -> str:
    sF, sT = stride
    return str(sF) if sF == sT else f"({sF}, {sT})"


class Stage(Module):
    """Residual stage: AB Blocks on the main path, 1x1 conv + BN (+ maxpool) shortcut."""

    def __init__(self, blocks: List[ABBlock], in_channels: int, out_channels: int, pool, use_in: bool, *, rng, dtype):
        super().__init__()
        self.blocks = blocks
        for i, block in enumerate(blocks, 1):
            setattr(self, f"ab{i}", block)
        self.shortcut = Shortcut(in_channels, out_channels, pool, rng=rng, dtype=dtype)
        self.use_in = use_in
        if use_in:
            self.inorm = FreqInstanceNorm()

    def forward(self, x, rng=None):
        main = x
        for block in self.blocks:
            main = block(main, rng)
        y = nx.add(main, self.shortcut(x))
        return self.inorm(y) if self.use_in else y


class Shortcut(Module):
    def __init__(self, in_channels: int, out_channels: int, pool, *, rng, dtype):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)
        self.pool = tuple(pool)

    def forward(self, x, rng=None):
        y = self.bn(self.conv(x))
        if self.pool != (1, 1):
            y = nx.maxpool2d(y, self.pool, self.pool)
        return y


class Head(Module):
    """Per-frame FC, ReLU, dropout, temporal mean, output FC."""

    def __init__(self, in_features: int, hidden: int, n_classes: int, dropout: float, *, rng, dtype):
        super().__init__()
        self.fc1 = Linear(in_features, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, n_classes, rng=rng, dtype=dtype)
        self.dropout = dropout

    def forward(self, x, rng=None):
        h = nx.relu(self.fc1(x))
        h = nx.dropout(h, self.dropout, self.training, rng)
        return self.fc2(nx.mean(h, axis=1))


class TorNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config
        init = RngStreams(seed).child("init")
        self.stage1 = Stem(config, rng=init.get("stage1"), dtype=dtype)
        stages = []
        in_c = config.stem_channels
        for k, spec in ((2, config.stage2), (3, config.stage3)):
            rng = init.get(f"stage{k}")
            blocks = []
            pool = [1, 1]
            for cin, cout, stride in spec:
                ab = ABBlockSpec(cin, cout, tuple(stride), config.n_normal, config.use_last_conv)
                blocks.append(ABBlock(ab, ssn_groups=config.ssn_groups, dropout_p=config.block_dropout, rng=rng, dtype=dtype))
                pool[0] *= stride[0]
                pool[1] *= stride[1]
            stage = Stage(blocks, in_c, spec[-1][1], pool, config.use_instance_norm, rng=rng, dtype=dtype)
            setattr(self, f"stage{k}", stage)
            stages.append(stage)
            in_c = spec[-1][1]
        self.stages = stages
        trace = self.shape_trace()  # validates the shape chain before any compute
        C, F, T = trace[-1].shape
        self.head_frames = T
        self.head = Head(C * F, config.head_hidden, config.n_classes, config.head_dropout,
                         rng=init.get("head"), dtype=dtype)
        self.assign_names()

    def forward(self, x, rng=None):
        x = nx.as_tensor(x)
        cfg = self.config
        expected = (cfg.in_channels, cfg.n_mels, cfg.n_frames)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ConfigError(f"input batch must be [B, {', '.join(map(str, expected))}], got {x.shape}")
        return self.head(self.features(x, rng), rng)

    def features(self, x: Tensor, rng=None) -> Tensor:
        """Everything before the head, as ``[B, time, channels * freq]``."""
        h = self.stage1(x, rng)
        for stage in self.stages:
            h = stage(h, rng)
        B, C, F, T = h.shape
        return nx.reshape(nx.transpose(h, (0, 3, 1, 2)), (B, T, C * F))

    def shape_trace(self) -> List[TraceRow]:
        """Symbolic per-layer output shapes; raises ConfigError at the first broken link."""
        cfg = self.config
        shape = (cfg.in_channels, cfg.n_mels, cfg.n_frames)
        rows = [TraceRow("input", "-", "-", shape)]
        stem = self.stage1
        shape = stem.conv.out_shape(shape)
        rows.append(TraceRow("stage1.conv", "conv2d 3x3", "1", shape, stem.conv.num_parameters() + stem.bn.num_parameters()))
        shape = stem.pool.out_shape(shape)
        rows.append(TraceRow("stage1.maxpool", f"maxpool {stem.pool.kernel[0]}x{stem.pool.kernel[1]}",
                             _stride_label(stem.pool.stride), shape))
        for k, stage in ((2, self.stage2), (3, self.stage3)):
            stage_in = shape
            for i, block in enumerate(stage.blocks, 1):
                name = f"stage{k}.ab{i}"
                try:
                    shape = block.out_shape(shape)
                except ConfigError as exc:
                    raise ConfigError(f"{name}: {exc}") from None
                rows.append(TraceRow(name, "AB Block", _stride_label(block.spec.stride), shape, block.num_parameters()))
            sc = stage.shortcut
            sc_shape = sc.conv.out_shape(stage_in)
            sc_shape = (sc_shape[0], sc_shape[1] // sc.pool[0], sc_shape[2] // sc.pool[1])
            if sc_shape != shape:
                raise ConfigError(f"stage{k}.shortcut: output {sc_shape} does not match main path {shape}")
            rows.append(TraceRow(f"stage{k}.shortcut", "conv1x1+BN+pool", _stride_label(sc.pool), sc_shape,
                                 sc.num_parameters()))
            if stage.use_in:
                rows.append(TraceRow(f"stage{k}.in", "IN", "-", shape))
        C, F, T = shape
        if hasattr(self, "head"):
            rows.append(TraceRow("reshape", "to [T, C*F]", "-", (T, C * F)))
            rows.append(TraceRow("head.fc1", "linear", "-", (T, self.config.head_hidden), self.head.fc1.num_parameters()))
            rows.append(TraceRow("head.fc2", "mean_t+linear", "-", (self.config.n_classes,), self.head.fc2.num_parameters()))
        return rows


class Stem(Module):
    def __init__(self, config: ModelConfig, *, rng, dtype):
        super().__init__()
        self.conv = Conv2d(config.in_channels, config.stem_channels, 3, padding=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(config.stem_channels, dtype=dtype)
        self.pool = MaxPool2d(config.stem_pool)

    def forward(self, x, rng=None):
        return self.pool(nx.relu(self.bn(self.conv(x))))


def build_model(config: Optional[ModelConfig] = None, seed: int = 0, dtype=np.float32) -> TorNet:
    return TorNet(config or ModelConfig(), seed, dtype)


def param_count(model: Module) -> int:
    """Scalar learnable parameters (running statistics excluded)."""
    return model.num_parameters()


def param_breakdown(model: TorNet) -> Dict[str, int]:
    out: Dict[str, int] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("stage2", "stage3") else parts[0]
        out[key] = out.get(key, 0) + p.data.size
    return out


def format_trace(model: TorNet) -> str:
    header = f"{'layer':<18s} {'operator':<16s} {'stride':<8s} {'output':<14s} {'params':>10s}"
    lines = [header, "-" * len(header)]
    lines += [row.line() for row in model.shape_trace()]
    lines.append("-" * len(header))
    lines.append(f"{'total':<60s} {param_count(model):>10,d}")
    return "\n".join(lines)
