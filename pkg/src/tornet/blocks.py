"""Broadcast residual blocks and the normalizations they use.

A BC ResBlock splits into a 2D branch ``f2`` (3x1 frequency-depthwise conv +
SubSpectral Norm) and a 1D temporal branch ``f1`` that runs on the
frequency-averaged ``f2`` output and is broadcast back over frequency:

    normal:      y = x + f2(x) + broadcast(f1(avgpool_f(f2(x))))
    transition:  x' = relu(bn(conv1x1(x)));  y = f2(x') + broadcast(f1(avgpool_f(f2(x'))))

An AB Block chains one leading (usually transition) block, ``n_normal``
normal blocks and a trailing 3x3 conv + BN + ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .layers import BatchNorm2d, Conv2d, Module
from .numerics import Parameter, Tensor

Shape = Tuple[int, int, int]


def subspectral_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    groups: int,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch norm applied separately to ``groups`` contiguous frequency bands.

    Band ``s`` of channel ``c`` is normalized with its own statistics and
    affine entry ``c * groups + s``; ``groups == 1`` is plain batch norm.
    """
    x = nx.as_tensor(x)
    N, C, F, T = x.shape
    if groups < 1 or F % groups:
        raise ConfigError(f"subspectral_norm: {groups} sub-bands do not divide frequency dimension F={F}")
    if nx.as_tensor(gamma).shape != (C * groups,):
        raise ConfigError(f"subspectral_norm: gamma needs C*S={C * groups} entries, got {nx.as_tensor(gamma).shape}")
    # [N, C, F, T] -> [N, C*S, F/S, T] keeps bands contiguous: index c*S + s
    banded = nx.reshape(x, (N, C * groups, F // groups, T))
    out = nx.batchnorm2d(banded, gamma, beta, running_mean, running_var, training, momentum, eps)
    return nx.reshape(out, (N, C, F, T))


def freq_instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-frequency-bin normalization over channels and time.

    ``out[n,c,f,t] = (x[n,c,f,t] - mu[n,f]) / sqrt(var[n,f] + eps)`` with the
    statistics taken over ``(c, t)``.  No affine parameters, no running
    state: train and eval behave identically.
    """
    return nx.instance_norm(x, axes=(1, 3), eps=eps, op="freq_instance_norm")


class SubSpectralNorm(Module):
    def __init__(self, channels: int, groups: int = 5, momentum: float = 0.1, eps: float = 1e-5, *, dtype=np.float32):
        super().__init__()
        self.channels, self.groups = channels, groups
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels * groups, dtype=dtype))
        self.beta = Parameter(np.zeros(channels * groups, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels * groups, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels * groups, dtype=dtype))

    def forward(self, x, rng=None):
        return subspectral_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.groups, self.training, self.momentum, self.eps,
        )


class FreqInstanceNorm(Module):
    def __init__(self, eps: float = 1e-5):
        super().__init__()
        self.eps = eps

    def forward(self, x, rng=None):
        return freq_instance_norm(x, self.eps)


@dataclass(frozen=True)
class BCResBlockSpec:
    in_channels: int
    out_channels: int
    stride: Tuple[int, int] = (1, 1)
    kind: str = "normal"
    ssn_groups: int = 5
    dropout_p: float = 0.5

    def __post_init__(self):
        if self.kind not in ("normal", "transition"):
            raise ConfigError(f"unknown BC ResBlock kind {self.kind!r}")
        if self.kind == "normal" and (self.in_channels != self.out_channels or tuple(self.stride) != (1, 1)):
            raise ConfigError(
                f"normal BC ResBlock needs equal channels and stride (1, 1), "
                f"got {self.in_channels}->{self.out_channels} stride {tuple(self.stride)}"
            )
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass(frozen=True)
class ABBlockSpec:
    in_channels: int
    out_channels: int
    stride: Tuple[int, int] = (1, 1)
    n_normal: int = 1
    last_conv: bool = True
    last_conv_kernel: Tuple[int, int] = (3, 3)
    leading: str = "transition"

    def __post_init__(self):
        if self.n_normal < 0:
            raise ConfigError(f"n_normal must be >= 0, got {self.n_normal}")
        if self.leading == "normal" and (self.in_channels != self.out_channels or tuple(self.stride) != (1, 1)):
            raise ConfigError("the leading block of an AB Block must be a transition block when channels or stride change")


class BCResBlock(Module):
    """One broadcast residual block (normal or transition).

    Both frequency and time strides sit in the 3x1 depthwise conv of ``f2``
    so the broadcast term is computed on the output grid of ``f2``.
    """

    def __init__(self, spec: BCResBlockSpec, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        c = spec.out_channels
        if spec.kind == "transition":
            self.proj = Conv2d(spec.in_channels, c, 1, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm2d(c, dtype=dtype)
        self.dw_f = Conv2d(c, c, (3, 1), stride=spec.stride, padding=(1, 0), groups=c, rng=rng, dtype=dtype)
        self.ssn = SubSpectralNorm(c, spec.ssn_groups, dtype=dtype)
        self.dw_t = Conv2d(c, c, (1, 3), padding=(0, 1), groups=c, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(c, dtype=dtype)
        self.pw = Conv2d(c, c, 1, rng=rng, dtype=dtype)

    def f2(self, x: Tensor) -> Tensor:
        return self.ssn(self.dw_f(x))

    def f1(self, x: Tensor, rng=None) -> Tensor:
        h = self.pw(nx.swish(self.bn(self.dw_t(x))))
        return nx.dropout(h, self.spec.dropout_p, self.training, rng, style="channel")

    def forward(self, x, rng=None):
        x = nx.as_tensor(x)
        if x.shape[1] != self.spec.in_channels:
            raise ConfigError(f"BC ResBlock expects {self.spec.in_channels} input channels, got {x.shape[1]}")
        if self.spec.kind == "transition":
            x = nx.relu(self.proj_bn(self.proj(x)))
        main = self.f2(x)
        temporal = self.f1(nx.freq_avgpool(main), rng)
        broadcast = nx.broadcast_freq(temporal, main.shape[2])
        if self.spec.kind == "normal":
            return nx.add(x, main, broadcast)
        return nx.add(main, broadcast)

    def out_shape(self, shape: Shape) -> Shape:
        C, F, T = shape
        if C != self.spec.in_channels:
            raise ConfigError(f"expects {self.spec.in_channels} input channels, got {C}")
        out = self.dw_f.out_shape((self.spec.out_channels, F, T))
        if out[1] % self.spec.ssn_groups:
            raise ConfigError(
                f"SubSpectral Norm with {self.spec.ssn_groups} sub-bands does not divide frequency dimension {out[1]}"
            )
        return out


class ABBlock(Module):
    """Alternating Broadcast Block: leading block, normal blocks, trailing conv."""

    def __init__(
        self,
        spec: ABBlockSpec,
        *,
        ssn_groups: int = 5,
        dropout_p: float = 0.5,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        super().__init__()
        self.spec = spec
        c = spec.out_channels
        lead = BCResBlockSpec(spec.in_channels, c, tuple(spec.stride), spec.leading, ssn_groups, dropout_p)
        self.blocks = []
        name = "trans" if spec.leading == "transition" else "norm0"
        setattr(self, name, BCResBlock(lead, rng=rng, dtype=dtype))
        self.blocks.append(getattr(self, name))
        for i in range(1, spec.n_normal + 1):
            block = BCResBlock(BCResBlockSpec(c, c, (1, 1), "normal", ssn_groups, dropout_p), rng=rng, dtype=dtype)
            setattr(self, f"norm{i}", block)
            self.blocks.append(block)
        if spec.last_conv:
            kF, kT = spec.last_conv_kernel
            self.last_conv = Conv2d(c, c, (kF, kT), padding=(kF // 2, kT // 2), rng=rng, dtype=dtype)
            self.last_bn = BatchNorm2d(c, dtype=dtype)

    def forward(self, x, rng=None):
        for block in self.blocks:
            x = block(x, rng)
        if self.spec.last_conv:
            x = nx.relu(self.last_bn(self.last_conv(x)))
        return x

    def out_shape(self, shape: Shape) -> Shape:
        for name, block in zip(self._block_names(), self.blocks):
            try:
                shape = block.out_shape(shape)
            except ConfigError as exc:
                raise ConfigError(f"{name}: {exc}") from None
        if self.spec.last_conv:
            shape = self.last_conv.out_shape(shape)
        return shape

    def _block_names(self):
        return [n for n, m in self.children() if isinstance(m, BCResBlock)]


def bc_resblock_forward(x: Tensor, block: BCResBlock, rng: Optional[np.random.Generator] = None) -> Tensor:
    return block(x, rng)


def ab_block_forward(x: Tensor, block: ABBlock, rng: Optional[np.random.Generator] = None) -> Tensor:
    return block(x, rng)
