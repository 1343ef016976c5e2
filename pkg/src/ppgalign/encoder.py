"""Staged 1D convolutional encoder (Net1D family) and the shared-space projector.

Block layout, innermost first:

    ConvBlock type 1   BN(c_in) -> Swish -> Dropout -> Conv1d(k=1)
    ConvBlock type 2   BN(c_in) -> Swish -> Dropout -> Conv1d(k=3, pad=1)
    ConvBlock type 3   Conv1d(k=3, pad=1) -> BN(c_out) -> Swish          (stem)
    BasicBlock         CB1 -> CB2 -> CB1 -> SE attention [-> MaxPool(2, 2)]
    BasicStage_n       one pooling BasicBlock then n-1 non-pooling ones

The trunk ends in a temporal mean-pool producing a 1024-d embedding for the
default configuration.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

INPUT_LENGTH = 1250

# (block_count, c_in, c_out) per stage, after the 1 -> 64 stem.
DEFAULT_STAGES: tuple[tuple[int, int, int], ...] = (
    (2, 64, 64),
    (2, 64, 160),
    (2, 160, 160),
    (3, 160, 400),
    (3, 400, 400),
    (1, 400, 1024),
)

# Reference per-stage trainable parameter counts, stem first.
REFERENCE_STAGE_PARAMS: tuple[int, ...] = (
    384, 32_064, 156_768, 172_320, 1_413_720, 1_510_200, 2_565_408,
)
REFERENCE_TOTAL_PARAMS = 5_850_864

# Reference per-stage output shapes [C, L] for a 1250-sample input.
REFERENCE_STAGE_SHAPES: tuple[tuple[int, int], ...] = (
    (64, 1250), (64, 625), (160, 313), (160, 157), (400, 79), (400, 40), (1024, 20),
)


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class Space(enum.Enum):
    ENCODER_1024 = "encoder"
    SHARED_256 = "shared"


@dataclass(frozen=True)
class EncoderConfig:
    stage_specs: tuple[tuple[int, int, int], ...] = DEFAULT_STAGES
    stem_channels: int = 64
    input_length: int = INPUT_LENGTH
    se_reduction: int = 2
    dropout_p: float = 0.5
    # Width of the inner CB2/CB1 pair relative to c_out; 1.0 is the literal block table.
    bottleneck_ratio: float = 1.0
    # Channels per group in the kernel-3 conv; None means a dense conv.
    # 16 reproduces the reference per-stage parameter counts exactly.
    group_width: int | None = None
    # Parameter-free shortcut (pooled identity, zero-padded channels) as in Net1D.
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(
            self, "stage_specs", tuple(tuple(int(v) for v in s) for s in self.stage_specs)
        )
        self.validate()

    def validate(self) -> None:
        if not self.stage_specs:
            raise ConfigError("stage_specs is empty")
        prev = self.stem_channels
        for i, (n, c_in, c_out) in enumerate(self.stage_specs):
            if n < 1:
                raise ConfigError(f"stage {i}: block count must be >= 1, got {n}")
            if c_in != prev:
                raise ConfigError(
                    f"stage {i}: c_in={c_in} does not match previous c_out={prev}"
                )
            prev = c_out
        if not 0.0 < self.bottleneck_ratio <= 1.0:
            raise ConfigError(f"bottleneck_ratio must be in (0, 1], got {self.bottleneck_ratio}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.se_reduction < 1:
            raise ConfigError("se_reduction must be >= 1")
        if self.input_length < 1:
            raise ConfigError("input_length must be positive")

    @property
    def out_dim(self) -> int:
        return self.stage_specs[-1][2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_specs"] = [list(s) for s in self.stage_specs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        if "stage_specs" in d:
            d["stage_specs"] = tuple(tuple(s) for s in d["stage_specs"])
        return cls(**d)

    @classmethod
    def grouped(cls, **overrides) -> "EncoderConfig":
        """Variant whose parameter counts match the reference per-stage table."""
        return cls(**{"group_width": 16, **overrides})

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        """Narrow encoder with the same stage topology, sized for single-CPU training."""
        base = dict(
            stem_channels=8,
            stage_specs=((1, 8, 8), (1, 8, 16), (1, 16, 32), (1, 32, 32), (1, 32, 64), (1, 64, 128)),
            dropout_p=0.0,
        )
        base.update(overrides)
        return cls(**base)


class Swish(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(x)


class ConvBlock(nn.Module):
    """Pre-activation conv unit (types 1 and 2)."""

    def __init__(self, c_in, c_out, kernel_size, dropout_p, groups=1):
        super().__init__()
        self.bn = nn.BatchNorm1d(c_in)
        self.act = Swish()
        self.drop = nn.Dropout(dropout_p)
        self.conv = nn.Conv1d(c_in, c_out, kernel_size, padding=kernel_size // 2, groups=groups)

    def forward(self, x):
        return self.conv(self.drop(self.act(self.bn(x))))


class StemBlock(nn.Module):
    """Post-activation conv unit (type 3)."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, 3, padding=1)
        # BN over c_out: the only reading consistent with 384 stem parameters.
        self.bn = nn.BatchNorm1d(c_out)
        self.act = Swish()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduction=2):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.act = Swish()
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x):
        s = x.mean(dim=-1)
        return torch.sigmoid(self.fc2(self.act(self.fc1(s))))

    def forward(self, x):
        return x * self.gate(x).unsqueeze(-1)


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, cfg: EncoderConfig, pool: bool):
        super().__init__()
        mid = max(1, int(round(c_out * cfg.bottleneck_ratio)))
        groups = 1
        if cfg.group_width:
            if mid % cfg.group_width:
                raise ConfigError(f"width {mid} not divisible by group_width {cfg.group_width}")
            groups = mid // cfg.group_width
        self.c_in, self.c_out = c_in, c_out
        self.residual = cfg.residual
        self.conv1 = ConvBlock(c_in, mid, 1, cfg.dropout_p)
        self.conv2 = ConvBlock(mid, mid, 3, cfg.dropout_p, groups=groups)
        self.conv3 = ConvBlock(mid, c_out, 1, cfg.dropout_p)
        self.se = SqueezeExcite(c_out, cfg.se_reduction)
        self.pool = nn.MaxPool1d(2, 2, ceil_mode=True) if pool else None

    def shortcut(self, x):
        if self.c_out == self.c_in:
            return x
        extra = self.c_out - self.c_in
        if extra < 0:
            return x[:, : self.c_out]
        lo = extra // 2
        return F.pad(x, (0, 0, lo, extra - lo))

    def forward(self, x):
        out = self.se(self.conv3(self.conv2(self.conv1(x))))
        if self.residual:
            out = out + self.shortcut(x)
        if self.pool is not None:
            out = self.pool(out)
        return out


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = StemBlock(1, cfg.stem_channels)
        stages = []
        for n, c_in, c_out in cfg.stage_specs:
            blocks = [BasicBlock(c_in, c_out, cfg, pool=True)]
            blocks += [BasicBlock(c_out, c_out, cfg, pool=False) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def trunk(self, x):
        """Yield the feature map after the stem and after each stage."""
        if x.dim() == 2:
            x = x.unsqueeze(1)
        x = self.stem(x)
        yield x
        for stage in self.stages:
            x = stage(x)
            yield x

    def forward(self, x):
        for h in self.trunk(x):
            pass
        return h.mean(dim=-1)

    def stage_shapes(self, x) -> list[tuple[int, ...]]:
        with torch.no_grad():
            shapes = [tuple(h.shape) for h in self.trunk(x)]
        return shapes + [(shapes[-1][0], shapes[-1][1])]


class Projector(nn.Module):
    def __init__(self, in_dim=1024, hidden_dim=512, out_dim=256):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, z):
        return self.fc2(F.gelu(self.fc1(z)))


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Kaiming-uniform (fan-in) weights, zero biases, unit/zero batch-norm affine."""
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm1d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()


def build_encoder(cfg: EncoderConfig | None = None, seed: int = 0) -> Encoder:
    cfg = cfg or EncoderConfig()
    enc = Encoder(cfg)
    g = torch.Generator().manual_seed(int(seed))
    init_parameters(enc, g)
    return enc


def build_projector(in_dim: int = 1024, seed: int = 0, hidden_dim: int = 512, out_dim: int = 256) -> Projector:
    proj = Projector(in_dim, hidden_dim, out_dim)
    init_parameters(proj, torch.Generator().manual_seed(int(seed)))
    return proj


@dataclass
class EmbeddingBatch:
    values: torch.Tensor
    space: Space

    def __post_init__(self):
        if self.values.dim() != 2 or self.values.shape[0] < 1:
            raise InputError(f"embedding batch must be N x D with N >= 1, got {tuple(self.values.shape)}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy()


def _as_signal_tensor(batch, length: int) -> torch.Tensor:
    x = batch if torch.is_tensor(batch) else torch.from_numpy(np.array(batch))
    if not x.is_floating_point():
        x = x.float()
    if x.dim() == 3 and x.shape[1] == 1:
        x = x[:, 0]
    if x.dim() != 2:
        raise InputError(f"expected an N x {length} signal matrix, got shape {tuple(x.shape)}")
    if x.shape[1] != length:
        raise InputError(f"expected input length {length}, got {x.shape[1]}")
    if not torch.isfinite(x).all():
        raise InputError("input contains non-finite samples")
    return x


def encoder_forward(enc: Encoder, batch) -> EmbeddingBatch:
    """Run the encoder on an N x L signal matrix using its current train/eval mode."""
    x = _as_signal_tensor(batch, enc.cfg.input_length)
    x = x.to(next(enc.parameters()).dtype)
    return EmbeddingBatch(enc(x), Space.ENCODER_1024)


def projector_forward(proj: Projector, z: EmbeddingBatch) -> EmbeddingBatch:
    if z.space is not Space.ENCODER_1024:
        raise InputError(f"projector expects encoder-space embeddings, got {z.space.name}")
    return EmbeddingBatch(proj(z.values), Space.SHARED_256)


def count_parameters(module: nn.Module) -> int:
    # Running statistics are buffers, not parameters, so they never appear here.
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


@dataclass
class ParameterReport:
    stage_names: list[str]
    stage_counts: list[int]
    reference_counts: list[int] | None
    total: int
    reference_total: int = REFERENCE_TOTAL_PARAMS

    def rows(self):
        ref = self.reference_counts or [None] * len(self.stage_counts)
        return list(zip(self.stage_names, self.stage_counts, ref))

    def format(self) -> str:
        lines = [f"{'stage':<24}{'count':>12}{'reference':>12}{'diff':>12}"]
        for name, n, r in self.rows():
            if r is None:
                lines.append(f"{name:<24}{n:>12,}{'-':>12}{'-':>12}")
            else:
                lines.append(f"{name:<24}{n:>12,}{r:>12,}{n - r:>+12,}")
        lines.append(
            f"{'total':<24}{self.total:>12,}{self.reference_total:>12,}"
            f"{self.total - self.reference_total:>+12,}"
        )
        return "\n".join(lines)


def parameter_count(enc: Encoder) -> ParameterReport:
    """Trainable scalars per stage, with the reference counts alongside when comparable."""
    names = [f"stem(1->{enc.cfg.stem_channels})"]
    counts = [count_parameters(enc.stem)]
    for (n, c_in, c_out), stage in zip(enc.cfg.stage_specs, enc.stages):
        names.append(f"stage{n}({c_in}->{c_out})")
        counts.append(count_parameters(stage))
    comparable = (
        enc.cfg.stage_specs == DEFAULT_STAGES and enc.cfg.stem_channels == 64
    )
    return ParameterReport(
        stage_names=names,
        stage_counts=counts,
        reference_counts=list(REFERENCE_STAGE_PARAMS) if comparable else None,
        total=sum(counts),
    )


def compute_gradients(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """d(loss)/d(param) for each tensor; parameters the loss does not reach get zeros."""
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
