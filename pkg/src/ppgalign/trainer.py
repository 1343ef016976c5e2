"""Optimisation loop: warmup + cosine schedule, global-norm clipping, AdamW,
contrastive pretraining with best-validation selection, and multi-label fine-tuning.
"""
from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .contrastive import Temperature, l2_normalize, symmetric_info_nce
from .encoder import Encoder, EncoderConfig, Projector, init_parameters

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-4
    weight_decay: float = 1e-2
    total_steps: int = 2000
    warmup_steps: int = 400
    clip_norm: float = 1.0
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 100
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    final_lr: float = 0.0
    # Batch-norm affine parameters and the temperature are not decayed unless set.
    decay_norm_and_temperature: bool = False
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise TrainConfigError("step counts must be non-negative")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise TrainConfigError(
                f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})"
            )
        if self.base_lr <= 0 or self.batch_size < 1 or self.eval_every < 1 or self.clip_norm <= 0:
            raise TrainConfigError("base_lr, batch_size, eval_every and clip_norm must be positive")
        if self.weight_decay < 0 or self.final_lr < 0:
            raise TrainConfigError("weight_decay and final_lr must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_mapping(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then half-cosine down to final_lr at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span if span > 0 else 1.0
    return cfg.final_lr + (cfg.base_lr - cfg.final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Sequence[torch.Tensor]) -> float:
    return math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads))


def clip_gradients(grads: Sequence[torch.Tensor], max_norm: float = 1.0) -> list[torch.Tensor]:
    """Rescale all gradients together when their global l2 norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return list(grads)


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: Sequence[torch.Tensor], betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-2, decay_mask: Sequence[bool] | None = None):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_mask = list(decay_mask) if decay_mask is not None else [True] * len(self.params)
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, grads: Sequence[torch.Tensor], lr: float) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"{len(grads)} gradients for {len(self.params)} parameters")
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1 - b1**self.t
        bc2 = 1 - b2**self.t
        for p, g, m, v, decay in zip(self.params, grads, self.m, self.v, self.decay_mask):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            if decay and self.weight_decay:
                p.mul_(1 - lr * self.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [x.clone() for x in self.m], "v": [x.clone() for x in self.v]}


def optimizer_step(params, grads, lr: float, cfg: TrainConfig, opt: AdamW | None = None):
    """One AdamW update; pass ``opt`` to carry moment estimates across calls."""
    opt = opt or AdamW(params, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay)
    opt.step(grads, lr)
    return params


class ContrastiveModel(nn.Module):
    """Two encoders, two projectors and the shared temperature."""

    def __init__(self, enc_cfg: EncoderConfig, proj_hidden: int = 512, proj_out: int = 256):
        super().__init__()
        self.enc_cfg = enc_cfg
        self.ppg_encoder = Encoder(enc_cfg)
        self.ecg_encoder = Encoder(enc_cfg)
        self.ppg_projector = Projector(enc_cfg.out_dim, proj_hidden, proj_out)
        self.ecg_projector = Projector(enc_cfg.out_dim, proj_hidden, proj_out)
        self.temperature = Temperature()

    def embed(self, ppg: torch.Tensor, ecg: torch.Tensor):
        hp = l2_normalize(self.ppg_projector(self.ppg_encoder(ppg)))
        he = l2_normalize(self.ecg_projector(self.ecg_encoder(ecg)))
        return hp, he

    def forward(self, ppg, ecg):
        hp, he = self.embed(ppg, ecg)
        return symmetric_info_nce(hp, he, self.temperature.tau)


def build_contrastive_model(enc_cfg: EncoderConfig | None = None, seed: int = 0) -> ContrastiveModel:
    enc_cfg = enc_cfg or EncoderConfig()
    model = ContrastiveModel(enc_cfg)
    parts = (model.ppg_encoder, model.ecg_encoder, model.ppg_projector, model.ecg_projector)
    for k, part in enumerate(parts):
        init_parameters(part, torch.Generator().manual_seed(int(seed) * 16 + k))
    return model


def decay_mask(model: nn.Module, include_norm_and_temperature: bool = False) -> list[bool]:
    norm_params = {
        id(p) for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)
        for p in m.parameters(recurse=False)
    }
    temp_params = {
        id(p) for m in model.modules() if isinstance(m, Temperature) for p in m.parameters()
    }
    skip = set() if include_norm_and_temperature else norm_params | temp_params
    return [id(p) not in skip for p in model.parameters() if p.requires_grad]


def snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def rng_snapshot(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state, "torch": torch.get_rng_state().tolist()}


@contextmanager
def torch_threads(n: int | None):
    if not n:
        yield
        return
    prev = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


class BatchSampler:
    """Epoch-wise shuffled fixed-size batches; a short epoch tail is skipped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._perm, self._pos = None, n

    def next(self) -> np.ndarray:
        if self._perm is None or self._pos + self.batch_size > self.n:
            self._perm, self._pos = self.rng.permutation(self.n), 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


@torch.no_grad()
def contrastive_loss_on(model: ContrastiveModel, ppg: torch.Tensor, ecg: torch.Tensor, batch_size: int) -> float:
    """Sample-weighted mean loss over consecutive batches, in eval mode."""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for s in range(0, len(ppg), batch_size):
        p, e = ppg[s:s + batch_size], ecg[s:s + batch_size]
        total += model(p, e).item() * len(p)
        count += len(p)
    model.train(was_training)
    return total / max(count, 1)


@torch.no_grad()
def embed_pairs(model: ContrastiveModel, ppg, ecg, batch_size: int = 256):
    """Unit-norm shared-space embeddings (eval mode) as numpy arrays."""
    was_training = model.training
    model.eval()
    hp, he = [], []
    ppg, ecg = _as_tensor(ppg), _as_tensor(ecg)
    for s in range(0, len(ppg), batch_size):
        a, b = model.embed(ppg[s:s + batch_size], ecg[s:s + batch_size])
        hp.append(a.numpy())
        he.append(b.numpy())
    model.train(was_training)
    return np.concatenate(hp), np.concatenate(he)


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    evaluations: list[tuple[int, float]] = field(default_factory=list)
    checkpoints: list[Checkpoint] = field(default_factory=list)
    best: Checkpoint | None = None
    last: Checkpoint | None = None
    model: nn.Module | None = None

    @property
    def best_step(self) -> int | None:
        return None if self.best is None else self.best.step


def _as_tensor(x) -> torch.Tensor:
    t = torch.from_numpy(np.array(x, dtype=np.float32))
    if t.dim() != 2:
        raise ValueError(f"expected an N x L matrix, got shape {tuple(t.shape)}")
    return t


def pretrain_contrastive(
    train_ppg, train_ecg, val_ppg=None, val_ecg=None,
    cfg: TrainConfig = TrainConfig(),
    enc_cfg: EncoderConfig | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainHistory:
    """Symmetric-InfoNCE training of both branches from scratch.

    Validation loss is measured every ``eval_every`` steps (and at steps 0 and
    ``total_steps``); the lowest one marks the best checkpoint.
    """
    enc_cfg = enc_cfg or EncoderConfig()
    P, E = _as_tensor(train_ppg), _as_tensor(train_ecg)
    if len(P) == 0 or len(P) != len(E):
        raise ValueError(f"need a non-empty aligned training set, got {len(P)} PPG / {len(E)} ECG rows")
    has_val = val_ppg is not None and len(val_ppg) > 0
    if has_val:
        VP, VE = _as_tensor(val_ppg), _as_tensor(val_ecg)

    with torch_threads(cfg.threads):
        torch.manual_seed(cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        model = build_contrastive_model(enc_cfg, cfg.seed)
        model.train()
        params = [p for p in model.parameters() if p.requires_grad]
        opt = AdamW(params, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay,
                    decay_mask(model, cfg.decay_norm_and_temperature))
        sampler = BatchSampler(len(P), cfg.batch_size, rng)
        hist = TrainHistory(model=model)

        def checkpoint(step, vloss):
            return Checkpoint(
                snapshot(model), enc_cfg, step, vloss, rng_snapshot(rng), "contrastive",
                {"train_config": cfg.to_dict()},
            )

        def evaluate(step):
            vloss = contrastive_loss_on(model, VP, VE, cfg.batch_size) if has_val else None
            if vloss is not None:
                hist.evaluations.append((step, vloss))
                log.info("step %d val_loss %.4f tau %.4f", step, vloss, model.temperature.tau.item())
            ck = checkpoint(step, vloss)
            hist.checkpoints.append(ck)
            if hist.best is None or (vloss is not None and vloss < hist.best.validation_loss):
                hist.best = ck
            hist.last = ck

        evaluate(0)
        for step in range(1, cfg.total_steps + 1):
            lr = lr_at_step(step - 1, cfg)
            idx = torch.from_numpy(sampler.next())
            loss = model(P[idx], E[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (tau={model.temperature.tau.item():.6g})"
                )
            grads = torch.autograd.grad(loss, params)
            grads = clip_gradients(grads, cfg.clip_norm)
            opt.step(grads, lr)
            model.temperature.clamp_()
            hist.losses.append(loss.item())
            hist.lrs.append(lr)
            if on_step is not None:
                on_step(step, hist.losses[-1])
            if step % cfg.eval_every == 0 or step == cfg.total_steps:
                evaluate(step)
    return hist


def restore_contrastive(ckpt: Checkpoint) -> ContrastiveModel:
    model = ContrastiveModel(ckpt.encoder_config)
    model.load_state_dict(ckpt.state)
    model.eval()
    return model


class MultiLabelModel(nn.Module):
    def __init__(self, encoder: Encoder, label_dim: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.out_dim, label_dim)

    def forward(self, x):
        return self.head(self.encoder(x))


def encoder_from_checkpoint(ckpt: Checkpoint, branch: str = "ppg") -> Encoder:
    """Pull one encoder out of a checkpoint; ``branch`` is "ppg", "ecg" or a raw prefix."""
    prefix = f"{branch}_encoder." if branch in ("ppg", "ecg") else f"{branch}."
    enc = Encoder(ckpt.encoder_config)
    enc.load_state_dict({k[len(prefix):]: v for k, v in ckpt.state.items() if k.startswith(prefix)})
    return enc


@dataclass
class FinetuneResult:
    model: MultiLabelModel
    checkpoint: Checkpoint
    losses: list[float]


def finetune_multilabel(
    encoder_ckpt: Checkpoint,
    segments,
    labels,
    label_dim: int,
    cfg: TrainConfig = TrainConfig(),
    freeze_encoder: bool = False,
) -> FinetuneResult:
    """Attach a linear head to the PPG encoder and train with per-label BCE on logits."""
    X = _as_tensor(segments)
    Y = torch.as_tensor(np.asarray(labels, dtype=np.float32))
    if Y.dim() != 2 or Y.shape != (len(X), label_dim):
        raise ValueError(f"labels must be {len(X)} x {label_dim}, got {tuple(Y.shape)}")
    if len(X) == 0:
        raise ValueError("empty fine-tuning set")

    with torch_threads(cfg.threads):
        torch.manual_seed(cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        encoder = encoder_from_checkpoint(encoder_ckpt)
        model = MultiLabelModel(encoder, label_dim)
        init_parameters(model.head, torch.Generator().manual_seed(cfg.seed))
        if freeze_encoder:
            for p in model.encoder.parameters():
                p.requires_grad_(False)
        params = [p for p in model.parameters() if p.requires_grad]
        opt = AdamW(params, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay,
                    decay_mask(model, cfg.decay_norm_and_temperature))
        sampler = BatchSampler(len(X), cfg.batch_size, rng)
        losses = []
        model.train()
        if freeze_encoder:
            model.encoder.eval()  # running statistics stay fixed too
        for step in range(1, cfg.total_steps + 1):
            lr = lr_at_step(step - 1, cfg)
            idx = torch.from_numpy(sampler.next())
            loss = F.binary_cross_entropy_with_logits(model(X[idx]), Y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at step {step}")
            grads = clip_gradients(torch.autograd.grad(loss, params), cfg.clip_norm)
            opt.step(grads, lr)
            losses.append(loss.item())
        model.eval()
    ckpt = Checkpoint(
        snapshot(model), encoder_ckpt.encoder_config, cfg.total_steps, None,
        rng_snapshot(rng), "finetune",
        {"label_dim": label_dim, "freeze_encoder": freeze_encoder, "train_config": cfg.to_dict()},
    )
    return FinetuneResult(model, ckpt, losses)


def restore_multilabel(ckpt: Checkpoint) -> MultiLabelModel:
    model = MultiLabelModel(Encoder(ckpt.encoder_config), int(ckpt.meta["label_dim"]))
    model.load_state_dict(ckpt.state)
    model.eval()
    return model


@torch.no_grad()
def predict_logits(model: nn.Module, x, batch_size: int = 256) -> np.ndarray:
    model.eval()
    X = _as_tensor(x)
    return np.concatenate([model(X[s:s + batch_size]).numpy() for s in range(0, len(X), batch_size)])
