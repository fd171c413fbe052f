"""ArcFace-margin classification training of the whole network."""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import LabeledDataset, load_image, random_resized_crop, resize
from .errors import ConfigError, TrainingError
from .fusion import DESCRIPTOR_DIM
from .model import DOLG, ModelConfig
from .tensorio import load_into, read_tensors, write_tensors

log = logging.getLogger(__name__)

GRAD_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 100
    warmup_epochs: int = 5
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    split_fraction: float = 0.8
    seed: int = 0
    margin: float = 0.15
    scale: float = 30.0
    image_size: int = 512
    aug_scale: tuple = (0.6, 1.0)
    aug_ratio: tuple = (3 / 4, 4 / 3)
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "aug_scale", tuple(self.aug_scale))
        object.__setattr__(self, "aug_ratio", tuple(self.aug_ratio))
        if self.batch_size <= 0 or self.epochs <= 0 or self.base_lr <= 0:
            raise ConfigError("batch_size, epochs and base_lr must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must be in [0, 1) and weight_decay >= 0")
        if not 0 < self.split_fraction < 1:
            raise ConfigError("split_fraction must be in (0, 1)")
        # margins above pi/2 are allowed: the concatenation ablation trains with m=2.0
        if not (math.isfinite(self.margin) and self.margin >= 0):
            raise ConfigError("margin must be finite and non-negative")
        if not self.scale > 0:
            raise ConfigError("ArcFace scale must be positive")

    def to_dict(self):
        d = asdict(self)
        d["aug_scale"], d["aug_ratio"] = list(self.aug_scale), list(self.aug_ratio)
        return d


# ---------------------------------------------------------------- loss


class _AngularMargin(torch.autograd.Function):
    """cos(arccos(s) + m) with the value taken at s clipped to [-1, 1] and the
    derivative taken at s clipped to [-1 + 1e-7, 1 - 1e-7] so it stays finite."""

    @staticmethod
    def forward(ctx, s, m):
        ctx.save_for_backward(s)
        ctx.m = m
        return torch.cos(torch.acos(s.clamp(-1.0, 1.0)) + m)

    @staticmethod
    def backward(ctx, grad):
        (s,) = ctx.saved_tensors
        sc = s.clamp(-1.0 + GRAD_CLAMP, 1.0 - GRAD_CLAMP)
        theta = torch.acos(sc)
        return grad * torch.sin(theta + ctx.m) / torch.sqrt(1.0 - sc * sc), None


def arcface_adjust(s, c, m):
    """Margin-adjusted cosine: ``cos(arccos(s) + m)`` for the true class (c=1), ``s`` otherwise."""
    if isinstance(s, torch.Tensor):
        c = torch.as_tensor(c, dtype=torch.bool, device=s.device)
        return torch.where(c, _AngularMargin.apply(s, m), s)
    if not c:
        return s
    return math.cos(math.acos(min(max(s, -1.0), 1.0)) + m)


def arcface_logits(descriptors, weight, labels, margin, scale):
    cos = F.normalize(descriptors, dim=-1) @ F.normalize(weight, dim=-1).T
    if labels.min() < 0 or labels.max() >= weight.shape[0]:
        raise IndexError(f"label out of range [0, {weight.shape[0]})")
    idx = labels.view(-1, 1)
    adjusted = _AngularMargin.apply(cos.gather(1, idx), margin)
    return scale * cos.scatter(1, idx, adjusted)


def arcface_loss(descriptors, labels, weight, margin=0.15, scale=30.0):
    """Mean cross-entropy of scaled, margin-adjusted cosine logits."""
    return F.cross_entropy(arcface_logits(descriptors, weight, labels, margin, scale), labels)


class ArcFaceHead(nn.Module):
    def __init__(self, num_classes, dim=DESCRIPTOR_DIM, margin=0.15, scale=30.0):
        super().__init__()
        if num_classes < 1:
            raise ConfigError("num_classes must be positive")
        self.margin = margin
        self.scale = scale
        self.weight = nn.Parameter(torch.empty(num_classes, dim))
        nn.init.xavier_uniform_(self.weight)

    @property
    def num_classes(self):
        return self.weight.shape[0]

    def cosine(self, descriptors):
        return F.normalize(descriptors, dim=-1) @ F.normalize(self.weight, dim=-1).T

    def forward(self, descriptors, labels):
        return arcface_loss(descriptors, labels, self.weight, self.margin, self.scale)


# ---------------------------------------------------------------- schedule


def lr_at(step, total_steps, cfg: TrainConfig):
    """Linear warmup from 0 to base_lr, then cosine decay to 0 at the final step."""
    if not 0 <= step < total_steps:
        raise IndexError(f"step {step} outside [0, {total_steps})")
    warmup = int(round(total_steps * cfg.warmup_epochs / cfg.epochs))
    if step < warmup:
        return cfg.base_lr * step / warmup
    span = total_steps - 1 - warmup
    if span <= 0:
        return cfg.base_lr
    t = (step - warmup) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: DOLG
    head: ArcFaceHead
    report: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    checkpoint: str | None = None


def _accuracy(model, head, images, labels, batch_size):
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.stack(images[i:i + batch_size])
            pred = head.cosine(model(x)).argmax(dim=1)
            correct += int((pred == labels[i:i + batch_size]).sum())
    return correct / max(len(images), 1)


def train(dataset: LabeledDataset, model: DOLG, cfg: TrainConfig, out_dir=None, head=None):
    """Train ``model`` (and an ArcFace head) on the dataset's train split.

    Emits one report record per epoch ``{epoch, lr, loss, train_acc, val_acc}``;
    accuracies are measured in eval mode on un-augmented images. When
    ``out_dir`` is given, records go to ``report.jsonl`` and the final weights
    to ``checkpoint.bin``.
    """
    if dataset.class_count < 2:
        raise ConfigError("training needs at least two classes")
    train_items, val_items = dataset.split("train"), dataset.split("val")
    if not train_items:
        raise ConfigError("training split is empty")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dtype = next(model.parameters()).dtype
    if head is None:
        head = ArcFaceHead(dataset.class_count, margin=cfg.margin, scale=cfg.scale).to(dtype)

    size = cfg.image_size
    raw = [load_image(p).to(dtype) for p, _ in train_items]
    train_labels = torch.tensor([y for _, y in train_items])
    clean_train = [resize(im, size, size) for im in raw]
    clean_val = [resize(load_image(p).to(dtype), size, size) for p, _ in val_items]
    val_labels = torch.tensor([y for _, y in val_items])

    params = [p for p in list(model.parameters()) + list(head.parameters()) if p.requires_grad]
    opt = torch.optim.SGD(params, lr=0.0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(raw) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs

    result = TrainResult(model, head)
    report_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        report_fh = open(os.path.join(out_dir, "report.jsonl"), "w", encoding="utf-8")
    step = 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            head.train()
            order = rng.permutation(len(raw))
            epoch_loss, lr = 0.0, 0.0
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                x = torch.stack([random_resized_crop(raw[i], rng, size, cfg.aug_scale, cfg.aug_ratio)
                                 for i in idx])
                y = train_labels[idx]
                lr = lr_at(step, total, cfg)
                for group in opt.param_groups:
                    group["lr"] = lr
                loss = head(model(x), y)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss.item()} at step {step} (epoch {epoch})")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                result.losses.append(loss.item())
                epoch_loss += loss.item() * len(idx)
                step += 1
            record = {
                "epoch": epoch + 1,
                "lr": lr,
                "loss": epoch_loss / len(raw),
                "train_acc": _accuracy(model, head, clean_train, train_labels, cfg.batch_size),
                "val_acc": _accuracy(model, head, clean_val, val_labels, cfg.batch_size) if clean_val else None,
            }
            result.report.append(record)
            log.info("epoch %(epoch)d lr %(lr).4g loss %(loss).4f train_acc %(train_acc).3f", record)
            if report_fh:
                report_fh.write(json.dumps(record) + "\n")
                report_fh.flush()
            if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"checkpoint-e{epoch + 1:03d}.bin"),
                                model, head, cfg, epoch + 1)
    finally:
        if report_fh:
            report_fh.close()
    model.eval()
    if out_dir:
        result.checkpoint = os.path.join(out_dir, "checkpoint.bin")
        save_checkpoint(result.checkpoint, model, head, cfg, cfg.epochs)
    return result


def save_checkpoint(path, model: DOLG, head: ArcFaceHead, cfg: TrainConfig, epoch):
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"head.{k}": v for k, v in head.state_dict().items()})
    meta = {
        "epoch": epoch,
        "seed": cfg.seed,
        "config_hash": model.cfg.digest(),
        "model_config": model.cfg.to_dict(),
        "train_config": cfg.to_dict(),
        "num_classes": head.num_classes,
    }
    write_tensors(path, tensors, meta)


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild ``(model, head, meta)`` from a checkpoint file."""
    tensors, meta = read_tensors(path)
    model = DOLG(ModelConfig.from_dict(meta["model_config"])).to(dtype)
    tc = meta.get("train_config", {})
    head = ArcFaceHead(meta["num_classes"], margin=tc.get("margin", 0.15), scale=tc.get("scale", 30.0)).to(dtype)
    load_into(model, {k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    load_into(head, {k[5:]: v for k, v in tensors.items() if k.startswith("head.")})
    model.eval()
    return model, head, meta
