"""Supervised training with the step-decay SGD schedule."""

from __future__ import annotations

import hashlib
import logging
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .jitter import color_jitter
from .model import NetModel
from .net import build_network, to_tensor
from .types import ClassifierSpec, TrainConfig

log = logging.getLogger(__name__)


class EmptyClassError(ValueError):
    def __init__(self, class_name: str):
        super().__init__(f"class {class_name!r} has no training records")
        self.class_name = class_name


def data_fingerprint(images: Sequence[np.ndarray], targets: Sequence[int]) -> str:
    h = hashlib.sha256()
    for im, t in zip(images, targets):
        h.update(str(im.shape).encode())
        h.update(np.ascontiguousarray(im).tobytes())
        h.update(int(t).to_bytes(2, "little"))
    return h.hexdigest()


def _mirror(img: np.ndarray, code: int) -> np.ndarray:
    # mirrors only: a transpose would swap the axes of oriented texture
    if code & 1:
        img = img[:, ::-1]
    if code & 2:
        img = img[::-1]
    return np.ascontiguousarray(img)


def _augment(img, cfg: TrainConfig, epoch: int, item: int):
    # one stream per (seed, epoch, item): independent of batch order
    rng = np.random.default_rng([cfg.seed, epoch, item])
    out = color_jitter(img, cfg.jitter, rng)
    if cfg.flips:
        out = _mirror(out, int(rng.integers(0, 4)))
    return out


def _batches(images, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffled batches; images of different shape never share a batch."""
    groups: dict[tuple, list[int]] = {}
    for i in rng.permutation(len(images)):
        groups.setdefault(images[i].shape, []).append(int(i))
    batches = [members[k:k + batch_size]
               for _, members in sorted(groups.items())
               for k in range(0, len(members), batch_size)]
    if len(groups) > 1:
        batches = [batches[j] for j in rng.permutation(len(batches))]
    return batches


def train(examples: Sequence[tuple[np.ndarray, object]], label_mapping: Mapping,
          spec: ClassifierSpec, cfg: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> NetModel:
    """Fit a classifier to ``examples`` of ``(image, label)``.

    ``label_mapping`` sends each label to a class index, or to ``None`` to
    drop the example.  Every class index needs at least one example.
    The learning rate for epoch ``e`` is ``lr0 * factor ** (e // every)``;
    the returned model's ``history`` records it with loss and train accuracy.
    """
    images, targets = [], []
    for img, lab in examples:
        idx = label_mapping.get(lab)
        if idx is None:
            continue
        if not 0 <= idx < spec.n_classes:
            raise ValueError(f"label {lab} maps to class {idx}, outside 0..{spec.n_classes - 1}")
        images.append(img)
        targets.append(int(idx))
    counts = np.bincount(np.asarray(targets, dtype=int), minlength=spec.n_classes)
    for k, c in enumerate(counts):
        if c == 0:
            raise EmptyClassError(spec.class_names[k])

    torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    net = build_network(spec.arch, spec.n_classes, spec.pretrained)
    model = NetModel(spec, net)
    for im in images:
        model.check_input(im)
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr0, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    y_all = torch.tensor(targets)
    history = []
    n = len(images)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        net.train()
        total_loss, correct = 0.0, 0
        for idx in _batches(images, cfg.batch_size, np.random.default_rng([cfg.seed, epoch])):
            batch = to_tensor([_augment(images[i], cfg, epoch, int(i)) for i in idx])
            y = y_all[idx]
            opt.zero_grad()
            logits = net(batch)
            loss = loss_fn(logits, y)
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y).sum())
        entry = {"epoch": epoch, "lr": lr, "loss": total_loss / n, "accuracy": correct / n}
        history.append(entry)
        log.info("epoch %d lr %.6g loss %.4f acc %.4f", epoch, lr, entry["loss"], entry["accuracy"])
        if on_epoch:
            on_epoch(entry)
    net.eval()
    model.history = history
    model.training_fingerprint = {
        "train_config": cfg.to_dict(),
        "data_sha256": data_fingerprint(images, targets),
        "n_examples": n,
        "class_counts": counts.tolist(),
    }
    return model
