"""Hybrid instance/bag MIL labeler: patch classifier trained through top-k bag pooling.

The instance classifier scores every patch over (benign, GG3, GG4, GG5). For
each Gleason class the bag probability is the mean of that class's ``k``
largest patch probabilities, and the slide is supervised with a multilabel
BCE against "pattern present in primary or secondary grade".
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .core import PATCH_CLASSES, GleasonGrade, PatchRecord, SlideRecord
from .data import SlideBag, StemCache, stack_bags
from .errors import ExcludedSlideError, ParameterError
from .nn import Encoder, EncoderSpec, OptimizerState, adam_step, clone_params, grads_of, load_into, param_set

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
GLEASON_COLUMNS = (1, 2, 3)  # GG3, GG4, GG5 columns of the 4-way output


class InstanceClassifier(nn.Module):
    def __init__(self, spec: EncoderSpec = EncoderSpec()):
        super().__init__()
        self.backbone = Encoder(spec)
        self.classifier = nn.Linear(spec.embedding_dim, len(PATCH_CLASSES))

    def forward_stem(self, h: torch.Tensor) -> torch.Tensor:
        """Class probabilities (rows sum to 1) from pooled stem inputs."""
        return torch.softmax(self.classifier(self.backbone.trunk(h)), dim=-1)

    def forward(self, x) -> torch.Tensor:
        return self.forward_stem(self.backbone.stem(x))


def topk_bag_pool(instance_probs, k: int):
    """Bag probability per Gleason class: mean of the ``k`` largest instance probabilities.

    ``instance_probs`` is l x 4 (numpy or torch); returns the 3-vector for
    GG3, GG4, GG5 in the same array type.
    """
    is_numpy = not isinstance(instance_probs, torch.Tensor)
    p = torch.as_tensor(np.asarray(instance_probs, dtype=np.float64)) if is_numpy else instance_probs
    n = p.shape[-2]
    if not 1 <= k <= n:
        raise ParameterError(f"top-k needs 1 <= k <= bag length ({n}), got k={k}")
    cols = p[..., list(GLEASON_COLUMNS)]
    top = torch.topk(cols, k, dim=-2, largest=True, sorted=True).values
    # accumulate largest-first so the rounding matches a plain sort-then-mean
    acc = top[..., 0, :]
    for i in range(1, k):
        acc = acc + top[..., i, :]
    out = acc / k
    return out.numpy() if is_numpy else out


def bag_loss(b, y, eps: float = BCE_EPS):
    """Mean over the three Gleason classes of the clamped binary cross entropy."""
    is_numpy = not isinstance(b, torch.Tensor)
    bt = torch.as_tensor(np.asarray(b, dtype=np.float64)) if is_numpy else b
    yt = torch.as_tensor(np.asarray(y), dtype=bt.dtype) if not isinstance(y, torch.Tensor) else y.to(bt.dtype)
    bt = bt.clamp(eps, 1.0 - eps)
    loss = -(yt * torch.log(bt) + (1.0 - yt) * torch.log1p(-bt)).mean(dim=-1)
    return float(loss) if is_numpy and loss.ndim == 0 else loss


def bag_target_from_slide(slide: SlideRecord) -> np.ndarray:
    if slide.benign:
        raise ExcludedSlideError(f"slide {slide.slide_id} is benign; benign slides are excluded from MIL training")
    present = {int(slide.primary_gg), int(slide.secondary_gg)}
    return np.array([1 if g in present else 0 for g in (3, 4, 5)], dtype=np.int64)


@dataclass
class MILConfig:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    k: int = 4
    epochs: int = 35
    batch_size: int = 8
    lr: float = 3e-4
    seed: int = 0


@dataclass
class MILResult:
    model: InstanceClassifier
    loss_trace: list[float]
    val_trace: list[dict]
    best_epoch: int


def _multilabel_scores(pred: np.ndarray, target: np.ndarray) -> dict:
    """Element-wise accuracy and micro F1 of thresholded bag predictions."""
    acc = float((pred == target).mean())
    tp = float(((pred == 1) & (target == 1)).sum())
    fp = float(((pred == 1) & (target == 0)).sum())
    fn = float(((pred == 0) & (target == 1)).sum())
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn > 0 else 1.0
    return {"accuracy": acc, "f1": f1, "score": (acc + f1) / 2}


@torch.no_grad()
def evaluate_bags(model: InstanceClassifier, bags: list[SlideBag], k: int, stems: StemCache) -> dict:
    preds, targets, losses = [], [], []
    for bag in bags:
        probs = model.forward_stem(stems(bag))[torch.from_numpy(bag.bag_index)]
        b = topk_bag_pool(probs, k)
        y = torch.as_tensor(bag_target_from_slide(bag.record))
        losses.append(float(bag_loss(b, y)))
        preds.append((b > 0.5).long().numpy())
        targets.append(y.numpy())
    out = _multilabel_scores(np.array(preds), np.array(targets))
    out["loss"] = float(np.mean(losses))
    return out


def train_module1(train: list[SlideBag], config: MILConfig = MILConfig(), val: list[SlideBag] | None = None,
                  model: InstanceClassifier | None = None) -> MILResult:
    """Fit the instance classifier end to end through top-k pooling and the bag BCE.

    With a validation set, the returned weights are those of the epoch with the
    best mean of bag accuracy and F1.
    """
    train = [b for b in train if not b.record.benign]
    if not train:
        raise ParameterError("module-1 training needs at least one cancerous slide")
    val = [b for b in (val or []) if not b.record.benign]
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = model or InstanceClassifier(config.encoder)
    params = param_set(model)
    steps_per_epoch = -(-len(train) // config.batch_size)
    opt = OptimizerState(base_lr=config.lr, total_steps=config.epochs * steps_per_epoch)
    stems = StemCache(model.backbone)
    targets = {b.slide_id: torch.as_tensor(bag_target_from_slide(b.record), dtype=torch.float32) for b in train}

    loss_trace, val_trace = [], []
    best, best_epoch, best_score = None, -1, -np.inf
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for s in range(steps_per_epoch):
            batch = [train[i] for i in order[s * config.batch_size:(s + 1) * config.batch_size]]
            x, gathers = stack_bags([stems(b) for b in batch], batch)
            probs = model.forward_stem(x)
            losses = [bag_loss(topk_bag_pool(probs[g], config.k), targets[b.slide_id]) for g, b in zip(gathers, batch)]
            loss = torch.stack(losses).mean()
            model.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(opt, params, grads_of(params))
            epoch_loss += loss.item() * len(batch)
        loss_trace.append(epoch_loss / len(train))
        if val:
            scores = evaluate_bags(model, val, config.k, StemCache(model.backbone))
            val_trace.append(scores)
            if scores["score"] > best_score:
                best_score, best_epoch, best = scores["score"], epoch, clone_params(params)
        log.info("module1 epoch %d loss %.4f %s", epoch, loss_trace[-1], val_trace[-1] if val else "")
    if best is not None:
        load_into(params, best)
    else:
        best_epoch = config.epochs - 1
    return MILResult(model, loss_trace, val_trace, best_epoch)


def label_from_probs(probs) -> tuple[GleasonGrade, float]:
    """Argmax class and its probability; ties go to the lowest class index."""
    p = np.asarray(probs, dtype=np.float64)
    i = int(np.argmax(p))  # first maximum
    return PATCH_CLASSES[i], float(p[i])


@torch.no_grad()
def instance_probs(model: InstanceClassifier, patches: list[PatchRecord], batch: int = 64) -> np.ndarray:
    stems = StemCache(model.backbone)
    out = []
    for i in range(0, len(patches), batch):
        out.append(model.forward_stem(stems.patches(patches[i:i + batch])).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, len(PATCH_CLASSES)))


def pseudo_label(model: InstanceClassifier, patches: list[PatchRecord]) -> list[PatchRecord]:
    probs = instance_probs(model, patches)
    out = []
    for p, row in zip(patches, probs):
        label, conf = label_from_probs(row)
        out.append(replace(p, pseudo_label=label, pseudo_confidence=conf))
    return out


def build_balanced_dataset(labeled: list[PatchRecord], per_class: int = 400,
                           min_confidence: float = 0.0) -> list[PatchRecord]:
    """Top ``per_class`` patches of each pseudo-label class by tissue fraction.

    Classes short of ``per_class`` are returned whole with a warning; ties in
    tissue fraction break on (slide id, patch index).
    """
    if per_class < 1:
        raise ParameterError(f"per_class must be >= 1, got {per_class}")
    out: list[PatchRecord] = []
    for cls in PATCH_CLASSES:
        members = [
            p for p in labeled
            if p.pseudo_label == cls and (p.pseudo_confidence or 0.0) >= min_confidence
        ]
        if not members:
            log.warning("no patches pseudo-labelled %s; class missing from the SSL corpus", cls.name)
            continue
        members.sort(key=lambda p: (-p.tissue_fraction, p.slide_id, p.index))
        if len(members) < per_class:
            log.warning("class %s has only %d patches (< %d requested)", cls.name, len(members), per_class)
        out.extend(members[:per_class])
    return out


def class_counts(patches: list[PatchRecord]) -> dict[int, int]:
    counts = {int(c): 0 for c in PATCH_CLASSES}
    for p in patches:
        if p.pseudo_label is not None:
            counts[int(p.pseudo_label)] += 1
    return counts
