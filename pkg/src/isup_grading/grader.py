"""Attention-MIL slide grader with a cumulative (ordinal) five-output head.

Patch embeddings from the backbone are weighted by a tanh attention network,
summed, and mapped to five logits whose sigmoids estimate P(grade >= j) for
j = 1..5. With ``ordinal=False`` the head is a plain 6-way softmax trained
with cross entropy, kept for ablation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import N_ORDINAL_BITS, decode_ordinal, encode_ordinal
from .data import SlideBag, StemCache, stack_bags
from .errors import ParameterError, ShapeError
from .metrics import grading_report
from .nn import Encoder, EncoderSpec, OptimizerState, adam_step, clone_params, grads_of, load_into, param_set

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


class AttentionHead(nn.Module):
    def __init__(self, embedding_dim: int, hidden: int = 64):
        super().__init__()
        self.V = nn.Linear(embedding_dim, hidden)
        self.W = nn.Linear(hidden, 1, bias=False)

    def logits(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.W(torch.tanh(self.V(embeddings))).squeeze(-1)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(embeddings), dim=-1)


class GraderHead(nn.Module):
    def __init__(self, embedding_dim: int, hidden: int = 64, ordinal: bool = True):
        super().__init__()
        self.ordinal = ordinal
        self.attention = AttentionHead(embedding_dim, hidden)
        self.fc = nn.Linear(embedding_dim, N_ORDINAL_BITS if ordinal else N_ORDINAL_BITS + 1)

    def forward(self, embeddings: torch.Tensor):
        """l x E embeddings -> (raw scores, attention weights)."""
        a = self.attention(embeddings)
        pooled = a @ embeddings
        return self.fc(pooled), a


class Grader(nn.Module):
    def __init__(self, spec: EncoderSpec = EncoderSpec(), hidden: int = 64, ordinal: bool = True):
        super().__init__()
        self.backbone = Encoder(spec)
        self.head = GraderHead(spec.embedding_dim, hidden, ordinal)

    @property
    def ordinal(self) -> bool:
        return self.head.ordinal


def attention_weights(head: AttentionHead, embeddings) -> torch.Tensor:
    e = torch.as_tensor(embeddings)
    if e.ndim != 2:
        raise ShapeError(f"expected l x E embeddings, got shape {tuple(e.shape)}")
    return head(e.to(head.V.weight.dtype))


def grade_forward(backbone: Encoder, head: GraderHead, bag_pixels, stems: torch.Tensor | None = None,
                  bag_index=None):
    """Raw scores, output probabilities and attention weights for one bag.

    Pass ``stems`` (pooled unique patches) plus ``bag_index`` to skip the
    pixel stem and recompute nothing for repeated patches.
    """
    h = backbone.stem(bag_pixels) if stems is None else stems
    e = backbone.trunk(h)
    if bag_index is not None:
        e = e[torch.as_tensor(bag_index)]
    raw, a = head(e)
    probs = torch.sigmoid(raw) if head.ordinal else torch.softmax(raw, dim=-1)
    return raw, probs, a


def or_loss(sigmoid_outputs, target, eps: float = BCE_EPS):
    """Mean binary cross entropy over the five ordinal positions, outputs clamped to [eps, 1-eps]."""
    is_numpy = not isinstance(sigmoid_outputs, torch.Tensor)
    o = torch.as_tensor(np.asarray(sigmoid_outputs, dtype=np.float64)) if is_numpy else sigmoid_outputs
    t = torch.as_tensor(np.asarray(target), dtype=o.dtype) if not isinstance(target, torch.Tensor) else target.to(o.dtype)
    o = o.clamp(eps, 1.0 - eps)
    loss = -(t * torch.log(o) + (1.0 - t) * torch.log1p(-o)).mean(dim=-1)
    return float(loss) if is_numpy and loss.ndim == 0 else loss


def slide_loss(head: GraderHead, probs: torch.Tensor, raw: torch.Tensor, isup: int) -> torch.Tensor:
    if head.ordinal:
        return or_loss(probs, torch.as_tensor(encode_ordinal(isup)))
    return F.cross_entropy(raw.unsqueeze(0), torch.tensor([isup]))


def decode(head: GraderHead, probs) -> int:
    p = np.asarray(probs.detach().double() if isinstance(probs, torch.Tensor) else probs, dtype=np.float64)
    if head.ordinal:
        return decode_ordinal(p)
    return int(np.argmax(p))


def malignancy_score(head: GraderHead, probs) -> float:
    """P(grade >= 1): the first ordinal sigmoid, or 1 - P(benign) for the softmax head."""
    p = np.asarray(probs.detach().double() if isinstance(probs, torch.Tensor) else probs, dtype=np.float64)
    return float(p[0]) if head.ordinal else float(1.0 - p[0])


@dataclass
class FinetuneConfig:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    attention_hidden: int = 64
    ordinal: bool = True
    freeze_backbone: bool = False
    epochs: int = 30
    batch_size: int = 8
    lr: float = 3e-4
    seed: int = 0


@dataclass
class SlidePrediction:
    slide_id: str
    true_grade: int | None
    grade: int
    probs: list[float]
    attention: list[float]
    patch_indices: list[int]
    malignancy: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FinetuneResult:
    model: Grader
    loss_trace: list[float]
    kappa_trace: list[float]
    best_epoch: int


@torch.no_grad()
def predict_slide(model: Grader, bag: SlideBag, stems: StemCache | None = None) -> SlidePrediction:
    """Grade, output probabilities and per-bag-position attention for one slide."""
    model.eval()
    h = stems(bag) if stems is not None else model.backbone.stem(bag.pixels())
    raw, probs, a = grade_forward(model.backbone, model.head, None, stems=h, bag_index=bag.bag_index)
    return SlidePrediction(
        slide_id=bag.slide_id,
        true_grade=bag.record.isup,
        grade=decode(model.head, probs),
        probs=probs.double().tolist(),
        attention=a.double().tolist(),
        patch_indices=[bag.patches[i].index for i in bag.bag_index],
        malignancy=malignancy_score(model.head, probs),
    )


def predict_bags(model: Grader, bags: list[SlideBag], stems: StemCache | None = None) -> list[SlidePrediction]:
    stems = stems or StemCache(model.backbone)
    return [predict_slide(model, b, stems) for b in bags]


def _kappa_or_nan(preds: list[SlidePrediction]) -> float:
    try:
        return grading_report([p.true_grade for p in preds], [p.grade for p in preds]).kappa
    except Exception:  # degenerate validation predictions early in training
        return float("nan")


def finetune(train: list[SlideBag], config: FinetuneConfig = FinetuneConfig(),
             backbone_state: dict | None = None, val: list[SlideBag] | None = None) -> FinetuneResult:
    """Train backbone and grading head on slide ISUP labels.

    ``backbone_state`` seeds the backbone (e.g. the pre-trained student); the
    epoch with the best validation kappa is kept when ``val`` is given.
    """
    if not train:
        raise ParameterError("fine-tuning needs at least one slide")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = Grader(config.encoder, config.attention_hidden, config.ordinal)
    if backbone_state is not None:
        load_into(param_set(model.backbone), backbone_state)
    if config.freeze_backbone:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    params = {n: p for n, p in param_set(model).items() if p.requires_grad}
    steps = -(-len(train) // config.batch_size)
    opt = OptimizerState(base_lr=config.lr, total_steps=config.epochs * steps)
    stems = StemCache(model.backbone)
    val_stems = StemCache(model.backbone)

    loss_trace, kappa_trace = [], []
    best, best_epoch, best_kappa = None, config.epochs - 1, -np.inf
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(train))
        total = 0.0
        for s in range(steps):
            batch = [train[i] for i in order[s * config.batch_size:(s + 1) * config.batch_size]]
            x, gathers = stack_bags([stems(b) for b in batch], batch)
            emb = model.backbone.trunk(x)
            losses = []
            for g, b in zip(gathers, batch):
                raw, a = model.head(emb[g])
                probs = torch.sigmoid(raw) if model.ordinal else torch.softmax(raw, dim=-1)
                losses.append(slide_loss(model.head, probs, raw, b.record.isup))
            loss = torch.stack(losses).mean()
            model.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(opt, params, grads_of(params))
            total += loss.item() * len(batch)
        loss_trace.append(total / len(train))
        if val:
            k = _kappa_or_nan(predict_bags(model, val, val_stems))
            kappa_trace.append(k)
            if k > best_kappa:
                best_kappa, best_epoch, best = k, epoch, clone_params(params)
        log.info("finetune epoch %d loss %.4f kappa %s", epoch, loss_trace[-1], kappa_trace[-1] if val else "-")
    if best is not None:
        load_into(params, best)
    model.eval()
    return FinetuneResult(model, loss_trace, kappa_trace, best_epoch)
