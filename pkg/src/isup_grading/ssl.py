"""Teacher-student pre-training with a standard-augmentation loss and a stain-augmentation loss.

The student is backbone -> fhead -> shead; the teacher is backbone -> fhead
only, updated as an EMA of the matching student parts. Both losses compare
L2-normalised predictions across views with a symmetric crossed MSE.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ParameterError
from .nn import (
    MLP,
    Encoder,
    EncoderSpec,
    MLPSpec,
    OptimizerState,
    adam_step,
    clone_params,
    ema_update,
    grads_of,
    load_into,
    param_set,
    pool_pixels,
    to_nchw,
)
from .stain import AugmentationConfig, aug1_pixels, hed_to_rgb, rgb_to_hed

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass(frozen=True)
class SSLSpec:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    fhead_hidden: int = 256
    proj_dim: int = 128
    shead_hidden: int = 128
    head_norm: str = "batch"

    @property
    def fhead(self) -> MLPSpec:
        return MLPSpec((self.encoder.embedding_dim, self.fhead_hidden, self.proj_dim), norm=self.head_norm)

    @property
    def shead(self) -> MLPSpec:
        return MLPSpec((self.proj_dim, self.shead_hidden, self.proj_dim), norm=self.head_norm)


class TeacherStudent(nn.Module):
    def __init__(self, spec: SSLSpec = SSLSpec(), momentum: float = 0.99, lam: float = 0.02):
        super().__init__()
        self.spec = spec
        self.momentum = momentum
        self.lam = lam
        self.student_backbone = Encoder(spec.encoder)
        self.student_fhead = MLP(spec.fhead)
        self.student_shead = MLP(spec.shead)
        self.teacher_backbone = Encoder(spec.encoder)
        self.teacher_fhead = MLP(spec.fhead)
        with torch.no_grad():
            for t, s in zip(self.teacher_params().values(), self.shared_student_params().values()):
                t.copy_(s)
        for p in self.teacher_params().values():
            p.requires_grad_(False)

    def student_params(self):
        out = param_set(self.student_backbone, "backbone.")
        out.update(param_set(self.student_fhead, "fhead."))
        out.update(param_set(self.student_shead, "shead."))
        return out

    def shared_student_params(self):
        """Student parameters with a teacher counterpart (backbone and fhead)."""
        out = param_set(self.student_backbone, "backbone.")
        out.update(param_set(self.student_fhead, "fhead."))
        return out

    def teacher_params(self):
        out = param_set(self.teacher_backbone, "backbone.")
        out.update(param_set(self.teacher_fhead, "fhead."))
        return out


def _trunk_input(backbone: Encoder, batch, prepared: bool):
    if prepared:
        return to_nchw(batch, next(backbone.parameters()).dtype)
    return backbone.stem(batch)


def student_predict(model: TeacherStudent, patch_batch, prepared: bool = False) -> torch.Tensor:
    """shead(fhead(backbone(x))). ``prepared`` batches are already at the trunk's input resolution."""
    h = model.student_backbone.trunk(_trunk_input(model.student_backbone, patch_batch, prepared))
    return model.student_shead(model.student_fhead(h))


@torch.no_grad()
def teacher_predict(model: TeacherStudent, patch_batch, prepared: bool = False) -> torch.Tensor:
    h = model.teacher_backbone.trunk(_trunk_input(model.teacher_backbone, patch_batch, prepared))
    return model.teacher_fhead(h)


def l2norm(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, p=2, dim=-1, eps=NORM_EPS)


def crossed_mse(ps_a, pt_b, ps_b, pt_a) -> torch.Tensor:
    """Mean of MSE(n(s(a)), n(t(b))) and MSE(n(s(b)), n(t(a)))."""
    return 0.5 * (
        F.mse_loss(l2norm(ps_a), l2norm(pt_b)) + F.mse_loss(l2norm(ps_b), l2norm(pt_a))
    )


def loss_aug(model: TeacherStudent, view_a, view_b, prepared: bool = False) -> torch.Tensor:
    """Symmetric crossed loss for one augmentation pipeline's pair of views.

    Swapping ``view_a`` and ``view_b`` swaps the two MSE terms, and float
    addition commutes, so the value is exactly symmetric.
    """
    s, t = _head_outputs(model, [view_a, view_b], prepared)
    return crossed_mse(s[0], t[1], s[1], t[0])


def _head_outputs(model: TeacherStudent, views, prepared: bool):
    """Student predictions and teacher targets, one tensor per view.

    The trunks see every view in one batch (GroupNorm is per sample), but the
    heads run view by view so BatchNorm statistics never mix views.
    """
    n = len(views[0])
    x = torch.cat([_trunk_input(model.student_backbone, v, prepared) for v in views])
    es = model.student_backbone.trunk(x)
    with torch.no_grad():
        et = model.teacher_backbone.trunk(x)
    s, t = [], []
    for i in range(len(views)):
        s.append(model.student_shead(model.student_fhead(es[i * n:(i + 1) * n])))
        with torch.no_grad():
            t.append(model.teacher_fhead(et[i * n:(i + 1) * n]))
    return s, t


def total_loss_value(l_aug1, l_aug2, lam: float):
    return l_aug1 + lam * l_aug2


def total_loss(model: TeacherStudent, d1, d2, sd1, sd2, prepared: bool = False):
    """L_aug1 + lambda * L_aug2; returns (total, L_aug1, L_aug2).

    All four views go through the trunks in one batch.
    """
    s, t = _head_outputs(model, [d1, d2, sd1, sd2], prepared)
    l1 = crossed_mse(s[0], t[1], s[1], t[0])
    l2 = crossed_mse(s[2], t[3], s[3], t[2])
    return total_loss_value(l1, l2, model.lam), l1, l2


@dataclass
class PretrainConfig:
    spec: SSLSpec = field(default_factory=SSLSpec)
    epochs: int = 50
    batch_size: int = 40
    lr: float = 3e-4
    momentum: float = 0.99
    lam: float = 0.02
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    # build views from the pooled patch the trunk sees rather than the 256x256 original
    views_at_trunk_resolution: bool = True
    seed: int = 0


@dataclass
class PretrainResult:
    model: TeacherStudent
    loss_trace: list[dict]
    val_trace: list[float]
    best_epoch: int


class ViewMaker:
    """Draws the four views (two standard, two stain-augmented) of a patch batch."""

    def __init__(self, pixels: np.ndarray, aug: AugmentationConfig):
        self.pixels = pixels
        self.hed = rgb_to_hed(pixels).astype(np.float64)
        self.aug = aug

    def __call__(self, idx: np.ndarray, rng: np.random.Generator):
        d1 = np.stack([aug1_pixels(self.pixels[i], rng, self.aug) for i in idx])
        d2 = np.stack([aug1_pixels(self.pixels[i], rng, self.aug) for i in idx])
        (alo, ahi), (blo, bhi) = self.aug.ranges()
        stain = []
        for _ in range(2):
            alpha = rng.uniform(alo, ahi, size=(len(idx), 1, 1, 3))
            beta = rng.uniform(blo, bhi, size=(len(idx), 1, 1, 3))
            stain.append(hed_to_rgb(self.hed[idx] * alpha + beta))
        return d1, d2, stain[0], stain[1]


def _prepare(pixels: np.ndarray, config: PretrainConfig) -> tuple[np.ndarray, bool]:
    if config.views_at_trunk_resolution and config.spec.encoder.input_pool > 1:
        return pool_pixels(pixels, config.spec.encoder.input_pool), True
    return pixels, False


@torch.no_grad()
def validation_loss(model: TeacherStudent, views: ViewMaker, prepared: bool, batch: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    n = len(views.pixels)
    total = 0.0
    for s in range(0, n, batch):
        idx = np.arange(s, min(n, s + batch))
        loss, _, _ = total_loss(model, *views(idx, rng), prepared=prepared)
        total += float(loss) * len(idx)
    return total / n


def pretrain(corpus_pixels: np.ndarray, config: PretrainConfig = PretrainConfig(),
             val_pixels: np.ndarray | None = None, model: TeacherStudent | None = None) -> PretrainResult:
    """Train the student on the four-view loss; the teacher follows by EMA after every step.

    ``corpus_pixels`` is N x 256 x 256 x 3 uint8. With validation pixels the
    state with the lowest validation loss is returned.
    """
    if len(corpus_pixels) == 0:
        raise ParameterError("SSL corpus is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = model or TeacherStudent(config.spec, config.momentum, config.lam)
    model.momentum, model.lam = config.momentum, config.lam
    pixels, prepared = _prepare(np.asarray(corpus_pixels), config)
    views = ViewMaker(pixels, config.aug)
    val_views = None
    if val_pixels is not None and len(val_pixels):
        val_views = ViewMaker(_prepare(np.asarray(val_pixels), config)[0], config.aug)

    student = model.student_params()
    shared, teacher = model.shared_student_params(), model.teacher_params()
    n = len(pixels)
    steps = -(-n // config.batch_size)
    opt = OptimizerState(base_lr=config.lr, total_steps=config.epochs * steps)
    trace, val_trace = [], []
    best = None
    best_epoch, best_val = config.epochs - 1, np.inf
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for s in range(steps):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            loss, l1, l2 = total_loss(model, *views(idx, rng), prepared=prepared)
            model.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(opt, student, grads_of(student))
            ema_update(teacher, shared, model.momentum)
            sums += np.array([loss.item(), l1.item(), l2.item()]) * len(idx)
        sums /= n
        trace.append({"total": sums[0], "aug1": sums[1], "aug2": sums[2]})
        if val_views is not None:
            v = validation_loss(model, val_views, prepared, config.batch_size, config.seed + 1)
            val_trace.append(v)
            if v < best_val:
                best_val, best_epoch = v, epoch
                best = (clone_params(student), clone_params(teacher))
        log.info("ssl epoch %d %s", epoch, trace[-1])
    if best is not None:
        load_into(student, best[0])
        load_into(teacher, best[1])
    return PretrainResult(model, trace, val_trace, best_epoch)


@torch.no_grad()
def embed(backbone: Encoder, pixels: np.ndarray, batch: int = 64) -> np.ndarray:
    out = [backbone(pixels[i:i + batch]).double().numpy() for i in range(0, len(pixels), batch)]
    return np.concatenate(out)


def linear_probe_accuracy(backbone: Encoder, train_x, train_y, test_x, test_y) -> float:
    """Accuracy of a logistic-regression probe on frozen embeddings."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    ftr, fte = embed(backbone, train_x), embed(backbone, test_x)
    scaler = StandardScaler().fit(ftr)
    clf = LogisticRegression(max_iter=2000).fit(scaler.transform(ftr), train_y)
    return float((clf.predict(scaler.transform(fte)) == np.asarray(test_y)).mean())
