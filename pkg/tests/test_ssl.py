import numpy as np
import pytest
import torch
from oracles import ema_oracle, max_rel_grad_error
from toys import TINY

from isup_grading.nn import EncoderSpec, OptimizerState, adam_step, ema_update, grads_of
from isup_grading.ssl import (
    PretrainConfig,
    SSLSpec,
    TeacherStudent,
    ViewMaker,
    l2norm,
    linear_probe_accuracy,
    loss_aug,
    pretrain,
    student_predict,
    teacher_predict,
    total_loss,
)
from isup_grading.stain import AugmentationConfig

SPEC = SSLSpec(encoder=TINY, fhead_hidden=16, proj_dim=8, shead_hidden=8)


def _views(seed, n=4, size=32):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, (n, size, size, 3), dtype=np.uint8) for _ in range(4)]


def test_teacher_starts_as_copy_and_is_frozen():
    torch.manual_seed(0)
    m = TeacherStudent(SPEC)
    for (n, t), s in zip(m.teacher_params().items(), m.shared_student_params().values()):
        assert torch.equal(t, s), n
        assert not t.requires_grad
    assert set(m.student_params()) - set(m.shared_student_params()) == {
        n for n in m.student_params() if n.startswith("shead.")
    }


def test_loss_aug_swap_symmetry_exact():
    torch.manual_seed(0)
    m = TeacherStudent(SPEC)
    a, b, _, _ = _views(0)
    assert loss_aug(m, a, b).item() == loss_aug(m, b, a).item()


def test_normalised_rows_unit_norm():
    torch.manual_seed(0)
    m = TeacherStudent(SPEC)
    a = _views(1)[0]
    for out in (student_predict(m, a), teacher_predict(m, a)):
        norms = l2norm(out).norm(dim=-1)
        assert torch.all((norms - 1).abs() < 1e-6)
    x = torch.randn(50, 8, dtype=torch.float64) * 1e3
    assert torch.all((l2norm(x).norm(dim=-1) - 1).abs() < 1e-6)


def test_total_loss_combines_terms():
    torch.manual_seed(0)
    m = TeacherStudent(SPEC, lam=0.3)
    d1, d2, s1, s2 = _views(2)
    total, l1, l2 = total_loss(m, d1, d2, s1, s2)
    assert total.item() == pytest.approx(l1.item() + 0.3 * l2.item(), abs=1e-7)
    assert l1.item() == pytest.approx(loss_aug(m, d1, d2).item(), abs=1e-6)
    assert l2.item() == pytest.approx(loss_aug(m, s1, s2).item(), abs=1e-6)


def test_gradient_of_total_loss():
    torch.manual_seed(0)
    spec = SSLSpec(encoder=EncoderSpec(channels=(4, 8), input_pool=4, groups=2, embedding_dim=8),
                   fhead_hidden=6, proj_dim=4, shead_hidden=4)
    m = TeacherStudent(spec).double()
    with torch.no_grad():  # make the teacher differ from the student
        for t in m.teacher_params().values():
            t.add_(0.05 * torch.randn_like(t))
    d1, d2, s1, s2 = _views(3, n=3, size=16)
    params = [p for n, p in m.student_params().items() if n.startswith(("shead.", "fhead."))]
    params.append(m.student_params()["backbone.features.0.weight"])

    def f():
        return total_loss(m, d1, d2, s1, s2)[0]

    assert max_rel_grad_error(f, params) < 1e-4


def test_teacher_trajectory_matches_ema_recurrence():
    torch.manual_seed(0)
    m = TeacherStudent(SPEC).double()
    student, shared, teacher = m.student_params(), m.shared_student_params(), m.teacher_params()
    t0 = [v.detach().clone().view(-1).tolist() for v in teacher.values()]
    opt = OptimizerState(base_lr=1e-2, total_steps=3)
    snapshots = []
    for step in range(3):
        d = _views(10 + step)
        loss, _, _ = total_loss(m, *d)
        m.zero_grad(set_to_none=True)
        loss.backward()
        adam_step(opt, student, grads_of(student))
        snapshots.append([v.detach().clone().view(-1).tolist() for v in shared.values()])
        ema_update(teacher, shared, m.momentum)
    final = [v.detach().view(-1).tolist() for v in teacher.values()]
    for i in range(len(t0)):
        expected = ema_oracle(t0[i], [s[i] for s in snapshots], m.momentum)[-1]
        assert final[i] == expected


def test_view_maker_shapes_and_determinism():
    px = np.random.default_rng(0).integers(0, 256, (5, 16, 16, 3), dtype=np.uint8)
    vm = ViewMaker(px, AugmentationConfig())
    a = vm(np.array([0, 2]), np.random.default_rng(1))
    b = vm(np.array([0, 2]), np.random.default_rng(1))
    assert all(v.shape == (2, 16, 16, 3) and v.dtype == np.uint8 for v in a)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_pretrain_runs_and_is_deterministic():
    px = np.random.default_rng(0).integers(0, 256, (12, 64, 64, 3), dtype=np.uint8)
    cfg = PretrainConfig(spec=SPEC, epochs=2, batch_size=6, seed=3)
    r1 = pretrain(px, cfg, val_pixels=px[:4])
    r2 = pretrain(px, cfg, val_pixels=px[:4])
    assert len(r1.loss_trace) == 2 and len(r1.val_trace) == 2
    for a, b in zip(r1.model.state_dict().values(), r2.model.state_dict().values()):
        assert torch.equal(a, b)
    with pytest.raises(Exception):
        pretrain(px[:0], cfg)


def test_linear_probe_separable():
    rng = np.random.default_rng(0)
    dark = rng.integers(0, 60, (20, 32, 32, 3), dtype=np.uint8)
    light = rng.integers(190, 256, (20, 32, 32, 3), dtype=np.uint8)
    x = np.concatenate([dark, light])
    y = np.array([0] * 20 + [1] * 20)
    torch.manual_seed(0)
    m = TeacherStudent(SPEC)
    assert linear_probe_accuracy(m.student_backbone, x[::2], y[::2], x[1::2], y[1::2]) == 1.0
