import numpy as np
import pytest
import torch
from oracles import attention_oracle, bce_mean_oracle, max_rel_grad_error
from toys import TINY, toy_corpus

from isup_grading.core import encode_ordinal
from isup_grading.errors import ParameterError, ShapeError
from isup_grading.grader import (
    AttentionHead,
    FinetuneConfig,
    Grader,
    GraderHead,
    attention_weights,
    decode,
    finetune,
    grade_forward,
    malignancy_score,
    or_loss,
    predict_bags,
)
from isup_grading.nn import EncoderSpec, param_set


def test_attention_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        l, E, A = int(rng.integers(1, 12)), int(rng.integers(2, 7)), int(rng.integers(2, 6))
        head = AttentionHead(E, A).double()
        emb = rng.normal(size=(l, E))
        a = attention_weights(head, torch.from_numpy(emb)).detach().numpy()
        V = head.V.weight.detach().numpy().tolist()
        c = head.V.bias.detach().numpy().tolist()
        w = head.W.weight.detach().numpy()[0].tolist()
        assert a == pytest.approx(attention_oracle(emb.tolist(), V, c, w), abs=1e-9)


def test_attention_properties():
    head = AttentionHead(8, 4).double()
    emb = torch.randn(10, 8, dtype=torch.float64)
    a = attention_weights(head, emb)
    assert torch.all(a >= 0) and a.sum().item() == pytest.approx(1.0, abs=1e-12)
    perm = torch.randperm(10)
    assert torch.allclose(attention_weights(head, emb[perm]), a[perm], atol=1e-15)
    with pytest.raises(ShapeError):
        attention_weights(head, torch.zeros(2, 3, 8))


def test_identical_embeddings_give_uniform_attention():
    head = AttentionHead(5, 3).double()
    a = attention_weights(head, torch.ones(4, 5, dtype=torch.float64))
    assert torch.allclose(a, torch.full((4,), 0.25, dtype=torch.float64))


def test_or_loss_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        o = rng.random(5)
        g = int(rng.integers(0, 6))
        t = encode_ordinal(g)
        assert or_loss(o, t) == pytest.approx(bce_mean_oracle(o.tolist(), t.tolist()), abs=1e-9)


def test_or_loss_perfect_and_clamped():
    assert or_loss(encode_ordinal(3).astype(float), encode_ordinal(3)) == pytest.approx(0.0, abs=1e-6)
    assert np.isfinite(or_loss(np.ones(5), encode_ordinal(0)))


def test_or_penalises_distant_errors_more():
    # outputs that decode to grade 3 cost more against truth 0 than against truth 2
    o = np.array([0.9, 0.9, 0.9, 0.1, 0.1])
    assert or_loss(o, encode_ordinal(0)) > or_loss(o, encode_ordinal(2))


def test_gradient_of_or_loss_through_grade_forward():
    torch.manual_seed(0)
    spec = EncoderSpec(channels=(4, 8), input_pool=4, groups=2, embedding_dim=8)
    model = Grader(spec, hidden=4).double()
    px = np.random.default_rng(0).integers(0, 256, (5, 16, 16, 3), dtype=np.uint8)
    target = torch.as_tensor(encode_ordinal(3), dtype=torch.float64)
    params = [model.head.attention.V.weight, model.head.attention.W.weight, model.head.fc.weight,
              model.head.fc.bias, model.backbone.features[0].weight]

    def f():
        _, probs, _ = grade_forward(model.backbone, model.head, px, bag_index=[0, 1, 2, 3, 4, 0])
        return or_loss(probs, target)

    assert max_rel_grad_error(f, params) < 1e-4


def test_decode_and_malignancy():
    ordinal = GraderHead(8, 4, ordinal=True)
    flat = GraderHead(8, 4, ordinal=False)
    probs = np.array([0.9, 0.7, 0.6, 0.2, 0.1])
    assert decode(ordinal, probs) == 3
    assert malignancy_score(ordinal, probs) == 0.9
    soft = np.array([0.1, 0.1, 0.5, 0.1, 0.1, 0.1])
    assert decode(flat, soft) == 2
    assert malignancy_score(flat, soft) == pytest.approx(0.9)


def test_finetune_learns_toy_corpus_and_is_deterministic():
    corpus = toy_corpus(size=64)
    cfg = FinetuneConfig(encoder=TINY, attention_hidden=8, epochs=25, batch_size=3, lr=5e-3, seed=1)
    r1 = finetune(corpus, cfg)
    r2 = finetune(corpus, cfg)
    for a, b in zip(param_set(r1.model).values(), param_set(r2.model).values()):
        assert torch.equal(a, b)
    assert r1.loss_trace[-1] < r1.loss_trace[0] * 0.8
    preds = predict_bags(r1.model, corpus)
    assert all(len(p.attention) == 8 and abs(sum(p.attention) - 1) < 1e-5 for p in preds)
    assert all(0.0 <= p.malignancy <= 1.0 for p in preds)
    with pytest.raises(ParameterError):
        finetune([], cfg)


def test_frozen_backbone_untouched():
    corpus = toy_corpus(size=64)[:4]
    torch.manual_seed(0)
    init = Grader(TINY, 8)
    state = {k: v.detach().clone() for k, v in param_set(init.backbone).items()}
    cfg = FinetuneConfig(encoder=TINY, attention_hidden=8, epochs=2, batch_size=2, freeze_backbone=True)
    r = finetune(corpus, cfg, backbone_state=state)
    for k, v in param_set(r.model.backbone).items():
        assert torch.equal(v, state[k])


def test_no_or_head_has_six_outputs():
    corpus = toy_corpus(size=64)[:3]
    cfg = FinetuneConfig(encoder=TINY, attention_hidden=8, epochs=1, batch_size=3, ordinal=False)
    p = predict_bags(finetune(corpus, cfg).model, corpus)
    assert all(len(x.probs) == 6 and abs(sum(x.probs) - 1) < 1e-5 for x in p)
