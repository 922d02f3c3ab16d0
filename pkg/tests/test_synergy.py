import numpy as np
import pytest

from synergy_moe.errors import DimensionError, ParameterError
from synergy_moe.synergy import (
    MLP,
    AlignmentProjector,
    LossWeights,
    SynergySlice,
    TeacherFeatures,
    coarse_loss,
    extract_synergy,
    init_projector,
    insert_synergy_tokens,
    load_teachers,
    mock_teacher,
    mock_teachers,
    project_synergy,
    save_teachers,
    total_stage2_loss,
)
from synergy_moe.tensor import Tape, Tensor, backward, grad_check, mse


def test_insert_single_token():
    seq = Tensor(np.zeros((4, 3)))
    emb = Tensor(np.ones((1, 3)))
    out, mask = insert_synergy_tokens(seq, 1, emb)
    assert out.shape == (5, 3) and mask == [4]


def test_insert_then_extract_round_trip():
    rng = np.random.default_rng(0)
    seq, emb = Tensor(rng.normal(size=(6, 5))), Tensor(rng.normal(size=(3, 5)))
    out, mask = insert_synergy_tokens(seq, 3, emb)
    assert np.array_equal(extract_synergy(out, mask).hidden.data, emb.data)
    assert np.array_equal(extract_synergy(out, list(range(6))).hidden.data, seq.data)


def test_insert_validation():
    with pytest.raises(ParameterError):
        insert_synergy_tokens(Tensor(np.zeros((2, 3))), 0, Tensor(np.ones((1, 3))))
    with pytest.raises(DimensionError):
        insert_synergy_tokens(Tensor(np.zeros((2, 3))), 1, Tensor(np.ones((1, 4))))
    with pytest.raises(DimensionError):
        SynergySlice(Tensor(np.zeros((0, 3))))


def test_zero_projector_gives_zero():
    z = MLP(Tensor(np.zeros((4, 5))), Tensor(np.zeros((5, 3))))
    proj = AlignmentProjector(z, MLP(Tensor(np.zeros((4, 5))), Tensor(np.zeros((5, 2)))))
    fv, fg = project_synergy(SynergySlice(Tensor(np.ones((2, 4)))), proj)
    assert np.array_equal(fv.data, np.zeros((2, 3))) and np.array_equal(fg.data, np.zeros((2, 2)))


def test_identity_projector_without_activation():
    eye = MLP(Tensor(np.eye(4)), Tensor(np.eye(4)), activation=False)
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    assert np.array_equal(eye(x).data, x.data)


def test_projector_gradient():
    rng = np.random.default_rng(2)
    proj = init_projector(rng, 6, 4, 5)
    h = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    t = mock_teachers(3, 3, 4, 5)
    err = grad_check(lambda: coarse_loss(*project_synergy(SynergySlice(h), proj), t), [h] + proj.parameters())
    assert err < 1e-6


def test_projector_width_mismatch():
    proj = init_projector(np.random.default_rng(3), 6, 4, 5)
    with pytest.raises(DimensionError):
        project_synergy(SynergySlice(Tensor(np.zeros((2, 5)))), proj)


def test_coarse_loss_cases():
    rng = np.random.default_rng(4)
    tv, tg = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    teach = TeacherFeatures(Tensor(tv), Tensor(tg))
    assert coarse_loss(Tensor(tv), Tensor(tg), teach).item() == 0.0
    off = tv.copy()
    off[0, 1] += 1.0
    assert abs(coarse_loss(Tensor(off), Tensor(tg), teach).item() - 1.0) < 1e-12
    fv, fg = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 4)))
    expect = mse(teach.temporal, fv).item() + mse(teach.spatial, fg).item()
    assert abs(coarse_loss(fv, fg, teach).item() - expect) < 1e-12
    with pytest.raises(DimensionError):
        coarse_loss(Tensor(np.zeros((2, 2))), fg, teach)


def test_total_loss_weighting():
    c, a = Tensor(3.0), Tensor(1.5)
    assert total_stage2_loss(c, a, LossWeights(0.0)).item() == 3.0
    assert total_stage2_loss(Tensor(0.0), a, LossWeights(1.0)).item() == 1.5
    with pytest.raises(ParameterError):
        LossWeights(-1.0)


def test_total_loss_gradient_is_weighted_sum():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    ta, tb = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2)))
    w = LossWeights(0.3)

    def total():
        return total_stage2_loss(mse(x, ta), mse(x, tb), w)

    with Tape() as tape:
        loss = total()
    backward(loss, tape)
    expect = 2 * (x.data - ta.data) + 0.3 * 2 * (x.data - tb.data)
    assert np.allclose(x.grad, expect, atol=1e-12)
    assert grad_check(total, [x]) < 1e-4


def test_mock_teacher_properties(tmp_path):
    a = mock_teacher(7, "temporal", (4, 6))
    assert np.array_equal(a.data, mock_teacher(7, "temporal", (4, 6)).data)
    assert np.max(np.abs(np.linalg.norm(a.data, axis=1) - 1.0)) < 1e-12
    for seed in range(1000):
        assert not np.array_equal(mock_teacher(seed, "temporal", (2, 3)).data,
                                  mock_teacher(seed, "spatial", (2, 3)).data)
    with pytest.raises(ParameterError):
        mock_teacher(0, "audio", (2, 2))
    t = mock_teachers(1, 2, 3, 4)
    save_teachers(t, tmp_path)
    back = load_teachers(tmp_path)
    assert np.array_equal(back.temporal.data, t.temporal.data)
    assert np.array_equal(back.spatial.data, t.spatial.data)
