import numpy as np
import pytest
import torch

from dcar.prompts import (PromptParams, assemble_image_prompt, assemble_text_prompt, encode_prompted_image,
                          encode_prompted_text, init_prompts, project_visual)


def test_init_determinism_and_shapes():
    a, b, c = init_prompts(8, 0), init_prompts(8, 0), init_prompts(8, 1)
    assert a.V.shape == (8, 32) and a.F_weight.shape == (48, 32) and a.F_bias.shape == (48,)
    assert torch.equal(a.V, b.V) and torch.equal(a.F_weight, b.F_weight)
    assert not torch.equal(a.V, c.V)
    assert torch.count_nonzero(a.F_bias) == 0
    assert a.V.std().item() == pytest.approx(0.02, rel=0.3)
    with pytest.raises(ValueError):
        init_prompts(0, 0)


def test_project_visual_identity_and_constant():
    p = PromptParams(3, 4, 4)
    with torch.no_grad():
        p.V.copy_(torch.randn(3, 4))
        p.F_weight.copy_(torch.eye(4))
    torch.testing.assert_close(project_visual(p), p.V.detach(), rtol=0, atol=0)
    with torch.no_grad():
        p.F_weight.zero_()
        p.F_bias.copy_(torch.tensor([1.0, 2.0, 3.0, 4.0]))
    assert torch.equal(project_visual(p), torch.tensor([[1.0, 2.0, 3.0, 4.0]] * 3))


def test_project_visual_matches_loop_oracle():
    p = init_prompts(5, 3, d_text=6, d_vision=7)
    with torch.no_grad():
        p.F_bias.normal_()
    V, W, b = (t.detach().double().numpy() for t in (p.V, p.F_weight, p.F_bias))
    expected = np.zeros((5, 7))
    for i in range(5):
        for r in range(7):
            expected[i, r] = b[r] + sum(W[r, c] * V[i, c] for c in range(6))
    np.testing.assert_allclose(project_visual(p).detach().double().numpy(), expected, atol=1e-6)


def test_sequence_lengths(backbone):
    p = init_prompts(8, 0)
    ids = torch.tensor([[0, 4, 5, 6, 1, 2]])
    seq = assemble_text_prompt(p, ids, torch.tensor([5]), backbone)
    assert seq.n_prompts == 8
    assert int(seq.lengths[0]) + seq.n_prompts == 13
    assert seq.x.shape[1] == 8 + 6
    plain = assemble_text_prompt(None, ids, torch.tensor([5]), backbone)
    assert plain.n_prompts == 0 and plain.x.shape[1] == 6
    img = torch.zeros(1, 32, 32, 3)
    assert assemble_image_prompt(None, img, backbone).shape[1] == 1 + 64
    assert assemble_image_prompt(p, img, backbone).shape[1] == 1 + 8 + 64


def test_visual_prompts_sit_between_cls_and_patches(backbone):
    p = init_prompts(2, 0)
    img = torch.rand(1, 32, 32, 3, generator=torch.Generator().manual_seed(0))
    with_p = assemble_image_prompt(p, img, backbone)[0]
    without = assemble_image_prompt(None, img, backbone)[0]
    torch.testing.assert_close(with_p[0], without[0])
    torch.testing.assert_close(with_p[1:3], project_visual(p).detach())
    torch.testing.assert_close(with_p[3:], without[1:])


def test_gradients_reach_all_prompt_tensors(backbone):
    p = init_prompts(4, 0)
    ids, lens = torch.tensor([[0, 4, 5, 1]]), torch.tensor([4])
    img = torch.rand(1, 32, 32, 3, generator=torch.Generator().manual_seed(0))
    loss = (encode_prompted_text(p, ids, lens, backbone) * encode_prompted_image(p, img, backbone)).sum()
    loss.backward()
    for name, t in p.named_parameters():
        assert t.grad is not None and t.grad.abs().sum() > 0, name


def test_image_embedding_depends_on_V_by_finite_difference(backbone64):
    p = init_prompts(3, 0).double()
    with torch.no_grad():
        p.F_weight.mul_(20)
    img = torch.rand(1, 32, 32, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    with torch.no_grad():
        base = encode_prompted_image(p, img, backbone64)
        p.V[0, 0] += 1e-4
        moved = encode_prompted_image(p, img, backbone64)
    assert (moved - base).abs().max().item() > 1e-9


def test_frozen_backbone_receives_no_gradient(backbone):
    p = init_prompts(2, 0)
    encode_prompted_text(p, torch.tensor([[0, 4, 1]]), torch.tensor([3]), backbone).sum().backward()
    assert all(t.grad is None for t in backbone.parameters())
