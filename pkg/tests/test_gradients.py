import numpy as np
import pytest
import torch

from fdcheck import CHECKS, N_CONFIGS, _env, _tes
from mmgcd import objectives as O
from mmgcd.tes import align_loss

TOL = 1e-4


@pytest.mark.parametrize("seed", range(N_CONFIGS))
@pytest.mark.parametrize("name", sorted(CHECKS))
def test_finite_differences(name, seed):
    assert CHECKS[name](seed) <= TOL


def test_detached_teacher_has_zero_gradient():
    rng = np.random.default_rng(0)
    for _ in range(N_CONFIGS):
        p = torch.as_tensor(rng.standard_normal((3, 4))).requires_grad_()
        q = torch.as_tensor(rng.standard_normal((3, 4))).requires_grad_()
        O.self_distill(p, q, 0.05, 0.1).backward()
        assert q.grad is None


def test_tes_loss_does_not_reach_encoders():
    env, tes = _env(), _tes(0)
    _, z_v = env["enc"].encode_images(env["X"][:4])
    align_loss(z_v, tes.synthesize(z_v), 0.1).backward()
    assert tes.layer_.weight.grad is not None
    for module in env["enc"].frozen_modules().values():
        assert all(p.grad is None for p in module.parameters())
