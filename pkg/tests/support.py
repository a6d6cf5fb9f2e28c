"""Shared fixtures: tiny datasets/configs and the finite-difference oracle."""
from __future__ import annotations

import copy

import numpy as np
import torch

from enaet.data import SyntheticConfig, make_synthetic
from enaet.trainer import TrainConfig, compute_loss, new_state, to_tensor

TINY_DATA = SyntheticConfig(image_size=8, train_per_class=12, test_per_class=5)


def tiny_split(seed: int = 0, image_size: int = 8):
    cfg = SyntheticConfig(image_size=image_size, train_per_class=12, test_per_class=5)
    return make_synthetic(cfg, seed, n_labels=8)


def tiny_config(**kw) -> TrainConfig:
    base = dict(
        batch_size=4,
        epochs=2,
        steps_per_epoch=3,
        widths=(2, 2, 2, 2),
        max_shift=1,
        dtype="float64",
        lambda_u_max=1.0,
        checkpoint_every=1,
    )
    base.update(kw)
    return TrainConfig(**base)


def batch(split, n: int, dtype=torch.float64, offset: int = 0):
    x = to_tensor(split.labeled.images[offset : offset + n], dtype)
    y = torch.as_tensor(split.labeled.labels[offset : offset + n])
    u = to_tensor(split.unlabeled.images[offset : offset + n], dtype)
    return x, y, u


def params_vector(module: torch.nn.Module) -> np.ndarray:
    return np.concatenate([p.detach().numpy().ravel() for p in module.parameters()])


def gradient_check(n_coords: int = 50, eps: float = 1e-6, seed: int = 0) -> tuple[float, int]:
    """Max relative error between autograd and central differences of the total loss.

    The loss is a function of the parameters only once the random draws and the
    guessed labels are frozen: rng states are restored before every evaluation
    and ``q`` is computed once.  Returns ``(max_rel_error, parameter_count)``.
    """
    split = tiny_split(seed)
    cfg = tiny_config(ramp_steps=1)
    state = new_state(cfg, split)
    state.step = 5  # past the ramp: every weight at its configured value
    x, y, u = batch(split, 4)
    rng_snapshot = copy.deepcopy(state.rngs)

    def loss_at(q=None):
        state.rngs = copy.deepcopy(rng_snapshot)
        loss, _, q_out = compute_loss(state, x, y, u, cfg, split.num_classes, total_steps=100, q=q)
        return loss, q_out

    with torch.no_grad():
        _, q = loss_at()
    params = [p for p in state.net.parameters() if p.requires_grad]
    for p in params:
        p.grad = None
    loss, _ = loss_at(q)
    loss.backward()
    flat = [(p, i) for p in params for i in range(p.numel())]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for j in rng.choice(len(flat), size=n_coords, replace=False):
        p, i = flat[j]
        analytic = float(p.grad.view(-1)[i])
        with torch.no_grad():
            orig = float(p.view(-1)[i])
            p.view(-1)[i] = orig + eps
            up = float(loss_at(q)[0])
            p.view(-1)[i] = orig - eps
            down = float(loss_at(q)[0])
            p.view(-1)[i] = orig
        numeric = (up - down) / (2 * eps)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7)
        worst = max(worst, rel)
    return worst, sum(p.numel() for p in params)
