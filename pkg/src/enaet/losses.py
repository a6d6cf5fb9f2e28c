"""Loss terms: AET regression, KL consistency, and the MixMatch SSL loss."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .transforms import FAMILIES

PROB_FLOOR = 1e-8


class LossError(ValueError):
    pass


def aet_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over components and batch."""
    if pred.shape != target.shape:
        raise LossError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def sharpen(p: torch.Tensor, T: float) -> torch.Tensor:
    if T <= 0:
        raise LossError(f"temperature must be positive, got {T}")
    pt = p ** (1.0 / T)
    return pt / pt.sum(dim=-1, keepdim=True)


def _check_simplex(p: torch.Tensor, name: str, tol: float = 1e-5) -> None:
    if (p < -tol).any() or not torch.allclose(p.sum(dim=-1), torch.ones((), dtype=p.dtype), atol=tol):
        raise LossError(f"{name} is not a probability distribution")


def consistency_loss(p_target: torch.Tensor, p_trans: torch.Tensor) -> torch.Tensor:
    """KL(p_target || p_trans), averaged over the batch.

    ``p_target`` is treated as a constant; ``p_trans`` is floored at 1e-8.
    """
    _check_simplex(p_target, "p_target")
    _check_simplex(p_trans.detach(), "p_trans")
    p = p_target.detach()
    log_ratio = torch.log(p.clamp_min(PROB_FLOOR)) - torch.log(p_trans.clamp_min(PROB_FLOOR))
    kl = torch.where(p > 0, p * log_ratio, torch.zeros_like(p)).sum(dim=-1)
    return kl.mean()


def soft_cross_entropy(target: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    return -(target * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def ssl_loss(
    logits_x: torch.Tensor, targets_x: torch.Tensor, logits_u: torch.Tensor, targets_u: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(labeled cross-entropy, unlabeled squared L2) on mixed batches.

    The L2 term sums over classes and averages over examples.
    """
    l_x = soft_cross_entropy(targets_x, logits_x)
    probs_u = torch.softmax(logits_u, dim=1)
    l_u = ((probs_u - targets_u) ** 2).sum(dim=1).mean()
    return l_x, l_u


def guess_labels(
    model: Callable[[torch.Tensor], torch.Tensor],
    u: torch.Tensor,
    K: int,
    T: float,
    augment: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Sharpened mean prediction over ``K`` augmented views of ``u``.

    Returns the guessed labels (no gradient) and the augmented views.
    """
    if K < 1:
        raise LossError("K must be >= 1")
    views = [augment(u) if augment is not None else u for _ in range(K)]
    with torch.no_grad():
        p = sum(torch.softmax(model(v), dim=1) for v in views) / K
        q = sharpen(p, T)
    return q.detach(), views


def sample_mix_weights(n: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Per-example lambda' = max(lambda, 1 - lambda) with lambda ~ Beta(alpha, alpha)."""
    if alpha <= 0:
        raise LossError("Beta parameter must be positive")
    lam = rng.beta(alpha, alpha, size=n)
    return np.maximum(lam, 1.0 - lam)


def mixup(a_x, a_p, b_x, b_p, lam):
    """Convex combination ``lam * a + (1 - lam) * b`` for inputs and labels.

    ``lam`` is a scalar or a per-example vector.
    """
    lam = torch.as_tensor(np.asarray(lam), dtype=a_x.dtype)
    lam_x = lam.reshape(-1, *([1] * (a_x.ndim - 1))) if lam.ndim else lam
    lam_p = lam.reshape(-1, 1) if lam.ndim else lam
    return lam_x * a_x + (1 - lam_x) * b_x, lam_p * a_p + (1 - lam_p) * b_p


def mixup_random(a_x, a_p, b_x, b_p, alpha: float, rng: np.random.Generator):
    return mixup(a_x, a_p, b_x, b_p, sample_mix_weights(len(a_x), alpha, rng))


@dataclass
class MixedBatch:
    inputs: torch.Tensor
    targets: torch.Tensor
    origin: str  # "labeled" or "unlabeled"


def mixmatch_batch(
    model: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    labels: torch.Tensor,
    u: torch.Tensor,
    num_classes: int,
    rng: np.random.Generator,
    T: float = 0.5,
    K: int = 2,
    alpha: float = 0.75,
    augment: Callable[[torch.Tensor, np.random.Generator], torch.Tensor] | None = None,
    mix_weights: Callable[[int], np.ndarray] | None = None,
    q: torch.Tensor | None = None,
) -> tuple[MixedBatch, MixedBatch, torch.Tensor]:
    """MixMatch batch construction.

    Returns ``(X', U', q)`` where ``q`` are the guessed labels for ``u``.
    ``augment=None`` disables augmentation; ``mix_weights`` overrides the Beta
    draws (used by tests to force lambda').  Passing ``q`` skips the model
    call but consumes the same random draws.
    """
    if len(x) != len(u):
        raise LossError(f"labeled batch {len(x)} != unlabeled batch {len(u)}")
    aug = (lambda t: augment(t, rng)) if augment is not None else None
    x_aug = aug(x) if aug is not None else x
    if q is None:
        q, u_views = guess_labels(model, u, K, T, aug)
    else:
        u_views = [aug(u) if aug is not None else u for _ in range(K)]
    p_x = F.one_hot(labels, num_classes).to(x.dtype)

    all_inputs = torch.cat([x_aug, *u_views])
    all_targets = torch.cat([p_x, *([q] * K)])
    perm = torch.as_tensor(rng.permutation(len(all_inputs)))
    lam = mix_weights(len(all_inputs)) if mix_weights is not None else sample_mix_weights(len(all_inputs), alpha, rng)
    mixed_x, mixed_p = mixup(all_inputs, all_targets, all_inputs[perm], all_targets[perm], lam)
    n = len(x)
    return (
        MixedBatch(mixed_x[:n], mixed_p[:n], "labeled"),
        MixedBatch(mixed_x[n:], mixed_p[n:], "unlabeled"),
        q,
    )


@dataclass
class LossBreakdown:
    l_labeled: float
    l_unlabeled: float
    l_aet: list[float]
    l_cl: list[float]
    weights_applied: dict = field(default_factory=dict)
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(
    l_labeled: torch.Tensor,
    l_unlabeled: torch.Tensor,
    l_aet: list[torch.Tensor],
    l_cl: list[torch.Tensor],
    lambda_u: float,
    lambda_k: list[float],
    gamma: float,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum ``L_X + lambda_u L_U + sum_k lambda_k AET_k + gamma sum_k CL_k``."""
    if len(l_aet) != len(lambda_k) or len(l_cl) != len(lambda_k):
        raise LossError("one AET and one CL term per family weight")
    named = [("l_labeled", l_labeled), ("l_unlabeled", l_unlabeled)]
    named += [(f"l_aet[{FAMILIES[k]}]", t) for k, t in enumerate(l_aet)]
    named += [(f"l_cl[{FAMILIES[k]}]", t) for k, t in enumerate(l_cl)]
    for name, t in named:
        if not math.isfinite(float(t.detach())):
            raise LossError(f"non-finite loss term {name}={float(t.detach())}")
    total = l_labeled + lambda_u * l_unlabeled
    for w, t in zip(lambda_k, l_aet):
        total = total + w * t
    for t in l_cl:
        total = total + gamma * t
    breakdown = LossBreakdown(
        l_labeled=float(l_labeled.detach()),
        l_unlabeled=float(l_unlabeled.detach()),
        l_aet=[float(t.detach()) for t in l_aet],
        l_cl=[float(t.detach()) for t in l_cl],
        weights_applied={"lambda_u": float(lambda_u), "lambda_k": [float(w) for w in lambda_k], "gamma": float(gamma)},
        total=float(total.detach()),
    )
    return total, breakdown
