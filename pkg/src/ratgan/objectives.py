"""Adversarial objectives: matching-aware hinge losses and gradient penalty."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidInputError


@dataclass
class LossBreakdown:
    real_match: float
    fake_match: float
    real_mismatch: float
    gradient_penalty: float = 0.0

    @property
    def total(self) -> float:
        return (self.real_match + 0.5 * self.fake_match
                + 0.5 * self.real_mismatch + self.gradient_penalty)


def d_hinge_loss(score_real_match: torch.Tensor, score_fake_match: torch.Tensor,
                 score_real_mismatch: torch.Tensor) -> torch.Tensor:
    """Hinge loss over the three matching-aware score batches.

    E[max(0, 1 - D(x, s))] + 0.5 E[max(0, 1 + D(x_fake, s))]
                           + 0.5 E[max(0, 1 + D(x, s_mismatch))]
    """
    for scores in (score_real_match, score_fake_match, score_real_mismatch):
        if scores.numel() == 0:
            raise InvalidInputError("empty score batch")
    return (F.relu(1.0 - score_real_match).mean()
            + 0.5 * F.relu(1.0 + score_fake_match).mean()
            + 0.5 * F.relu(1.0 + score_real_mismatch).mean())


def d_hinge_terms(score_real_match, score_fake_match, score_real_mismatch):
    """Unweighted hinge terms for logging; total applies the 1/2 weights."""
    for scores in (score_real_match, score_fake_match, score_real_mismatch):
        if scores.numel() == 0:
            raise InvalidInputError("empty score batch")
    return (F.relu(1.0 - score_real_match).mean(),
            F.relu(1.0 + score_fake_match).mean(),
            F.relu(1.0 + score_real_mismatch).mean())


def ma_gp_penalty(discriminator, real_images: torch.Tensor, s: torch.Tensor,
                  k: float = 2.0, p: float = 6.0) -> torch.Tensor:
    """Gradient penalty at real, matching pairs.

    k * E[(||grad_x D(x, s)|| + ||grad_s D(x, s)||) ** p], differentiable in
    the discriminator parameters (second-order graph retained).
    """
    images = real_images.detach().requires_grad_(True)
    sents = s.detach().requires_grad_(True)
    scores = discriminator(images, sents)
    grads = torch.autograd.grad(scores.sum(), (images, sents), create_graph=True)
    g_img, g_s = grads
    batched = images.dim() == 4
    if batched:
        img_norm = g_img.reshape(g_img.shape[0], -1).norm(dim=1)
        s_norm = g_s.reshape(g_s.shape[0], -1).norm(dim=1)
    else:
        img_norm, s_norm = g_img.norm(), g_s.norm()
    return k * ((img_norm + s_norm) ** p).mean()


def g_adv_loss(score_fake_match: torch.Tensor) -> torch.Tensor:
    """Generator adversarial loss: minimizing it pushes fake scores up."""
    if score_fake_match.numel() == 0:
        raise InvalidInputError("empty score batch")
    return -score_fake_match.mean()


def sample_mismatched_captions(indices: torch.Tensor) -> torch.Tensor:
    """Cyclic shift by one: position i receives caption i+1 mod n (no fixed point)."""
    if indices.numel() < 2:
        raise InvalidInputError("mismatch sampling needs batch size >= 2")
    return torch.roll(indices, shifts=-1, dims=0)
