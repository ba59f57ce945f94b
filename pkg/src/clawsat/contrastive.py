"""Cosine similarity, the NT-Xent contrastive loss, and the three-view
upper-level objective combining clean programs, random views, and
adversarial views."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import DegenerateBatch, ZeroVector


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """a.b / (|a||b|); raises ZeroVector on zero-norm inputs."""
    na, nb = torch.linalg.norm(a), torch.linalg.norm(b)
    if na.detach().item() == 0.0 or nb.detach().item() == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return (a @ b) / (na * nb)


@dataclass
class ContrastiveBatch:
    """Index-aligned positive pairs; every other element is a negative."""

    anchors: torch.Tensor  # (N, d)
    positives: torch.Tensor  # (N, d)
    temperature: float = 0.07

    def __post_init__(self):
        if self.anchors.shape != self.positives.shape:
            raise DegenerateBatch("anchors and positives must align")
        if self.anchors.shape[0] < 2:
            raise DegenerateBatch("need at least 2 pairs so a negative exists")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def nt_xent_from_similarities(sim: torch.Tensor, temperature: float) -> torch.Tensor:
    """NT-Xent given the (2N, 2N) pooled similarity matrix.

    Element i's positive is its partner at i+N mod 2N; its negatives are
    the other 2N-2 elements. Log-sum-exp keeps the denominator stable.
    """
    n2 = sim.shape[0]
    logits = sim / temperature
    eye = torch.eye(n2, dtype=torch.bool)
    logits = logits.masked_fill(eye, float("-inf"))
    partner = torch.arange(n2).roll(n2 // 2)
    pos_logit = logits[torch.arange(n2), partner]
    return (torch.logsumexp(logits, dim=1) - pos_logit).mean()


def nt_xent(batch: ContrastiveBatch) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy over the pooled 2N batch.

    Mean over pairs of the per-pair two-sided loss, with in-batch
    negatives (symmetric form).
    """
    z = torch.cat([batch.anchors, batch.positives], dim=0)
    norms = torch.linalg.norm(z, dim=1, keepdim=True)
    if norms.detach().min().item() == 0.0:
        raise ZeroVector("zero-norm representation in contrastive batch")
    zn = z / norms
    return nt_xent_from_similarities(zn @ zn.T, batch.temperature)


def nt_xent_pairs(anchors: torch.Tensor, positives: torch.Tensor, temperature: float) -> torch.Tensor:
    return nt_xent(ContrastiveBatch(anchors, positives, temperature))


def claw_upper_loss(
    model,
    program_ids: Sequence[Sequence[int]],
    rand_view_ids: Sequence[Sequence[int]],
    adv_view_ids: Sequence[Sequence[int]] | None,
    temperature: float,
    adv_weight: float = 1.0,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Multi-view contrastive objective.

    Two NT-Xent terms: (program, random view) and (random view, adversarial
    view). Returns (total, first term, second term); with ``adv_weight`` 0
    or no adversarial views, the objective collapses to the single-pair
    random-view baseline.
    """
    z_program = model.encode_batch(program_ids)
    z_rand = model.encode_batch(rand_view_ids)
    term_rand = nt_xent_pairs(z_program, z_rand, temperature)
    if adv_view_ids is None or adv_weight == 0.0:
        zero = torch.zeros((), dtype=term_rand.dtype)
        return term_rand, term_rand, zero
    z_adv = model.encode_batch(adv_view_ids)
    term_adv = nt_xent_pairs(z_rand, z_adv, temperature)
    return term_rand + adv_weight * term_adv, term_rand, term_adv
