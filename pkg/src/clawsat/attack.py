"""First-order adversarial view generation.

Sites are sampled at random and held fixed; token choices are optimized
greedily from input-embedding gradients (HotFlip-style linearization):
score(w) = sum over site positions of (e_w - e_current) . grad. The current
token is always scored too, so a site is left alone whenever no candidate
improves the linearized objective, and the best true-objective view seen
across passes is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import torch

from .corpus import Program, Vocabulary
from .errors import NonFiniteLoss
from .model import CodeModel
from .seeding import rng_for
from .transform import (
    BOOL_PAYLOAD,
    Site,
    SiteKind,
    View,
    apply_assignment,
    build_view,
    filter_sites,
    identity_view,
    payload_pool,
    sites_of,
)


class AttackObjective(str, Enum):
    CONTRASTIVE_MAX = "contrastive_max"
    TASK_LOSS_MAX = "task_loss_max"


@dataclass
class AttackConfig:
    """k_sites is the attack strength; more sites means a stronger attack."""

    k_sites: int = 1
    objective: AttackObjective = AttackObjective.CONTRASTIVE_MAX
    iterations: int = 3
    rng_seed: int | str = 0
    site_kinds: str = "both"  # replace | insert | both

    def __post_init__(self):
        if self.k_sites < 0:
            raise ValueError("k_sites must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class AttackResult:
    view: View
    objective_before: float
    objective_after: float
    chosen: list[tuple[Site, str]] = field(default_factory=list)


def _objective_batch(
    model: CodeModel,
    cfg: AttackConfig,
    token_ids: Sequence[Sequence[int]],
    anchors,
    inputs_embeds: torch.Tensor | None = None,
    lengths: torch.Tensor | None = None,
) -> torch.Tensor:
    """Per-sequence objective values (to be maximized)."""
    if cfg.objective is AttackObjective.CONTRASTIVE_MAX:
        z = model.encode_batch(token_ids, inputs_embeds=inputs_embeds, lengths=lengths)
        anchor = torch.stack(list(anchors))
        an = anchor / torch.linalg.norm(anchor, dim=1, keepdim=True)
        zn = z / torch.linalg.norm(z, dim=1, keepdim=True)
        return 1.0 - (an * zn).sum(dim=1)
    return model.sequence_losses(
        token_ids, [list(t) for t in anchors], inputs_embeds=inputs_embeds, lengths=lengths
    )


def score_candidates(
    model: CodeModel,
    vocab: Vocabulary,
    program: Program,
    site: Site,
    grad_at_positions: torch.Tensor,
    current: str | None = None,
    used: set[str] | frozenset[str] = frozenset(),
) -> tuple[list[str], torch.Tensor]:
    """Linearized scores for every legal payload at a site.

    score(w) = sum over the site's positions of (e_w - e_current) . g, with
    gradients taken w.r.t. the input embeddings at those positions. The
    current token always scores 0, so it is never beaten by a worse
    candidate. Candidates are ordered by vocabulary id; ties therefore
    resolve to the lowest id at argmax.
    """
    if current is None:
        current = site.original
        if current is None:
            pool = payload_pool(vocab, program, site, set(used))
            current = pool[0]
    words = set(payload_pool(vocab, program, site, set(used) - {current}))
    words.add(current)
    ordered = sorted(words, key=lambda w: vocab.index.get(w, 1 << 30))

    def embed_id(word: str) -> int:
        if site.kind is SiteKind.INSERT_PRINT:
            return vocab.string_token_id(word)
        return vocab.index.get(word, Vocabulary.UNK)

    matrix = model.embedding.weight.detach()
    grad = grad_at_positions.sum(dim=0)
    ids = torch.tensor([embed_id(w) for w in ordered], dtype=torch.long)
    scores = (matrix[ids] - matrix[embed_id(current)]) @ grad
    return ordered, scores


def best_candidate(
    model, vocab, program, site, grad_at_positions, current=None, used=frozenset()
) -> str:
    words, scores = score_candidates(
        model, vocab, program, site, grad_at_positions, current=current, used=used
    )
    return words[int(torch.argmax(scores))]


class _ProgramState:
    """Mutable per-program attack state: chosen sites and their payloads."""

    def __init__(self, program: Program, vocab: Vocabulary, cfg: AttackConfig):
        self.program = program
        self.vocab = vocab
        rng = rng_for(cfg.rng_seed, "attack", program.id)
        sites = filter_sites(sites_of(program), cfg.site_kinds)
        count = min(cfg.k_sites, len(sites))
        if count:
            picked = sorted(rng.choice(len(sites), size=count, replace=False).tolist())
            self.sites = [sites[i] for i in picked]
        else:
            self.sites = []
        self.assignment: dict[Site, str | None] = {}
        self.used: set[str] = set()
        for site in self.sites:
            if site.kind is SiteKind.REPLACE_BOOL_LITERAL:
                self.assignment[site] = None
            elif site.kind in (SiteKind.REPLACE_LOCAL_VAR, SiteKind.REPLACE_PARAM):
                self.assignment[site] = site.original
            else:
                pool = payload_pool(vocab, program, site, self.used)
                self.assignment[site] = pool[0]
                self.used.add(pool[0])

    def items(self) -> list[tuple[Site, str]]:
        return [(s, p) for s, p in self.assignment.items() if p is not None]

    def tokens_and_slots(self):
        return apply_assignment(self.program, self.items())

    def snapshot(self) -> dict[Site, str | None]:
        return dict(self.assignment)

    def set_payload(self, site: Site, payload: str) -> None:
        old = self.assignment[site]
        if old is not None and old != site.original:
            self.used.discard(old)
        if payload != site.original:
            self.used.add(payload)
        self.assignment[site] = payload


def attack_batch(
    model: CodeModel,
    vocab: Vocabulary,
    programs: Sequence[Program],
    cfg: AttackConfig,
    anchors: Sequence | None = None,
) -> list[AttackResult]:
    """Attack a batch of programs jointly (one backward pass per iteration).

    ``anchors`` supplies the per-program optimization target: the clean
    representation for CONTRASTIVE_MAX (computed here when omitted) or the
    gold target token ids for TASK_LOSS_MAX.
    """
    if cfg.objective is AttackObjective.TASK_LOSS_MAX and anchors is None:
        raise ValueError("task-loss attacks need gold targets as anchors")
    base_ids = [vocab.encode(p.tokens) for p in programs]
    if anchors is None:
        with torch.no_grad():
            z = model.encode_batch(base_ids)
        anchors = [z[i] for i in range(len(programs))]

    with torch.no_grad():
        before = _objective_batch(model, cfg, base_ids, anchors)
    states = [_ProgramState(p, vocab, cfg) for p in programs]
    best_value = [float(before[i]) for i in range(len(programs))]
    best_assign: list[dict | None] = [None] * len(programs)

    active = [i for i, s in enumerate(states) if s.sites]
    if active and cfg.k_sites > 0:
        for _ in range(cfg.iterations):
            composed = [states[i].tokens_and_slots() for i in active]
            ids = [vocab.encode(tokens) for tokens, _ in composed]
            embeds, lengths = model.embed_ids(ids)
            embeds = embeds.detach().requires_grad_(True)
            total = _objective_batch(
                model, cfg, None, [anchors[i] for i in active],
                inputs_embeds=embeds, lengths=lengths,
            ).sum()
            if not torch.isfinite(total):
                raise NonFiniteLoss("attack objective became non-finite")
            (grads,) = torch.autograd.grad(total, embeds)

            for row, i in enumerate(active):
                state = states[i]
                _, slots = composed[row]
                for site in state.sites:
                    if site.kind is SiteKind.REPLACE_BOOL_LITERAL:
                        _toggle_bool_site(model, vocab, cfg, state, site, anchors[i])
                        continue
                    positions = slots.get(site, ())
                    if not positions:
                        continue
                    current = state.assignment[site]
                    state.set_payload(
                        site,
                        best_candidate(
                            model,
                            vocab,
                            state.program,
                            site,
                            grads[row, list(positions)],
                            current=current,
                            used=state.used - {current},
                        ),
                    )

            tokens_now = [vocab.encode(states[i].tokens_and_slots()[0]) for i in active]
            with torch.no_grad():
                values = _objective_batch(
                    model, cfg, tokens_now, [anchors[i] for i in active]
                )
            for row, i in enumerate(active):
                if float(values[row]) > best_value[i]:
                    best_value[i] = float(values[row])
                    best_assign[i] = states[i].snapshot()

    results = []
    for i, program in enumerate(programs):
        if best_assign[i] is None:
            view = identity_view(program)
            chosen = []
        else:
            items = [(s, p) for s, p in best_assign[i].items() if p is not None]
            view = build_view(program, items)
            chosen = [
                (site, payload if payload is not None else site.original)
                for site, payload in best_assign[i].items()
            ]
        results.append(
            AttackResult(
                view=view,
                objective_before=float(before[i]),
                objective_after=best_value[i],
                chosen=chosen,
            )
        )
    return results


def _toggle_bool_site(model, vocab, cfg, state, site, anchor) -> None:
    """Boolean sites have one alternative; evaluate it exactly."""
    keep = state.assignment[site]
    options: list[str | None] = [None, BOOL_PAYLOAD[site.original]]
    token_lists = []
    for opt in options:
        state.assignment[site] = opt
        token_lists.append(vocab.encode(state.tokens_and_slots()[0]))
    with torch.no_grad():
        values = _objective_batch(model, cfg, token_lists, [anchor, anchor])
    state.assignment[site] = options[int(torch.argmax(values))]
    if values[0] == values[1]:
        state.assignment[site] = keep


def attack_program(
    model: CodeModel,
    vocab: Vocabulary,
    program: Program,
    cfg: AttackConfig,
    anchor=None,
) -> AttackResult:
    return attack_batch(model, vocab, [program], cfg, None if anchor is None else [anchor])[0]


def adversarial_view(
    model: CodeModel, vocab: Vocabulary, program: Program, k: int, rng_seed
) -> View:
    """t_adv(P): maximize representation distance from the clean program."""
    cfg = AttackConfig(
        k_sites=k, objective=AttackObjective.CONTRASTIVE_MAX, rng_seed=rng_seed
    )
    return attack_program(model, vocab, program, cfg).view
