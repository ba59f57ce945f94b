"""Evaluation and diagnostics.

Gen-F1 scores predictions on clean inputs, Rob-F1 scores the same examples
after a task-loss attack on the inputs. Diagnostics cover sensitivity
sweeps over transformation family and attack strength, loss-landscape
grids along filter-normalized random directions, Frobenius weight
deviation of the representation network, and explanation-by-example
neighbour stability.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .attack import AttackConfig, AttackObjective, attack_batch
from .corpus import Program, Vocabulary, detokenize
from .errors import ConfigError, EmptyCorpus, EmptyGold, EmptyTrainSet, ShapeMismatch
from .model import Checkpoint, CodeModel, is_encoder_tensor
from .seeding import rng_for
from .transform import _statements

TASKS = ("summarization", "completion")


def f1(pred: Sequence[str], gold: Sequence[str]) -> float:
    """Bag-of-tokens F1 in [0, 100] (multiset intersection of the sequences)."""
    if not gold:
        raise EmptyGold("gold sequence is empty")
    if not pred:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 100.0 * 2 * precision * recall / (precision + recall)


def task_examples(
    programs: Sequence[Program], vocab: Vocabulary, task: str
) -> list[tuple[Program, list[int]]]:
    """(attackable input program, target ids) pairs for a downstream task.

    Summarization targets the gold summary. Completion cuts the program at
    the statement boundary nearest 60% of its length and targets the six
    tokens that follow.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    out: list[tuple[Program, list[int]]] = []
    for p in programs:
        if task == "summarization":
            if not p.summary:
                raise EmptyGold(f"program {p.id!r} has no summary")
            out.append((p, vocab.encode(p.summary)))
        else:
            ends = [end for _, end, _, header in _statements(p.tokens) if not header]
            cuts = [e for e in ends if 0 < e < len(p.tokens)]
            if not cuts:
                continue
            goal = 0.6 * len(p.tokens)
            cut = min(cuts, key=lambda e: (abs(e - goal), e))
            prefix = Program(
                id=p.id, tokens=p.tokens[:cut], source=detokenize(p.tokens[:cut]), summary=[]
            )
            out.append((prefix, vocab.encode(p.tokens[cut : cut + 6])))
    if not out:
        raise EmptyCorpus(f"no usable {task} examples")
    return out


def greedy_predict_ids(
    model: CodeModel, ids_batch: Sequence[Sequence[int]], max_len: int, batch_size: int = 64
) -> list[list[int]]:
    preds: list[list[int]] = []
    with torch.no_grad():
        for i in range(0, len(ids_batch), batch_size):
            block = [list(ids) for ids in ids_batch[i : i + batch_size]]
            z = model.encode_batch(block)
            preds.extend(model.greedy_decode(z, max_len))
    return preds


def predict_texts(
    model: CodeModel,
    vocab: Vocabulary,
    examples: Sequence[tuple[Program, list[int]]],
    task: str,
    cached_z: dict[str, torch.Tensor] | None = None,
    batch_size: int = 64,
) -> list[list[str]]:
    """Greedy predictions decoded back to token text, one list per example."""
    max_len = 6 if task == "completion" else 16
    preds: list[list[str]] = []
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            block = examples[i : i + batch_size]
            if cached_z is not None:
                z = torch.stack([cached_z[p.id] for p, _ in block])
            else:
                z = model.encode_batch([vocab.encode(p.tokens) for p, _ in block])
            for ids in model.greedy_decode(z, max_len):
                if task == "completion":
                    ids = (ids + [Vocabulary.EOS] * max_len)[:max_len]
                preds.append(vocab.decode(ids))
    return preds


@dataclass
class EvalReport:
    gen_f1: float
    rob_f1: float
    per_example: list[dict]
    attack_cfg: AttackConfig

    def to_json(self) -> dict:
        return {
            "gen_f1": self.gen_f1,
            "rob_f1": self.rob_f1,
            "attack": {
                "k_sites": self.attack_cfg.k_sites,
                "objective": self.attack_cfg.objective.value,
                "iterations": self.attack_cfg.iterations,
                "site_kinds": self.attack_cfg.site_kinds,
                "rng_seed": str(self.attack_cfg.rng_seed),
            },
            "per_example": self.per_example,
        }


def evaluate(
    model: CodeModel,
    vocab: Vocabulary,
    programs: Sequence[Program],
    attack_cfg: AttackConfig,
    task: str = "summarization",
    batch_size: int = 32,
) -> EvalReport:
    """Gen-F1 on clean inputs and Rob-F1 on attacked inputs of the same set.

    ``attack_cfg.k_sites == 0`` disables the attack, making Rob-F1 equal
    Gen-F1 exactly.
    """
    if not programs:
        raise EmptyCorpus("evaluation needs a non-empty test set")
    examples = task_examples(programs, vocab, task)
    golds = [vocab.decode(target) for _, target in examples]
    preds = predict_texts(model, vocab, examples, task, batch_size=batch_size)

    if attack_cfg.k_sites == 0:
        attacked_preds = [list(p) for p in preds]
    else:
        cfg = AttackConfig(
            k_sites=attack_cfg.k_sites,
            objective=AttackObjective.TASK_LOSS_MAX,
            iterations=attack_cfg.iterations,
            rng_seed=attack_cfg.rng_seed,
            site_kinds=attack_cfg.site_kinds,
        )
        attacked_ids: list[list[int]] = []
        for i in range(0, len(examples), batch_size):
            block = examples[i : i + batch_size]
            results = attack_batch(
                model,
                vocab,
                [p for p, _ in block],
                cfg,
                anchors=[target for _, target in block],
            )
            attacked_ids.extend(vocab.encode(r.view.tokens) for r in results)
        max_len = 6 if task == "completion" else 16
        attacked_preds = [
            vocab.decode(ids)
            for ids in greedy_predict_ids(model, attacked_ids, max_len, batch_size)
        ]

    per_example = [
        {
            "id": example[0].id,
            "pred": pred,
            "gold": gold,
            "attacked_pred": attacked,
        }
        for example, pred, gold, attacked in zip(examples, preds, golds, attacked_preds)
    ]
    gen = sum(f1(p, g) for p, g in zip(preds, golds)) / len(golds)
    rob = sum(f1(a, g) for a, g in zip(attacked_preds, golds)) / len(golds)
    return EvalReport(gen_f1=gen, rob_f1=rob, per_example=per_example, attack_cfg=attack_cfg)


def sensitivity_sweep(
    model: CodeModel,
    vocab: Vocabulary,
    programs: Sequence[Program],
    rng_seed=0,
    kinds: Sequence[str] = ("replace", "insert", "both"),
    strengths: Sequence[int] = (1, 3, 5),
    task: str = "summarization",
    iterations: int = 3,
) -> dict:
    """Grid of (Gen-F1, Rob-F1) over transformation family x attack strength."""
    rows = []
    for kind in kinds:
        for k in strengths:
            cfg = AttackConfig(
                k_sites=k,
                objective=AttackObjective.TASK_LOSS_MAX,
                iterations=iterations,
                rng_seed=rng_seed,
                site_kinds=kind,
            )
            report = evaluate(model, vocab, programs, cfg, task=task)
            rows.append(
                {"kinds": kind, "k_sites": k, "gen_f1": report.gen_f1, "rob_f1": report.rob_f1}
            )
    return {"rows": rows}


@dataclass
class LandscapeGrid:
    alphas: list[float]
    betas: list[float]
    values: np.ndarray  # (len(alphas), len(betas))
    directions: dict[str, tuple[np.ndarray, np.ndarray]] = field(repr=False, default_factory=dict)
    base: str = ""
    sample_ids: list[str] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        lines = ["alpha,beta,loss"]
        for i, a in enumerate(self.alphas):
            for j, b in enumerate(self.betas):
                lines.append(f"{a!r},{b!r},{self.values[i, j]!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _symmetric(coords: Sequence[float]) -> bool:
    return abs(min(coords) + max(coords)) < 1e-12


def loss_landscape(
    model: CodeModel,
    vocab: Vocabulary,
    programs: Sequence[Program],
    alphas: Sequence[float],
    betas: Sequence[float],
    seed=0,
    sample_fraction: float = 0.064,
    task: str = "summarization",
    batch_size: int = 64,
) -> LandscapeGrid:
    """Mean task loss on a seeded test sample at theta* + alpha d + beta e.

    The two directions are random parameter-shaped tensors rescaled per
    tensor to match the norms of theta* (filter normalization). Model
    parameters are restored bitwise afterwards; the (0, 0) cell evaluates
    theta* itself exactly.
    """
    if not (_symmetric(alphas) and _symmetric(betas)):
        raise ConfigError("landscape grid bounds must be symmetric about 0")
    examples = task_examples(programs, vocab, task)
    rng = rng_for(seed, "landscape-sample")
    count = max(1, round(sample_fraction * len(examples)))
    picked = sorted(rng.choice(len(examples), size=min(count, len(examples)), replace=False).tolist())
    sample = [examples[i] for i in picked]
    ids = [vocab.encode(p.tokens) for p, _ in sample]
    targets = [target for _, target in sample]

    named = sorted((n, p) for n, p in model.named_parameters())
    originals = {n: p.detach().clone() for n, p in named}
    directions: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    rng_d = rng_for(seed, "landscape-dir", 0)
    rng_e = rng_for(seed, "landscape-dir", 1)
    for name, param in named:
        base_norm = float(torch.linalg.norm(originals[name]))
        pair = []
        for r in (rng_d, rng_e):
            vec = r.standard_normal(tuple(param.shape))
            norm = float(np.linalg.norm(vec))
            if norm > 0 and base_norm > 0:
                vec = vec * (base_norm / norm)
            else:
                vec = np.zeros_like(vec)
            pair.append(vec)
        directions[name] = (pair[0], pair[1])

    def mean_loss() -> float:
        total, n = 0.0, 0
        with torch.no_grad():
            for i in range(0, len(sample), batch_size):
                losses = model.sequence_losses(
                    ids[i : i + batch_size], targets[i : i + batch_size]
                )
                total += float(losses.sum())
                n += losses.shape[0]
        return total / n

    values = np.zeros((len(alphas), len(betas)))
    try:
        for i, a in enumerate(alphas):
            for j, b in enumerate(betas):
                with torch.no_grad():
                    for name, param in named:
                        if a == 0.0 and b == 0.0:
                            param.copy_(originals[name])
                        else:
                            d, e = directions[name]
                            shifted = (
                                originals[name]
                                + a * torch.from_numpy(d)
                                + b * torch.from_numpy(e)
                            )
                            param.copy_(shifted)
                values[i, j] = mean_loss()
    finally:
        with torch.no_grad():
            for name, param in named:
                param.copy_(originals[name])
    return LandscapeGrid(
        alphas=list(alphas),
        betas=list(betas),
        values=values,
        directions=directions,
        base=f"epoch-model vocab={vocab.content_hash()[:12]}",
        sample_ids=[p.id for p, _ in sample],
    )


def weight_deviation(before: Checkpoint, after: Checkpoint) -> float:
    """Frobenius norm of the representation-network weight change."""
    names = sorted(n for n in before.tensors if is_encoder_tensor(n))
    other = sorted(n for n in after.tensors if is_encoder_tensor(n))
    if names != other:
        raise ShapeMismatch("checkpoints disagree on encoder tensor names")
    total = 0.0
    for name in names:
        a, b = before.tensors[name], after.tensors[name]
        if a.shape != b.shape:
            raise ShapeMismatch(f"tensor {name!r} shapes differ: {a.shape} vs {b.shape}")
        total += float(((a - b) ** 2).sum())
    return float(np.sqrt(total))


def encode_programs(
    model: CodeModel, vocab: Vocabulary, programs: Sequence[Program], batch_size: int = 64
) -> torch.Tensor:
    chunks = []
    with torch.no_grad():
        for i in range(0, len(programs), batch_size):
            chunks.append(
                model.encode_batch([vocab.encode(p.tokens) for p in programs[i : i + batch_size]])
            )
    return torch.cat(chunks, dim=0)


def ebe_nearest(
    model: CodeModel,
    vocab: Vocabulary,
    query_tokens: Sequence[str],
    train_programs: Sequence[Program],
    train_z: torch.Tensor | None = None,
) -> tuple[Program, float]:
    """Nearest training program by representation cosine; ties pick lowest id."""
    if not train_programs:
        raise EmptyTrainSet("explanation-by-example needs training programs")
    if train_z is None:
        train_z = encode_programs(model, vocab, train_programs)
    with torch.no_grad():
        q = model.encode(vocab.encode(list(query_tokens)))
        qn = q / torch.linalg.norm(q)
        tn = train_z / torch.linalg.norm(train_z, dim=1, keepdim=True)
        sims = (tn @ qn).numpy()
    best_idx = None
    for i in sorted(range(len(train_programs)), key=lambda i: train_programs[i].id):
        if best_idx is None or sims[i] > sims[best_idx]:
            best_idx = i
    return train_programs[best_idx], float(sims[best_idx])


def ebe_match_rate(
    model: CodeModel,
    vocab: Vocabulary,
    test_programs: Sequence[Program],
    train_programs: Sequence[Program],
    attack_cfg: AttackConfig,
    sample_size: int = 100,
    seed=0,
) -> float:
    """Fraction of sampled test programs whose nearest training neighbour
    survives adversarial perturbation of the query."""
    if not train_programs:
        raise EmptyTrainSet("explanation-by-example needs training programs")
    if not test_programs:
        raise EmptyCorpus("match rate needs test programs")
    rng = rng_for(seed, "ebe-sample")
    count = min(sample_size, len(test_programs))
    picked = sorted(rng.choice(len(test_programs), size=count, replace=False).tolist())
    sample = [test_programs[i] for i in picked]
    if attack_cfg.k_sites == 0:
        return 1.0
    train_z = encode_programs(model, vocab, train_programs)
    anchors = None
    if attack_cfg.objective is AttackObjective.TASK_LOSS_MAX:
        anchors = [vocab.encode(p.summary) for p in sample]
    results = attack_batch(model, vocab, sample, attack_cfg, anchors=anchors)
    matches = 0
    for program, result in zip(sample, results):
        clean, _ = ebe_nearest(model, vocab, program.tokens, train_programs, train_z)
        attacked, _ = ebe_nearest(model, vocab, result.view.tokens, train_programs, train_z)
        matches += int(clean.id == attacked.id)
    return matches / len(sample)


def save_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
