"""Training orchestration.

Pre-training alternates per batch between crafting adversarial views
against the frozen representation (lower level) and one optimizer step on
the multi-view contrastive objective (upper level). Fine-tuning runs one
of three regimes: ST trains on clean batches, AT regenerates adversarial
companions every batch, and SAT regenerates them only at epoch boundaries
every ceil(tau) epochs, training on clean + companion batches in between.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .analyze import f1, predict_texts, task_examples
from .attack import AttackConfig, AttackObjective, attack_batch
from .contrastive import claw_upper_loss
from .corpus import Program, Vocabulary
from .errors import ConfigError, EmptyCorpus, EmptyHistory, NoSites, NonFiniteLoss
from .model import (
    Checkpoint,
    CodeModel,
    ModelConfig,
    init_model,
    set_encoder_frozen,
)
from .seeding import rng_for, stable_seed
from .transform import identity_view, random_view

PRETRAIN_MODES = ("pretrain_claw", "pretrain_random_views")
FINETUNE_MODES = ("finetune_st", "finetune_at", "finetune_sat")
MODES = PRETRAIN_MODES + FINETUNE_MODES
TASKS = ("summarization", "completion")


@dataclass
class TrainConfig:
    mode: str = "pretrain_claw"
    epochs: int = 10
    batch_size: int = 16
    max_lr: float | None = None  # default: 1e-4 pre-training, 1e-3 fine-tuning
    warmup_steps: int = 20
    lr_floor_fraction: float = 0.01
    tau: float = 1.0  # attack-regeneration period in epochs (SAT)
    k_sites: int = 1  # 0 disables attacks entirely
    temperature: float = 0.07
    adv_weight: float = 1.0
    attack_iterations: int = 1  # greedy passes for training-time attacks
    attack_start: str = "program"  # or "random_view": perturb t_rand instead of P
    grad_clip: float = 5.0
    freeze_encoder: bool = False
    task: str = "summarization"
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.k_sites < 0:
            raise ConfigError("k_sites must be >= 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.attack_iterations < 1:
            raise ConfigError("attack_iterations must be >= 1")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.attack_start not in ("program", "random_view"):
            raise ConfigError(f"unknown attack_start {self.attack_start!r}")
        if self.max_lr is not None and not self.max_lr > 0:
            raise ConfigError("max_lr must be > 0")

    def resolved_lr(self) -> float:
        if self.max_lr is not None:
            return self.max_lr
        return 1e-4 if self.mode in PRETRAIN_MODES else 1e-3

    def snapshot(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    metrics: dict
    checkpoint: Checkpoint


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    records: list[EpochRecord]
    attack_trace: list[dict] = field(default_factory=list)
    regen_events: int = 0

    @property
    def history(self) -> list[dict]:
        return [{"epoch": r.epoch, **r.metrics} for r in self.records]


def _batches(n: int, batch_size: int, rng) -> list[list[int]]:
    order = rng.permutation(n).tolist()
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    warm = min(1.0, (step + 1) / max(1, cfg.warmup_steps))
    progress = step / max(1, total_steps - 1) if total_steps > 1 else 1.0
    decay = 1.0 - (1.0 - cfg.lr_floor_fraction) * progress
    return cfg.resolved_lr() * warm * decay


def _optimizer_step(model, opt, loss, cfg, step, total_steps):
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss at step {step}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    trainable = [p for p in model.parameters() if p.requires_grad]
    torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
    lr = _lr_at(step, total_steps, cfg)
    for group in opt.param_groups:
        group["lr"] = lr
    opt.step()


class _JsonlLog:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def write(self, record: dict) -> None:
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------


def pretrain(
    programs: Sequence[Program],
    vocab: Vocabulary,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Contrastive pre-training; returns per-epoch records and checkpoints.

    ``pretrain_claw`` runs the full bi-level loop; ``pretrain_random_views``
    is the same loop with the adversarial view and its loss term disabled.
    """
    cfg.validate()
    if cfg.mode not in PRETRAIN_MODES:
        raise ConfigError(f"pretrain called with mode {cfg.mode!r}")
    if len(programs) < 2:
        raise EmptyCorpus("pre-training needs at least two programs")
    out_dir = Path(out_dir) if out_dir is not None else None
    log = _JsonlLog(out_dir / "pretrain_log.jsonl" if out_dir else None)

    model = init_model(model_cfg or ModelConfig(vocab_size=len(vocab)), cfg.seed)
    opt = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=cfg.resolved_lr()
    )
    program_ids = [vocab.encode(p.tokens) for p in programs]

    adversarial = cfg.mode == "pretrain_claw" and cfg.adv_weight != 0.0 and cfg.k_sites > 0
    # Contrastive batches need one negative; singleton tails are dropped.
    plan = [
        [c for c in _batches(len(programs), cfg.batch_size, rng_for(cfg.seed, "batch-order", e)) if len(c) >= 2]
        for e in range(cfg.epochs)
    ]
    total_steps = sum(len(ep) for ep in plan)

    records: list[EpochRecord] = []
    step = 0
    for epoch, chunks in enumerate(plan):
        sums = {"loss": 0.0, "loss_rand_pair": 0.0, "loss_adv_pair": 0.0}
        attack_rounds = 0
        for batch_index, chunk in enumerate(chunks):
            batch = [programs[i] for i in chunk]
            batch_ids = [program_ids[i] for i in chunk]

            rand_views = []
            for p in batch:
                try:
                    view = random_view(p, vocab, cfg.k_sites or 1, rng_for(cfg.seed, "rand-view", epoch, p.id))
                except NoSites:
                    view = identity_view(p)
                rand_views.append(view)
            rand_ids = [vocab.encode(v.tokens) for v in rand_views]

            adv_ids = None
            if adversarial:
                atk = AttackConfig(
                    k_sites=cfg.k_sites,
                    objective=AttackObjective.CONTRASTIVE_MAX,
                    iterations=cfg.attack_iterations,
                    rng_seed=stable_seed(cfg.seed, "pretrain-attack", epoch, batch_index),
                )
                if cfg.attack_start == "random_view":
                    targets = [
                        Program(id=p.id, tokens=list(v.tokens), source="", summary=p.summary)
                        for p, v in zip(batch, rand_views)
                    ]
                else:
                    targets = batch
                results = attack_batch(model, vocab, targets, atk)
                adv_ids = [vocab.encode(r.view.tokens) for r in results]
                attack_rounds += 1

            total, term_rand, term_adv = claw_upper_loss(
                model, batch_ids, rand_ids, adv_ids, cfg.temperature, cfg.adv_weight
            )
            _optimizer_step(model, opt, total, cfg, step, total_steps)
            step += 1
            sums["loss"] += total.item()
            sums["loss_rand_pair"] += term_rand.item()
            sums["loss_adv_pair"] += term_adv.item()
            log.write(
                {
                    "step": step,
                    "loss_rand_pair": term_rand.item(),
                    "loss_adv_pair": term_adv.item(),
                }
            )

        n = max(1, len(chunks))
        metrics = {k: v / n for k, v in sums.items()}
        metrics.update(steps=len(chunks), attack_rounds=attack_rounds)
        ckpt = Checkpoint.from_model(model, vocab.content_hash(), cfg.snapshot(), epoch + 1)
        if out_dir is not None:
            ckpt.save(out_dir / f"pretrain_epoch{epoch + 1:03d}.ckpt")
        records.append(EpochRecord(epoch + 1, metrics, ckpt))

    final = records[-1].checkpoint
    return TrainResult(final=final, best=final, records=records)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


def _mean_gen_f1(
    model, vocab, examples, task, cached_z=None
) -> float:
    preds = predict_texts(model, vocab, examples, task, cached_z=cached_z)
    scores = [
        f1(pred, vocab.decode(target)) for pred, (_, target) in zip(preds, examples)
    ]
    return sum(scores) / len(scores) if scores else 0.0


def _encode_corpus(model, vocab, examples, batch_size=64) -> dict[str, torch.Tensor]:
    cache: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            block = examples[i : i + batch_size]
            z = model.encode_batch([vocab.encode(p.tokens) for p, _ in block])
            for row, (p, _) in enumerate(block):
                cache[p.id] = z[row]
    return cache


def finetune(
    checkpoint: Checkpoint | None,
    train_programs: Sequence[Program],
    valid_programs: Sequence[Program],
    vocab: Vocabulary,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    out_dir: str | Path | None = None,
    from_scratch: bool = False,
) -> TrainResult:
    """ST / AT / SAT fine-tuning from a pre-trained checkpoint.

    AT regenerates adversarial companions every batch; SAT regenerates the
    whole-split companion cache once every ceil(tau) epochs (tau < 1 falls
    back to the per-batch AT schedule). Companions augment the clean batch.
    With ``freeze_encoder`` only the task head trains, and representations
    are computed once and cached.
    """
    cfg.validate()
    if cfg.mode not in FINETUNE_MODES:
        raise ConfigError(f"finetune called with mode {cfg.mode!r}")
    if checkpoint is None and not from_scratch:
        raise ConfigError("fine-tuning requires a checkpoint unless from_scratch=True")
    if not train_programs:
        raise EmptyCorpus("fine-tuning needs training programs")
    out_dir = Path(out_dir) if out_dir is not None else None
    log = _JsonlLog(out_dir / "finetune_log.jsonl" if out_dir else None)

    if checkpoint is not None:
        model = checkpoint.build_model(vocab)
    else:
        model = init_model(model_cfg or ModelConfig(vocab_size=len(vocab)), cfg.seed)
    set_encoder_frozen(model, cfg.freeze_encoder)
    opt = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=cfg.resolved_lr()
    )

    examples = task_examples(train_programs, vocab, cfg.task)
    valid_examples = task_examples(valid_programs, vocab, cfg.task) if valid_programs else []
    clean_ids = [vocab.encode(p.tokens) for p, _ in examples]
    targets = [target for _, target in examples]

    attacks_enabled = cfg.mode in ("finetune_at", "finetune_sat") and cfg.k_sites > 0
    per_batch = attacks_enabled and (cfg.mode == "finetune_at" or cfg.tau < 1)
    epoch_period = max(1, math.ceil(cfg.tau)) if attacks_enabled else None

    frozen = cfg.freeze_encoder
    clean_z = _encode_corpus(model, vocab, examples) if frozen else None
    valid_z = _encode_corpus(model, vocab, valid_examples) if frozen and valid_examples else None

    # Companion cache: program id -> (token ids, representation?, birth epoch).
    companions: dict[str, tuple[list[int], torch.Tensor | None, int]] = {}
    trace: list[dict] = []
    regen_events = 0

    def regenerate(indices: list[int], epoch: int, scope: str) -> None:
        nonlocal regen_events
        atk = AttackConfig(
            k_sites=cfg.k_sites,
            objective=AttackObjective.TASK_LOSS_MAX,
            iterations=cfg.attack_iterations,
            rng_seed=stable_seed(cfg.seed, "ft-attack", regen_events),
        )
        event = {"event": regen_events, "epoch": epoch + 1, "scope": scope, "programs": []}
        for i in range(0, len(indices), cfg.batch_size):
            block = indices[i : i + cfg.batch_size]
            results = attack_batch(
                model,
                vocab,
                [examples[j][0] for j in block],
                atk,
                anchors=[targets[j] for j in block],
            )
            with torch.no_grad():
                z_block = (
                    model.encode_batch([vocab.encode(r.view.tokens) for r in results])
                    if frozen
                    else None
                )
            for row, j in enumerate(block):
                pid = examples[j][0].id
                view = results[row].view
                companions[pid] = (
                    vocab.encode(view.tokens),
                    z_block[row] if frozen else None,
                    epoch,
                )
                event["programs"].append(
                    {
                        "id": pid,
                        "chosen": [
                            [site.kind.value, list(site.positions), payload]
                            for site, payload in results[row].chosen
                        ],
                    }
                )
        trace.append(event)
        regen_events += 1

    plan = [
        _batches(len(examples), cfg.batch_size, rng_for(cfg.seed, "batch-order", e))
        for e in range(cfg.epochs)
    ]
    total_steps = sum(len(ep) for ep in plan)

    records: list[EpochRecord] = []
    step = 0
    for epoch, chunks in enumerate(plan):
        if attacks_enabled and not per_batch and epoch % epoch_period == 0:
            regenerate(list(range(len(examples))), epoch, scope="split")
        loss_sum = 0.0
        for chunk in chunks:
            if per_batch:
                regenerate(list(chunk), epoch, scope="batch")
            batch_targets = [targets[j] for j in chunk]
            if attacks_enabled:
                comp = [companions[examples[j][0].id] for j in chunk]
                for _, _, born in comp:
                    assert epoch - born < (1 if per_batch else epoch_period)
                batch_targets = batch_targets + [targets[j] for j in chunk]
            if frozen:
                z_rows = [clean_z[examples[j][0].id] for j in chunk]
                if attacks_enabled:
                    z_rows += [c[1] for c in comp]
                losses = model.decode_losses_from_z(torch.stack(z_rows), batch_targets)
            else:
                ids = [clean_ids[j] for j in chunk]
                if attacks_enabled:
                    ids = ids + [c[0] for c in comp]
                losses = model.sequence_losses(ids, batch_targets)
            _optimizer_step(model, opt, losses.mean(), cfg, step, total_steps)
            step += 1
            loss_sum += losses.mean().item()

        metrics = {"train_loss": loss_sum / max(1, len(chunks))}
        if valid_examples:
            metrics["gen_f1"] = _mean_gen_f1(
                model, vocab, valid_examples, cfg.task, cached_z=valid_z
            )
        ckpt = Checkpoint.from_model(model, vocab.content_hash(), cfg.snapshot(), epoch + 1)
        if out_dir is not None:
            ckpt.save(out_dir / f"finetune_epoch{epoch + 1:03d}.ckpt")
        records.append(EpochRecord(epoch + 1, metrics, ckpt))
        log.write({"epoch": epoch + 1, **metrics})

    best = select_best(records, "gen_f1") if valid_examples else records[-1].checkpoint
    return TrainResult(
        final=records[-1].checkpoint,
        best=best,
        records=records,
        attack_trace=trace,
        regen_events=regen_events,
    )


def select_best(records: Sequence[EpochRecord], metric: str = "gen_f1") -> Checkpoint:
    """Checkpoint of the epoch maximizing the metric; ties pick the earliest."""
    if not records:
        raise EmptyHistory("no epochs recorded")
    best = records[0]
    for record in records[1:]:
        if record.metrics[metric] > best.metrics[metric]:
            best = record
    return best.checkpoint


def expected_regen_events(epochs: int, tau: float, batches_per_epoch: int) -> int:
    """Attack-regeneration count implied by the schedule parameters."""
    if tau < 1:
        return epochs * batches_per_epoch
    return math.ceil(epochs / math.ceil(tau))
