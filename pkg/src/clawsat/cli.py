"""Command-line entry point.

Subcommands wire corpora, checkpoints, and reports into the pipeline:
gen-corpus, pretrain, finetune, attack, eval, sweep, landscape, ebe, and
the one-shot reproduce-desk experiment matrix. All randomness flows from
--seed; rerunning any subcommand with identical inputs overwrites its
outputs byte-identically.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__, analyze, corpus, transform
from .attack import AttackConfig, AttackObjective, attack_batch
from .errors import ClawsatError, ConfigError
from .manifest import RunManifest
from .model import Checkpoint, ModelConfig
from .seeding import stable_seed
from .train import FINETUNE_MODES, TrainConfig, finetune, pretrain

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def load_config(path: str | Path) -> dict:
    """Flat key=value file -> typed TrainConfig field values."""
    values: dict = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return values


def _coerce(key: str, value: str):
    target = _CONFIG_FIELDS[key].type
    try:
        if target in ("bool",):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if target in ("int",):
            return int(value)
        if target in ("float", "float | None"):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from exc


def build_train_config(mode: str, args, file_values: dict | None = None) -> TrainConfig:
    """Defaults < config file < command-line flags."""
    values = dict(file_values or {})
    values["mode"] = mode
    for key in _CONFIG_FIELDS:
        flag = getattr(args, key, None)
        if flag is not None and key != "mode":
            values[key] = flag
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--max-lr", dest="max_lr", type=float)
    parser.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--k-sites", dest="k_sites", type=int)
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--adv-weight", dest="adv_weight", type=float)
    parser.add_argument("--attack-iterations", dest="attack_iterations", type=int)
    parser.add_argument("--grad-clip", dest="grad_clip", type=float)
    parser.add_argument("--task", choices=("summarization", "completion"))


def _model_config(args, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        d_embed=args.d_embed,
        d_hidden=args.d_hidden,
        d_proj=args.d_proj,
        d_dec=args.d_dec,
    )


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--d-embed", dest="d_embed", type=int, default=64)
    parser.add_argument("--d-hidden", dest="d_hidden", type=int, default=128)
    parser.add_argument("--d-proj", dest="d_proj", type=int, default=64)
    parser.add_argument("--d-dec", dest="d_dec", type=int, default=128)


def _load_corpus(directory: str | Path, seed: int) -> tuple[corpus.CorpusSplit, corpus.Vocabulary]:
    directory = Path(directory)
    split = corpus.load_split(directory / "corpus", seed=seed)
    vocab = corpus.Vocabulary.load(directory / "vocab.txt")
    return split, vocab


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clawsat",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"clawsat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a toy corpus with splits and vocabulary")
    p.add_argument("--n", type=int, default=2000, help="number of programs")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--vocab-size", type=int, default=2000)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="contrastive pre-training")
    p.add_argument("--corpus", required=True, help="directory from gen-corpus")
    p.add_argument("--mode", choices=("claw", "random-views"), default="claw")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    _add_model_flags(p)

    p = sub.add_parser("finetune", help="ST / AT / SAT fine-tuning")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=("st", "at", "sat"), required=True)
    p.add_argument("--from", dest="from_ckpt", help="pre-trained checkpoint")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--freeze-encoder", dest="freeze_encoder", action="store_true", default=None)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    _add_model_flags(p)

    p = sub.add_parser("attack", help="attack a split and report per-program objectives")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--objective", choices=("contrastive", "task"), default="task")
    p.add_argument("--kinds", choices=("replace", "insert", "both"), default="both")
    p.add_argument("--limit", type=int, default=0, help="attack only the first N programs")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="JSONL report path")

    p = sub.add_parser("eval", help="Gen-F1 / Rob-F1 evaluation")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--kinds", choices=("replace", "insert", "both"), default="both")
    p.add_argument("--task", choices=("summarization", "completion"), default="summarization")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="sensitivity grid over kinds x attack strength")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--strengths", default="1,3,5")
    p.add_argument("--kinds", default="replace,insert,both")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("landscape", help="loss landscape grid around a checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bound", type=float, default=1.0)
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--sample-fraction", dest="sample_fraction", type=float, default=0.064)
    p.add_argument("--plot", help="optional contour image path (requires matplotlib)")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("ebe", help="explanation-by-example retrieval / match rate")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--query-id", help="report the nearest neighbour of one test program")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--sample", type=int, default=100)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser(
        "reproduce-desk",
        help="full directional matrix: pretrain modes x fine-tune regimes, with evals",
    )
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--seeds", type=int, default=1, help="number of training seeds")
    p.add_argument("--programs", type=int, default=240)
    p.add_argument("--vocab-size", type=int, default=2000)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int, default=4)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int, default=4)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.add_argument("--regimes", default="st,sat")
    p.add_argument("--full-finetune", action="store_true", help="train all weights, not just the head")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--eval-k", dest="eval_k", type=int, default=1)
    p.add_argument("--out", required=True)

    return parser


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------


def _cmd_gen_corpus(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    programs = corpus.generate_toy_corpus(args.n, args.seed)
    split = corpus.split_corpus(programs, seed=args.seed)
    corpus.save_split(split, out / "corpus")
    vocab = corpus.build_vocabulary(programs, max_size=args.vocab_size)
    vocab.save(out / "vocab.txt")
    transform.write_templates_reference(out / "TEMPLATES.md")
    RunManifest(
        command="gen-corpus",
        seeds=[args.seed],
        config={"n": args.n, "vocab_size": args.vocab_size},
        corpus_digest=corpus.corpus_digest(programs),
    ).write(out / "manifest.json")
    print(f"wrote {len(split.train)}/{len(split.valid)}/{len(split.test)} programs to {out}")
    return 0


def _cmd_pretrain(args) -> int:
    split, vocab = _load_corpus(args.corpus, args.seed)
    mode = "pretrain_claw" if args.mode == "claw" else "pretrain_random_views"
    file_values = load_config(args.config) if args.config else {}
    cfg = build_train_config(mode, args, file_values)
    cfg.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = pretrain(split.train, vocab, cfg, model_cfg=_model_config(args, len(vocab)), out_dir=out)
    result.final.save(out / "pretrain_final.ckpt")
    RunManifest(
        command="pretrain",
        seeds=[args.seed],
        config=cfg.snapshot(),
        corpus_digest=corpus.corpus_digest(split.all_programs()),
        lineage={"pretrain_checkpoint": str(out / "pretrain_final.ckpt")},
    ).write(out / "manifest.json")
    print(f"pretrained {cfg.epochs} epochs; final loss {result.history[-1]['loss']:.4f}")
    return 0


def _cmd_finetune(args) -> int:
    split, vocab = _load_corpus(args.corpus, args.seed)
    mode = f"finetune_{args.mode}"
    file_values = load_config(args.config) if args.config else {}
    cfg = build_train_config(mode, args, file_values)
    cfg.seed = args.seed
    if args.freeze_encoder is not None:
        cfg.freeze_encoder = args.freeze_encoder
    ckpt = Checkpoint.load(args.from_ckpt, vocab) if args.from_ckpt else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = finetune(
        ckpt,
        split.train,
        split.valid,
        vocab,
        cfg,
        model_cfg=_model_config(args, len(vocab)),
        out_dir=out,
        from_scratch=args.from_scratch,
    )
    result.best.save(out / "finetune_best.ckpt")
    result.final.save(out / "finetune_final.ckpt")
    (out / "history.json").write_text(
        json.dumps(result.history, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    RunManifest(
        command="finetune",
        seeds=[args.seed],
        config=cfg.snapshot(),
        corpus_digest=corpus.corpus_digest(split.all_programs()),
        lineage={
            "pretrain_checkpoint": args.from_ckpt,
            "finetune_checkpoint": str(out / "finetune_best.ckpt"),
        },
    ).write(out / "manifest.json")
    best_f1 = max((r.get("gen_f1", 0.0) for r in result.history), default=0.0)
    print(f"fine-tuned {cfg.epochs} epochs ({args.mode}); best valid Gen-F1 {best_f1:.2f}")
    return 0


def _select_split(split: corpus.CorpusSplit, name: str) -> list[corpus.Program]:
    return {"train": split.train, "valid": split.valid, "test": split.test}[name]


def _cmd_attack(args) -> int:
    split, vocab = _load_corpus(args.corpus, args.seed)
    programs = _select_split(split, args.split)
    if args.limit:
        programs = programs[: args.limit]
    model = Checkpoint.load(args.ckpt, vocab).build_model(vocab)
    objective = (
        AttackObjective.TASK_LOSS_MAX if args.objective == "task" else AttackObjective.CONTRASTIVE_MAX
    )
    cfg = AttackConfig(
        k_sites=args.k,
        objective=objective,
        iterations=args.iterations,
        rng_seed=stable_seed(args.seed, "cli-attack"),
        site_kinds=args.kinds,
    )
    anchors = None
    if objective is AttackObjective.TASK_LOSS_MAX:
        anchors = [vocab.encode(p.summary) for p in programs]
    with open(args.out, "w", encoding="utf-8") as fh:
        for i in range(0, len(programs), 32):
            block = programs[i : i + 32]
            block_anchors = anchors[i : i + 32] if anchors is not None else None
            for program, result in zip(block, attack_batch(model, vocab, block, cfg, block_anchors)):
                fh.write(
                    json.dumps(
                        {
                            "id": program.id,
                            "sites": [
                                {"kind": site.kind.value, "positions": list(site.positions)}
                                for site, _ in result.chosen
                            ],
                            "chosen_payloads": [payload for _, payload in result.chosen],
                            "objective_before": result.objective_before,
                            "objective_after": result.objective_after,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    print(f"attacked {len(programs)} programs -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    split, vocab = _load_corpus(args.corpus, args.seed)
    model = Checkpoint.load(args.ckpt, vocab).build_model(vocab)
    cfg = AttackConfig(
        k_sites=args.k,
        objective=AttackObjective.TASK_LOSS_MAX,
        iterations=args.iterations,
        rng_seed=stable_seed(args.seed, "cli-eval"),
        site_kinds=args.kinds,
    )
    report = analyze.evaluate(model, vocab, _select_split(split, args.split), cfg, task=args.task)
    analyze.save_report(report.to_json(), args.out)
    print(f"Gen-F1 {report.gen_f1:.2f}  Rob-F1 {report.rob_f1:.2f} -> {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    split, vocab = _load_corpus(args.corpus, args.seed)
    model = Checkpoint.load(args.ckpt, vocab).build_model(vocab)
    grid = analyze.sensitivity_sweep(
        model,
        vocab,
        split.test,
        rng_seed=stable_seed(args.seed, "cli-sweep"),
        kinds=tuple(args.kinds.split(",")),
        strengths=tuple(int(s) for s in args.strengths.split(",")),
    )
    analyze.save_report(grid, args.out)
    print(f"{len(grid['rows'])} sweep cells -> {args.out}")
    return 0


def _cmd_landscape(args) -> int:
    split, vocab = _load_corpus(args.corpus, args.seed)
    model = Checkpoint.load(args.ckpt, vocab).build_model(vocab)
    coords = [
        args.bound * (2 * i / (args.points - 1) - 1.0) if args.points > 1 else 0.0
        for i in range(args.points)
    ]
    grid = analyze.loss_landscape(
        model,
        vocab,
        split.test,
        alphas=coords,
        betas=coords,
        seed=stable_seed(args.seed, "cli-landscape"),
        sample_fraction=args.sample_fraction,
    )
    grid.to_csv(args.out)
    if args.plot:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError as exc:
            raise ConfigError("--plot requires matplotlib (pip install clawsat[plot])") from exc
        fig, ax = plt.subplots(figsize=(5, 4))
        contour = ax.contourf(grid.betas, grid.alphas, grid.values, levels=24)
        fig.colorbar(contour, ax=ax)
        ax.set_xlabel("beta")
        ax.set_ylabel("alpha")
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)
    print(f"{args.points}x{args.points} landscape grid -> {args.out}")
    return 0


def _cmd_ebe(args) -> int:
    split, vocab = _load_corpus(args.corpus, args.seed)
    model = Checkpoint.load(args.ckpt, vocab).build_model(vocab)
    if args.query_id:
        matches = [p for p in split.test if p.id == args.query_id]
        if not matches:
            raise ConfigError(f"no test program with id {args.query_id!r}")
        nearest, similarity = analyze.ebe_nearest(model, vocab, matches[0].tokens, split.train)
        report = {"query": args.query_id, "nearest": nearest.id, "similarity": similarity}
    else:
        cfg = AttackConfig(
            k_sites=args.k,
            objective=AttackObjective.CONTRASTIVE_MAX,
            rng_seed=stable_seed(args.seed, "cli-ebe"),
        )
        rate = analyze.ebe_match_rate(
            model, vocab, split.test, split.train, cfg, sample_size=args.sample, seed=args.seed
        )
        report = {"match_rate": rate, "sample": min(args.sample, len(split.test)), "k_sites": args.k}
    analyze.save_report(report, args.out)
    print(f"ebe report -> {args.out}")
    return 0


def _cmd_reproduce_desk(args) -> int:
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(parents=True, exist_ok=True)

    programs = corpus.generate_toy_corpus(args.programs, args.seed)
    split = corpus.split_corpus(programs, seed=args.seed)
    corpus.save_split(split, out / "corpus")
    vocab = corpus.build_vocabulary(programs, max_size=args.vocab_size)
    vocab.save(out / "vocab.txt")
    transform.write_templates_reference(out / "TEMPLATES.md")

    regimes = tuple(args.regimes.split(","))
    for regime in regimes:
        if f"finetune_{regime}" not in FINETUNE_MODES:
            raise ConfigError(f"unknown fine-tune regime {regime!r}")
    encoders = ("none", "random_views", "claw")
    seeds = [args.seed + i for i in range(args.seeds)]
    rows = []

    for seed in seeds:
        pretrained: dict[str, Checkpoint | None] = {"none": None}
        for encoder in ("random_views", "claw"):
            cfg = TrainConfig(
                mode=f"pretrain_{encoder}",
                epochs=args.pretrain_epochs,
                batch_size=args.batch_size,
                seed=seed,
            )
            result = pretrain(split.train, vocab, cfg)
            ckpt_path = out / "checkpoints" / f"pretrain_{encoder}_seed{seed}.ckpt"
            result.final.save(ckpt_path)
            pretrained[encoder] = result.final

        for encoder in encoders:
            for regime in regimes:
                cfg = TrainConfig(
                    mode=f"finetune_{regime}",
                    epochs=args.finetune_epochs,
                    batch_size=args.batch_size,
                    tau=args.tau,
                    freeze_encoder=not args.full_finetune,
                    seed=seed,
                )
                result = finetune(
                    pretrained[encoder],
                    split.train,
                    split.valid,
                    vocab,
                    cfg,
                    from_scratch=(encoder == "none"),
                )
                cell = f"{encoder}_{regime}_seed{seed}"
                result.best.save(out / "checkpoints" / f"finetune_{cell}.ckpt")
                model = result.best.build_model(vocab)
                eval_cfg = AttackConfig(
                    k_sites=args.eval_k,
                    objective=AttackObjective.TASK_LOSS_MAX,
                    iterations=3,
                    rng_seed=stable_seed(args.seed, "desk-eval"),
                )
                report = analyze.evaluate(model, vocab, split.test, eval_cfg)
                analyze.save_report(report.to_json(), out / "reports" / f"eval_{cell}.json")
                rows.append(
                    {
                        "encoder": encoder,
                        "regime": regime,
                        "seed": seed,
                        "gen_f1": report.gen_f1,
                        "rob_f1": report.rob_f1,
                    }
                )
                print(
                    f"[{cell}] Gen-F1 {report.gen_f1:6.2f}  Rob-F1 {report.rob_f1:6.2f}",
                    flush=True,
                )

    summary = {"rows": rows}
    analyze.save_report(summary, out / "summary.json")
    _write_summary_table(rows, encoders, regimes, out / "summary.md")
    RunManifest(
        command="reproduce-desk",
        seeds=seeds,
        config={
            "programs": args.programs,
            "pretrain_epochs": args.pretrain_epochs,
            "finetune_epochs": args.finetune_epochs,
            "batch_size": args.batch_size,
            "regimes": list(regimes),
            "tau": args.tau,
            "eval_k": args.eval_k,
            "partial_finetune": not args.full_finetune,
        },
        corpus_digest=corpus.corpus_digest(programs),
    ).write(out / "manifest.json")
    print(f"summary -> {out / 'summary.md'}")
    return 0


def _write_summary_table(rows, encoders, regimes, path: Path) -> None:
    lines = [
        "| encoder | regime | mean Gen-F1 | mean Rob-F1 | seeds |",
        "|---|---|---|---|---|",
    ]
    for encoder in encoders:
        for regime in regimes:
            cell = [r for r in rows if r["encoder"] == encoder and r["regime"] == regime]
            if not cell:
                continue
            gen = sum(r["gen_f1"] for r in cell) / len(cell)
            rob = sum(r["rob_f1"] for r in cell) / len(cell)
            lines.append(f"| {encoder} | {regime} | {gen:.2f} | {rob:.2f} | {len(cell)} |")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


_HANDLERS = {
    "gen-corpus": _cmd_gen_corpus,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "landscape": _cmd_landscape,
    "ebe": _cmd_ebe,
    "reproduce-desk": _cmd_reproduce_desk,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except ClawsatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
