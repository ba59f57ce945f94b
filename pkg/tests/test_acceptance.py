"""Acceptance suite: one test per criterion, printing a PASS/FAIL line each.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion
lines as they complete. The two directional experiments (criteria 6 and 7)
train at the ~2,000-program desk scale and dominate the runtime; session
fixtures share their pre-trained encoders.
"""

from __future__ import annotations

import filecmp
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

from clawsat import analyze, corpus, transform
from clawsat.attack import (
    AttackConfig,
    AttackObjective,
    attack_batch,
    score_candidates,
)
from clawsat.cli import main as cli_main
from clawsat.contrastive import ContrastiveBatch, nt_xent
from clawsat.model import Checkpoint, ModelConfig, grad_params, init_model
from clawsat.seeding import rng_for
from clawsat.train import TrainConfig, finetune, pretrain
from tests.test_contrastive import nt_xent_oracle


@contextmanager
def criterion(name: str):
    started = time.time()
    try:
        yield
    except Exception:
        print(f"\n[FAIL] {name}")
        raise
    print(f"\n[PASS] {name} ({time.time() - started:.1f}s)")


# ---------------------------------------------------------------------------
# Shared desk-scale world (criteria 3, 4, 6, 7).
# ---------------------------------------------------------------------------

DESK_SEEDS = (1, 2, 3)
_PRETRAIN_EPOCHS = 6
_FINETUNE_EPOCHS = 8
_BATCH = 32
_LR = 3e-3


@pytest.fixture(scope="session")
def desk_world():
    programs = corpus.generate_toy_corpus(2000, seed=100)
    split = corpus.split_corpus(programs, seed=100)
    vocab = corpus.build_vocabulary(programs, max_size=2000)
    return split, vocab


@pytest.fixture(scope="session")
def pretrain_cache(desk_world):
    split, vocab = desk_world
    cache: dict[tuple[str, int], Checkpoint] = {}

    def get(mode: str, seed: int) -> Checkpoint:
        key = (mode, seed)
        if key not in cache:
            cfg = TrainConfig(
                mode=mode,
                epochs=_PRETRAIN_EPOCHS,
                batch_size=_BATCH,
                max_lr=_LR,
                k_sites=1,
                attack_iterations=1,
                seed=seed,
            )
            cache[key] = pretrain(split.train, vocab, cfg).final
        return cache[key]

    return get


def _partial_finetune(ckpt, split, vocab, seed, mode="finetune_st", tau=1.0, k=1):
    cfg = TrainConfig(
        mode=mode,
        epochs=_FINETUNE_EPOCHS,
        batch_size=_BATCH,
        max_lr=_LR,
        freeze_encoder=True,
        tau=tau,
        k_sites=k,
        attack_iterations=1,
        seed=seed,
    )
    return finetune(ckpt, split.train, split.valid, vocab, cfg)


def _test_eval(ckpt, split, vocab, k=1):
    model = ckpt.build_model(vocab)
    cfg = AttackConfig(
        k_sites=k, objective=AttackObjective.TASK_LOSS_MAX, iterations=3, rng_seed=777
    )
    return analyze.evaluate(model, vocab, split.test, cfg)


# ---------------------------------------------------------------------------
# Criterion 1
# ---------------------------------------------------------------------------


def test_criterion_1_nt_xent_oracle_equivalence():
    with criterion("criterion 1: NT-Xent matches the double-loop oracle"):
        rng = rng_for("acceptance-ntxent")
        checked = 0
        for _ in range(100):
            n = int(rng.choice([2, 4, 8]))
            t = float(rng.choice([0.07, 0.5, 1.0]))
            anchors = torch.from_numpy(rng.normal(size=(n, 6)))
            positives = torch.from_numpy(rng.normal(size=(n, 6)))
            got = nt_xent(ContrastiveBatch(anchors, positives, t)).item()
            want = nt_xent_oracle(anchors.tolist(), positives.tolist(), t)
            assert got == pytest.approx(want, abs=1e-6)
            checked += 1
        assert checked == 100
        for n in (2, 4, 8):
            z = torch.from_numpy(rng.normal(size=(1, 5))).repeat(n, 1)
            loss = nt_xent(ContrastiveBatch(z, z.clone(), 0.07)).item()
            assert loss == pytest.approx(math.log(2 * n - 1), abs=1e-9)


# ---------------------------------------------------------------------------
# Criterion 2
# ---------------------------------------------------------------------------


def test_criterion_2_gradient_finite_difference_agreement():
    with criterion("criterion 2: analytic gradients match finite differences"):
        vocab_size = 14
        model = init_model(
            ModelConfig(vocab_size, d_embed=4, d_hidden=4, d_proj=4, d_dec=4), seed=17
        )
        ids, target = [4, 5, 6, 7, 8], [9, 10, 11]
        h = 1e-3

        def task():
            return model.task_loss(ids, target)

        def contrastive():
            z1 = model.encode_batch([ids, [5, 6, 7]])
            z2 = model.encode_batch([[6, 5, 7, 8], [10, 11]])
            return nt_xent(ContrastiveBatch(z1, z2, 0.5))

        rng = rng_for("acceptance-fd")
        named = dict(model.named_parameters())
        names = sorted(named)
        probes = 0
        for loss_fn in (task, contrastive):
            grads = grad_params(model, loss_fn)
            for _ in range(15):
                name = names[int(rng.integers(0, len(names)))]
                param = named[name]
                idx = int(rng.integers(0, param.numel()))
                with torch.no_grad():
                    keep = param.view(-1)[idx].item()
                    param.view(-1)[idx] = keep + h
                    up = loss_fn().item()
                    param.view(-1)[idx] = keep - h
                    down = loss_fn().item()
                    param.view(-1)[idx] = keep
                fd = (up - down) / (2 * h)
                an = grads[name].view(-1)[idx].item()
                assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6), name
                probes += 1

        # input-embedding gradients under the task objective
        def embed_objective(embeds, lengths):
            z = model.encode_batch(inputs_embeds=embeds, lengths=lengths)
            return model.decode_losses_from_z(z, [target]).sum()

        from clawsat.model import grad_inputs

        grad = grad_inputs(model, ids, embed_objective)
        base_embeds, lengths = model.embed_ids([ids])
        for _ in range(20):
            pos = int(rng.integers(0, len(ids)))
            dim = int(rng.integers(0, 4))
            bumped = base_embeds.detach().clone()
            bumped[0, pos, dim] += h
            up = embed_objective(bumped, lengths).item()
            bumped[0, pos, dim] -= 2 * h
            down = embed_objective(bumped, lengths).item()
            fd = (up - down) / (2 * h)
            an = grad[pos, dim].item()
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6)
            probes += 1
        assert probes == 50


# ---------------------------------------------------------------------------
# Criterion 3
# ---------------------------------------------------------------------------


def test_criterion_3_semantics_preservation(desk_world):
    with criterion("criterion 3: 1000 random + 200 adversarial views preserve semantics"):
        split, vocab = desk_world
        fixtures = split.train[:250]
        failures = 0
        for trial in range(1000):
            p = fixtures[trial % len(fixtures)]
            rng = rng_for("acceptance-sem", trial)
            k = int(rng.integers(1, 4))
            view = transform.random_view(p, vocab, k, rng)
            failures += not transform.check_semantics(p, view)
        assert failures == 0

        model = init_model(ModelConfig(vocab_size=len(vocab)), seed=23)
        cfg = AttackConfig(
            k_sites=2, objective=AttackObjective.CONTRASTIVE_MAX, iterations=2,
            rng_seed="acceptance-adv",
        )
        adv_failures = 0
        targets = fixtures[:200]
        for i in range(0, 200, 25):
            block = targets[i : i + 25]
            for p, result in zip(block, attack_batch(model, vocab, block, cfg)):
                adv_failures += not transform.check_semantics(p, result.view)
        assert adv_failures == 0


# ---------------------------------------------------------------------------
# Criterion 4
# ---------------------------------------------------------------------------


def test_criterion_4_attack_validity(desk_world):
    split, vocab = desk_world
    with criterion("criterion 4a: linearized argmax == exhaustive search (linear encoder)"):
        # 20-token candidate vocabulary: enough filler words so each probed
        # site sees exactly 20 candidates after exclusions.
        model = init_model(
            ModelConfig(vocab_size=len(vocab), d_embed=8, d_hidden=4, d_proj=4, d_dec=4),
            seed=29,
        )
        rng = rng_for("acceptance-linear")
        direction = torch.from_numpy(rng.normal(size=8))
        probes = 0
        programs = [p for p in split.train if len(transform.sites_of(p)) >= 3]
        while probes < 50:
            p = programs[probes % len(programs)]
            sites = [
                s
                for s in transform.sites_of(p)
                if s.kind
                in (transform.SiteKind.REPLACE_LOCAL_VAR, transform.SiteKind.REPLACE_PARAM)
            ]
            if not sites:
                programs.remove(p)
                continue
            site = sites[int(rng.integers(0, len(sites)))]
            n = len(p.tokens)
            grads = torch.stack([direction / n] * len(site.positions))
            words, scores = score_candidates(model, vocab, p, site, grads)
            order = rng.permutation(len(words))[:20].tolist()
            words = [words[i] for i in order]
            scores = scores[order]
            brute = []
            with torch.no_grad():
                for w in words:
                    tokens, _ = transform.apply_assignment(p, [(site, w)])
                    emb = model.embedding(torch.tensor(vocab.encode(tokens)))
                    brute.append((emb.mean(dim=0) @ direction).item())
            assert int(torch.argmax(scores)) == int(np.argmax(brute))
            probes += 1

    with criterion("criterion 4b: attacks never decrease the objective (eps 1e-6)"):
        model = init_model(ModelConfig(vocab_size=len(vocab)), seed=31)
        programs = split.valid[:60]
        for objective, anchors in (
            (AttackObjective.CONTRASTIVE_MAX, None),
            (AttackObjective.TASK_LOSS_MAX, [vocab.encode(p.summary) for p in programs]),
        ):
            cfg = AttackConfig(k_sites=2, objective=objective, iterations=2, rng_seed=37)
            for i in range(0, len(programs), 30):
                block = programs[i : i + 30]
                block_anchors = anchors[i : i + 30] if anchors else None
                for r in attack_batch(model, vocab, block, cfg, block_anchors):
                    assert r.objective_after >= r.objective_before - 1e-6

    with criterion("criterion 4c: adversarial views are harder positives than random views"):
        model = init_model(ModelConfig(vocab_size=len(vocab)), seed=41)
        wins = 0
        for b in range(50):
            rng = rng_for("acceptance-hard", b)
            idx = rng.choice(len(split.train), size=8, replace=False).tolist()
            batch = [split.train[i] for i in idx]
            ids = [vocab.encode(p.tokens) for p in batch]
            with torch.no_grad():
                anchors = model.encode_batch(ids)
            cfg = AttackConfig(
                k_sites=1, objective=AttackObjective.CONTRASTIVE_MAX,
                iterations=2, rng_seed=("acceptance-hard", b),
            )
            results = attack_batch(
                model, vocab, batch, cfg, [anchors[i] for i in range(len(batch))]
            )
            adv_mean = float(np.mean([r.objective_after for r in results]))
            rand_objs = []
            with torch.no_grad():
                views = [
                    transform.random_view(p, vocab, 1, rng_for("acceptance-hard-rand", b, p.id))
                    for p in batch
                ]
                z = model.encode_batch([vocab.encode(v.tokens) for v in views])
                zn = z / torch.linalg.norm(z, dim=1, keepdim=True)
                an = anchors / torch.linalg.norm(anchors, dim=1, keepdim=True)
                rand_objs = (1.0 - (zn * an).sum(dim=1)).tolist()
            wins += adv_mean > float(np.mean(rand_objs))
        assert wins >= 35, f"adversarial views harder in only {wins}/50 batches"


# ---------------------------------------------------------------------------
# Criterion 5
# ---------------------------------------------------------------------------


def test_criterion_5_schedule_degeneracies():
    with criterion("criterion 5: SAT(tau<1) == AT trace; SAT(k=0) == ST bitwise"):
        programs = corpus.generate_toy_corpus(40, seed=55)
        vocab = corpus.build_vocabulary(programs, max_size=2000)
        model_cfg = ModelConfig(vocab_size=len(vocab), d_embed=10, d_hidden=12, d_proj=8, d_dec=12)
        pre = pretrain(
            programs, vocab,
            TrainConfig(mode="pretrain_random_views", epochs=1, batch_size=8, max_lr=1e-3, seed=5),
            model_cfg=model_cfg,
        ).final

        # 40 programs at batch size 4 -> 10 batches per epoch
        base = dict(epochs=2, batch_size=4, k_sites=1, attack_iterations=1, seed=19)
        at = finetune(pre, programs, [], vocab, TrainConfig(mode="finetune_at", **base))
        sat = finetune(
            pre, programs, [], vocab, TrainConfig(mode="finetune_sat", tau=0.1, **base)
        )
        assert at.attack_trace == sat.attack_trace
        assert at.regen_events == sat.regen_events == 2 * 10

        st = finetune(
            pre, programs, [], vocab,
            TrainConfig(mode="finetune_st", epochs=2, batch_size=4, seed=19),
        )
        sat0 = finetune(
            pre, programs, [], vocab,
            TrainConfig(mode="finetune_sat", tau=1.0, k_sites=0, epochs=2, batch_size=4, seed=19),
        )
        assert set(st.final.tensors) == set(sat0.final.tensors)
        for name in st.final.tensors:
            assert np.array_equal(st.final.tensors[name], sat0.final.tensors[name]), name


# ---------------------------------------------------------------------------
# Criteria 6 and 7: directional desk-scale reproductions.
# ---------------------------------------------------------------------------


def test_criterion_6_partial_finetune_robustness_margin(desk_world, pretrain_cache):
    with criterion(
        "criterion 6: PF CLAW beats PF random-views on Rob-F1 (3 seeds, matched Gen-F1)"
    ):
        split, vocab = desk_world
        margins, gen_gaps = [], []
        for seed in DESK_SEEDS:
            claw = _partial_finetune(pretrain_cache("pretrain_claw", seed), split, vocab, seed)
            base = _partial_finetune(
                pretrain_cache("pretrain_random_views", seed), split, vocab, seed
            )
            rep_claw = _test_eval(claw.best, split, vocab)
            rep_base = _test_eval(base.best, split, vocab)
            margin = rep_claw.rob_f1 - rep_base.rob_f1
            gap = rep_claw.gen_f1 - rep_base.gen_f1
            margins.append(margin)
            gen_gaps.append(gap)
            print(
                f"  seed {seed}: claw Gen {rep_claw.gen_f1:.2f} Rob {rep_claw.rob_f1:.2f} | "
                f"rand Gen {rep_base.gen_f1:.2f} Rob {rep_base.rob_f1:.2f} | "
                f"rob margin {margin:+.2f}"
            )
        assert all(m > 0 for m in margins), f"per-seed rob margins {margins}"
        assert float(np.mean(margins)) > 0
        assert abs(float(np.mean(gen_gaps))) <= 2.0, f"gen gaps {gen_gaps}"


def test_criterion_7_sat_sweet_spot(desk_world, pretrain_cache):
    with criterion(
        "criterion 7: SAT(tau=1) >= AT on Gen-F1 and >= ST on Rob-F1 (3 seeds)"
    ):
        split, vocab = desk_world
        for seed in DESK_SEEDS:
            encoder = pretrain_cache("pretrain_claw", seed)
            scores = {}
            for label, mode, tau in (
                ("st", "finetune_st", 1.0),
                ("tau0.1", "finetune_sat", 0.1),
                ("tau1", "finetune_sat", 1.0),
                ("tau5", "finetune_sat", 5.0),
                ("tau10", "finetune_sat", 10.0),
            ):
                run = _partial_finetune(encoder, split, vocab, seed, mode=mode, tau=tau)
                report = _test_eval(run.best, split, vocab)
                scores[label] = (report.gen_f1, report.rob_f1)
            line = "  ".join(
                f"{k}: G {g:.2f} R {r:.2f}" for k, (g, r) in scores.items()
            )
            print(f"  seed {seed}: {line}")
            assert scores["tau1"][0] >= scores["tau0.1"][0], (seed, scores)
            assert scores["tau1"][1] >= scores["st"][1], (seed, scores)


# ---------------------------------------------------------------------------
# Criterion 8
# ---------------------------------------------------------------------------


def test_criterion_8_analysis_suite_exactness(desk_world, tiny_model, toy_vocab, toy_programs):
    with criterion("criterion 8: landscape origin, weight deviation, F1 units, EBE self-query"):
        # f(0,0) == plain test loss, grid finite on [-1,1]^2 @ 21x21
        coords = [(-1.0 + 2.0 * i / 20.0) for i in range(21)]
        coords[10] = 0.0
        grid = analyze.loss_landscape(
            tiny_model, toy_vocab, toy_programs[:40], alphas=coords, betas=coords,
            seed=61, sample_fraction=0.064,
        )
        assert np.isfinite(grid.values).all()
        examples = analyze.task_examples(toy_programs[:40], toy_vocab, "summarization")
        by_id = {p.id: (p, t) for p, t in examples}
        sample = [by_id[i] for i in grid.sample_ids]
        with torch.no_grad():
            losses = tiny_model.sequence_losses(
                [toy_vocab.encode(p.tokens) for p, _ in sample], [t for _, t in sample]
            )
        assert grid.values[10, 10] == float(losses.sum()) / len(sample)

        # weight deviation: identical checkpoints and a partial-finetune run
        ckpt = Checkpoint.from_model(tiny_model, toy_vocab.content_hash())
        assert analyze.weight_deviation(ckpt, ckpt) == 0.0
        pf = finetune(
            ckpt, toy_programs[:24], [], toy_vocab,
            TrainConfig(mode="finetune_st", epochs=1, batch_size=8, freeze_encoder=True, seed=3),
        )
        assert analyze.weight_deviation(ckpt, pf.final) == 0.0

        assert analyze.f1(["a", "b", "c"], ["a", "b", "c"]) == 100.0
        assert analyze.f1(["a"], ["b"]) == 0.0
        assert analyze.f1(["a", "b"], ["b", "c"]) == 50.0

        query = toy_programs[5]
        nearest, sim = analyze.ebe_nearest(tiny_model, toy_vocab, query.tokens, toy_programs[:20])
        assert nearest.id == query.id
        assert sim == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Criterion 9
# ---------------------------------------------------------------------------


def test_criterion_9_reproduce_desk_determinism(tmp_path):
    with criterion("criterion 9: reproduce-desk --seed 1 twice is byte-identical"):
        out_a = tmp_path / "run_a"
        out_b = tmp_path / "run_b"
        args = ["reproduce-desk", "--seed", "1", "--programs", "120",
                "--pretrain-epochs", "2", "--finetune-epochs", "2"]
        assert cli_main(args + ["--out", str(out_a)]) == 0
        assert cli_main(args + ["--out", str(out_b)]) == 0

        files_a = sorted(p.relative_to(out_a) for p in out_a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(out_b) for p in out_b.rglob("*") if p.is_file())
        assert files_a == files_b
        # at least the 6 fine-tuned checkpoints, eval report per cell, summary
        finetuned = [p for p in files_a if p.name.startswith("finetune_")]
        assert len(finetuned) >= 6
        evals = [p for p in files_a if p.name.startswith("eval_")]
        assert len(evals) >= 6
        assert Path("summary.md") in files_a
        for rel in files_a:
            assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes(), rel
