"""End-to-end acceptance gate.

Ten checks cover gradient correctness, loss algebra, the zero-shot BLEU
ordering, retrieval recall, few-shot gains, both ablations, the BLEU
oracle, representation geometry, and bit-level reproducibility. The heavy
checks share one session fixture that trains the full default-scale grid
(about 45 minutes on one CPU core); run with -s to watch progress and see
one PASS line per check.
"""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from pivotalign.cli import (main as cli_main, eval_retrieve, eval_reprs,
                            eval_translate, resolve_train_config,
                            run_dir_name, run_finetune)
from pivotalign.data import Corpus, CorpusSpec, build_corpus
from pivotalign.evaluation import DecodeConfig, bleu
from pivotalign.losses import (AlignedBatch, AlignedGroup, ContrastConfig,
                               cross_entropy, info_nce, l2_align,
                               sentence_contrast, token_contrast)
from pivotalign.model import (EncodedImage, EncodedText, ModelConfig,
                              ModelState)
from pivotalign.tensor import Tensor, finite_diff_check
from pivotalign.training import (FinetuneConfig, TrainConfig,
                                 average_checkpoints, build_batch,
                                 checkpoint_path, plan_epoch,
                                 prepare_train_data, stage1_loss,
                                 stage2_loss, train)

pytestmark = pytest.mark.acceptance

SEED = 13
MODES = ("baseline", "s-ctr", "s+t-ctr")
ABLATED = (("s+t-ctr", ("no-target",)), ("s+t-ctr", ("l2",)))


def report(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"[{num:2d}/10] {name:34s} {'PASS' if ok else 'FAIL'}  {detail}",
          flush=True)


# ----------------------------------------------------------------------
# small shared pieces for the cheap checks
# ----------------------------------------------------------------------


TINY_MODEL = dict(d_model=16, n_heads=2, d_ffn=32, n_enc_layers=1,
                  n_dec_layers=1, n_img_layers=1)


@pytest.fixture(scope="module")
def tiny_batch(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    spec = CorpusSpec(n_train_high=24, n_train_low=16, n_valid=12, n_test=6,
                      n_fewshot=8)
    corpus = build_corpus(spec, seed=5, out_root=root)
    cfg = TrainConfig(warmup_steps=4, max_epochs=2, batch_tokens=120, seed=5)
    data = prepare_train_data(corpus)
    batch = build_batch(data, plan_epoch(data, cfg, 0)[0])
    mc = ModelConfig(vocab_size=len(corpus.vocab), **TINY_MODEL)
    return batch, mc, cfg


# ----------------------------------------------------------------------
# 1. gradient correctness
# ----------------------------------------------------------------------


class TestGradientCorrectness:
    def test_losses_match_finite_differences(self, tiny_batch):
        t0 = time.perf_counter()
        batch, mc, cfg = tiny_batch
        worst: dict[str, float] = {}

        for point in range(5):
            rng = np.random.default_rng(1000 + point)

            def leaf(*shape):
                return Tensor(rng.normal(size=shape), requires_grad=True)

            logits = leaf(6, 12)
            targets = rng.integers(1, 12, size=6)
            worst["cross_entropy"] = max(worst.get("cross_entropy", 0.0),
                finite_diff_check(lambda t: cross_entropy(t, targets, 0.1),
                                  logits))

            x = leaf(5, 8)
            y = leaf(5, 8)
            worst["info_nce"] = max(worst.get("info_nce", 0.0),
                finite_diff_check(lambda t: info_nce(t, y, 0.1), x),
                finite_diff_check(lambda t: info_nce(x, t, 0.1), y))

            mask = np.ones((3, 4), dtype=bool)
            mask[2, 2:] = False
            states = leaf(3, 4, 8)
            v0 = leaf(3, 8)
            patches = leaf(3, 9, 8)
            ctr = ContrastConfig(tau_s=0.1)

            def s_loss(t):
                group = AlignedGroup(
                    "lo1", EncodedImage(v0=v0, patches=patches),
                    EncodedText(states=t, pad_mask=mask))
                return sentence_contrast(AlignedBatch([group]), ctr)

            worst["sentence_contrast"] = max(
                worst.get("sentence_contrast", 0.0),
                finite_diff_check(s_loss, states))

            vt = leaf(3, 4, 8)
            text = EncodedText(states=states, pad_mask=mask)
            worst["token_contrast"] = max(
                worst.get("token_contrast", 0.0),
                finite_diff_check(lambda t: token_contrast(text, t, 0.1), vt))

            worst["l2_align"] = max(worst.get("l2_align", 0.0),
                finite_diff_check(lambda t: l2_align(t, y), x))

            state = ModelState.initialize(mc, seed=point)
            name = "enc.0.self.wq"

            def full_loss(t):
                state.params[name] = t
                return stage2_loss(batch, state, cfg)[0]

            worst["stage2_loss"] = max(worst.get("stage2_loss", 0.0),
                finite_diff_check(full_loss, state.params[name],
                                  max_checks=12, seed=point))

        elapsed = time.perf_counter() - t0
        ok = (all(v <= 1e-4 for k, v in worst.items() if k != "stage2_loss")
              and worst["stage2_loss"] <= 1e-3 and elapsed < 120.0)
        peak = max(worst.values())
        report(1, "gradients match finite differences", ok,
               f"max rel err {peak:.2e} over {len(worst)} losses x 5 points, "
               f"{elapsed:.0f}s")
        assert ok, worst


# ----------------------------------------------------------------------
# 2. loss identities
# ----------------------------------------------------------------------


class TestLossIdentities:
    def test_closed_forms_and_stage_additivity(self, tiny_batch):
        checks = []

        single = Tensor(np.random.default_rng(0).normal(size=(1, 6)))
        checks.append(abs(info_nce(single, single, 0.3).item()) <= 1e-12)

        x2 = Tensor(np.tile([[1.0, 0.0, 0.0]], (2, 1)))
        checks.append(abs(info_nce(x2, x2, 0.7).item() - 2 * np.log(2))
                      <= 1e-9)

        eye = Tensor(np.eye(3))
        want = 3 * np.log(np.e + 2) - 3
        checks.append(abs(info_nce(eye, eye, 1.0).item() - want) <= 1e-9)

        batch, mc, cfg = tiny_batch
        deltas = []
        for point in range(3):
            state = ModelState.initialize(mc, seed=20 + point)
            wcfg = replace(cfg, contrast=replace(cfg.contrast, lambda_t=0.7))
            l1, _ = stage1_loss(batch, state, wcfg)
            l2, comps = stage2_loss(batch, state, wcfg)
            deltas.append(abs((l2.item() - l1.item())
                              - wcfg.contrast.lambda_t * comps["t_ctr"]))

            zcfg = replace(cfg, contrast=replace(cfg.contrast, lambda_t=0.0))
            collapsed, _ = stage2_loss(batch, state, zcfg)
            base, _ = stage1_loss(batch, state, zcfg)
            checks.append(collapsed.item() == base.item())
        checks.append(max(deltas) <= 1e-12)

        ok = all(checks)
        report(2, "loss identities hold", ok,
               f"closed forms <=1e-9, stage delta {max(deltas):.1e} <=1e-12, "
               f"zero-weight collapse exact")
        assert ok, checks


# ----------------------------------------------------------------------
# the default-scale grid shared by the heavy checks
# ----------------------------------------------------------------------


class Grid:
    def __init__(self, root: Path):
        self.root = root
        self.corpus: Corpus = None
        self.minutes: dict[str, float] = {}
        self.states: dict[str, ModelState] = {}
        self.translate: dict[str, dict[str, float]] = {}
        self.retrieval: dict[str, dict[str, float]] = {}
        self.overlap: dict[str, float] = {}
        self.fewshot: dict[str, tuple[float, float]] = {}

    def zs_mean(self, name: str) -> float:
        rep = self.translate[name]
        langs = self.corpus.low_langs
        return float(np.mean([rep[f"zs-{lang}"] for lang in langs]))


@pytest.fixture(scope="session")
def grid(tmp_path_factory):
    root = tmp_path_factory.mktemp("grid")
    g = Grid(root)
    print("\nbuilding default corpus", flush=True)
    g.corpus = build_corpus(CorpusSpec(), seed=SEED, out_root=root / "data")
    mc = ModelConfig(vocab_size=len(g.corpus.vocab))
    base_cfg = TrainConfig(seed=SEED)
    decode = DecodeConfig()

    variants = [(m, ()) for m in MODES] + list(ABLATED)
    for mode, ablations in variants:
        name = run_dir_name(mode, ablations)
        cfg = resolve_train_config(base_cfg, mode, ablations)
        out = root / "runs" / name
        print(f"training {name} ({cfg.max_epochs} epochs)", flush=True)
        t0 = time.perf_counter()
        train(g.corpus, mc, cfg, out)
        g.minutes[name] = (time.perf_counter() - t0) / 60.0
        paths = [checkpoint_path(out, e)
                 for e in range(cfg.max_epochs - cfg.checkpoint_avg_k,
                                cfg.max_epochs)]
        g.states[name] = average_checkpoints(paths, mc)
        print(f"  {g.minutes[name]:.1f} min", flush=True)

        reports = eval_translate(g.corpus, g.states[name], decode, SEED)
        g.translate[name] = {r.task: r.bleu for r in reports}
        print(f"  bleu {g.translate[name]}", flush=True)

    for name in MODES:
        reports = eval_retrieve(g.corpus, g.states[name], SEED)
        g.retrieval[name] = {r.task: r.recall[1] for r in reports}
    for name in ("baseline", "s+t-ctr"):
        g.overlap[name] = eval_reprs(g.corpus, g.states[name],
                                     root / f"reprs-{name}.csv")
        ft = run_finetune(g.corpus, g.states[name], FinetuneConfig(),
                          g.corpus.low_langs[0], decode,
                          root / f"fewshot-{name}", SEED)
        g.fewshot[name] = (ft[1], ft[2])
    return g


# ----------------------------------------------------------------------
# 3-9. trained-model properties
# ----------------------------------------------------------------------


class TestZeroShotOrdering:
    def test_bleu_margins_and_runtime(self, grid):
        base = grid.zs_mean("baseline")
        sctr = grid.zs_mean("s-ctr")
        both = grid.zs_mean("s+t-ctr")
        minutes = sum(grid.minutes[m] for m in MODES)
        ok = (base < 2.0 and sctr >= base + 5.0 and both >= sctr + 2.0
              and minutes <= 30.0)
        report(3, "zero-shot BLEU ordering", ok,
               f"baseline {base:.2f} < 2.0, s-ctr {sctr:.2f} >= +5, "
               f"s+t {both:.2f} >= +2, {minutes:.1f} min <= 30")
        assert ok


class TestRetrievalOrdering:
    def test_recall_at_1(self, grid):
        lang = grid.corpus.low_langs[0]
        other = grid.corpus.low_langs[1]
        base = grid.retrieval["baseline"][f"ret-{lang}"]
        sctr = grid.retrieval["s-ctr"][f"ret-{lang}"]
        both = grid.retrieval["s+t-ctr"][f"ret-{lang}"]
        chance = 0.5
        sigma3 = 3 * 100 * np.sqrt(0.005 * 0.995 / 200)
        ok = (abs(base - chance) <= sigma3 and sctr >= 20 * chance
              and both >= sctr)
        extras = ", ".join(
            f"{m} {lang} {grid.retrieval[m][f'ret-{lang}']:.1f}/"
            f"{other} {grid.retrieval[m][f'ret-{other}']:.1f}"
            for m in MODES)
        report(4, "text-to-image R@1 ordering", ok,
               f"baseline {base:.1f} within {sigma3:.1f} of {chance}, "
               f"s-ctr {sctr:.1f} >= {20 * chance:.0f}, s+t {both:.1f} >= "
               f"s-ctr ({extras})")
        assert ok


class TestFewShot:
    def test_finetuned_beats_zero_shot_and_baseline(self, grid):
        lang = grid.corpus.low_langs[0]
        zs = grid.translate["s+t-ctr"][f"zs-{lang}"]
        mean, std = grid.fewshot["s+t-ctr"]
        bmean, bstd = grid.fewshot["baseline"]
        ok = mean > zs and mean > bmean
        report(5, "few-shot finetuning gains", ok,
               f"s+t {mean:.2f}+-{std:.2f} > zero-shot {zs:.2f} and > "
               f"baseline {bmean:.2f}+-{bstd:.2f} (100 pairs, 5 seeds)")
        assert ok


class TestTargetContrastAblation:
    def test_flag_changes_loss_and_report(self, tiny_batch, grid):
        batch, mc, cfg = tiny_batch
        state = ModelState.initialize(mc, seed=3)
        on, _ = stage2_loss(batch, state, cfg)
        off, _ = stage2_loss(batch, state, replace(
            cfg, contrast=replace(cfg.contrast,
                                  include_target_contrast=False)))
        changed = on.item() != off.item()
        full = grid.zs_mean("s+t-ctr")
        ablated = grid.zs_mean("s+t-ctr-no-target")
        ok = changed
        report(6, "target-contrast flag", ok,
               f"loss {on.item():.3f} -> {off.item():.3f} on a fixed batch; "
               f"zero-shot mean with target contrast {full:.2f}, "
               f"without {ablated:.2f}")
        assert ok


class TestL2Ablation:
    def test_l2_mode_end_to_end(self, grid):
        ctr = grid.zs_mean("s+t-ctr")
        l2 = grid.zs_mean("s+t-ctr-l2")
        ok = np.isfinite(l2) and grid.minutes["s+t-ctr-l2"] > 0
        report(7, "squared-distance ablation", ok,
               f"trains and evaluates end-to-end; zero-shot mean {l2:.2f} "
               f"vs contrastive {ctr:.2f}")
        assert ok


class TestBleuOracle:
    def test_hand_computed_values(self):
        hand = (3 / 4 * 2 / 3 * 1 / 2 * 1 / 2) ** 0.25 * 100
        got = bleu(["a b c d"], ["a b c e"])
        perfect = bleu(["x y", "p q r"], ["x y", "p q r"])
        empty = bleu([""], ["a b"])
        ok = (abs(got - hand) <= 1e-6 and perfect == 100.0 and empty == 0.0)
        report(8, "BLEU oracle values", ok,
               f"single pair {got:.4f} == {hand:.4f}, identity 100, empty 0")
        assert ok


class TestRepresentationGeometry:
    def test_overlap_shrinks(self, grid):
        base = grid.overlap["baseline"]
        both = grid.overlap["s+t-ctr"]
        ok = both < base
        report(9, "cross-lingual overlap shrinks", ok,
               f"s+t {both:.4f} < baseline {base:.4f} on 300 sentences")
        assert ok


# ----------------------------------------------------------------------
# 10. determinism
# ----------------------------------------------------------------------


REPRO_CONF = """\
seed = 9
corpus.n_train_high = 48
corpus.n_train_low = 32
corpus.n_valid = 16
corpus.n_test = 10
corpus.n_fewshot = 8
model.d_model = 16
model.n_heads = 2
model.d_ffn = 32
model.n_enc_layers = 1
model.n_dec_layers = 1
model.n_img_layers = 1
train.max_epochs = 4
train.warmup_steps = 4
train.batch_tokens = 120
train.checkpoint_avg_k = 2
finetune.pairs = 4
finetune.seeds = 2
finetune.epochs = 1
eval.beam_size = 2
eval.max_decode_len = 8
"""


class TestDeterminism:
    def test_reproduce_twice_is_byte_identical(self, tmp_path):
        outs = []
        for tag in ("one", "two"):
            work = tmp_path / tag
            work.mkdir()
            (work / "r.conf").write_text(REPRO_CONF)
            rc = cli_main(["reproduce", "--workdir", str(work),
                           "--config", "r.conf"])
            assert rc == 0
            outs.append(work)

        tracked = []
        for sub in ("data", "runs"):
            tracked += sorted(p.relative_to(outs[0])
                              for p in (outs[0] / sub).rglob("*")
                              if p.is_file() and not p.name.startswith("opt-"))
        tracked += [Path("acceptance_table.csv"), Path("manifest.json")]
        diff = [str(rel) for rel in tracked
                if (outs[0] / rel).read_bytes() != (outs[1] / rel).read_bytes()]
        ok = not diff
        report(10, "reproduce twice, identical bytes", ok,
               f"{len(tracked)} files compared (corpus, logs, checkpoints, "
               f"reports); differing: {len(diff)}")
        assert ok, diff
