"""Command-line pipelines gluing corpus generation, training, finetuning
and evaluation into reproducible experiments.

Commands (all paths are taken relative to --workdir):

    pivot-align gen        write the synthetic corpus and its manifest
    pivot-align train      train one model variant on a generated corpus
    pivot-align finetune   adapt a checkpoint with small parallel samples
    pivot-align eval       translate / retrieve / attn / reprs reports
    pivot-align reproduce  run the entire experiment grid in one call

Exit codes: 0 success, 2 configuration or user error, 3 data or
compatibility error, 1 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .data import Corpus, build_corpus
from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     PivotAlignError)
from .evaluation import (DecodeConfig, EvalReport, attention_localization_rate,
                         bleu, export_attention, export_sentence_reprs,
                         retrieval_eval, translate_samples,
                         write_retrieval_report, write_translate_report)
from .model import ModelState
from .training import (FinetuneConfig, TrainConfig, average_checkpoints,
                       checkpoint_path, finetune, sample_fewshot_pairs, train)

MODES = ("baseline", "s-ctr", "s+t-ctr")
ABLATIONS = ("no-target", "l2")


# ----------------------------------------------------------------------
# shared plumbing
# ----------------------------------------------------------------------


def resolve_train_config(cfg: TrainConfig, mode: str,
                         ablations: tuple[str, ...] = ()) -> TrainConfig:
    """Map a variant name and ablation flags onto loss weights and flags."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    contrast = cfg.contrast
    if mode == "baseline":
        contrast = replace(contrast, lambda_s=0.0, lambda_t=0.0)
    elif mode == "s-ctr":
        contrast = replace(contrast, lambda_t=0.0)
    out = replace(cfg, contrast=contrast)
    for ablation in ablations:
        if ablation == "no-target":
            out = replace(out, contrast=replace(out.contrast,
                                                include_target_contrast=False))
        elif ablation == "l2":
            out = replace(out, use_l2_loss=True)
        else:
            raise ConfigError(
                f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    return out


def run_dir_name(mode: str, ablations: tuple[str, ...] = ()) -> str:
    name = mode
    for ablation in ablations:
        name += f"-{ablation}"
    return name


def corpus_hash(root) -> str:
    """sha256 over every corpus file (path and bytes), manifest excluded."""
    root = Path(root)
    digest = hashlib.sha256()
    paths = sorted(p for p in root.rglob("*")
                   if p.is_file() and p.name != "manifest.json")
    if not paths:
        raise DataError(f"no corpus files under {root}")
    for p in paths:
        digest.update(str(p.relative_to(root)).encode("utf-8"))
        digest.update(b"\0")
        digest.update(p.read_bytes())
    return digest.hexdigest()


def write_manifest(path, workdir, command: str, cfg: ExperimentConfig,
                   corpus_dir, checkpoints: list, reports: list) -> None:
    """Record what a command produced; every referenced artifact must exist."""
    workdir = Path(workdir).resolve()

    def rel(p) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(workdir).as_posix()
        except ValueError:
            return p.as_posix()

    for p in list(checkpoints) + list(reports):
        if not Path(p).exists():
            raise ContractError(f"manifest references missing artifact {p}")
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(cfg.flattened().items())},
        "corpus_hash": corpus_hash(corpus_dir),
        "checkpoints": sorted(rel(p) for p in checkpoints),
        "reports": sorted(rel(p) for p in reports),
        "seed": cfg.seed,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def select_checkpoints(paths: list, avg_last: int) -> list[Path]:
    """Expand run directories into their epoch checkpoints, newest last,
    then keep the trailing avg_last."""
    expanded: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            found = sorted(p.glob("ckpt-*.pvck"),
                           key=lambda q: int(q.stem.split("-")[1]))
            if not found:
                raise CheckpointError(f"no checkpoints under {p}")
            expanded.extend(found)
        elif p.exists():
            expanded.append(p)
        else:
            raise CheckpointError(f"checkpoint {p} does not exist")
    if avg_last < 1:
        raise ConfigError("--avg-last must be at least 1")
    return expanded[-avg_last:]


def load_model(corpus: Corpus, cfg: ExperimentConfig, ckpt_args: list,
               avg_last: int) -> ModelState:
    model_cfg = cfg.model_config(vocab_size=len(corpus.vocab))
    paths = select_checkpoints(ckpt_args, avg_last)
    if len(paths) == 1:
        return ModelState.load(paths[0], model_cfg)
    return average_checkpoints(paths, model_cfg)


# ----------------------------------------------------------------------
# gen
# ----------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, workdir: Path, out: str) -> None:
    out_dir = workdir / out
    corpus = build_corpus(cfg.corpus, cfg.seed, out_dir)
    print(f"corpus written to {out_dir}")
    print(f"{'split':<8} {'lang':<5} {'samples':>8} {'with refs':>10}")
    for split in ("train", "valid", "test", "fewshot"):
        for lang in corpus.source_langs():
            rows = corpus.by_lang(split, lang)
            if not rows:
                continue
            refs = sum(1 for s in rows if s.tgt is not None)
            print(f"{split:<8} {lang:<5} {len(rows):>8} {refs:>10}")
    write_manifest(out_dir / "manifest.json", workdir, "gen", cfg,
                   corpus_dir=out_dir, checkpoints=[],
                   reports=[out_dir / "vocab.txt", out_dir / "languages.json"])
    print(f"corpus hash {corpus_hash(out_dir)}")


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, workdir: Path, corpus_rel: str, out: str,
              mode: str, ablations: tuple[str, ...], resume: bool) -> None:
    corpus = Corpus.load(workdir / corpus_rel)
    train_cfg = resolve_train_config(cfg.train, mode, ablations)
    model_cfg = cfg.model_config(vocab_size=len(corpus.vocab))
    out_dir = workdir / out
    print(f"training {run_dir_name(mode, ablations)} "
          f"({train_cfg.max_epochs} epochs) -> {out_dir}")
    train(corpus, model_cfg, train_cfg, out_dir, resume=resume)
    checkpoints = [checkpoint_path(out_dir, e)
                   for e in range(train_cfg.max_epochs)]
    write_manifest(out_dir / "manifest.json", workdir, "train", cfg,
                   corpus_dir=workdir / corpus_rel, checkpoints=checkpoints,
                   reports=[out_dir / "log.csv"])
    print(f"finished; final checkpoint {checkpoints[-1].name}")


# ----------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------


def eval_translate(corpus: Corpus, state: ModelState, decode: DecodeConfig,
                   seed: int) -> list[EvalReport]:
    reports = []
    for lang in corpus.low_langs:
        samples = corpus.by_lang("test", lang)
        hyps = translate_samples(samples, corpus.vocab, state, decode)
        refs = [s.tgt for s in samples]
        reports.append(EvalReport(task=f"zs-{lang}", n_samples=len(samples),
                                  seed=seed, bleu=bleu(hyps, refs)))
    sup = corpus.by_lang("test", corpus.high_lang)
    hyps = translate_samples(sup, corpus.vocab, state, decode)
    reports.append(EvalReport(task=f"sup-{corpus.high_lang}",
                              n_samples=len(sup), seed=seed,
                              bleu=bleu(hyps, [s.tgt for s in sup])))
    return reports


def eval_retrieve(corpus: Corpus, state: ModelState, seed: int,
                  n_pairs: int = 200) -> list[EvalReport]:
    reports = []
    for lang in corpus.source_langs():
        samples = corpus.by_lang("valid", lang)[:n_pairs]
        recall = retrieval_eval(samples, corpus, state)
        reports.append(EvalReport(task=f"ret-{lang}", n_samples=len(samples),
                                  seed=seed, recall=recall))
    return reports


def eval_attention(corpus: Corpus, state: ModelState, out_dir: Path,
                   n_rate: int = 200, n_export: int = 4) -> dict[str, float]:
    rates = {}
    for lang in corpus.low_langs:
        samples = corpus.by_lang("test", lang)
        for sample in samples[:n_export]:
            export_attention(sample, corpus, state, out_dir / "attn" / lang)
        rates[lang] = attention_localization_rate(samples[:n_rate], corpus,
                                                  state)
    return rates


def eval_reprs(corpus: Corpus, state: ModelState, out_path,
               per_lang: int = 100) -> float:
    samples = [s for lang in corpus.source_langs()
               for s in corpus.by_lang("valid", lang)[:per_lang]]
    _, _, score = export_sentence_reprs(samples, corpus, state, out_path)
    return score


def _write_rate_csv(path, rows: list[tuple[str, float, int]]) -> None:
    lines = ["task,value,n"] + [f"{t},{v:.6f},{n}" for t, v, n in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_eval(cfg: ExperimentConfig, workdir: Path, corpus_rel: str,
             ckpt_args: list, avg_last: int, task: str, out: str) -> None:
    corpus = Corpus.load(workdir / corpus_rel)
    ckpts = [workdir / c for c in ckpt_args]
    state = load_model(corpus, cfg, ckpts, avg_last)
    out_dir = workdir / out
    out_dir.mkdir(parents=True, exist_ok=True)
    reports: list[Path] = []

    if task == "translate":
        rows = eval_translate(corpus, state, cfg.decode, cfg.seed)
        path = out_dir / "translate.csv"
        write_translate_report(path, rows)
        reports.append(path)
        for r in rows:
            print(f"{r.task:<10} BLEU {r.bleu:8.4f}  (n={r.n_samples})")
    elif task == "retrieve":
        rows = eval_retrieve(corpus, state, cfg.seed)
        path = out_dir / "retrieval.csv"
        write_retrieval_report(path, rows)
        reports.append(path)
        for r in rows:
            recalls = "  ".join(f"R@{k} {v:6.2f}" for k, v in
                                sorted(r.recall.items()))
            print(f"{r.task:<10} {recalls}  (n={r.n_samples})")
    elif task == "attn":
        rates = eval_attention(corpus, state, out_dir)
        path = out_dir / "attn_rate.csv"
        rows = [(f"attn-{lang}", rate,
                 len(corpus.by_lang("test", lang)[:200]))
                for lang, rate in sorted(rates.items())]
        _write_rate_csv(path, rows)
        reports.append(path)
        for t, v, n in rows:
            print(f"{t:<10} localization {v:6.4f}  (n={n})")
    elif task == "reprs":
        score = eval_reprs(corpus, state, out_dir / "reprs.csv")
        path = out_dir / "overlap.csv"
        _write_rate_csv(path, [("overlap", score, 300)])
        reports.extend([out_dir / "reprs.csv", path])
        print(f"overlap    score {score:8.4f}  (n=300)")
    else:
        raise ConfigError(f"unknown eval task {task!r}")

    write_manifest(out_dir / "manifest.json", workdir, f"eval-{task}", cfg,
                   corpus_dir=workdir / corpus_rel,
                   checkpoints=select_checkpoints(ckpts, avg_last),
                   reports=reports)


# ----------------------------------------------------------------------
# finetune
# ----------------------------------------------------------------------


def run_finetune(corpus: Corpus, base: ModelState, ft_cfg: FinetuneConfig,
                 lang: str, decode: DecodeConfig, out_dir: Path,
                 seed: int) -> tuple[list[EvalReport], float, float]:
    """Finetune ft_cfg.seeds replicates and score each on the test split."""
    out_dir.mkdir(parents=True, exist_ok=True)
    test = corpus.by_lang("test", lang)
    refs = [s.tgt for s in test]
    rows: list[EvalReport] = []
    scores = []
    for r in range(ft_cfg.seeds):
        pairs = sample_fewshot_pairs(corpus, lang, ft_cfg.pairs, ft_cfg.seed,
                                     replicate=r)
        tuned, _ = finetune(base, pairs, corpus.vocab, ft_cfg, replicate=r)
        tuned.save(out_dir / f"ft-{lang}-p{ft_cfg.pairs}-r{r}.pvck")
        hyps = translate_samples(test, corpus.vocab, tuned, decode)
        score = bleu(hyps, refs)
        scores.append(score)
        rows.append(EvalReport(task=f"ft-{lang}-r{r}", n_samples=len(test),
                               seed=ft_cfg.seed, bleu=score))
    mean = float(np.mean(scores))
    std = float(np.std(scores))
    rows.append(EvalReport(task=f"ft-{lang}-mean", n_samples=len(test),
                           seed=ft_cfg.seed, bleu=mean))
    rows.append(EvalReport(task=f"ft-{lang}-std", n_samples=len(test),
                           seed=ft_cfg.seed, bleu=std))
    return rows, mean, std


def cmd_finetune(cfg: ExperimentConfig, workdir: Path, corpus_rel: str,
                 ckpt_args: list, avg_last: int, lang: str, pairs: int | None,
                 seeds: int | None, out: str) -> None:
    corpus = Corpus.load(workdir / corpus_rel)
    if lang not in corpus.low_langs:
        raise ConfigError(f"--lang must be one of {corpus.low_langs}")
    ft_cfg = cfg.finetune
    if pairs is not None:
        ft_cfg = replace(ft_cfg, pairs=pairs)
    if seeds is not None:
        ft_cfg = replace(ft_cfg, seeds=seeds)
    ckpts = [workdir / c for c in ckpt_args]
    base = load_model(corpus, cfg, ckpts, avg_last)
    out_dir = workdir / out
    rows, mean, std = run_finetune(corpus, base, ft_cfg, lang, cfg.decode,
                                   out_dir, cfg.seed)
    path = out_dir / "fewshot.csv"
    write_translate_report(path, rows)
    for r in rows:
        print(f"{r.task:<14} BLEU {r.bleu:8.4f}  (n={r.n_samples})")
    print(f"few-shot {lang}: mean {mean:.4f} std {std:.4f} "
          f"({ft_cfg.pairs} pairs, {ft_cfg.seeds} replicates)")
    write_manifest(out_dir / "manifest.json", workdir, "finetune", cfg,
                   corpus_dir=workdir / corpus_rel,
                   checkpoints=sorted(out_dir.glob("ft-*.pvck")),
                   reports=[path])


# ----------------------------------------------------------------------
# reproduce
# ----------------------------------------------------------------------


def cmd_reproduce(cfg: ExperimentConfig, workdir: Path) -> None:
    """Full pipeline: corpus, five training runs, reports, summary table."""
    variants: list[tuple[str, tuple[str, ...]]] = [
        ("baseline", ()),
        ("s-ctr", ()),
        ("s+t-ctr", ()),
        ("s+t-ctr", ("no-target",)),
        ("s+t-ctr", ("l2",)),
    ]
    print("[1/5] generating corpus")
    cmd_gen(cfg, workdir, "data")
    corpus = Corpus.load(workdir / "data")
    model_cfg = cfg.model_config(vocab_size=len(corpus.vocab))

    run_names = []
    for i, (mode, ablations) in enumerate(variants, start=1):
        name = run_dir_name(mode, ablations)
        run_names.append(name)
        print(f"[2/5] training {name} ({i}/{len(variants)})")
        cmd_train(cfg, workdir, "data", f"runs/{name}", mode, ablations,
                  resume=False)

    summary: dict[str, dict[str, float]] = {n: {} for n in run_names}
    print("[3/5] evaluating")
    reports: list[Path] = []
    states = {}
    for name in run_names:
        run = workdir / "runs" / name
        states[name] = load_model(corpus, cfg, [run],
                                  cfg.train.checkpoint_avg_k)
        eval_dir = run / "eval"
        eval_dir.mkdir(parents=True, exist_ok=True)
        rows = eval_translate(corpus, states[name], cfg.decode, cfg.seed)
        write_translate_report(eval_dir / "translate.csv", rows)
        reports.append(eval_dir / "translate.csv")
        for r in rows:
            key = ("bleu_" + r.task).replace("-", "_")
            summary[name][key] = r.bleu
            print(f"  {name:<16} {r.task:<8} BLEU {r.bleu:8.4f}")
        zs = [summary[name][f"bleu_zs_{lang}"] for lang in corpus.low_langs]
        summary[name]["bleu_zs_mean"] = float(np.mean(zs))

    for name in MODES:
        eval_dir = workdir / "runs" / name / "eval"
        rows = eval_retrieve(corpus, states[name], cfg.seed)
        write_retrieval_report(eval_dir / "retrieval.csv", rows)
        reports.append(eval_dir / "retrieval.csv")
        for r in rows:
            if r.task.startswith("ret-lo"):
                summary[name][f"r1_{r.task[4:]}"] = r.recall[1]
        print(f"  {name:<16} retrieval "
              + "  ".join(f"{r.task} R@1 {r.recall[1]:5.2f}" for r in rows))

    for name in ("baseline", "s+t-ctr"):
        eval_dir = workdir / "runs" / name / "eval"
        score = eval_reprs(corpus, states[name], eval_dir / "reprs.csv")
        _write_rate_csv(eval_dir / "overlap.csv", [("overlap", score, 300)])
        reports.extend([eval_dir / "reprs.csv", eval_dir / "overlap.csv"])
        summary[name]["overlap"] = score
        print(f"  {name:<16} overlap {score:8.4f}")

    attn_dir = workdir / "runs" / "s+t-ctr" / "eval"
    rates = eval_attention(corpus, states["s+t-ctr"], attn_dir)
    rows = [(f"attn-{lang}", rate, len(corpus.by_lang("test", lang)[:200]))
            for lang, rate in sorted(rates.items())]
    _write_rate_csv(attn_dir / "attn_rate.csv", rows)
    reports.append(attn_dir / "attn_rate.csv")
    summary["s+t-ctr"]["attn_rate"] = float(np.mean(list(rates.values())))
    print(f"  s+t-ctr          localization "
          + "  ".join(f"{lang} {rate:.4f}" for lang, rate in sorted(rates.items())))

    print("[4/5] few-shot finetuning")
    lang = corpus.low_langs[0]
    for name in ("baseline", "s+t-ctr"):
        ft_dir = workdir / "runs" / name / "fewshot"
        rows, mean, std = run_finetune(corpus, states[name], cfg.finetune,
                                       lang, cfg.decode, ft_dir, cfg.seed)
        write_translate_report(ft_dir / "fewshot.csv", rows)
        reports.append(ft_dir / "fewshot.csv")
        summary[name]["ft_mean"] = mean
        summary[name]["ft_std"] = std
        print(f"  {name:<16} few-shot {lang} mean {mean:8.4f} std {std:.4f}")

    print("[5/5] writing summary")
    columns = ["bleu_zs_lo1", "bleu_zs_lo2", "bleu_zs_mean", "bleu_sup_hi",
               "r1_lo1", "r1_lo2", "overlap", "attn_rate", "ft_mean", "ft_std"]
    lines = ["run," + ",".join(columns)]
    for name in run_names:
        vals = [f"{summary[name][c]:.4f}" if c in summary[name] else ""
                for c in columns]
        lines.append(name + "," + ",".join(vals))
    table = workdir / "acceptance_table.csv"
    table.write_text("\n".join(lines) + "\n", encoding="utf-8")
    reports.append(table)

    finals = [checkpoint_path(workdir / "runs" / n, cfg.train.max_epochs - 1)
              for n in run_names]
    write_manifest(workdir / "manifest.json", workdir, "reproduce", cfg,
                   corpus_dir=workdir / "data", checkpoints=finals,
                   reports=reports)
    print(f"summary table written to {table}")


# ----------------------------------------------------------------------
# argument parsing and dispatch
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pivot-align",
        description="image-pivoted contrastive alignment experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--workdir", default=".",
                       help="directory all relative paths resolve against")
        p.add_argument("--config", default=None,
                       help="key = value config file (relative to workdir)")

    p = sub.add_parser("gen", help="generate the synthetic corpus")
    common(p)
    p.add_argument("--out", default="data")

    p = sub.add_parser("train", help="train one model variant")
    common(p)
    p.add_argument("--corpus", default="data")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--ablate", default="",
                   help=f"comma-separated subset of {ABLATIONS}")
    p.add_argument("--out", default=None)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("finetune", help="few-shot adapt a checkpoint")
    common(p)
    p.add_argument("--corpus", default="data")
    p.add_argument("--ckpt", required=True, nargs="+",
                   help="checkpoint file(s) or a run directory")
    p.add_argument("--avg-last", type=int, default=None)
    p.add_argument("--lang", default="lo1")
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--out", default="fewshot")

    p = sub.add_parser("eval", help="evaluate checkpoints")
    common(p)
    p.add_argument("--corpus", default="data")
    p.add_argument("--ckpt", required=True, nargs="+")
    p.add_argument("--avg-last", type=int, default=None)
    p.add_argument("--task", required=True,
                   choices=("translate", "retrieve", "attn", "reprs"))
    p.add_argument("--out", default="eval")

    p = sub.add_parser("reproduce", help="run the full experiment grid")
    common(p)
    return parser


def _dispatch(args) -> None:
    workdir = Path(args.workdir)
    config_path = None
    if args.config is not None:
        config_path = workdir / args.config
    cfg = load_config(config_path)

    if args.command == "gen":
        cmd_gen(cfg, workdir, args.out)
    elif args.command == "train":
        ablations = tuple(a for a in args.ablate.split(",") if a)
        out = args.out or f"runs/{run_dir_name(args.mode, ablations)}"
        cmd_train(cfg, workdir, args.corpus, out, args.mode, ablations,
                  args.resume)
    elif args.command == "finetune":
        avg = args.avg_last or cfg.train.checkpoint_avg_k
        cmd_finetune(cfg, workdir, args.corpus, args.ckpt, avg, args.lang,
                     args.pairs, args.seeds, args.out)
    elif args.command == "eval":
        avg = args.avg_last or cfg.train.checkpoint_avg_k
        cmd_eval(cfg, workdir, args.corpus, args.ckpt, avg, args.task,
                 args.out)
    elif args.command == "reproduce":
        cmd_reproduce(cfg, workdir)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except PivotAlignError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
