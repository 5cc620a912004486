"""The full zero-shot pipeline through the command-line interface.

Trains a no-contrast baseline and a sentence-contrast model on a reduced
corpus, then compares zero-shot translation and text-to-image retrieval.
Takes a few minutes; margins grow much larger at the default scale (see
the reproduce command).

Run with:  python3 demos/05_zero_shot.py
"""

import tempfile
from pathlib import Path

from pivotalign.cli import main as cli

CONF = """\
seed = 11
corpus.n_train_high = 800
corpus.n_train_low = 600
corpus.n_valid = 40
corpus.n_test = 32
corpus.n_fewshot = 8
model.d_model = 48
model.n_heads = 2
model.d_ffn = 96
model.n_enc_layers = 1
model.n_dec_layers = 1
model.n_img_layers = 1
train.max_epochs = 100
train.warmup_steps = 100
train.checkpoint_avg_k = 3
eval.beam_size = 3
"""


def run(*argv):
    rc = cli(list(argv))
    assert rc == 0, f"command failed with exit code {rc}"


def show(path, title):
    print(f"\n  {title}")
    for line in Path(path).read_text().splitlines():
        print(f"    {line}")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        conf = Path(tmp) / "demo.conf"
        conf.write_text(CONF)
        base = ["--workdir", tmp, "--config", str(conf)]

        print("== generating the corpus")
        run("gen", *base)

        for mode in ("baseline", "s-ctr"):
            print(f"\n== training {mode}")
            run("train", *base, "--corpus", "data", "--mode", mode,
                "--out", f"runs/{mode}")
            for task in ("translate", "retrieve"):
                run("eval", *base, "--ckpt", f"runs/{mode}",
                    "--task", task, "--out", f"eval/{mode}")

        for mode in ("baseline", "s-ctr"):
            show(Path(tmp) / "eval" / mode / "translate.csv",
                 f"{mode}: zero-shot BLEU (zs rows) and supervised BLEU")
            show(Path(tmp) / "eval" / mode / "retrieval.csv",
                 f"{mode}: text-to-image recall")

        print("\n== reading the comparison")
        print("  the image pivot moves zero-shot retrieval far above the")
        print("  baseline, and zero-shot BLEU follows; token-level contrast")
        print("  (mode s+t-ctr) adds a further margin at the default scale")


if __name__ == "__main__":
    main()
