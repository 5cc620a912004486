"""The two contrastive objectives that align text with images.

Run with:  python3 demos/03_contrastive.py
"""

import numpy as np

from pivotalign.data import Vocabulary, caption, default_languages, gen_scene, \
    render_image
from pivotalign.losses import (AlignedBatch, AlignedGroup, ContrastConfig,
                               info_nce, sentence_contrast, sentence_repr,
                               token_contrast)
from pivotalign.model import (ModelConfig, ModelState, encode_image,
                              encode_text, selective_attention)
from pivotalign.seeding import stream
from pivotalign.tensor import Tensor
from pivotalign.training import (OptimizerState, TrainConfig, adam_step,
                                 pack_sequences, source_ids)


def encode_pairs(texts, pixels, vocab, state):
    ids, mask = pack_sequences([source_ids(t, vocab) for t in texts])
    return (encode_text(ids, mask, state),
            encode_image(np.stack(pixels), state))


def main():
    rng = stream(3, "demo-nce")

    print("== InfoNCE prefers the diagonal")
    x = Tensor(rng.normal(size=(6, 16)))
    noisy = Tensor(x.data + 0.1 * rng.normal(size=(6, 16)))
    shuffled = Tensor(noisy.data[rng.permutation(6)])
    for name, y in (("matched rows ", noisy), ("shuffled rows", shuffled)):
        print(f"  {name}: loss {info_nce(x, y, tau=0.1).data:8.3f}")

    print("\n== temperature controls the sharpness")
    for tau in (1.0, 0.1, 0.007):
        print(f"  tau {tau:5.3f}: loss {info_nce(x, noisy, tau).data:8.3f}")

    print("\n== sentence alignment emerges from optimization")
    langs = default_languages()
    vocab = Vocabulary.from_languages(langs)
    scenes = [gen_scene(stream(3, "demo-scene", i)) for i in range(6)]
    texts = [" ".join(caption(s, langs["lo1"])) for s in scenes]
    pixels = [render_image(s) for s in scenes]

    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2,
                      d_ffn=32, n_enc_layers=1, n_dec_layers=1,
                      n_img_layers=1)
    state = ModelState.initialize(cfg, seed=3)
    opt = OptimizerState.init(state)
    ctr = ContrastConfig()

    def batch_loss():
        text, image = encode_pairs(texts, pixels, vocab, state)
        batch = AlignedBatch([AlignedGroup("lo1", image, text)])
        return sentence_contrast(batch, ctr), text, image

    for step in range(61):
        loss, text, image = batch_loss()
        if step % 20 == 0:
            w = sentence_repr(text).data
            v = image.v0.data
            wn = w / np.linalg.norm(w, axis=1, keepdims=True)
            vn = v / np.linalg.norm(v, axis=1, keepdims=True)
            sims = wn @ vn.T
            r1 = float(np.mean(sims.argmax(axis=1) == np.arange(len(texts))))
            print(f"  step {step:2d}: loss {loss.data:8.3f}   "
                  f"text->image R@1 {100 * r1:5.1f}")
        state.zero_grads()
        loss.backward()
        adam_step(state, opt, lr=2e-3, cfg=TrainConfig())

    print("\n== token-level contrast looks through selective attention")
    text, image = encode_pairs(texts, pixels, vocab, state)
    vt = selective_attention(text, image, state)
    loss = token_contrast(text, vt, ctr.tau_t)
    print("  each token competes with the other tokens of its own sentence")
    print(f"  token loss over {int(text.pad_mask.sum())} tokens: "
          f"{loss.data:8.3f}")

    print("\n== the lambda weights compose the training modes")
    print(f"  sentence weight {ctr.lambda_s}, token weight {ctr.lambda_t}; "
          f"zeroing one recovers the simpler mode exactly")


if __name__ == "__main__":
    main()
