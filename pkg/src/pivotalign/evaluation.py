"""Decoding and measurement: beam search, corpus BLEU, text-to-image
retrieval, attention-map export and sentence-representation geometry.

Everything here runs under no_grad with dropout off; given a checkpoint and
inputs, every artifact is a pure function of them.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (Corpus, CorpusSample, SHAPES, Vocabulary, scene_from_image,
                   write_pgm)
from .errors import ConfigError, ContractError, DimensionError
from .losses import sentence_repr
from .model import (EncodedText, ModelState, decode_step, encode_image,
                    encode_text, selective_attention)
from .tensor import Tensor, no_grad
from .training import pack_sequences, source_ids


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 5
    max_decode_len: int = 15
    length_penalty: float = 0.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError("beam_size must be at least 1")
        if self.max_decode_len < 1:
            raise ConfigError("max_decode_len must be at least 1")
        if self.length_penalty < 0.0:
            raise ConfigError("length_penalty must be non-negative")


@dataclass
class EvalReport:
    """One evaluation task's numbers; recall maps K to a percentage."""

    task: str
    n_samples: int
    seed: int
    bleu: float | None = None
    recall: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.bleu is not None and not 0.0 <= self.bleu <= 100.0:
            raise ContractError("bleu must lie in [0, 100]")
        last = 0.0
        for k in sorted(self.recall):
            if not 0.0 <= self.recall[k] <= 100.0:
                raise ContractError("recall must lie in [0, 100]")
            if self.recall[k] < last:
                raise ContractError("recall must be non-decreasing in K")
            last = self.recall[k]


def write_translate_report(path, reports: list[EvalReport]) -> None:
    lines = ["task,bleu,n,seed"]
    for r in reports:
        lines.append(f"{r.task},{r.bleu:.4f},{r.n_samples},{r.seed}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_retrieval_report(path, reports: list[EvalReport]) -> None:
    lines = ["task,K,recall"]
    for r in reports:
        for k in sorted(r.recall):
            lines.append(f"{r.task},{k},{r.recall[k]:.4f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------
# beam search
# ----------------------------------------------------------------------


@dataclass
class _Hyp:
    tokens: tuple[int, ...]
    score: float
    done: bool


def _hyp_rank(h: _Hyp) -> tuple:
    # higher score first; ties prefer lower token ids, then shorter length
    return (-h.score, h.tokens)


def _final_rank(h: _Hyp, penalty: float) -> tuple:
    score = h.score
    if penalty > 0.0 and h.tokens:
        score = score / (len(h.tokens) ** penalty)
    return (-score, h.tokens)


def beam_decode_batch(src_ids: np.ndarray, src_mask: np.ndarray,
                      state: ModelState, cfg: DecodeConfig,
                      return_scores: bool = False):
    """Beam-search every row of a source batch in lockstep.

    All samples advance together so the decoder runs once per step over the
    union of live hypotheses; per-sample pruning is unchanged from the
    one-sample algorithm.
    """
    vocab = state.cfg.vocab_size
    bos, eos = Vocabulary.BOS, Vocabulary.EOS
    banned = (Vocabulary.PAD, Vocabulary.BOS)
    max_len = min(cfg.max_decode_len, state.cfg.max_len - 1)
    n_samples = src_ids.shape[0]
    with no_grad():
        enc = encode_text(src_ids, src_mask, state, drop=None)
        beams: list[list[_Hyp]] = [[_Hyp((), 0.0, False)]
                                   for _ in range(n_samples)]
        for _ in range(max_len):
            rows: list[tuple[int, _Hyp]] = []
            for i, beam in enumerate(beams):
                rows.extend((i, h) for h in beam if not h.done)
            if not rows:
                break
            t = len(rows[0][1].tokens)
            prefix = np.empty((len(rows), t + 1), dtype=np.int64)
            prefix[:, 0] = bos
            for r, (_, h) in enumerate(rows):
                prefix[r, 1:] = h.tokens
            owners = np.array([i for i, _ in rows])
            enc_rows = EncodedText(
                Tensor(enc.states.data[owners]), enc.pad_mask[owners])
            logits = decode_step(prefix, enc_rows, state)
            logp = T.log_softmax(logits, axis=-1).data
            candidates: list[list[_Hyp]] = [[] for _ in range(n_samples)]
            for i, beam in enumerate(beams):
                candidates[i].extend(h for h in beam if h.done)
            for r, (i, h) in enumerate(rows):
                for tok in range(vocab):
                    if tok in banned:
                        continue
                    score = h.score + float(logp[r, tok])
                    if tok == eos:
                        candidates[i].append(_Hyp(h.tokens, score, True))
                    else:
                        candidates[i].append(
                            _Hyp(h.tokens + (tok,), score, False))
            beams = [sorted(c, key=_hyp_rank)[:cfg.beam_size]
                     for c in candidates]
    out = []
    for beam in beams:
        # hypotheses end at eos or at the length cap; both are terminal here
        best = min(beam, key=lambda h: _final_rank(h, cfg.length_penalty))
        out.append((list(best.tokens), best.score) if return_scores
                   else list(best.tokens))
    return out


def beam_decode(src: list[int], state: ModelState,
                cfg: DecodeConfig) -> list[int]:
    """Translate one tokenized source; returns target ids without bos/eos."""
    ids, mask = pack_sequences([src])
    return beam_decode_batch(ids, mask, state, cfg)[0]


def translate_samples(samples: list[CorpusSample], vocab: Vocabulary,
                      state: ModelState, cfg: DecodeConfig,
                      chunk: int = 64) -> list[str]:
    """Beam-decode a sample list into target-language text."""
    hyps: list[str] = []
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        ids, mask = pack_sequences([source_ids(s.src, vocab) for s in part])
        for toks in beam_decode_batch(ids, mask, state, cfg):
            hyps.append(vocab.detokenize(toks))
    return hyps


# ----------------------------------------------------------------------
# BLEU
# ----------------------------------------------------------------------


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: list[str], references: list[str]) -> float:
    """Corpus BLEU-4 on whitespace tokens with exponential smoothing.

    Zero-count orders halve a running smoothing budget instead of zeroing
    the whole score; orders with no hypothesis n-grams at all shorten the
    effective order. Brevity penalty uses total lengths.
    """
    if len(hypotheses) != len(references):
        raise ContractError("hypothesis and reference counts differ")
    if not references:
        raise ContractError("no reference sentences given")
    correct = np.zeros(4, dtype=np.int64)
    total = np.zeros(4, dtype=np.int64)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = hyp.split()
        r = ref.split()
        if not r:
            raise ContractError("empty reference sentence")
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, 5):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            total[n - 1] += sum(hc.values())
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    if total[0] == 0:
        return 0.0
    smooth = 1.0
    log_sum = 0.0
    order = 0
    for n in range(4):
        if total[n] == 0:
            break
        order += 1
        if correct[n] == 0:
            smooth *= 2.0
            p = 1.0 / (smooth * total[n])
        else:
            p = correct[n] / total[n]
        log_sum += math.log(p)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum / order)


# ----------------------------------------------------------------------
# retrieval
# ----------------------------------------------------------------------


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, 1e-12)


def retrieval_recall(text_reprs: np.ndarray, image_reprs: np.ndarray,
                     ks: tuple[int, ...] = (1, 5, 10)) -> dict[int, float]:
    """R@K over cosine ranking; row i of each matrix is a true pair."""
    if text_reprs.shape != image_reprs.shape or text_reprs.ndim != 2:
        raise DimensionError("paired representation matrices must match")
    n = text_reprs.shape[0]
    if n <= max(ks):
        raise ContractError(f"need more than {max(ks)} pairs, got {n}")
    sims = _unit_rows(text_reprs) @ _unit_rows(image_reprs).T
    paired = np.diag(sims)
    better = (sims > paired[:, None]).sum(axis=1)
    tied_before = ((sims == paired[:, None])
                   & (np.arange(n)[None, :] < np.arange(n)[:, None])).sum(axis=1)
    ranks = 1 + better + tied_before
    return {k: 100.0 * float((ranks <= k).mean()) for k in ks}


def sentence_reprs_for(texts: list[str], vocab: Vocabulary,
                       state: ModelState, chunk: int = 128) -> np.ndarray:
    """Mean-pooled source-encoder outputs, one row per text."""
    rows = []
    with no_grad():
        for lo in range(0, len(texts), chunk):
            part = texts[lo:lo + chunk]
            ids, mask = pack_sequences([source_ids(t, vocab) for t in part])
            enc = encode_text(ids, mask, state, drop=None)
            rows.append(sentence_repr(enc).data)
    return np.concatenate(rows, axis=0)


def image_reprs_for(pixel_list: list[np.ndarray], state: ModelState,
                    chunk: int = 128) -> np.ndarray:
    """Class-token image representations, one row per image."""
    rows = []
    with no_grad():
        for lo in range(0, len(pixel_list), chunk):
            stack = np.stack(pixel_list[lo:lo + chunk])
            rows.append(encode_image(stack, state, drop=None).v0.data)
    return np.concatenate(rows, axis=0)


def retrieval_eval(samples: list[CorpusSample], corpus: Corpus,
                   state: ModelState,
                   ks: tuple[int, ...] = (1, 5, 10)) -> dict[int, float]:
    texts = [s.src for s in samples]
    pixels = [corpus.load_pixels(s) for s in samples]
    t = sentence_reprs_for(texts, corpus.vocab, state)
    v = image_reprs_for(pixels, state)
    return retrieval_recall(t, v, ks)


# ----------------------------------------------------------------------
# attention maps
# ----------------------------------------------------------------------


def attention_weights(sample: CorpusSample, corpus: Corpus,
                      state: ModelState) -> tuple[list[str], np.ndarray]:
    """Selective-attention weights for one sample: (tokens, (n, m) rows)."""
    vocab = corpus.vocab
    ids, mask = pack_sequences([source_ids(sample.src, vocab)])
    pixels = corpus.load_pixels(sample)[None]
    with no_grad():
        text = encode_text(ids, mask, state, drop=None)
        image = encode_image(pixels, state, drop=None)
        _, weights = selective_attention(text, image, state,
                                         return_weights=True)
    tokens = [vocab.tokens[i] for i in ids[0]]
    return tokens, weights[0]


def export_attention(sample: CorpusSample, corpus: Corpus, state: ModelState,
                     out_dir) -> np.ndarray:
    """Write one CSV (token rows, patch columns) and a PGM heat map per
    token, upsampled to the image resolution."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokens, weights = attention_weights(sample, corpus, state)
    side = state.cfg.grid_side
    scale = state.cfg.patch_side
    lines = ["token," + ",".join(f"patch_{j}" for j in range(weights.shape[1]))]
    for i, tok in enumerate(tokens):
        lines.append(tok + "," + ",".join(f"{w:.10f}" for w in weights[i]))
        grid = weights[i].reshape(side, side)
        heat = np.kron(grid / grid.max(), np.ones((scale, scale)))
        write_pgm(out_dir / f"{sample.id}-token{i}.pgm",
                  np.round(heat * 255.0).astype(np.uint8))
    (out_dir / f"{sample.id}.csv").write_text("\n".join(lines) + "\n",
                                              encoding="utf-8")
    return weights


def attention_localization_rate(samples: list[CorpusSample], corpus: Corpus,
                                state: ModelState) -> float:
    """Fraction of shape words whose strongest patch is the cell of the
    object they describe."""
    hits = misses = 0
    shape_words = {lang.lexicon[s]: s
                   for lang in corpus.languages.values() for s in SHAPES}
    for sample in samples:
        scene = scene_from_image(corpus.load_pixels(sample))
        tokens, weights = attention_weights(sample, corpus, state)
        obj_iter = iter(scene.objects)
        for tok, row in zip(tokens, weights):
            if tok not in shape_words:
                continue
            obj = next(obj_iter)
            if int(np.argmax(row)) == obj.cell:
                hits += 1
            else:
                misses += 1
    if hits + misses == 0:
        raise ContractError("no shape words found in the samples")
    return hits / (hits + misses)


# ----------------------------------------------------------------------
# sentence-representation geometry
# ----------------------------------------------------------------------


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Top-2 principal components with a deterministic sign convention."""
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def overlap_score(reprs: np.ndarray, labels: list[str]) -> float:
    """Mean inter-language centroid distance over mean intra-language
    dispersion; lower means the language clouds sit on top of each other."""
    labels = list(labels)
    langs = sorted(set(labels))
    if len(langs) < 2:
        raise ContractError("need at least two languages to compare")
    arr = np.asarray(labels)
    centroids = {l: reprs[arr == l].mean(axis=0) for l in langs}
    spread = []
    for l in langs:
        pts = reprs[arr == l]
        spread.append(np.linalg.norm(pts - centroids[l], axis=1).mean())
    inter = [np.linalg.norm(centroids[a] - centroids[b])
             for i, a in enumerate(langs) for b in langs[i + 1:]]
    return float(np.mean(inter) / np.mean(spread))


def export_sentence_reprs(samples: list[CorpusSample], corpus: Corpus,
                          state: ModelState, out_path
                          ) -> tuple[np.ndarray, np.ndarray, float]:
    """Write per-sample pooled encoder outputs with language labels, plus
    their 2-D principal projection; returns (reprs, projection, overlap)."""
    texts = [s.src for s in samples]
    labels = [s.lang for s in samples]
    reprs = sentence_reprs_for(texts, corpus.vocab, state)
    proj = pca_2d(reprs)
    score = overlap_score(reprs, labels)
    d = reprs.shape[1]
    header = ("id,lang," + ",".join(f"r{j}" for j in range(d)) + ",pc1,pc2")
    lines = [header]
    for s, row, p in zip(samples, reprs, proj):
        vals = ",".join(f"{v:.8f}" for v in row)
        lines.append(f"{s.id},{s.lang},{vals},{p[0]:.8f},{p[1]:.8f}")
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return reprs, proj, score
