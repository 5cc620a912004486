"""Two-stage training: sentence-level alignment first, token-level added later.

Every batch carries the high-resource triples (caption, reference, image)
plus image-caption chunks from each low-resource language. Stage 1 optimizes
label-smoothed cross-entropy on the triples together with the sentence-level
contrastive terms; stage 2 adds the token-level terms on top. The text-only
baseline is the same code path with both contrastive weights at zero.

All randomness (shuffles, dropout, few-shot sampling) is derived from the
config seed through named streams, so runs replay bit-identically and
training can resume from any epoch checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter

import numpy as np

from .data import Corpus, Vocabulary, audit_pivot_coverage
from .errors import (CheckpointError, ConfigError, ContractError,
                     NonFiniteGradientError)
from .losses import (AlignedBatch, AlignedGroup, ContrastConfig, l2_align,
                     sentence_contrast, sentence_repr, sequence_cross_entropy,
                     token_contrast)
from .model import (DropStream, ModelConfig, ModelState, encode_image,
                    encode_text, decoder_logits, load_checkpoint,
                    selective_attention, write_checkpoint)
from .seeding import stream, stream_seed
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; contrastive weights select the mode."""

    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    lr_peak: float = 5e-4
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    max_epochs: int = 64
    batch_tokens: int = 400
    stage_split_fraction: float = 0.5
    label_smoothing: float = 0.1
    dropout_p: float = 0.1
    seed: int = 13
    checkpoint_avg_k: int = 5
    use_l2_loss: bool = False

    def __post_init__(self):
        if not 0.0 < self.stage_split_fraction < 1.0:
            raise ConfigError("stage_split_fraction must lie in (0, 1)")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be at least 1")
        if self.lr_peak <= 0.0:
            raise ConfigError("lr_peak must be positive")
        if not 0.0 < self.adam_beta1 < 1.0 or not 0.0 < self.adam_beta2 < 1.0:
            raise ConfigError("adam betas must lie in (0, 1)")
        if self.adam_eps <= 0.0:
            raise ConfigError("adam_eps must be positive")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        if self.batch_tokens < 4:
            raise ConfigError("batch_tokens too small to hold a sample")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.checkpoint_avg_k < 1:
            raise ConfigError("checkpoint_avg_k must be at least 1")

    def stage1_epochs(self) -> int:
        return int(round(self.max_epochs * self.stage_split_fraction))


@dataclass(frozen=True)
class FinetuneConfig:
    """Cross-entropy-only adaptation on small parallel samples."""

    pairs: int = 100
    seeds: int = 5
    epochs: int = 4
    lr: float = 2e-4
    batch_tokens: int = 400
    label_smoothing: float = 0.1
    dropout_p: float = 0.1
    seed: int = 13

    def __post_init__(self):
        if self.pairs < 1:
            raise ConfigError("pairs must be at least 1")
        if self.seeds < 1:
            raise ConfigError("seeds must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if self.batch_tokens < 4:
            raise ConfigError("batch_tokens too small to hold a sample")


@dataclass
class TrainLogRecord:
    """One optimizer step; loss components are logged before weighting."""

    step: int
    stage: str  # "1", "2" or "finetune"
    ce: float
    s_ctr: float
    t_ctr: float
    l2: float
    lr: float
    seconds: float
    epoch: int = -1  # not part of the CSV

    def __post_init__(self):
        for name in ("ce", "s_ctr", "t_ctr", "l2", "lr"):
            if not math.isfinite(getattr(self, name)):
                raise ContractError(f"non-finite log component {name}")


LOG_HEADER = "step,stage,ce,s_ctr,t_ctr,l2,lr,seconds"


def write_log_csv(path, records: list[TrainLogRecord]) -> None:
    """Wall-time is written as zero: logs must be byte-identical across
    replays, and step timing varies with the machine."""
    lines = [LOG_HEADER]
    for r in records:
        lines.append(f"{r.step},{r.stage},{r.ce:.6f},{r.s_ctr:.6f},"
                     f"{r.t_ctr:.6f},{r.l2:.6f},{r.lr:.8f},0.000")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_log_csv(path) -> list[TrainLogRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ContractError(f"{path} is not a training log")
    records = []
    for line in lines[1:]:
        step, stage, ce, s, t, l2, lr, secs = line.split(",")
        records.append(TrainLogRecord(
            step=int(step), stage=stage, ce=float(ce), s_ctr=float(s),
            t_ctr=float(t), l2=float(l2), lr=float(lr), seconds=float(secs)))
    return records


# ----------------------------------------------------------------------
# schedule and optimizer
# ----------------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_peak, then inverse-square-root decay."""
    if step < 1:
        raise ContractError("steps are counted from 1")
    w = cfg.warmup_steps
    return cfg.lr_peak * min(step / w, math.sqrt(w / step))


class OptimizerState:
    """Adam moments, shaped like the parameters they track."""

    def __init__(self, t: int, m: dict[str, np.ndarray],
                 v: dict[str, np.ndarray]):
        self.t = t
        self.m = m
        self.v = v

    @classmethod
    def init(cls, state: ModelState) -> "OptimizerState":
        zeros = lambda: {k: np.zeros_like(p.data)
                         for k, p in state.params.items()}
        return cls(0, zeros(), zeros())

    def save(self, path) -> None:
        arrays = {"step": np.array(float(self.t))}
        for k, arr in self.m.items():
            arrays[f"m.{k}"] = arr
        for k, arr in self.v.items():
            arrays[f"v.{k}"] = arr
        with open(path, "wb") as fh:
            write_checkpoint(fh, arrays)

    @classmethod
    def load(cls, path, state: ModelState) -> "OptimizerState":
        arrays = load_checkpoint(path)
        expected = ({"step"} | {f"m.{k}" for k in state.params}
                    | {f"v.{k}" for k in state.params})
        if set(arrays) != expected:
            raise CheckpointError(f"{path} does not match the model layout")
        m = {k: arrays[f"m.{k}"] for k in state.params}
        v = {k: arrays[f"v.{k}"] for k in state.params}
        for k, p in state.params.items():
            if m[k].shape != p.data.shape or v[k].shape != p.data.shape:
                raise CheckpointError(f"moment shape mismatch for {k}")
        return cls(int(arrays["step"].item()), m, v)


def adam_step(state: ModelState, opt: OptimizerState, lr: float,
              cfg: TrainConfig) -> None:
    """Bias-corrected Adam over every parameter; missing grads count as zero.

    All gradients are checked before anything mutates, so a non-finite
    gradient leaves both model and optimizer untouched.
    """
    names = sorted(state.params)
    grads: dict[str, np.ndarray] = {}
    for name in names:
        g = state.params[name].grad
        if g is None:
            g = np.zeros_like(state.params[name].data)
        elif not np.isfinite(g).all():
            raise NonFiniteGradientError(
                f"non-finite gradient in parameter {name}")
        grads[name] = g
    opt.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** opt.t
    bc2 = 1.0 - b2 ** opt.t
    for name in names:
        g = grads[name]
        opt.m[name] = b1 * opt.m[name] + (1.0 - b1) * g
        opt.v[name] = b2 * opt.v[name] + (1.0 - b2) * g * g
        m_hat = opt.m[name] / bc1
        v_hat = opt.v[name] / bc2
        state.params[name].data -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


# ----------------------------------------------------------------------
# batches
# ----------------------------------------------------------------------


def pack_sequences(seqs: list[list[int]], pad_id: int = Vocabulary.PAD
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists into a matrix; mask marks real positions."""
    if not seqs:
        raise ContractError("cannot pack an empty sequence list")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    return ids, ids != pad_id


def source_ids(text: str, vocab: Vocabulary) -> list[int]:
    """Encoder-side framing: caption tokens then eos."""
    return vocab.tokenize(text) + [vocab.EOS]


def decoder_frames(texts: list[str], vocab: Vocabulary
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Shifted decoder input (bos + y) and target (y + eos), padded."""
    ins, outs = [], []
    for t in texts:
        toks = vocab.tokenize(t)
        ins.append([vocab.BOS] + toks)
        outs.append(toks + [vocab.EOS])
    dec_in, _ = pack_sequences(ins)
    dec_tgt, _ = pack_sequences(outs)
    return dec_in, dec_tgt


@dataclass
class TrainBatch:
    """High-resource triples plus per-language image-caption chunks."""

    src_ids: np.ndarray
    src_mask: np.ndarray
    dec_in: np.ndarray
    dec_tgt: np.ndarray
    pixels: np.ndarray  # (B, side, side, 3) in [0, 1]
    tgt_ids: np.ndarray
    tgt_mask: np.ndarray
    lo: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]

    def __post_init__(self):
        if self.src_ids.shape[0] == 0:
            raise ConfigError("batch holds no cross-entropy pairs")


@dataclass
class _Triple:
    src: list[int]
    tgt_text: str
    pixels_u8: np.ndarray
    cost: int


@dataclass
class _Pair:
    src: list[int]
    pixels_u8: np.ndarray


@dataclass
class TrainData:
    """Tokenized corpus with preloaded images, ready for batching."""

    triples: list[_Triple]
    lo_pairs: dict[str, list[_Pair]]
    vocab: Vocabulary


def prepare_train_data(corpus: Corpus) -> TrainData:
    vocab = corpus.vocab
    triples = []
    for s in corpus.by_lang("train", corpus.high_lang):
        src = source_ids(s.src, vocab)
        n_tgt = len(vocab.tokenize(s.tgt)) + 1
        pix = np.round(corpus.load_pixels(s) * 255.0).astype(np.uint8)
        triples.append(_Triple(src, s.tgt, pix, len(src) + n_tgt))
    lo_pairs = {}
    for lang in corpus.low_langs:
        pairs = []
        for s in corpus.by_lang("train", lang):
            pix = np.round(corpus.load_pixels(s) * 255.0).astype(np.uint8)
            pairs.append(_Pair(source_ids(s.src, vocab), pix))
        lo_pairs[lang] = pairs
    return TrainData(triples, lo_pairs, vocab)


def _budget_batches(order: np.ndarray, costs: np.ndarray,
                    budget: int) -> list[np.ndarray]:
    batches, current, total = [], [], 0
    for idx in order:
        c = int(costs[idx])
        if current and total + c > budget:
            batches.append(np.array(current))
            current, total = [], 0
        current.append(int(idx))
        total += c
    if current:
        batches.append(np.array(current))
    return batches


def plan_epoch(data: TrainData, cfg: TrainConfig, epoch: int
               ) -> list[tuple[np.ndarray, dict[str, np.ndarray]]]:
    """Shuffle and split the epoch into steps.

    Triples fill batches up to the token budget; each low-resource pool is
    split into the same number of chunks, so every step sees every language
    and each pool is consumed exactly once per epoch.
    """
    costs = np.array([t.cost for t in data.triples])
    order = stream(cfg.seed, "shuffle", "hi", epoch).permutation(len(costs))
    hi_batches = _budget_batches(order, costs, cfg.batch_tokens)
    plans = []
    lo_chunks: dict[str, list[np.ndarray]] = {}
    for lang, pool in data.lo_pairs.items():
        perm = stream(cfg.seed, "shuffle", lang, epoch).permutation(len(pool))
        lo_chunks[lang] = np.array_split(perm, len(hi_batches))
    for i, hi_idx in enumerate(hi_batches):
        plans.append((hi_idx, {lang: lo_chunks[lang][i]
                               for lang in data.lo_pairs}))
    return plans


def build_batch(data: TrainData,
                plan: tuple[np.ndarray, dict[str, np.ndarray]]) -> TrainBatch:
    hi_idx, lo_idx = plan
    triples = [data.triples[i] for i in hi_idx]
    src_ids, src_mask = pack_sequences([t.src for t in triples])
    dec_in, dec_tgt = decoder_frames([t.tgt_text for t in triples], data.vocab)
    pixels = np.stack([t.pixels_u8 for t in triples]).astype(np.float64) / 255.0
    tgt_ids, tgt_mask = pack_sequences(
        [source_ids(t.tgt_text, data.vocab) for t in triples])
    lo = {}
    for lang, idx in lo_idx.items():
        if len(idx) == 0:
            continue
        pairs = [data.lo_pairs[lang][i] for i in idx]
        ids, mask = pack_sequences([p.src for p in pairs])
        pix = np.stack([p.pixels_u8 for p in pairs]).astype(np.float64) / 255.0
        lo[lang] = (ids, mask, pix)
    return TrainBatch(src_ids, src_mask, dec_in, dec_tgt, pixels,
                      tgt_ids, tgt_mask, lo)


# ----------------------------------------------------------------------
# stage losses
# ----------------------------------------------------------------------


def _group_sentence_term(group: AlignedGroup, cfg: TrainConfig) -> Tensor:
    m = group.text.pad_mask.shape[0]
    if cfg.use_l2_loss:
        return l2_align(sentence_repr(group.text), group.image.v0) / float(m)
    one = sentence_contrast(AlignedBatch([group]), cfg.contrast)
    return one / float(2 * m)


def _group_token_term(group: AlignedGroup, state: ModelState,
                      cfg: TrainConfig) -> Tensor:
    n_real = int(group.text.pad_mask.sum())
    vt = selective_attention(group.text, group.image, state)
    if cfg.use_l2_loss:
        diff = (group.text.states - vt) * Tensor(
            group.text.pad_mask.astype(np.float64)[:, :, None])
        return (diff * diff).sum() / float(n_real)
    return token_contrast(group.text, vt, cfg.contrast.tau_t) / float(2 * n_real)


def _composite_loss(batch: TrainBatch, state: ModelState, cfg: TrainConfig,
                    drop: DropStream | None, with_token: bool
                    ) -> tuple[Tensor, dict[str, float]]:
    ccfg = cfg.contrast
    enc_src = encode_text(batch.src_ids, batch.src_mask, state, drop)
    logits = decoder_logits(batch.dec_in, enc_src, state, drop)
    ce = sequence_cross_entropy(logits, batch.dec_tgt, cfg.label_smoothing)
    total = ce
    comps = {"ce": ce.item(), "s_ctr": 0.0, "t_ctr": 0.0, "l2": 0.0}

    need_s = ccfg.lambda_s > 0.0
    need_t = with_token and ccfg.lambda_t > 0.0
    if not (need_s or need_t):
        return total, comps

    img_hi = encode_image(batch.pixels, state, drop)
    enc_tgt = encode_text(batch.tgt_ids, batch.tgt_mask, state, drop)
    groups = [AlignedGroup("tgt", img_hi, enc_tgt, is_target=True),
              AlignedGroup("hi", img_hi, enc_src)]
    for lang, (ids, mask, pix) in batch.lo.items():
        groups.append(AlignedGroup(
            lang, encode_image(pix, state, drop),
            encode_text(ids, mask, state, drop)))
    live = [g for g in groups
            if not (g.is_target and not ccfg.include_target_contrast)]

    if need_s:
        s_term = Tensor(0.0)
        for g in live:
            s_term = s_term + _group_sentence_term(g, cfg)
        total = total + s_term * ccfg.lambda_s
        comps["l2" if cfg.use_l2_loss else "s_ctr"] += s_term.item()
    if need_t:
        t_term = Tensor(0.0)
        for g in live:
            t_term = t_term + _group_token_term(g, state, cfg)
        total = total + t_term * ccfg.lambda_t
        comps["l2" if cfg.use_l2_loss else "t_ctr"] += t_term.item()
    return total, comps


def stage1_loss(batch: TrainBatch, state: ModelState, cfg: TrainConfig,
                drop: DropStream | None = None) -> tuple[Tensor, dict[str, float]]:
    """Cross-entropy plus weighted sentence-level alignment terms."""
    return _composite_loss(batch, state, cfg, drop, with_token=False)


def stage2_loss(batch: TrainBatch, state: ModelState, cfg: TrainConfig,
                drop: DropStream | None = None) -> tuple[Tensor, dict[str, float]]:
    """Stage 1 objective plus weighted token-level alignment terms."""
    return _composite_loss(batch, state, cfg, drop, with_token=True)


# ----------------------------------------------------------------------
# training loops
# ----------------------------------------------------------------------


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / f"ckpt-{epoch}.pvck"


def _opt_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / f"opt-{epoch}.pvck"


def _find_resume_epoch(out_dir, max_epochs: int) -> int:
    last = -1
    for e in range(max_epochs):
        if checkpoint_path(out_dir, e).exists() and _opt_path(out_dir, e).exists():
            last = e
        else:
            break
    return last


def train(corpus: Corpus, model_cfg: ModelConfig, cfg: TrainConfig, out_dir,
          stop_after_epoch: int | None = None, resume: bool = False
          ) -> tuple[ModelState, list[TrainLogRecord]]:
    """Run the epoch loop, saving a model and optimizer checkpoint per epoch.

    With `resume`, picks up after the last complete epoch in `out_dir` and
    produces the same bytes an uninterrupted run would have.
    """
    audit_pivot_coverage(corpus)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_train_data(corpus)

    state = ModelState.initialize(model_cfg, cfg.seed)
    opt = OptimizerState.init(state)
    records: list[TrainLogRecord] = []
    start_epoch = 0
    if resume:
        last = _find_resume_epoch(out_dir, cfg.max_epochs)
        if last >= 0:
            state = ModelState.load(checkpoint_path(out_dir, last), model_cfg)
            opt = OptimizerState.load(_opt_path(out_dir, last), state)
            records = read_log_csv(out_dir / "log.csv")
            start_epoch = last + 1

    n_stage1 = cfg.stage1_epochs()
    global_step = sum(len(plan_epoch(data, cfg, e)) for e in range(start_epoch))
    for epoch in range(start_epoch, cfg.max_epochs):
        stage = "1" if epoch < n_stage1 else "2"
        loss_fn = stage1_loss if stage == "1" else stage2_loss
        for step_in_epoch, plan in enumerate(plan_epoch(data, cfg, epoch)):
            tick = perf_counter()
            global_step += 1
            batch = build_batch(data, plan)
            lr = lr_at(global_step, cfg)
            drop = None
            if cfg.dropout_p > 0.0:
                drop = DropStream(cfg.dropout_p, stream_seed(
                    cfg.seed, "drop", epoch, step_in_epoch))
            loss, comps = loss_fn(batch, state, cfg, drop)
            state.zero_grads()
            loss.backward()
            adam_step(state, opt, lr, cfg)
            records.append(TrainLogRecord(
                step=global_step, stage=stage, lr=lr, epoch=epoch,
                seconds=perf_counter() - tick, **comps))
        state.save(checkpoint_path(out_dir, epoch))
        opt.save(_opt_path(out_dir, epoch))
        write_log_csv(out_dir / "log.csv", records)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    return state, records


def sample_fewshot_pairs(corpus: Corpus, lang: str, n: int, seed: int,
                         replicate: int) -> list[tuple[str, str]]:
    """Draw n distinct (source, reference) pairs from the few-shot pool."""
    pool = corpus.by_lang("fewshot", lang)
    if n < 1 or n > len(pool):
        raise ConfigError(
            f"cannot draw {n} pairs from a pool of {len(pool)}")
    rng = stream(seed, "fewshot-sample", lang, replicate)
    idx = rng.choice(len(pool), size=n, replace=False)
    return [(pool[i].src, pool[i].tgt) for i in idx]


def finetune(state: ModelState, pairs: list[tuple[str, str]],
             vocab: Vocabulary, cfg: FinetuneConfig, replicate: int = 0
             ) -> tuple[ModelState, list[TrainLogRecord]]:
    """Adapt a trained model with cross-entropy only; contrastive terms stay
    off, matching few-shot adaptation. Returns a new state; zero epochs
    return an unchanged copy."""
    if not pairs:
        raise ConfigError("finetune needs at least one parallel pair")
    tuned = state.copy()
    opt = OptimizerState.init(tuned)
    ids = [source_ids(src, vocab) for src, _ in pairs]
    costs = np.array([len(s) + len(vocab.tokenize(t)) + 1
                      for s, (_, t) in zip(ids, pairs)])
    tgts = [t for _, t in pairs]
    records: list[TrainLogRecord] = []
    train_cfg = TrainConfig()  # adam betas/eps shared with main training
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "ft-shuffle", replicate, epoch).permutation(
            len(pairs))
        for step_in_epoch, idx in enumerate(
                _budget_batches(order, costs, cfg.batch_tokens)):
            tick = perf_counter()
            step += 1
            src_ids, src_mask = pack_sequences([ids[i] for i in idx])
            dec_in, dec_tgt = decoder_frames([tgts[i] for i in idx], vocab)
            drop = None
            if cfg.dropout_p > 0.0:
                drop = DropStream(cfg.dropout_p, stream_seed(
                    cfg.seed, "ft-drop", replicate, epoch, step_in_epoch))
            enc = encode_text(src_ids, src_mask, tuned, drop)
            logits = decoder_logits(dec_in, enc, tuned, drop)
            ce = sequence_cross_entropy(logits, dec_tgt, cfg.label_smoothing)
            tuned.zero_grads()
            ce.backward()
            adam_step(tuned, opt, cfg.lr, train_cfg)
            records.append(TrainLogRecord(
                step=step, stage="finetune", ce=ce.item(), s_ctr=0.0,
                t_ctr=0.0, l2=0.0, lr=cfg.lr, epoch=epoch,
                seconds=perf_counter() - tick))
    return tuned, records


def average_checkpoints(paths: list, model_cfg: ModelConfig) -> ModelState:
    """Elementwise mean over checkpoints with identical layouts."""
    if not paths:
        raise CheckpointError("need at least one checkpoint to average")
    stacks: dict[str, np.ndarray] | None = None
    for path in paths:
        arrays = load_checkpoint(path)
        if stacks is None:
            stacks = {k: v.astype(np.float64) for k, v in arrays.items()}
            continue
        if set(arrays) != set(stacks):
            raise CheckpointError(f"{path} holds a different parameter set")
        for k, v in arrays.items():
            if v.shape != stacks[k].shape:
                raise CheckpointError(f"{path} shape mismatch for {k}")
            stacks[k] = stacks[k] + v
    mean = {k: v / float(len(paths)) for k, v in stacks.items()}
    fresh = ModelState.initialize(model_cfg, seed=0)
    if set(mean) != set(fresh.params):
        raise CheckpointError("checkpoints do not match the model config")
    for k, ref in fresh.params.items():
        if mean[k].shape != ref.data.shape:
            raise CheckpointError(f"parameter {k} has unexpected shape")
    return ModelState(model_cfg, {k: Tensor(v, requires_grad=True)
                                  for k, v in mean.items()})
