"""Transformer blocks shared by the text encoder, decoder and visual encoder.

One embedding table covers the union vocabulary of all languages, so the
text encoder is language-agnostic by construction. Images enter as
non-overlapping square patches plus a learned class token; the class token's
final state serves as the sentence-level image representation. A single-head
cross-attention block ties each text token to a mixture of patch states.

Layers are post-norm: sublayer output is dropped out, added to the residual
stream, then layer-normalized. All attention masks are additive biases with
0 for visible and -1e30 for hidden positions; -1e30 underflows to exactly
zero weight after the stable softmax without producing NaNs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from . import tensor as T
from .errors import (CheckpointError, ContractError, DimensionError,
                     DomainError, LengthError, VocabularyError)
from .seeding import stream
from .tensor import Tensor

MASK_HIDDEN = -1e30

CHECKPOINT_MAGIC = b"PVCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the encoder-decoder and the visual encoder."""

    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_img_layers: int = 2
    dropout_p: float = 0.1
    image_side: int = 24
    patch_side: int = 8
    max_len: int = 16
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ContractError("vocab_size must cover the four specials")
        if self.d_model % self.n_heads != 0:
            raise ContractError("d_model must divide evenly into heads")
        if self.image_side % self.patch_side != 0:
            raise ContractError("patch_side must tile image_side exactly")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("dropout_p must lie in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_side ** 2


@dataclass
class EncodedText:
    """Per-token encoder states (B, n, d_model) with their padding mask."""

    states: Tensor
    pad_mask: np.ndarray  # bool (B, n), True on real tokens


@dataclass
class EncodedImage:
    """Class-token state (B, d_model) and patch states (B, m, d_model)."""

    v0: Tensor
    patches: Tensor


class DropStream:
    """Sequence of dropout masks drawn from one seeded generator.

    Passing None wherever a DropStream is accepted disables dropout, which
    is the evaluation behaviour (identity equals the training expectation
    under inverted scaling).
    """

    def __init__(self, p: float, seed):
        self.p = float(p)
        self.gen = np.random.default_rng(seed)

    def __call__(self, x: Tensor) -> Tensor:
        if self.p == 0.0:
            return x
        return T.dropout(x, self.p, self.gen)


def _drop(x: Tensor, drop: DropStream | None) -> Tensor:
    return x if drop is None else drop(x)


def sinusoid_table(n_positions: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine position encodings, one row per position."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    idx = np.arange(d_model, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d_model)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table


# ----------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _attention_param_specs(prefix: str, d: int):
    for name in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.{name}", ("xavier", d, d)
    for name in ("bq", "bk", "bv", "bo"):
        yield f"{prefix}.{name}", ("zeros", d)


def _layer_param_specs(prefix: str, cfg: ModelConfig, cross: bool):
    d, f = cfg.d_model, cfg.d_ffn
    yield from _attention_param_specs(f"{prefix}.self", d)
    yield f"{prefix}.ln1.g", ("ones", d)
    yield f"{prefix}.ln1.b", ("zeros", d)
    if cross:
        yield from _attention_param_specs(f"{prefix}.cross", d)
        yield f"{prefix}.ln2.g", ("ones", d)
        yield f"{prefix}.ln2.b", ("zeros", d)
    yield f"{prefix}.ffn.w1", ("xavier", d, f)
    yield f"{prefix}.ffn.b1", ("zeros", f)
    yield f"{prefix}.ffn.w2", ("xavier", f, d)
    yield f"{prefix}.ffn.b2", ("zeros", d)
    ln_out = "ln3" if cross else "ln2"
    yield f"{prefix}.{ln_out}.g", ("ones", d)
    yield f"{prefix}.{ln_out}.b", ("zeros", d)


def _param_specs(cfg: ModelConfig):
    d = cfg.d_model
    yield "tok_emb", ("embed", cfg.vocab_size, d)
    for i in range(cfg.n_enc_layers):
        yield from _layer_param_specs(f"enc.{i}", cfg, cross=False)
    for i in range(cfg.n_dec_layers):
        yield from _layer_param_specs(f"dec.{i}", cfg, cross=True)
    yield "img.proj.w", ("xavier", cfg.patch_dim, d)
    yield "img.proj.b", ("zeros", d)
    yield "img.cls", ("embed", 1, d)
    for i in range(cfg.n_img_layers):
        yield from _layer_param_specs(f"img.{i}", cfg, cross=False)
    for name in ("sel.wq", "sel.wk", "sel.wv"):
        yield name, ("xavier", d, d)
    yield "out.w", ("xavier", d, cfg.vocab_size)
    yield "out.b", ("zeros", cfg.vocab_size)


class ModelState:
    """Named trainable parameters plus the config they were built for."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        n = max(cfg.max_len, cfg.n_patches + 1)
        self.pos_table = sinusoid_table(n, cfg.d_model)

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int) -> "ModelState":
        rng = stream(seed, "model-init")
        params: dict[str, Tensor] = {}
        for name, spec in _param_specs(cfg):
            kind = spec[0]
            if kind == "xavier":
                arr = _xavier(rng, spec[1], spec[2])
            elif kind == "embed":
                arr = rng.normal(0.0, spec[2] ** -0.5, size=(spec[1], spec[2]))
            elif kind == "ones":
                arr = np.ones(spec[1])
            else:
                arr = np.zeros(spec[1:][0] if len(spec) == 2 else spec[1:])
            params[name] = Tensor(arr, requires_grad=True)
        return cls(cfg, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ModelState":
        params = {k: Tensor(v.data.copy(), requires_grad=True)
                  for k, v in self.params.items()}
        return ModelState(self.cfg, params)

    # ---------------- checkpoint io ----------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            write_checkpoint(fh, {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path, cfg: ModelConfig) -> "ModelState":
        arrays = load_checkpoint(path)
        expected = {name: None for name, _ in _param_specs(cfg)}
        if set(arrays) != set(expected):
            missing = set(expected) - set(arrays)
            extra = set(arrays) - set(expected)
            raise CheckpointError(
                f"checkpoint incompatible with config: missing={sorted(missing)}"
                f" unexpected={sorted(extra)}")
        params: dict[str, Tensor] = {}
        fresh = cls.initialize(cfg, seed=0)
        for name, ref in fresh.params.items():
            if arrays[name].shape != ref.data.shape:
                raise CheckpointError(
                    f"parameter {name} has shape {arrays[name].shape}, "
                    f"expected {ref.data.shape}")
            params[name] = Tensor(arrays[name], requires_grad=True)
        return cls(cfg, params)


def write_checkpoint(fh: BinaryIO, arrays: dict[str, np.ndarray]) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", CHECKPOINT_VERSION))
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        T.write_snapshot(fh, arr)


def read_checkpoint(fh: BinaryIO) -> dict[str, np.ndarray]:
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", fh.read(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", fh.read(4))
        name = fh.read(nlen).decode("utf-8")
        try:
            arrays[name] = T.read_snapshot(fh)
        except ContractError as exc:
            raise CheckpointError(f"corrupt entry {name!r}: {exc}") from None
    return arrays


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_checkpoint(fh)


# ----------------------------------------------------------------------
# attention and stacks
# ----------------------------------------------------------------------


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    wq: Tensor, bq: Tensor,
    wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor,
    wo: Tensor, bo: Tensor,
    n_heads: int,
    mask_bias: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over h heads.

    q, k, v: (B, n, d_model). mask_bias broadcasts against the (B, h, nq, nk)
    score tensor with 0 for visible entries and -1e30 for hidden ones.
    """
    B, nq, d = q.data.shape
    nk = k.data.shape[1]
    if d % n_heads != 0:
        raise DimensionError("d_model must divide evenly into heads")
    dk = d // n_heads

    def split(x: Tensor, n: int) -> Tensor:
        return x.reshape(B, n, n_heads, dk).transpose((0, 2, 1, 3))

    qh = split(q @ wq + bq, nq)
    kh = split(k @ wk + bk, nk)
    vh = split(v @ wv + bv, nk)
    scores = (qh @ kh.transpose((0, 1, 3, 2))) * (dk ** -0.5)
    if mask_bias is not None:
        full = np.broadcast_to(mask_bias, scores.data.shape)
        if np.any(np.all(full <= MASK_HIDDEN, axis=-1)):
            raise ContractError("attention query row has no visible keys")
        scores = scores + Tensor(mask_bias)
    attn = T.softmax(scores, axis=-1)
    ctx = (attn @ vh).transpose((0, 2, 1, 3)).reshape(B, nq, d)
    out = ctx @ wo + bo
    if return_weights:
        return out, attn.data
    return out


def _attention_args(state: ModelState, prefix: str):
    return (state[f"{prefix}.wq"], state[f"{prefix}.bq"],
            state[f"{prefix}.wk"], state[f"{prefix}.bk"],
            state[f"{prefix}.wv"], state[f"{prefix}.bv"],
            state[f"{prefix}.wo"], state[f"{prefix}.bo"])


def _ffn(x: Tensor, state: ModelState, prefix: str) -> Tensor:
    h = (x @ state[f"{prefix}.w1"] + state[f"{prefix}.b1"]).relu()
    return h @ state[f"{prefix}.w2"] + state[f"{prefix}.b2"]


def _ln(x: Tensor, state: ModelState, prefix: str) -> Tensor:
    return T.layer_norm(x, state[f"{prefix}.g"], state[f"{prefix}.b"],
                        state.cfg.ln_eps)


def _encoder_stack(x: Tensor, state: ModelState, prefix: str, n_layers: int,
                   mask_bias: np.ndarray | None, drop: DropStream | None) -> Tensor:
    cfg = state.cfg
    for i in range(n_layers):
        p = f"{prefix}.{i}"
        attn = multi_head_attention(
            x, x, x, *_attention_args(state, f"{p}.self"),
            n_heads=cfg.n_heads, mask_bias=mask_bias)
        x = _ln(x + _drop(attn, drop), state, f"{p}.ln1")
        x = _ln(x + _drop(_ffn(x, state, f"{p}.ffn"), drop), state, f"{p}.ln2")
    return x


def pad_bias(pad_mask: np.ndarray) -> np.ndarray:
    """Key-side additive bias (B, 1, 1, n) hiding padded positions."""
    return np.where(pad_mask, 0.0, MASK_HIDDEN)[:, None, None, :]


def causal_bias(n: int) -> np.ndarray:
    """Additive bias (1, 1, n, n) hiding strictly-future positions."""
    return np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0,
                    MASK_HIDDEN)[None, None, :, :]


# ----------------------------------------------------------------------
# public forward passes
# ----------------------------------------------------------------------


def _check_ids(ids: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DimensionError("token ids must be a (batch, length) array")
    if ids.shape[1] == 0:
        raise ContractError("token sequences must be non-empty")
    if ids.shape[1] > cfg.max_len:
        raise LengthError(
            f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise VocabularyError("token id outside the vocabulary")
    return ids.astype(np.int64)


def embed_tokens(ids: np.ndarray, state: ModelState,
                 drop: DropStream | None = None) -> Tensor:
    """Token embeddings scaled by sqrt(d_model) plus sinusoid positions."""
    cfg = state.cfg
    ids = _check_ids(ids, cfg)
    n = ids.shape[1]
    emb = T.gather_rows(state["tok_emb"], ids) * np.sqrt(cfg.d_model)
    emb = emb + Tensor(state.pos_table[:n])
    return _drop(emb, drop)


def encode_text(ids: np.ndarray, pad_mask: np.ndarray, state: ModelState,
                drop: DropStream | None = None) -> EncodedText:
    """Run the shared text encoder; padded positions never leak into real ones."""
    cfg = state.cfg
    ids = _check_ids(ids, cfg)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if pad_mask.shape != ids.shape:
        raise DimensionError("pad mask shape must match ids")
    if not pad_mask.any(axis=1).all():
        raise ContractError("every sequence needs at least one real token")
    x = embed_tokens(ids, state, drop)
    x = _encoder_stack(x, state, "enc", cfg.n_enc_layers, pad_bias(pad_mask), drop)
    return EncodedText(states=x, pad_mask=pad_mask)


def patchify(pixels: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Split (B, s, s, 3) pixels into (B, m, patch_dim) row-major patches."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 4 or pixels.shape[1:] != (cfg.image_side, cfg.image_side, 3):
        raise DimensionError(
            f"expected (B, {cfg.image_side}, {cfg.image_side}, 3) pixels, "
            f"got {pixels.shape}")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise DomainError("pixel values must lie in [0, 1]")
    B = pixels.shape[0]
    g, ps = cfg.grid_side, cfg.patch_side
    x = pixels.reshape(B, g, ps, g, ps, 3)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, cfg.n_patches, cfg.patch_dim)


def encode_image(pixels: np.ndarray, state: ModelState,
                 drop: DropStream | None = None) -> EncodedImage:
    """Patch projection, class token, positions, then the visual stack."""
    cfg = state.cfg
    patches = patchify(pixels, cfg)
    B = patches.shape[0]
    x = Tensor(patches) @ state["img.proj.w"] + state["img.proj.b"]
    cls = state["img.cls"].reshape(1, 1, cfg.d_model) + Tensor(
        np.zeros((B, 1, cfg.d_model)))
    x = T.concat([cls, x], axis=1)
    x = x + Tensor(state.pos_table[:cfg.n_patches + 1])
    x = _drop(x, drop)
    x = _encoder_stack(x, state, "img", cfg.n_img_layers, None, drop)
    return EncodedImage(v0=x[:, 0, :], patches=x[:, 1:, :])


def decoder_states(tgt_ids: np.ndarray, enc: EncodedText, state: ModelState,
                   drop: DropStream | None = None) -> Tensor:
    """Causal decoder states (B, t, d_model) over the whole prefix."""
    cfg = state.cfg
    tgt_ids = _check_ids(tgt_ids, cfg)
    B, t = tgt_ids.shape
    if enc.states.data.shape[0] != B:
        raise DimensionError("decoder and encoder batch sizes differ")
    x = embed_tokens(tgt_ids, state, drop)
    self_bias = causal_bias(t)
    cross_bias = pad_bias(enc.pad_mask)
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        attn = multi_head_attention(
            x, x, x, *_attention_args(state, f"{p}.self"),
            n_heads=cfg.n_heads, mask_bias=self_bias)
        x = _ln(x + _drop(attn, drop), state, f"{p}.ln1")
        cross = multi_head_attention(
            x, enc.states, enc.states, *_attention_args(state, f"{p}.cross"),
            n_heads=cfg.n_heads, mask_bias=cross_bias)
        x = _ln(x + _drop(cross, drop), state, f"{p}.ln2")
        x = _ln(x + _drop(_ffn(x, state, f"{p}.ffn"), drop), state, f"{p}.ln3")
    return x


def decoder_logits(tgt_ids: np.ndarray, enc: EncodedText, state: ModelState,
                   drop: DropStream | None = None) -> Tensor:
    """Next-token logits (B, t, vocab) for every prefix position."""
    x = decoder_states(tgt_ids, enc, state, drop)
    return x @ state["out.w"] + state["out.b"]


def decode_step(prefix_ids: np.ndarray, enc: EncodedText, state: ModelState) -> Tensor:
    """Logits (B, vocab) for the token following the given prefix."""
    logits = decoder_logits(prefix_ids, enc, state)
    return logits[:, -1, :]


def selective_attention(text: EncodedText, image: EncodedImage,
                        state: ModelState, return_weights: bool = False):
    """Single-head attention mapping each token to a mixture of patch states.

    Returns (B, n, d_model); with return_weights also the (B, n, m) softmax
    weights as a plain array. Rows for padded tokens are computed but carry
    no meaning; downstream losses exclude them.
    """
    cfg = state.cfg
    q = text.states @ state["sel.wq"]
    k = image.patches @ state["sel.wk"]
    v = image.patches @ state["sel.wv"]
    scores = (q @ k.transpose((0, 2, 1))) * (cfg.d_k ** -0.5)
    weights = T.softmax(scores, axis=-1)
    vt = weights @ v
    if return_weights:
        return vt, weights.data
    return vt
