"""Synthetic multilingual caption corpus grounded in rendered scenes.

A scene places one to three colored shapes on a 3x3 grid of 8-pixel cells,
rendered to a 24x24 RGB image; the cell grid therefore aligns exactly with
the 8-pixel patch grid of the visual encoder. Each language describes a
scene with a fixed template (a color word and a shape word per object,
objects ordered by cell), using its own disjoint surface vocabulary and its
own word order. The attribute space is kept wide (ten colors, eight shapes)
so that a model guessing attributes at chance earns almost no n-gram credit
against the references.

The corpus mimics the pivot setting: the high-resource language comes with
images and target-language references (triples), the low-resource languages
come with images only (pairs), and no parallel text exists for them outside
the held-out test sets and the small few-shot pools. Languages never share
image files.

Rendering is integer-exact, so regenerating with the same seed reproduces
every byte, and `scene_from_image` recovers the scene from the pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, DomainError, VocabularyError
from .seeding import stream

GRID = 3
CELL = 8
IMAGE_SIDE = GRID * CELL

SHAPES = ("circle", "square", "triangle", "bar",
          "diamond", "ring", "dot", "wedge")
COLOR_TABLE = {
    "red": (220, 40, 40),
    "green": (40, 170, 50),
    "blue": (40, 70, 210),
    "yellow": (230, 200, 40),
    "purple": (140, 40, 170),
    "orange": (240, 130, 40),
    "cyan": (40, 200, 210),
    "pink": (240, 120, 180),
    "brown": (130, 80, 30),
    "gray": (120, 120, 120),
}
COLORS = tuple(COLOR_TABLE)
CONCEPTS = COLORS + SHAPES

WHITE = np.array([255, 255, 255], dtype=np.uint8)

ORDER_RULES = ("color-shape", "shape-color")


def _shape_masks() -> dict[str, np.ndarray]:
    r = np.arange(CELL)[:, None].astype(float)
    c = np.arange(CELL)[None, :].astype(float)
    dist2 = (r - 3.5) ** 2 + (c - 3.5) ** 2
    circle = dist2 <= 10.5
    masks = {
        "circle": circle,
        "square": (1 <= r) & (r <= 6) & (1 <= c) & (c <= 6),
        "triangle": (r >= 1) & (r <= 6) & (np.abs(c - 3.5) <= 0.6 * (r - 0.5)),
        "bar": np.broadcast_to((3 <= r) & (r <= 4), (CELL, CELL)).copy(),
        "diamond": np.abs(r - 3.5) + np.abs(c - 3.5) <= 3.0,
        "ring": circle & (dist2 > 2.0),
        "dot": (3 <= r) & (r <= 4) & (3 <= c) & (c <= 4),
        "wedge": r >= c + 2,
    }
    # scene_from_image keys shapes by filled pixel count, so areas must differ
    counts = {k: int(v.sum()) for k, v in masks.items()}
    if len(set(counts.values())) != len(counts):
        raise AssertionError(f"shape masks must have unique areas: {counts}")
    return masks


SHAPE_MASKS = _shape_masks()
_AREA_TO_SHAPE = {int(m.sum()): name for name, m in SHAPE_MASKS.items()}


@dataclass(frozen=True, order=True)
class SceneObject:
    cell: int
    color: str
    shape: str


@dataclass(frozen=True)
class Scene:
    """Objects sorted by cell; no two objects share a cell."""

    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 3:
            raise ContractError("scenes hold one to three objects")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ContractError("objects must occupy distinct cells")
        if list(cells) != sorted(cells):
            raise ContractError("objects must be sorted by cell")
        for o in self.objects:
            if not 0 <= o.cell < GRID * GRID:
                raise ContractError("cell index out of range")
            if o.color not in COLOR_TABLE or o.shape not in SHAPE_MASKS:
                raise ContractError("unknown color or shape")


@dataclass(frozen=True)
class LanguageSpec:
    """Surface vocabulary and word order of one synthetic language."""

    tag: str
    lexicon: dict[str, str]  # concept -> surface word
    order_rule: str

    def __post_init__(self):
        if self.order_rule not in ORDER_RULES:
            raise ContractError(f"unknown order rule {self.order_rule!r}")
        missing = [c for c in CONCEPTS if c not in self.lexicon]
        if missing:
            raise ContractError(f"lexicon must cover all concepts: {missing}")

    def words(self) -> list[str]:
        return [self.lexicon[c] for c in CONCEPTS]


def _make_language(tag: str, order_rule: str) -> LanguageSpec:
    lexicon = {concept: f"{tag}_{concept}" for concept in CONCEPTS}
    return LanguageSpec(tag=tag, lexicon=lexicon, order_rule=order_rule)


def default_languages() -> dict[str, LanguageSpec]:
    """High-resource `hi`, low-resource `lo1`/`lo2`, target `tgt`.

    lo1 shares the target's word order, lo2 and hi use the reversed one, so
    translation involves reordering for some directions.
    """
    return {
        "hi": _make_language("hi", "shape-color"),
        "lo1": _make_language("lo1", "color-shape"),
        "lo2": _make_language("lo2", "shape-color"),
        "tgt": _make_language("tgt", "color-shape"),
    }


# ----------------------------------------------------------------------
# scenes, rendering, captions
# ----------------------------------------------------------------------


def gen_scene(rng: np.random.Generator) -> Scene:
    """Uniform object count in {1,2,3}, distinct cells, uniform attributes."""
    k = int(rng.integers(1, 4))
    cells = np.sort(rng.choice(GRID * GRID, size=k, replace=False))
    objects = []
    for cell in cells:
        color = COLORS[int(rng.integers(len(COLORS)))]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        objects.append(SceneObject(cell=int(cell), color=color, shape=shape))
    return Scene(tuple(objects))


def render_image_u8(scene: Scene) -> np.ndarray:
    """Exact uint8 rendering on a white canvas."""
    img = np.full((IMAGE_SIDE, IMAGE_SIDE, 3), 255, dtype=np.uint8)
    for obj in scene.objects:
        row, col = divmod(obj.cell, GRID)
        block = img[row * CELL:(row + 1) * CELL, col * CELL:(col + 1) * CELL]
        block[SHAPE_MASKS[obj.shape]] = COLOR_TABLE[obj.color]
    return img


def render_image(scene: Scene) -> np.ndarray:
    """Float rendering in [0, 1], the model-side input."""
    return render_image_u8(scene).astype(np.float64) / 255.0


def scene_from_image(pixels: np.ndarray) -> Scene:
    """Recover the scene from a rendered image.

    Shapes are identified by their pixel area inside the cell, colors by the
    palette entry; fails loudly on anything the renderer cannot produce.
    """
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.shape != (IMAGE_SIDE, IMAGE_SIDE, 3):
        raise DataError(f"unexpected image geometry {arr.shape}")
    rgb_to_color = {v: k for k, v in COLOR_TABLE.items()}
    objects = []
    for cell in range(GRID * GRID):
        row, col = divmod(cell, GRID)
        block = arr[row * CELL:(row + 1) * CELL, col * CELL:(col + 1) * CELL]
        filled = np.any(block != WHITE, axis=-1)
        area = int(filled.sum())
        if area == 0:
            continue
        if area not in _AREA_TO_SHAPE:
            raise DataError(f"cell {cell} holds no known shape (area {area})")
        rgb = tuple(int(v) for v in block[filled][0])
        if rgb not in rgb_to_color:
            raise DataError(f"cell {cell} uses an unknown color {rgb}")
        objects.append(SceneObject(cell=cell, color=rgb_to_color[rgb],
                                   shape=_AREA_TO_SHAPE[area]))
    if not objects:
        raise DataError("image holds no objects")
    return Scene(tuple(objects))


def caption(scene: Scene, lang: LanguageSpec) -> list[str]:
    """Deterministic template: one word pair per object, objects by cell."""
    words: list[str] = []
    for obj in scene.objects:
        color = lang.lexicon[obj.color]
        shape = lang.lexicon[obj.shape]
        if lang.order_rule == "color-shape":
            words.extend([color, shape])
        else:
            words.extend([shape, color])
    return words


# ----------------------------------------------------------------------
# vocabulary
# ----------------------------------------------------------------------


class Vocabulary:
    """Shared word-level vocabulary over all languages.

    Ids 0..3 are pad, bos, eos, unk; a token's id is its line number in the
    vocab file.
    """

    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != self.SPECIALS:
            raise VocabularyError("first four entries must be the specials")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate token in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_languages(cls, languages: dict[str, LanguageSpec]) -> "Vocabulary":
        tokens = list(cls.SPECIALS)
        seen: set[str] = set()
        for tag in languages:
            for word in languages[tag].words():
                if word in seen:
                    raise DataError(
                        f"surface form {word!r} appears in two languages")
                seen.add(word)
                tokens.append(word)
        return cls(tokens)

    def tokenize(self, text: str) -> list[int]:
        return [self.index.get(w, self.UNK) for w in text.split()]

    def detokenize(self, ids: list[int]) -> str:
        words = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"id {i} out of range")
            words.append(self.tokens[i])
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


# ----------------------------------------------------------------------
# corpus
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    """Sample counts per split plus the caption noise knob."""

    n_train_high: int = 3000
    n_train_low: int = 3000
    n_valid: int = 200
    n_test: int = 500
    n_fewshot: int = 500
    caption_dropout: float = 0.0

    def __post_init__(self):
        for name in ("n_train_high", "n_train_low", "n_valid", "n_test",
                     "n_fewshot"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if not 0.0 <= self.caption_dropout < 1.0:
            raise ContractError("caption_dropout must lie in [0, 1)")


@dataclass(frozen=True)
class CorpusSample:
    id: str
    split: str
    lang: str
    image: str  # path relative to the corpus root
    src: str
    tgt: str | None = None


SPLITS = ("train", "valid", "test", "fewshot")


@dataclass
class Corpus:
    root: Path
    languages: dict[str, LanguageSpec]
    high_lang: str
    low_langs: list[str]
    target_lang: str
    vocab: Vocabulary
    samples: dict[str, list[CorpusSample]] = field(default_factory=dict)

    def by_lang(self, split: str, lang: str) -> list[CorpusSample]:
        return [s for s in self.samples.get(split, []) if s.lang == lang]

    def source_langs(self) -> list[str]:
        return [self.high_lang] + self.low_langs

    def load_pixels(self, sample: CorpusSample) -> np.ndarray:
        return read_ppm(self.root / sample.image)

    @classmethod
    def load(cls, root) -> "Corpus":
        root = Path(root)
        meta_path = root / "languages.json"
        if not meta_path.exists():
            raise DataError(f"{root} does not look like a corpus directory")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        languages = {
            tag: LanguageSpec(tag=tag, lexicon=entry["lexicon"],
                              order_rule=entry["order_rule"])
            for tag, entry in meta["languages"].items()
        }
        corpus = cls(root=root, languages=languages, high_lang=meta["high"],
                     low_langs=list(meta["low"]), target_lang=meta["target"],
                     vocab=Vocabulary.load(root / "vocab.txt"))
        for split in SPLITS:
            path = root / "corpus" / f"{split}.jsonl"
            if not path.exists():
                raise DataError(f"missing corpus file {path}")
            rows = []
            for line in path.read_text(encoding="utf-8").splitlines():
                obj = json.loads(line)
                rows.append(CorpusSample(
                    id=obj["id"], split=obj["split"], lang=obj["lang"],
                    image=obj["image"], src=obj["src"], tgt=obj.get("tgt")))
            corpus.samples[split] = rows
        return corpus


def _caption_key(scene: Scene) -> tuple:
    """Attribute sequence in cell order; captions collide iff this does."""
    return tuple((o.color, o.shape) for o in scene.objects)


def _unique_scenes(rng: np.random.Generator, count: int) -> list[Scene]:
    """Held-out scenes deduplicated by caption so retrieval targets and
    references are unambiguous within a split."""
    scenes: list[Scene] = []
    seen: set[tuple] = set()
    while len(scenes) < count:
        scene = gen_scene(rng)
        key = _caption_key(scene)
        if key in seen:
            continue
        seen.add(key)
        scenes.append(scene)
    return scenes


def _dropout_words(words: list[str], p: float, rng: np.random.Generator) -> list[str]:
    if p == 0.0:
        return words
    kept = [w for w in words if rng.random() >= p]
    return kept if kept else [words[0]]


def build_corpus(spec: CorpusSpec, seed: int, out_root) -> Corpus:
    """Generate and write the full corpus; fully determined by the seed."""
    out_root = Path(out_root)
    (out_root / "corpus").mkdir(parents=True, exist_ok=True)
    (out_root / "images").mkdir(parents=True, exist_ok=True)
    languages = default_languages()
    high, lows, target = "hi", ["lo1", "lo2"], "tgt"
    vocab = Vocabulary.from_languages(languages)
    vocab.save(out_root / "vocab.txt")

    meta = {
        "high": high,
        "low": lows,
        "target": target,
        "languages": {
            tag: {"lexicon": lang.lexicon, "order_rule": lang.order_rule}
            for tag, lang in languages.items()
        },
    }
    (out_root / "languages.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    corpus = Corpus(root=out_root, languages=languages, high_lang=high,
                    low_langs=lows, target_lang=target, vocab=vocab)

    plan = {
        "train": [(high, spec.n_train_high)] + [(l, spec.n_train_low) for l in lows],
        "valid": [(lang, spec.n_valid) for lang in [high] + lows],
        "test": [(lang, spec.n_test) for lang in [high] + lows],
        "fewshot": [(lang, spec.n_fewshot) for lang in lows],
    }
    # parallel references: high-resource rows everywhere, low-resource rows
    # only where evaluation or finetuning needs them
    has_reference = {
        "train": {high}, "valid": {high},
        "test": {high, *lows}, "fewshot": set(lows),
    }

    for split, quotas in plan.items():
        rows: list[CorpusSample] = []
        for lang_tag, count in quotas:
            lang = languages[lang_tag]
            scene_rng = stream(seed, "scene", lang_tag, split)
            drop_rng = stream(seed, "worddrop", lang_tag, split)
            if split == "train":
                scenes = [gen_scene(scene_rng) for _ in range(count)]
            else:
                scenes = _unique_scenes(scene_rng, count)
            for i, scene in enumerate(scenes):
                sid = f"{lang_tag}-{split}-{i:05d}"
                image_rel = f"images/{sid}.ppm"
                write_ppm(out_root / image_rel, render_image_u8(scene))
                words = caption(scene, lang)
                if split == "train":
                    words = _dropout_words(words, spec.caption_dropout, drop_rng)
                tgt_text = None
                if lang_tag in has_reference[split]:
                    tgt_text = " ".join(caption(scene, languages[target]))
                rows.append(CorpusSample(
                    id=sid, split=split, lang=lang_tag, image=image_rel,
                    src=" ".join(words), tgt=tgt_text))
        corpus.samples[split] = rows
        write_jsonl(out_root / "corpus" / f"{split}.jsonl", rows)

    audit_pivot_coverage(corpus)
    return corpus


def write_jsonl(path, rows: list[CorpusSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            obj = {"id": row.id, "split": row.split, "lang": row.lang,
                   "image": row.image, "src": row.src}
            if row.tgt is not None:
                obj["tgt"] = row.tgt
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def audit_pivot_coverage(corpus: Corpus) -> None:
    """Zero-shot transfer needs every low-resource concept visible in both
    that language's training images and the high-resource training images."""
    def concepts_of(lang: str) -> set[str]:
        out: set[str] = set()
        for sample in corpus.by_lang("train", lang):
            scene = scene_from_image(read_ppm(corpus.root / sample.image))
            for obj in scene.objects:
                out.update((obj.color, obj.shape))
        return out

    high_concepts = concepts_of(corpus.high_lang)
    for lang in corpus.low_langs:
        missing = concepts_of(lang) - high_concepts
        if missing:
            raise DataError(
                f"concepts {sorted(missing)} of {lang} never occur in "
                f"high-resource training images")


# ----------------------------------------------------------------------
# image files
# ----------------------------------------------------------------------


def write_ppm(path, pixels_u8: np.ndarray) -> None:
    """Binary PPM (P6), maxval 255."""
    arr = np.asarray(pixels_u8, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DomainError("PPM wants (h, w, 3) uint8 pixels")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into float64 pixels in [0, 1]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise DataError(f"{path} is not a binary PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise DataError("only maxval 255 is supported")
    data = np.frombuffer(raw[pos:pos + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise DataError(f"{path} is truncated")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path, gray_u8: np.ndarray) -> None:
    """Binary PGM (P5), maxval 255, for attention heat maps."""
    arr = np.asarray(gray_u8, dtype=np.uint8)
    if arr.ndim != 2:
        raise DomainError("PGM wants (h, w) uint8 pixels")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
