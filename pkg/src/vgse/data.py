"""Corpus ingestion, character vocabulary, batching and the synthetic corpus.

File formats
------------
Captions (UTF-8 TSV)::

    CAPS v1 raw            <- or "CAPS v1 tokenized"
    <image_id>\t<caption_index>\t<text>

Image features (binary, little endian)::

    b"IFV1" | u32 feature_dim | u32 count | count x (u16 id_len | id | feature_dim x f32)

Splits (UTF-8 TSV)::

    <image_id>\t{train|dev|test}

STS pairs (UTF-8 TSV)::

    STS v1
    <score>\t<sentence_a>\t<sentence_b>

Inside STS sentences a literal tab is written as ``\\t`` and a backslash as ``\\\\``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DataValidationError, FormatError
from .seeding import sub_rng

PAD = 0
UNK = 1
MAX_CAPTION_CHARS = 512
SPLITS = ("train", "dev", "test")
IFV1_MAGIC = b"IFV1"


class Caption(NamedTuple):
    image_id: str
    index: int
    text: str


class StsPair(NamedTuple):
    sentence_a: str
    sentence_b: str
    score: float


@dataclass
class Corpus:
    images: dict[str, np.ndarray]
    captions: list[Caption]
    splits: dict[str, str]
    feature_dim: int
    # concept ids per image; only filled by the synthetic generator
    concepts: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def image_ids(self, split: str) -> list[str]:
        return [i for i in self.images if self.splits.get(i) == split]

    def split_captions(self, split: str) -> list[Caption]:
        return [c for c in self.captions if self.splits.get(c.image_id) == split]

    def validate(self) -> None:
        missing = sorted({c.image_id for c in self.captions if c.image_id not in self.images})
        if missing:
            raise DataValidationError(f"captions reference unknown image ids: {missing[:20]}")
        seen = set()
        dups = []
        for c in self.captions:
            key = (c.image_id, c.index)
            if key in seen:
                dups.append(key)
            seen.add(key)
        if dups:
            raise DataValidationError(f"duplicate (image_id, caption_index) entries: {dups[:20]}")
        for image_id, vec in self.images.items():
            if vec.shape != (self.feature_dim,):
                raise DataValidationError(
                    f"image {image_id!r} has {vec.shape[0]} features, expected {self.feature_dim}"
                )
        bad_split = sorted({s for s in self.splits.values() if s not in SPLITS})
        if bad_split:
            raise DataValidationError(f"unknown split names: {bad_split}")
        unassigned = sorted(i for i in self.images if i not in self.splits)
        if unassigned:
            raise DataValidationError(f"images without a split assignment: {unassigned[:20]}")
        for c in self.captions:
            if not c.text:
                raise DataValidationError(f"empty caption for {c.image_id!r}#{c.index}")
            if len(c.text) > MAX_CAPTION_CHARS:
                raise DataValidationError(
                    f"caption {c.image_id!r}#{c.index} has {len(c.text)} characters "
                    f"(limit {MAX_CAPTION_CHARS})"
                )


# -- captions ---------------------------------------------------------------


def join_tokens(tokens: Sequence[str]) -> str:
    """Rebuild a caption from a token stream: single spaces plus a final full stop."""
    return " ".join(tokens) + "."


def read_captions(path) -> list[Caption]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}: empty captions file")
    header = lines[0].strip().split()
    if len(header) != 3 or header[:2] != ["CAPS", "v1"] or header[2] not in ("raw", "tokenized"):
        raise FormatError(f"{path}: bad header {lines[0]!r}, expected 'CAPS v1 raw|tokenized'")
    tokenized = header[2] == "tokenized"
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        image_id, idx, text = parts
        try:
            index = int(idx)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: caption index {idx!r} is not an integer") from None
        if tokenized:
            text = join_tokens(text.split())
        out.append(Caption(image_id, index, text))
    return out


def write_captions(path, captions: Sequence[Caption]) -> None:
    rows = ["CAPS v1 raw"]
    for c in captions:
        if "\t" in c.text or "\n" in c.text:
            raise FormatError(f"caption {c.image_id!r}#{c.index} contains a tab or newline")
        rows.append(f"{c.image_id}\t{c.index}\t{c.text}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


# -- image features (IFV1) ----------------------------------------------------------


def write_features(path, ids: Sequence[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise FormatError(f"expected {len(ids)} feature rows, got array of shape {vectors.shape}")
    dim = vectors.shape[1]
    chunks = [IFV1_MAGIC, struct.pack("<II", dim, len(ids))]
    payload = vectors.astype("<f4")
    for image_id, row in zip(ids, payload):
        raw = image_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"id {image_id[:40]!r}... is too long")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(row.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_features(path) -> tuple[list[str], np.ndarray]:
    """Read an IFV1 file; vectors come back as float64."""
    blob = Path(path).read_bytes()
    if blob[:4] != IFV1_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {IFV1_MAGIC!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    dim, count = struct.unpack_from("<II", blob, 4)
    pos = 12
    ids = []
    vecs = np.empty((count, dim), dtype=np.float64)
    row_bytes = 4 * dim
    for k in range(count):
        if pos + 2 > len(blob):
            raise FormatError(f"{path}: truncated at record {k}")
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + n + row_bytes > len(blob):
            raise FormatError(f"{path}: truncated at record {k}")
        try:
            ids.append(blob[pos : pos + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: record {k} id is not UTF-8") from exc
        pos += n
        vecs[k] = np.frombuffer(blob, dtype="<f4", count=dim, offset=pos)
        pos += row_bytes
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes after {count} records")
    return ids, vecs


# -- splits ------------------------------------------------------------------


def read_splits(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise FormatError(f"{path}:{lineno}: expected '<image_id>\\t{{train|dev|test}}'")
        image_id, split = parts
        if image_id in out and out[image_id] != split:
            raise DataValidationError(f"image {image_id!r} assigned to both {out[image_id]} and {split}")
        out[image_id] = split
    return out


def write_splits(path, splits: dict[str, str]) -> None:
    Path(path).write_text("".join(f"{i}\t{s}\n" for i, s in splits.items()), encoding="utf-8")


def load_corpus(captions_path, features_path, splits_path) -> Corpus:
    captions = read_captions(captions_path)
    ids, vecs = read_features(features_path)
    if len(set(ids)) != len(ids):
        raise DataValidationError(f"{features_path}: duplicate image ids")
    corpus = Corpus(
        images={i: v for i, v in zip(ids, vecs)},
        captions=captions,
        splits=read_splits(splits_path),
        feature_dim=vecs.shape[1],
    )
    corpus.validate()
    return corpus


def save_corpus(corpus: Corpus, captions_path, features_path, splits_path) -> None:
    ids = list(corpus.images)
    write_captions(captions_path, corpus.captions)
    write_features(features_path, ids, np.stack([corpus.images[i] for i in ids]))
    write_splits(splits_path, {i: corpus.splits[i] for i in ids})


# -- STS pairs ------------------------------------------------------------------


def _unescape(field_text: str) -> str:
    out = []
    it = iter(field_text)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(it, "")
        out.append({"t": "\t", "\\": "\\"}.get(nxt, "\\" + nxt))
    return "".join(out)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t")


def load_sts_pairs(path) -> list[StsPair]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "STS v1":
        raise FormatError(f"{path}: missing 'STS v1' header")
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            score = float(parts[0])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: score {parts[0]!r} is not a number") from None
        if not 0.0 <= score <= 5.0:
            raise DataValidationError(f"{path}:{lineno}: score {score} outside [0, 5]")
        pairs.append(StsPair(_unescape(parts[1]), _unescape(parts[2]), score))
    return pairs


def save_sts_pairs(path, pairs: Sequence[StsPair]) -> None:
    rows = ["STS v1"]
    rows += [f"{p.score!r}\t{_escape(p.sentence_a)}\t{_escape(p.sentence_b)}" for p in pairs]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


# -- vocabulary and batching --------------------------------------------------------


class Vocab:
    """Character to id map with reserved PAD (0) and UNK (1)."""

    def __init__(self, chars: Sequence[str]):
        chars = sorted(set(chars))
        self.chars: list[str] = chars
        self.index = {c: i + 2 for i, c in enumerate(chars)}

    def __len__(self) -> int:
        return len(self.chars) + 2

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.chars == other.chars

    def encode(self, text: str) -> list[int]:
        if not text:
            raise DataValidationError("cannot encode an empty sentence")
        if len(text) > MAX_CAPTION_CHARS:
            raise DataValidationError(f"sentence of {len(text)} characters exceeds {MAX_CAPTION_CHARS}")
        return [self.index.get(c, UNK) for c in text]

    def to_list(self) -> list[str]:
        return list(self.chars)

    @classmethod
    def from_list(cls, chars: Sequence[str]) -> "Vocab":
        return cls(chars)


def build_vocab(corpus: Corpus) -> Vocab:
    train = corpus.split_captions("train")
    if not train:
        raise DataValidationError("training split has no captions")
    return Vocab({ch for c in train for ch in c.text})


@dataclass
class Batch:
    char_ids: np.ndarray  # (B, T) int64, PAD beyond each length
    lengths: np.ndarray  # (B,) int64
    image_features: Optional[np.ndarray]  # (B, feature_dim) or None for text-only batches
    identity: list[tuple[str, int]]

    def __len__(self) -> int:
        return len(self.lengths)


def pad_batch(id_rows: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(r) for r in id_rows], dtype=np.int64)
    ids = np.full((len(id_rows), int(lengths.max())), PAD, dtype=np.int64)
    for k, row in enumerate(id_rows):
        ids[k, : len(row)] = row
    return ids, lengths


def text_batch(texts: Sequence[str], vocab: Vocab) -> Batch:
    ids, lengths = pad_batch([vocab.encode(t) for t in texts])
    return Batch(ids, lengths, None, [("", k) for k in range(len(texts))])


def make_batches(
    corpus: Corpus,
    split: str,
    vocab: Vocab,
    batch_size: int,
    epoch_seed: Optional[int],
    training: bool = True,
) -> Iterator[Batch]:
    """Yield caption batches with each row paired to its own image's features.

    ``epoch_seed=None`` keeps corpus order; otherwise captions are shuffled by
    a generator seeded with ``epoch_seed``.
    """
    if training and batch_size < 2:
        raise ValueError("training batches need batch_size >= 2 for in-batch negatives")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    caps = corpus.split_captions(split)
    if not caps:
        raise DataValidationError(f"split {split!r} has no captions")
    order = np.arange(len(caps))
    if epoch_seed is not None:
        order = np.random.default_rng(epoch_seed).permutation(len(caps))
    for start in range(0, len(caps), batch_size):
        chunk = [caps[k] for k in order[start : start + batch_size]]
        ids, lengths = pad_batch([vocab.encode(c.text) for c in chunk])
        feats = np.stack([corpus.images[c.image_id] for c in chunk])
        yield Batch(ids, lengths, feats, [(c.image_id, c.index) for c in chunk])


# -- synthetic corpus ---------------------------------------------------------------

_CONCEPT_WORDS = [
    ("dog", "hound"), ("cat", "kitty"), ("horse", "pony"), ("bird", "sparrow"),
    ("car", "sedan"), ("bike", "bicycle"), ("boat", "canoe"), ("tree", "oak"),
    ("ball", "sphere"), ("man", "guy"), ("woman", "lady"), ("child", "kid"),
    ("beach", "shore"), ("snow", "frost"), ("grass", "lawn"), ("rock", "stone"),
    ("river", "stream"), ("house", "cabin"), ("bench", "seat"), ("hat", "cap"),
    ("kite", "glider"), ("fence", "railing"), ("road", "street"), ("flower", "blossom"),
    ("mountain", "peak"), ("bridge", "overpass"), ("umbrella", "parasol"), ("train", "tram"),
    ("table", "desk"), ("guitar", "banjo"), ("frisbee", "disc"), ("tent", "shelter"),
]
_SYLLABLES = ["ka", "lo", "mi", "ru", "te", "zo", "ne", "pa", "vi", "su", "do", "fe"]
_ADJECTIVES = ["small", "big", "old", "red", "shiny", "young"]
_TEMPLATES = [
    "a photo of {}.",
    "there is {} in the picture.",
    "this image shows {}.",
    "{} can be seen here.",
    "we see {}.",
]


def concept_words(vocab_concepts: int) -> list[tuple[str, str]]:
    """Surface forms for each concept; made-up words past the built-in list."""
    words = list(_CONCEPT_WORDS[:vocab_concepts])
    k = 0
    while len(words) < vocab_concepts:
        a, b, c = (_SYLLABLES[(k // len(_SYLLABLES) ** p) % len(_SYLLABLES)] for p in range(3))
        words.append((a + b + c, c + b + a + "n"))
        k += 1
    return words


def synthetic_sentence(concepts: Sequence[int], words: Sequence[tuple[str, str]], rng) -> str:
    """Templated description naming each concept once, order and synonyms drawn from ``rng``."""
    order = rng.permutation(len(concepts))
    phrases = []
    for k in order:
        noun = words[concepts[k]][rng.integers(2)]
        if rng.random() < 0.3:
            noun = f"{_ADJECTIVES[rng.integers(len(_ADJECTIVES))]} {noun}"
        phrases.append(f"a {noun}")
    listing = phrases[0] if len(phrases) == 1 else ", ".join(phrases[:-1]) + " and " + phrases[-1]
    text = _TEMPLATES[rng.integers(len(_TEMPLATES))].format(listing)
    return text[0].upper() + text[1:]


def concept_basis(vocab_concepts: int, feature_dim: int, seed: int) -> np.ndarray:
    """Unit basis vector per concept; orthonormal whenever vocab_concepts <= feature_dim."""
    rng = sub_rng(seed, "basis")
    raw = rng.standard_normal((feature_dim, vocab_concepts))
    if vocab_concepts <= feature_dim:
        q, _ = np.linalg.qr(raw)
        return q.T.copy()
    return (raw / np.linalg.norm(raw, axis=0)).T.copy()


def gen_synthetic(
    n_images: int,
    concepts_per_image: int,
    vocab_concepts: int,
    feature_dim: int,
    noise_sigma: float,
    seed: int,
    dev_images: int = 0,
    test_images: int = 0,
    captions_per_image: int = 5,
) -> Corpus:
    """Generate a corpus where image features are noisy sums of concept vectors.

    ``n_images`` counts all images; the last ``dev_images + test_images`` of
    them go to the dev and test splits.
    """
    if min(n_images, concepts_per_image, vocab_concepts, feature_dim, captions_per_image) < 1:
        raise ValueError("counts must be positive")
    if vocab_concepts < concepts_per_image:
        raise ValueError("vocab_concepts must be >= concepts_per_image")
    if dev_images < 0 or test_images < 0 or dev_images + test_images >= n_images:
        raise ValueError("dev_images + test_images must leave at least one training image")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    words = concept_words(vocab_concepts)
    basis = concept_basis(vocab_concepts, feature_dim, seed)
    pick = sub_rng(seed, "images")
    noise = sub_rng(seed, "noise")
    text_rng = sub_rng(seed, "captions")
    n_train = n_images - dev_images - test_images
    width = len(str(n_images - 1))

    images, captions, splits, concepts = {}, [], {}, {}
    for k in range(n_images):
        image_id = f"img{k:0{width}d}"
        chosen = tuple(int(c) for c in np.sort(pick.choice(vocab_concepts, concepts_per_image, replace=False)))
        images[image_id] = basis[list(chosen)].sum(axis=0) + noise.normal(0.0, noise_sigma, feature_dim)
        concepts[image_id] = chosen
        splits[image_id] = "train" if k < n_train else ("dev" if k < n_train + dev_images else "test")
        for j in range(1, captions_per_image + 1):
            captions.append(Caption(image_id, j, synthetic_sentence(chosen, words, text_rng)))
    corpus = Corpus(images, captions, splits, feature_dim, concepts)
    corpus.validate()
    return corpus


def gen_synthetic_sts(
    n_pairs: int, concepts_per_image: int, vocab_concepts: int, seed: int
) -> list[StsPair]:
    """Sentence pairs scored ``5 * shared / concepts_per_image``.

    The number of shared concepts is drawn uniformly from 0..concepts_per_image.
    """
    if vocab_concepts < 2 * concepts_per_image:
        raise ValueError("need vocab_concepts >= 2 * concepts_per_image for disjoint pairs")
    words = concept_words(vocab_concepts)
    rng = sub_rng(seed, "sts")
    pairs = []
    for _ in range(n_pairs):
        k = concepts_per_image
        shared = int(rng.integers(k + 1))
        pool = rng.permutation(vocab_concepts)
        a = [int(c) for c in pool[:k]]
        b = a[:shared] + [int(c) for c in pool[k : 2 * k - shared]]
        pairs.append(
            StsPair(synthetic_sentence(a, words, rng), synthetic_sentence(b, words, rng), 5.0 * shared / k)
        )
    return pairs
