"""Inference-side wrappers: a trained encoder bundled with its vocabulary."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch, Vocab, text_batch
from .nn import EncoderConfig, EncoderParams, check_params, encode_caption, encode_image

EVAL_CHUNK = 256


@dataclass
class Encoder:
    config: EncoderConfig
    params: EncoderParams
    vocab: Vocab

    def __post_init__(self):
        check_params(self.params, self.config)
        if len(self.vocab) != self.config.char_vocab_size:
            raise ValueError(
                f"vocabulary has {len(self.vocab)} entries but config expects {self.config.char_vocab_size}"
            )

    def embed_batch(self, batch: Batch) -> np.ndarray:
        with T.no_grad():
            return encode_caption(batch, self.params, self.config).data

    def encode_captions(self, texts: Sequence[str], chunk: int = EVAL_CHUNK) -> np.ndarray:
        out = [self.embed_batch(text_batch(texts[s : s + chunk], self.vocab)) for s in range(0, len(texts), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.config.embed_dim))

    def encode_images(self, features: np.ndarray, chunk: int = EVAL_CHUNK) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        with T.no_grad():
            out = [encode_image(features[s : s + chunk], self.params, self.config).data for s in range(0, len(features), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.config.embed_dim))


def combine_embeddings(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of unit-norm embeddings, re-normalized row-wise.

    Members are sorted per element before summing so the result does not
    depend on member order.
    """
    stacked = np.sort(np.stack(embeddings), axis=0)
    mean = stacked.sum(axis=0) / len(embeddings)
    norms = np.sqrt((mean * mean).sum(axis=1, keepdims=True))
    return mean / np.maximum(norms, T.NORM_EPS)


class Ensemble:
    """Several encoders sharing one config and vocabulary, averaged in embedding space."""

    def __init__(self, members: Sequence[Encoder]):
        if not members:
            raise ValueError("an ensemble needs at least one member")
        first = members[0]
        for m in members[1:]:
            if m.config != first.config:
                raise ValueError("ensemble members have different encoder configs")
            if m.vocab != first.vocab:
                raise ValueError("ensemble members have different vocabularies")
        self.members = list(members)
        self.config = first.config
        self.vocab = first.vocab

    def embed_batch(self, batch: Batch) -> np.ndarray:
        return combine_embeddings([m.embed_batch(batch) for m in self.members])

    def encode_captions(self, texts: Sequence[str]) -> np.ndarray:
        return combine_embeddings([m.encode_captions(texts) for m in self.members])

    def encode_images(self, features: np.ndarray) -> np.ndarray:
        return combine_embeddings([m.encode_images(features) for m in self.members])
