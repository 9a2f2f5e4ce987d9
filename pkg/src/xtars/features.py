"""Hashed character n-gram + word unigram features.

Signed feature hashing over a fixed-size space stands in for a learned text
encoder: deterministic, vocabulary-free, and robust to misspellings because
most character n-grams of a typo'd word survive.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import scipy.sparse as sp
from sklearn.utils.murmurhash import murmurhash3_32


class FeaturizeError(ValueError):
    pass


@dataclass(frozen=True)
class FeaturizerConfig:
    n_features: int = 2**18
    char_ngrams: tuple[int, ...] = (2, 3, 4)
    use_word_unigrams: bool = True
    hash_seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["char_ngrams"] = list(self.char_ngrams)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturizerConfig":
        d = dict(d)
        d["char_ngrams"] = tuple(d.get("char_ngrams", (2, 3, 4)))
        return cls(**d)


def tokenize(text: str, config: FeaturizerConfig) -> list[str]:
    """Feature tokens of a text: prefixed char n-grams of the space-padded
    lowercase string, plus word unigrams."""
    text = text.strip().lower()
    padded = f" {text} "
    tokens = []
    for n in config.char_ngrams:
        prefix = f"c{n}|"
        tokens.extend(prefix + padded[i : i + n] for i in range(len(padded) - n + 1))
    if config.use_word_unigrams:
        tokens.extend("w|" + w for w in text.split())
    return tokens


class HashingFeaturizer:
    """Maps texts to L2-normalized sparse count vectors via signed hashing."""

    def __init__(self, config: FeaturizerConfig | None = None):
        self.config = config or FeaturizerConfig()
        self._token_cache: dict[str, tuple[int, float]] = {}

    def _hash(self, token: str) -> tuple[int, float]:
        cached = self._token_cache.get(token)
        if cached is None:
            h = murmurhash3_32(token, seed=self.config.hash_seed, positive=True)
            sign = -1.0 if h & 0x80000000 else 1.0
            cached = (h % self.config.n_features, sign)
            self._token_cache[token] = cached
        return cached

    def weights_for(self, tokens: list[str]) -> dict[int, float]:
        weights: dict[int, float] = {}
        for token in tokens:
            idx, sign = self._hash(token)
            weights[idx] = weights.get(idx, 0.0) + sign
        return weights

    def transform(self, texts) -> sp.csr_matrix:
        """Featurize a batch of texts into a CSR matrix with unit-norm rows."""
        indptr = [0]
        indices: list[int] = []
        data: list[float] = []
        for text in texts:
            if not text or not text.strip():
                raise FeaturizeError("cannot featurize empty text")
            weights = self.weights_for(tokenize(text, self.config))
            norm = float(np.sqrt(sum(v * v for v in weights.values())))
            if norm == 0.0:
                # all-signed collisions cancelled; fall back to a tiny uniform row
                raise FeaturizeError(f"text {text!r} produced an all-zero feature vector")
            for idx in sorted(weights):
                indices.append(idx)
                data.append(weights[idx] / norm)
            indptr.append(len(indices))
        return sp.csr_matrix(
            (
                np.asarray(data, dtype=np.float32),
                np.asarray(indices, dtype=np.int64),
                np.asarray(indptr, dtype=np.int64),
            ),
            shape=(len(indptr) - 1, self.config.n_features),
        )

    def transform_one(self, text: str) -> sp.csr_matrix:
        return self.transform([text])
