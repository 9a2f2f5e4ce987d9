"""Base multiclass model: hashed-feature softmax classifier over LLT codes.

Stands in for a fine-tuned transformer encoder behind the same contract: text
in, probability distribution over a frozen label index out, with top-n
candidate extraction for the re-ranking stage.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from xtars.features import FeaturizeError, FeaturizerConfig, HashingFeaturizer
from xtars.optim import LazyAdam, softmax, softmax_xent_batch

MODEL_FORMAT_VERSION = 1


class ClassifierError(ValueError):
    pass


@dataclass(frozen=True)
class LabelIndex:
    """Frozen bijection llt_code <-> dense class index."""

    codes: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.codes)) != len(self.codes):
            raise ClassifierError("label codes are not unique")

    @classmethod
    def from_codes(cls, codes) -> "LabelIndex":
        return cls(codes=tuple(sorted(set(codes))))

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.codes)}

    def encode(self, labels) -> np.ndarray:
        index = self.index
        try:
            return np.asarray([index[c] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise ClassifierError(f"label {exc.args[0]!r} not in label index") from None


def top_n(dist: np.ndarray, label_index: LabelIndex, n: int) -> list[tuple[str, float]]:
    """Top-n (code, probability) pairs; ties broken by ascending code."""
    k = len(label_index)
    if not 1 <= n <= k:
        raise ClassifierError(f"n={n} out of range [1, {k}]")
    codes = np.asarray(label_index.codes)
    order = np.lexsort((codes, -np.asarray(dist, dtype=np.float64)))[:n]
    return [(str(codes[i]), float(dist[i])) for i in order]


class SoftmaxTextClassifier(BaseEstimator):
    """Mini-batch Adam-trained softmax classifier over hashed text features.

    Deterministic for a fixed seed; the returned model is the epoch checkpoint
    with the highest validation accuracy.
    """

    def __init__(
        self,
        n_features: int = 2**18,
        char_ngrams: tuple[int, ...] = (2, 3, 4),
        use_word_unigrams: bool = True,
        hash_seed: int = 0,
        n_epochs: int = 30,
        batch_size: int = 64,
        learning_rate: float = 0.05,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        seed: int = 0,
        classes=None,
    ):
        self.n_features = n_features
        self.char_ngrams = char_ngrams
        self.use_word_unigrams = use_word_unigrams
        self.hash_seed = hash_seed
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.seed = seed
        self.classes = classes

    # -- helpers -----------------------------------------------------------

    def _featurizer_config(self) -> FeaturizerConfig:
        return FeaturizerConfig(
            n_features=self.n_features,
            char_ngrams=tuple(self.char_ngrams),
            use_word_unigrams=self.use_word_unigrams,
            hash_seed=self.hash_seed,
        )

    @property
    def featurizer_(self) -> HashingFeaturizer:
        if not hasattr(self, "_featurizer"):
            self._featurizer = HashingFeaturizer(self._featurizer_config())
        return self._featurizer

    def _check_fitted(self):
        if not hasattr(self, "coef_"):
            raise ClassifierError("classifier is not fitted")

    # -- training ----------------------------------------------------------

    def fit(self, texts, labels, validation=None):
        """Fit on (texts, labels); validation=(texts, labels) drives checkpoint
        selection. With no validation data the final epoch is kept."""
        texts = list(texts)
        labels = list(labels)
        if not texts:
            raise ClassifierError("training set is empty")
        if len(texts) != len(labels):
            raise ClassifierError("texts and labels length mismatch")
        val_texts, val_labels = (list(validation[0]), list(validation[1])) if validation else ([], [])

        if self.classes is not None:
            self.label_index_ = LabelIndex.from_codes(self.classes)
        else:
            self.label_index_ = LabelIndex.from_codes(labels + val_labels)
        y = self.label_index_.encode(labels)
        y_val = self.label_index_.encode(val_labels)

        X = self.featurizer_.transform(texts)
        X_val = self.featurizer_.transform(val_texts) if val_texts else None

        k = len(self.label_index_)
        coef = np.zeros((self.n_features, k), dtype=np.float32)
        opt = LazyAdam(
            coef.shape, lr=self.learning_rate, beta1=self.beta1,
            beta2=self.beta2, eps=self.eps,
        )
        rng = np.random.default_rng(self.seed)

        best_acc = -1.0
        best_coef = None
        best_epoch = 0
        n = len(texts)
        for epoch in range(1, self.n_epochs + 1):
            perm = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                batch = perm[start : start + self.batch_size]
                _, cols, grad_cols = softmax_xent_batch(coef, X[batch], y[batch])
                opt.step(coef, cols, grad_cols)
            if X_val is not None:
                pred = np.argmax(X_val @ coef, axis=1)
                acc = float(np.mean(pred == y_val))
                if acc > best_acc:
                    best_acc = acc
                    best_coef = coef.copy()
                    best_epoch = epoch
        if best_coef is None:
            best_coef, best_epoch, best_acc = coef, self.n_epochs, float("nan")
        self.coef_ = best_coef
        self.selected_epoch_ = best_epoch
        self.validation_accuracy_ = best_acc
        return self

    # -- prediction --------------------------------------------------------

    def predict_proba(self, texts) -> np.ndarray:
        self._check_fitted()
        X = self.featurizer_.transform(list(texts))
        logits = np.asarray(X @ self.coef_, dtype=np.float64)
        return softmax(logits, axis=1)

    def predict_distribution(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise FeaturizeError("cannot predict for empty text")
        return self.predict_proba([text])[0]

    def predict(self, texts) -> list[str]:
        probs = self.predict_proba(texts)
        return [top_n(row, self.label_index_, 1)[0][0] for row in probs]

    def top_candidates(self, text: str, n: int) -> list[tuple[str, float]]:
        return top_n(self.predict_distribution(text), self.label_index_, n)

    # -- persistence -------------------------------------------------------

    def save(self, model_dir) -> None:
        self._check_fitted()
        out = Path(model_dir)
        out.mkdir(parents=True, exist_ok=True)
        weights = _pack_weights(self.coef_)
        (out / "weights.bin").write_bytes(weights)
        labels_csv = _labels_csv(self.label_index_)
        (out / "labels.csv").write_text(labels_csv, encoding="utf-8")
        manifest = {
            "format_version": MODEL_FORMAT_VERSION,
            "model_type": "softmax_classifier",
            "featurizer": self._featurizer_config().to_dict(),
            "hparams": {
                "n_epochs": self.n_epochs,
                "batch_size": self.batch_size,
                "learning_rate": self.learning_rate,
                "beta1": self.beta1,
                "beta2": self.beta2,
                "eps": self.eps,
            },
            "seed": self.seed,
            "selected_epoch": self.selected_epoch_,
            "validation_accuracy": self.validation_accuracy_,
            "n_classes": len(self.label_index_),
            "sha256": {
                "weights.bin": hashlib.sha256(weights).hexdigest(),
                "labels.csv": hashlib.sha256(labels_csv.encode("utf-8")).hexdigest(),
            },
        }
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, model_dir) -> "SoftmaxTextClassifier":
        d = Path(model_dir)
        with open(d / "manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        weights = (d / "weights.bin").read_bytes()
        labels_csv = (d / "labels.csv").read_text(encoding="utf-8")
        _verify_hashes(manifest, {"weights.bin": weights, "labels.csv": labels_csv.encode("utf-8")})
        feat = FeaturizerConfig.from_dict(manifest["featurizer"])
        hp = manifest["hparams"]
        model = cls(
            n_features=feat.n_features,
            char_ngrams=feat.char_ngrams,
            use_word_unigrams=feat.use_word_unigrams,
            hash_seed=feat.hash_seed,
            seed=manifest["seed"],
            **hp,
        )
        coef_kd = _unpack_weights(weights)
        model.coef_ = np.ascontiguousarray(coef_kd.T)
        model.label_index_ = _labels_from_csv(labels_csv)
        if len(model.label_index_) != coef_kd.shape[0]:
            raise ClassifierError("labels.csv row count does not match weight matrix")
        if model.n_features != coef_kd.shape[1]:
            raise ClassifierError("featurizer n_features does not match weight matrix")
        model.selected_epoch_ = manifest["selected_epoch"]
        model.validation_accuracy_ = manifest["validation_accuracy"]
        return model


def _pack_weights(coef: np.ndarray) -> bytes:
    # on disk: K and D as little-endian int64, then float32 row-major K x D
    kd = np.ascontiguousarray(coef.T, dtype="<f4")
    header = struct.pack("<qq", kd.shape[0], kd.shape[1])
    return header + kd.tobytes()


def _unpack_weights(blob: bytes) -> np.ndarray:
    k, d = struct.unpack_from("<qq", blob)
    arr = np.frombuffer(blob, dtype="<f4", offset=16)
    if arr.size != k * d:
        raise ClassifierError("weights.bin size does not match its header")
    return arr.reshape(k, d)


def _labels_csv(label_index: LabelIndex) -> str:
    lines = ["index,llt_code"]
    lines += [f"{i},{code}" for i, code in enumerate(label_index.codes)]
    return "\n".join(lines) + "\n"


def _labels_from_csv(text: str) -> LabelIndex:
    reader = csv.DictReader(text.splitlines())
    rows = sorted(reader, key=lambda r: int(r["index"]))
    return LabelIndex(codes=tuple(r["llt_code"] for r in rows))


def _verify_hashes(manifest: dict, blobs: dict[str, bytes]) -> None:
    for name, blob in blobs.items():
        expected = manifest.get("sha256", {}).get(name)
        actual = hashlib.sha256(blob).hexdigest()
        if expected != actual:
            raise ClassifierError(f"hash mismatch for {name}: model bundle is corrupt")


def train_classifier(train_records, validation_records, hparams: dict | None = None,
                     seed: int = 0, classes=None) -> SoftmaxTextClassifier:
    """Record-level wrapper around SoftmaxTextClassifier.fit."""
    hparams = hparams or {}
    model = SoftmaxTextClassifier(seed=seed, classes=classes, **hparams)
    validation = None
    if validation_records:
        validation = ([r.rt for r in validation_records], [r.llt_code for r in validation_records])
    model.fit([r.rt for r in train_records], [r.llt_code for r in train_records], validation)
    return model
