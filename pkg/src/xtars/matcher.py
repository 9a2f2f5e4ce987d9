"""Binary (reported term, label name) matcher with hard-negative sampling.

Negatives come from two strategies used jointly: the base classifier's top-5
predictions, and cosine-similar labels drawn from a temperature-scaled
softmax over only the top-k most similar labels. At prediction time the
matcher re-scores just the classifier's top-n candidates.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from xtars.classifier import ClassifierError, top_n
from xtars.features import FeaturizerConfig, HashingFeaturizer, tokenize
from xtars.optim import LazyAdam, ScalarAdam, logistic_batch, sigmoid
from xtars.rngs import derive_rng

MATCHER_FORMAT_VERSION = 1


class MatcherError(ValueError):
    pass


# ---------------------------------------------------------------------------
# label embeddings and similarity


class LabelEmbeddings:
    """Unit-norm hashed feature vectors of every label name."""

    def __init__(self, codes, names: dict[str, str], matrix: sp.csr_matrix):
        self.codes = tuple(codes)
        self.names = dict(names)
        self.matrix = matrix
        self._pos = {c: i for i, c in enumerate(self.codes)}
        self._sim_cache: dict[str, np.ndarray] = {}

    @classmethod
    def from_ontology(cls, ontology, featurizer: HashingFeaturizer) -> "LabelEmbeddings":
        codes = sorted(ontology.codes())
        names = {c: ontology.name_of(c) for c in codes}
        matrix = featurizer.transform([names[c] for c in codes])
        return cls(codes, names, matrix)

    def __len__(self) -> int:
        return len(self.codes)

    def name_of(self, code: str) -> str:
        try:
            return self.names[code]
        except KeyError:
            raise MatcherError(f"label code {code!r} has no embedding") from None

    def _similarities_all(self, code: str) -> np.ndarray:
        sims = self._sim_cache.get(code)
        if sims is None:
            if code not in self._pos:
                raise MatcherError(f"label code {code!r} has no embedding")
            row = self.matrix[self._pos[code]]
            sims = np.asarray((self.matrix @ row.T).todense(), dtype=np.float64).ravel()
            self._sim_cache[code] = sims
        return sims


def label_similarities(gold: str, embeddings: LabelEmbeddings):
    """Cosine similarity of every label to the gold label, gold excluded.

    Returns (codes, sims) aligned arrays.
    """
    sims = embeddings._similarities_all(gold)
    gi = embeddings._pos[gold]
    mask = np.ones(len(sims), dtype=bool)
    mask[gi] = False
    codes = np.asarray(embeddings.codes)[mask]
    return codes, sims[mask]


# ---------------------------------------------------------------------------
# negative sampling


@dataclass(frozen=True)
class SamplerConfig:
    """Negative-sampling and candidate-limiting configuration."""

    neg: int = 5
    k_multiplier: int = 3
    temperature: float = 0.01
    use_clf_top: bool = True
    n_candidates: int = 5
    cos_sampler: str = "xtars"  # "xtars" (top-k softmax) or "tars" (proportional)

    def __post_init__(self):
        if self.neg < 0:
            raise MatcherError("neg must be >= 0")
        if self.temperature <= 0:
            raise MatcherError("temperature must be > 0")
        if self.k_multiplier < 1:
            raise MatcherError("k_multiplier must be >= 1")
        if self.cos_sampler not in ("xtars", "tars"):
            raise MatcherError(f"unknown cos_sampler {self.cos_sampler!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**d)


def _draw_without_replacement(codes, probs, size, rng, n_draws=None):
    """Sample ``size`` distinct labels, sequentially with renormalization.

    Implemented via Gumbel perturbation of log-probabilities, which draws the
    same distribution as iterative renormalized sampling and vectorizes over
    ``n_draws`` independent repetitions. Zero-probability labels are never
    drawn. Returns a list of codes (or a list of lists when n_draws is set).
    """
    single = n_draws is None
    reps = 1 if single else n_draws
    probs = np.asarray(probs, dtype=np.float64)
    positive = probs > 0.0
    n_avail = int(positive.sum())
    take = min(size, n_avail)
    logp = np.full(len(probs), -np.inf)
    logp[positive] = np.log(probs[positive])
    keys = logp[None, :] + rng.gumbel(size=(reps, len(probs)))
    order = np.argsort(-keys, axis=1)[:, :take]
    out = [[codes[j] for j in row] for row in order.tolist()]
    return out[0] if single else out


def sample_negatives_tars(gold: str, embeddings: LabelEmbeddings, neg: int,
                          rng: np.random.Generator, n_draws: Optional[int] = None):
    """Baseline sampler: probability proportional to cosine similarity.

    Negative similarities are clamped to zero; if every similarity is zero the
    draw is uniform. Fewer than ``neg`` other labels degenerates to all of
    them. ``n_draws`` vectorizes repeated draws.
    """
    codes, sims = label_similarities(gold, embeddings)
    if len(codes) <= neg:
        result = sorted(codes.tolist())
        return result if n_draws is None else [list(result) for _ in range(n_draws)]
    weights = np.clip(sims, 0.0, None)
    total = weights.sum()
    probs = weights / total if total > 0 else np.full(len(codes), 1.0 / len(codes))
    return _draw_without_replacement(codes.tolist(), probs, neg, rng, n_draws=n_draws)


def topk_softmax_distribution(gold: str, embeddings: LabelEmbeddings, cfg: SamplerConfig):
    """Analytic sampling distribution of the top-k temperature-softmax sampler.

    Returns (codes_k, probs) over exactly the k most similar labels (ties by
    ascending code); all other labels have probability exactly zero.
    """
    codes, sims = label_similarities(gold, embeddings)
    k = min(cfg.k_multiplier * cfg.neg, len(codes))
    if k == 0:
        return [], np.empty(0)
    order = np.lexsort((codes, -sims))[:k]
    codes_k = codes[order].tolist()
    scaled = sims[order] / cfg.temperature
    scaled -= scaled.max()
    e = np.exp(scaled)
    return codes_k, e / e.sum()


def sample_negatives_xtars(gold: str, embeddings: LabelEmbeddings, cfg: SamplerConfig,
                           rng: np.random.Generator, n_draws: Optional[int] = None):
    """Hard-negative sampler: keep top-k similar labels, softmax(sim/T), draw
    ``cfg.neg`` without replacement. ``n_draws`` vectorizes repeated draws."""
    if cfg.neg == 0:
        return [] if n_draws is None else [[] for _ in range(n_draws)]
    codes, sims = label_similarities(gold, embeddings)
    if len(codes) <= cfg.neg:
        result = sorted(codes.tolist())
        return result if n_draws is None else [list(result) for _ in range(n_draws)]
    codes_k, probs = topk_softmax_distribution(gold, embeddings, cfg)
    return _draw_without_replacement(codes_k, probs, cfg.neg, rng, n_draws=n_draws)


def classifier_hard_negatives(scorer, rt: str, gold: str) -> list[str]:
    """The scorer's top-5 classes minus the gold label (so 4 or 5 labels)."""
    k = len(scorer.label_index_)
    if k < 2:
        raise MatcherError("need at least 2 classes for classifier negatives")
    candidates = top_n(scorer.predict_distribution(rt), scorer.label_index_, min(5, k))
    return [code for code, _ in candidates if code != gold]


# ---------------------------------------------------------------------------
# match examples


@dataclass(frozen=True)
class MatchExample:
    rt: str
    label_name: str
    is_match: bool
    strategy: str  # positive | cos_tars | cos_xtars | clf_top
    record_id: str = ""


def build_match_training_set(records, scorer, embeddings: LabelEmbeddings,
                             cfg: SamplerConfig, seed: int = 0,
                             _proba_cache: Optional[dict] = None) -> list[MatchExample]:
    """One positive plus deduplicated hard negatives per record.

    Classifier-top negatives come first, then cosine negatives; duplicates and
    the gold label are dropped. Per-record RNG streams keep the output
    independent of processing order.
    """
    examples: list[MatchExample] = []
    cos_tag = "cos_xtars" if cfg.cos_sampler == "xtars" else "cos_tars"
    for rec in records:
        gold_name = embeddings.name_of(rec.llt_code)
        examples.append(MatchExample(rec.rt, gold_name, True, "positive", rec.id))
        negatives: list[tuple[str, str]] = []
        if cfg.use_clf_top and scorer is not None:
            if _proba_cache is not None and rec.rt in _proba_cache:
                hard = _proba_cache[rec.rt]
            else:
                hard = classifier_hard_negatives(scorer, rec.rt, "")
                if _proba_cache is not None:
                    _proba_cache[rec.rt] = hard
            negatives += [(c, "clf_top") for c in hard if c != rec.llt_code][:5]
        if cfg.neg > 0:
            rng = derive_rng(seed, "match", rec.id)
            if cfg.cos_sampler == "xtars":
                cos = sample_negatives_xtars(rec.llt_code, embeddings, cfg, rng)
            else:
                cos = sample_negatives_tars(rec.llt_code, embeddings, cfg.neg, rng)
            negatives += [(c, cos_tag) for c in cos]
        seen = {rec.llt_code}
        for code, tag in negatives:
            if code in seen:
                continue
            seen.add(code)
            examples.append(
                MatchExample(rec.rt, embeddings.name_of(code), False, tag, rec.id)
            )
    return examples


# ---------------------------------------------------------------------------
# pair featurization


class PairFeaturizer:
    """Joint features of a (reported term, label name) pair.

    Hashed n-grams of the term, of the label name, and of their word-token
    intersection live in a shared hash space under distinct prefixes; three
    dense slots hold similarity scalars (token Jaccard, char-n-gram cosine,
    label-word coverage) that generalize across unseen label names.
    """

    N_SCALARS = 3

    def __init__(self, config: FeaturizerConfig):
        self.config = config
        self.hasher = HashingFeaturizer(config)
        self._side_cache: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}
        self._pair_cache: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}

    @property
    def n_features(self) -> int:
        return self.config.n_features + self.N_SCALARS

    def _side(self, prefix: str, text: str):
        key = (prefix, text)
        cached = self._side_cache.get(key)
        if cached is None:
            weights = self.hasher.weights_for(
                [prefix + t for t in tokenize(text, self.config)]
            )
            idx = np.fromiter(weights.keys(), dtype=np.int64, count=len(weights))
            val = np.fromiter(weights.values(), dtype=np.float64, count=len(weights))
            cached = (idx, val)
            self._side_cache[key] = cached
        return cached

    def _pair(self, rt: str, name: str):
        key = (rt, name)
        cached = self._pair_cache.get(key)
        if cached is not None:
            return cached
        rt_words = set(rt.split())
        name_words = set(name.split())
        common = rt_words & name_words
        union = rt_words | name_words
        jaccard = len(common) / len(union) if union else 0.0
        coverage = len(common) / len(name_words) if name_words else 0.0

        ridx, rval = self._side("", rt)
        lidx, lval = self._side("", name)
        _, ri, li = np.intersect1d(ridx, lidx, assume_unique=True, return_indices=True)
        dot = float((rval[ri] * lval[li]).sum())
        denom = np.sqrt((rval * rval).sum() * (lval * lval).sum())
        cosine = dot / denom if denom > 0 else 0.0

        sides = [self._side("R|", rt), self._side("L|", name)]
        if common:
            sides.append(self._side("I|", " ".join(sorted(common))))
        idx = np.concatenate([s[0] for s in sides])
        val = np.concatenate([s[1] for s in sides])
        u, inv = np.unique(idx, return_inverse=True)
        acc = np.zeros(len(u))
        np.add.at(acc, inv, val)
        norm = np.sqrt((acc * acc).sum())
        if norm > 0:
            acc /= norm
        base = self.config.n_features
        indices = np.concatenate([u, [base, base + 1, base + 2]])
        data = np.concatenate([acc, [jaccard, cosine, coverage]])
        cached = (indices, data.astype(np.float32))
        self._pair_cache[key] = cached
        return cached

    def transform_pairs(self, rts, names) -> sp.csr_matrix:
        rts = list(rts)
        names = list(names)
        if len(rts) != len(names):
            raise MatcherError("rts and label names length mismatch")
        indptr = [0]
        chunks_i = []
        chunks_d = []
        for rt, name in zip(rts, names):
            if not rt.strip() or not name.strip():
                raise MatcherError("cannot featurize an empty pair side")
            idx, data = self._pair(rt, name)
            chunks_i.append(idx)
            chunks_d.append(data)
            indptr.append(indptr[-1] + len(idx))
        indices = np.concatenate(chunks_i) if chunks_i else np.empty(0, dtype=np.int64)
        data = np.concatenate(chunks_d) if chunks_d else np.empty(0, dtype=np.float32)
        return sp.csr_matrix(
            (data, indices, np.asarray(indptr, dtype=np.int64)),
            shape=(len(rts), self.n_features),
        )


# ---------------------------------------------------------------------------
# the matcher model


class PairMatcher(BaseEstimator):
    """Logistic model over joint pair features, trained with Adam."""

    def __init__(
        self,
        n_features: int = 2**18,
        char_ngrams: tuple[int, ...] = (2, 3, 4),
        use_word_unigrams: bool = True,
        hash_seed: int = 0,
        n_epochs: int = 5,
        batch_size: int = 64,
        learning_rate: float = 0.05,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        seed: int = 0,
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

    def _featurizer_config(self) -> FeaturizerConfig:
        return FeaturizerConfig(
            n_features=self.n_features,
            char_ngrams=tuple(self.char_ngrams),
            use_word_unigrams=self.use_word_unigrams,
            hash_seed=self.hash_seed,
        )

    @property
    def pair_featurizer_(self) -> PairFeaturizer:
        if not hasattr(self, "_pair_featurizer"):
            self._pair_featurizer = PairFeaturizer(self._featurizer_config())
        return self._pair_featurizer

    # -- incremental training API -----------------------------------------

    def init_params(self) -> None:
        dim = self.pair_featurizer_.n_features
        self.weights_ = np.zeros(dim, dtype=np.float32)
        self.bias_ = 0.0
        self._opt_w = LazyAdam(
            (dim,), lr=self.learning_rate, beta1=self.beta1, beta2=self.beta2, eps=self.eps
        )
        self._opt_b = ScalarAdam(
            lr=self.learning_rate, beta1=self.beta1, beta2=self.beta2, eps=self.eps
        )
        self._rng = np.random.default_rng(self.seed)

    def featurize_examples(self, examples) -> tuple[sp.csr_matrix, np.ndarray]:
        X = self.pair_featurizer_.transform_pairs(
            [e.rt for e in examples], [e.label_name for e in examples]
        )
        y = np.asarray([1.0 if e.is_match else 0.0 for e in examples])
        return X, y

    def run_epoch(self, X: sp.csr_matrix, y: np.ndarray) -> None:
        perm = self._rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], self.batch_size):
            batch = perm[start : start + self.batch_size]
            _, cols, grad_cols, grad_b = logistic_batch(
                self.weights_, self.bias_, X[batch], y[batch]
            )
            self._opt_w.step(self.weights_, cols, grad_cols)
            self.bias_ = self._opt_b.step(self.bias_, grad_b)

    # -- op-level training -------------------------------------------------

    def fit(self, examples, validation_examples=None):
        """Train on fixed match examples.

        With validation examples, the epoch checkpoint with the best pair
        accuracy is kept; otherwise the final epoch is returned.
        """
        examples = list(examples)
        flags = {e.is_match for e in examples}
        if flags != {True, False}:
            raise MatcherError("training examples must contain both match and non-match pairs")
        self.init_params()
        X, y = self.featurize_examples(examples)
        X_val = y_val = None
        if validation_examples:
            X_val, y_val = self.featurize_examples(list(validation_examples))
        best_acc, best_state = -1.0, None
        for _ in range(self.n_epochs):
            self.run_epoch(X, y)
            if X_val is not None:
                p = self._scores_matrix(X_val)
                acc = float(np.mean((p >= 0.5) == (y_val >= 0.5)))
                if acc > best_acc:
                    best_acc = acc
                    best_state = (self.weights_.copy(), self.bias_)
        if best_state is not None:
            self.weights_, self.bias_ = best_state
            self.validation_accuracy_ = best_acc
        else:
            self.validation_accuracy_ = float("nan")
        return self

    # -- scoring -----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise MatcherError("matcher is not fitted")

    def _scores_matrix(self, X: sp.csr_matrix) -> np.ndarray:
        z = np.asarray(X @ self.weights_, dtype=np.float64).ravel() + self.bias_
        return sigmoid(z)

    def score_pairs(self, rts, names) -> np.ndarray:
        self._check_fitted()
        X = self.pair_featurizer_.transform_pairs(rts, names)
        return self._scores_matrix(X)

    def score_pair(self, rt: str, name: str) -> float:
        return float(self.score_pairs([rt], [name])[0])

    # -- persistence -------------------------------------------------------

    def save(self, model_dir, sampler_config: Optional[SamplerConfig] = None) -> None:
        self._check_fitted()
        out = Path(model_dir)
        out.mkdir(parents=True, exist_ok=True)
        blob = struct.pack("<qq", 1, len(self.weights_)) + self.weights_.astype("<f4").tobytes()
        (out / "weights.bin").write_bytes(blob)
        manifest = {
            "format_version": MATCHER_FORMAT_VERSION,
            "model_type": "pair_matcher",
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
            "bias": self.bias_,
            "validation_accuracy": self.validation_accuracy_,
            "sampler": sampler_config.to_dict() if sampler_config else None,
            "sha256": {"weights.bin": hashlib.sha256(blob).hexdigest()},
        }
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, model_dir) -> tuple["PairMatcher", Optional[SamplerConfig]]:
        d = Path(model_dir)
        with open(d / "manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        blob = (d / "weights.bin").read_bytes()
        expected = manifest["sha256"]["weights.bin"]
        if hashlib.sha256(blob).hexdigest() != expected:
            raise MatcherError("hash mismatch for weights.bin: matcher bundle is corrupt")
        feat = FeaturizerConfig.from_dict(manifest["featurizer"])
        model = cls(
            n_features=feat.n_features,
            char_ngrams=feat.char_ngrams,
            use_word_unigrams=feat.use_word_unigrams,
            hash_seed=feat.hash_seed,
            seed=manifest["seed"],
            **manifest["hparams"],
        )
        _, dim = struct.unpack_from("<qq", blob)
        w = np.frombuffer(blob, dtype="<f4", offset=16).copy()
        if w.size != dim or dim != model.pair_featurizer_.n_features:
            raise MatcherError("weights.bin size does not match the featurizer config")
        model.weights_ = w
        model.bias_ = manifest["bias"]
        model.validation_accuracy_ = manifest["validation_accuracy"]
        sampler = manifest.get("sampler")
        return model, (SamplerConfig.from_dict(sampler) if sampler else None)


# ---------------------------------------------------------------------------
# training driver and candidate-limited prediction


@dataclass
class XtarsPrediction:
    llt_code: str
    match_score: float
    candidates: list[tuple[str, float]]


def xtars_predict(scorer, matcher: PairMatcher, embeddings: LabelEmbeddings,
                  rt: str, n: int = 5) -> XtarsPrediction:
    """Re-score the scorer's top-n candidates and return the best match.

    Exactly n matcher evaluations are performed; score ties go to the
    higher-ranked candidate.
    """
    return xtars_predict_many(scorer, matcher, embeddings, [rt], n)[0]


def xtars_predict_many(scorer, matcher: PairMatcher, embeddings: LabelEmbeddings,
                       rts, n: int = 5) -> list[XtarsPrediction]:
    rts = list(rts)
    if not rts:
        return []
    probs = scorer.predict_proba(rts)
    label_index = scorer.label_index_
    all_candidates = [top_n(row, label_index, n) for row in probs]
    pair_rts = [rt for rt, cands in zip(rts, all_candidates) for _ in cands]
    pair_names = [embeddings.name_of(code) for cands in all_candidates for code, _ in cands]
    scores = matcher.score_pairs(pair_rts, pair_names)
    out = []
    pos = 0
    for cands in all_candidates:
        s = scores[pos : pos + len(cands)]
        pos += len(cands)
        best = int(np.argmax(s))  # first occurrence wins ties -> higher rank
        out.append(XtarsPrediction(cands[best][0], float(s[best]), cands))
    return out


def fit_xtars_matcher(view, scorer, embeddings: LabelEmbeddings, cfg: SamplerConfig,
                      hparams: Optional[dict] = None, seed: int = 0,
                      resample_each_epoch: bool = True) -> PairMatcher:
    """Train a matcher on a dataset view using the configured sampling.

    Negatives are resampled each epoch by default. Checkpoint selection uses
    candidate-restricted prediction accuracy on the (capped) validation
    records, matching how the matcher is used at prediction time.
    """
    matcher = PairMatcher(seed=seed, **(hparams or {}))
    matcher.init_params()
    if not view.train:
        raise MatcherError("training view is empty")
    proba_cache: dict = {}

    val_records = list(view.validation)
    best_acc, best_state = -1.0, None
    for epoch in range(1, matcher.n_epochs + 1):
        epoch_seed = seed * 1000003 + (epoch if resample_each_epoch else 0)
        examples = build_match_training_set(
            view.train, scorer, embeddings, cfg, seed=epoch_seed, _proba_cache=proba_cache
        )
        if not any(not e.is_match for e in examples):
            raise MatcherError(
                "sampling produced no negatives (neg=0 and classifier negatives disabled)"
            )
        X, y = matcher.featurize_examples(examples)
        matcher.run_epoch(X, y)
        if val_records:
            preds = xtars_predict_many(
                scorer, matcher, embeddings, [r.rt for r in val_records], cfg.n_candidates
            )
            acc = float(np.mean([p.llt_code == r.llt_code for p, r in zip(preds, val_records)]))
            if acc > best_acc:
                best_acc = acc
                best_state = (matcher.weights_.copy(), matcher.bias_, epoch)
    if best_state is not None:
        matcher.weights_, matcher.bias_, matcher.selected_epoch_ = best_state
        matcher.validation_accuracy_ = best_acc
    else:
        matcher.selected_epoch_ = matcher.n_epochs
        matcher.validation_accuracy_ = float("nan")
    return matcher
