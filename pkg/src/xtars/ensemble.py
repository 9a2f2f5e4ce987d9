"""Deep ensembles, predictive entropy, and certainty-bracket partitions.

Ensemble members differ only by training seed; prediction averages their
probability distributions. Predictive entropy of the averaged distribution
drives the certainty brackets used throughout evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from xtars.classifier import SoftmaxTextClassifier, train_classifier
from xtars.features import FeaturizeError


class EnsembleError(ValueError):
    pass


class DeepEnsemble:
    """Seed-perturbed classifier ensemble sharing one label index."""

    def __init__(self, members):
        members = list(members)
        if not members:
            raise EnsembleError("ensemble needs at least one member")
        codes = members[0].label_index_.codes
        for m in members[1:]:
            if m.label_index_.codes != codes:
                raise EnsembleError("ensemble members disagree on the label index")
        self.members = members

    @property
    def label_index_(self):
        return self.members[0].label_index_

    @property
    def featurizer_(self):
        return self.members[0].featurizer_

    def predict_proba(self, texts) -> np.ndarray:
        """Element-wise arithmetic mean of member distributions."""
        acc = None
        for m in self.members:
            p = m.predict_proba(texts)
            acc = p if acc is None else acc + p
        return acc / len(self.members)

    def predict_distribution(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise FeaturizeError("cannot predict for empty text")
        return self.predict_proba([text])[0]

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        names = []
        for i, m in enumerate(self.members):
            name = f"member-{i:02d}"
            m.save(out / name)
            names.append({"dir": name, "seed": m.seed})
        manifest = {"model_type": "deep_ensemble", "members": names}
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, ensemble_dir) -> "DeepEnsemble":
        d = Path(ensemble_dir)
        with open(d / "manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        members = [SoftmaxTextClassifier.load(d / m["dir"]) for m in manifest["members"]]
        return cls(members)


def train_ensemble(train_records, validation_records, hparams: dict | None = None,
                   seeds=(1, 2, 3), classes=None) -> DeepEnsemble:
    """One classifier per seed; duplicate seeds are an error."""
    seeds = list(seeds)
    if len(set(seeds)) != len(seeds):
        raise EnsembleError(f"duplicate seeds in {seeds}")
    members = [
        train_classifier(train_records, validation_records, hparams, seed=s, classes=classes)
        for s in seeds
    ]
    return DeepEnsemble(members)


def predictive_entropy(dist) -> float:
    """Entropy -sum(p ln p) in nats, with 0 ln 0 treated as 0."""
    p = np.asarray(dist, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(-terms.sum(axis=-1))


def predictive_entropy_rows(dists: np.ndarray) -> np.ndarray:
    """Row-wise predictive entropy of a matrix of distributions."""
    p = np.asarray(dists, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


@dataclass
class BracketPartition:
    """Certainty brackets over a set of record ids, most-certain first.

    ``brackets`` maps bracket name ("all", "top-80%", "btm-50%", ...) to the
    frozen set of member ids. Bottom brackets nest by construction.
    """

    entropies: dict[str, float]
    brackets: dict[str, frozenset]

    def names(self) -> list[str]:
        return list(self.brackets)


def bracket_partition(entropies, ids=None, fractions=(0.8, 0.5, 0.25)) -> BracketPartition:
    """Partition records by ascending entropy into certainty brackets.

    The first fraction is the size of the most-certain ("top") bracket; the
    remaining fractions are least-certain ("btm") brackets. Sizes use floor
    rounding; ties are broken by record id. ``entropies`` may be a mapping
    id -> entropy, in which case ``ids`` must be omitted.
    """
    if isinstance(entropies, dict):
        if ids is not None:
            raise EnsembleError("pass ids either in the mapping or separately, not both")
        ids = list(entropies)
        entropies = list(entropies.values())
    entropies = [float(e) for e in entropies]
    n = len(entropies)
    if n < 1:
        raise EnsembleError("bracket partition needs at least one record")
    if ids is None:
        ids = list(range(n))
    ids = list(ids)
    if len(ids) != n:
        raise EnsembleError("ids and entropies length mismatch")

    order = sorted(range(n), key=lambda i: (entropies[i], ids[i]))
    top_frac, *btm_fracs = fractions

    def frac_name(kind, f):
        pct = f"{f * 100:g}"
        return f"{kind}-{pct}%"

    brackets = {"all": frozenset(ids)}
    n_top = int(np.floor(top_frac * n))
    brackets[frac_name("top", top_frac)] = frozenset(ids[i] for i in order[:n_top])
    for f in btm_fracs:
        n_btm = int(np.floor(f * n))
        sel = order[n - n_btm :] if n_btm else []
        brackets[frac_name("btm", f)] = frozenset(ids[i] for i in sel)
    return BracketPartition(
        entropies={ids[i]: entropies[i] for i in range(n)},
        brackets=brackets,
    )
