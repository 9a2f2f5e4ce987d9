"""xtars: extreme-multiclass text coding at desk scale.

A base softmax classifier (optionally a deep ensemble) prunes a large label
space to a handful of candidates, which a binary text/label matcher trained
with hard negatives re-scores. Includes the full data-preparation pipeline,
predictive-entropy bracketing, evaluation reports, a CLI, and a small HTTP
serving layer.
"""

__version__ = "0.1.0"

from xtars.ontology import Ontology, LltEntry, load_ontology, generate_synthetic_ontology
from xtars.corpus import CodedRecord, Source, DatasetSplit
from xtars.classifier import SoftmaxTextClassifier, LabelIndex, top_n
from xtars.ensemble import DeepEnsemble, predictive_entropy, bracket_partition
from xtars.matcher import PairMatcher, SamplerConfig, xtars_predict

__all__ = [
    "Ontology",
    "LltEntry",
    "load_ontology",
    "generate_synthetic_ontology",
    "CodedRecord",
    "Source",
    "DatasetSplit",
    "SoftmaxTextClassifier",
    "LabelIndex",
    "top_n",
    "DeepEnsemble",
    "predictive_entropy",
    "bracket_partition",
    "PairMatcher",
    "SamplerConfig",
    "xtars_predict",
]
