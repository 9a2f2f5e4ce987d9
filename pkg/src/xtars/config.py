"""Single structured JSON config with per-stage sections.

CLI flags override config values; config values override these defaults.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

DEFAULTS = {
    "featurizer": {
        "n_features": 2**18,
        "char_ngrams": [2, 3, 4],
        "use_word_unigrams": True,
        "hash_seed": 0,
    },
    "classifier": {
        "n_epochs": 30,
        "batch_size": 64,
        "learning_rate": 0.05,
    },
    "ensemble": {
        "seeds": [1, 2, 3],
    },
    "matcher": {
        "n_epochs": 5,
        "batch_size": 64,
        "learning_rate": 0.05,
        "neg": 5,
        "k_multiplier": 3,
        "temperature": 0.01,
        "use_clf_top": True,
        "n_candidates": 5,
        "cos_sampler": "xtars",
        "val_cap": 200,
        "resample_each_epoch": True,
    },
    "eval": {
        "brackets": [0.8, 0.5, 0.25],
        "threshold": 0.5,
        "confidence_source": "auto",
    },
    "serve": {
        "host": "127.0.0.1",
        "port": 8000,
        "max_batch": 1024,
        "entropy_threshold": 1.0,
    },
}


class ConfigError(ValueError):
    pass


def load_config(path=None) -> dict:
    """Defaults deep-merged with the JSON file at ``path`` (if given)."""
    config = copy.deepcopy(DEFAULTS)
    if path is None:
        return config
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        user = json.load(fh)
    unknown = set(user) - set(config)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, values in user.items():
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        config[section].update(values)
    return config


def section_with_overrides(config: dict, section: str, **overrides) -> dict:
    """Section values with non-None overrides applied on top."""
    out = dict(config[section])
    for key, value in overrides.items():
        if value is not None:
            out[key] = value
    return out
