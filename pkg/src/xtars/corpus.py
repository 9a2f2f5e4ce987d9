"""Corpus ingestion, preprocessing, augmentation and leakage-safe splitting.

The pipeline is: drop records with unknown codes, lowercase + dedup by
reported term (most recent wins), merge in ontology-derived records, augment
rare classes, then split into train/validation/test. The test set is the most
recent slice of human-coded data; augmented records whose origin landed in
validation are removed from train to avoid target leakage.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from xtars.augment import char_change, word_split
from xtars.rngs import derive_rng


class CorpusError(ValueError):
    pass


class Source(str, Enum):
    CODED = "coded"
    AUTOCODED = "autocoded"
    SYNONYM = "synonym"
    ONTOLOGY = "ontology"
    AUGMENTED = "augmented"


#: Sources counted as "real" training samples (class-frequency reporting,
#: matcher training view). Ontology-derived and augmented records are not.
REAL_SOURCES = frozenset({Source.CODED, Source.AUTOCODED, Source.SYNONYM})


@dataclass(frozen=True)
class CodedRecord:
    """One (reported term, LLT code) pair with provenance."""

    id: str
    rt: str
    llt_code: str
    source: Source
    timestamp: datetime
    origin_id: Optional[str] = None

    def __post_init__(self):
        if (self.source is Source.AUGMENTED) != (self.origin_id is not None):
            raise CorpusError(
                f"record {self.id!r}: origin_id must be set iff source is 'augmented'"
            )


def _sort_key(record: CodedRecord):
    return (record.timestamp, record.id)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocessResult:
    records: list[CodedRecord]
    n_dropped_empty: int = 0
    n_dropped_duplicate: int = 0


def preprocess(records: Iterable[CodedRecord]) -> PreprocessResult:
    """Lowercase and trim reported terms, drop empties, dedup by RT.

    For each distinct RT string exactly one record survives: the one with the
    greatest timestamp (ties broken by record id). Drops are counted, never
    fatal.
    """
    n_empty = 0
    best: dict[str, CodedRecord] = {}
    order: list[str] = []
    n_seen = 0
    for rec in records:
        rt = rec.rt.strip().lower()
        if not rt:
            n_empty += 1
            continue
        n_seen += 1
        rec = replace(rec, rt=rt) if rt != rec.rt else rec
        cur = best.get(rt)
        if cur is None:
            best[rt] = rec
            order.append(rt)
        elif _sort_key(rec) > _sort_key(cur):
            best[rt] = rec
    kept = [best[rt] for rt in order]
    return PreprocessResult(
        records=kept,
        n_dropped_empty=n_empty,
        n_dropped_duplicate=n_seen - len(kept),
    )


def drop_unknown_codes(records, ontology) -> tuple[list[CodedRecord], int]:
    """Drop records whose llt_code is absent from the active ontology."""
    kept = [r for r in records if r.llt_code in ontology]
    return kept, len(records) - len(kept)


# ---------------------------------------------------------------------------
# augmentation


def make_variants(record: CodedRecord, rng: np.random.Generator) -> list[CodedRecord]:
    """Two misspelled variants of a record: one word split, one char change.

    Single-word inputs too short to split fall back to a second char change.
    """
    ws = word_split(record.rt, rng)
    cc = char_change(record.rt, rng)
    common = dict(
        llt_code=record.llt_code,
        source=Source.AUGMENTED,
        timestamp=record.timestamp,
        origin_id=record.id,
    )
    return [
        CodedRecord(id=f"{record.id}-aug-ws", rt=ws, **common),
        CodedRecord(id=f"{record.id}-aug-cc", rt=cc, **common),
    ]


def augment_rare(
    records: Iterable[CodedRecord],
    rare_threshold: int = 10,
    rng_seed: int = 0,
    sources: Optional[frozenset] = None,
) -> list[CodedRecord]:
    """Emit two simulated misspellings per record of a rare class.

    A class is rare when it has fewer than ``rare_threshold`` records in the
    input. ``sources`` optionally restricts which records get variants (rarity
    is still counted over all input records). Deterministic per seed and
    independent of input order.
    """
    records = list(records)
    counts = Counter(r.llt_code for r in records)
    out: list[CodedRecord] = []
    for rec in records:
        if counts[rec.llt_code] >= rare_threshold:
            continue
        if sources is not None and rec.source not in sources:
            continue
        out.extend(make_variants(rec, derive_rng(rng_seed, "rare", rec.id)))
    return out


# ---------------------------------------------------------------------------
# splits


@dataclass
class DatasetSplit:
    train: list[CodedRecord]
    validation: list[CodedRecord]
    test: list[CodedRecord]

    def record_by_id(self) -> dict[str, CodedRecord]:
        return {r.id: r for part in (self.train, self.validation, self.test) for r in part}


def make_splits(
    records: Iterable[CodedRecord],
    augmented: Iterable[CodedRecord],
    test_fraction: float = 0.05,
    val_fraction: float = 0.10,
    rng_seed: int = 0,
) -> DatasetSplit:
    """Split into train/validation/test.

    Test is the ceil(test_fraction * |coded|) most recent coded records
    (timestamp ties broken by id). Validation is a uniform random
    floor(val_fraction * |remaining coded|) sample of the remaining coded
    records. Train is everything else, minus augmented records whose origin
    is in validation.
    """
    records = list(records)
    augmented = list(augmented)
    coded = sorted((r for r in records if r.source is Source.CODED), key=_sort_key)
    if not coded:
        raise CorpusError("cannot form a test set: no coded records")
    n_test = math.ceil(test_fraction * len(coded))
    test = coded[len(coded) - n_test :]
    remaining = coded[: len(coded) - n_test]

    n_val = math.floor(val_fraction * len(remaining))
    rng = np.random.default_rng(rng_seed)
    val_idx = set(rng.choice(len(remaining), size=n_val, replace=False).tolist()) if n_val else set()
    validation = [remaining[i] for i in sorted(val_idx)]
    val_ids = {r.id for r in validation}

    train = [r for r in records if r.source is not Source.CODED]
    train += [r for i, r in enumerate(remaining) if i not in val_idx]
    train += [a for a in augmented if a.origin_id not in val_ids]
    return DatasetSplit(train=train, validation=validation, test=test)


def xtars_training_view(
    split: DatasetSplit, val_cap: int = 200, rng_seed: int = 0
) -> DatasetSplit:
    """Training view for the matcher: drop ontology-derived data, cap validation.

    Train keeps real records (coded/autocoded/synonym) and augmented records
    originating from them; validation is truncated to a deterministic random
    subset of at most ``val_cap`` records.
    """
    by_id = split.record_by_id()

    def keep(rec: CodedRecord) -> bool:
        if rec.source in REAL_SOURCES:
            return True
        if rec.source is Source.AUGMENTED:
            origin = by_id.get(rec.origin_id)
            return origin is not None and origin.source in REAL_SOURCES
        return False

    train = [r for r in split.train if keep(r)]
    validation = split.validation
    if len(validation) > val_cap:
        rng = np.random.default_rng(rng_seed)
        idx = rng.choice(len(validation), size=val_cap, replace=False)
        validation = [validation[i] for i in sorted(idx.tolist())]
    return DatasetSplit(train=train, validation=validation, test=list(split.test))


def class_frequency(split: DatasetSplit) -> dict[str, int]:
    """Per-class count of real (non-augmented, non-ontology) train records."""
    return dict(Counter(r.llt_code for r in split.train if r.source in REAL_SOURCES))


def verify_no_leakage(split: DatasetSplit) -> list[str]:
    """Return a list of human-readable leakage violations (empty = clean)."""
    problems = []
    test_rts = {r.rt for r in split.test}
    for part_name, part in (("train", split.train), ("validation", split.validation)):
        hits = sorted(test_rts & {r.rt for r in part})
        if hits:
            problems.append(f"test RTs present in {part_name}: {hits[:5]}")
    val_ids = {r.id for r in split.validation}
    bad = [r.id for r in split.train if r.source is Source.AUGMENTED and r.origin_id in val_ids]
    if bad:
        problems.append(f"augmented train records originate from validation: {bad[:5]}")
    not_coded = [r.id for r in split.test if r.source is not Source.CODED]
    if not_coded:
        problems.append(f"non-coded records in test: {not_coded[:5]}")
    return problems


# ---------------------------------------------------------------------------
# full dataset assembly


@dataclass
class DatasetBuildStats:
    n_dropped_empty: int = 0
    n_dropped_duplicate: int = 0
    n_dropped_unknown_code: int = 0
    n_ontology_records: int = 0
    n_ontology_dropped_collision: int = 0
    n_augmented: int = 0
    n_augmented_dropped_collision: int = 0


def build_dataset(
    raw_records: Iterable[CodedRecord],
    ontology,
    rare_threshold: int = 10,
    rng_seed: int = 0,
    augment_sources: Optional[frozenset] = frozenset({Source.CODED, Source.AUTOCODED}),
) -> tuple[list[CodedRecord], list[CodedRecord], DatasetBuildStats]:
    """Assemble the full (records, augmented) pair ready for make_splits.

    Ontology verbatim records join the real data under global RT dedup (real
    data is more recent, so it wins collisions). Augmented RTs colliding with
    any kept RT, or with an earlier augmented RT, are dropped so RT uniqueness
    holds globally before splitting. Synonyms are not augmented by default:
    they closely mirror the label names already covered by ontology variants.
    """
    from xtars.ontology import ontology_to_records  # local import to avoid cycle

    stats = DatasetBuildStats()
    kept, stats.n_dropped_unknown_code = drop_unknown_codes(list(raw_records), ontology)
    pre = preprocess(kept)
    stats.n_dropped_empty = pre.n_dropped_empty
    stats.n_dropped_duplicate = pre.n_dropped_duplicate
    real = pre.records

    ont_all = ontology_to_records(ontology, rng_seed) if len(ontology) else []
    ont_verbatim = [r for r in ont_all if r.source is Source.ONTOLOGY]
    ont_variants = [r for r in ont_all if r.source is Source.AUGMENTED]
    stats.n_ontology_records = len(ont_all)

    seen_rts = {r.rt for r in real}
    records = list(real)
    kept_ont_ids = set()
    for rec in ont_verbatim:
        if rec.rt in seen_rts:
            stats.n_ontology_dropped_collision += 1
            continue
        seen_rts.add(rec.rt)
        records.append(rec)
        kept_ont_ids.add(rec.id)
    dropped_ont_ids = {r.id for r in ont_verbatim} - kept_ont_ids

    rare = augment_rare(real, rare_threshold, rng_seed, sources=augment_sources)
    augmented: list[CodedRecord] = []
    for rec in ont_variants + rare:
        # variants of an ontology record that lost its RT collision go with it
        if rec.origin_id in dropped_ont_ids:
            stats.n_augmented_dropped_collision += 1
            continue
        if rec.rt in seen_rts:
            stats.n_augmented_dropped_collision += 1
            continue
        seen_rts.add(rec.rt)
        augmented.append(rec)
    stats.n_augmented = len(augmented)
    return records, augmented, stats


# ---------------------------------------------------------------------------
# synthetic corpus

_CORPUS_MODIFIERS = [
    "intermittent", "persistent", "sudden", "ongoing", "suspected",
    "worsening", "new onset", "unspecified", "marked", "occasional",
]


def generate_synthetic_corpus(
    ontology,
    n_records: int = 6000,
    rng_seed: int = 0,
    zipf_exponent: float = 1.1,
    coded_fraction: float = 0.7,
    autocoded_fraction: float = 0.2,
) -> list[CodedRecord]:
    """Long-tailed synthetic corpus of reported terms over an ontology.

    Class frequencies follow a Zipf law, so most classes see only a handful of
    samples. RTs are noisy renderings of the LLT name (misspellings, dropped
    or prepended words); autocoded records carry the name verbatim.
    """
    if not len(ontology):
        raise CorpusError("ontology is empty")
    rng = np.random.default_rng(rng_seed)
    codes = sorted(ontology.codes())
    ranks = np.arange(1, len(codes) + 1, dtype=float)
    probs = ranks**-zipf_exponent
    probs /= probs.sum()
    # shuffle so class rank is not correlated with code order
    rng.shuffle(probs)

    start = datetime(2020, 1, 1, tzinfo=timezone.utc)
    records = []
    for i in range(n_records):
        code = codes[int(rng.choice(len(codes), p=probs))]
        name = ontology.entries[code].llt_name
        u = rng.random()
        if u < autocoded_fraction:
            source, rt = Source.AUTOCODED, name
        else:
            source = Source.CODED if u < autocoded_fraction + coded_fraction else Source.SYNONYM
            rt = _noisy_rt(name, rng)
        ts = datetime.fromtimestamp(start.timestamp() + 60 * i, tz=timezone.utc)
        records.append(
            CodedRecord(id=f"c{i:06d}", rt=rt, llt_code=code, source=source, timestamp=ts)
        )
    return records


def _noisy_rt(name: str, rng: np.random.Generator) -> str:
    rt = name
    roll = rng.random()
    if roll < 0.35:
        rt = f"{_CORPUS_MODIFIERS[int(rng.integers(len(_CORPUS_MODIFIERS)))]} {rt}"
    elif roll < 0.5:
        words = rt.split(" ")
        if len(words) > 2:
            drop = int(rng.integers(len(words)))
            rt = " ".join(w for i, w in enumerate(words) if i != drop)
    n_edits = int(rng.integers(0, 3))
    for _ in range(n_edits):
        rt = char_change(rt, rng) if rng.random() < 0.7 else word_split(rt, rng)
    return rt


# ---------------------------------------------------------------------------
# JSONL / manifest IO


def record_to_json(rec: CodedRecord) -> dict:
    obj = {
        "id": rec.id,
        "rt": rec.rt,
        "llt_code": rec.llt_code,
        "source": rec.source.value,
        "timestamp": rec.timestamp.isoformat(),
    }
    if rec.origin_id is not None:
        obj["origin_id"] = rec.origin_id
    return obj


def record_from_json(obj: dict, default_id: Optional[str] = None) -> CodedRecord:
    ts = datetime.fromisoformat(obj["timestamp"])
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    rec_id = obj.get("id") or default_id
    if rec_id is None:
        raise CorpusError("record without id and no default provided")
    return CodedRecord(
        id=rec_id,
        rt=obj["rt"],
        llt_code=obj["llt_code"],
        source=Source(obj["source"]),
        timestamp=ts,
        origin_id=obj.get("origin_id"),
    )


def read_records_jsonl(path) -> list[CodedRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            records.append(record_from_json(json.loads(line), default_id=f"r{lineno:06d}"))
    return records


def write_records_jsonl(records: Iterable[CodedRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec), sort_keys=True) + "\n")


def split_summary(split: DatasetSplit) -> dict:
    freq = class_frequency(split)
    histogram = Counter(freq.values())
    per_source = {
        part: dict(Counter(r.source.value for r in getattr(split, part)))
        for part in ("train", "validation", "test")
    }
    return {
        "sizes": {
            "train": len(split.train),
            "validation": len(split.validation),
            "test": len(split.test),
        },
        "per_source": per_source,
        "class_frequency_histogram": {str(k): v for k, v in sorted(histogram.items())},
        "leakage": verify_no_leakage(split),
    }


def write_split(split: DatasetSplit, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records_jsonl(split.train, out / "train.jsonl")
    write_records_jsonl(split.validation, out / "validation.jsonl")
    write_records_jsonl(split.test, out / "test.jsonl")
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(split_summary(split), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_split(split_dir) -> DatasetSplit:
    d = Path(split_dir)
    return DatasetSplit(
        train=read_records_jsonl(d / "train.jsonl"),
        validation=read_records_jsonl(d / "validation.jsonl"),
        test=read_records_jsonl(d / "test.jsonl"),
    )
