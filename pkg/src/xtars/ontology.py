"""Two-level label ontology: fine-grained LLT entries grouped under PTs.

Hierarchy levels above PT are deliberately not modeled. The ontology is
immutable after construction; prediction against codes from a different
ontology version surfaces as a lookup error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from xtars.corpus import CodedRecord, Source, make_variants
from xtars.rngs import derive_rng

CSV_HEADER = ["llt_code", "llt_name", "pt_code", "pt_name"]

#: Fixed timestamp for ontology-derived records; predates any real data so
#: real records win RT dedup collisions.
ONTOLOGY_TIMESTAMP = datetime(2000, 1, 1, tzinfo=timezone.utc)


class OntologyError(ValueError):
    pass


class UnknownLltCode(KeyError):
    """Raised when a code does not resolve in the active ontology version."""


@dataclass(frozen=True)
class LltEntry:
    llt_code: str
    llt_name: str
    pt_code: str
    pt_name: str

    def __post_init__(self):
        for attr in ("llt_name", "pt_name"):
            if not getattr(self, attr).strip():
                raise OntologyError(f"{attr} is empty for llt_code {self.llt_code!r}")


class Ontology:
    """Immutable set of LLT entries, each owned by exactly one PT."""

    def __init__(self, entries, version: str = "unversioned"):
        self.version = version
        self.entries: dict[str, LltEntry] = {}
        pt_names: dict[str, str] = {}
        for entry in entries:
            if entry.llt_code in self.entries:
                prev = self.entries[entry.llt_code]
                detail = (
                    "conflicting pt_code" if prev.pt_code != entry.pt_code else "duplicate row"
                )
                raise OntologyError(f"duplicate llt_code {entry.llt_code!r} ({detail})")
            known = pt_names.get(entry.pt_code)
            if known is not None and known != entry.pt_name:
                raise OntologyError(
                    f"pt_code {entry.pt_code!r} has conflicting names "
                    f"{known!r} vs {entry.pt_name!r}"
                )
            pt_names[entry.pt_code] = entry.pt_name
            self.entries[entry.llt_code] = entry

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, llt_code: str) -> bool:
        return llt_code in self.entries

    def codes(self) -> list[str]:
        return list(self.entries)

    def pt_of(self, llt_code: str) -> tuple[str, str]:
        """The unique (pt_code, pt_name) owning this LLT."""
        try:
            entry = self.entries[llt_code]
        except KeyError:
            raise UnknownLltCode(
                f"llt_code {llt_code!r} not in ontology version {self.version!r}"
            ) from None
        return entry.pt_code, entry.pt_name

    def name_of(self, llt_code: str) -> str:
        try:
            return self.entries[llt_code].llt_name
        except KeyError:
            raise UnknownLltCode(
                f"llt_code {llt_code!r} not in ontology version {self.version!r}"
            ) from None


def pt_of(ontology: Ontology, llt_code: str) -> tuple[str, str]:
    return ontology.pt_of(llt_code)


def load_ontology(path, version: str = "unversioned") -> Ontology:
    """Load an ontology from CSV (header llt_code,llt_name,pt_code,pt_name).

    Names are lowercased and whitespace-trimmed. Duplicate llt_code rows,
    conflicting PT assignments and empty names are hard errors.
    """
    path = Path(path)
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise OntologyError(f"ontology CSV {path} missing columns: {sorted(missing)}")
        for row in reader:
            entries.append(
                LltEntry(
                    llt_code=row["llt_code"].strip(),
                    llt_name=row["llt_name"].strip().lower(),
                    pt_code=row["pt_code"].strip(),
                    pt_name=row["pt_name"].strip().lower(),
                )
            )
    return Ontology(entries, version=version)


def save_ontology(ontology: Ontology, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for code in sorted(ontology.entries):
            e = ontology.entries[code]
            writer.writerow([e.llt_code, e.llt_name, e.pt_code, e.pt_name])


def ontology_to_records(ontology: Ontology, rng_seed: int = 0) -> list[CodedRecord]:
    """Three records per LLT: the name verbatim plus two misspelled variants.

    The verbatim record carries source=ontology; variants are augmented
    records pointing back at it. This puts every class in the training data
    even when no real samples exist.
    """
    if not len(ontology):
        raise OntologyError("ontology is empty")
    records = []
    for code in sorted(ontology.entries):
        entry = ontology.entries[code]
        verbatim = CodedRecord(
            id=f"ont-{code}",
            rt=entry.llt_name,
            llt_code=code,
            source=Source.ONTOLOGY,
            timestamp=ONTOLOGY_TIMESTAMP,
        )
        records.append(verbatim)
        records.extend(make_variants(verbatim, derive_rng(rng_seed, "ont", code)))
    return records


# ---------------------------------------------------------------------------
# synthetic generator

_MODIFIERS = [
    "acute", "chronic", "severe", "mild", "recurrent", "bilateral", "unilateral",
    "localized", "diffuse", "progressive", "transient", "congenital", "secondary",
    "idiopathic", "benign", "malignant", "focal", "generalized", "proximal",
    "distal", "lateral", "medial", "superficial", "deep", "partial", "complete",
    "early", "late", "atypical", "refractory",
]

_ANATOMY = [
    "renal", "hepatic", "cardiac", "pulmonary", "gastric", "dermal", "ocular",
    "nasal", "spinal", "cranial", "femoral", "tibial", "carpal", "thoracic",
    "lumbar", "cervical", "pelvic", "brachial", "plantar", "orbital",
    "aortic", "bronchial", "duodenal", "pancreatic", "splenic",
]

_CONDITIONS = [
    "pain", "oedema", "stenosis", "fibrosis", "necrosis", "hypertrophy",
    "atrophy", "inflammation", "haemorrhage", "ulceration", "lesion",
    "infection", "neuropathy", "spasm", "rupture", "obstruction",
    "dysfunction", "erosion", "calcification", "ischaemia",
]


def generate_synthetic_ontology(num_llt: int, num_pt: int, rng_seed: int = 0) -> Ontology:
    """Deterministic desk-scale stand-in for a licensed medical ontology.

    PT names are "<anatomy> <condition>" phrases; each PT owns one verbatim
    LLT plus modifier-prefixed siblings, so sibling LLTs share tokens and
    cosine-similar negatives are meaningfully hard.
    """
    if not (1 <= num_pt <= num_llt):
        raise OntologyError(f"need 1 <= num_pt ({num_pt}) <= num_llt ({num_llt})")
    rng = derive_rng(rng_seed, "synthetic-ontology")

    pairs = [(a, c) for a in _ANATOMY for c in _CONDITIONS]
    rng.shuffle(pairs)
    pt_names = [f"{a} {c}" for a, c in pairs]
    if num_pt > len(pt_names):
        extended = [f"{m} {a} {c}" for m in _MODIFIERS for a, c in pairs]
        rng.shuffle(extended)
        pt_names += extended
    if num_pt > len(pt_names):
        raise OntologyError(f"vocabulary too small for {num_pt} distinct PTs")
    pt_names = pt_names[:num_pt]

    entries = []
    used_llt_names = set()
    # one verbatim LLT per PT, mirroring how PT-level terms repeat at LLT level
    for i, pt_name in enumerate(pt_names):
        entries.append(
            LltEntry(
                llt_code=f"llt{i + 1:05d}",
                llt_name=pt_name,
                pt_code=f"pt{i + 1:05d}",
                pt_name=pt_name,
            )
        )
        used_llt_names.add(pt_name)

    next_code = num_pt + 1
    while next_code <= num_llt:
        pt_idx = int(rng.integers(num_pt))
        for _ in range(100):
            mods = rng.choice(len(_MODIFIERS), size=int(rng.integers(1, 3)), replace=False)
            name = " ".join(_MODIFIERS[m] for m in sorted(mods.tolist())) + " " + pt_names[pt_idx]
            if name not in used_llt_names:
                break
        else:
            continue  # this PT is saturated; try another
        used_llt_names.add(name)
        entries.append(
            LltEntry(
                llt_code=f"llt{next_code:05d}",
                llt_name=name,
                pt_code=f"pt{pt_idx + 1:05d}",
                pt_name=pt_names[pt_idx],
            )
        )
        next_code += 1
    return Ontology(entries, version=f"synthetic-{num_llt}-{num_pt}-s{rng_seed}")
