"""Model bundle persistence and the batch prediction HTTP service.

A bundle directory holds the ontology CSV, a scorer (single classifier or
ensemble), an optional matcher, and a manifest with content hashes that is
verified on load. The service exposes POST /predict and GET /health over an
immutable bundle; hot reload means restarting with a new bundle path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from xtars.classifier import SoftmaxTextClassifier, top_n
from xtars.ensemble import DeepEnsemble, predictive_entropy_rows
from xtars.matcher import LabelEmbeddings, PairMatcher, SamplerConfig
from xtars.ontology import Ontology, load_ontology

ENV_MODEL_DIR = "XTARS_MODEL_DIR"
DEFAULT_MAX_BATCH = 1024


class BundleError(ValueError):
    pass


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_bundle_manifest(
    bundle_dir,
    model_version: str,
    ontology_version: str = "unversioned",
    scorer_type: str = "ensemble",
    has_matcher: bool = False,
    entropy_threshold: float = 1.0,
    n_candidates: int = 5,
) -> None:
    """Write bundle.json for a directory laid out as ontology.csv + scorer/
    [+ matcher/], hashing every referenced file."""
    root = Path(bundle_dir)
    files = ["ontology.csv"]
    files += sorted(str(p.relative_to(root)) for p in (root / "scorer").rglob("*") if p.is_file())
    if has_matcher:
        files += sorted(
            str(p.relative_to(root)) for p in (root / "matcher").rglob("*") if p.is_file()
        )
    manifest = {
        "model_version": model_version,
        "ontology_version": ontology_version,
        "scorer_type": scorer_type,
        "has_matcher": has_matcher,
        "entropy_threshold": entropy_threshold,
        "n_candidates": n_candidates,
        "sha256": {f: _hash_file(root / f) for f in files},
    }
    with open(root / "bundle.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class ModelBundle:
    version: str
    ontology: Ontology
    scorer: object
    matcher: Optional[PairMatcher]
    embeddings: Optional[LabelEmbeddings]
    entropy_threshold: float
    n_candidates: int

    @classmethod
    def load(cls, bundle_dir) -> "ModelBundle":
        root = Path(bundle_dir)
        manifest_path = root / "bundle.json"
        if not manifest_path.exists():
            raise BundleError(f"no bundle.json in {root}")
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        for rel, expected in manifest["sha256"].items():
            path = root / rel
            if not path.exists() or _hash_file(path) != expected:
                raise BundleError(f"bundle self-validation failed for {rel}")
        ontology = load_ontology(root / "ontology.csv", version=manifest["ontology_version"])
        if manifest["scorer_type"] == "ensemble":
            scorer = DeepEnsemble.load(root / "scorer")
        else:
            scorer = SoftmaxTextClassifier.load(root / "scorer")
        matcher = embeddings = None
        if manifest.get("has_matcher"):
            matcher, _ = PairMatcher.load(root / "matcher")
            embeddings = LabelEmbeddings.from_ontology(ontology, scorer.featurizer_)
        return cls(
            version=manifest["model_version"],
            ontology=ontology,
            scorer=scorer,
            matcher=matcher,
            embeddings=embeddings,
            entropy_threshold=manifest.get("entropy_threshold", 1.0),
            n_candidates=manifest.get("n_candidates", 5),
        )

    def propose(self, rts: list[str]) -> list[dict]:
        """One proposal (or per-item error object) per input, in order."""
        cleaned = [rt.strip().lower() if isinstance(rt, str) else "" for rt in rts]
        live = [(i, rt) for i, rt in enumerate(cleaned) if rt]
        results: list[Optional[dict]] = [None] * len(rts)
        for i, _ in enumerate(cleaned):
            if not cleaned[i]:
                results[i] = {"error": "empty_rt", "rt": rts[i]}
        if live:
            texts = [rt for _, rt in live]
            probs = self.scorer.predict_proba(texts)
            entropies = predictive_entropy_rows(probs)
            label_index = self.scorer.label_index_
            n = min(self.n_candidates, len(label_index))
            candidates = [top_n(row, label_index, n) for row in probs]
            if self.matcher is not None:
                pair_rts = [t for (t, cands) in zip(texts, candidates) for _ in cands]
                pair_names = [
                    self.embeddings.name_of(code) for cands in candidates for code, _ in cands
                ]
                scores = self.matcher.score_pairs(pair_rts, pair_names)
            pos = 0
            for (i, rt), cands, entropy in zip(live, candidates, entropies):
                if self.matcher is not None:
                    s = scores[pos : pos + len(cands)]
                    pos += len(cands)
                    best = int(np.argmax(s))
                    code, confidence = cands[best][0], float(s[best])
                else:
                    code, confidence = cands[0][0], float(cands[0][1])
                pt_code, pt_name = self.ontology.pt_of(code)
                results[i] = {
                    "rt": rts[i],
                    "llt_code": code,
                    "llt_name": self.ontology.name_of(code),
                    "pt_code": pt_code,
                    "pt_name": pt_name,
                    "confidence": confidence,
                    "entropy": float(entropy),
                    "bracket_hint": "certain" if entropy <= self.entropy_threshold else "uncertain",
                    "model_version": self.version,
                }
        return results


class PredictRequest(BaseModel):
    rts: list[str]


def create_app(bundle: ModelBundle, max_batch: int = DEFAULT_MAX_BATCH) -> FastAPI:
    app = FastAPI(title="xtars", version=bundle.version)

    @app.exception_handler(RequestValidationError)
    async def malformed_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": "malformed_request"})

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "model_version": bundle.version,
            "ontology_version": bundle.ontology.version,
        }

    @app.post("/predict")
    def predict(request: PredictRequest):
        if len(request.rts) > max_batch:
            return JSONResponse(
                status_code=413,
                content={"error": "batch_too_large", "max_batch": max_batch},
            )
        return {"proposals": bundle.propose(request.rts)}

    return app


def serve(bundle_path, host: str = "127.0.0.1", port: int = 8000,
          max_batch: int = DEFAULT_MAX_BATCH) -> None:
    """Load a bundle and run the prediction service until interrupted."""
    import uvicorn

    bundle = ModelBundle.load(bundle_path)
    uvicorn.run(create_app(bundle, max_batch=max_batch), host=host, port=port)
